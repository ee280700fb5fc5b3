use shiftgauge_core::autodiff::PrimitiveFault;
use shiftgauge_core::harness::gradcheck::{gradcheck, gradcheck_with, GradcheckOptions, MAX_ANGLE_DEG, MAX_REL_ERROR};

#[test]
fn gradcheck_passes_quickly() {
    let r = gradcheck().unwrap();
    assert!(r.passed(), "{r:?}");
    assert_eq!(r.coords_checked, 100);
    assert!(r.max_rel_error <= MAX_REL_ERROR);
    assert!(r.vap_max_angle_deg <= MAX_ANGLE_DEG);
    assert!(r.vap_rows_checked >= 100);
    assert!(r.adv_kl_mean >= r.rnd_kl_mean);
    assert!(r.elapsed_s < 60.0);
}

#[test]
fn corrupted_primitives_are_caught() {
    for fault in [PrimitiveFault::ReluBackward, PrimitiveFault::MatMulBackward] {
        let r = gradcheck_with(&GradcheckOptions {
            fault: Some(fault),
            ..Default::default()
        })
        .unwrap();
        assert!(!r.gradients_pass(), "{fault:?} went unnoticed: {r:?}");
        assert!(!r.passed());
    }
}

#[test]
fn other_seeds_pass_too() {
    for seed in [1, 2, 3] {
        let r = gradcheck_with(&GradcheckOptions { seed, ..Default::default() }).unwrap();
        assert!(r.passed(), "seed {seed}: {r:?}");
    }
}
