mod common;

use shiftgauge_core::harness::{
    parse_grid, prepare_seed, run_experiment_prepared, sweep_eps, sweep_eps_prepared, trend, trend_seed, PreparedSeed,
};
use shiftgauge_core::Error;

#[test]
fn trend_rows_follow_the_stride() {
    let cfg = common::small_moons(40.0, &["naive"], &[0, 1]);
    let report = trend(&cfg, 7).unwrap();
    let epochs = cfg.pafa.epochs;
    for &seed in &cfg.seeds {
        let rows: Vec<_> = report.seed_rows(seed).collect();
        let got: Vec<usize> = rows.iter().map(|r| r.epoch).collect();
        let mut want: Vec<usize> = (0..=epochs).step_by(7).collect();
        if *want.last().unwrap() != epochs {
            want.push(epochs);
        }
        assert_eq!(got, want);
        assert_eq!(rows[0].est_naive, 0.0);
        assert!(rows.iter().all(|r| r.true_error.to_bits() == rows[0].true_error.to_bits()));
        for r in &rows {
            for v in [r.est_naive, r.est_adv, r.est_aap] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}

#[test]
fn trend_final_state_matches_a_plain_run() {
    let cfg = common::small_moons(40.0, &["naive"], &[2]);
    let rows = trend_seed(&cfg, 2, 5).unwrap();
    let prepared = [prepare_seed(&cfg, 2)];
    let report = run_experiment_prepared(&cfg, &prepared);
    let last = rows.last().unwrap();
    assert_eq!(last.epoch, cfg.pafa.epochs);
    assert_eq!(Some(last.est_naive), report.rows[0].estimate);
    assert_eq!(Some(last.true_error), report.rows[0].true_error);
}

#[test]
fn trend_csv_has_one_line_per_row() {
    let cfg = common::small_moons(20.0, &["naive"], &[0]);
    let report = trend(&cfg, 10).unwrap();
    let csv = String::from_utf8(report.trend_csv().unwrap()).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "seed,epoch,est_naive,est_adv,est_aap,true_error");
    assert_eq!(csv.lines().count(), report.rows.len() + 1);
    assert!(matches!(trend(&cfg, 0), Err(Error::Config(_))));
}

#[test]
fn sweep_at_zero_equals_naive() {
    let cfg = common::small_moons(40.0, &["naive"], &[0, 1, 2]);
    let prepared: Vec<_> = cfg.seeds.iter().map(|&s| prepare_seed(&cfg, s)).collect();
    let naive = run_experiment_prepared(&cfg, &prepared);
    let seeds: Vec<&PreparedSeed> = prepared.iter().map(|p| p.as_ref().unwrap()).collect();
    let sweep = sweep_eps_prepared(&[(&cfg, &seeds)], &[0.0]).unwrap();
    assert_eq!(sweep.points.len(), 1);
    let s = naive.summary_for("naive").unwrap();
    assert!((sweep.points[0].mae_mean - s.mae_mean).abs() < 1e-12);
    assert!((sweep.points[0].mae_std - s.mae_std).abs() < 1e-12);
}

#[test]
fn sweep_macro_averages_configs() {
    let a = common::small_moons(20.0, &["naive"], &[0, 1]);
    let b = common::small_moons(40.0, &["naive"], &[0, 1]);
    let grid = [0.0, 0.5, 1.0];
    let report = sweep_eps(&[a, b], &grid).unwrap();
    assert_eq!(report.points.len(), grid.len());
    assert_eq!(report.per_config.len(), 2);
    for (g, p) in report.points.iter().enumerate() {
        assert_eq!(p.eps, grid[g]);
        let mean = (report.per_config[0].points[g].mae_mean + report.per_config[1].points[g].mae_mean) / 2.0;
        assert!((p.mae_mean - mean).abs() < 1e-12);
    }
    let csv = String::from_utf8(report.sweep_csv().unwrap()).unwrap();
    assert_eq!(csv.lines().count(), grid.len() + 1);
}

#[test]
fn sweep_needs_matching_seed_counts() {
    let a = common::small_moons(20.0, &["naive"], &[0, 1]);
    let b = common::small_moons(40.0, &["naive"], &[0]);
    assert!(matches!(sweep_eps(&[a, b], &[0.0]), Err(Error::Config(_))));
}

#[test]
fn grids_parse() {
    assert_eq!(parse_grid("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
    assert_eq!(parse_grid("0,0.5,1,1.5,2,3").unwrap(), vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0]);
    assert_eq!(parse_grid("2").unwrap(), vec![2.0]);
    assert_eq!(parse_grid("0:0.3:0.1").unwrap().len(), 4);
    for bad in ["", "1,0", "0,0", "-1", "0:1", "0:1:0", "1:0:0.5", "a,b", "0,inf", "0,NaN"] {
        assert!(matches!(parse_grid(bad), Err(Error::Config(_))), "{bad:?} accepted");
    }
}
