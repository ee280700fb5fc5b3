mod common;

use shiftgauge_core::autodiff::{Graph, Tensor, Var};
use shiftgauge_core::datagen::io::read_dataset;
use shiftgauge_core::harness::{export_target, prepare_seed, target_accuracy, true_target_error};
use shiftgauge_core::model::{Classifier, LinearModel};
use shiftgauge_core::{Error, Result};

/// Answers with the hidden label of any input row it has seen.
struct Memorizer {
    rows: Vec<(Vec<u64>, usize)>,
    k: usize,
    dim: usize,
}

impl Classifier for Memorizer {
    fn num_classes(&self) -> usize {
        self.k
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn logits_on(&self, graph: &mut Graph, x: Var) -> Result<Var> {
        let x = graph.value(x)?.clone();
        let mut logits = vec![0.0; x.rows() * self.k];
        for (i, row) in x.row_iter().enumerate() {
            let bits: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            let label = self.rows.iter().find(|(r, _)| *r == bits).expect("seen row").1;
            logits[i * self.k + label] = 10.0;
        }
        Ok(graph.constant(Tensor::matrix(x.rows(), self.k, logits)?))
    }
}

fn dumped(bundle: &shiftgauge_core::DataBundle) -> shiftgauge_core::datagen::io::DatasetFile {
    let mut bytes = Vec::new();
    export_target(bundle, &mut bytes).unwrap();
    read_dataset(bytes.as_slice()).unwrap()
}

#[test]
fn true_error_matches_recount_over_dumped_target() {
    let cfg = common::small_moons(40.0, &["naive"], &[0]);
    let p = prepare_seed(&cfg, 0).unwrap();
    let file = dumped(&p.bundle);
    assert_eq!(file.inputs, *p.bundle.target_view().inputs);
    for h in [&p.h_s, &p.h_t] {
        let predicted = h.predict_labels(&file.inputs).unwrap();
        let wrong = predicted.iter().zip(&file.labels).filter(|(a, b)| a != b).count();
        let expected = wrong as f64 / file.labels.len() as f64;
        assert_eq!(true_target_error(h, &p.bundle).unwrap(), expected);
        assert_eq!(target_accuracy(h, &p.bundle).unwrap(), 1.0 - expected);
    }
}

#[test]
fn memorizing_model_has_zero_error() {
    let bundle = common::small_moons(25.0, &["naive"], &[1]).build_bundle(1).unwrap();
    let file = dumped(&bundle);
    let rows = file
        .inputs
        .row_iter()
        .zip(&file.labels)
        .map(|(r, &l)| (r.iter().map(|v| v.to_bits()).collect(), l))
        .collect();
    let h = Memorizer {
        rows,
        k: file.k,
        dim: file.inputs.cols(),
    };
    assert_eq!(true_target_error(&h, &bundle).unwrap(), 0.0);
}

#[test]
fn constant_model_on_balanced_target() {
    let bundle = common::small_moons(0.0, &["naive"], &[2]).build_bundle(2).unwrap();
    let file = dumped(&bundle);
    let k = file.k;
    let per_class: Vec<usize> = (0..k).map(|c| file.labels.iter().filter(|&&l| l == c).count()).collect();
    assert!(per_class.iter().all(|&c| c == per_class[0]), "target is balanced: {per_class:?}");
    let constant = LinearModel::new(Tensor::zeros(vec![2, k]), vec![1.0, 0.0]).unwrap();
    assert_eq!(true_target_error(&constant, &bundle).unwrap(), 1.0 - 1.0 / k as f64);
}

#[test]
fn labels_are_refused_inside_a_source_free_phase() {
    let bundle = common::small_moons(10.0, &["naive"], &[0]).build_bundle(0).unwrap();
    let h = LinearModel::new(Tensor::zeros(vec![2, 2]), vec![0.0, 0.0]).unwrap();
    {
        let _phase = bundle.source_free_phase();
        assert!(matches!(true_target_error(&h, &bundle), Err(Error::GateViolation(_))));
        assert!(matches!(export_target(&bundle, Vec::new()), Err(Error::GateViolation(_))));
        let _ = bundle.source_train();
    }
    let counts = bundle.access_counts();
    assert_eq!(counts.source_free_label_reads, 2);
    assert_eq!(counts.source_free_source_reads, 1);
    assert_eq!(counts.gated_label_reads, 0);
    true_target_error(&h, &bundle).unwrap();
    assert_eq!(bundle.access_counts().gated_label_reads, 1);
}

#[test]
fn source_free_run_touches_no_source_or_hidden_labels() {
    let cfg = common::small_moons(30.0, &["naive", "rnd", "rnd_ens", "adv", "aap", "ac"], &[0, 1]);
    assert!(cfg.is_source_free());
    let report = shiftgauge_core::harness::run_experiment(&cfg).unwrap();
    for d in &report.seeds {
        let audit = d.audit.unwrap();
        assert_eq!(audit.source_reads, 0);
        assert_eq!(audit.label_reads_outside_gate, 0);
    }
}

#[test]
fn baselines_are_visible_to_the_audit() {
    let cfg = common::small_moons(30.0, &["naive", "doc"], &[0]);
    assert!(!cfg.is_source_free());
    let report = shiftgauge_core::harness::run_experiment(&cfg).unwrap();
    assert!(report.seeds[0].audit.unwrap().source_reads > 0);
}
