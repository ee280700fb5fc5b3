use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use shiftgauge_bench::{glyphs, moons, Fixture};
use shiftgauge_core::datagen::Augmenter;
use shiftgauge_core::estimators::{est_aap, est_adv, est_naive, est_rnd};
use shiftgauge_core::harness::gradcheck::gradcheck;
use shiftgauge_core::model::{smoothed_targets, soft_cross_entropy, Mode};
use shiftgauge_core::pafa::{adapt, PafaConfig, PrototypeSimilarity};
use shiftgauge_core::perturb::{vap, PerturbSpec};
use shiftgauge_core::Graph;

fn forward_backward(c: &mut Criterion) {
    let f = glyphs();
    let x = f.bundle.target_view().inputs.clone();
    let labels = f.h_s.predict_labels(&x).unwrap();
    let targets = smoothed_targets(&labels, f.h_s.k(), 0.1);
    c.bench_function("mlp forward+backward (glyphs, full target)", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let vars = f.h_s.params().bind(&mut g);
            let xv = g.constant(x.clone());
            let logits = f.h_s.forward(&mut g, xv, &vars, Mode::Eval).unwrap().logits;
            let loss = soft_cross_entropy(&mut g, targets.clone(), logits).unwrap();
            g.backward(loss).unwrap();
            black_box(g.grad(vars[0]).is_some())
        })
    });
}

fn estimators(c: &mut Criterion) {
    let spec = PerturbSpec::default();
    for (name, f) in [("moons", moons()), ("glyphs", glyphs())] {
        let Fixture { bundle, h_s, h_t } = &f;
        let _phase = bundle.source_free_phase();
        let view = bundle.target_view();
        let x = view.inputs;
        let aug = Augmenter::fit(x, view.kind).unwrap();
        let mut group = c.benchmark_group(format!("estimators/{name}"));
        group.bench_function("naive", |b| b.iter(|| est_naive(h_s, h_t, x).unwrap().value));
        group.bench_function("rnd", |b| b.iter(|| est_rnd(h_s, h_t, x, &aug, spec.rnd_strength, 1, 0).unwrap().value));
        group.bench_function("vap", |b| b.iter(|| vap(h_t, x, &vec![1.0; x.rows()], &spec, 0).unwrap().0));
        group.bench_function("adv", |b| b.iter(|| est_adv(h_s, h_t, x, 1.0, &spec, 0).unwrap().0.value));
        group.bench_function("aap", |b| b.iter(|| est_aap(h_s, h_t, &view, &spec, 0).unwrap().0.value));
        group.finish();
    }
}

fn adaptation(c: &mut Criterion) {
    let f = moons();
    let view = f.bundle.target_view();
    let cfg = PafaConfig {
        epochs: 5,
        similarity: PrototypeSimilarity::Cosine,
        ..Default::default()
    };
    let mut group = c.benchmark_group("pafa");
    group.sample_size(10);
    group.bench_function("adapt 5 epochs (moons)", |b| {
        b.iter_batched(|| f.h_s.clone(), |h| adapt(&h, view.inputs, view.kind, &cfg).unwrap().0, BatchSize::SmallInput)
    });
    group.finish();
}

fn verification(c: &mut Criterion) {
    let mut group = c.benchmark_group("verification");
    group.sample_size(10);
    group.bench_function("gradcheck", |b| b.iter(|| gradcheck().unwrap().passed()));
    group.finish();
}

criterion_group!(benches, forward_backward, estimators, adaptation, verification);
criterion_main!(benches);
