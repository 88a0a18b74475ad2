use criterion::{criterion_group, criterion_main, Criterion};

use dunet_bench::{random, toy_model};
use dunet_core::codec::{decode_landmarks, render_heatmaps, CodecConfig, LandmarkSet};
use dunet_core::data::{generate, SynthConfig};
use dunet_core::engine::Tape;
use dunet_core::graph::{run, Mode, ParamStore};
use dunet_core::topology::build_model;
use dunet_core::trainer::{TrainConfig, Trainer};

fn forward_backward(c: &mut Criterion) {
    let cfg = toy_model();
    let model = build_model(&cfg).unwrap();
    let store = ParamStore::<f32>::init(&model.program, 0);
    let x = random(cfg.input_shape(8), 1);
    let mut g = c.benchmark_group("toy_model_batch8");
    g.sample_size(10);
    g.bench_function("forward_eval", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            run(&model.program, &store, &mut tape, v, Mode::Eval, false).unwrap()
        })
    });
    g.bench_function("forward_backward_train", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let f = run(&model.program, &store, &mut tape, v, Mode::Train, true).unwrap();
            let s = tape.sum(*f.outputs.last().unwrap()).unwrap();
            tape.backward(s).unwrap()
        })
    });
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let data = generate(&SynthConfig::default(), 16).unwrap();
    let mut trainer = Trainer::new(TrainConfig::default()).unwrap();
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("step_batch8", |b| b.iter(|| trainer.step_on(&data).unwrap()));
    g.finish();
}

fn codec(c: &mut Criterion) {
    let cfg = CodecConfig::default();
    let lms = LandmarkSet::new((0..68).map(|i| [(i * 7 % 120) as f64 + 3.3, (i * 13 % 120) as f64 + 1.7]).collect());
    let maps = render_heatmaps(&cfg, &lms);
    c.bench_function("codec/render68", |b| b.iter(|| render_heatmaps(&cfg, &lms)));
    c.bench_function("codec/decode68", |b| b.iter(|| decode_landmarks(&cfg, &maps, 0)));
}

criterion_group!(benches, forward_backward, train_step, codec);
criterion_main!(benches);
