use criterion::{criterion_group, criterion_main, Criterion};
use prosody_core::dsp::stft::{stft, StftConfig};
use prosody_core::dsp::{mel_spectrogram, MelConfig, Waveform};
use prosody_core::eval::dtw_align;
use prosody_core::numerics::nn::BiLstm;
use prosody_core::{ParamSet, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn tone(seconds: f64) -> Vec<f64> {
    let n = (16_000.0 * seconds) as usize;
    (0..n)
        .map(|i| 0.3 * (std::f64::consts::TAU * 180.0 * i as f64 / 16_000.0).sin())
        .collect()
}

fn conv2d(c: &mut Criterion) {
    let input = random(&[8, 40, 40], 1);
    let kernel = random(&[8, 8, 3, 3], 2);
    c.bench_function("conv2d forward+backward 8x40x40", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let x = t.variable(input.clone()).unwrap();
            let k = t.variable(kernel.clone()).unwrap();
            let y = t.conv2d(x, k, None, (1, 1), (1, 1)).unwrap();
            let l = t.sum(y).unwrap();
            t.backward(l).unwrap();
            black_box(t.item(l))
        })
    });
}

fn bilstm(c: &mut Criterion) {
    let mut set = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lstm = BiLstm::new(&mut set, "lstm", 32, 32, &mut rng);
    let input = random(&[50, 32], 4);
    c.bench_function("bilstm forward+backward 50x32", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let x = t.variable(input.clone()).unwrap();
            let y = lstm.forward(&mut t, &set, x).unwrap();
            let l = t.sum(y).unwrap();
            t.backward(l).unwrap();
            black_box(t.item(l))
        })
    });
}

fn dtw(c: &mut Criterion) {
    let a = random(&[200, 13], 5);
    let b = random(&[180, 13], 6);
    c.bench_function("dtw 200x180", |bench| {
        bench.iter(|| black_box(dtw_align(&a, &b).unwrap().cost))
    });
}

fn spectral(c: &mut Criterion) {
    let samples = tone(2.0);
    c.bench_function("stft 2 s", |b| {
        b.iter(|| black_box(stft(&samples, StftConfig::default()).unwrap()))
    });
    let wave = Waveform::new(samples.clone(), 16_000);
    let mel = MelConfig::default();
    c.bench_function("log-mel 2 s", |b| {
        b.iter(|| black_box(mel_spectrogram(&wave, &mel).unwrap()))
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(10);
    targets = conv2d, bilstm, dtw, spectral
}
criterion_main!(kernels);
