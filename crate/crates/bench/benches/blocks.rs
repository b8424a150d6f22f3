use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rkstack_core::data::TaskSpec;
use rkstack_core::network::{HoNetwork, NetworkShape};
use rkstack_core::schemes::Scheme;
use rkstack_core::subnet::Mode;
use rkstack_core::Tape;

// Equal depth and width across schemes, so every case does the same number
// of stage evaluations; differences come from the blending.
const DEPTH: usize = 58;
const WIDTH: usize = 32;
const BATCH: usize = 128;

fn schemes() -> [Scheme; 5] {
    [Scheme::Euler, Scheme::Midpoint, Scheme::Rk4, Scheme::VernerFixed, Scheme::VernerAdaptive]
}

fn batch() -> (rkstack_core::Tensor, Vec<usize>) {
    let (train, _) = TaskSpec::spirals().generate(0).unwrap();
    let idx: Vec<usize> = (0..BATCH).collect();
    train.gather(&idx).unwrap()
}

fn train_step(c: &mut Criterion) {
    let (x, y) = batch();
    let mut group = c.benchmark_group("train_step");
    for scheme in schemes() {
        let net = HoNetwork::build(&NetworkShape::dense(scheme, DEPTH, WIDTH, 2, 2), 1).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(scheme), &net, |b, net| {
            b.iter(|| {
                let mut tape = Tape::new();
                let out = net.forward(&mut tape, &x, Mode::Train).unwrap();
                let loss = tape.softmax_cross_entropy(out.logits, &y).unwrap();
                tape.backward(loss).unwrap();
                tape
            })
        });
    }
    group.finish();
}

fn eval_forward(c: &mut Criterion) {
    let (x, _) = batch();
    let mut group = c.benchmark_group("eval_forward");
    for scheme in schemes() {
        let net = HoNetwork::build(&NetworkShape::dense(scheme, DEPTH, WIDTH, 2, 2), 1).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(scheme), &net, |b, net| {
            b.iter(|| net.predict(&x).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, eval_forward);
criterion_main!(benches);
