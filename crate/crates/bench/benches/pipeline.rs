use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xteach::autograd::Tape;
use xteach::evalkit::hd95;
use xteach::losses::ContrastConfig;
use xteach::segnets::{random_batch, Model, ModelSpec};
use xteach::spatreg::{register_affine, RegistrationConfig};
use xteach::synthgen::{build_cohort, CohortSpec, PhantomSpec};
use xteach::trainkit::{Flags, TrainConfig, TrainData, Trainer};

fn cohort(n_train: usize) -> xteach::synthgen::Cohort {
    let spec = CohortSpec {
        n_train,
        n_test: 1,
        n_labeled: 1,
        phantom: PhantomSpec::standard(32),
    };
    build_cohort(&spec, 1).expect("cohort")
}

fn registration(c: &mut Criterion) {
    let co = cohort(2);
    let (a, b) = (&co.dataset.cases[0].volume, &co.dataset.cases[1].volume);
    let cfg = RegistrationConfig::default();
    let mut g = c.benchmark_group("registration");
    g.sample_size(10);
    g.bench_function("affine_pair_32", |bch| bch.iter(|| register_affine(a, b, &cfg).unwrap()));
    g.finish();
}

fn forward_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_batch::<f32>(8, 32, &mut rng);
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    for spec in [ModelSpec::convnet(4, 32), ModelSpec::mixer(4, 32)] {
        let m = Model::<f32>::init(&spec, &mut rng).unwrap();
        g.bench_function(format!("{:?}_fwd_bwd_b8", spec.arch).to_lowercase(), |bch| {
            bch.iter(|| {
                let mut tape = Tape::new();
                let bound = m.bind(&mut tape, true);
                let out = m.forward(&mut tape, &bound, &x).unwrap();
                let s = tape.sum(out.prob);
                tape.backward(s).unwrap()
            })
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let co = cohort(4);
    let data = TrainData::new(&co.dataset, None).unwrap();
    let cfg = TrainConfig {
        t_total: 1_000_000,
        flags: Flags {
            scl: true,
            ..Flags::default()
        },
        n_labeled: 1,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(cfg, ContrastConfig::default(), data, None).unwrap();
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("step_scl_b8", |bch| bch.iter(|| tr.step().unwrap()));
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let co = cohort(2);
    let (a, b) = (&co.dataset.cases[0], &co.dataset.cases[1]);
    let la = &co.oracle.labels(a.volume.id).unwrap().labels;
    let lb = &co.oracle.labels(b.volume.id).unwrap().labels;
    let grid = a.volume.grid;
    c.bench_function("hd95_volume_32", |bch| bch.iter(|| hd95(la, lb, 1, grid.dims, grid.spacing)));
}

criterion_group!(benches, registration, forward_backward, train_step, metrics);
criterion_main!(benches);
