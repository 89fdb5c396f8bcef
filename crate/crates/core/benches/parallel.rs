//! Sequential versus data-parallel execution of the hot loops: formula
//! evaluation, daily IC, and the policy gradient.

use alphaforge::data::{synth_panel, SynthSpec};
use alphaforge::eval::Evaluator;
use alphaforge::expr::{parse_rpn, tokenize};
use alphaforge::metrics::{ic_series, IcKind};
use alphaforge::par::Exec;
use alphaforge::policy::{PolicyConfig, PolicyModel};
use alphaforge::ppo::{loss_and_grad, random_batch, PpoConfig};
use alphaforge::vocab::Vocabulary;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn evaluation(c: &mut Criterion) {
    let vocab = Vocabulary::default();
    let spec = SynthSpec {
        seed: 1,
        n_assets: 200,
        n_days: 750,
        planted: None,
        noise_std: 1.0,
    };
    let (panel, y) = synth_panel(&spec, &vocab).unwrap();
    let text = "close 20 Std volume 10 Mean Div close 5 Delta 10 Corr SEP";
    let tree = parse_rpn(&tokenize(text, &vocab).unwrap(), &vocab).unwrap();
    let mut g = c.benchmark_group("evaluate");
    for (name, exec) in MODES {
        let ev = Evaluator::default().with_exec(exec);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                ev.evaluate(black_box(&tree), &vocab, &panel, 100..750)
                    .unwrap()
            })
        });
    }
    g.finish();

    let z = Evaluator::default()
        .evaluate(&tree, &vocab, &panel, 100..750)
        .unwrap()
        .valid()
        .unwrap();
    let mut g = c.benchmark_group("rank_ic");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| ic_series(black_box(&z), &y, 100..750, IcKind::Rank, exec).unwrap())
        });
    }
    g.finish();
}

fn gradient(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = PolicyModel::new(PolicyConfig::default(), 53, &mut rng);
    let batch = random_batch(&model, 32, 20, &mut rng);
    let cfg = PpoConfig::default();
    let mut g = c.benchmark_group("policy_gradient");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| loss_and_grad(black_box(&model), &batch, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, evaluation, gradient);
criterion_main!(benches);
