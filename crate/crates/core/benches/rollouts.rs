use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use residual_insert::curriculum::{CurriculumState, Difficulty, Experiment};
use residual_insert::harness::{run_round, ActMode, Config, Execution, PolicyIo, Worker};
use residual_insert::policy::Agent;
use residual_insert::residual::ResidualMode;
use residual_insert::rng::{stream, Purpose};

fn rollouts(c: &mut Criterion) {
    let mut config = Config::default();
    config.experiment.mode = ResidualMode::Hybrid;
    config.experiment.experiment = Experiment::Both;
    let io = PolicyIo::from_config(&config);
    let agent = Agent::new(
        config.experiment.mode.action_dim(config.arm.n_joints()),
        config.optimizer.clone(),
        &mut stream(0, 0, Purpose::Policy),
    )
    .unwrap();
    let difficulty = CurriculumState::fixed(Difficulty::new(0.01, 0.05));

    let mut group = c.benchmark_group("round");
    group.sample_size(10);
    for n in [4usize, 16] {
        for (name, exec) in [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)] {
            let mut workers: Vec<Worker> = (0..n as u64)
                .map(|i| Worker::new(&config, 0, i, false, difficulty.clone()).unwrap())
                .collect();
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, &n| {
                b.iter(|| run_round(&mut workers, n, &agent, &io, ActMode::Sample, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, rollouts);
criterion_main!(benches);
