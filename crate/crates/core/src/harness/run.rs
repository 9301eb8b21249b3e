//! Collect-update training loop with seeded training and evaluation pools.

use std::path::Path;

use serde::Serialize;

use super::config::Config;
use super::csv_out::write_csv;
use crate::controller::Phase;
use crate::curriculum::{CurriculumState, Difficulty};
use crate::error::{Error, Result};
use crate::policy::{Agent, Episode, ObsScale, ObsWindow, RolloutBuffer, Step, UpdateStats};
use crate::residual::{ResidualBounds, ResidualCommand, ResidualMode};
use crate::rng::{stream, Purpose, Stream};
use crate::world::Env;

/// How a pool steps its environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Data-parallel over environments when the `parallel` feature is on.
    #[default]
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub trajectory: Episode,
    pub success: bool,
    pub ret: f64,
    pub ticks: u64,
    pub final_phase: Phase,
    pub ik_fallbacks: u64,
    pub mean_residual: f64,
    pub difficulty: Difficulty,
}

/// One environment plus its private random streams and curriculum.
#[derive(Debug, Clone)]
pub struct Worker {
    pub env: Env,
    pub id: u64,
    pub curriculum: CurriculumState,
    holes: Stream,
    sampling: Stream,
    noise: Stream,
    window: ObsWindow,
}

/// Policy-facing settings shared by all workers of a run.
#[derive(Debug, Clone)]
pub struct PolicyIo {
    pub mode: ResidualMode,
    pub bounds: ResidualBounds,
    pub scale: ObsScale,
    pub frames: usize,
}

impl Worker {
    pub fn new(config: &Config, seed: u64, id: u64, eval: bool, curriculum: CurriculumState) -> Result<Self> {
        let mut env = Env::new(
            config.arm.clone(),
            config.controller.clone(),
            config.world.clone(),
            config.experiment.mode,
        )?;
        env.set_scratch(config.experiment.scratch);
        let (holes, sampling, noise) = if eval {
            (Purpose::EvalHoles, Purpose::Diagnostic, Purpose::ObservationNoise)
        } else {
            (Purpose::TrainHoles, Purpose::Sampling, Purpose::ObservationNoise)
        };
        // Evaluation streams live in a separate id range so pools never overlap.
        let key = if eval { id + (1 << 32) } else { id };
        Ok(Self {
            env,
            id,
            curriculum,
            holes: stream(seed, key, holes),
            sampling: stream(seed, key, sampling),
            noise: stream(seed, key, noise),
            window: ObsWindow::new(config.optimizer.window),
        })
    }

    /// Run one full episode at the worker's current difficulty.
    pub fn run_episode(&mut self, agent: &Agent, io: &PolicyIo, act: ActMode) -> Result<EpisodeOutcome> {
        let difficulty = self.curriculum.difficulty();
        let obs = self.env.reset(&difficulty, &mut self.holes);
        self.window.clear();
        self.window.push(&io.scale.apply(&obs));
        let n = self.env.arm().n_joints();
        let mut traj = Episode::default();
        let mut ret = 0.0;
        let mut residual_sum = 0.0;
        let mut residual_steps = 0u64;
        loop {
            let mut cmd = None;
            let mut step = None;
            if io.mode != ResidualMode::None && self.env.rl_active() {
                let input = self.window.as_slice().to_vec();
                let (raw, lp, value) = match act {
                    ActMode::Sample => agent.act(&input, &mut self.sampling)?,
                    ActMode::Mean => (agent.act_mean(&input)?, 0.0, 0.0),
                };
                cmd = Some(ResidualCommand::from_raw(io.mode, &raw, &io.bounds, n)?);
                step = Some(Step {
                    input,
                    action: raw,
                    log_prob: lp,
                    value,
                    reward: 0.0,
                });
            }
            let t = self.env.step(cmd, Some(&mut self.noise))?;
            if let Some(s) = step {
                traj.steps.push(s);
                residual_sum += t.info.residual_magnitude;
                residual_steps += 1;
            }
            traj.add_reward(t.reward);
            ret += t.reward;
            self.window.push(&io.scale.apply(&t.observation));
            if t.done {
                return Ok(EpisodeOutcome {
                    trajectory: traj,
                    success: t.info.success,
                    ret,
                    ticks: t.info.tick,
                    final_phase: t.info.phase,
                    ik_fallbacks: self.env.counters().ik_fallbacks,
                    mean_residual: if residual_steps > 0 { residual_sum / residual_steps as f64 } else { 0.0 },
                    difficulty,
                });
            }
        }
    }
}

/// Run one episode on each of the first `count` workers.
pub fn run_round(
    workers: &mut [Worker],
    count: usize,
    agent: &Agent,
    io: &PolicyIo,
    act: ActMode,
    exec: Execution,
) -> Result<Vec<EpisodeOutcome>> {
    let active = &mut workers[..count];
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            active.par_iter_mut().map(|w| w.run_episode(agent, io, act)).collect()
        }
        _ => active.iter_mut().map(|w| w.run_episode(agent, io, act)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRow {
    pub variant: String,
    pub experiment: String,
    pub seed: u64,
    pub env_id: u64,
    pub role: &'static str,
    /// Training episodes completed when this episode started.
    pub episode: u64,
    pub success: u8,
    #[serde(rename = "return")]
    pub ret: f64,
    pub ticks: u64,
    pub final_state: &'static str,
    pub pos_std: f64,
    pub ori_std: f64,
    pub ik_fallbacks: u64,
    pub clip_fraction: f64,
    pub mean_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurriculumRow {
    pub seed: u64,
    pub env_id: u64,
    pub episode: u64,
    pub pos_std: f64,
    pub ori_std: f64,
    pub success: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateRow {
    pub seed: u64,
    pub update: u64,
    pub episodes: u64,
    pub samples: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub actor_frozen: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub episodes: Vec<EpisodeRow>,
    pub curriculum: Vec<CurriculumRow>,
    pub updates: Vec<UpdateRow>,
}

impl RunRecord {
    pub fn extend(&mut self, other: RunRecord) {
        self.episodes.extend(other.episodes);
        self.curriculum.extend(other.curriculum);
        self.updates.extend(other.updates);
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join("episodes.csv"), "episodes", &self.episodes)?;
        write_csv(&dir.join("curriculum.csv"), "curriculum", &self.curriculum)?;
        write_csv(&dir.join("updates.csv"), "updates", &self.updates)
    }
}

impl PolicyIo {
    pub fn from_config(config: &Config) -> Self {
        Self {
            mode: config.experiment.mode,
            bounds: config.residual.clone(),
            scale: config.observation.clone(),
            frames: config.optimizer.window,
        }
    }
}

/// Train and evaluate one seed.
pub fn run_seed(config: &Config, seed: u64, exec: Execution) -> Result<RunRecord> {
    let e = &config.experiment;
    let io = PolicyIo::from_config(config);
    let n = config.arm.n_joints();
    let mut agent = Agent::new(e.mode.action_dim(n).max(1), config.optimizer.clone(), &mut stream(seed, 0, Purpose::Policy))?;
    let mut shuffle = stream(seed, 0, Purpose::Shuffle);
    let evaluation = config.profile().evaluation;

    let mut train: Vec<Worker> = (0..e.n_train_envs as u64)
        .map(|i| Worker::new(config, seed, i, false, config.training_curriculum()))
        .collect::<Result<_>>()?;
    let mut eval: Vec<Worker> = (0..e.n_eval_envs as u64)
        .map(|i| Worker::new(config, seed, i, true, CurriculumState::fixed(evaluation)))
        .collect::<Result<_>>()?;

    let variant = config.variant();
    let experiment = e.experiment.as_str().to_string();
    let mut record = RunRecord::default();
    let mut done = 0u64;
    let mut next_eval = 0u64;
    let mut last_clip = 0.0;
    let mut n_updates = 0u64;
    let row = |w: &Worker, role, episode, o: &EpisodeOutcome, clip: f64| EpisodeRow {
        variant: variant.clone(),
        experiment: experiment.clone(),
        seed,
        env_id: w.id,
        role,
        episode,
        success: o.success as u8,
        ret: o.ret,
        ticks: o.ticks,
        final_state: o.final_phase.as_str(),
        pos_std: o.difficulty.pos_std,
        ori_std: o.difficulty.ori_std,
        ik_fallbacks: o.ik_fallbacks,
        clip_fraction: clip,
        mean_residual: o.mean_residual,
    };

    while done < e.total_episodes {
        if done >= next_eval {
            let outcomes = run_round(&mut eval, e.n_eval_envs, &agent, &io, ActMode::Mean, exec)?;
            for (w, o) in eval.iter().zip(&outcomes) {
                record.episodes.push(row(w, "eval", done, o, last_clip));
            }
            while next_eval <= done {
                next_eval += e.eval_every;
            }
        }

        let count = (e.total_episodes - done).min(train.len() as u64) as usize;
        let outcomes = run_round(&mut train, count, &agent, &io, ActMode::Sample, exec)?;
        let mut buffer = RolloutBuffer::default();
        for (i, (w, o)) in train.iter_mut().zip(outcomes).enumerate() {
            let episode = done + i as u64;
            record.episodes.push(row(w, "train", episode, &o, last_clip));
            w.curriculum = w.curriculum.clone().observe(o.success);
            let d = w.curriculum.difficulty();
            record.curriculum.push(CurriculumRow {
                seed,
                env_id: w.id,
                episode,
                pos_std: d.pos_std,
                ori_std: d.ori_std,
                success: o.success as u8,
            });
            buffer.push(o.trajectory);
        }
        done += count as u64;

        if e.mode != ResidualMode::None && !buffer.is_empty() {
            let stats: UpdateStats = agent.update(&buffer, done - 1, &mut shuffle)?;
            last_clip = stats.clip_fraction;
            n_updates += 1;
            record.updates.push(UpdateRow {
                seed,
                update: n_updates,
                episodes: done,
                samples: stats.samples,
                policy_loss: stats.policy_loss,
                value_loss: stats.value_loss,
                approx_kl: stats.approx_kl,
                clip_fraction: stats.clip_fraction,
                entropy: stats.entropy,
                actor_frozen: stats.actor_frozen as u8,
            });
        }
    }
    // Closing evaluation of the final policy.
    let outcomes = run_round(&mut eval, e.n_eval_envs, &agent, &io, ActMode::Mean, exec)?;
    for (w, o) in eval.iter().zip(&outcomes) {
        record.episodes.push(row(w, "eval", done, o, last_clip));
    }
    Ok(record)
}

/// Train every configured seed and write the CSVs to the output directory.
pub fn run_experiment(config: &Config) -> Result<RunRecord> {
    run_experiment_with(config, Execution::default())
}

pub fn run_experiment_with(config: &Config, exec: Execution) -> Result<RunRecord> {
    config.validate()?;
    let dir = &config.experiment.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut record = RunRecord::default();
    for &seed in &config.experiment.seeds {
        record.extend(run_seed(config, seed, exec)?);
    }
    record.write(dir)?;
    std::fs::write(dir.join("config.toml"), config.to_toml()).map_err(|e| Error::io(dir.join("config.toml"), e))?;
    Ok(record)
}

/// The learning-from-scratch baseline: the controller only finds contact and
/// aligns; the learned states are driven purely by policy joint torques.
pub fn run_scratch_baseline(config: &Config) -> Result<RunRecord> {
    let mut c = config.clone();
    c.experiment.mode = ResidualMode::JointEffort;
    c.experiment.scratch = true;
    run_experiment(&c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: ResidualMode) -> Config {
        let mut c = Config::default();
        c.experiment.mode = mode;
        c.experiment.seeds = vec![3];
        c.experiment.total_episodes = 8;
        c.experiment.n_train_envs = 2;
        c.experiment.n_eval_envs = 2;
        c.experiment.eval_every = 4;
        c
    }

    #[test]
    fn bare_controller_nominal_evaluation_succeeds() {
        let mut c = small(ResidualMode::None);
        c.curriculum.evaluation = Some(Difficulty::ZERO);
        let r = run_seed(&c, 0, Execution::Sequential).unwrap();
        let evals: Vec<_> = r.episodes.iter().filter(|e| e.role == "eval").collect();
        assert!(!evals.is_empty());
        assert!(evals.iter().all(|e| e.success == 1));
        assert!(r.updates.is_empty());
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let c = small(ResidualMode::JointPosFeedback);
        let a = run_seed(&c, 1, Execution::Sequential).unwrap();
        let b = run_seed(&c, 1, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_rounds_follow_cadence() {
        let c = small(ResidualMode::JointEffort);
        let r = run_seed(&c, 2, Execution::Sequential).unwrap();
        let mut points: Vec<u64> = r.episodes.iter().filter(|e| e.role == "eval").map(|e| e.episode).collect();
        points.dedup();
        assert_eq!(points, vec![0, 4, 8]);
        assert_eq!(r.episodes.iter().filter(|e| e.role == "train").count(), 8);
        assert_eq!(r.curriculum.len(), 8);
    }

    #[test]
    fn eval_does_not_touch_training_streams() {
        // More evaluation environments must not change training outcomes.
        let a = run_seed(&small(ResidualMode::JointEffort), 4, Execution::Sequential).unwrap();
        let mut c = small(ResidualMode::JointEffort);
        c.experiment.n_eval_envs = 3;
        let b = run_seed(&c, 4, Execution::Sequential).unwrap();
        let train = |r: &RunRecord| r.episodes.iter().filter(|e| e.role == "train").cloned().collect::<Vec<_>>();
        assert_eq!(train(&a), train(&b));
        assert_eq!(a.updates, b.updates);
    }
}
