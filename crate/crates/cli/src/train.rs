//! Rollout and learning loop with resumable checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use qdp::env::{derive_seed, Env};
use qdp::net::{NetOptimizer, QdpNetwork};
use qdp::nn::AdamState;
use qdp::perception::{cloth_mask, rotate_observation, Observation};
use qdp::sdqn::{sync_target, train_step, ReplayBuffer, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

/// Frozen column order of `metrics.csv`.
pub const METRICS_HEADER: &str = "step,episode,epsilon,loss,y_mean,grad_norm,coverage,reward";

const CKPT_MAGIC: &[u8; 8] = b"QDPCKPT1";
const ROTATION_CHOICES: usize = 24;

/// One row of `metrics.csv`; learner fields are empty before warm-up ends.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub episode: usize,
    pub epsilon: f64,
    pub learner: Option<(f64, f64, f64)>,
    pub coverage: f64,
    pub reward: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let (l, y, g) = match self.learner {
            Some((l, y, g)) => (format!("{l:.6e}"), format!("{y:.6}"), format!("{g:.6e}")),
            None => (String::new(), String::new(), String::new()),
        };
        format!(
            "{},{},{:.6},{},{},{},{:.6},{:.6}",
            self.step, self.episode, self.epsilon, l, y, g, self.coverage, self.reward
        )
    }
}

struct Worker {
    env: Env,
    obs: Observation,
    episode: usize,
    active: bool,
}

pub struct Trainer {
    pub config: RunConfig,
    pub net: QdpNetwork<f32>,
    pub target: QdpNetwork<f32>,
    pub opt: NetOptimizer,
    pub buffer: ReplayBuffer,
    explore: ChaCha8Rng,
    workers: Vec<Worker>,
    pub env_steps: usize,
    pub episodes_started: usize,
    pub train_steps: usize,
    pub rounds_done: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointData {
    config_toml: String,
    net: Vec<u8>,
    target: Vec<u8>,
    opt: Vec<AdamState>,
    buffer: ReplayBuffer,
    explore: ChaCha8Rng,
    env_steps: usize,
    episodes_started: usize,
    train_steps: usize,
    rounds_done: usize,
}

/// Network plus the config it was trained with.
pub struct LoadedCheckpoint {
    pub config: RunConfig,
    pub net: QdpNetwork<f32>,
    pub env_steps: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self, CliError> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init"));
        let net = QdpNetwork::new(config.net.clone(), &mut init)?;
        let target = net.clone();
        let opt = NetOptimizer::new(&net, config.train.lr);
        let buffer = ReplayBuffer::new(config.train.buffer_capacity, derive_seed(config.seed, "replay"));
        let workers = (0..config.workers)
            .map(|_| {
                Ok(Worker {
                    env: Env::new(config.env.clone())?,
                    obs: Observation::blank(config.env.camera),
                    episode: 0,
                    active: false,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(Self {
            explore: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "explore")),
            config,
            net,
            target,
            opt,
            buffer,
            workers,
            env_steps: 0,
            episodes_started: 0,
            train_steps: 0,
            rounds_done: 0,
        })
    }

    /// Seed of the `episode`-th training episode.
    pub fn episode_seed(&self, episode: usize) -> u64 {
        derive_seed(derive_seed(self.config.seed, "episodes"), &episode.to_string())
    }

    /// Training stops at the first episode boundary at or after `total_env_steps`.
    pub fn finished(&self) -> bool {
        self.env_steps >= self.config.train.total_env_steps && self.at_boundary()
    }

    /// True when no worker is inside an episode.
    pub fn at_boundary(&self) -> bool {
        self.workers.iter().all(|w| !w.active)
    }

    /// One lockstep step of every worker, each followed by its learner updates.
    pub fn step_round(&mut self) -> Result<Vec<MetricsRow>, CliError> {
        for i in 0..self.workers.len() {
            if !self.workers[i].active {
                let ep = self.episodes_started;
                self.episodes_started += 1;
                let seed = self.episode_seed(ep);
                let w = &mut self.workers[i];
                w.obs = w.env.reset(seed)?;
                w.episode = ep;
                w.active = true;
            }
        }

        // Actions for all workers from the same network snapshot, in worker order.
        let mut views = Vec::with_capacity(self.workers.len());
        let mut actions = Vec::with_capacity(self.workers.len());
        let mut epsilons = Vec::with_capacity(self.workers.len());
        for w in &self.workers {
            let eps = self.config.train.epsilon(w.episode, self.env_steps);
            let angle = if self.config.run.rotate_observations {
                15.0 * self.explore.gen_range(0..ROTATION_CHOICES) as f64
            } else {
                0.0
            };
            let view = if angle == 0.0 {
                w.obs.clone()
            } else {
                rotate_observation(&w.obs, angle)
            };
            let mask = cloth_mask(&view);
            let action = self
                .net
                .select_action(&view, &mask, eps, w.env.snap_radius(), &mut self.explore)?;
            views.push(view);
            actions.push(action);
            epsilons.push(eps);
        }

        let results = if self.workers.len() == 1 {
            vec![self.workers[0].env.step(&actions[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .workers
                    .iter_mut()
                    .zip(&actions)
                    .map(|(w, a)| s.spawn(move || w.env.step(a)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        };

        let mut rows = Vec::with_capacity(self.workers.len());
        for (i, res) in results.into_iter().enumerate() {
            let res = res?;
            let episode = self.workers[i].episode;
            // With no cloth in view there was no decision to learn from.
            if actions[i].valid {
                self.buffer.push(Transition {
                    obs: views[i].to_u8(),
                    action: actions[i],
                    reward: res.reward,
                    next_obs: res.obs.to_u8(),
                    done: res.done,
                });
            }
            self.workers[i].obs = res.obs;
            self.workers[i].active = !res.done;
            self.env_steps += 1;

            let mut learner = None;
            if self.buffer.len() >= self.config.train.warmup {
                for _ in 0..self.config.run.updates_per_step {
                    let m = train_step(&mut self.net, &self.target, &mut self.buffer, &mut self.opt, &self.config.train)?;
                    self.train_steps += 1;
                    learner = Some((m.loss, m.y_mean, m.grad_norm));
                }
            }
            if self.env_steps % self.config.train.target_sync_period == 0 {
                sync_target(&self.net, &mut self.target);
            }
            rows.push(MetricsRow {
                step: self.env_steps,
                episode,
                epsilon: epsilons[i],
                learner,
                coverage: res.info.coverage,
                reward: res.reward,
            });
        }
        if self.at_boundary() {
            self.rounds_done += 1;
        }
        Ok(rows)
    }

    fn checkpoint_data(&self) -> CheckpointData {
        CheckpointData {
            config_toml: self.config.to_toml(),
            net: self.net.to_bytes(),
            target: self.target.to_bytes(),
            opt: self.opt.states.clone(),
            buffer: self.buffer.clone(),
            explore: self.explore.clone(),
            env_steps: self.env_steps,
            episodes_started: self.episodes_started,
            train_steps: self.train_steps,
            rounds_done: self.rounds_done,
        }
    }

    /// Writes a checkpoint; only valid between episodes.
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        if !self.at_boundary() {
            return Err(CliError::Other("checkpoints are only taken between episodes".into()));
        }
        let payload = bincode::serialize(&self.checkpoint_data()).map_err(|e| CliError::Other(e.to_string()))?;
        let mut out = Vec::with_capacity(payload.len() + 12);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, out)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Restores a trainer exactly as it was when `path` was written.
    pub fn resume(path: &Path) -> Result<Self, CliError> {
        let data = read_checkpoint(path)?;
        let config = RunConfig::from_toml_str(&data.config_toml).map_err(|e| CliError::Checkpoint(e.to_string()))?;
        let mut t = Trainer::new(config)?;
        t.net = QdpNetwork::from_bytes(&data.net, Some(&t.config.net)).map_err(|e| CliError::Checkpoint(e.to_string()))?;
        t.target =
            QdpNetwork::from_bytes(&data.target, Some(&t.config.net)).map_err(|e| CliError::Checkpoint(e.to_string()))?;
        if data.opt.len() != t.opt.states.len() {
            return Err(CliError::Checkpoint("optimizer state does not match the network".into()));
        }
        t.opt.states = data.opt;
        t.buffer = data.buffer;
        t.explore = data.explore;
        t.env_steps = data.env_steps;
        t.episodes_started = data.episodes_started;
        t.train_steps = data.train_steps;
        t.rounds_done = data.rounds_done;
        Ok(t)
    }
}

fn read_checkpoint(path: &Path) -> Result<CheckpointData, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
    if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
        return Err(CliError::Checkpoint(format!("{}: not a training checkpoint", path.display())));
    }
    let crc = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let payload = &bytes[12..];
    if crc32fast::hash(payload) != crc {
        return Err(CliError::Checkpoint(format!("{}: checksum mismatch", path.display())));
    }
    bincode::deserialize(payload).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))
}

/// Loads the network and config from a checkpoint file, or from the latest
/// checkpoint of a run directory.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CliError> {
    let file = if path.is_dir() {
        latest_checkpoint(path)?.ok_or_else(|| CliError::Checkpoint(format!("no checkpoints under {}", path.display())))?
    } else {
        path.to_path_buf()
    };
    let data = read_checkpoint(&file)?;
    let config = RunConfig::from_toml_str(&data.config_toml).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    let net = QdpNetwork::from_bytes(&data.net, Some(&config.net)).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    Ok(LoadedCheckpoint {
        config,
        net,
        env_steps: data.env_steps,
    })
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    let direct = run_dir.join("checkpoints");
    if direct.is_dir() || !run_dir.ends_with("checkpoints") {
        direct
    } else {
        run_dir.to_path_buf()
    }
}

/// Checkpoints in the run directory, oldest first.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let dir = checkpoint_dir(run_dir);
    if !dir.is_dir() {
        return Ok(vec![]);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".bin"))
        })
        .collect();
    found.sort();
    Ok(found)
}

/// Most recent checkpoint by environment step, if any.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>, CliError> {
    Ok(list_checkpoints(run_dir)?.pop())
}

/// Deletes all but the newest `keep` checkpoints; `keep == 0` keeps everything.
fn prune_checkpoints(run_dir: &Path, keep: usize) -> Result<(), CliError> {
    let found = list_checkpoints(run_dir)?;
    if keep > 0 && found.len() > keep {
        for old in &found[..found.len() - keep] {
            fs::remove_file(old)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: bool,
    /// Stop after this many completed rounds, as if the process had been killed
    /// right after the checkpoint of that round.
    pub halt_after_rounds: Option<usize>,
    pub quiet: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub env_steps: usize,
    pub train_steps: usize,
    pub final_checkpoint: PathBuf,
}

/// Trains into `run_dir`: `resolved.toml`, `metrics.csv` and `checkpoints/`.
pub fn run_training(config: RunConfig, run_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome, CliError> {
    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let metrics_path = run_dir.join("metrics.csv");
    let resolved_path = run_dir.join("resolved.toml");

    let mut trainer = match (opts.resume, latest_checkpoint(run_dir)?) {
        (true, Some(ck)) => {
            let t = Trainer::resume(&ck)?;
            if t.config != config {
                return Err(CliError::Checkpoint(format!(
                    "{} was written with a different config; see {}",
                    ck.display(),
                    resolved_path.display()
                )));
            }
            truncate_metrics(&metrics_path, t.env_steps)?;
            t
        }
        _ => {
            let t = Trainer::new(config)?;
            fs::write(&metrics_path, format!("{METRICS_HEADER}\n"))?;
            t
        }
    };
    fs::write(&resolved_path, trainer.config.to_toml())?;

    let mut metrics = OpenOptions::new().append(true).open(&metrics_path)?;
    let ckpt_path = |steps: usize| ckpt_dir.join(format!("ckpt_{steps:08}.bin"));
    let every = trainer.config.run.checkpoint_every;
    let keep = trainer.config.run.keep_checkpoints;
    let mut last_saved = None;
    let mut window = Vec::new();
    while !trainer.finished() {
        let rows = trainer.step_round()?;
        let mut text = String::new();
        for r in &rows {
            text.push_str(&r.to_csv());
            text.push('\n');
            window.push(r.coverage);
        }
        metrics.write_all(text.as_bytes())?;
        if trainer.at_boundary() {
            let boundary_rounds = trainer.rounds_done;
            if every > 0 && boundary_rounds % every == 0 {
                metrics.flush()?;
                trainer.save(&ckpt_path(trainer.env_steps))?;
                prune_checkpoints(run_dir, keep)?;
                last_saved = Some(trainer.env_steps);
            }
            if !opts.quiet && boundary_rounds % 10 == 0 {
                let mean = window.iter().sum::<f64>() / window.len().max(1) as f64;
                eprintln!(
                    "step {:>7}  episodes {:>5}  updates {:>7}  mean coverage {:.3}",
                    trainer.env_steps, trainer.episodes_started, trainer.train_steps, mean
                );
                window.clear();
            }
            if opts.halt_after_rounds == Some(boundary_rounds) {
                break;
            }
        }
    }
    metrics.flush()?;
    if last_saved != Some(trainer.env_steps) && trainer.at_boundary() {
        trainer.save(&ckpt_path(trainer.env_steps))?;
        prune_checkpoints(run_dir, keep)?;
    }
    let final_checkpoint = latest_checkpoint(run_dir)?.ok_or_else(|| CliError::Other("no checkpoint written".into()))?;
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        env_steps: trainer.env_steps,
        train_steps: trainer.train_steps,
        final_checkpoint,
    })
}

/// Keeps the header and the first `rows` data lines.
fn truncate_metrics(path: &Path, rows: usize) -> Result<(), CliError> {
    let file = File::open(path).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
    let lines: Vec<String> = BufReader::new(file).lines().take(rows + 1).collect::<Result<_, _>>()?;
    if lines.len() != rows + 1 || lines[0] != METRICS_HEADER {
        return Err(CliError::Checkpoint(format!(
            "{} has fewer rows than the checkpoint expects",
            path.display()
        )));
    }
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
