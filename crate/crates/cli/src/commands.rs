//! `eval`, `rollout` and `render-traj`.

use std::fs;
use std::path::{Path, PathBuf};

use qdp::env::{
    evaluate, fixed_theta_policy, median_proposed_theta, run_episode_with, Env, EnvConfig, EvalSummary, GreedyPolicy,
    Policy, RandomPolicy,
};
use qdp::net::QdpNetwork;
use qdp::primitives::{plan_trajectory, PrimitiveConfig};
use qdp::sim::Vec3;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Qdp,
    FixedTheta,
    Random,
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "qdp" => Ok(EvalMode::Qdp),
            "fixed-theta" => Ok(EvalMode::FixedTheta),
            "random" => Ok(EvalMode::Random),
            other => Err(format!("unknown mode `{other}` (qdp, fixed-theta, random)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    /// Zero-shot cloths larger than any seen in training.
    Large,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "large" => Ok(Split::Large),
            other => Err(format!("unknown split `{other}` (train, large)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalRequest {
    pub mode: EvalMode,
    pub n_seeds: usize,
    /// Explicit θ for fixed-θ mode; otherwise the median of a probe run.
    pub theta: Option<f64>,
    pub split: Split,
}

pub fn eval_env_config(config: &RunConfig, split: Split) -> EnvConfig {
    let mut env = config.env.clone();
    if split == Split::Large {
        env.dr = env.dr.large_split();
    }
    env
}

pub fn eval_seeds(config: &RunConfig, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| config.eval.seed_base + i).collect()
}

/// Runs the requested evaluation. `net` may be `None` only in random mode.
pub fn run_eval(config: &RunConfig, net: Option<&QdpNetwork<f32>>, req: &EvalRequest) -> Result<EvalSummary, CliError> {
    let mut env = Env::new(eval_env_config(config, req.split))?;
    let seeds = eval_seeds(config, req.n_seeds);
    let need_net = || net.ok_or_else(|| CliError::Checkpoint("this mode needs --checkpoint".into()));
    let summary = match req.mode {
        EvalMode::Random => evaluate(&mut env, &mut RandomPolicy, &seeds)?,
        EvalMode::Qdp => evaluate(&mut env, &mut GreedyPolicy::new(need_net()?), &seeds)?,
        EvalMode::FixedTheta => {
            let net = need_net()?;
            let value = match req.theta {
                Some(v) => v,
                None => {
                    let probe: Vec<u64> = (0..config.eval.probe_seeds as u64)
                        .map(|i| config.eval.probe_seed_base + i)
                        .collect();
                    median_proposed_theta(&mut env, net, &probe)?
                }
            };
            let mut policy = fixed_theta_policy(net, &config.env.primitive, value).map_err(|e| CliError::Config(e.to_string()))?;
            let mut s = evaluate(&mut env, &mut policy, &seeds)?;
            s.policy = format!("fixed-theta={value}");
            s
        }
    };
    Ok(summary)
}

/// Writes `<stem>.json` and `<stem>.csv` into `dir`.
pub fn write_report(summary: &EvalSummary, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf), CliError> {
    fs::create_dir_all(dir)?;
    let json = dir.join(format!("{stem}.json"));
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&json, summary.to_json())?;
    fs::write(&csv, summary.to_csv())?;
    Ok((json, csv))
}

/// One episode with a PNG per observation, named by step and coverage.
/// Returns the written frame paths.
pub fn run_rollout(
    config: &RunConfig,
    net: Option<&QdpNetwork<f32>>,
    seed: u64,
    split: Split,
    png_dir: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(png_dir)?;
    let mut env = Env::new(eval_env_config(config, split))?;
    let mut greedy;
    let mut random = RandomPolicy;
    let policy: &mut dyn Policy = match net {
        Some(n) => {
            greedy = GreedyPolicy::new(n);
            &mut greedy
        }
        None => &mut random,
    };
    let learned = config.env.primitive.learned;
    let mut frames = Vec::new();
    let mut log = String::from("step,coverage,grasp_success,pick_row,pick_col,place_row,place_col,angle,theta_bin,theta_value\n");
    run_episode_with(&mut env, policy, seed, |step, obs, cov, info| {
        let path = png_dir.join(format!("step_{step:02}_cov_{cov:.3}.png"));
        obs.write_png(&path)?;
        frames.push(path);
        match info {
            None => log.push_str(&format!("{step},{cov:.4},,,,,,,,\n")),
            Some((a, i)) => log.push_str(&format!(
                "{step},{cov:.4},{},{},{},{},{},{},{},{}\n",
                i.grasp_success,
                i.pick.row,
                i.pick.col,
                i.place.row,
                i.place.col,
                a.angle,
                a.theta,
                i.resolved.theta_value(learned)
            )),
        }
        Ok(())
    })?;
    fs::write(png_dir.join("actions.csv"), log)?;
    Ok(frames)
}

/// Samples the end-effector path of a primitive between two world points and
/// writes `t x y z` lines.
pub fn render_trajectory(
    primitive: &PrimitiveConfig,
    theta: f64,
    from: Vec3,
    to: Vec3,
    dt: f64,
    out: &Path,
) -> Result<usize, CliError> {
    let resolved = primitive
        .resolve_value(theta)
        .map_err(|e| CliError::Config(format!("theta: {e}")))?;
    let traj = plan_trajectory(from, to, resolved, primitive, dt).map_err(|e| CliError::Config(e.to_string()))?;
    let mut buf = Vec::new();
    traj.write_dump(&mut buf)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(out, buf)?;
    Ok(traj.waypoints.len())
}
