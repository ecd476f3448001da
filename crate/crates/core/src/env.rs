//! Episodes: domain-randomized resets, primitive execution as the step,
//! coverage reward, baseline policies and the evaluation protocol.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{ComposedAction, NetError, QdpNetwork};
use crate::perception::{
    cloth_mask, coverage, render_topview_with, snap_to_cloth, unrotate_pixel, CameraModel, Mask, Observation,
    PerceptionError, Pixel,
};
use crate::primitives::{execute_primitive, PrimitiveConfig, PrimitiveError, PrimitiveSpec, ResolvedParams};
use crate::sim::{build_cloth, crumple, ClothConfig, ClothState, SimError, Vec3};

pub const EPISODE_STEPS: usize = 10;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("episode finished; call reset")]
    EpisodeFinished,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Primitive(#[from] PrimitiveError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Derives an independent 64-bit seed for a named sub-stream.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainRandomization {
    /// Inclusive particle-count ranges per side.
    pub rows: [usize; 2],
    pub cols: [usize; 2],
    pub spacing: [f64; 2],
    pub mass_total: [f64; 2],
    /// Multiplies all three spring stiffnesses of the base cloth.
    pub stiffness_scale: [f64; 2],
    pub intensity: [f64; 2],
    pub severity: [f64; 2],
}

impl Default for DomainRandomization {
    fn default() -> Self {
        Self {
            rows: [20, 30],
            cols: [20, 30],
            spacing: [0.014, 0.02],
            mass_total: [0.05, 0.3],
            stiffness_scale: [0.5, 2.0],
            intensity: [0.6, 1.0],
            severity: [1.0, 1.0],
        }
    }
}

/// One draw from [`DomainRandomization`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClothSample {
    pub cloth: ClothConfig,
    /// Foreground gray level in 1/255 steps.
    pub intensity: u8,
    pub severity: f64,
    pub crumple_seed: u64,
}

impl DomainRandomization {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.rows[0] < 2 || self.cols[0] < 2 || self.rows[0] > self.rows[1] || self.cols[0] > self.cols[1] {
            return bad(format!("bad grid ranges rows {:?} cols {:?}", self.rows, self.cols));
        }
        for (name, r, lo, hi) in [
            ("spacing", self.spacing, 1e-6, f64::INFINITY),
            ("mass_total", self.mass_total, 1e-9, f64::INFINITY),
            ("stiffness_scale", self.stiffness_scale, 1e-9, f64::INFINITY),
            ("intensity", self.intensity, 0.51, 1.0),
            ("severity", self.severity, 0.0, 1.0),
        ] {
            if !(r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
                return bad(format!("{name} range {r:?} must be ordered within [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    /// Zero-shot split: the long side fixed at 1.5x the training maximum, the
    /// other side between the training maximum and that.
    pub fn large_split(&self) -> Self {
        let big = (self.rows[1].max(self.cols[1]) as f64 * 1.5).ceil() as usize;
        Self {
            rows: [big, big],
            cols: [self.cols[1].max(self.rows[1]), big],
            ..self.clone()
        }
    }

    pub fn sample(&self, base: &ClothConfig, seed: u64) -> ClothSample {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dr"));
        let mut uni = |r: [f64; 2]| if r[0] < r[1] { rng.gen_range(r[0]..=r[1]) } else { r[0] };
        let spacing = uni(self.spacing);
        let mass_total = uni(self.mass_total);
        let k = uni(self.stiffness_scale);
        let intensity = uni(self.intensity);
        let severity = uni(self.severity);
        let rows = rng.gen_range(self.rows[0]..=self.rows[1]);
        let cols = rng.gen_range(self.cols[0]..=self.cols[1]);
        ClothSample {
            cloth: ClothConfig {
                rows,
                cols,
                spacing,
                mass_total,
                k_struct: base.k_struct * k,
                k_shear: base.k_shear * k,
                k_bend: base.k_bend * k,
                ..base.clone()
            },
            intensity: (intensity * 255.0).round() as u8,
            severity,
            crumple_seed: derive_seed(seed, "crumple"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub camera: CameraModel,
    /// Base cloth; domain randomization overrides size, mass and stiffness.
    pub cloth: ClothConfig,
    pub dr: DomainRandomization,
    pub primitive: PrimitiveConfig,
    pub max_steps: usize,
    pub reward_scale: f64,
    /// When set, failed grasps are not counted as interactions (at most
    /// `3 * max_steps` attempts per episode).
    pub discard_failed_grasps: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            camera: CameraModel::default(),
            cloth: ClothConfig::default(),
            dr: DomainRandomization::default(),
            primitive: PrimitiveConfig::default(),
            max_steps: EPISODE_STEPS,
            reward_scale: 10.0,
            discard_failed_grasps: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.camera.validate()?;
        self.cloth.validate()?;
        self.dr.validate()?;
        self.primitive.validate()?;
        if self.max_steps == 0 {
            return Err(EnvError::InvalidConfig("max_steps must be >= 1".into()));
        }
        if !(self.reward_scale > 0.0) {
            return Err(EnvError::InvalidConfig("reward_scale must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub grasp_success: bool,
    /// Raw coverage of the new observation.
    pub coverage: f64,
    /// Pick and place in the unrotated image, pick after snapping.
    pub pick: Pixel,
    pub place: Pixel,
    pub resolved: ResolvedParams,
    /// Whether the step counted towards the episode length.
    pub counted: bool,
    /// The simulator diverged; the cloth was restored to its pre-step state.
    pub sim_diverged: bool,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

pub struct Env {
    pub config: EnvConfig,
    state: Option<ClothState>,
    obs: Observation,
    intensity: f32,
    c_max: f64,
    steps: usize,
    attempts: usize,
    done: bool,
    initial_coverage: f64,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let obs = Observation::blank(config.camera);
        Ok(Self {
            config,
            state: None,
            obs,
            intensity: 1.0,
            c_max: 1.0,
            steps: 0,
            attempts: 0,
            done: true,
            initial_coverage: 0.0,
        })
    }

    /// Samples a cloth, crumples it, centres it under the camera, renders it.
    pub fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        let sample = self.config.dr.sample(&self.config.cloth, seed);
        let flat = build_cloth(&sample.cloth)?;
        let mut state = crumple(&flat, sample.crumple_seed, sample.severity)?;
        let c = state.centroid();
        state.translate(Vec3::new(-c.x, -c.y, 0.0));
        self.intensity = sample.intensity as f32 / 255.0;
        self.c_max = self
            .config
            .camera
            .flat_area_px(sample.cloth.rows, sample.cloth.cols, sample.cloth.spacing);
        self.obs = render_topview_with(&state, &self.config.camera, self.intensity);
        self.state = Some(state);
        self.steps = 0;
        self.attempts = 0;
        self.done = false;
        self.initial_coverage = coverage(&self.obs, self.c_max);
        Ok(self.obs.clone())
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn mask(&self) -> Mask {
        cloth_mask(&self.obs)
    }

    pub fn coverage(&self) -> f64 {
        coverage(&self.obs, self.c_max)
    }

    pub fn initial_coverage(&self) -> f64 {
        self.initial_coverage
    }

    pub fn c_max(&self) -> f64 {
        self.c_max
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn state(&self) -> Option<&ClothState> {
        self.state.as_ref()
    }

    pub fn snap_radius(&self) -> usize {
        self.config.camera.snap_radius()
    }

    /// Unrotates the action, snaps the pick onto the cloth, runs the primitive
    /// and renders the result. Misses leave the cloth unchanged but are still rewarded.
    pub fn step(&mut self, action: &ComposedAction) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let d = self.config.camera.resolution;
        let resolved = self.config.primitive.resolve(action.theta.min(self.config.primitive.num_bins() - 1))?;
        let pick_raw = unrotate_pixel(action.pick, action.angle, d);
        let place = unrotate_pixel(action.place, action.angle, d);
        let mask = self.mask();
        let snapped = if action.valid {
            snap_to_cloth(pick_raw, &mask, self.snap_radius()).ok()
        } else {
            None
        };

        let mut grasp_success = false;
        let mut sim_diverged = false;
        let mut pick = pick_raw;
        if let Some(p) = snapped {
            pick = p;
            let spec = PrimitiveSpec {
                pick_px: p,
                place_px: place,
                theta_bin: action.theta,
                resolved,
            };
            let state = self.state.as_ref().expect("reset before step");
            match execute_primitive(state, &spec, &self.config.camera, &self.config.primitive) {
                Ok((next, report)) => {
                    grasp_success = report.grasp_success;
                    if grasp_success {
                        self.obs = render_topview_with(&next, &self.config.camera, self.intensity);
                        self.state = Some(next);
                    }
                }
                Err(PrimitiveError::Sim(SimError::NumericalBlowup { .. })) => sim_diverged = true,
                Err(e) => return Err(e.into()),
            }
        }

        self.attempts += 1;
        let counted = grasp_success || !self.config.discard_failed_grasps;
        if counted {
            self.steps += 1;
        }
        self.done = self.steps >= self.config.max_steps || self.attempts >= 3 * self.config.max_steps;
        let cov = self.coverage();
        Ok(StepResult {
            obs: self.obs.clone(),
            reward: self.config.reward_scale * cov,
            done: self.done,
            info: StepInfo {
                grasp_success,
                coverage: cov,
                pick,
                place,
                resolved,
                counted,
                sim_diverged,
            },
        })
    }
}

/// Something that picks composed actions from the current environment view.
pub trait Policy {
    fn name(&self) -> String;
    fn act(&mut self, env: &Env, rng: &mut ChaCha8Rng) -> Result<ComposedAction, EnvError>;
}

/// Uniform pick on the cloth mask, uniform place, uniform θ bin.
#[derive(Clone, Debug, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn act(&mut self, env: &Env, rng: &mut ChaCha8Rng) -> Result<ComposedAction, EnvError> {
        let mask = env.mask();
        if mask.is_empty() {
            return Ok(ComposedAction::noop());
        }
        let d = env.config.camera.resolution;
        let nth = rng.gen_range(0..mask.count());
        let pick = mask.pixels().nth(nth).unwrap();
        Ok(ComposedAction {
            pick,
            place: Pixel::new(rng.gen_range(0..d), rng.gen_range(0..d)),
            theta: rng.gen_range(0..env.config.primitive.num_bins()),
            angle: 0.0,
            valid: true,
        })
    }
}

/// Never touches the cloth.
#[derive(Clone, Debug, Default)]
pub struct NoopPolicy;

impl Policy for NoopPolicy {
    fn name(&self) -> String {
        "noop".into()
    }

    fn act(&mut self, _env: &Env, _rng: &mut ChaCha8Rng) -> Result<ComposedAction, EnvError> {
        Ok(ComposedAction::noop())
    }
}

/// Greedy QDP policy with the evaluation-time rotation search.
pub struct GreedyPolicy<'a> {
    pub net: &'a QdpNetwork<f32>,
    /// When set, replaces the θ head's choice with this bin.
    pub fixed_theta: Option<usize>,
    pub rotation_search: bool,
}

impl<'a> GreedyPolicy<'a> {
    pub fn new(net: &'a QdpNetwork<f32>) -> Self {
        Self {
            net,
            fixed_theta: None,
            rotation_search: true,
        }
    }
}

impl Policy for GreedyPolicy<'_> {
    fn name(&self) -> String {
        match self.fixed_theta {
            Some(b) => format!("fixed-theta-{b}"),
            None => "qdp".into(),
        }
    }

    fn act(&mut self, env: &Env, rng: &mut ChaCha8Rng) -> Result<ComposedAction, EnvError> {
        let mask = env.mask();
        if mask.is_empty() {
            return Ok(ComposedAction::noop());
        }
        let mut action = if self.rotation_search {
            self.net.eval_rotation_search(env.observation(), env.snap_radius())?.action
        } else {
            self.net
                .select_action(env.observation(), &mask, 0.0, env.snap_radius(), rng)?
        };
        if let Some(b) = self.fixed_theta {
            action.theta = b;
        }
        Ok(action)
    }
}

/// QDP pick/place with the primitive parameter forced to `value`.
pub fn fixed_theta_policy<'a>(
    net: &'a QdpNetwork<f32>,
    primitive: &PrimitiveConfig,
    value: f64,
) -> Result<GreedyPolicy<'a>, EnvError> {
    let bin = primitive.bin_of(value).ok_or_else(|| {
        EnvError::InvalidConfig(format!(
            "theta value {value} is not one of {:?}",
            primitive.theta_values()
        ))
    })?;
    Ok(GreedyPolicy {
        net,
        fixed_theta: Some(bin),
        rotation_search: true,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub initial_coverage: f64,
    /// Coverage after each interaction.
    pub coverages: Vec<f64>,
    pub rewards: Vec<f64>,
    pub actions: Vec<ComposedAction>,
    pub theta_values: Vec<f64>,
    pub grasp_success: Vec<bool>,
    /// Highest coverage reached after any interaction.
    pub max_coverage: f64,
    /// Final minus initial coverage (both already normalized by C_max).
    pub coverage_improvement: f64,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.coverages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coverages.is_empty()
    }
}

/// Resets with `seed` and runs `policy` until the episode ends. The policy's own
/// randomness is seeded from `seed` too, so the record is a function of both.
pub fn run_episode(env: &mut Env, policy: &mut dyn Policy, seed: u64) -> Result<EpisodeRecord, EnvError> {
    run_episode_with(env, policy, seed, |_, _, _, _| Ok(()))
}

/// As [`run_episode`], calling `on_step(step_index, observation, coverage, info)`
/// after the reset (with `info = None`) and after every step.
pub fn run_episode_with<F>(
    env: &mut Env,
    policy: &mut dyn Policy,
    seed: u64,
    mut on_step: F,
) -> Result<EpisodeRecord, EnvError>
where
    F: FnMut(usize, &Observation, f64, Option<(&ComposedAction, &StepInfo)>) -> Result<(), EnvError>,
{
    let obs = env.reset(seed)?;
    on_step(0, &obs, env.initial_coverage(), None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "policy"));
    let learned = env.config.primitive.learned;
    let mut rec = EpisodeRecord {
        seed,
        initial_coverage: env.initial_coverage(),
        coverages: vec![],
        rewards: vec![],
        actions: vec![],
        theta_values: vec![],
        grasp_success: vec![],
        max_coverage: 0.0,
        coverage_improvement: 0.0,
    };
    while !env.is_done() {
        let action = policy.act(env, &mut rng)?;
        let res = env.step(&action)?;
        on_step(rec.coverages.len() + 1, &res.obs, res.info.coverage, Some((&action, &res.info)))?;
        rec.coverages.push(res.info.coverage);
        rec.rewards.push(res.reward);
        rec.actions.push(action);
        rec.theta_values.push(res.info.resolved.theta_value(learned));
        rec.grasp_success.push(res.info.grasp_success);
    }
    rec.max_coverage = rec.coverages.iter().cloned().fold(0.0, f64::max);
    rec.coverage_improvement = rec.coverages.last().copied().unwrap_or(rec.initial_coverage) - rec.initial_coverage;
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub policy: String,
    pub count: usize,
    /// True when no seeds were evaluated; all statistics are then zero.
    pub empty: bool,
    pub max_coverage_mean: f64,
    pub max_coverage_std: f64,
    pub improvement_mean: f64,
    pub improvement_std: f64,
    pub initial_coverage_mean: f64,
    pub grasp_success_rate: f64,
    pub episodes: Vec<EpisodeRecord>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

impl EvalSummary {
    pub fn from_episodes(policy: String, episodes: Vec<EpisodeRecord>) -> Self {
        let maxes: Vec<f64> = episodes.iter().map(|e| e.max_coverage).collect();
        let imps: Vec<f64> = episodes.iter().map(|e| e.coverage_improvement).collect();
        let inits: Vec<f64> = episodes.iter().map(|e| e.initial_coverage).collect();
        let (max_coverage_mean, max_coverage_std) = mean_std(&maxes);
        let (improvement_mean, improvement_std) = mean_std(&imps);
        let (initial_coverage_mean, _) = mean_std(&inits);
        let grasps: Vec<bool> = episodes.iter().flat_map(|e| e.grasp_success.iter().copied()).collect();
        let grasp_success_rate = if grasps.is_empty() {
            0.0
        } else {
            grasps.iter().filter(|&&g| g).count() as f64 / grasps.len() as f64
        };
        Self {
            policy,
            count: episodes.len(),
            empty: episodes.is_empty(),
            max_coverage_mean,
            max_coverage_std,
            improvement_mean,
            improvement_std,
            initial_coverage_mean,
            grasp_success_rate,
            episodes,
        }
    }

    /// Summary statistics without the per-episode records.
    pub fn to_json(&self) -> String {
        let brief = serde_json::json!({
            "policy": self.policy,
            "count": self.count,
            "empty": self.empty,
            "max_coverage_mean": self.max_coverage_mean,
            "max_coverage_std": self.max_coverage_std,
            "improvement_mean": self.improvement_mean,
            "improvement_std": self.improvement_std,
            "initial_coverage_mean": self.initial_coverage_mean,
            "grasp_success_rate": self.grasp_success_rate,
        });
        serde_json::to_string_pretty(&brief).unwrap()
    }

    /// One row per episode.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,seed,initial_coverage,max_coverage,coverage_improvement,steps,grasp_successes,theta_values\n");
        for e in &self.episodes {
            let thetas: Vec<String> = e.theta_values.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{},{},{}\n",
                self.policy,
                e.seed,
                e.initial_coverage,
                e.max_coverage,
                e.coverage_improvement,
                e.len(),
                e.grasp_success.iter().filter(|&&g| g).count(),
                thetas.join(";")
            ));
        }
        out
    }
}

/// Runs one episode per seed.
pub fn evaluate(env: &mut Env, policy: &mut dyn Policy, seeds: &[u64]) -> Result<EvalSummary, EnvError> {
    let mut episodes = Vec::with_capacity(seeds.len());
    for &s in seeds {
        episodes.push(run_episode(env, policy, s)?);
    }
    Ok(EvalSummary::from_episodes(policy.name(), episodes))
}

/// Median of the θ values the greedy policy proposes over `seeds`.
pub fn median_proposed_theta(
    env: &mut Env,
    net: &QdpNetwork<f32>,
    seeds: &[u64],
) -> Result<f64, EnvError> {
    let mut policy = GreedyPolicy::new(net);
    let summary = evaluate(env, &mut policy, seeds)?;
    let mut values: Vec<f64> = summary.episodes.iter().flat_map(|e| e.theta_values.iter().copied()).collect();
    if values.is_empty() {
        return Err(EnvError::InvalidConfig("probe run produced no actions".into()));
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Lower median, so the result is always one of the legal bins.
    Ok(values[(values.len() - 1) / 2])
}
