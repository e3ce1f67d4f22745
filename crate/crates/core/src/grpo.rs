//! Two-stage trainer: supervised warm-up on demonstrations, then group
//! relative policy optimisation (GRPO) with a KL penalty towards a frozen
//! reference policy.
//!
//! Each RL step samples `G` responses per instance, scores them, z-scores
//! the rewards within the group, and takes one gradient-ascent step on
//!
//! ```text
//! J = mean_instances (1/G) sum_i [ A_i log pi(a_i | s) - kl_coef * KL_i(pi || pi_ref) ]
//! ```
//!
//! where `KL_i` is the exact KL summed over the contexts visited by `a_i`.
//! One update per group keeps the sampling policy and the updated policy
//! identical at gradient time, so importance ratios are 1 and no clipping
//! is needed.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::envs::training::EnvConfig;
use crate::par::{self, Exec};
use crate::policy::{Gradient, PolicyError, PolicySnapshot, TabularSeqPolicy, TokenId, Vocabulary, DEFAULT_BUCKETS, DEFAULT_HORIZON};
use crate::reward::{GroundTruthAnswer, RewardBreakdown, RewardConfig};

/// Below this reward standard deviation a group carries no signal.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Counting,
    NumericQa,
    Trance,
    Bandit,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Counting => "counting",
            TaskKind::NumericQa => "numeric_qa",
            TaskKind::Trance => "trance",
            TaskKind::Bandit => "bandit",
        }
    }
}

/// One prompt: symbolic observation, question, and verifiable answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub task: TaskKind,
    pub context: String,
    pub question: String,
    pub gt: GroundTruthAnswer,
    pub subset_label: String,
}

impl TaskInstance {
    pub fn new(
        id: impl Into<String>,
        task: TaskKind,
        context: impl Into<String>,
        question: impl Into<String>,
        gt: GroundTruthAnswer,
        subset_label: impl Into<String>,
    ) -> Self {
        TaskInstance {
            id: id.into(),
            task,
            context: context.into(),
            question: question.into(),
            gt,
            subset_label: subset_label.into(),
        }
    }
}

/// A gold response for supervised training.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSequence {
    pub instance: TaskInstance,
    pub tokens: Vec<TokenId>,
}

/// Reward of one sampled response plus its reasoning length, when the
/// response was well-formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub reward: RewardBreakdown,
    pub think_tokens: Option<usize>,
}

/// Something the trainer can sample prompts from and score responses in.
pub trait Environment: Sync {
    fn name(&self) -> &str;
    fn vocab(&self) -> &Vocabulary;
    /// Fixed prompt pool.
    fn instances(&self) -> &[TaskInstance];
    fn score(&self, instance: &TaskInstance, tokens: &[TokenId]) -> Scored;
    /// Gold demonstrations, in pool order.
    fn demonstrations(&self) -> Vec<DemoSequence>;
    /// Grammar hint for the initial policy.
    fn prior(&self) -> crate::policy::BigramPrior {
        Default::default()
    }
    fn horizon(&self) -> usize {
        DEFAULT_HORIZON
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("non-finite gradient on instance `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("environment: {0}")]
    Env(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One GRPO group.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGroup {
    pub instance: TaskInstance,
    pub sequences: Vec<Vec<TokenId>>,
    pub old_logprobs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub scored: Vec<Scored>,
}

fn mix_seed(base: u64, i: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = base.wrapping_add(i.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draw `g` i.i.d. responses for `instance`. One `u64` is taken from `rng`;
/// each response gets its own derived stream, so the result does not depend
/// on execution order.
pub fn sample_group<R: RngCore + ?Sized>(
    policy: &TabularSeqPolicy,
    instance: &TaskInstance,
    g: usize,
    rng: &mut R,
) -> Vec<(Vec<TokenId>, f64)> {
    let base = rng.next_u64();
    sample_group_seeded(policy, instance, g, base, Exec::default())
}

pub fn sample_group_seeded(
    policy: &TabularSeqPolicy,
    instance: &TaskInstance,
    g: usize,
    base_seed: u64,
    exec: Exec,
) -> Vec<(Vec<TokenId>, f64)> {
    let bucket = policy.bucket(instance);
    par::map_range(exec, g, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(base_seed, i as u64));
        policy.sample_in_bucket(bucket, &mut rng)
    })
}

/// Group-normalised advantages with population standard deviation.
/// Degenerate groups (std below [`DEGENERATE_STD`]) get all-zero advantages.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std.is_nan() || std < DEGENERATE_STD {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Sample, score and normalise one group per instance.
pub fn collect_groups<E: Environment + ?Sized>(
    policy: &TabularSeqPolicy,
    env: &E,
    batch: &[TaskInstance],
    g: usize,
    rng: &mut ChaCha8Rng,
    exec: Exec,
) -> Vec<SampleGroup> {
    let seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
    par::map_indexed(exec, batch, |i, inst| {
        let samples = sample_group_seeded(policy, inst, g, seeds[i], Exec::Sequential);
        let scored: Vec<Scored> = samples.iter().map(|(toks, _)| env.score(inst, toks)).collect();
        let rewards: Vec<f64> = scored.iter().map(|s| s.reward.total).collect();
        let advantages = compute_advantages(&rewards);
        let (sequences, old_logprobs) = samples.into_iter().unzip();
        SampleGroup {
            instance: inst.clone(),
            sequences,
            old_logprobs,
            rewards,
            advantages,
            scored,
        }
    })
}

/// Surrogate objective of a batch of groups (to be maximised).
pub fn grpo_objective(policy: &TabularSeqPolicy, reference: &TabularSeqPolicy, groups: &[SampleGroup], kl_coef: f64) -> Result<f64, PolicyError> {
    let mut total = 0.0;
    for grp in groups {
        let g = grp.sequences.len() as f64;
        for (seq, a) in grp.sequences.iter().zip(&grp.advantages) {
            let lp = policy.sequence_logprob(&grp.instance, seq)?;
            let kl = policy.kl_divergence(reference, &grp.instance, seq);
            total += (a * lp - kl_coef * kl) / g;
        }
    }
    Ok(total / groups.len().max(1) as f64)
}

/// Gradient of [`grpo_objective`] plus the mean per-sequence KL.
pub fn grpo_gradient(
    policy: &TabularSeqPolicy,
    reference: &TabularSeqPolicy,
    groups: &[SampleGroup],
    kl_coef: f64,
    exec: Exec,
) -> Result<(Gradient, f64), TrainError> {
    let width = policy.vocab().len();
    let per_group = par::map(exec, groups, |grp| -> Result<(Gradient, f64), TrainError> {
        let mut grad = Gradient::new(width);
        let g = grp.sequences.len() as f64;
        let mut kl_sum = 0.0;
        for ((seq, a), old) in grp.sequences.iter().zip(&grp.advantages).zip(&grp.old_logprobs) {
            let lp = policy.sequence_logprob_grad(&grp.instance, seq, a / g, &mut grad)?;
            debug_assert!(lp == *old || !old.is_finite(), "on-policy logprob drifted");
            kl_sum += policy.kl_grad(reference, &grp.instance, seq, -kl_coef / g, &mut grad);
        }
        if !grad.is_finite() {
            return Err(TrainError::NonFiniteGradient(grp.instance.id.clone()));
        }
        Ok((grad, kl_sum))
    });
    let mut total = Gradient::new(width);
    let mut kl = 0.0;
    let mut count = 0usize;
    for (r, grp) in per_group.into_iter().zip(groups) {
        let (grad, k) = r?;
        total.add_scaled(&grad, 1.0);
        kl += k;
        count += grp.sequences.len();
    }
    total.scale(1.0 / groups.len().max(1) as f64);
    Ok((total, kl / count.max(1) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub mean_total_reward: f64,
    pub mean_format_reward: f64,
    pub mean_accuracy_reward: f64,
    pub mean_think_tokens: f64,
    pub kl: Option<f64>,
    pub grad_norm: f64,
}

fn reward_metrics<'a>(scored: impl Iterator<Item = &'a Scored>) -> StepMetrics {
    let (mut n, mut tot, mut fmt, mut acc) = (0usize, 0.0, 0.0, 0.0);
    let (mut think_n, mut think_sum) = (0usize, 0usize);
    for s in scored {
        n += 1;
        tot += s.reward.total;
        fmt += s.reward.format;
        acc += s.reward.accuracy;
        if let Some(t) = s.think_tokens {
            think_n += 1;
            think_sum += t;
        }
    }
    let n = n.max(1) as f64;
    StepMetrics {
        mean_total_reward: tot / n,
        mean_format_reward: fmt / n,
        mean_accuracy_reward: acc / n,
        mean_think_tokens: if think_n == 0 { 0.0 } else { think_sum as f64 / think_n as f64 },
        kl: None,
        grad_norm: 0.0,
    }
}

/// One GRPO update over `batch`.
pub fn grpo_update_step<E: Environment + ?Sized>(
    policy: &mut TabularSeqPolicy,
    reference: &TabularSeqPolicy,
    env: &E,
    batch: &[TaskInstance],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepMetrics, TrainError> {
    let groups = collect_groups(policy, env, batch, cfg.group_size, rng, Exec::default());
    let (mut grad, kl) = grpo_gradient(policy, reference, &groups, cfg.kl_coef, Exec::default())?;
    let mut m = reward_metrics(groups.iter().flat_map(|g| g.scored.iter()));
    m.kl = Some(kl);
    m.grad_norm = grad.norm();
    grad.scale(cfg.learning_rate);
    policy.apply(&grad);
    Ok(m)
}

/// Mean negative log-likelihood over demos and its gradient (for descent).
pub fn sft_loss_grad(policy: &TabularSeqPolicy, demos: &[DemoSequence]) -> Result<(f64, Gradient), PolicyError> {
    let mut grad = Gradient::new(policy.vocab().len());
    let n = demos.len().max(1) as f64;
    let mut loss = 0.0;
    for d in demos {
        loss -= policy.sequence_logprob_grad(&d.instance, &d.tokens, -1.0 / n, &mut grad)?;
    }
    Ok((loss / n, grad))
}

/// One supervised step; returns the pre-step mean loss in nats.
pub fn sft_update_step(policy: &mut TabularSeqPolicy, demos: &[DemoSequence], lr: f64) -> Result<f64, TrainError> {
    let (loss, mut grad) = sft_loss_grad(policy, demos)?;
    if !grad.is_finite() {
        let id = demos.first().map(|d| d.instance.id.clone()).unwrap_or_default();
        return Err(TrainError::NonFiniteGradient(id));
    }
    grad.scale(-lr);
    policy.apply(&grad);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageSchedule {
    SftOnly,
    RlOnly,
    #[default]
    TwoStage,
}

fn d_group() -> usize {
    8
}
fn d_lr() -> f64 {
    4.0
}
fn d_sft_lr() -> f64 {
    16.0
}
fn d_kl() -> f64 {
    0.04
}
fn d_steps() -> usize {
    100
}
fn d_sft_steps() -> usize {
    100
}
fn d_batch() -> usize {
    8
}
fn d_sft_demos() -> usize {
    64
}
fn d_horizon() -> usize {
    DEFAULT_HORIZON
}
fn d_buckets() -> u32 {
    DEFAULT_BUCKETS
}
fn d_prior() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvConfig,
    #[serde(default = "d_group")]
    pub group_size: usize,
    /// RL step size.
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_sft_lr")]
    pub sft_learning_rate: f64,
    #[serde(default = "d_kl")]
    pub kl_coef: f64,
    /// RL steps.
    #[serde(default = "d_steps")]
    pub steps: usize,
    /// Supervised steps (stage 1).
    #[serde(default = "d_sft_steps")]
    pub sft_steps: usize,
    /// Instances per step.
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stage_schedule: StageSchedule,
    #[serde(default = "d_sft_demos")]
    pub sft_demos: usize,
    /// Logit bonus of grammatical successors in the initial policy.
    #[serde(default = "d_prior")]
    pub prior_strength: f64,
    #[serde(default = "d_horizon")]
    pub horizon: usize,
    #[serde(default = "d_buckets")]
    pub buckets: u32,
    #[serde(default)]
    pub reward: RewardConfig,
}

impl TrainConfig {
    pub fn new(env: EnvConfig) -> Self {
        TrainConfig {
            env,
            group_size: d_group(),
            learning_rate: d_lr(),
            sft_learning_rate: d_sft_lr(),
            kl_coef: d_kl(),
            steps: d_steps(),
            sft_steps: d_sft_steps(),
            batch_size: d_batch(),
            seed: 0,
            stage_schedule: StageSchedule::default(),
            sft_demos: d_sft_demos(),
            prior_strength: d_prior(),
            horizon: d_horizon(),
            buckets: d_buckets(),
            reward: RewardConfig::default(),
        }
    }

    /// Field-level validation; the message names the offending field.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size: must be >= 2");
        }
        if self.batch_size < 1 {
            return bad("batch_size: must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate: must be finite and >= 0");
        }
        if !(self.sft_learning_rate.is_finite() && self.sft_learning_rate >= 0.0) {
            return bad("sft_learning_rate: must be finite and >= 0");
        }
        if !(self.kl_coef.is_finite() && self.kl_coef >= 0.0) {
            return bad("kl_coef: must be finite and >= 0");
        }
        if !self.prior_strength.is_finite() {
            return bad("prior_strength: must be finite");
        }
        if self.horizon < 1 {
            return bad("horizon: must be >= 1");
        }
        if self.buckets < 1 {
            return bad("buckets: must be >= 1");
        }
        if self.telemetry_rows() < 1 {
            return bad("steps: the schedule must run at least one step (steps or sft_steps)");
        }
        self.reward
            .validate()
            .map_err(|e| TrainError::Config(format!("reward.{}", e.to_string().trim_start_matches("invalid reward config: "))))
    }

    pub fn runs_sft(&self) -> bool {
        match self.stage_schedule {
            StageSchedule::SftOnly => true,
            StageSchedule::RlOnly => false,
            StageSchedule::TwoStage => self.sft_demos > 0,
        }
    }

    pub fn runs_rl(&self) -> bool {
        self.stage_schedule != StageSchedule::SftOnly
    }

    /// Rows the telemetry log will contain.
    pub fn telemetry_rows(&self) -> usize {
        (if self.runs_sft() { self.sft_steps } else { 0 }) + (if self.runs_rl() { self.steps } else { 0 })
    }

    /// Short content hash of the config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Init,
    PostSft,
    PostRl,
}

impl Provenance {
    pub fn file_name(self) -> &'static str {
        match self {
            Provenance::Init => "init.ckpt.json",
            Provenance::PostSft => "post_sft.ckpt.json",
            Provenance::PostRl => "post_rl.ckpt.json",
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "rft-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub policy: TabularSeqPolicy,
    pub provenance: Provenance,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    provenance: Provenance,
    config_hash: String,
    policy: PolicySnapshot,
}

impl PolicyCheckpoint {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            provenance: self.provenance,
            config_hash: self.config_hash.clone(),
            policy: self.policy.snapshot(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(TrainError::Checkpoint(format!("unknown format `{}`", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {}", file.version)));
        }
        Ok(PolicyCheckpoint {
            policy: TabularSeqPolicy::from_snapshot(file.policy)?,
            provenance: file.provenance,
            config_hash: file.config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut text = self.to_json();
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sft,
    Rl,
}

/// One telemetry row; `kl` is empty for supervised steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub step: usize,
    pub stage: Stage,
    pub mean_total_reward: f64,
    pub mean_format_reward: f64,
    pub mean_accuracy_reward: f64,
    pub mean_think_tokens: f64,
    pub kl: Option<f64>,
    pub grad_norm: f64,
}

impl TelemetryRow {
    fn new(step: usize, stage: Stage, m: StepMetrics) -> Self {
        TelemetryRow {
            step,
            stage,
            mean_total_reward: m.mean_total_reward,
            mean_format_reward: m.mean_format_reward,
            mean_accuracy_reward: m.mean_accuracy_reward,
            mean_think_tokens: m.mean_think_tokens,
            kl: m.kl,
            grad_norm: m.grad_norm,
        }
    }
}

pub fn write_telemetry(path: &Path, rows: &[TelemetryRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "step",
            "stage",
            "mean_total_reward",
            "mean_format_reward",
            "mean_accuracy_reward",
            "mean_think_tokens",
            "kl",
            "grad_norm",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_telemetry(path: &Path) -> Result<Vec<TelemetryRow>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub init: PolicyCheckpoint,
    pub post_sft: Option<PolicyCheckpoint>,
    pub post_rl: Option<PolicyCheckpoint>,
    pub telemetry: Vec<TelemetryRow>,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &PolicyCheckpoint {
        self.post_rl.as_ref().or(self.post_sft.as_ref()).unwrap_or(&self.init)
    }

    /// Telemetry rows of one stage, in order.
    pub fn stage_rows(&self, stage: Stage) -> impl Iterator<Item = &TelemetryRow> {
        self.telemetry.iter().filter(move |r| r.stage == stage)
    }
}

/// Initial policy for `env` under `cfg`.
pub fn initial_policy<E: Environment + ?Sized>(cfg: &TrainConfig, env: &E) -> TabularSeqPolicy {
    TabularSeqPolicy::with_prior(env.vocab().clone(), cfg.horizon.min(env.horizon()), cfg.buckets, &env.prior(), cfg.prior_strength)
}

/// Full training run. With `out_dir`, writes checkpoints and `telemetry.csv`.
pub fn run_training<E: Environment + ?Sized>(cfg: &TrainConfig, env: &E, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let pool = env.instances();
    if pool.is_empty() {
        return Err(TrainError::Env("environment has no instances".into()));
    }
    let hash = cfg.hash();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = PolicyCheckpoint {
        policy: initial_policy(cfg, env),
        provenance: Provenance::Init,
        config_hash: hash.clone(),
    };
    let mut policy = init.policy.clone();
    let mut telemetry = Vec::with_capacity(cfg.telemetry_rows());
    let mut step = 0usize;

    let mut post_sft = None;
    if cfg.runs_sft() {
        let mut demos = env.demonstrations();
        demos.truncate(cfg.sft_demos);
        if demos.is_empty() {
            return Err(TrainError::Env(format!("environment `{}` provides no demonstrations", env.name())));
        }
        for s in 0..cfg.sft_steps {
            let batch: Vec<DemoSequence> = (0..cfg.batch_size.min(demos.len()))
                .map(|j| demos[(s * cfg.batch_size + j) % demos.len()].clone())
                .collect();
            let instances: Vec<TaskInstance> = batch.iter().map(|d| d.instance.clone()).collect();
            let groups = collect_groups(&policy, env, &instances, cfg.group_size, &mut rng, Exec::default());
            let mut m = reward_metrics(groups.iter().flat_map(|g| g.scored.iter()));
            let (_, grad) = sft_loss_grad(&policy, &batch)?;
            m.grad_norm = grad.norm();
            sft_update_step(&mut policy, &batch, cfg.sft_learning_rate)?;
            telemetry.push(TelemetryRow::new(step, Stage::Sft, m));
            step += 1;
        }
        post_sft = Some(PolicyCheckpoint {
            policy: policy.clone(),
            provenance: Provenance::PostSft,
            config_hash: hash.clone(),
        });
    }

    let mut post_rl = None;
    if cfg.runs_rl() {
        let reference = post_sft.as_ref().map_or(&init.policy, |c| &c.policy).clone();
        for _ in 0..cfg.steps {
            let batch: Vec<TaskInstance> = (0..cfg.batch_size)
                .map(|_| pool[rng.random_range(0..pool.len())].clone())
                .collect();
            let m = grpo_update_step(&mut policy, &reference, env, &batch, cfg, &mut rng)?;
            telemetry.push(TelemetryRow::new(step, Stage::Rl, m));
            step += 1;
        }
        post_rl = Some(PolicyCheckpoint {
            policy: policy.clone(),
            provenance: Provenance::PostRl,
            config_hash: hash.clone(),
        });
    }

    let outcome = TrainOutcome {
        init,
        post_sft,
        post_rl,
        telemetry,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        for ck in [Some(&outcome.init), outcome.post_sft.as_ref(), outcome.post_rl.as_ref()]
            .into_iter()
            .flatten()
        {
            ck.save(&dir.join(ck.provenance.file_name()))?;
        }
        write_telemetry(&dir.join("telemetry.csv"), &outcome.telemetry)?;
    }
    Ok(outcome)
}

/// Path of the final checkpoint a run writes into `out_dir`.
pub fn final_checkpoint_path(cfg: &TrainConfig, out_dir: &Path) -> PathBuf {
    let p = if cfg.runs_rl() {
        Provenance::PostRl
    } else if cfg.runs_sft() {
        Provenance::PostSft
    } else {
        Provenance::Init
    };
    out_dir.join(p.file_name())
}
