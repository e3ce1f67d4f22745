//! Command implementations behind the `rft` binary.
//!
//! Datasets, predictions and scores are JSON Lines; telemetry is CSV; config
//! files are TOML. Every command is a deterministic function of its inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::counting::{gen_counting_kind, CountingConfig};
use crate::envs::numeric::{gen_numeric_qa, NumericQaConfig};
use crate::envs::training::build_env;
use crate::envs::trance::{gen_trance, TranceConfig};
use crate::envs::EnvError;
use crate::grpo::{final_checkpoint_path, run_training, PolicyCheckpoint, TaskInstance, TaskKind, TrainConfig, TrainError};
use crate::par::{self, Exec};
use crate::reward::{score_response, GroundTruthAnswer, RewardConfig, RewardError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("prediction ids not in dataset: {}", .0.join(", "))]
    UnmatchedId(Vec<String>),
    #[error("record `{id}`: gold answer not expressible in checkpoint vocabulary ({reason})")]
    VocabMismatch { id: String, reason: String },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{0}: {1}")]
    Io(PathBuf, io::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl CliError {
    /// 1 for bad input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_)
            | CliError::UnmatchedId(_)
            | CliError::VocabMismatch { .. }
            | CliError::Parse { .. }
            | CliError::Env(EnvError::InfeasibleConfig(_))
            | CliError::Train(TrainError::Config(_)) => 1,
            _ => 2,
        }
    }
}

impl From<RewardError> for CliError {
    fn from(e: RewardError) -> Self {
        CliError::Validation(format!("reward config: {e}"))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.to_path_buf(), e)
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub task: TaskKind,
    pub context: String,
    pub question: String,
    pub answer: GroundTruthAnswer,
    pub subset: String,
}

impl From<&TaskInstance> for DatasetRecord {
    fn from(i: &TaskInstance) -> Self {
        DatasetRecord {
            id: i.id.clone(),
            task: i.task,
            context: i.context.clone(),
            question: i.question.clone(),
            answer: i.gt.clone(),
            subset: i.subset_label.clone(),
        }
    }
}

impl DatasetRecord {
    pub fn to_instance(&self) -> TaskInstance {
        TaskInstance::new(self.id.clone(), self.task, self.context.clone(), self.question.clone(), self.answer.clone(), self.subset.clone())
    }

    fn check(&self) -> Result<(), String> {
        let ok = matches!(
            (self.task, &self.answer),
            (TaskKind::Counting | TaskKind::Bandit, GroundTruthAnswer::Discrete { .. })
                | (TaskKind::NumericQa, GroundTruthAnswer::Numeric { .. } | GroundTruthAnswer::Discrete { .. })
                | (TaskKind::Trance, GroundTruthAnswer::FunctionSeq { .. })
        );
        if ok {
            Ok(())
        } else {
            Err(format!("answer kind `{:?}` does not match task `{}`", self.answer.kind(), self.task.name()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub output_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub format: f64,
    pub accuracy: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub mean_format: f64,
    pub mean_accuracy: f64,
    pub mean_total: f64,
    /// Fraction of records with accuracy exactly 1.
    pub acc: f64,
}

impl ScoreSummary {
    pub fn of(scores: &[ScoreRecord]) -> Self {
        let n = scores.len();
        let mean = |f: fn(&ScoreRecord) -> f64| if n == 0 { 0.0 } else { scores.iter().map(f).sum::<f64>() / n as f64 };
        ScoreSummary {
            count: n,
            mean_format: mean(|s| s.format),
            mean_accuracy: mean(|s| s.accuracy),
            mean_total: mean(|s| s.total),
            acc: mean(|s| if s.accuracy == 1.0 { 1.0 } else { 0.0 }),
        }
    }

    pub fn table(&self) -> String {
        format!(
            "records        {}\nmean format    {:.4}\nmean accuracy  {:.4}\nmean total     {:.4}\nAcc            {:.4}\n",
            self.count, self.mean_format, self.mean_accuracy, self.mean_total, self.acc
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub count: usize,
    pub correct: usize,
    pub acc: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subsets: BTreeMap<String, SubsetStats>,
    /// Unweighted mean of the subset accuracies.
    pub macro_avg: f64,
    pub count: usize,
}

impl EvalReport {
    pub fn from_scores(labels: &[String], scores: &[ScoreRecord]) -> Self {
        let mut subsets: BTreeMap<String, SubsetStats> = BTreeMap::new();
        for (label, s) in labels.iter().zip(scores) {
            let e = subsets.entry(label.clone()).or_insert(SubsetStats {
                count: 0,
                correct: 0,
                acc: 0.0,
                mean_reward: 0.0,
            });
            e.count += 1;
            e.correct += usize::from(s.accuracy == 1.0);
            e.mean_reward += s.total;
        }
        for e in subsets.values_mut() {
            e.acc = e.correct as f64 / e.count as f64;
            e.mean_reward /= e.count as f64;
        }
        let macro_avg = if subsets.is_empty() {
            0.0
        } else {
            subsets.values().map(|s| s.acc).sum::<f64>() / subsets.len() as f64
        };
        EvalReport {
            subsets,
            macro_avg,
            count: scores.len(),
        }
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>7} {:>8} {:>8}", "subset", "n", "Acc", "reward");
        for (name, s) in &self.subsets {
            let _ = writeln!(out, "{:<16} {:>7} {:>8.4} {:>8.4}", name, s.count, s.acc, s.mean_reward);
        }
        let _ = writeln!(out, "{:<16} {:>7} {:>8.4}", "AVG", self.count, self.macro_avg);
        out
    }
}

/// Read a JSON Lines file. Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for item in items {
        let line = serde_json::to_string(item).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Parse a TOML file into `T`; a missing path gives `T::default()`.
pub fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn read_reward_config(path: Option<&Path>) -> Result<RewardConfig, CliError> {
    let cfg: RewardConfig = read_toml(path)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, CliError> {
    let records: Vec<DatasetRecord> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(CliError::Validation(format!("{}: duplicate id `{}`", path.display(), r.id)));
        }
        r.check().map_err(|m| CliError::Validation(format!("{}: record `{}`: {m}", path.display(), r.id)))?;
    }
    Ok(records)
}

/// Generate `n` records of `task`. `config` is the task's TOML config.
pub fn generate(task: TaskKind, n: usize, seed: u64, config: Option<&Path>) -> Result<Vec<DatasetRecord>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = |i: usize| format!("{}-{i:06}", task.name());
    let mut out = Vec::with_capacity(n);
    match task {
        TaskKind::Counting => {
            let cfg: CountingConfig = read_toml(config)?;
            for (i, kind) in cfg.stratified_kinds(&mut rng, n).into_iter().enumerate() {
                let s = gen_counting_kind(&mut rng, &cfg, kind)?;
                out.push(DatasetRecord::from(&s.to_instance(id(i), &cfg)));
            }
        }
        TaskKind::NumericQa => {
            let cfg: NumericQaConfig = read_toml(config)?;
            for i in 0..n {
                let s = gen_numeric_qa(&mut rng, &cfg)?;
                out.push(DatasetRecord::from(&s.to_instance(id(i))));
            }
        }
        TaskKind::Trance => {
            let cfg: TranceConfig = read_toml(config)?;
            for i in 0..n {
                let s = gen_trance(&mut rng, &cfg)?;
                out.push(DatasetRecord::from(&s.to_instance(id(i), &cfg)));
            }
        }
        TaskKind::Bandit => return Err(CliError::Validation("task: bandit has no dataset generator".into())),
    }
    Ok(out)
}

/// `gen`: write the dataset and return a per-subset count summary.
pub fn cmd_gen(task: TaskKind, n: usize, seed: u64, config: Option<&Path>, out: &Path) -> Result<String, CliError> {
    let records = generate(task, n, seed, config)?;
    write_jsonl(out, &records)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        *counts.entry(r.subset.as_str()).or_default() += 1;
    }
    let mut s = format!("wrote {} {} records to {}\n", records.len(), task.name(), out.display());
    for (k, v) in counts {
        let _ = writeln!(s, "  {k:<16} {v}");
    }
    Ok(s)
}

/// Score predictions against a dataset, in prediction order.
pub fn score_predictions(preds: &[Prediction], data: &[DatasetRecord], cfg: &RewardConfig, exec: Exec) -> Result<Vec<ScoreRecord>, CliError> {
    let by_id: BTreeMap<&str, &DatasetRecord> = data.iter().map(|r| (r.id.as_str(), r)).collect();
    let missing: Vec<String> = preds.iter().filter(|p| !by_id.contains_key(p.id.as_str())).map(|p| p.id.clone()).collect();
    if !missing.is_empty() {
        return Err(CliError::UnmatchedId(missing));
    }
    Ok(par::map(exec, preds, |p| {
        let (r, _) = score_response(&p.output_text, &by_id[p.id.as_str()].answer, cfg);
        ScoreRecord {
            id: p.id.clone(),
            format: r.format,
            accuracy: r.accuracy,
            total: r.total,
        }
    }))
}

/// `score`: write score records and return the summary.
pub fn cmd_score(pred: &Path, data: &Path, reward_config: Option<&Path>, out: &Path) -> Result<ScoreSummary, CliError> {
    let cfg = read_reward_config(reward_config)?;
    let preds: Vec<Prediction> = read_jsonl(pred)?;
    let data = read_dataset(data)?;
    let scores = score_predictions(&preds, &data, &cfg, Exec::default())?;
    write_jsonl(out, &scores)?;
    Ok(ScoreSummary::of(&scores))
}

pub fn read_train_config(path: &Path) -> Result<TrainConfig, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let cfg: TrainConfig = toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// `train`: run training into `out_dir`. Also writes the training pool as
/// `pool.jsonl` so the result can be evaluated with `eval`. Returns the path
/// of the final checkpoint.
pub fn cmd_train(config: &Path, out_dir: &Path) -> Result<PathBuf, CliError> {
    let cfg = read_train_config(config)?;
    let env = build_env(&cfg.env, cfg.buckets, &cfg.reward)?;
    run_training(&cfg, env.as_ref(), Some(out_dir))?;
    let pool: Vec<DatasetRecord> = env.instances().iter().map(DatasetRecord::from).collect();
    write_jsonl(&out_dir.join("pool.jsonl"), &pool)?;
    Ok(final_checkpoint_path(&cfg, out_dir))
}

/// Greedy-decode every record and score it.
pub fn evaluate(ckpt: &PolicyCheckpoint, data: &[DatasetRecord], cfg: &RewardConfig, exec: Exec) -> Result<(Vec<ScoreRecord>, EvalReport), CliError> {
    let policy = &ckpt.policy;
    for r in data {
        policy.vocab().encode(&r.answer.answer_text()).map_err(|e| CliError::VocabMismatch {
            id: r.id.clone(),
            reason: e.to_string(),
        })?;
    }
    let scores = par::map(exec, data, |r| {
        let text = policy.vocab().render(&policy.greedy(&r.to_instance()));
        let (s, _) = score_response(&text, &r.answer, cfg);
        ScoreRecord {
            id: r.id.clone(),
            format: s.format,
            accuracy: s.accuracy,
            total: s.total,
        }
    });
    let labels: Vec<String> = data.iter().map(|r| r.subset.clone()).collect();
    let report = EvalReport::from_scores(&labels, &scores);
    Ok((scores, report))
}

/// `eval`: returns the report; with `out`, also writes it as JSON.
pub fn cmd_eval(ckpt: &Path, data: &Path, reward_config: Option<&Path>, out: Option<&Path>) -> Result<EvalReport, CliError> {
    let cfg = read_reward_config(reward_config)?;
    let text = fs::read_to_string(ckpt).map_err(io_err(ckpt))?;
    let ckpt = PolicyCheckpoint::from_json(&text)?;
    let data = read_dataset(data)?;
    let (_, report) = evaluate(&ckpt, &data, &cfg, Exec::default())?;
    if let Some(out) = out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(out, json + "\n").map_err(io_err(out))?;
    }
    Ok(report)
}
