//! Training environments built on the task generators.
//!
//! A pool environment holds a fixed set of prompts, a vocabulary able to
//! express their gold responses, and the gold demonstrations themselves.
//! Reasoning text in demonstrations is a short keyword trace (for scene
//! transformations, `diff <attribute>`), chosen so that no symbol repeats
//! within a response; the bigram policy can then reproduce a demonstration
//! exactly.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::counting::{gen_counting, CountingConfig, CountingKind};
use super::scene::{AttributeVocab, View};
use super::trance::{gen_trance_level, TranceConfig};
use super::transform::{Cell, TransformFn};
use super::EnvError;
use crate::grpo::{DemoSequence, Environment, Scored, TaskInstance, TaskKind};
use crate::policy::{bucket_of, BigramPrior, TokenId, Vocabulary, EOS};
use crate::response::{count_reasoning_tokens, ResponseTemplate, Segment};
use crate::reward::{score_response, GroundTruthAnswer, RewardBreakdown, RewardConfig};

const SUMMARY_WORD: &str = "infer";
const CAPTION_WORD: &str = "scene";
const MAX_COUNT_TOKEN: u32 = 24;

fn d_arms() -> usize {
    10
}
fn d_contexts() -> usize {
    4
}
fn d_pool() -> usize {
    64
}
fn d_objects() -> usize {
    3
}
fn d_grid() -> i32 {
    3
}

/// Which environment a training run uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    /// Contextual bandit: one token per response, fixed arm values.
    Bandit {
        #[serde(default = "d_arms")]
        arms: usize,
        #[serde(default = "d_contexts")]
        contexts: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Single-step scene transformations on a small grid.
    TranceMini {
        #[serde(default = "d_pool")]
        pool: usize,
        #[serde(default = "d_objects")]
        objects: usize,
        #[serde(default = "d_grid")]
        grid: i32,
        #[serde(default)]
        view: View,
        #[serde(default)]
        seed: u64,
    },
    /// Counting questions with small answers.
    CountingMini {
        #[serde(default = "d_pool")]
        pool: usize,
        #[serde(default)]
        seed: u64,
    },
}

/// Build the environment described by `cfg`. Pool instances are deduplicated
/// by context bucket so that every prompt owns its bucket.
pub fn build_env(cfg: &EnvConfig, buckets: u32, reward: &RewardConfig) -> Result<Box<dyn Environment + Send>, EnvError> {
    Ok(match cfg {
        EnvConfig::Bandit { arms, contexts, seed } => Box::new(BanditEnv::new(*arms, *contexts, *seed)?),
        EnvConfig::TranceMini { pool, objects, grid, view, seed } => {
            Box::new(PoolEnv::trance_mini(*pool, *objects, *grid, *view, *seed, buckets, reward.clone())?)
        }
        EnvConfig::CountingMini { pool, seed } => Box::new(PoolEnv::counting_mini(*pool, *seed, buckets, reward.clone())?),
    })
}

/// Contextual bandit with deterministic arm values in `[0, 1)`.
#[derive(Debug, Clone)]
pub struct BanditEnv {
    vocab: Vocabulary,
    instances: Vec<TaskInstance>,
    values: Vec<Vec<f64>>,
}

impl BanditEnv {
    pub fn new(arms: usize, contexts: usize, seed: u64) -> Result<Self, EnvError> {
        if !(2..crate::policy::MAX_VOCAB).contains(&arms) || contexts == 0 {
            return Err(EnvError::InfeasibleConfig("bandit needs 2..127 arms and at least one context".into()));
        }
        let symbols: Vec<String> = (0..arms).map(|a| format!("arm{a}")).chain([EOS.to_string()]).collect();
        let vocab = Vocabulary::new(symbols).map_err(|e| EnvError::InfeasibleConfig(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<Vec<f64>> = (0..contexts).map(|_| (0..arms).map(|_| rng.random::<f64>()).collect()).collect();
        let instances = values
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let best = (0..arms).max_by(|&a, &b| v[a].total_cmp(&v[b])).expect("arms");
                TaskInstance::new(
                    format!("bandit-{c}"),
                    TaskKind::Bandit,
                    format!("context {c}"),
                    "pick an arm",
                    GroundTruthAnswer::discrete(format!("arm{best}")),
                    "bandit",
                )
            })
            .collect();
        Ok(BanditEnv { vocab, instances, values })
    }

    /// Value of `arm` in context `c`; end-of-sequence is worth 0.
    pub fn arm_value(&self, c: usize, arm: TokenId) -> f64 {
        self.values[c].get(arm as usize).copied().unwrap_or(0.0)
    }

    pub fn arm_values(&self) -> &[Vec<f64>] {
        &self.values
    }

    fn context_index(&self, instance: &TaskInstance) -> usize {
        self.instances.iter().position(|i| i.id == instance.id).unwrap_or(0)
    }
}

impl Environment for BanditEnv {
    fn name(&self) -> &str {
        "bandit"
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn instances(&self) -> &[TaskInstance] {
        &self.instances
    }

    fn score(&self, instance: &TaskInstance, tokens: &[TokenId]) -> Scored {
        let v = tokens.first().map_or(0.0, |&a| self.arm_value(self.context_index(instance), a));
        Scored {
            reward: RewardBreakdown::new(0.0, v),
            think_tokens: None,
        }
    }

    fn demonstrations(&self) -> Vec<DemoSequence> {
        self.instances
            .iter()
            .map(|inst| {
                let GroundTruthAnswer::Discrete { value, .. } = &inst.gt else {
                    unreachable!("bandit answers are discrete")
                };
                DemoSequence {
                    instance: inst.clone(),
                    tokens: vec![self.vocab.id(value).expect("arm symbol")],
                }
            })
            .collect()
    }

    fn horizon(&self) -> usize {
        1
    }
}

/// Fixed pool of templated prompts scored with the composite reward.
#[derive(Debug, Clone)]
pub struct PoolEnv {
    name: String,
    vocab: Vocabulary,
    instances: Vec<TaskInstance>,
    demos: Vec<DemoSequence>,
    reward: RewardConfig,
    prior: BigramPrior,
}

struct SymbolClasses {
    think: Vec<String>,
    answer_start: Vec<String>,
    answer_rest: Vec<(String, Vec<String>)>,
    answer_end: Vec<String>,
}

fn tag_symbols(template: ResponseTemplate) -> Vec<String> {
    template.tags().into_iter().map(String::from).collect()
}

impl PoolEnv {
    fn assemble(
        name: &str,
        instances: Vec<TaskInstance>,
        thinks: Vec<Vec<String>>,
        classes: SymbolClasses,
        reward: RewardConfig,
    ) -> Result<Self, EnvError> {
        let template = reward.template;
        let mut symbols: Vec<String> = tag_symbols(template);
        if template == ResponseTemplate::SummaryCaptionThinkAnswer {
            symbols.extend([SUMMARY_WORD.to_string(), CAPTION_WORD.to_string()]);
        }
        let mut push = |s: &String| {
            if !symbols.contains(s) {
                symbols.push(s.clone());
            }
        };
        classes.think.iter().for_each(&mut push);
        classes.answer_start.iter().for_each(&mut push);
        for (s, nexts) in &classes.answer_rest {
            push(s);
            nexts.iter().for_each(&mut push);
        }
        classes.answer_end.iter().for_each(&mut push);
        symbols.push(EOS.to_string());
        let vocab = Vocabulary::new(symbols).map_err(|e| EnvError::InfeasibleConfig(e.to_string()))?;

        let id = |s: &str| vocab.id(s).expect("symbol registered");
        let ids = |xs: &[String]| xs.iter().map(|s| id(s)).collect::<Vec<_>>();
        let mut prior = BigramPrior::default();
        let segs = template.segments();
        prior.allow(vocab.bos(), [id(segs[0].open_tag())]);
        for (i, seg) in segs.iter().enumerate() {
            let open = id(seg.open_tag());
            let close = id(seg.close_tag());
            let words: Vec<TokenId> = match seg {
                Segment::Summary => vec![id(SUMMARY_WORD)],
                Segment::Caption => vec![id(CAPTION_WORD)],
                Segment::Think => ids(&classes.think),
                Segment::Answer => ids(&classes.answer_start),
            };
            prior.allow(open, words.iter().copied());
            if *seg != Segment::Answer {
                for &w in &words {
                    prior.allow(w, words.iter().copied().chain([close]));
                }
            }
            let after = segs.get(i + 1).map_or(vocab.eos(), |n| id(n.open_tag()));
            prior.allow(close, [after]);
        }
        for (s, nexts) in &classes.answer_rest {
            prior.allow(id(s), ids(nexts));
        }
        for s in &classes.answer_end {
            prior.allow(id(s), [id(Segment::Answer.close_tag())]);
        }

        let mut demos = Vec::with_capacity(instances.len());
        for (inst, think) in instances.iter().zip(&thinks) {
            let mut text = Vec::new();
            for seg in segs {
                text.push(seg.open_tag().to_string());
                match seg {
                    Segment::Summary => text.push(SUMMARY_WORD.into()),
                    Segment::Caption => text.push(CAPTION_WORD.into()),
                    Segment::Think => text.extend(think.iter().cloned()),
                    Segment::Answer => text.push(inst.gt.answer_text()),
                }
                text.push(seg.close_tag().to_string());
            }
            let mut tokens = vocab
                .encode(&text.join(" "))
                .map_err(|e| EnvError::InfeasibleConfig(format!("gold response not expressible: {e}")))?;
            tokens.push(vocab.eos());
            demos.push(DemoSequence {
                instance: inst.clone(),
                tokens,
            });
        }
        Ok(PoolEnv {
            name: name.to_string(),
            vocab,
            instances,
            demos,
            reward,
            prior,
        })
    }

    /// Level-1 scene transformations with `objects` objects on a `grid` x `grid` board.
    pub fn trance_mini(pool: usize, objects: usize, grid: i32, view: View, seed: u64, buckets: u32, reward: RewardConfig) -> Result<Self, EnvError> {
        let cfg = TranceConfig {
            grid: (grid, grid),
            min_objects: objects,
            max_objects: objects,
            level_weights: vec![1.0, 0.0, 0.0, 0.0],
            view,
            vocab: AttributeVocab::mini(),
            max_retries: 1000,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::new();
        let mut instances = Vec::with_capacity(pool);
        let mut thinks = Vec::with_capacity(pool);
        let mut attempts = 0usize;
        while instances.len() < pool {
            attempts += 1;
            if attempts > pool * 100 + 1000 {
                return Err(EnvError::GenerationExhausted(attempts));
            }
            let sample = gen_trance_level(&mut rng, &cfg, 1)?;
            let inst = sample.to_instance(format!("trance-{}", instances.len()), &cfg);
            if !seen.insert(bucket_of(&inst, buckets)) {
                continue;
            }
            thinks.push(vec!["diff".to_string(), sample.gt_sequence[0].function.attribute().to_string()]);
            instances.push(inst);
        }

        let vocab = &cfg.vocab;
        let values: Vec<String> = vocab
            .all_values()
            .cloned()
            .chain((0..grid).flat_map(|y| (0..grid).map(move |x| Cell::new(x, y).to_string())))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let object_ids: Vec<String> = (0..objects).map(|i| format!("o{i}")).collect();
        let functions: Vec<String> = TransformFn::ALL.iter().map(|f| f.name().to_string()).collect();
        let mut think = vec!["diff".to_string()];
        think.extend(TransformFn::ALL.iter().map(|f| f.attribute().to_string()));
        let mut rest: Vec<(String, Vec<String>)> = functions.iter().map(|f| (f.clone(), vec!["(".to_string()])).collect();
        rest.push(("(".into(), object_ids.clone()));
        rest.extend(object_ids.iter().map(|o| (o.clone(), vec![",".to_string()])));
        rest.push((",".into(), values.iter().cloned().chain(functions.iter().cloned()).collect()));
        rest.extend(values.iter().map(|v| (v.clone(), vec![")".to_string()])));
        rest.push((")".into(), vec![",".to_string()]));
        let classes = SymbolClasses {
            think,
            answer_start: functions,
            answer_rest: rest,
            answer_end: vec![")".into()],
        };
        Self::assemble("trance_mini", instances, thinks, classes, reward)
    }

    /// Counting questions whose answers fit the number tokens `0..=24`.
    pub fn counting_mini(pool: usize, seed: u64, buckets: u32, reward: RewardConfig) -> Result<Self, EnvError> {
        let cfg = CountingConfig {
            min_objects: 2,
            max_objects: 8,
            max_op_count: 3,
            kind_mix: CountingKind::ALL.iter().map(|k| (*k, 1.0)).collect(),
            vocab: Some(AttributeVocab::mini()),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::new();
        let mut instances = Vec::with_capacity(pool);
        let mut thinks = Vec::with_capacity(pool);
        let mut attempts = 0usize;
        while instances.len() < pool {
            attempts += 1;
            if attempts > pool * 100 + 1000 {
                return Err(EnvError::GenerationExhausted(attempts));
            }
            let sample = gen_counting(&mut rng, &cfg)?;
            if sample.answer > MAX_COUNT_TOKEN {
                continue;
            }
            let inst = sample.to_instance(format!("counting-{}", instances.len()), &cfg);
            if !seen.insert(bucket_of(&inst, buckets)) {
                continue;
            }
            thinks.push(vec!["count".to_string(), sample.question.kind.name().to_string()]);
            instances.push(inst);
        }
        let numbers: Vec<String> = (0..=MAX_COUNT_TOKEN).map(|n| n.to_string()).collect();
        let mut think = vec!["count".to_string()];
        think.extend(CountingKind::ALL.iter().map(|k| k.name().to_string()));
        let classes = SymbolClasses {
            think,
            answer_start: numbers.clone(),
            answer_rest: Vec::new(),
            answer_end: numbers,
        };
        Self::assemble("counting_mini", instances, thinks, classes, reward)
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward
    }
}

impl Environment for PoolEnv {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn instances(&self) -> &[TaskInstance] {
        &self.instances
    }

    fn score(&self, instance: &TaskInstance, tokens: &[TokenId]) -> Scored {
        let text = self.vocab.render(tokens);
        let (reward, resp) = score_response(&text, &instance.gt, &self.reward);
        Scored {
            reward,
            think_tokens: resp.map(|r| count_reasoning_tokens(&r, Some(&self.vocab))),
        }
    }

    fn demonstrations(&self) -> Vec<DemoSequence> {
        self.demos.clone()
    }

    fn prior(&self) -> BigramPrior {
        self.prior.clone()
    }
}
