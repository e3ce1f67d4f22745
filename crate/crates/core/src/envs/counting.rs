//! Counting-with-operations task generator.
//!
//! A question lists add/remove operations on objects with a given attribute
//! value and asks how many objects with some value remain. Every predicate in
//! a question uses the same attribute, so an adversarial question (query value
//! different from every operation value) is never affected by its operations.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{serialize_objects, Attribute, AttributeVocab, SceneObject};
use super::trance::pick_weighted;
use super::EnvError;
use crate::grpo::{TaskInstance, TaskKind};
use crate::reward::GroundTruthAnswer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountingKind {
    Addition,
    Subtraction,
    Adversarial,
    Multihop,
    Mixed,
}

impl CountingKind {
    pub const ALL: [CountingKind; 5] = [
        CountingKind::Addition,
        CountingKind::Subtraction,
        CountingKind::Adversarial,
        CountingKind::Multihop,
        CountingKind::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CountingKind::Addition => "addition",
            CountingKind::Subtraction => "subtraction",
            CountingKind::Adversarial => "adversarial",
            CountingKind::Multihop => "multihop",
            CountingKind::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpSign {
    Add,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttrPredicate {
    pub attribute: Attribute,
    pub value: String,
}

impl AttrPredicate {
    pub fn matches(&self, o: &SceneObject) -> bool {
        o.get(self.attribute) == self.value
    }

    fn phrase(&self) -> String {
        format!("{} objects", self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CountingOp {
    pub op: OpSign,
    pub filter: AttrPredicate,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CountingQuestion {
    pub ops: Vec<CountingOp>,
    pub query_filter: AttrPredicate,
    pub kind: CountingKind,
}

impl CountingQuestion {
    /// Structural constraints of the question kind.
    pub fn is_well_formed(&self) -> bool {
        let adds = self.ops.iter().filter(|o| o.op == OpSign::Add).count();
        let removes = self.ops.len() - adds;
        let disjoint = self.ops.iter().all(|o| o.filter.attribute == self.query_filter.attribute && o.filter.value != self.query_filter.value);
        match self.kind {
            CountingKind::Addition => self.ops.len() == 1 && adds == 1,
            CountingKind::Subtraction => self.ops.len() == 1 && removes == 1,
            CountingKind::Multihop => self.ops.len() >= 2 && (adds == 0 || removes == 0),
            CountingKind::Mixed => self.ops.len() >= 2 && adds > 0 && removes > 0,
            CountingKind::Adversarial => !self.ops.is_empty() && disjoint,
        }
    }

    pub fn render(&self) -> String {
        let mut parts: Vec<String> = self
            .ops
            .iter()
            .map(|o| {
                let verb = match o.op {
                    OpSign::Add => "Add",
                    OpSign::Remove => "Remove",
                };
                format!("{verb} {} {}.", o.count, o.filter.phrase())
            })
            .collect();
        parts.push(format!("How many {} are left?", self.query_filter.phrase()));
        parts.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountingSample {
    pub scene: Vec<SceneObject>,
    pub question: CountingQuestion,
    pub answer: u32,
}

impl CountingSample {
    pub fn to_instance(&self, id: impl Into<String>, cfg: &CountingConfig) -> TaskInstance {
        TaskInstance::new(
            id,
            TaskKind::Counting,
            serialize_objects(&self.scene),
            self.question.render(),
            GroundTruthAnswer::discrete(self.answer.to_string()),
            cfg.subset_label(self.question.kind),
        )
    }
}

fn d_min() -> usize {
    3
}
fn d_max() -> usize {
    10
}
fn d_op_count() -> u32 {
    3
}
fn d_mix() -> BTreeMap<CountingKind, f64> {
    [
        (CountingKind::Addition, 1.0),
        (CountingKind::Subtraction, 1.0),
        (CountingKind::Adversarial, 1.0),
        (CountingKind::Multihop, 1.0),
    ]
    .into_iter()
    .collect()
}
fn d_retries() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountingConfig {
    #[serde(default = "d_min")]
    pub min_objects: usize,
    #[serde(default = "d_max")]
    pub max_objects: usize,
    /// Largest count in a single operation.
    #[serde(default = "d_op_count")]
    pub max_op_count: u32,
    /// Use the shifted vocabulary and DS-D / DS-M subset labels.
    #[serde(default)]
    pub domain_shift: bool,
    /// Overrides the vocabulary implied by `domain_shift`.
    #[serde(default)]
    pub vocab: Option<AttributeVocab>,
    #[serde(default = "d_mix")]
    pub kind_mix: BTreeMap<CountingKind, f64>,
    #[serde(default = "d_retries")]
    pub max_retries: usize,
}

impl Default for CountingConfig {
    fn default() -> Self {
        CountingConfig {
            min_objects: d_min(),
            max_objects: d_max(),
            max_op_count: d_op_count(),
            domain_shift: false,
            vocab: None,
            kind_mix: d_mix(),
            max_retries: d_retries(),
        }
    }
}

impl CountingConfig {
    pub fn vocab(&self) -> AttributeVocab {
        self.vocab.clone().unwrap_or_else(|| {
            if self.domain_shift {
                AttributeVocab::shifted()
            } else {
                AttributeVocab::in_domain()
            }
        })
    }

    pub fn subset_label(&self, kind: CountingKind) -> String {
        match (self.domain_shift, kind) {
            (false, k) => k.name().to_string(),
            (true, CountingKind::Mixed) => "DS-M".into(),
            (true, _) => "DS-D".into(),
        }
    }

    fn check(&self) -> Result<(), EnvError> {
        if self.min_objects > self.max_objects {
            return Err(EnvError::InfeasibleConfig("min_objects > max_objects".into()));
        }
        if self.max_op_count == 0 {
            return Err(EnvError::InfeasibleConfig("max_op_count must be >= 1".into()));
        }
        if self.kind_mix.values().any(|w| !(w.is_finite() && *w >= 0.0)) || self.kind_mix.values().sum::<f64>() <= 0.0 {
            return Err(EnvError::InfeasibleConfig("kind_mix needs non-negative weights with positive sum".into()));
        }
        let vocab = self.vocab();
        if Attribute::ALL.iter().any(|a| vocab.values(*a).is_empty()) {
            return Err(EnvError::InfeasibleConfig("empty attribute vocabulary".into()));
        }
        Ok(())
    }

    /// Exact per-kind counts for `n` records (largest remainder, ties by kind order).
    pub fn stratified_counts(&self, n: usize) -> Vec<(CountingKind, usize)> {
        let total: f64 = self.kind_mix.values().sum();
        let mut rows: Vec<(CountingKind, usize, f64)> = self
            .kind_mix
            .iter()
            .map(|(k, w)| {
                let exact = n as f64 * w / total;
                (*k, exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let assigned: usize = rows.iter().map(|r| r.1).sum();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| rows[b].2.total_cmp(&rows[a].2).then(a.cmp(&b)));
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            rows[i].1 += 1;
        }
        rows.into_iter().map(|(k, c, _)| (k, c)).collect()
    }

    /// Kind of every record in a stratified file of `n` records, shuffled.
    pub fn stratified_kinds<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<CountingKind> {
        let mut kinds: Vec<CountingKind> = self
            .stratified_counts(n)
            .into_iter()
            .flat_map(|(k, c)| std::iter::repeat_n(k, c))
            .collect();
        kinds.shuffle(rng);
        kinds
    }
}

fn random_object<R: Rng + ?Sized>(rng: &mut R, vocab: &AttributeVocab, id: String) -> SceneObject {
    let mut pick = |xs: &[String]| xs[rng.random_range(0..xs.len())].clone();
    SceneObject {
        id,
        shape: pick(&vocab.shapes),
        color: pick(&vocab.colors),
        size: pick(&vocab.sizes),
        material: pick(&vocab.materials),
    }
}

/// Run the operations on a copy of the scene and count the query. Added
/// objects get the operation's attribute value and random other attributes;
/// removals take the first matching objects in scene order.
pub fn simulate<R: Rng + ?Sized>(rng: &mut R, scene: &[SceneObject], q: &CountingQuestion, vocab: &AttributeVocab) -> Option<u32> {
    let mut objs = scene.to_vec();
    let mut next_id = objs.len();
    for op in &q.ops {
        match op.op {
            OpSign::Add => {
                for _ in 0..op.count {
                    let mut o = random_object(rng, vocab, format!("o{next_id}"));
                    next_id += 1;
                    o.set(op.filter.attribute, op.filter.value.clone());
                    objs.push(o);
                }
            }
            OpSign::Remove => {
                for _ in 0..op.count {
                    let i = objs.iter().position(|o| op.filter.matches(o))?;
                    objs.remove(i);
                }
            }
        }
    }
    Some(objs.iter().filter(|o| q.query_filter.matches(o)).count() as u32)
}

fn try_generate<R: Rng + ?Sized>(rng: &mut R, cfg: &CountingConfig, vocab: &AttributeVocab, kind: CountingKind) -> Option<CountingSample> {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let scene: Vec<SceneObject> = (0..n).map(|i| random_object(rng, vocab, format!("o{i}"))).collect();
    let attrs: Vec<Attribute> = Attribute::ALL
        .into_iter()
        .filter(|a| kind != CountingKind::Adversarial || vocab.values(*a).len() >= 2)
        .collect();
    if attrs.is_empty() {
        return None;
    }
    let attribute = attrs[rng.random_range(0..attrs.len())];
    let values = vocab.values(attribute);
    let query = values[rng.random_range(0..values.len())].clone();

    let signs: Vec<OpSign> = match kind {
        CountingKind::Addition => vec![OpSign::Add],
        CountingKind::Subtraction => vec![OpSign::Remove],
        CountingKind::Multihop => {
            let s = if rng.random_bool(0.5) { OpSign::Add } else { OpSign::Remove };
            vec![s; rng.random_range(2..=3)]
        }
        CountingKind::Mixed => {
            let len = rng.random_range(2..=3);
            let mut s: Vec<OpSign> = (0..len).map(|_| if rng.random_bool(0.5) { OpSign::Add } else { OpSign::Remove }).collect();
            s[0] = OpSign::Add;
            s[1] = OpSign::Remove;
            s.shuffle(rng);
            s
        }
        CountingKind::Adversarial => (0..rng.random_range(1..=2))
            .map(|_| if rng.random_bool(0.5) { OpSign::Add } else { OpSign::Remove })
            .collect(),
    };

    let mut population: BTreeMap<&str, u32> = BTreeMap::new();
    for o in &scene {
        *population.entry(o.get(attribute)).or_default() += 1;
    }
    let mut ops = Vec::with_capacity(signs.len());
    for sign in signs {
        let value = if kind == CountingKind::Adversarial {
            let others: Vec<&String> = values.iter().filter(|v| **v != query).collect();
            others[rng.random_range(0..others.len())].clone()
        } else {
            query.clone()
        };
        let pop = population.get(value.as_str()).copied().unwrap_or(0);
        let count = match sign {
            OpSign::Add => rng.random_range(1..=cfg.max_op_count),
            OpSign::Remove if pop == 0 => return None,
            OpSign::Remove => rng.random_range(1..=cfg.max_op_count.min(pop)),
        };
        let key = values.iter().find(|v| **v == value).expect("value in vocab").as_str();
        let entry = population.entry(key).or_default();
        match sign {
            OpSign::Add => *entry += count,
            OpSign::Remove => *entry -= count,
        }
        ops.push(CountingOp {
            op: sign,
            filter: AttrPredicate { attribute, value },
            count,
        });
    }
    let question = CountingQuestion {
        ops,
        query_filter: AttrPredicate { attribute, value: query },
        kind,
    };
    let answer = simulate(rng, &scene, &question, vocab)?;
    Some(CountingSample { scene, question, answer })
}

/// Generate a question of a fixed kind.
pub fn gen_counting_kind<R: Rng + ?Sized>(rng: &mut R, cfg: &CountingConfig, kind: CountingKind) -> Result<CountingSample, EnvError> {
    cfg.check()?;
    let vocab = cfg.vocab();
    if kind == CountingKind::Adversarial && Attribute::ALL.iter().all(|a| vocab.values(*a).len() < 2) {
        return Err(EnvError::InfeasibleConfig("adversarial questions need two values of some attribute".into()));
    }
    for _ in 0..cfg.max_retries.max(1) {
        if let Some(s) = try_generate(rng, cfg, &vocab, kind) {
            return Ok(s);
        }
    }
    Err(EnvError::InfeasibleConfig(format!(
        "no feasible {} question after {} attempts",
        kind.name(),
        cfg.max_retries.max(1)
    )))
}

/// Generate a question with kind drawn from `cfg.kind_mix`.
pub fn gen_counting<R: Rng + ?Sized>(rng: &mut R, cfg: &CountingConfig) -> Result<CountingSample, EnvError> {
    cfg.check()?;
    let kinds: Vec<CountingKind> = cfg.kind_mix.keys().copied().collect();
    let weights: Vec<f64> = cfg.kind_mix.values().copied().collect();
    let kind = kinds[pick_weighted(rng, &weights)];
    gen_counting_kind(rng, cfg, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obj(id: usize, shape: &str) -> SceneObject {
        SceneObject {
            id: format!("o{id}"),
            shape: shape.into(),
            color: "red".into(),
            size: "small".into(),
            material: "rubber".into(),
        }
    }

    fn shape(v: &str) -> AttrPredicate {
        AttrPredicate {
            attribute: Attribute::Shape,
            value: v.into(),
        }
    }

    fn five_cubes_three_spheres() -> Vec<SceneObject> {
        (0..8).map(|i| obj(i, if i < 5 { "cube" } else { "sphere" })).collect()
    }

    #[test]
    fn worked_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vocab = AttributeVocab::in_domain();
        let scene = five_cubes_three_spheres();
        let q = CountingQuestion {
            ops: vec![CountingOp { op: OpSign::Remove, filter: shape("cube"), count: 2 }],
            query_filter: shape("cube"),
            kind: CountingKind::Subtraction,
        };
        assert_eq!(simulate(&mut rng, &scene, &q, &vocab), Some(3));
        let adv = CountingQuestion {
            ops: vec![CountingOp { op: OpSign::Remove, filter: shape("sphere"), count: 3 }],
            query_filter: shape("cube"),
            kind: CountingKind::Adversarial,
        };
        assert!(adv.is_well_formed());
        assert_eq!(simulate(&mut rng, &scene, &adv, &vocab), Some(5));
        let mixed = CountingQuestion {
            ops: vec![
                CountingOp { op: OpSign::Add, filter: shape("sphere"), count: 2 },
                CountingOp { op: OpSign::Remove, filter: shape("sphere"), count: 1 },
            ],
            query_filter: shape("sphere"),
            kind: CountingKind::Mixed,
        };
        assert!(mixed.is_well_formed());
        assert_eq!(simulate(&mut rng, &scene, &mixed, &vocab), Some(4));
        assert_eq!(
            mixed.render(),
            "Add 2 sphere objects. Remove 1 sphere objects. How many sphere objects are left?"
        );
    }

    #[test]
    fn generated_kinds_are_well_formed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = CountingConfig::default();
        for kind in CountingKind::ALL {
            for _ in 0..200 {
                let s = gen_counting_kind(&mut rng, &cfg, kind).unwrap();
                assert!(s.question.is_well_formed(), "{kind:?}: {:?}", s.question);
            }
        }
    }

    #[test]
    fn stratified_counts_are_exact() {
        let cfg = CountingConfig {
            kind_mix: [
                (CountingKind::Addition, 0.25),
                (CountingKind::Subtraction, 0.25),
                (CountingKind::Adversarial, 0.25),
                (CountingKind::Multihop, 0.25),
            ]
            .into_iter()
            .collect(),
            ..Default::default()
        };
        let counts: BTreeMap<_, _> = cfg.stratified_counts(1000).into_iter().collect();
        assert_eq!(counts[&CountingKind::Adversarial], 250);
        let odd: usize = cfg.stratified_counts(7).iter().map(|c| c.1).sum();
        assert_eq!(odd, 7);
    }

    #[test]
    fn infeasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = CountingConfig { min_objects: 5, max_objects: 2, ..Default::default() };
        assert!(matches!(gen_counting(&mut rng, &cfg), Err(EnvError::InfeasibleConfig(_))));
        let empty = CountingConfig { min_objects: 0, max_objects: 0, max_retries: 10, ..Default::default() };
        assert!(matches!(
            gen_counting_kind(&mut rng, &empty, CountingKind::Subtraction),
            Err(EnvError::InfeasibleConfig(_))
        ));
        let single = CountingConfig {
            vocab: Some(AttributeVocab {
                shapes: vec!["cube".into()],
                colors: vec!["red".into()],
                sizes: vec!["small".into()],
                materials: vec!["rubber".into()],
            }),
            ..Default::default()
        };
        assert!(matches!(
            gen_counting_kind(&mut rng, &single, CountingKind::Adversarial),
            Err(EnvError::InfeasibleConfig(_))
        ));
    }

    #[test]
    fn domain_shift_labels() {
        let cfg = CountingConfig { domain_shift: true, ..Default::default() };
        assert_eq!(cfg.subset_label(CountingKind::Mixed), "DS-M");
        assert_eq!(cfg.subset_label(CountingKind::Addition), "DS-D");
        assert_eq!(cfg.vocab().shapes[0], "car");
    }
}
