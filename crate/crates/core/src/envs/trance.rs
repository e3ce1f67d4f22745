//! Scene-transformation task generator.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{apply_all, canonicalize_sequence, serialize_observation, Attribute, AttributeVocab, PlacedObject, SceneObject, TranceScene, View};
use super::transform::{Cell, StepValue, TransformFn, TransformStep};
use super::EnvError;
use crate::grpo::{TaskInstance, TaskKind};
use crate::reward::GroundTruthAnswer;

pub const TRANCE_QUESTION: &str = "Which transformation sequence turns the initial scene into the final scene?";

fn d_grid() -> (i32, i32) {
    (4, 4)
}
fn d_min_objects() -> usize {
    3
}
fn d_max_objects() -> usize {
    6
}
fn d_levels() -> Vec<f64> {
    vec![1.0, 1.0, 1.0, 1.0]
}
fn d_retries() -> usize {
    1000
}
fn d_vocab() -> AttributeVocab {
    AttributeVocab::in_domain()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranceConfig {
    #[serde(default = "d_grid")]
    pub grid: (i32, i32),
    #[serde(default = "d_min_objects")]
    pub min_objects: usize,
    #[serde(default = "d_max_objects")]
    pub max_objects: usize,
    /// Relative weight of difficulty levels 1..=4.
    #[serde(default = "d_levels")]
    pub level_weights: Vec<f64>,
    #[serde(default)]
    pub view: View,
    #[serde(default = "d_vocab")]
    pub vocab: AttributeVocab,
    #[serde(default = "d_retries")]
    pub max_retries: usize,
}

impl Default for TranceConfig {
    fn default() -> Self {
        TranceConfig {
            grid: d_grid(),
            min_objects: d_min_objects(),
            max_objects: d_max_objects(),
            level_weights: d_levels(),
            view: View::Center,
            vocab: d_vocab(),
            max_retries: d_retries(),
        }
    }
}

impl TranceConfig {
    fn check(&self) -> Result<(), EnvError> {
        let cells = (self.grid.0.max(0) * self.grid.1.max(0)) as usize;
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(EnvError::InfeasibleConfig("need 1 <= min_objects <= max_objects".into()));
        }
        if self.max_objects >= cells {
            return Err(EnvError::InfeasibleConfig(format!("{} objects leave no free cell in a {:?} grid", self.max_objects, self.grid)));
        }
        if self.level_weights.len() != 4 || self.level_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.level_weights.iter().sum::<f64>() <= 0.0 {
            return Err(EnvError::InfeasibleConfig("level_weights needs four non-negative weights with positive sum".into()));
        }
        for attr in Attribute::ALL {
            if self.vocab.values(attr).is_empty() {
                return Err(EnvError::InfeasibleConfig(format!("empty {attr:?} vocabulary")));
            }
        }
        Ok(())
    }

    pub fn subset_label(&self, difficulty: usize) -> String {
        match self.view {
            View::Center => format!("level-{difficulty}"),
            View::Left => "DS-L".into(),
            View::Right => "DS-R".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranceSample {
    pub initial: TranceScene,
    pub final_scene: TranceScene,
    pub gt_sequence: Vec<TransformStep>,
    pub difficulty: usize,
}

impl TranceSample {
    pub fn context(&self, view: View) -> String {
        format!(
            "initial:\n{}\nfinal:\n{}",
            serialize_observation(&self.initial, View::Center),
            serialize_observation(&self.final_scene, view)
        )
    }

    pub fn to_instance(&self, id: impl Into<String>, cfg: &TranceConfig) -> TaskInstance {
        TaskInstance::new(
            id,
            TaskKind::Trance,
            self.context(cfg.view),
            TRANCE_QUESTION,
            GroundTruthAnswer::FunctionSeq {
                steps: self.gt_sequence.clone(),
            },
            cfg.subset_label(self.difficulty),
        )
    }
}

pub(crate) fn pick_weighted<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, xs: &'a [String]) -> &'a String {
    &xs[rng.random_range(0..xs.len())]
}

/// Random scene with `n` objects on distinct cells.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &TranceConfig, n: usize) -> TranceScene {
    let (w, h) = cfg.grid;
    let cells = sample(rng, (w * h) as usize, n);
    let objects = cells
        .into_iter()
        .enumerate()
        .map(|(i, c)| PlacedObject {
            object: SceneObject {
                id: format!("o{i}"),
                shape: pick(rng, &cfg.vocab.shapes).clone(),
                color: pick(rng, &cfg.vocab.colors).clone(),
                size: pick(rng, &cfg.vocab.sizes).clone(),
                material: pick(rng, &cfg.vocab.materials).clone(),
            },
            position: Cell::new(c as i32 % w, c as i32 / w),
        })
        .collect();
    TranceScene {
        objects,
        grid_extent: cfg.grid,
    }
}

/// Random raw sequence of `len` steps over distinct (object, function) pairs.
/// Returns `None` when the scene cannot host that many changes.
pub fn random_sequence<R: Rng + ?Sized>(rng: &mut R, scene: &TranceScene, vocab: &AttributeVocab, len: usize) -> Option<Vec<TransformStep>> {
    let pairs: Vec<(usize, TransformFn)> = (0..scene.objects.len())
        .flat_map(|o| TransformFn::ALL.into_iter().map(move |f| (o, f)))
        .filter(|(_, f)| Attribute::of(*f).is_none_or(|a| vocab.values(a).len() >= 2))
        .collect();
    if pairs.len() < len {
        return None;
    }
    let chosen = sample(rng, pairs.len(), len);
    let mut cur = scene.clone();
    let mut steps = Vec::with_capacity(len);
    for idx in chosen {
        let (o, f) = pairs[idx];
        let id = cur.objects[o].object.id.clone();
        let value = match Attribute::of(f) {
            Some(attr) => {
                let now = cur.objects[o].object.get(attr).to_string();
                let options: Vec<&String> = vocab.values(attr).iter().filter(|v| **v != now).collect();
                StepValue::Attr(options[rng.random_range(0..options.len())].clone())
            }
            None => {
                let free = cur.free_cells();
                StepValue::Cell(*free.get(rng.random_range(0..free.len().max(1)))?)
            }
        };
        let step = TransformStep { function: f, object: id, value };
        cur = super::scene::apply_step(&cur, &step).ok()?;
        steps.push(step);
    }
    Some(steps)
}

/// Generate a sample at the given difficulty (1..=4).
pub fn gen_trance_level<R: Rng + ?Sized>(rng: &mut R, cfg: &TranceConfig, difficulty: usize) -> Result<TranceSample, EnvError> {
    cfg.check()?;
    for _ in 0..cfg.max_retries.max(1) {
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let initial = random_scene(rng, cfg, n);
        let Some(raw) = random_sequence(rng, &initial, &cfg.vocab, difficulty) else {
            continue;
        };
        let Ok(canon) = canonicalize_sequence(&raw, &initial) else {
            continue;
        };
        // Uniqueness filter: the canonical form must keep every step.
        if canon.len() != difficulty {
            continue;
        }
        let final_scene = apply_all(&initial, &canon).expect("canonical sequence applies");
        return Ok(TranceSample {
            initial,
            final_scene,
            gt_sequence: canon,
            difficulty,
        });
    }
    Err(EnvError::GenerationExhausted(cfg.max_retries.max(1)))
}

/// Generate a sample with difficulty drawn from `cfg.level_weights`.
pub fn gen_trance<R: Rng + ?Sized>(rng: &mut R, cfg: &TranceConfig) -> Result<TranceSample, EnvError> {
    cfg.check()?;
    let level = pick_weighted(rng, &cfg.level_weights) + 1;
    gen_trance_level(rng, cfg, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn level_one_changes_one_attribute() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = TranceConfig::default();
        for _ in 0..200 {
            let s = gen_trance_level(&mut rng, &cfg, 1).unwrap();
            assert_eq!(s.gt_sequence.len(), 1);
            let changed: usize = s
                .initial
                .objects
                .iter()
                .zip(&s.final_scene.objects)
                .map(|(a, b)| Attribute::ALL.iter().filter(|&&t| a.object.get(t) != b.object.get(t)).count() + usize::from(a.position != b.position))
                .sum();
            assert_eq!(changed, 1);
        }
    }

    #[test]
    fn samples_are_canonical_and_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = TranceConfig::default();
        for _ in 0..500 {
            let s = gen_trance(&mut rng, &cfg).unwrap();
            assert!(s.initial.is_valid() && s.final_scene.is_valid());
            assert_eq!(apply_all(&s.initial, &s.gt_sequence).unwrap(), s.final_scene);
            assert_eq!(canonicalize_sequence(&s.gt_sequence, &s.initial).unwrap(), s.gt_sequence);
            assert_eq!(s.gt_sequence.len(), s.difficulty);
        }
    }

    #[test]
    fn infeasible_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let full = TranceConfig { grid: (2, 2), min_objects: 4, max_objects: 4, ..Default::default() };
        assert!(matches!(gen_trance(&mut rng, &full), Err(EnvError::InfeasibleConfig(_))));
        let one = TranceConfig {
            min_objects: 1,
            max_objects: 1,
            vocab: AttributeVocab {
                shapes: vec!["cube".into()],
                colors: vec!["red".into()],
                sizes: vec!["small".into()],
                materials: vec!["rubber".into()],
            },
            max_retries: 20,
            ..Default::default()
        };
        // One object can only move: difficulty 2 is unreachable.
        assert_eq!(gen_trance_level(&mut rng, &one, 2), Err(EnvError::GenerationExhausted(20)));
    }

    #[test]
    fn views_only_reorder() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = gen_trance_level(&mut rng, &TranceConfig::default(), 2).unwrap();
        let l = serialize_observation(&s.final_scene, View::Left);
        let r = serialize_observation(&s.final_scene, View::Right);
        let mut a: Vec<_> = l.lines().collect();
        let mut b: Vec<_> = r.lines().collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }
}
