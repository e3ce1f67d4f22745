//! Templated quantitative questions with numeric or multiple-choice answers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EnvError;
use crate::grpo::{TaskInstance, TaskKind};
use crate::reward::{format_number, GroundTruthAnswer};

/// Smallest relative distance between a distractor and the answer.
pub const MIN_DISTRACTOR_GAP: f64 = 0.25;
pub const CHOICE_LETTERS: [&str; 4] = ["A", "B", "C", "D"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerForm {
    #[default]
    Numeric,
    Choice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// q1 + q2
    Sum,
    /// q2 / q1 * k
    Ratio,
    /// (q2 - q1) * k
    ScaledDifference,
}

fn d_max_quantity() -> u32 {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericQaConfig {
    #[serde(default)]
    pub form: AnswerForm,
    #[serde(default = "d_max_quantity")]
    pub max_quantity: u32,
}

impl Default for NumericQaConfig {
    fn default() -> Self {
        NumericQaConfig {
            form: AnswerForm::Numeric,
            max_quantity: d_max_quantity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericQaSample {
    pub q1: u32,
    pub q2: u32,
    pub scale: u32,
    pub template: Template,
    pub value: f64,
    /// Option values A..D when the form is multiple choice.
    pub options: Option<Vec<f64>>,
    /// Index of the correct option.
    pub correct: Option<usize>,
}

impl NumericQaSample {
    pub fn evaluate(template: Template, q1: u32, q2: u32, scale: u32) -> f64 {
        let (a, b, k) = (f64::from(q1), f64::from(q2), f64::from(scale));
        match template {
            Template::Sum => a + b,
            Template::Ratio => b * k / a,
            Template::ScaledDifference => (b - a) * k,
        }
    }

    pub fn context(&self) -> String {
        format!("q1={}, q2={}", self.q1, self.q2)
    }

    pub fn question(&self) -> String {
        let ask = match self.template {
            Template::Sum => "report q1+q2".to_string(),
            Template::Ratio => format!("report q2/q1*{}", self.scale),
            Template::ScaledDifference => format!("report (q2-q1)*{}", self.scale),
        };
        match &self.options {
            None => ask,
            Some(opts) => {
                let listed: Vec<String> = opts
                    .iter()
                    .zip(CHOICE_LETTERS)
                    .map(|(v, l)| format!("{l}) {}", format_number(*v)))
                    .collect();
                format!("{ask}; options: {}", listed.join(" "))
            }
        }
    }

    pub fn to_instance(&self, id: impl Into<String>) -> TaskInstance {
        let (gt, subset) = match self.correct {
            Some(i) => (
                GroundTruthAnswer::choice(CHOICE_LETTERS[i], CHOICE_LETTERS.map(String::from).to_vec()),
                "choice",
            ),
            None => (GroundTruthAnswer::Numeric { value: self.value }, "numeric"),
        };
        TaskInstance::new(id, TaskKind::NumericQa, self.context(), self.question(), gt, subset)
    }
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Three distractors at least [`MIN_DISTRACTOR_GAP`] away from `value` and
/// from each other (relative to `value`), rounded to two decimals.
fn distractors<R: Rng + ?Sized>(rng: &mut R, value: f64) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(3);
    while out.len() < 3 {
        let r = rng.random_range(0.3..1.5);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let d = ((value * (1.0 + sign * r)) * 100.0).round() / 100.0;
        if rel_gap(d, value) >= MIN_DISTRACTOR_GAP && out.iter().all(|o| (o - d).abs() >= MIN_DISTRACTOR_GAP * value.abs()) {
            out.push(d);
        }
    }
    out
}

pub fn gen_numeric_qa<R: Rng + ?Sized>(rng: &mut R, cfg: &NumericQaConfig) -> Result<NumericQaSample, EnvError> {
    if cfg.max_quantity < 2 {
        return Err(EnvError::InfeasibleConfig("max_quantity must be >= 2".into()));
    }
    let template = [Template::Sum, Template::Ratio, Template::ScaledDifference][rng.random_range(0..3)];
    let q1 = rng.random_range(1..=cfg.max_quantity);
    let mut q2 = rng.random_range(1..=cfg.max_quantity);
    if template == Template::ScaledDifference && q2 == q1 {
        q2 = if q1 == cfg.max_quantity { q1 - 1 } else { q1 + 1 };
    }
    let scale = [2, 5, 10, 100][rng.random_range(0..4)];
    let value = NumericQaSample::evaluate(template, q1, q2, scale);
    let (options, correct) = match cfg.form {
        AnswerForm::Numeric => (None, None),
        AnswerForm::Choice => {
            let mut opts = distractors(rng, value);
            let at = rng.random_range(0..4);
            opts.insert(at, value);
            (Some(opts), Some(at))
        }
    };
    Ok(NumericQaSample {
        q1,
        q2,
        scale,
        template,
        value,
        options,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ratio_example() {
        assert_eq!(NumericQaSample::evaluate(Template::Ratio, 12, 30, 10), 25.0);
        let s = NumericQaSample {
            q1: 12,
            q2: 30,
            scale: 10,
            template: Template::Ratio,
            value: 25.0,
            options: None,
            correct: None,
        };
        let inst = s.to_instance("n0");
        assert_eq!(inst.context, "q1=12, q2=30");
        assert_eq!(inst.question, "report q2/q1*10");
        assert_eq!(inst.gt, GroundTruthAnswer::Numeric { value: 25.0 });
    }

    #[test]
    fn choice_form_embeds_answer() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = NumericQaConfig { form: AnswerForm::Choice, ..Default::default() };
        for _ in 0..200 {
            let s = gen_numeric_qa(&mut rng, &cfg).unwrap();
            let opts = s.options.as_ref().unwrap();
            let c = s.correct.unwrap();
            assert_eq!(opts.len(), 4);
            assert_eq!(opts[c], s.value);
            let inst = s.to_instance("x");
            assert_eq!(inst.gt, GroundTruthAnswer::choice(CHOICE_LETTERS[c], CHOICE_LETTERS.map(String::from).to_vec()));
        }
    }

    #[test]
    fn nonzero_answers() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..2000 {
            let s = gen_numeric_qa(&mut rng, &NumericQaConfig::default()).unwrap();
            assert!(s.value != 0.0 && s.value.is_finite());
        }
    }
}
