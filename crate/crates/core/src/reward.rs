//! Verifiable rewards.
//!
//! The composite reward is `format + accuracy`, where `format` is 1 only for
//! a response that matches its template exactly, and `accuracy` depends on
//! the ground-truth kind:
//!
//! - discrete answers score 1 on case-folded equality;
//! - numeric answers score 1 inside a relative tolerance `epsilon1`, 0
//!   beyond `epsilon2`, and follow a half-cosine ramp in between;
//! - function sequences are compared step by step and credited per match
//!   tier, with `alpha` and `beta` weighting partial matches.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::transform::TransformStep;
use crate::response::{extract_answer, parse_response, AnswerKind, ExtractedAnswer, ResponseTemplate, StructuredResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruthAnswer {
    Discrete {
        value: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        options: Option<Vec<String>>,
    },
    Numeric {
        value: f64,
    },
    FunctionSeq {
        steps: Vec<TransformStep>,
    },
}

impl GroundTruthAnswer {
    pub fn discrete(value: impl Into<String>) -> Self {
        GroundTruthAnswer::Discrete {
            value: value.into(),
            options: None,
        }
    }

    pub fn choice(value: impl Into<String>, options: Vec<String>) -> Self {
        GroundTruthAnswer::Discrete {
            value: value.into(),
            options: Some(options),
        }
    }

    pub fn kind(&self) -> AnswerKind {
        match self {
            GroundTruthAnswer::Discrete { .. } => AnswerKind::Discrete,
            GroundTruthAnswer::Numeric { .. } => AnswerKind::Numeric,
            GroundTruthAnswer::FunctionSeq { .. } => AnswerKind::FunctionSeq,
        }
    }

    pub fn options(&self) -> Option<&[String]> {
        match self {
            GroundTruthAnswer::Discrete { options, .. } => options.as_deref(),
            _ => None,
        }
    }

    /// Canonical answer text, as it would appear inside `<answer>`.
    pub fn answer_text(&self) -> String {
        match self {
            GroundTruthAnswer::Discrete { value, .. } => value.clone(),
            GroundTruthAnswer::Numeric { value } => format_number(*value),
            GroundTruthAnswer::FunctionSeq { steps } => crate::envs::transform::format_sequence(steps),
        }
    }
}

/// Shortest decimal text for `v`; integers print without a fraction.
pub fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn default_epsilon1() -> f64 {
    0.05
}
fn default_epsilon2() -> f64 {
    0.20
}
fn default_abs_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Relative error below which a numeric answer is exact.
    #[serde(default = "default_epsilon1")]
    pub epsilon1: f64,
    /// Relative error above which a numeric answer scores 0.
    #[serde(default = "default_epsilon2")]
    pub epsilon2: f64,
    /// Weight of function+object and function+value step matches.
    #[serde(default)]
    pub alpha: f64,
    /// Weight of function-only step matches.
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub template: ResponseTemplate,
    /// Absolute tolerance when the numeric ground truth is exactly zero.
    #[serde(default = "default_abs_tol")]
    pub abs_tol_zero_gt: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            epsilon1: default_epsilon1(),
            epsilon2: default_epsilon2(),
            alpha: 0.0,
            beta: 0.0,
            template: ResponseTemplate::ThinkAnswer,
            abs_tol_zero_gt: default_abs_tol(),
        }
    }
}

impl RewardConfig {
    pub fn with_weights(alpha: f64, beta: f64) -> Self {
        RewardConfig {
            alpha,
            beta,
            ..Default::default()
        }
    }

    /// Field-level validation.
    pub fn validate(&self) -> Result<(), RewardError> {
        let bad = |field: &'static str, why: &str| Err(RewardError::InvalidConfig(format!("{field}: {why}")));
        if !(self.epsilon1.is_finite() && self.epsilon1 >= 0.0) {
            return bad("epsilon1", "must be finite and >= 0");
        }
        if !(self.epsilon2.is_finite() && self.epsilon2 > self.epsilon1) {
            return bad("epsilon2", "must be finite and > epsilon1");
        }
        if !(self.alpha.is_finite() && self.alpha.abs() <= 1.0) {
            return bad("alpha", "must satisfy |alpha| <= 1");
        }
        if !(self.beta.is_finite() && self.beta.abs() <= 1.0) {
            return bad("beta", "must satisfy |beta| <= 1");
        }
        if !(self.abs_tol_zero_gt.is_finite() && self.abs_tol_zero_gt >= 0.0) {
            return bad("abs_tol_zero_gt", "must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("non-finite numeric input")]
    NonFinite,
    #[error("ground-truth sequence is empty")]
    EmptyGroundTruth,
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub accuracy: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(format: f64, accuracy: f64) -> Self {
        RewardBreakdown {
            format,
            accuracy,
            total: format + accuracy,
        }
    }
}

/// 1 when `text` matches `template` exactly, else 0.
pub fn format_reward(text: &str, template: ResponseTemplate) -> f64 {
    if parse_response(text, template).is_ok() {
        1.0
    } else {
        0.0
    }
}

/// Case-folded, trimmed equality.
pub fn acc_discrete(pred: &str, gt: &str) -> f64 {
    if pred.trim().to_lowercase() == gt.trim().to_lowercase() {
        1.0
    } else {
        0.0
    }
}

/// Tolerance-based numeric accuracy.
pub fn acc_math(pred: f64, gt: f64, cfg: &RewardConfig) -> Result<f64, RewardError> {
    if !pred.is_finite() || !gt.is_finite() {
        return Err(RewardError::NonFinite);
    }
    let d = (pred - gt).abs();
    if gt == 0.0 {
        return Ok(if d <= cfg.abs_tol_zero_gt { 1.0 } else { 0.0 });
    }
    let scale = gt.abs();
    let lo = cfg.epsilon1 * scale;
    let hi = cfg.epsilon2 * scale;
    if d < lo {
        Ok(1.0)
    } else if d > hi {
        Ok(0.0)
    } else if hi <= lo {
        // Thresholds collapsed by underflow; d sits on both.
        Ok(1.0)
    } else {
        let t = (d - lo) / (hi - lo);
        Ok(0.5 * ((PI * t).cos() + 1.0))
    }
}

/// Per-step match quality between a predicted and a ground-truth step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatchTier {
    Full,
    FuncObj,
    FuncVal,
    FuncOnly,
    None,
}

impl MatchTier {
    pub fn classify(pred: &TransformStep, gt: &TransformStep) -> MatchTier {
        if pred.function != gt.function {
            return MatchTier::None;
        }
        match (pred.object == gt.object, pred.value == gt.value) {
            (true, true) => MatchTier::Full,
            (true, false) => MatchTier::FuncObj,
            (false, true) => MatchTier::FuncVal,
            (false, false) => MatchTier::FuncOnly,
        }
    }

    /// Credit of one step in this tier.
    pub fn weight(self, cfg: &RewardConfig) -> f64 {
        match self {
            MatchTier::Full => 1.0,
            MatchTier::FuncObj | MatchTier::FuncVal => cfg.alpha,
            MatchTier::FuncOnly => cfg.beta,
            MatchTier::None => 0.0,
        }
    }
}

/// Tier counts from positional alignment of `pred` against `gt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TierCounts {
    pub full: usize,
    pub partial: usize,
    pub func_only: usize,
    pub denominator: usize,
}

pub fn tier_counts(pred: &[TransformStep], gt: &[TransformStep]) -> TierCounts {
    let mut counts = TierCounts {
        denominator: pred.len().max(gt.len()),
        ..Default::default()
    };
    for (p, g) in pred.iter().zip(gt) {
        match MatchTier::classify(p, g) {
            MatchTier::Full => counts.full += 1,
            MatchTier::FuncObj | MatchTier::FuncVal => counts.partial += 1,
            MatchTier::FuncOnly => counts.func_only += 1,
            MatchTier::None => {}
        }
    }
    counts
}

/// Tiered function-sequence accuracy. Negative weights are not clamped.
pub fn acc_function_seq(pred: &[TransformStep], gt: &[TransformStep], cfg: &RewardConfig) -> Result<f64, RewardError> {
    if gt.is_empty() {
        return Err(RewardError::EmptyGroundTruth);
    }
    let c = tier_counts(pred, gt);
    let numerator = c.full as f64 + cfg.alpha * c.partial as f64 + cfg.beta * c.func_only as f64;
    Ok(numerator / c.denominator as f64)
}

/// Accuracy of an already-extracted answer against `gt`. Kind mismatches score 0.
pub fn accuracy(pred: &ExtractedAnswer, gt: &GroundTruthAnswer, cfg: &RewardConfig) -> f64 {
    match (pred, gt) {
        (ExtractedAnswer::Discrete(p), GroundTruthAnswer::Discrete { value, .. }) => acc_discrete(p, value),
        (ExtractedAnswer::Numeric(p), GroundTruthAnswer::Numeric { value }) => acc_math(*p, *value, cfg).unwrap_or(0.0),
        (ExtractedAnswer::FunctionSeq(p), GroundTruthAnswer::FunctionSeq { steps }) => {
            acc_function_seq(p, steps, cfg).unwrap_or(0.0)
        }
        _ => 0.0,
    }
}

/// Composite reward plus the parsed response, when parsing succeeded.
pub fn score_response(
    text: &str,
    gt: &GroundTruthAnswer,
    cfg: &RewardConfig,
) -> (RewardBreakdown, Option<StructuredResponse>) {
    match parse_response(text, cfg.template) {
        Err(_) => (RewardBreakdown::new(0.0, 0.0), None),
        Ok(resp) => {
            let acc = extract_answer(&resp.answer_raw, gt.kind(), gt.options())
                .map(|a| accuracy(&a, gt, cfg))
                .unwrap_or(0.0);
            (RewardBreakdown::new(1.0, acc), Some(resp))
        }
    }
}

/// `format + accuracy` for a raw response.
pub fn total_reward(text: &str, gt: &GroundTruthAnswer, cfg: &RewardConfig) -> RewardBreakdown {
    score_response(text, gt, cfg).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::transform::TransformFn;
    use proptest::prelude::*;

    fn cfg() -> RewardConfig {
        RewardConfig::default()
    }

    #[test]
    fn format_reward_examples() {
        let ok = "<think>t</think><answer>a</answer>";
        assert_eq!(format_reward(ok, ResponseTemplate::ThinkAnswer), 1.0);
        assert_eq!(format_reward(ok, ResponseTemplate::SummaryCaptionThinkAnswer), 0.0);
        assert_eq!(format_reward("hello", ResponseTemplate::ThinkAnswer), 0.0);
    }

    #[test]
    fn discrete_examples() {
        assert_eq!(acc_discrete("3", "3"), 1.0);
        assert_eq!(acc_discrete("B", "b"), 1.0);
        assert_eq!(acc_discrete("A", "B"), 0.0);
    }

    #[test]
    fn math_regimes() {
        let c = cfg();
        assert_eq!(acc_math(104.0, 100.0, &c), Ok(1.0));
        assert_eq!(acc_math(125.0, 100.0, &c), Ok(0.0));
        assert!((acc_math(112.5, 100.0, &c).unwrap() - 0.5).abs() < 1e-12);
        assert!((acc_math(87.5, 100.0, &c).unwrap() - 0.5).abs() < 1e-12);
        // Thresholds evaluate to the neighbouring plateau values.
        assert_eq!(acc_math(2.5, 2.0, &RewardConfig { epsilon1: 0.25, epsilon2: 0.5, ..c.clone() }), Ok(1.0));
        assert_eq!(acc_math(3.0, 2.0, &RewardConfig { epsilon1: 0.25, epsilon2: 0.5, ..c.clone() }), Ok(0.0));
        assert_eq!(acc_math(0.0, 0.0, &c), Ok(1.0));
        assert_eq!(acc_math(1e-7, 0.0, &c), Ok(1.0));
        assert_eq!(acc_math(1e-3, 0.0, &c), Ok(0.0));
        assert_eq!(acc_math(f64::NAN, 1.0, &c), Err(RewardError::NonFinite));
        assert_eq!(acc_math(1.0, f64::INFINITY, &c), Err(RewardError::NonFinite));
    }

    fn step(f: TransformFn, o: &str, v: &str) -> TransformStep {
        TransformStep::attr(f, o, v)
    }

    fn tiered_pair() -> (Vec<TransformStep>, Vec<TransformStep>) {
        use TransformFn::*;
        let gt = vec![
            step(ChangeColor, "o1", "red"),
            step(ChangeSize, "o2", "large"),
            step(ChangeShape, "o3", "cube"),
            step(ChangeMaterial, "o4", "metal"),
        ];
        let pred = vec![
            step(ChangeColor, "o1", "red"),
            step(ChangeSize, "o2", "large"),
            step(ChangeShape, "o3", "sphere"),
            step(ChangeMaterial, "o1", "rubber"),
        ];
        (pred, gt)
    }

    #[test]
    fn function_seq_examples() {
        let (pred, gt) = tiered_pair();
        let tiers: Vec<_> = pred.iter().zip(&gt).map(|(p, g)| MatchTier::classify(p, g)).collect();
        assert_eq!(tiers, [MatchTier::Full, MatchTier::Full, MatchTier::FuncObj, MatchTier::FuncOnly]);
        assert_eq!(acc_function_seq(&pred, &gt, &RewardConfig::with_weights(0.5, 0.25)), Ok(0.6875));
        assert_eq!(acc_function_seq(&pred, &gt, &RewardConfig::with_weights(-0.25, -0.5)), Ok(0.3125));
        assert_eq!(acc_function_seq(&gt[..3], &gt[..3], &cfg()), Ok(1.0));
        assert_eq!(acc_function_seq(&[], &gt[..2], &cfg()), Ok(0.0));
        assert_eq!(acc_function_seq(&gt, &[], &cfg()), Err(RewardError::EmptyGroundTruth));
        // Extra predicted steps dilute the score.
        let mut longer = gt.clone();
        longer.push(step(TransformFn::ChangeColor, "o9", "red"));
        assert_eq!(acc_function_seq(&longer, &gt, &cfg()), Ok(0.8));
    }

    #[test]
    fn func_val_tier() {
        let p = TransformStep::position("o2", 1, 1);
        let g = TransformStep::position("o1", 1, 1);
        assert_eq!(MatchTier::classify(&p, &g), MatchTier::FuncVal);
    }

    #[test]
    fn total_reward_examples() {
        let gt = GroundTruthAnswer::Numeric { value: 100.0 };
        let c = cfg();
        assert_eq!(
            total_reward("<think>t</think><answer>100</answer>", &gt, &c),
            RewardBreakdown { format: 1.0, accuracy: 1.0, total: 2.0 }
        );
        assert_eq!(total_reward("100", &gt, &c), RewardBreakdown::new(0.0, 0.0));
        let mid = total_reward("<think>t</think><answer>112.5</answer>", &gt, &c);
        assert_eq!(mid.format, 1.0);
        assert!((mid.accuracy - 0.5).abs() < 1e-12);
        assert_eq!(mid.total, mid.format + mid.accuracy);
        // Well-formed but unextractable answer keeps the format point.
        assert_eq!(total_reward("<think>t</think><answer>many</answer>", &gt, &c), RewardBreakdown::new(1.0, 0.0));
        let choice = GroundTruthAnswer::choice("C", ["A", "B", "C", "D"].map(String::from).to_vec());
        assert_eq!(total_reward("<think>t</think><answer>c</answer>", &choice, &c).total, 2.0);
        assert_eq!(total_reward("<think>t</think><answer>E</answer>", &choice, &c).total, 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(RewardConfig { epsilon2: 0.01, ..cfg() }.validate().is_err());
        assert!(RewardConfig::with_weights(1.5, 0.0).validate().is_err());
        assert!(RewardConfig::with_weights(-0.25, -0.5).validate().is_ok());
        let parsed: RewardConfig = toml::from_str("alpha = 0.5\nbeta = 0.25\ntemplate = \"summary_caption_think_answer\"").unwrap();
        assert_eq!(parsed.alpha, 0.5);
        assert_eq!(parsed.epsilon1, 0.05);
        assert_eq!(parsed.template, ResponseTemplate::SummaryCaptionThinkAnswer);
        assert!(toml::from_str::<RewardConfig>("gamma = 1").is_err());
    }

    #[test]
    fn ground_truth_json_shape() {
        let gt = GroundTruthAnswer::FunctionSeq {
            steps: vec![TransformStep::position("o1", 2, 3)],
        };
        let json = serde_json::to_string(&gt).unwrap();
        assert_eq!(json, r#"{"kind":"function_seq","steps":["change_position(o1, (2,3))"]}"#);
        assert_eq!(serde_json::from_str::<GroundTruthAnswer>(&json).unwrap(), gt);
    }

    proptest! {
        #[test]
        fn math_symmetric_and_scale_invariant(gt in prop_oneof![-1e4f64..-1e-3, 1e-3f64..1e4], rel in 0.0f64..0.4, k in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
            let c = cfg();
            let d = rel * gt.abs();
            let up = acc_math(gt + d, gt, &c).unwrap();
            let down = acc_math(gt - d, gt, &c).unwrap();
            prop_assert!((up - down).abs() < 1e-9);
            let scaled = acc_math(k * (gt + d), k * gt, &c).unwrap();
            prop_assert!((up - scaled).abs() < 1e-9);
        }

        #[test]
        fn math_monotone(gt in 1e-3f64..1e4, a in 0.0f64..0.4, b in 0.0f64..0.4) {
            let c = cfg();
            let (near, far) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(acc_math(gt + near * gt, gt, &c).unwrap() >= acc_math(gt + far * gt, gt, &c).unwrap());
        }

        #[test]
        fn total_is_format_plus_accuracy(text in ".{0,40}", v in -100.0f64..100.0) {
            let gt = GroundTruthAnswer::Numeric { value: v };
            let r = total_reward(&text, &gt, &cfg());
            prop_assert_eq!(r.total, r.format + r.accuracy);
            prop_assert!(r.format == 0.0 || r.format == 1.0);
        }
    }
}
