//! Tagged-response parsing and typed answer extraction.
//!
//! A response must match its template exactly: every segment tag once, in
//! template order, with only whitespace outside the tags. Anything else is a
//! [`ParseError`], and the format reward is 0.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::transform::{parse_sequence, GrammarError, TransformStep};
use crate::policy::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseTemplate {
    #[default]
    ThinkAnswer,
    SummaryCaptionThinkAnswer,
}

/// Named segment of a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Summary,
    Caption,
    Think,
    Answer,
}

impl Segment {
    pub fn name(self) -> &'static str {
        match self {
            Segment::Summary => "summary",
            Segment::Caption => "caption",
            Segment::Think => "think",
            Segment::Answer => "answer",
        }
    }

    pub fn open_tag(self) -> &'static str {
        match self {
            Segment::Summary => "<summary>",
            Segment::Caption => "<caption>",
            Segment::Think => "<think>",
            Segment::Answer => "<answer>",
        }
    }

    pub fn close_tag(self) -> &'static str {
        match self {
            Segment::Summary => "</summary>",
            Segment::Caption => "</caption>",
            Segment::Think => "</think>",
            Segment::Answer => "</answer>",
        }
    }
}

impl ResponseTemplate {
    pub fn segments(self) -> &'static [Segment] {
        match self {
            ResponseTemplate::ThinkAnswer => &[Segment::Think, Segment::Answer],
            ResponseTemplate::SummaryCaptionThinkAnswer => {
                &[Segment::Summary, Segment::Caption, Segment::Think, Segment::Answer]
            }
        }
    }

    /// Opening and closing tags in the order they must appear.
    pub fn tags(self) -> Vec<&'static str> {
        self.segments()
            .iter()
            .flat_map(|s| [s.open_tag(), s.close_tag()])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StructuredResponse {
    pub summary: Option<String>,
    pub caption: Option<String>,
    pub think: String,
    pub answer_raw: String,
}

impl StructuredResponse {
    pub fn new(think: impl Into<String>, answer: impl Into<String>) -> Self {
        StructuredResponse {
            summary: None,
            caption: None,
            think: think.into(),
            answer_raw: answer.into(),
        }
    }

    pub fn with_summary_caption(mut self, summary: impl Into<String>, caption: impl Into<String>) -> Self {
        self.summary = Some(summary.into());
        self.caption = Some(caption.into());
        self
    }

    fn segment(&self, seg: Segment) -> &str {
        match seg {
            Segment::Summary => self.summary.as_deref().unwrap_or(""),
            Segment::Caption => self.caption.as_deref().unwrap_or(""),
            Segment::Think => &self.think,
            Segment::Answer => &self.answer_raw,
        }
    }

    /// Render into `template` with no whitespace between tags.
    pub fn render(&self, template: ResponseTemplate) -> String {
        let mut out = String::new();
        for &seg in template.segments() {
            out.push_str(seg.open_tag());
            out.push_str(self.segment(seg));
            out.push_str(seg.close_tag());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("missing tag {0}")]
    MissingTag(&'static str),
    #[error("tag {0} appears more than once")]
    DuplicateTag(&'static str),
    #[error("tags out of template order")]
    WrongOrder,
    #[error("non-whitespace text outside tags at byte {0}")]
    TrailingText(usize),
    #[error("segment <{0}> is empty")]
    EmptySegment(&'static str),
}

/// Parse `text` against `template`.
pub fn parse_response(text: &str, template: ResponseTemplate) -> Result<StructuredResponse, ParseError> {
    let tags = template.tags();
    let mut found: Vec<(usize, usize)> = Vec::with_capacity(tags.len()); // (position, tag index)
    for (ti, tag) in tags.iter().enumerate() {
        let mut hits = text.match_indices(tag);
        match (hits.next(), hits.next()) {
            (None, _) => return Err(ParseError::MissingTag(tag)),
            (Some(_), Some(_)) => return Err(ParseError::DuplicateTag(tag)),
            (Some((pos, _)), None) => found.push((pos, ti)),
        }
    }
    found.sort_unstable();
    if found.iter().enumerate().any(|(i, &(_, ti))| i != ti) {
        return Err(ParseError::WrongOrder);
    }

    let mut interiors = Vec::with_capacity(template.segments().len());
    let mut cursor = 0;
    for pair in found.chunks_exact(2) {
        let (open_pos, open_i) = pair[0];
        let (close_pos, _) = pair[1];
        check_blank(text, cursor, open_pos)?;
        let start = open_pos + tags[open_i].len();
        if close_pos < start {
            // Overlapping tags cannot happen with the fixed tag set, but keep
            // slicing safe.
            return Err(ParseError::WrongOrder);
        }
        interiors.push(&text[start..close_pos]);
        cursor = close_pos + tags[open_i + 1].len();
    }
    check_blank(text, cursor, text.len())?;

    let mut resp = StructuredResponse::default();
    for (&seg, body) in template.segments().iter().zip(interiors) {
        match seg {
            Segment::Summary => resp.summary = Some(body.to_string()),
            Segment::Caption => resp.caption = Some(body.to_string()),
            Segment::Think => resp.think = body.to_string(),
            Segment::Answer => resp.answer_raw = body.to_string(),
        }
    }
    if resp.think.trim().is_empty() {
        return Err(ParseError::EmptySegment("think"));
    }
    if resp.answer_raw.trim().is_empty() {
        return Err(ParseError::EmptySegment("answer"));
    }
    Ok(resp)
}

fn check_blank(text: &str, from: usize, to: usize) -> Result<(), ParseError> {
    match text[from..to].char_indices().find(|(_, c)| !c.is_whitespace()) {
        Some((off, _)) => Err(ParseError::TrailingText(from + off)),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Discrete,
    Numeric,
    FunctionSeq,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExtractedAnswer {
    Discrete(String),
    Numeric(f64),
    FunctionSeq(Vec<TransformStep>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExtractError {
    #[error("no {0:?} value recoverable from answer")]
    Unparseable(AnswerKind),
    #[error("answer `{0}` is not one of the options")]
    OptionMismatch(String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

/// Extract a typed answer from the interior of the answer segment.
pub fn extract_answer(
    answer_raw: &str,
    kind: AnswerKind,
    options: Option<&[String]>,
) -> Result<ExtractedAnswer, ExtractError> {
    match kind {
        AnswerKind::Discrete => extract_discrete(answer_raw, options).map(ExtractedAnswer::Discrete),
        AnswerKind::Numeric => extract_numeric(answer_raw)
            .map(ExtractedAnswer::Numeric)
            .ok_or(ExtractError::Unparseable(AnswerKind::Numeric)),
        AnswerKind::FunctionSeq => Ok(ExtractedAnswer::FunctionSeq(parse_sequence(answer_raw)?)),
    }
}

fn extract_discrete(raw: &str, options: Option<&[String]>) -> Result<String, ExtractError> {
    let mut token = raw.trim();
    token = token.strip_suffix('.').unwrap_or(token).trim();
    if let Some(inner) = token.strip_prefix('(').and_then(|t| t.strip_suffix(')')) {
        token = inner.trim();
    }
    if token.is_empty() {
        return Err(ExtractError::Unparseable(AnswerKind::Discrete));
    }
    match options {
        None => Ok(token.to_string()),
        Some(opts) => {
            let folded = token.to_lowercase();
            opts.iter()
                .find(|o| o.trim().to_lowercase() == folded)
                .map(|o| o.trim().to_string())
                .ok_or_else(|| ExtractError::OptionMismatch(token.to_string()))
        }
    }
}

const NUM: &str = r"\d+(?:\.\d+)?";

static NUMBER_RE: LazyLock<Regex> = LazyLock::new(|| {
    let pattern = format!(
        r"(?x)
        \\[dt]?frac\s*\{{\s*(?P<fn>[-+]?{NUM})\s*\}}\s*\{{\s*(?P<fd>[-+]?{NUM})\s*\}}
        | (?P<sn>[-+]?{NUM})\s*/\s*(?P<sd>[-+]?{NUM})
        | (?P<th>[-+]?\d{{1,3}}(?:,\d{{3}})+(?:\.\d+)?)
        | (?P<pl>[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)
        "
    );
    Regex::new(&pattern).expect("number pattern")
});

static PERCENT_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*\\?%").expect("percent pattern"));

/// Last finite number in `text`, or `None`.
///
/// Accepts integers, decimals, `a/b`, `\frac{a}{b}` and thousands separators;
/// a trailing `%` divides by 100. Units and degree marks are ignored.
pub fn extract_numeric(text: &str) -> Option<f64> {
    let mut last = None;
    for caps in NUMBER_RE.captures_iter(text) {
        let whole = caps.get(0).expect("match");
        let value = if let (Some(n), Some(d)) = (caps.name("fn"), caps.name("fd")) {
            ratio(n.as_str(), d.as_str())
        } else if let (Some(n), Some(d)) = (caps.name("sn"), caps.name("sd")) {
            ratio(n.as_str(), d.as_str())
        } else if let Some(t) = caps.name("th") {
            t.as_str().replace(',', "").parse::<f64>().ok()
        } else {
            caps.name("pl").and_then(|p| p.as_str().parse::<f64>().ok())
        };
        let Some(mut v) = value else { continue };
        if PERCENT_RE.is_match(&text[whole.end()..]) {
            v /= 100.0;
        }
        if v.is_finite() {
            last = Some(v);
        }
    }
    last
}

fn ratio(n: &str, d: &str) -> Option<f64> {
    let n: f64 = n.parse().ok()?;
    let d: f64 = d.parse().ok()?;
    if d == 0.0 {
        None
    } else {
        Some(n / d)
    }
}

/// Number of tokens in the think segment.
///
/// With a vocabulary each whitespace-separated chunk is split by greedy
/// longest-match against the symbols (an unmatched remainder counts once);
/// without one, chunks are counted directly.
pub fn count_reasoning_tokens(response: &StructuredResponse, vocab: Option<&Vocabulary>) -> usize {
    match vocab {
        None => response.think.split_whitespace().count(),
        Some(v) => response
            .think
            .split_whitespace()
            .map(|chunk| v.count_tokens_in(chunk))
            .sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::transform::TransformFn;
    use proptest::prelude::*;

    const TA: ResponseTemplate = ResponseTemplate::ThinkAnswer;
    const SCTA: ResponseTemplate = ResponseTemplate::SummaryCaptionThinkAnswer;

    #[test]
    fn parses_well_formed() {
        let r = parse_response("<think>count cubes</think><answer>3</answer>", TA).unwrap();
        assert_eq!(r, StructuredResponse::new("count cubes", "3"));
        let r = parse_response(" \n<think> a </think>\n\n<answer>b</answer>\t", TA).unwrap();
        assert_eq!(r.think, " a ");
    }

    #[test]
    fn parse_failures() {
        assert_eq!(parse_response("3", TA), Err(ParseError::MissingTag("<think>")));
        assert_eq!(
            parse_response("<answer>3</answer><think>t</think>", TA),
            Err(ParseError::WrongOrder)
        );
        assert_eq!(
            parse_response("<think>t</think><answer>3</answer><answer>4</answer>", TA),
            Err(ParseError::DuplicateTag("<answer>"))
        );
        assert_eq!(
            parse_response("<think>t</think><answer>3</answer> done", TA),
            Err(ParseError::TrailingText(35))
        );
        assert_eq!(
            parse_response("so <think>t</think><answer>3</answer>", TA),
            Err(ParseError::TrailingText(0))
        );
        assert_eq!(
            parse_response("<think>t</think>x<answer>3</answer>", TA),
            Err(ParseError::TrailingText(16))
        );
        assert_eq!(
            parse_response("<think> </think><answer>3</answer>", TA),
            Err(ParseError::EmptySegment("think"))
        );
        assert_eq!(
            parse_response("<think>t</answer><answer>3</think>", TA),
            Err(ParseError::WrongOrder)
        );
    }

    #[test]
    fn summary_caption_template() {
        let text = "<summary>s</summary><caption>c</caption><think>t</think><answer>a</answer>";
        let r = parse_response(text, SCTA).unwrap();
        assert_eq!(r.summary.as_deref(), Some("s"));
        assert_eq!(r.caption.as_deref(), Some("c"));
        // Extra tags are plain text for the shorter template.
        assert!(matches!(parse_response(text, TA), Err(ParseError::TrailingText(0))));
        assert_eq!(
            parse_response("<think>t</think><answer>a</answer>", SCTA),
            Err(ParseError::MissingTag("<summary>"))
        );
        assert_eq!(
            parse_response("<caption>c</caption><summary>s</summary><think>t</think><answer>a</answer>", SCTA),
            Err(ParseError::WrongOrder)
        );
    }

    #[test]
    fn extracts_numbers() {
        let n = |s: &str| extract_answer(s, AnswerKind::Numeric, None).unwrap();
        assert_eq!(n("\\frac{3}{4}"), ExtractedAnswer::Numeric(0.75));
        assert_eq!(n("\\dfrac{ 3 }{ 4 }"), ExtractedAnswer::Numeric(0.75));
        assert_eq!(n("3/4"), ExtractedAnswer::Numeric(0.75));
        assert_eq!(n("45°"), ExtractedAnswer::Numeric(45.0));
        assert_eq!(n("45^\\circ"), ExtractedAnswer::Numeric(45.0));
        assert_eq!(n("12.5%"), ExtractedAnswer::Numeric(0.125));
        assert_eq!(n("50\\%"), ExtractedAnswer::Numeric(0.5));
        assert_eq!(n("+7 cm"), ExtractedAnswer::Numeric(7.0));
        assert_eq!(n("-2.5"), ExtractedAnswer::Numeric(-2.5));
        assert_eq!(n("1,250 apples"), ExtractedAnswer::Numeric(1250.0));
        assert_eq!(n("there are 4 cubes, so the answer is 3"), ExtractedAnswer::Numeric(3.0));
        assert_eq!(n("1e3"), ExtractedAnswer::Numeric(1000.0));
        assert_eq!(
            extract_answer("three", AnswerKind::Numeric, None),
            Err(ExtractError::Unparseable(AnswerKind::Numeric))
        );
        assert_eq!(
            extract_answer("1/0", AnswerKind::Numeric, None),
            Err(ExtractError::Unparseable(AnswerKind::Numeric))
        );
    }

    #[test]
    fn extracts_choices() {
        let opts: Vec<String> = ["A", "B", "C", "D"].map(String::from).to_vec();
        let d = |s: &str| extract_answer(s, AnswerKind::Discrete, Some(&opts));
        assert_eq!(d("b"), Ok(ExtractedAnswer::Discrete("B".into())));
        assert_eq!(d(" (C). "), Ok(ExtractedAnswer::Discrete("C".into())));
        assert_eq!(d("E"), Err(ExtractError::OptionMismatch("E".into())));
        assert_eq!(
            extract_answer("  3 ", AnswerKind::Discrete, None),
            Ok(ExtractedAnswer::Discrete("3".into()))
        );
        assert_eq!(
            extract_answer("  ", AnswerKind::Discrete, None),
            Err(ExtractError::Unparseable(AnswerKind::Discrete))
        );
    }

    #[test]
    fn extracts_function_sequences() {
        assert_eq!(
            extract_answer("change_color(obj2, red)", AnswerKind::FunctionSeq, None),
            Ok(ExtractedAnswer::FunctionSeq(vec![TransformStep::attr(
                TransformFn::ChangeColor,
                "obj2",
                "red"
            )]))
        );
        assert!(matches!(
            extract_answer("move(o1)", AnswerKind::FunctionSeq, None),
            Err(ExtractError::Grammar(_))
        ));
    }

    #[test]
    fn reasoning_tokens() {
        let r = StructuredResponse::new("a b c", "x");
        assert_eq!(count_reasoning_tokens(&r, None), 3);
        let vocab = Vocabulary::new(["diff", "color", "<eos>"]).unwrap();
        assert_eq!(count_reasoning_tokens(&StructuredResponse::new("diff", "x"), Some(&vocab)), 1);
        assert_eq!(count_reasoning_tokens(&StructuredResponse::new("diffcolor zz", "x"), Some(&vocab)), 3);
    }

    fn segment_text() -> impl Strategy<Value = String> {
        "[a-z0-9 .,()\n]{0,12}[a-z0-9][a-z0-9 .,()\n]{0,12}"
    }

    proptest! {
        #[test]
        fn render_parse_roundtrip(s in segment_text(), c in segment_text(), t in segment_text(), a in segment_text()) {
            let r = StructuredResponse::new(t.clone(), a.clone());
            prop_assert_eq!(parse_response(&r.render(TA), TA).unwrap(), r);
            let r = StructuredResponse::new(t, a).with_summary_caption(s, c);
            prop_assert_eq!(parse_response(&r.render(SCTA), SCTA).unwrap(), r);
        }

        #[test]
        fn numeric_whitespace_sign_invariance(v in 0u32..100_000, frac in 0u32..1000, pre in "[ \t\n]{0,3}", post in "[ \t\n]{0,3}") {
            let lit = format!("{v}.{frac:03}");
            let base = extract_numeric(&lit).unwrap();
            prop_assert_eq!(extract_numeric(&format!("{pre}+{lit}{post}")), Some(base));
            prop_assert_eq!(extract_numeric(&format!("{pre}{lit}°{post}")), Some(base));
            prop_assert_eq!(extract_numeric(&format!("{lit}%")), Some(base / 100.0));
        }
    }
}
