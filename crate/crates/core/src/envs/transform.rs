//! Transformation steps and their textual grammar.
//!
//! ```text
//! sequence := step (("," | newline) step)*
//! step     := function "(" object_id "," value ")"
//! function := change_size | change_color | change_material | change_shape | change_position
//! value    := identifier | "(" integer "," integer ")"
//! ```
//!
//! Whitespace is allowed around every token. Identifiers are lowercased on
//! input, so `Change_Color(O2, Red)` and `change_color(o2, red)` parse equal.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// The five scene transformation functions, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TransformFn {
    ChangeSize,
    ChangeColor,
    ChangeMaterial,
    ChangeShape,
    ChangePosition,
}

impl TransformFn {
    pub const ALL: [TransformFn; 5] = [
        TransformFn::ChangeSize,
        TransformFn::ChangeColor,
        TransformFn::ChangeMaterial,
        TransformFn::ChangeShape,
        TransformFn::ChangePosition,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformFn::ChangeSize => "change_size",
            TransformFn::ChangeColor => "change_color",
            TransformFn::ChangeMaterial => "change_material",
            TransformFn::ChangeShape => "change_shape",
            TransformFn::ChangePosition => "change_position",
        }
    }

    /// Attribute word used in reasoning text ("size", "color", ...).
    pub fn attribute(self) -> &'static str {
        &self.name()["change_".len()..]
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn takes_cell(self) -> bool {
        self == TransformFn::ChangePosition
    }
}

impl fmt::Display for TransformFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Grid coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StepValue {
    Attr(String),
    Cell(Cell),
}

impl fmt::Display for StepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepValue::Attr(a) => f.write_str(a),
            StepValue::Cell(c) => c.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TransformStep {
    pub function: TransformFn,
    pub object: String,
    pub value: StepValue,
}

impl TransformStep {
    pub fn attr(function: TransformFn, object: impl Into<String>, value: impl Into<String>) -> Self {
        TransformStep {
            function,
            object: object.into(),
            value: StepValue::Attr(value.into()),
        }
    }

    pub fn position(object: impl Into<String>, x: i32, y: i32) -> Self {
        TransformStep {
            function: TransformFn::ChangePosition,
            object: object.into(),
            value: StepValue::Cell(Cell::new(x, y)),
        }
    }

    /// True when the value kind fits the function.
    pub fn is_well_typed(&self) -> bool {
        matches!(
            (self.function.takes_cell(), &self.value),
            (true, StepValue::Cell(_)) | (false, StepValue::Attr(_))
        )
    }
}

impl fmt::Display for TransformStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}, {})", self.function, self.object, self.value)
    }
}

/// Render a sequence in grammar form, steps separated by ", ".
pub fn format_sequence(steps: &[TransformStep]) -> String {
    steps
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("empty function sequence")]
    Empty,
    #[error("unexpected {found} at byte {pos}, expected {expected}")]
    Unexpected {
        pos: usize,
        found: String,
        expected: &'static str,
    },
    #[error("unknown transformation function `{0}`")]
    UnknownFunction(String),
    #[error("value of `{0}` has the wrong kind for the function")]
    ValueKind(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i32),
    LParen,
    RParen,
    Comma,
    Newline,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "identifier `{s}`"),
            Tok::Int(i) => write!(f, "integer {i}"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Newline => f.write_str("newline"),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, GrammarError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'\n' => {
                out.push((i, Tok::Newline));
                i += 1;
            }
            b' ' | b'\t' | b'\r' => i += 1,
            b'(' => {
                out.push((i, Tok::LParen));
                i += 1;
            }
            b')' => {
                out.push((i, Tok::RParen));
                i += 1;
            }
            b',' => {
                out.push((i, Tok::Comma));
                i += 1;
            }
            b'-' | b'+' | b'0'..=b'9' => {
                let start = i;
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let lit = &text[start..i];
                let v = lit.parse::<i32>().map_err(|_| GrammarError::Unexpected {
                    pos: start,
                    found: format!("`{lit}`"),
                    expected: "integer",
                })?;
                out.push((start, Tok::Int(v)));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Tok::Ident(text[start..i].to_ascii_lowercase())));
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(GrammarError::Unexpected {
                    pos: i,
                    found: format!("`{ch}`"),
                    expected: "a grammar token",
                });
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(_, t)| t)
    }

    fn unexpected(&self, expected: &'static str) -> GrammarError {
        match self.toks.get(self.at) {
            Some((pos, t)) => GrammarError::Unexpected {
                pos: *pos,
                found: t.to_string(),
                expected,
            },
            None => GrammarError::Unexpected {
                pos: self.end,
                found: "end of input".into(),
                expected,
            },
        }
    }

    fn skip_newlines(&mut self) {
        while self.peek() == Some(&Tok::Newline) {
            self.at += 1;
        }
    }

    fn expect(&mut self, want: Tok, expected: &'static str) -> Result<(), GrammarError> {
        self.skip_newlines();
        if self.peek() == Some(&want) {
            self.at += 1;
            Ok(())
        } else {
            Err(self.unexpected(expected))
        }
    }

    fn ident(&mut self, expected: &'static str) -> Result<String, GrammarError> {
        self.skip_newlines();
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.at += 1;
                Ok(s)
            }
            _ => Err(self.unexpected(expected)),
        }
    }

    fn int(&mut self) -> Result<i32, GrammarError> {
        self.skip_newlines();
        match self.peek() {
            Some(Tok::Int(v)) => {
                let v = *v;
                self.at += 1;
                Ok(v)
            }
            _ => Err(self.unexpected("integer")),
        }
    }

    fn step(&mut self) -> Result<TransformStep, GrammarError> {
        let fname = self.ident("function name")?;
        let function =
            TransformFn::from_name(&fname).ok_or_else(|| GrammarError::UnknownFunction(fname.clone()))?;
        self.expect(Tok::LParen, "`(`")?;
        let object = self.ident("object identifier")?;
        self.expect(Tok::Comma, "`,`")?;
        self.skip_newlines();
        let value = match self.peek() {
            Some(Tok::LParen) => {
                self.at += 1;
                let x = self.int()?;
                self.expect(Tok::Comma, "`,`")?;
                let y = self.int()?;
                self.expect(Tok::RParen, "`)`")?;
                StepValue::Cell(Cell::new(x, y))
            }
            Some(Tok::Ident(_)) => StepValue::Attr(self.ident("value")?),
            _ => return Err(self.unexpected("value")),
        };
        self.expect(Tok::RParen, "`)`")?;
        let step = TransformStep { function, object, value };
        if !step.is_well_typed() {
            return Err(GrammarError::ValueKind(fname));
        }
        Ok(step)
    }
}

/// Parse a function sequence.
pub fn parse_sequence(text: &str) -> Result<Vec<TransformStep>, GrammarError> {
    let toks = lex(text)?;
    // Newlines are whitespace except where they separate steps.
    let mut parser = Parser {
        toks,
        at: 0,
        end: text.len(),
    };
    parser.skip_newlines();
    if parser.peek().is_none() {
        return Err(GrammarError::Empty);
    }
    let mut steps = vec![parser.step()?];
    loop {
        let sep_at = parser.at;
        match parser.toks.get(parser.at).map(|(_, t)| t.clone()) {
            None => break,
            Some(Tok::Comma) => {
                parser.at += 1;
            }
            Some(Tok::Newline) => {
                parser.skip_newlines();
                if parser.peek().is_none() {
                    break;
                }
                // "step\n, step" is tolerated as one separator.
                if parser.peek() == Some(&Tok::Comma) {
                    parser.at += 1;
                }
            }
            Some(_) => {
                parser.at = sep_at;
                return Err(parser.unexpected("`,` or newline"));
            }
        }
        steps.push(parser.step()?);
    }
    Ok(steps)
}

impl Serialize for TransformStep {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TransformStep {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let mut steps = parse_sequence(&text).map_err(serde::de::Error::custom)?;
        if steps.len() != 1 {
            return Err(serde::de::Error::custom("expected exactly one step"));
        }
        Ok(steps.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_single_step() {
        let s = parse_sequence("change_color(obj2, red)").unwrap();
        assert_eq!(s, vec![TransformStep::attr(TransformFn::ChangeColor, "obj2", "red")]);
    }

    #[test]
    fn parses_positions_and_separators() {
        let s = parse_sequence("change_position(o1,(2,3))\nchange_size( o2 , large ),change_shape(o0,cube)").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0], TransformStep::position("o1", 2, 3));
        assert_eq!(s[2].function, TransformFn::ChangeShape);
    }

    #[test]
    fn lowercases_identifiers() {
        let s = parse_sequence("Change_Color(O2, RED)").unwrap();
        assert_eq!(s, vec![TransformStep::attr(TransformFn::ChangeColor, "o2", "red")]);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(parse_sequence("   "), Err(GrammarError::Empty));
        assert!(matches!(parse_sequence("rotate(o1, red)"), Err(GrammarError::UnknownFunction(_))));
        assert!(matches!(parse_sequence("change_color(o1, (1,2))"), Err(GrammarError::ValueKind(_))));
        assert!(matches!(parse_sequence("change_position(o1, left)"), Err(GrammarError::ValueKind(_))));
        assert!(parse_sequence("change_color(o1, red) change_size(o1, small)").is_err());
        assert!(parse_sequence("change_color(o1, red),").is_err());
        assert!(parse_sequence("change_color(o1 red)").is_err());
        assert!(parse_sequence("change_color(o1, red)!").is_err());
    }

    fn arb_step() -> impl Strategy<Value = TransformStep> {
        let attr = (0usize..4, 0usize..5, "[a-z][a-z0-9_]{0,6}").prop_map(|(f, o, v)| {
            TransformStep::attr(TransformFn::ALL[f], format!("o{o}"), v)
        });
        let pos = (0usize..5, -3i32..10, -3i32..10).prop_map(|(o, x, y)| TransformStep::position(format!("o{o}"), x, y));
        prop_oneof![attr, pos]
    }

    proptest! {
        #[test]
        fn render_parse_roundtrip(steps in prop::collection::vec(arb_step(), 1..6)) {
            prop_assert_eq!(parse_sequence(&format_sequence(&steps)).unwrap(), steps);
        }

        #[test]
        fn whitespace_between_tokens_is_ignored(steps in prop::collection::vec(arb_step(), 1..5), pad in "[ \t]{0,3}") {
            let spaced: String = format_sequence(&steps)
                .chars()
                .flat_map(|c| match c {
                    '(' | ')' | ',' => format!("{pad}{c}{pad}").chars().collect::<Vec<_>>(),
                    c => vec![c],
                })
                .collect();
            prop_assert_eq!(parse_sequence(&spaced).unwrap(), steps);
        }
    }
}
