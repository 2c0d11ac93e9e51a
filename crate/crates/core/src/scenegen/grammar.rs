//! Template grammar for instructions and its exact inverse.
//!
//! Sentences have one of two forms:
//!
//! ```text
//! add a <color> <shape> <absolute cue>
//! add a <color> <shape> <relation> <anchor>
//! ```
//!
//! where `<relation>` is one of `left of`, `right of`, `above`, `below` or a
//! vertical+horizontal combination (`above and left of`), and `<anchor>` is
//! either `the <color> <shape>` or the pronoun `it` (which always refers to
//! the object added at the previous step).

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{Catalog, Color, ObjectType, Shape};
use super::scene::ObjectInstance;
use crate::error::{Error, Result};

/// Two coordinates closer than this along an axis are "level" on that axis:
/// neither left/right (or above/below) holds. Half an 8x8 grid cell.
pub const TIE_TOLERANCE: f64 = 0.0625;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Horizontal {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vertical {
    Above,
    Below,
}

/// Spatial relation of a new object relative to its anchor. At least one
/// axis is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub horizontal: Option<Horizontal>,
    pub vertical: Option<Vertical>,
}

impl Relation {
    pub const ALL: [Relation; 8] = [
        Relation::new(Some(Horizontal::Left), None),
        Relation::new(Some(Horizontal::Right), None),
        Relation::new(None, Some(Vertical::Above)),
        Relation::new(None, Some(Vertical::Below)),
        Relation::new(Some(Horizontal::Left), Some(Vertical::Above)),
        Relation::new(Some(Horizontal::Right), Some(Vertical::Above)),
        Relation::new(Some(Horizontal::Left), Some(Vertical::Below)),
        Relation::new(Some(Horizontal::Right), Some(Vertical::Below)),
    ];

    pub const fn new(horizontal: Option<Horizontal>, vertical: Option<Vertical>) -> Self {
        Self {
            horizontal,
            vertical,
        }
    }

    /// Relation of `subject` with respect to `anchor` (image coordinates, y
    /// grows downward). `None` when the two are level on both axes.
    pub fn between(subject: (f64, f64), anchor: (f64, f64), tol: f64) -> Option<Relation> {
        let dx = subject.0 - anchor.0;
        let dy = subject.1 - anchor.1;
        let horizontal = if dx < -tol {
            Some(Horizontal::Left)
        } else if dx > tol {
            Some(Horizontal::Right)
        } else {
            None
        };
        let vertical = if dy < -tol {
            Some(Vertical::Above)
        } else if dy > tol {
            Some(Vertical::Below)
        } else {
            None
        };
        if horizontal.is_none() && vertical.is_none() {
            None
        } else {
            Some(Relation::new(horizontal, vertical))
        }
    }

    /// Unit direction `(sx, sy)` with components in {-1, 0, 1}.
    pub fn direction(self) -> (f64, f64) {
        let sx = match self.horizontal {
            Some(Horizontal::Left) => -1.0,
            Some(Horizontal::Right) => 1.0,
            None => 0.0,
        };
        let sy = match self.vertical {
            Some(Vertical::Above) => -1.0,
            Some(Vertical::Below) => 1.0,
            None => 0.0,
        };
        (sx, sy)
    }

    fn phrase(self) -> String {
        let h = self.horizontal.map(|h| match h {
            Horizontal::Left => "left of",
            Horizontal::Right => "right of",
        });
        let v = self.vertical.map(|v| match v {
            Vertical::Above => "above",
            Vertical::Below => "below",
        });
        match (v, h) {
            (Some(v), Some(h)) => format!("{v} and {h}"),
            (Some(v), None) => v.to_string(),
            (None, Some(h)) => h.to_string(),
            (None, None) => unreachable!("relation without an axis"),
        }
    }
}

/// Absolute placements used for the first object of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsoluteCue {
    Center,
    LeftSide,
    RightSide,
    Top,
    Bottom,
}

impl AbsoluteCue {
    pub const ALL: [AbsoluteCue; 5] = [
        AbsoluteCue::Center,
        AbsoluteCue::LeftSide,
        AbsoluteCue::RightSide,
        AbsoluteCue::Top,
        AbsoluteCue::Bottom,
    ];

    pub fn position(self) -> (f64, f64) {
        match self {
            AbsoluteCue::Center => (0.5, 0.5),
            AbsoluteCue::LeftSide => (0.2, 0.5),
            AbsoluteCue::RightSide => (0.8, 0.5),
            AbsoluteCue::Top => (0.5, 0.2),
            AbsoluteCue::Bottom => (0.5, 0.8),
        }
    }

    pub fn from_position(p: (f64, f64)) -> Option<AbsoluteCue> {
        AbsoluteCue::ALL.into_iter().find(|cue| {
            let q = cue.position();
            (p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9
        })
    }

    fn phrase(self) -> &'static str {
        match self {
            AbsoluteCue::Center => "in the center",
            AbsoluteCue::LeftSide => "at the left side",
            AbsoluteCue::RightSide => "at the right side",
            AbsoluteCue::Top => "at the top",
            AbsoluteCue::Bottom => "at the bottom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPhrase {
    Object(ObjectType),
    It,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Absolute(AbsoluteCue),
    Relative {
        relation: Relation,
        anchor: AnchorPhrase,
    },
}

/// Structured form of one instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParsedInstruction {
    pub otype: ObjectType,
    pub placement: Placement,
}

fn article(color: Color) -> &'static str {
    match color.name().as_bytes()[0] {
        b'a' | b'e' | b'i' | b'o' | b'u' => "an",
        _ => "a",
    }
}

impl fmt::Display for ParsedInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "add {} {} {} ",
            article(self.otype.color),
            self.otype.color.name(),
            self.otype.shape.name()
        )?;
        match self.placement {
            Placement::Absolute(cue) => f.write_str(cue.phrase()),
            Placement::Relative { relation, anchor } => {
                write!(f, "{} ", relation.phrase())?;
                match anchor {
                    AnchorPhrase::It => f.write_str("it"),
                    AnchorPhrase::Object(o) => {
                        write!(f, "the {} {}", o.color.name(), o.shape.name())
                    }
                }
            }
        }
    }
}

/// Reference to the object a new instruction is placed against.
#[derive(Debug, Clone, Copy)]
pub struct Anchor<'a> {
    pub object: &'a ObjectInstance,
    /// The anchor was added at the immediately preceding step.
    pub is_last: bool,
}

/// Turn a placed object into an instruction sentence.
///
/// Without an anchor the object must sit exactly on one of the absolute cue
/// positions. With an anchor the relation is read off the geometry, and the
/// pronoun `it` replaces the anchor noun phrase with probability
/// `pronoun_prob` when the anchor is the previously added object.
pub fn realize_instruction<R: Rng + ?Sized>(
    new_obj: &ObjectInstance,
    anchor: Option<Anchor<'_>>,
    pronoun_prob: f64,
    rng: &mut R,
) -> Result<String> {
    let placement = match anchor {
        None => {
            let cue = AbsoluteCue::from_position(new_obj.position).ok_or_else(|| {
                Error::Contract(format!(
                    "object at {:?} needs an anchor: it is not on an absolute cue position",
                    new_obj.position
                ))
            })?;
            Placement::Absolute(cue)
        }
        Some(a) => {
            let relation = Relation::between(new_obj.position, a.object.position, TIE_TOLERANCE)
                .ok_or_else(|| {
                    Error::Contract("new object is level with its anchor on both axes".into())
                })?;
            let pronoun = a.is_last && rng.random::<f64>() < pronoun_prob;
            let anchor = if pronoun {
                AnchorPhrase::It
            } else {
                AnchorPhrase::Object(a.object.otype)
            };
            Placement::Relative { relation, anchor }
        }
    };
    Ok(ParsedInstruction {
        otype: new_obj.otype,
        placement,
    }
    .to_string())
}

fn parse_err(text: &str, reason: impl Into<String>) -> Error {
    Error::Parse {
        text: text.to_string(),
        reason: reason.into(),
    }
}

/// Exact inverse of [`realize_instruction`]'s grammar.
pub fn oracle_parse_instruction(text: &str) -> Result<ParsedInstruction> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut it = words.iter().copied();
    let mut next = |what: &str| {
        it.next()
            .ok_or_else(|| parse_err(text, format!("missing {what}")))
    };

    if next("verb")? != "add" {
        return Err(parse_err(text, "expected leading 'add'"));
    }
    let art = next("article")?;
    let color_word = next("color")?;
    let color = Color::from_name(color_word)
        .ok_or_else(|| parse_err(text, format!("unknown color {color_word:?}")))?;
    if art != article(color) {
        return Err(parse_err(text, format!("wrong article {art:?}")));
    }
    let shape_word = next("shape")?;
    let shape = Shape::from_name(shape_word)
        .ok_or_else(|| parse_err(text, format!("unknown shape {shape_word:?}")))?;
    let otype = ObjectType::new(shape, color);

    let rest: Vec<&str> = words.get(4..).map(|r| r.to_vec()).unwrap_or_default();
    if let Some(cue) = AbsoluteCue::ALL
        .into_iter()
        .find(|cue| cue.phrase().split(' ').eq(rest.iter().copied()))
    {
        return Ok(ParsedInstruction {
            otype,
            placement: Placement::Absolute(cue),
        });
    }

    // Relation phrase followed by an anchor phrase.
    let mut i = 0;
    let vertical = match rest.first() {
        Some(&"above") => Some(Vertical::Above),
        Some(&"below") => Some(Vertical::Below),
        _ => None,
    };
    if vertical.is_some() {
        i += 1;
    }
    let mut horizontal = None;
    let after_and = vertical.is_some() && rest.get(i) == Some(&"and");
    if after_and {
        i += 1;
    }
    if vertical.is_none() || after_and {
        horizontal = match rest.get(i) {
            Some(&"left") => Some(Horizontal::Left),
            Some(&"right") => Some(Horizontal::Right),
            _ => return Err(parse_err(text, "expected a relation")),
        };
        if rest.get(i + 1) != Some(&"of") {
            return Err(parse_err(text, "expected 'of' after horizontal relation"));
        }
        i += 2;
    }
    let relation = Relation::new(horizontal, vertical);
    let anchor = match &rest[i..] {
        ["it"] => AnchorPhrase::It,
        ["the", c, s] => {
            let c = Color::from_name(c).ok_or_else(|| parse_err(text, "unknown anchor color"))?;
            let s = Shape::from_name(s).ok_or_else(|| parse_err(text, "unknown anchor shape"))?;
            AnchorPhrase::Object(ObjectType::new(s, c))
        }
        _ => {
            return Err(parse_err(
                text,
                "expected 'it' or 'the <color> <shape>' anchor",
            ))
        }
    };
    Ok(ParsedInstruction {
        otype,
        placement: Placement::Relative { relation, anchor },
    })
}

/// Every token the grammar can emit for a catalog, in a stable order.
pub fn grammar_tokens(catalog: &Catalog) -> Vec<String> {
    let mut tokens: Vec<String> = ["add", "a", "an"].iter().map(|s| s.to_string()).collect();
    tokens.extend(catalog.colors.iter().map(|c| c.name().to_string()));
    tokens.extend(catalog.shapes.iter().map(|s| s.name().to_string()));
    for w in [
        "in", "the", "center", "at", "left", "right", "side", "top", "bottom", "of", "above",
        "below", "and", "it",
    ] {
        tokens.push(w.to_string());
    }
    tokens
}
