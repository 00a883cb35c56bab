//! The hint template grammar.
//!
//! Every hint renders as
//!
//! ```text
//! the pose is <direction> of a <color> <label> that is <band>
//! ```
//!
//! where `<direction>` is where the described position lies relative to the
//! object, i.e. the opposite of the object's direction seen from the pose.

use serde::{Deserialize, Serialize};

use super::vocab::{ColorName, Direction, DistanceBand, SemanticLabel};
use crate::error::{Error, Result};

/// Word positions of the template. Slot roles are fixed, which lets the text
/// encoder use a per-slot position embedding.
pub const TEMPLATE_LEN: usize = 11;
pub const SLOT_DIRECTION: usize = 3;
pub const SLOT_COLOR: usize = 6;
pub const SLOT_LABEL: usize = 7;
pub const SLOT_BAND: usize = 10;

const FIXED: [(usize, &str); 7] = [
    (0, "the"),
    (1, "pose"),
    (2, "is"),
    (4, "of"),
    (5, "a"),
    (8, "that"),
    (9, "is"),
];

/// One sentence of a query describing one nearby object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hint {
    pub object_ref: u32,
    /// Direction from the target to the object.
    pub relation: Direction,
    pub distance_band: DistanceBand,
    pub label: SemanticLabel,
    pub color: ColorName,
    pub text: String,
}

pub fn render_hint(label: SemanticLabel, color: ColorName, relation: Direction, band: DistanceBand) -> String {
    format!(
        "the pose is {} of a {} {} that is {}",
        relation.opposite(),
        color,
        label,
        band
    )
}

/// Inverse of [`render_hint`].
pub fn parse_hint(text: &str) -> Result<(SemanticLabel, ColorName, Direction, DistanceBand)> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let bad = |msg: String| Error::Parse { line: 0, message: msg };
    if words.len() != TEMPLATE_LEN {
        return Err(bad(format!("hint has {} words, expected {TEMPLATE_LEN}", words.len())));
    }
    for (pos, w) in FIXED {
        if words[pos] != w {
            return Err(bad(format!("expected {w:?} at word {pos}, found {:?}", words[pos])));
        }
    }
    let pose_dir: Direction = words[SLOT_DIRECTION].parse().map_err(bad)?;
    if pose_dir == Direction::Same {
        return Err(bad("hint direction cannot be \"same\"".into()));
    }
    let color: ColorName = words[SLOT_COLOR].parse().map_err(bad)?;
    let label: SemanticLabel = words[SLOT_LABEL].parse().map_err(bad)?;
    let band: DistanceBand = words[SLOT_BAND].parse().map_err(bad)?;
    Ok((label, color, pose_dir.opposite(), band))
}

/// Every word the grammar can produce, plus the coincident-position token.
/// Order is fixed; the text encoder's embedding table follows it.
pub fn vocabulary() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = vec!["the", "pose", "is", "of", "a", "that"];
    words.extend(Direction::ALL.iter().map(|d| d.token()));
    words.extend(ColorName::ALL.iter().map(|c| c.token()));
    words.extend(SemanticLabel::ALL.iter().map(|l| l.token()));
    words.extend(DistanceBand::ALL.iter().map(|b| b.token()));
    words
}
