//! Closed vocabularies shared by the generator, the hint grammar and the
//! encoders.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

macro_rules! token_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $tok:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $tok)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn token(self) -> &'static str {
                match self {
                    $($name::$variant => $tok),+
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($tok => Ok($name::$variant),)+
                    other => Err(format!("unknown {} {other:?}", stringify!($name))),
                }
            }
        }
    };
}

token_enum!(
    /// Semantic class of a segmented object.
    SemanticLabel {
        Building => "building",
        Road => "road",
        Terrain => "terrain",
        Sidewalk => "sidewalk",
        Pole => "pole",
        Vegetation => "vegetation",
        Fence => "fence",
        Wall => "wall",
    }
);

token_enum!(
    /// Dominant color class of an object.
    ColorName {
        Gray => "gray",
        Black => "black",
        BrightGray => "bright-gray",
        Green => "green",
        Red => "red",
        Brown => "brown",
        White => "white",
        Blue => "blue",
    }
);

token_enum!(
    /// Eight-way cardinal direction plus the token used for coincident
    /// positions.
    Direction {
        East => "east",
        NorthEast => "north-east",
        North => "north",
        NorthWest => "north-west",
        West => "west",
        SouthWest => "south-west",
        South => "south",
        SouthEast => "south-east",
        Same => "same",
    }
);

token_enum!(
    /// Coarse distance between the described position and an object.
    DistanceBand {
        Near => "near",
        Mid => "mid",
        Far => "far",
    }
);

impl ColorName {
    /// Prototype RGB in `[0, 1]`.
    pub fn prototype(self) -> [f64; 3] {
        match self {
            ColorName::Gray => [0.45, 0.45, 0.45],
            ColorName::Black => [0.08, 0.08, 0.08],
            ColorName::BrightGray => [0.75, 0.75, 0.75],
            ColorName::Green => [0.2, 0.6, 0.2],
            ColorName::Red => [0.75, 0.15, 0.12],
            ColorName::Brown => [0.45, 0.3, 0.15],
            ColorName::White => [0.95, 0.95, 0.95],
            ColorName::Blue => [0.15, 0.3, 0.75],
        }
    }
}

impl Direction {
    /// The eight proper directions, counter-clockwise from east.
    pub const CARDINALS: [Direction; 8] = [
        Direction::East,
        Direction::NorthEast,
        Direction::North,
        Direction::NorthWest,
        Direction::West,
        Direction::SouthWest,
        Direction::South,
        Direction::SouthEast,
    ];

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Same => Direction::Same,
            d => Self::CARDINALS[(d.index() + 4) % 8],
        }
    }
}

/// Direction of `to` as seen from `from`, with `+x` east and `+y` north.
///
/// Sector boundaries sit 22.5° either side of each cardinal axis; a vector
/// exactly on a boundary belongs to the pure cardinal. Identical points give
/// [`Direction::Same`].
pub fn cardinal_direction(from: [f64; 2], to: [f64; 2]) -> Direction {
    let dx = to[0] - from[0];
    let dy = to[1] - from[1];
    if dx == 0.0 && dy == 0.0 {
        return Direction::Same;
    }
    // tan(22.5°)
    let t = std::f64::consts::SQRT_2 - 1.0;
    let (ax, ay) = (dx.abs(), dy.abs());
    if ay <= t * ax {
        if dx > 0.0 {
            Direction::East
        } else {
            Direction::West
        }
    } else if ax <= t * ay {
        if dy > 0.0 {
            Direction::North
        } else {
            Direction::South
        }
    } else {
        match (dx > 0.0, dy > 0.0) {
            (true, true) => Direction::NorthEast,
            (false, true) => Direction::NorthWest,
            (false, false) => Direction::SouthWest,
            (true, false) => Direction::SouthEast,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn axis_and_diagonal_directions() {
        assert_eq!(cardinal_direction([0.0, 0.0], [1.0, 0.0]), Direction::East);
        assert_eq!(cardinal_direction([0.0, 0.0], [1.0, 1.0]), Direction::NorthEast);
        assert_eq!(cardinal_direction([0.0, 0.0], [0.0, -2.0]), Direction::South);
        assert_eq!(cardinal_direction([3.0, 3.0], [3.0, 3.0]), Direction::Same);
        assert_eq!(cardinal_direction([15.0, 15.0], [25.0, 15.0]), Direction::East);
    }

    #[test]
    fn boundary_goes_to_cardinal() {
        let t = std::f64::consts::SQRT_2 - 1.0;
        assert_eq!(cardinal_direction([0.0, 0.0], [1.0, t]), Direction::East);
        assert_eq!(cardinal_direction([0.0, 0.0], [-t, 1.0]), Direction::North);
    }

    #[test]
    fn tokens_round_trip() {
        for d in Direction::ALL {
            assert_eq!(d.token().parse::<Direction>().unwrap(), *d);
        }
        for c in ColorName::ALL {
            assert_eq!(c.token().parse::<ColorName>().unwrap(), *c);
        }
    }

    proptest! {
        #[test]
        fn reversed_pair_gives_opposite(ax in -50.0..50.0f64, ay in -50.0..50.0f64,
                                        bx in -50.0..50.0f64, by in -50.0..50.0f64) {
            prop_assume!(ax != bx || ay != by);
            let fwd = cardinal_direction([ax, ay], [bx, by]);
            let back = cardinal_direction([bx, by], [ax, ay]);
            prop_assert_eq!(back, fwd.opposite());
        }
    }
}
