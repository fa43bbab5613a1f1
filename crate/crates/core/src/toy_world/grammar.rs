//! Closed caption grammar: `phrase (" and " phrase)*` where a phrase is
//! `<count> <color> <shape>[s] [on the <position>]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).unwrap()
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w {
                    $($word => Some($name::$variant),)+
                    _ => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

word_enum!(ShapeKind {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
});

word_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
});

word_enum!(Position {
    Left => "left",
    Right => "right",
    Top => "top",
    Bottom => "bottom",
    Center => "center",
});

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Purple => [0.6, 0.0, 0.8],
        }
    }

    /// Palette entry nearest (in RGB Euclidean distance) to `px`.
    pub fn nearest(px: [f32; 3]) -> Color {
        let mut best = Color::Red;
        let mut best_d = f32::INFINITY;
        for &c in Color::ALL {
            let p = c.rgb();
            let d = (0..3).map(|i| (px[i] - p[i]) * (px[i] - p[i])).sum::<f32>();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }
}

pub const COUNT_WORDS: [&str; 4] = ["a", "two", "three", "four"];
pub const MAX_COUNT: u8 = 4;

fn count_word(n: u8) -> &'static str {
    COUNT_WORDS[(n - 1) as usize]
}

fn parse_count(w: &str) -> Option<u8> {
    COUNT_WORDS.iter().position(|&c| c == w).map(|i| i as u8 + 1)
}

/// Every word the grammar can emit.
pub fn grammar_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = COUNT_WORDS.to_vec();
    words.extend(Color::ALL.iter().map(|c| c.word()));
    for s in ShapeKind::ALL {
        words.push(s.word());
    }
    words.extend(["circles", "squares", "triangles"]);
    words.extend(["on", "the"]);
    words.extend(Position::ALL.iter().map(|p| p.word()));
    words.push("and");
    words
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Phrase {
    pub count: u8,
    pub color: Color,
    pub shape: ShapeKind,
    pub position: Option<Position>,
}

impl fmt::Display for Phrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let plural = if self.count > 1 { "s" } else { "" };
        write!(f, "{} {} {}{}", count_word(self.count), self.color, self.shape, plural)?;
        if let Some(p) = self.position {
            write!(f, " on the {p}")?;
        }
        Ok(())
    }
}

/// A parsed caption.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Caption {
    pub phrases: Vec<Phrase>,
}

impl Caption {
    pub fn single(count: u8, color: Color, shape: ShapeKind, position: Option<Position>) -> Self {
        Self {
            phrases: vec![Phrase {
                count,
                color,
                shape,
                position,
            }],
        }
    }

    pub fn total_count(&self) -> u32 {
        self.phrases.iter().map(|p| p.count as u32).sum()
    }

    /// Distinct colors named by the caption.
    pub fn colors(&self) -> Vec<Color> {
        let mut out: Vec<Color> = Vec::new();
        for p in &self.phrases {
            if !out.contains(&p.color) {
                out.push(p.color);
            }
        }
        out
    }

    /// The single named position, if exactly one phrase carries one.
    pub fn position(&self) -> Option<Position> {
        let mut it = self.phrases.iter().filter_map(|p| p.position);
        let first = it.next()?;
        if it.next().is_some() {
            None
        } else {
            Some(first)
        }
    }
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.phrases.iter().enumerate() {
            if i > 0 {
                f.write_str(" and ")?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

impl FromStr for Caption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_lowercase();
        let words: Vec<&str> = lower.split_whitespace().collect();
        let bad = |why: &str| Error::Prompt(format!("{s:?}: {why}"));
        if words.is_empty() {
            return Err(bad("empty"));
        }
        let mut phrases = Vec::new();
        let mut i = 0;
        loop {
            let count = words.get(i).and_then(|w| parse_count(w)).ok_or_else(|| bad("expected a count word"))?;
            let color = words
                .get(i + 1)
                .and_then(|w| Color::from_word(w))
                .ok_or_else(|| bad("expected a color"))?;
            let shape_word = words.get(i + 2).ok_or_else(|| bad("expected a shape"))?;
            let (stem, plural) = match shape_word.strip_suffix('s') {
                Some(stem) => (stem, true),
                None => (*shape_word, false),
            };
            let shape = ShapeKind::from_word(stem).ok_or_else(|| bad("unknown shape"))?;
            if plural != (count > 1) {
                return Err(bad("count and plural disagree"));
            }
            i += 3;
            let mut position = None;
            if words.get(i) == Some(&"on") {
                if words.get(i + 1) != Some(&"the") {
                    return Err(bad("expected `on the`"));
                }
                position = Some(
                    words
                        .get(i + 2)
                        .and_then(|w| Position::from_word(w))
                        .ok_or_else(|| bad("unknown position"))?,
                );
                i += 3;
            }
            phrases.push(Phrase {
                count,
                color,
                shape,
                position,
            });
            match words.get(i) {
                None => break,
                Some(&"and") => i += 1,
                Some(_) => return Err(bad("trailing words")),
            }
        }
        Ok(Caption { phrases })
    }
}

/// Every caption the scene generator can produce.
///
/// Single-object phrases may carry a position; multi-count phrases never do;
/// two-object compositions are single, unpositioned objects in canonical order.
pub fn enumerate_captions() -> Vec<Caption> {
    let mut out = Vec::new();
    let positions: Vec<Option<Position>> =
        std::iter::once(None).chain(Position::ALL.iter().map(|&p| Some(p))).collect();
    for count in 1..=MAX_COUNT {
        for &color in Color::ALL {
            for &shape in ShapeKind::ALL {
                if count == 1 {
                    for &position in &positions {
                        out.push(Caption::single(1, color, shape, position));
                    }
                } else {
                    out.push(Caption::single(count, color, shape, None));
                }
            }
        }
    }
    let objects: Vec<(Color, ShapeKind)> = Color::ALL
        .iter()
        .flat_map(|&c| ShapeKind::ALL.iter().map(move |&s| (c, s)))
        .collect();
    for i in 0..objects.len() {
        for j in i + 1..objects.len() {
            let (a, b) = (objects[i], objects[j]);
            out.push(Caption {
                phrases: vec![
                    Phrase {
                        count: 1,
                        color: a.0,
                        shape: a.1,
                        position: None,
                    },
                    Phrase {
                        count: 1,
                        color: b.0,
                        shape: b.1,
                        position: None,
                    },
                ],
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_and_parse_agree() {
        for c in enumerate_captions() {
            let text = c.to_string();
            assert_eq!(text.parse::<Caption>().unwrap(), c, "{text}");
        }
    }

    #[test]
    fn plural_must_match_count() {
        assert!("two red circle".parse::<Caption>().is_err());
        assert!("a red circles".parse::<Caption>().is_err());
        assert!("three red squares".parse::<Caption>().is_ok());
    }

    #[test]
    fn rejects_out_of_grammar() {
        for bad in ["", "red circle", "a pink circle", "a red circle on left", "a red circle please"] {
            assert!(bad.parse::<Caption>().is_err(), "{bad}");
        }
    }

    #[test]
    fn parse_normalizes_case_and_space() {
        let c: Caption = "  A Red   CIRCLE ".parse().unwrap();
        assert_eq!(c.to_string(), "a red circle");
    }

    #[test]
    fn nearest_palette_is_identity_on_palette() {
        for &c in Color::ALL {
            assert_eq!(Color::nearest(c.rgb()), c);
        }
    }
}
