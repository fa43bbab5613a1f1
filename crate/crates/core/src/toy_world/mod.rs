//! Synthetic captioned shape scenes.
//!
//! Scenes are a handful of flat-colored circles, squares and triangles on a
//! uniform gray background. Captions are generated from the scene through the
//! closed grammar in [`grammar`], so every reward oracle can be checked exactly
//! against ground truth.

pub mod grammar;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

pub use grammar::{enumerate_captions, Caption, Color, Phrase, Position, ShapeKind};

/// Width of the location dead-band around region boundaries, in pixels.
pub const LOCATION_DEADBAND: f64 = 2.0;
const MAX_PLACEMENT_FAILURES: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub image_size: usize,
    pub background: f32,
    /// Half-extent of a lone object.
    pub single_radius: f64,
    /// Half-extent of objects in 2–4 count scenes.
    pub count_radius: f64,
    /// Half-extent of objects in two-object compositions.
    pub pair_radius: f64,
    /// Minimum empty pixels between object bounding boxes.
    pub gap: f64,
    /// Fraction of dataset items that are single-object scenes.
    pub single_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            background: 0.5,
            single_radius: 5.0,
            count_radius: 3.5,
            pair_radius: 4.5,
            gap: 2.0,
            single_fraction: 0.6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Difficulty {
    Single,
    Multi,
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Difficulty::Single),
            "multi" => Ok(Difficulty::Multi),
            _ => Err(Error::invalid(format!("difficulty `{s}`"))),
        }
    }
}

/// One object: kind, color, optional captioned position and its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedShape {
    pub shape: ShapeKind,
    pub color: Color,
    pub position: Option<Position>,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl PlacedShape {
    /// Whether the pixel with center `(px, py)` is inside the shape.
    pub fn covers(&self, px: f64, py: f64) -> bool {
        let (dx, dy, r) = (px - self.cx, py - self.cy, self.radius);
        match self.shape {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => {
                // apex at the top, base at the bottom
                let from_top = dy + r;
                (0.0..=2.0 * r).contains(&from_top) && dx.abs() <= from_top / 2.0
            }
        }
    }

    fn pixels(&self, size: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..size {
            for x in 0..size {
                if self.covers(x as f64 + 0.5, y as f64 + 0.5) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    fn separated_from(&self, other: &PlacedShape, gap: f64) -> bool {
        let reach = self.radius + other.radius + gap;
        (self.cx - other.cx).abs() >= reach || (self.cy - other.cy).abs() >= reach
    }
}

/// Ground-truth scene description; rendering is a pure function of it.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub shapes: Vec<PlacedShape>,
    pub image_size: usize,
    pub background: f32,
}

impl SceneSpec {
    pub fn render(&self) -> Image {
        let n = self.image_size;
        let bg = self.background;
        let mut img = Image::filled(n, n, [bg, bg, bg]);
        for s in &self.shapes {
            let rgb = s.color.rgb();
            for (x, y) in s.pixels(n) {
                img.set_pixel(x, y, rgb);
            }
        }
        img
    }

    /// Caption derived through the fixed template grammar.
    pub fn caption(&self) -> Caption {
        let mut phrases: Vec<Phrase> = Vec::new();
        for s in &self.shapes {
            match phrases
                .iter_mut()
                .find(|p| p.color == s.color && p.shape == s.shape && p.position == s.position)
            {
                Some(p) => p.count += 1,
                None => phrases.push(Phrase {
                    count: 1,
                    color: s.color,
                    shape: s.shape,
                    position: s.position,
                }),
            }
        }
        Caption { phrases }
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.shapes.is_empty() || self.shapes.len() > grammar::MAX_COUNT as usize {
            return Err(Error::invalid(format!("{} shapes in scene", self.shapes.len())));
        }
        for (i, a) in self.shapes.iter().enumerate() {
            for b in &self.shapes[i + 1..] {
                if !a.separated_from(b, 0.0) {
                    return Err(Error::invalid("overlapping shapes"));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "size={} bg={}", self.image_size, self.background)?;
        for s in &self.shapes {
            let pos = s.position.map(|p| p.word()).unwrap_or("-");
            write!(f, " {}:{}:{}:{}:{}:{}", s.shape, s.color, pos, s.cx, s.cy, s.radius)?;
        }
        Ok(())
    }
}

impl FromStr for SceneSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("scene spec `{s}`"));
        let mut parts = s.split_whitespace();
        let image_size = parts
            .next()
            .and_then(|p| p.strip_prefix("size="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)?;
        let background = parts
            .next()
            .and_then(|p| p.strip_prefix("bg="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)?;
        let mut shapes = Vec::new();
        for part in parts {
            let f: Vec<&str> = part.split(':').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            shapes.push(PlacedShape {
                shape: ShapeKind::from_word(f[0]).ok_or_else(bad)?,
                color: Color::from_word(f[1]).ok_or_else(bad)?,
                position: if f[2] == "-" {
                    None
                } else {
                    Some(Position::from_word(f[2]).ok_or_else(bad)?)
                },
                cx: f[3].parse().map_err(|_| bad())?,
                cy: f[4].parse().map_err(|_| bad())?,
                radius: f[5].parse().map_err(|_| bad())?,
            });
        }
        Ok(SceneSpec {
            shapes,
            image_size,
            background,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedImage {
    pub image: Image,
    pub caption: String,
    pub spec: SceneSpec,
}

/// Signed margin by which `(x, y)` lies inside the region named by `pos`.
///
/// Positive means inside; the magnitude is the distance to the nearest
/// relevant boundary.
pub fn region_margin(pos: Position, x: f64, y: f64, size: usize) -> f64 {
    let mid = size as f64 / 2.0;
    let quarter = size as f64 / 4.0;
    match pos {
        Position::Left => mid - x,
        Position::Right => x - mid,
        Position::Top => mid - y,
        Position::Bottom => y - mid,
        Position::Center => (quarter - (x - mid).abs()).min(quarter - (y - mid).abs()),
    }
}

fn centroid(pixels: &[(usize, usize)]) -> Option<(f64, f64)> {
    if pixels.is_empty() {
        return None;
    }
    let n = pixels.len() as f64;
    let sx: f64 = pixels.iter().map(|&(x, _)| x as f64 + 0.5).sum();
    let sy: f64 = pixels.iter().map(|&(_, y)| y as f64 + 0.5).sum();
    Some((sx / n, sy / n))
}

struct Placer<'a> {
    cfg: &'a WorldConfig,
    rng: ChaCha8Rng,
    failures: usize,
}

impl Placer<'_> {
    fn place(&mut self, items: &[(ShapeKind, Color, Option<Position>)], radius: f64) -> Result<Vec<PlacedShape>> {
        let n = self.cfg.image_size;
        let lo = (radius + 1.0).ceil() as i64;
        let hi = (n as f64 - radius - 1.0).floor() as i64;
        'scene: loop {
            let mut placed: Vec<PlacedShape> = Vec::new();
            for &(shape, color, position) in items {
                loop {
                    if self.failures >= MAX_PLACEMENT_FAILURES {
                        return Err(Error::Placement(self.failures));
                    }
                    if hi < lo {
                        self.failures = MAX_PLACEMENT_FAILURES;
                        continue;
                    }
                    let cand = PlacedShape {
                        shape,
                        color,
                        position,
                        cx: self.rng.random_range(lo..=hi) as f64,
                        cy: self.rng.random_range(lo..=hi) as f64,
                        radius,
                    };
                    let in_region = match position {
                        None => true,
                        Some(p) => match centroid(&cand.pixels(n)) {
                            Some((x, y)) => region_margin(p, x, y, n) > LOCATION_DEADBAND + 0.5,
                            None => false,
                        },
                    };
                    if !in_region || !placed.iter().all(|o| cand.separated_from(o, self.cfg.gap)) {
                        self.failures += 1;
                        // a crowded partial layout may have no room left; start over
                        if self.failures % 50 == 0 {
                            continue 'scene;
                        }
                        continue;
                    }
                    placed.push(cand);
                    break;
                }
            }
            return Ok(placed);
        }
    }
}

fn pick<T: Copy, R: Rng>(rng: &mut R, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

/// Deterministic scene for a seed, using the default world.
pub fn generate_scene(seed: u64, difficulty: Difficulty) -> Result<CaptionedImage> {
    generate_scene_with(seed, difficulty, &WorldConfig::default())
}

pub fn generate_scene_with(seed: u64, difficulty: Difficulty, cfg: &WorldConfig) -> Result<CaptionedImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = pick(&mut rng, Color::ALL);
    let shape = pick(&mut rng, ShapeKind::ALL);
    let (items, radius) = match difficulty {
        Difficulty::Single => {
            let position = match rng.random_range(0..=Position::ALL.len()) {
                0 => None,
                i => Some(Position::ALL[i - 1]),
            };
            (vec![(shape, color, position)], cfg.single_radius)
        }
        Difficulty::Multi => {
            if rng.random_bool(0.5) {
                let count = rng.random_range(2..=grammar::MAX_COUNT as usize);
                (vec![(shape, color, None); count], cfg.count_radius)
            } else {
                let mut other = (pick(&mut rng, ShapeKind::ALL), pick(&mut rng, Color::ALL));
                while other == (shape, color) {
                    other = (pick(&mut rng, ShapeKind::ALL), pick(&mut rng, Color::ALL));
                }
                let mut pair = [(shape, color), other];
                pair.sort_by_key(|&(s, c)| (c, s));
                (pair.iter().map(|&(s, c)| (s, c, None)).collect(), cfg.pair_radius)
            }
        }
    };
    let mut placer = Placer {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(seed::derive(seed, 1)),
        failures: 0,
    };
    let shapes = placer.place(&items, radius)?;
    let spec = SceneSpec {
        shapes,
        image_size: cfg.image_size,
        background: cfg.background,
    };
    Ok(CaptionedImage {
        image: spec.render(),
        caption: spec.caption().to_string(),
        spec,
    })
}

/// `n` scenes with per-item seeds derived from `seed`.
pub fn make_dataset(n: i64, seed: u64, cfg: &WorldConfig) -> Result<Vec<CaptionedImage>> {
    if n <= 0 {
        return Err(Error::invalid(format!("dataset size must be positive, got {n}")));
    }
    (0..n as u64)
        .map(|i| {
            let item_seed = seed::derive(seed, i);
            let u = (seed::splitmix(item_seed) >> 11) as f64 / (1u64 << 53) as f64;
            let difficulty = if u < cfg.single_fraction {
                Difficulty::Single
            } else {
                Difficulty::Multi
            };
            generate_scene_with(item_seed, difficulty, cfg)
        })
        .collect()
}

/// Manifest text: `index<TAB>caption<TAB>spec<TAB>image path` per line.
pub fn manifest(items: &[CaptionedImage]) -> String {
    let mut out = String::new();
    for (i, item) in items.iter().enumerate() {
        out.push_str(&format!("{i}\t{}\t{}\t{}\n", item.caption, item.spec, image_file_name(i)));
    }
    out
}

fn image_file_name(i: usize) -> String {
    format!("images/{i:05}.png")
}

/// Writes `manifest.tsv` plus one PNG per item under `dir`.
pub fn write_dataset(items: &[CaptionedImage], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    for (i, item) in items.iter().enumerate() {
        item.image.save_png(&dir.join(image_file_name(i)))?;
    }
    let mut f = fs::File::create(dir.join("manifest.tsv"))?;
    f.write_all(manifest(items).as_bytes())?;
    Ok(())
}

/// Evaluation capability a prompt split targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Color,
    Composition,
    Count,
    Location,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Color, Task::Composition, Task::Count, Task::Location];

    pub fn name(self) -> &'static str {
        match self {
            Task::Color => "color",
            Task::Composition => "composition",
            Task::Count => "count",
            Task::Location => "location",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task `{s}`")))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Seen and held-out prompts for a task.
///
/// Held-out prompts are whole attribute combinations selected by a fixed
/// modular rule, so no held-out combination ever appears among the seen ones.
pub fn prompt_splits(task: Task) -> (Vec<String>, Vec<String>) {
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    let mut push = |held_out: bool, c: Caption| {
        if held_out {
            unseen.push(c.to_string())
        } else {
            seen.push(c.to_string())
        }
    };
    for &color in Color::ALL {
        for &shape in ShapeKind::ALL {
            let (ci, si) = (color.index(), shape.index());
            match task {
                Task::Color => push((ci + si) % 3 == 0, Caption::single(1, color, shape, None)),
                Task::Count => {
                    for count in 1..=grammar::MAX_COUNT {
                        push((ci + si + count as usize) % 3 == 0, Caption::single(count, color, shape, None));
                    }
                }
                Task::Location => {
                    for &pos in Position::ALL {
                        push((ci + si + pos.index()) % 4 == 0, Caption::single(1, color, shape, Some(pos)));
                    }
                }
                Task::Composition => {
                    for &color2 in Color::ALL.iter().filter(|&&c| c > color) {
                        for &shape2 in ShapeKind::ALL.iter().filter(|&&s| s != shape) {
                            let held = (ci + si + color2.index() + shape2.index()) % 5 == 0;
                            let one = |c, s| Phrase {
                                count: 1,
                                color: c,
                                shape: s,
                                position: None,
                            };
                            push(
                                held,
                                Caption {
                                    phrases: vec![one(color, shape), one(color2, shape2)],
                                },
                            );
                        }
                    }
                }
            }
        }
    }
    (seen, unseen)
}
