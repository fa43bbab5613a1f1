//! Exact alignment oracles for the shape world.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::toy_world::{region_margin, Caption, Color, ShapeKind, LOCATION_DEADBAND};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    pub background: f32,
    /// A pixel is foreground when any channel differs from the background by more than this.
    pub fg_threshold: f32,
    /// Components smaller than this are ignored by count and composition.
    pub min_component_area: usize,
    /// Color consistency scores 0 below this many foreground pixels.
    pub min_foreground: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            background: 0.5,
            fg_threshold: 0.15,
            min_component_area: 8,
            min_foreground: 10,
        }
    }
}

/// A 4-connected foreground component.
#[derive(Clone, Debug)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
    pub bbox: (usize, usize, usize, usize),
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Majority nearest-palette color.
    pub fn color(&self, image: &Image) -> Color {
        let mut votes = [0usize; 5];
        for &(x, y) in &self.pixels {
            votes[Color::nearest(image.pixel(x, y)).index()] += 1;
        }
        let best = (0..5).max_by_key(|&i| (votes[i], std::cmp::Reverse(i))).unwrap();
        Color::ALL[best]
    }

    /// Square when all bounding-box corners are filled, triangle when sparse,
    /// circle otherwise.
    pub fn shape(&self) -> ShapeKind {
        let (x0, y0, x1, y1) = self.bbox;
        let has = |x, y| self.pixels.contains(&(x, y));
        if has(x0, y0) && has(x1, y0) && has(x0, y1) && has(x1, y1) {
            return ShapeKind::Square;
        }
        let box_area = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
        if (self.area() as f64) / box_area < 0.7 {
            ShapeKind::Triangle
        } else {
            ShapeKind::Circle
        }
    }
}

pub fn foreground_mask(image: &Image, cfg: &OracleConfig) -> Vec<bool> {
    image
        .data
        .chunks_exact(3)
        .map(|px| px.iter().any(|&v| (v - cfg.background).abs() > cfg.fg_threshold))
        .collect()
}

/// 4-connected components of the foreground mask, in raster order of first pixel.
pub fn components(image: &Image, cfg: &OracleConfig) -> Vec<Component> {
    let (w, h) = (image.width, image.height);
    let mask = foreground_mask(image, cfg);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            pixels.push((x, y));
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        out.push(Component {
            pixels,
            bbox: (x0, y0, x1, y1),
        });
    }
    out
}

fn parse(prompt: &str) -> Result<Caption> {
    prompt.parse::<Caption>()
}

/// Fraction of foreground pixels whose nearest palette entry is the prompted color.
pub fn color_consistency(image: &Image, prompt: &str, cfg: &OracleConfig) -> Result<f64> {
    let caption = parse(prompt)?;
    let colors = caption.colors();
    if colors.len() != 1 {
        return Err(Error::Prompt(format!("{prompt:?} names {} colors, expected one", colors.len())));
    }
    let target = colors[0];
    let mask = foreground_mask(image, cfg);
    let mut fg = 0usize;
    let mut hits = 0usize;
    for (i, px) in image.data.chunks_exact(3).enumerate() {
        if mask[i] {
            fg += 1;
            if Color::nearest([px[0], px[1], px[2]]) == target {
                hits += 1;
            }
        }
    }
    if fg < cfg.min_foreground {
        return Ok(0.0);
    }
    Ok(hits as f64 / fg as f64)
}

/// Number of foreground components with at least the minimum area.
pub fn count_objects(image: &Image, cfg: &OracleConfig) -> usize {
    components(image, cfg)
        .iter()
        .filter(|c| c.area() >= cfg.min_component_area)
        .count()
}

/// `exp(−|detected − prompted|)`.
pub fn object_count(image: &Image, prompt: &str, cfg: &OracleConfig) -> Result<f64> {
    let caption = parse(prompt)?;
    let want = caption.total_count() as f64;
    let got = count_objects(image, cfg) as f64;
    Ok((-(got - want).abs()).exp())
}

/// Fraction of prompted (color, shape) pairs found among detected components.
pub fn composition(image: &Image, prompt: &str, cfg: &OracleConfig) -> Result<f64> {
    let caption = parse(prompt)?;
    let mut wanted: Vec<(Color, ShapeKind)> = Vec::new();
    for p in &caption.phrases {
        if !wanted.contains(&(p.color, p.shape)) {
            wanted.push((p.color, p.shape));
        }
    }
    let found: Vec<(Color, ShapeKind)> = components(image, cfg)
        .iter()
        .filter(|c| c.area() >= cfg.min_component_area)
        .map(|c| (c.color(image), c.shape()))
        .collect();
    let hits = wanted.iter().filter(|w| found.contains(w)).count();
    Ok(hits as f64 / wanted.len() as f64)
}

/// 1 when the foreground centroid lies in the prompted region, 0.5 inside the
/// dead-band around its boundary, 0 otherwise or when nothing is drawn.
pub fn location(image: &Image, prompt: &str, cfg: &OracleConfig) -> Result<f64> {
    let caption = parse(prompt)?;
    let pos = caption
        .position()
        .ok_or_else(|| Error::Prompt(format!("{prompt:?} names no single position")))?;
    let mask = foreground_mask(image, cfg);
    let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            n += 1;
            sx += (i % image.width) as f64 + 0.5;
            sy += (i / image.width) as f64 + 0.5;
        }
    }
    if n < cfg.min_foreground {
        return Ok(0.0);
    }
    let margin = region_margin(pos, sx / n as f64, sy / n as f64, image.width);
    Ok(if margin > LOCATION_DEADBAND {
        1.0
    } else if margin >= -LOCATION_DEADBAND {
        0.5
    } else {
        0.0
    })
}
