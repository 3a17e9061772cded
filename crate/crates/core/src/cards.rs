//! Procedural card-suit images with rotation, shear and translation labels.
//!
//! Glyphs are rasterized from implicit shapes (circles, triangles, a rhombus)
//! evaluated at pixel centers, so no image assets are needed. Samples are the
//! glyph pushed through an affine map (rotate, then shear, then translate,
//! about the image center) with bilinear resampling and a 0.5 threshold.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::split::{RangeSplit, Split, SplitError};

pub const CARD_SIZE: usize = 48;
pub const CARD_PIXELS: usize = CARD_SIZE * CARD_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suit {
    Clubs,
    Spades,
    Hearts,
    Diamonds,
}

impl Suit {
    pub const ALL: [Suit; 4] = [Suit::Clubs, Suit::Spades, Suit::Hearts, Suit::Diamonds];

    pub fn name(self) -> &'static str {
        match self {
            Suit::Clubs => "clubs",
            Suit::Spades => "spades",
            Suit::Hearts => "hearts",
            Suit::Diamonds => "diamonds",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Suit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suit::ALL
            .into_iter()
            .find(|suit| suit.name() == s)
            .ok_or_else(|| format!("unknown suit '{s}'"))
    }
}

/// A 48×48 image, row-major, values in `[0, 1]`.
pub type CardImage = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct CardSample {
    pub image: CardImage,
    pub suit: Suit,
    /// Rotation in degrees, counter-clockwise as displayed.
    pub angle: f64,
    /// Shear angle in degrees, applied equally along x and y.
    pub shear: f64,
    /// Translation as a fraction of the image size (x right, y down).
    pub tx: f64,
    pub ty: f64,
}

/// Sampling ranges for [`generate_card_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CardRanges {
    pub angle: [f64; 2],
    pub shear: [f64; 2],
    pub translation: [f64; 2],
}

impl Default for CardRanges {
    fn default() -> Self {
        Self {
            angle: [-30.0, 30.0],
            shear: [-10.0, 10.0],
            translation: [-0.1, 0.1],
        }
    }
}

impl CardRanges {
    pub fn validate(&self) -> Result<(), String> {
        for (name, [lo, hi]) in [
            ("angle", self.angle),
            ("shear", self.shear),
            ("translation", self.translation),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(format!("{name} range [{lo}, {hi}] is invalid"));
            }
        }
        Ok(())
    }
}

// Normalized coordinates: u right, v up, both in [-1, 1] across the image.
fn in_circle(u: f64, v: f64, cu: f64, cv: f64, r: f64) -> bool {
    (u - cu).powi(2) + (v - cv).powi(2) <= r * r
}

fn in_triangle(u: f64, v: f64, a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let side = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (v - p.1) - (q.1 - p.1) * (u - p.0);
    let (d1, d2, d3) = (side(a, b), side(b, c), side(c, a));
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

fn heart(u: f64, v: f64) -> bool {
    in_circle(u, v, -0.27, 0.27, 0.3)
        || in_circle(u, v, 0.27, 0.27, 0.3)
        || in_triangle(u, v, (-0.545, 0.15), (0.545, 0.15), (0.0, -0.58))
}

fn spade(u: f64, v: f64) -> bool {
    // Inverted heart raised above a flared stem.
    in_circle(u, v, -0.27, -0.08, 0.3)
        || in_circle(u, v, 0.27, -0.08, 0.3)
        || in_triangle(u, v, (-0.545, 0.04), (0.545, 0.04), (0.0, 0.62))
        || in_triangle(u, v, (0.0, -0.1), (-0.2, -0.6), (0.2, -0.6))
}

fn club(u: f64, v: f64) -> bool {
    in_circle(u, v, 0.0, 0.3, 0.25)
        || in_circle(u, v, -0.28, -0.1, 0.25)
        || in_circle(u, v, 0.28, -0.1, 0.25)
        || in_circle(u, v, 0.0, 0.02, 0.14)
        || in_triangle(u, v, (0.0, 0.0), (-0.18, -0.6), (0.18, -0.6))
}

fn diamond(u: f64, v: f64) -> bool {
    u.abs() / 0.42 + v.abs() / 0.6 <= 1.0
}

/// Binary base glyph of a suit, foreground 1 on background 0.
pub fn render_suit_glyph(suit: Suit) -> CardImage {
    let shape: fn(f64, f64) -> bool = match suit {
        Suit::Clubs => club,
        Suit::Spades => spade,
        Suit::Hearts => heart,
        Suit::Diamonds => diamond,
    };
    let half = CARD_SIZE as f64 / 2.0;
    let mut img = vec![0.0; CARD_PIXELS];
    for y in 0..CARD_SIZE {
        for x in 0..CARD_SIZE {
            let u = (x as f64 + 0.5 - half) / half;
            let v = (half - (y as f64 + 0.5)) / half;
            if shape(u, v) {
                img[y * CARD_SIZE + x] = 1.0;
            }
        }
    }
    img
}

fn pixel(img: &[f64], x: isize, y: isize) -> f64 {
    let n = CARD_SIZE as isize;
    if x < 0 || y < 0 || x >= n || y >= n {
        0.0
    } else {
        img[(y * n + x) as usize]
    }
}

/// Applies rotation, shear and translation about the image center.
///
/// Each output pixel is inverse-mapped into the source, sampled bilinearly
/// (reads outside the image are background) and thresholded at 0.5.
pub fn affine_transform(image: &[f64], angle: f64, shear: f64, tx: f64, ty: f64) -> CardImage {
    assert_eq!(image.len(), CARD_PIXELS, "card image must be 48x48");
    let (s, c) = angle.to_radians().sin_cos();
    let k = shear.to_radians().tan();
    // y points down, so a visually counter-clockwise turn is [[c, s], [-s, c]].
    let r = [[c, s], [-s, c]];
    let sh = [[1.0, k], [k, 1.0]];
    let a = [
        [
            sh[0][0] * r[0][0] + sh[0][1] * r[1][0],
            sh[0][0] * r[0][1] + sh[0][1] * r[1][1],
        ],
        [
            sh[1][0] * r[0][0] + sh[1][1] * r[1][0],
            sh[1][0] * r[0][1] + sh[1][1] * r[1][1],
        ],
    ];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let center = (CARD_SIZE as f64 - 1.0) / 2.0;
    let (dx, dy) = (tx * CARD_SIZE as f64, ty * CARD_SIZE as f64);

    let mut out = vec![0.0; CARD_PIXELS];
    for y in 0..CARD_SIZE {
        for x in 0..CARD_SIZE {
            let px = x as f64 - center - dx;
            let py = y as f64 - center - dy;
            let sx = inv[0][0] * px + inv[0][1] * py + center;
            let sy = inv[1][0] * px + inv[1][1] * py + center;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (xi, yi) = (x0 as isize, y0 as isize);
            let v = (1.0 - fx) * (1.0 - fy) * pixel(image, xi, yi)
                + fx * (1.0 - fy) * pixel(image, xi + 1, yi)
                + (1.0 - fx) * fy * pixel(image, xi, yi + 1)
                + fx * fy * pixel(image, xi + 1, yi + 1);
            out[y * CARD_SIZE + x] = if v >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    out
}

/// `n` labelled cards. Sample `i` is drawn from stream `i` of the seed, so a
/// smaller dataset is a prefix of a larger one with the same seed.
pub fn generate_card_dataset(n: usize, ranges: &CardRanges, rng: &Rng) -> Vec<CardSample> {
    let glyphs: Vec<CardImage> = Suit::ALL.iter().map(|&s| render_suit_glyph(s)).collect();
    (0..n)
        .map(|i| {
            let mut r = rng.split(i as u64 + 1);
            let suit = Suit::ALL[r.below(4) as usize];
            let angle = r.uniform_range(ranges.angle[0], ranges.angle[1]);
            let shear = r.uniform_range(ranges.shear[0], ranges.shear[1]);
            let tx = r.uniform_range(ranges.translation[0], ranges.translation[1]);
            let ty = r.uniform_range(ranges.translation[0], ranges.translation[1]);
            let image = affine_transform(&glyphs[suit.index()], angle, shear, tx, ty);
            CardSample {
                image,
                suit,
                angle,
                shear,
                tx,
                ty,
            }
        })
        .collect()
}

/// Partitions cards by rotation angle.
pub fn split_by_angle(
    samples: &[CardSample],
    split: &RangeSplit,
) -> Result<Split<CardSample>, SplitError> {
    split.validate_within(-30.0, 30.0)?;
    split.partition(samples, |s| s.angle)
}
