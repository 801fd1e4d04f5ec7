//! Procedural road tiles: bounded-curvature polylines rasterized at a fixed
//! width over a noisy green-brown background, with occluders stamped on the
//! image only.
//!
//! Sample `i` draws from three independent streams of the dataset seed:
//! `4i` for road geometry, `4i + 1` for texture and `4i + 2` for occluders,
//! so disabling occluders leaves every other pixel unchanged.

use serde::{Deserialize, Serialize};

use super::{Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::rng::{Purpose, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub tile_size: usize,
    /// Inclusive range of roads per tile.
    pub roads: [usize; 2],
    /// Inclusive range of road widths in pixels.
    pub road_width: [usize; 2],
    /// Largest heading change between consecutive segments, radians.
    pub curvature: f64,
    /// Inclusive range of occluder patches per tile.
    pub occluders: [usize; 2],
    /// Inclusive range of occluder side lengths in pixels.
    pub occluder_size: [usize; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tile_size: 64,
            roads: [1, 3],
            road_width: [3, 6],
            curvature: 0.3,
            occluders: [0, 3],
            occluder_size: [3, 7],
            noise_sigma: 0.04,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.tile_size < 16 || self.tile_size % 16 != 0 {
            return Err(Error::Config(format!(
                "synth tile_size {} must be a positive multiple of 16 (divisible by 16)",
                self.tile_size
            )));
        }
        for (name, [lo, hi]) in [
            ("roads", self.roads),
            ("road_width", self.road_width),
            ("occluders", self.occluders),
            ("occluder_size", self.occluder_size),
        ] {
            if lo > hi {
                return Err(Error::Config(format!("synth {name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.roads[0] == 0 || self.road_width[0] == 0 {
            return bad("synth needs at least one road of positive width");
        }
        if self.road_width[1] * 4 > self.tile_size {
            return bad("synth road_width too large for the tile");
        }
        if !(self.curvature >= 0.0 && self.curvature < std::f64::consts::PI) {
            return bad("synth curvature must lie in [0, pi)");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("synth noise_sigma must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Road {
    /// Vertices as (x, y) in pixel units, pixel `(r, c)` centred at `(c + 0.5, r + 0.5)`.
    pub points: Vec<(f64, f64)>,
    pub width: f64,
}

impl Road {
    /// Distance from `p` to the polyline.
    pub fn distance(&self, p: (f64, f64)) -> f64 {
        self.points
            .windows(2)
            .map(|s| segment_distance(p, s[0], s[1]))
            .fold(f64::INFINITY, f64::min)
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Occluder {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub shade: [u8; 3],
}

fn stream(cfg: &SynthConfig, index: u64, part: u64) -> Rng {
    Rng::new(cfg.seed, Purpose::Sample(index * 4 + part))
}

fn draw_road(cfg: &SynthConfig, rng: &mut Rng) -> Road {
    let t = cfg.tile_size as f64;
    let width = rng.int_in(cfg.road_width[0], cfg.road_width[1]) as f64;
    let step = t / 8.0;
    let start = (rng.range(0.15 * t, 0.85 * t), rng.range(0.15 * t, 0.85 * t));
    let heading = rng.range(0.0, std::f64::consts::TAU);
    let margin = 2.0 * step;
    let walk = |mut h: f64, rng: &mut Rng| {
        let mut pts = Vec::new();
        let mut p = start;
        while p.0 > -margin && p.0 < t + margin && p.1 > -margin && p.1 < t + margin && pts.len() < 64 {
            p = (p.0 + step * h.cos(), p.1 + step * h.sin());
            pts.push(p);
            h += rng.range(-cfg.curvature, cfg.curvature);
        }
        pts
    };
    let forward = walk(heading, rng);
    let backward = walk(heading + std::f64::consts::PI, rng);
    let mut points: Vec<_> = backward.into_iter().rev().collect();
    points.push(start);
    points.extend(forward);
    Road { points, width }
}

fn rasterize(size: usize, roads: &[Road]) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            let p = (c as f64 + 0.5, r as f64 + 0.5);
            mask[r * size + c] = roads.iter().any(|road| road.distance(p) <= road.width / 2.0);
        }
    }
    mask
}

/// Road polylines of sample `index`, redrawn until the road fraction lies
/// strictly between 0 and 0.5.
pub fn road_geometry(cfg: &SynthConfig, index: u64) -> (Vec<Road>, Vec<bool>) {
    let mut rng = stream(cfg, index, 0);
    loop {
        let n = rng.int_in(cfg.roads[0], cfg.roads[1]);
        let roads: Vec<Road> = (0..n).map(|_| draw_road(cfg, &mut rng)).collect();
        let mask = rasterize(cfg.tile_size, &roads);
        let frac = mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64;
        if frac > 0.0 && frac < 0.5 {
            return (roads, mask);
        }
    }
}

/// Occluder patches of sample `index`, each centred on a road pixel.
pub fn occluders(cfg: &SynthConfig, index: u64, mask: &[bool]) -> Vec<Occluder> {
    let mut rng = stream(cfg, index, 2);
    let road: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let n = rng.int_in(cfg.occluders[0], cfg.occluders[1]);
    let size = cfg.tile_size;
    (0..n)
        .map(|_| {
            let centre = road[rng.below(road.len())];
            let (h, w) = (
                rng.int_in(cfg.occluder_size[0], cfg.occluder_size[1]),
                rng.int_in(cfg.occluder_size[0], cfg.occluder_size[1]),
            );
            // tree canopy or building shadow
            let shade = if rng.uniform() < 0.5 {
                [rng.int_in(20, 50) as u8, rng.int_in(60, 95) as u8, rng.int_in(20, 45) as u8]
            } else {
                let v = rng.int_in(25, 55) as u8;
                [v, v, v.saturating_add(8)]
            };
            let row = (centre / size).saturating_sub(h / 2).min(size - h);
            let col = (centre % size).saturating_sub(w / 2).min(size - w);
            Occluder {
                row,
                col,
                height: h,
                width: w,
                shade,
            }
        })
        .collect()
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders sample `index` as 8-bit RGB (row-major, interleaved).
pub fn render_rgb8(cfg: &SynthConfig, index: u64, mask: &[bool], with_occluders: bool) -> Vec<u8> {
    let size = cfg.tile_size;
    let mut rng = stream(cfg, index, 1);
    let green = [0.22 + rng.range(-0.03, 0.03), 0.38 + rng.range(-0.05, 0.05), 0.18];
    let brown = [0.46 + rng.range(-0.04, 0.04), 0.37, 0.24 + rng.range(-0.03, 0.03)];
    let gray = rng.range(0.5, 0.65);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let f = std::f64::consts::TAU / size as f64 * rng.range(0.5, 2.5);
            let a = rng.range(0.0, std::f64::consts::TAU);
            (f * a.cos(), f * a.sin(), rng.range(0.0, std::f64::consts::TAU))
        })
        .collect();
    let mut rgb = vec![0u8; size * size * 3];
    for r in 0..size {
        for c in 0..size {
            let i = r * size + c;
            let field = waves
                .iter()
                .map(|&(fx, fy, ph)| (fx * c as f64 + fy * r as f64 + ph).sin())
                .sum::<f64>()
                / 6.0
                + 0.5;
            for ch in 0..3 {
                let base = if mask[i] {
                    gray + [0.0, 0.0, 0.02][ch]
                } else {
                    green[ch] + (brown[ch] - green[ch]) * field
                };
                rgb[i * 3 + ch] = quantize(base + cfg.noise_sigma * rng.normal());
            }
        }
    }
    if with_occluders {
        for o in occluders(cfg, index, mask) {
            for r in o.row..o.row + o.height {
                for c in o.col..o.col + o.width {
                    rgb[(r * size + c) * 3..(r * size + c) * 3 + 3].copy_from_slice(&o.shade);
                }
            }
        }
    }
    rgb
}

/// Converts interleaved 8-bit RGB to a `[3, H, W]` tensor of `v / 255`.
pub fn rgb8_to_tensor(rgb: &[u8], h: usize, w: usize) -> Tensor<f32> {
    let plane = h * w;
    Tensor::from_fn([3, h, w], |i| rgb[(i % plane) * 3 + i / plane] as f32 / 255.0)
}

pub fn sample_id(index: u64) -> String {
    format!("synth_{index:05}")
}

/// Deterministic sample `index` of the dataset described by `cfg`.
pub fn synth_sample(cfg: &SynthConfig, index: u64) -> Sample {
    synth_sample_with(cfg, index, true)
}

pub fn synth_sample_with(cfg: &SynthConfig, index: u64, with_occluders: bool) -> Sample {
    let size = cfg.tile_size;
    let (_, mask) = road_geometry(cfg, index);
    let rgb = render_rgb8(cfg, index, &mask, with_occluders);
    Sample {
        id: sample_id(index),
        split: Split::of_index(index),
        image: rgb8_to_tensor(&rgb, size, size),
        mask: BinaryMask::new([size, size], mask).expect("mask sized to tile"),
    }
}
