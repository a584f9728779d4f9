//! Slide rendering and tiling for image-mode bags.
//!
//! A slide is a `CHANNELS×size×size` image on a near-white background. A
//! random subset of `tile`-sized cells holds tissue, each cell textured by
//! its hidden pattern. Tiling uses a square grid shifted by a random offset
//! and keeps tiles whose mean intensity is below the foreground threshold.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Bag, BagRecipe, PatternSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
const NO_TISSUE: u8 = u8::MAX;
const BACKGROUND: f32 = 0.97;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat,
    Stripes,
    Blobs,
    Checker,
}

impl Texture {
    pub fn for_index(i: usize) -> Self {
        [Texture::Flat, Texture::Stripes, Texture::Blobs, Texture::Checker][i % 4]
    }

    /// Texture value in [0, 1] at pixel (y, x).
    fn at(self, y: usize, x: usize) -> f32 {
        use std::f32::consts::TAU;
        match self {
            Texture::Flat => 0.5,
            Texture::Stripes => 0.5 + 0.5 * (TAU * x as f32 / 6.0).sin(),
            Texture::Blobs => 0.5 + 0.5 * (TAU * x as f32 / 16.0).sin() * (TAU * y as f32 / 16.0).sin(),
            Texture::Checker => ((x / 4 + y / 4) % 2) as f32,
        }
    }
}

pub fn intensity_for_index(i: usize) -> f32 {
    0.7 - 0.12 * (i % 4) as f32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    /// Side of the square slide in pixels.
    pub slide: usize,
    /// Side of a square tile in pixels.
    pub tile: usize,
    /// Tiles with mean intensity below this are foreground.
    pub fg_threshold: f32,
    /// Range of the share of cells holding tissue.
    pub tissue_fraction: (f64, f64),
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            slide: 256,
            tile: 32,
            fg_threshold: 0.85,
            tissue_fraction: (0.4, 0.8),
        }
    }
}

impl ImageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || self.slide < self.tile || !self.slide.is_multiple_of(self.tile) {
            return Err(Error::Config(format!("slide {} must be a positive multiple of tile {}", self.slide, self.tile)));
        }
        let (lo, hi) = self.tissue_fraction;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("tissue_fraction must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// A rendered slide with its hidden pixel-level pattern map.
#[derive(Clone, Debug)]
pub struct Slide {
    pub name: String,
    pub size: usize,
    pub tile: usize,
    pub threshold: f32,
    /// Channel-major `[C×size×size]` intensities in [0, 1].
    pub pixels: Vec<f32>,
    /// Pattern id per pixel, `u8::MAX` where there is no tissue.
    pub pattern_map: Vec<u8>,
    /// Pattern id of every tissue cell; the slide label follows from these.
    pub region_patterns: Vec<usize>,
}

impl Slide {
    /// A slide with no tissue at all.
    pub fn blank(name: &str, size: usize, tile: usize, threshold: f32) -> Self {
        Self {
            name: name.to_string(),
            size,
            tile,
            threshold,
            pixels: vec![BACKGROUND; CHANNELS * size * size],
            pattern_map: vec![NO_TISSUE; size * size],
            region_patterns: Vec::new(),
        }
    }

    /// Paint one tile-sized cell with a pattern.
    pub fn paint_cell(&mut self, cy: usize, cx: usize, pattern: &PatternSpec, rng: &mut impl Rng) {
        let noise = Normal::new(0.0f32, 0.03).expect("positive std");
        let plane = self.size * self.size;
        for y in cy * self.tile..(cy + 1) * self.tile {
            for x in cx * self.tile..(cx + 1) * self.tile {
                let t = pattern.texture.at(y, x);
                let p = y * self.size + x;
                self.pattern_map[p] = pattern.id as u8;
                for c in 0..CHANNELS {
                    let v = pattern.intensity - 0.05 * c as f32 + 0.2 * (t - 0.5) + noise.sample(rng);
                    self.pixels[c * plane + p] = v.clamp(0.0, 1.0);
                }
            }
        }
    }

    /// Top-left corners of the grid tiles for an offset.
    pub fn grid(&self, offset: usize) -> Vec<(usize, usize)> {
        let n = self.size.saturating_sub(offset) / self.tile;
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (offset + i * self.tile, offset + j * self.tile)))
            .collect()
    }

    fn tile_mean(&self, y0: usize, x0: usize) -> f32 {
        let plane = self.size * self.size;
        let mut total = 0.0;
        for c in 0..CHANNELS {
            for y in y0..y0 + self.tile {
                let row = c * plane + y * self.size;
                total += self.pixels[row + x0..row + x0 + self.tile].iter().sum::<f32>();
            }
        }
        total / (CHANNELS * self.tile * self.tile) as f32
    }

    /// Majority tissue pattern in a tile (ties toward the higher id).
    fn tile_pattern(&self, y0: usize, x0: usize) -> usize {
        let mut counts = [0usize; 256];
        for y in y0..y0 + self.tile {
            for &p in &self.pattern_map[y * self.size + x0..y * self.size + x0 + self.tile] {
                if p != NO_TISSUE {
                    counts[p as usize] += 1;
                }
            }
        }
        (0..255).max_by_key(|&p| (counts[p], p)).filter(|&p| counts[p] > 0).unwrap_or(0)
    }

    /// Foreground tile corners for an offset.
    pub fn foreground(&self, offset: usize) -> Vec<(usize, usize)> {
        self.grid(offset).into_iter().filter(|&(y, x)| self.tile_mean(y, x) < self.threshold).collect()
    }

    /// Foreground tiles as `[K×C×t×t]`, uniformly subsampled to at most `k_max`.
    pub fn tiles(&self, offset: usize, k_max: Option<usize>, rng: &mut impl Rng) -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut corners = self.foreground(offset);
        if corners.is_empty() {
            return Err(Error::Data(format!("slide {} has no foreground tiles", self.name)));
        }
        if let Some(k) = k_max.filter(|&k| k < corners.len()) {
            let mut keep = sample(rng, corners.len(), k).into_vec();
            keep.sort_unstable();
            corners = keep.into_iter().map(|i| corners[i]).collect();
        }
        let t = self.tile;
        let plane = self.size * self.size;
        let mut data = Vec::with_capacity(corners.len() * CHANNELS * t * t);
        for &(y0, x0) in &corners {
            for c in 0..CHANNELS {
                for y in y0..y0 + t {
                    let row = c * plane + y * self.size;
                    data.extend_from_slice(&self.pixels[row + x0..row + x0 + t]);
                }
            }
        }
        let patterns = corners.iter().map(|&(y, x)| self.tile_pattern(y, x)).collect();
        Ok((Tensor::new([corners.len(), CHANNELS, t, t], data)?, patterns))
    }
}

pub(super) fn image_bag(recipe: &BagRecipe, patterns: &[PatternSpec], index: usize) -> Result<Bag> {
    let spec = &recipe.image;
    let mut rng = recipe.bag_rng(index);
    let cells_per_side = spec.slide / spec.tile;
    let cells = cells_per_side * cells_per_side;
    let (lo, hi) = spec.tissue_fraction;
    let frac = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let n_tissue = ((frac * cells as f64).round() as usize).clamp(1, cells);
    let mut tissue = sample(&mut rng, cells, n_tissue).into_vec();
    tissue.sort_unstable();
    let region_patterns = recipe.composition(&mut rng, n_tissue);
    let mut slide = Slide::blank(&format!("slide-{index}"), spec.slide, spec.tile, spec.fg_threshold);
    let plane = spec.slide * spec.slide;
    let bg = Normal::new(0.0f32, 0.01).expect("positive std");
    for c in 0..CHANNELS {
        for v in &mut slide.pixels[c * plane..(c + 1) * plane] {
            *v = (BACKGROUND + bg.sample(&mut rng)).min(1.0);
        }
    }
    for (&cell, &id) in tissue.iter().zip(&region_patterns) {
        let pattern = patterns.iter().find(|p| p.id == id).expect("pattern id from recipe");
        slide.paint_cell(cell / cells_per_side, cell % cells_per_side, pattern, &mut rng);
    }
    slide.region_patterns = region_patterns;
    let k = rng.random_range(recipe.k_min..=recipe.k_max);
    let offset = rng.random_range(0..spec.tile);
    let (instances, tile_patterns) = slide.tiles(offset, Some(k), &mut rng)?;
    Ok(Bag {
        id: index,
        label: recipe.label(&slide.region_patterns),
        instances,
        patterns: tile_patterns,
        slide: Some(std::sync::Arc::new(slide)),
    })
}
