//! Procedural test images.
//!
//! Every generator draws from a ChaCha8 stream derived from the spec seed,
//! so a spec always yields the same image.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{resample, ImageTensor};
use crate::rng::{derive_seed, rng_from, stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    GradientField,
    GaussianBlobs,
    CheckerTexture,
    BandNoise,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [
        SynthKind::GradientField,
        SynthKind::GaussianBlobs,
        SynthKind::CheckerTexture,
        SynthKind::BandNoise,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SynthKind::GradientField => "gradient-field",
            SynthKind::GaussianBlobs => "gaussian-blobs",
            SynthKind::CheckerTexture => "checker-texture",
            SynthKind::BandNoise => "band-noise",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
}

/// A reproducible dataset: image `i` uses `kinds[i % kinds.len()]` and a
/// seed derived from `(seed, i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kinds: Vec<SynthKind>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    /// 100 RGB images of 32×32 cycling through every kind.
    fn default() -> Self {
        Self {
            count: 100,
            height: 32,
            width: 32,
            channels: 3,
            kinds: SynthKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn specs(&self) -> Result<Vec<SynthSpec>> {
        if self.kinds.is_empty() {
            return Err(Error::invalid("dataset needs at least one image kind"));
        }
        Ok((0..self.count)
            .map(|i| SynthSpec {
                kind: self.kinds[i % self.kinds.len()],
                height: self.height,
                width: self.width,
                channels: self.channels,
                seed: derive_seed(self.seed, &[stream::SYNTH, i as u64]),
            })
            .collect())
    }

    pub fn generate(&self) -> Result<Vec<ImageTensor>> {
        self.specs()?.iter().map(generate).collect()
    }
}

pub fn generate(spec: &SynthSpec) -> Result<ImageTensor> {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    if h == 0 || w == 0 {
        return Err(Error::invalid("synthetic image must be non-empty"));
    }
    if !matches!(c, 1 | 3) {
        return Err(Error::invalid(format!("channels must be 1 or 3, got {c}")));
    }
    let mut rng = rng_from(spec.seed, &[stream::SYNTH]);
    let data = match spec.kind {
        SynthKind::GradientField => gradient_field(&mut rng, h, w, c),
        SynthKind::GaussianBlobs => blobs(&mut rng, h, w, c),
        SynthKind::CheckerTexture => checker(&mut rng, h, w, c),
        SynthKind::BandNoise => band_noise(&mut rng, h, w, c),
    };
    ImageTensor::new(h, w, c, data)
}

/// Linear ramps, one direction per channel, rescaled so the whole image
/// spans exactly `[0, 1]`.
fn gradient_field(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Vec<f64> {
    let dirs: Vec<(f64, f64, f64)> = (0..c)
        .map(|_| {
            let a = rng.random_range(0.0..2.0 * PI);
            (a.cos(), a.sin(), rng.random_range(-0.5..0.5))
        })
        .collect();
    let mut v = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for &(dy, dx, off) in &dirs {
                v.push(dy * y as f64 / h as f64 + dx * x as f64 / w as f64 + off);
            }
        }
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter_mut().for_each(|p| *p = (*p - lo) / (hi - lo));
    } else {
        // A single value has no spread to normalise.
        v.iter_mut().for_each(|p| *p = 0.0);
    }
    v
}

/// Gaussian blobs at radii spanning one pixel to a quarter of the image
/// over a flat coloured background.
fn blobs(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Vec<f64> {
    let bg: Vec<f64> = (0..c).map(|_| rng.random_range(0.3..0.7)).collect();
    let mut v: Vec<f64> = (0..h * w).flat_map(|_| bg.clone()).collect();
    let size = h.min(w) as f64;
    let count = 6 + (h * w) / 128;
    for i in 0..count {
        // Radii cycle through dyadic scales so every frequency band is hit.
        let scale = [0.04, 0.08, 0.16, 0.3][i % 4];
        let r = (scale * size * rng.random_range(0.8..1.25)).max(0.7);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let amp: Vec<f64> = (0..c).map(|_| rng.random_range(-0.3..0.3)).collect();
        for y in 0..h {
            for x in 0..w {
                let d2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * r * r);
                if d2 > 12.0 {
                    continue;
                }
                let g = (-d2).exp();
                for (ch, a) in amp.iter().enumerate() {
                    v[(y * w + x) * c + ch] += a * g;
                }
            }
        }
    }
    v.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    v
}

/// Two-colour checkerboard with a random cell size, lightly modulated by a
/// sinusoid.
fn checker(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Vec<f64> {
    let cell = rng.random_range(2..=6usize);
    let lo: Vec<f64> = (0..c).map(|_| rng.random_range(0.25..0.45)).collect();
    let hi: Vec<f64> = (0..c).map(|_| rng.random_range(0.55..0.75)).collect();
    let freq = rng.random_range(0.5..2.0) * 2.0 * PI / w.max(1) as f64;
    let mut v = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let on = (y / cell + x / cell) % 2 == 0;
            let wave = 0.05 * (freq * (x + y) as f64).sin();
            for ch in 0..c {
                let base = if on { hi[ch] } else { lo[ch] };
                v.push((base + wave).clamp(0.0, 1.0));
            }
        }
    }
    v
}

/// Value noise summed over three octaves (grids of 4, 8 and 16 cells),
/// mapped into `[0.15, 0.85]`.
fn band_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut v = vec![0.0; h * w * c];
    for (grid, amp) in [(4usize, 1.0), (8, 0.6), (16, 0.4)] {
        let g: Vec<f64> = (0..grid * grid * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up = resample::resize(&g, (grid, grid, c), (h, w));
        v.iter_mut().zip(up).for_each(|(a, b)| *a += amp * b);
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    v.iter_mut().for_each(|p| *p = 0.15 + 0.7 * (*p - lo) / span);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: SynthKind, h: usize, w: usize) -> SynthSpec {
        SynthSpec {
            kind,
            height: h,
            width: w,
            channels: 3,
            seed: 42,
        }
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        for kind in SynthKind::ALL {
            let a = generate(&spec(kind, 20, 17)).unwrap();
            assert_eq!(a, generate(&spec(kind, 20, 17)).unwrap());
            assert!(a.in_unit_range(), "{kind:?}");
        }
    }

    #[test]
    fn gradient_field_spans_unit_interval() {
        for (h, w) in [(1, 2), (5, 5), (32, 32), (7, 40)] {
            let x = generate(&spec(SynthKind::GradientField, h, w)).unwrap();
            assert_eq!(x.min(), 0.0);
            assert_eq!(x.max(), 1.0);
        }
    }

    #[test]
    fn dataset_cycles_kinds() {
        let ds = DatasetSpec {
            count: 6,
            ..DatasetSpec::default()
        };
        let specs = ds.specs().unwrap();
        assert_eq!(specs[4].kind, SynthKind::GradientField);
        assert_ne!(specs[0].seed, specs[4].seed);
        assert_eq!(ds.generate().unwrap().len(), 6);
    }

    #[test]
    fn kind_labels_match_serde() {
        for kind in SynthKind::ALL {
            assert_eq!(serde_json::to_string(&kind).unwrap(), format!("\"{}\"", kind.label()));
        }
    }
}
