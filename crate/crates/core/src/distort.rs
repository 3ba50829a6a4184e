//! Post-edit distortions and watermark-failure-rate heatmaps.
//!
//! Every distortion maps a `[0, 1]` image to a `[0, 1]` image of the same
//! geometry. Only additive noise is random, and it takes an explicit seed.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::editor::{gaussian_taps, Editor};
use crate::grad::{resample, ImageTensor, ParamVector};
use crate::rng::{derive_seed, rng_from, stream};
use crate::trainer::{edited_samples, ordered_mean};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistortionSpec {
    /// Counter-clockwise rotation about the centre, `|degrees| ≤ 180`.
    Rotate { degrees: f64 },
    /// Gaussian blur, `sigma` in `[0, 10]` pixels.
    GaussianBlur { sigma: f64 },
    /// Keeps the central `keep` fraction of each side, `keep` in `(0, 1]`.
    CenterCrop { keep: f64 },
    /// Downscale by `scale` in `(0, 1]` and back.
    ResizeCycle { scale: f64 },
    /// `(x − 0.5)(1 + contrast) + 0.5 + brightness`, both in `[−1, 1]`.
    ColorAdjust {
        brightness: f64,
        #[serde(default)]
        contrast: f64,
    },
    /// Gaussian noise, `sigma` in `[0, 1]`.
    AdditiveNoise {
        sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Blockwise DCT quantisation, `quality` in `[1, 100]`.
    JpegLike { quality: u32 },
}

impl DistortionSpec {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, v: f64, ok: bool| {
            if ok && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} is out of range")))
            }
        };
        match *self {
            Self::Rotate { degrees } => range("rotation degrees", degrees, degrees.abs() <= 180.0),
            Self::GaussianBlur { sigma } => range("blur sigma", sigma, (0.0..=10.0).contains(&sigma)),
            Self::CenterCrop { keep } => range("crop keep fraction", keep, keep > 0.0 && keep <= 1.0),
            Self::ResizeCycle { scale } => range("resize scale", scale, scale > 0.0 && scale <= 1.0),
            Self::ColorAdjust { brightness, contrast } => {
                range("brightness", brightness, (-1.0..=1.0).contains(&brightness))?;
                range("contrast", contrast, (-1.0..=1.0).contains(&contrast))
            }
            Self::AdditiveNoise { sigma, .. } => range("noise sigma", sigma, (0.0..=1.0).contains(&sigma)),
            Self::JpegLike { quality } => range("jpeg quality", f64::from(quality), (1..=100).contains(&quality)),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Self::Rotate { degrees } => format!("rotate_{degrees}"),
            Self::GaussianBlur { sigma } => format!("blur_{sigma}"),
            Self::CenterCrop { keep } => format!("crop_{keep}"),
            Self::ResizeCycle { scale } => format!("resize_{scale}"),
            Self::ColorAdjust { brightness, contrast: 0.0 } => format!("color_{brightness:+}"),
            Self::ColorAdjust { brightness, contrast } => format!("color_{brightness:+}_c{contrast:+}"),
            Self::AdditiveNoise { sigma, .. } => format!("noise_{sigma}"),
            Self::JpegLike { quality } => format!("jpeg_{quality}"),
        }
    }
}

/// The default robustness grid.
pub fn default_grid() -> Vec<DistortionSpec> {
    use DistortionSpec::*;
    let mut g = Vec::new();
    g.extend([2.0, 5.0, 10.0].map(|degrees| Rotate { degrees }));
    g.extend([0.5, 1.0, 2.0].map(|sigma| GaussianBlur { sigma }));
    g.extend([0.9, 0.75, 0.6].map(|keep| CenterCrop { keep }));
    g.extend([0.75, 0.5].map(|scale| ResizeCycle { scale }));
    g.extend([0.05, -0.05, 0.15, -0.15].map(|brightness| ColorAdjust {
        brightness,
        contrast: 0.0,
    }));
    g.extend([0.01, 0.03].map(|sigma| AdditiveNoise { sigma, seed: 0 }));
    g.extend([90, 70, 50].map(|quality| JpegLike { quality }));
    g
}

pub fn load_grid(path: &Path) -> Result<Vec<DistortionSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let grid: Vec<DistortionSpec> = serde_json::from_str(&text)?;
    for d in &grid {
        d.validate()?;
    }
    Ok(grid)
}

pub fn apply_distortion(spec: &DistortionSpec, x: &ImageTensor) -> Result<ImageTensor> {
    spec.validate()?;
    let (h, w, c) = x.shape();
    let data = match *spec {
        DistortionSpec::Rotate { degrees } => rotate(x, degrees),
        DistortionSpec::GaussianBlur { sigma } => blur(x, sigma),
        DistortionSpec::CenterCrop { keep } => {
            let ch = ((keep * h as f64).round() as usize).clamp(1, h);
            let cw = ((keep * w as f64).round() as usize).clamp(1, w);
            let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
            let mut crop = Vec::with_capacity(ch * cw * c);
            for y in y0..y0 + ch {
                crop.extend_from_slice(&x.data()[(y * w + x0) * c..(y * w + x0 + cw) * c]);
            }
            resample::resize(&crop, (ch, cw, c), (h, w))
        }
        DistortionSpec::ResizeCycle { scale } => {
            let sh = ((scale * h as f64).round() as usize).max(1);
            let sw = ((scale * w as f64).round() as usize).max(1);
            let small = resample::resize(x.data(), (h, w, c), (sh, sw));
            resample::resize(&small, (sh, sw, c), (h, w))
        }
        DistortionSpec::ColorAdjust { brightness, contrast } => x
            .data()
            .iter()
            .map(|v| (v - 0.5) * (1.0 + contrast) + 0.5 + brightness)
            .collect(),
        DistortionSpec::AdditiveNoise { sigma, seed } => {
            let mut rng = rng_from(seed, &[stream::NOISE]);
            x.data()
                .iter()
                .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect()
        }
        DistortionSpec::JpegLike { quality } => jpeg_like(x, quality),
    };
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageTensor::new(h, w, c, data)
}

fn rotate(x: &ImageTensor, degrees: f64) -> Vec<f64> {
    let (h, w, c) = x.shape();
    let (s, co) = (degrees * PI / 180.0).sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(x.len());
    for y in 0..h {
        for xx in 0..w {
            let (dy, dx) = (y as f64 - cy, xx as f64 - cx);
            // Inverse map: rotate the output position back into the source.
            let sy = cy + co * dy - s * dx;
            let sx = cx + s * dy + co * dx;
            for ch in 0..c {
                out.push(resample::sample_or(x.data(), (h, w, c), sy, sx, ch, 0.5));
            }
        }
    }
    out
}

fn blur(x: &ImageTensor, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return x.data().to_vec();
    }
    let (h, w, c) = x.shape();
    let radius = (3.0 * sigma).ceil() as isize;
    let k = (2 * radius + 1) as usize;
    let taps = gaussian_taps(sigma, k);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (j, t) in taps.iter().enumerate() {
                        let d = j as isize - radius;
                        let (yy, xs) = if horizontal {
                            (y as isize, (xx as isize + d).clamp(0, w as isize - 1))
                        } else {
                            ((y as isize + d).clamp(0, h as isize - 1), xx as isize)
                        };
                        acc += t * src[(yy as usize * w + xs as usize) * c + ch];
                    }
                    dst[(y * w + xx) * c + ch] = acc;
                }
            }
        }
        dst
    };
    let tmp = pass(x.data(), true);
    pass(&tmp, false)
}

/// Standard JPEG luminance quantisation table.
pub const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99., //
];

/// Quality-scaled table: `max(T · s(q) / 100, 1/8)` with the usual
/// `s(q) = 5000/q` below 50 and `200 − 2q` above.
pub fn quant_table(quality: u32) -> [f64; 64] {
    let q = f64::from(quality.clamp(1, 100));
    let s = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    LUMA_TABLE.map(|t| (t * s / 100.0).max(0.125))
}

/// Orthonormal 8-point DCT-II basis, `basis[u][x]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * (((2 * x + 1) as f64) * u as f64 * PI / 16.0).cos();
        }
    }
    b
}

fn jpeg_like(x: &ImageTensor, quality: u32) -> Vec<f64> {
    let (h, w, c) = x.shape();
    let table = quant_table(quality);
    let basis = dct_basis();
    let mut out = x.data().to_vec();
    for ch in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                // Partial edge blocks are padded by replicating the border.
                let mut block = [[0.0; 8]; 8];
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let (yy, xx) = ((by + i).min(h - 1), (bx + j).min(w - 1));
                        *v = x.data()[(yy * w + xx) * c + ch] * 255.0 - 128.0;
                    }
                }
                let mut coef = [[0.0; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for i in 0..8 {
                            for j in 0..8 {
                                s += basis[u][i] * basis[v][j] * block[i][j];
                            }
                        }
                        let q = table[u * 8 + v];
                        coef[u][v] = (s / q).round() * q;
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let (yy, xx) = (by + i, bx + j);
                        if yy >= h || xx >= w {
                            continue;
                        }
                        let mut s = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                s += basis[u][i] * basis[v][j] * coef[u][v];
                            }
                        }
                        out[(yy * w + xx) * c + ch] = (s + 128.0) / 255.0;
                    }
                }
            }
        }
    }
    out
}

/// WFR per prompt (rows) and distortion (columns); column 0 is the
/// undistorted baseline.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeatmapReport {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl HeatmapReport {
    pub const BASELINE: &'static str = "none";

    pub fn column(&self, label: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == label)
    }

    /// Mean over prompts of one column.
    pub fn column_mean(&self, col: usize) -> f64 {
        ordered_mean(self.cells.iter().map(|r| r[col]))
    }
}

/// Edits every image with `theta`, applies each distortion, decodes and
/// reports `1 − mean accuracy`. Noise distortions get a per-image seed
/// derived from their own seed.
pub fn wfr_heatmap(
    editor: &Editor,
    codec: &Codec,
    theta: &ParamVector,
    dataset: &[ImageTensor],
    seed: u64,
    grid: &[DistortionSpec],
) -> Result<HeatmapReport> {
    for d in grid {
        d.validate()?;
    }
    let samples = edited_samples(editor, codec, theta, dataset, seed)?;
    let mut columns = vec![None];
    columns.extend(grid.iter().cloned().map(Some));
    let jobs: Vec<(usize, usize)> = (0..columns.len())
        .flat_map(|d| (0..samples.len()).map(move |s| (d, s)))
        .collect();
    let accs: Vec<f64> = jobs
        .into_par_iter()
        .map(|(d, s)| {
            let sample = &samples[s];
            let distorted = match &columns[d] {
                None => sample.safemark.clone(),
                Some(DistortionSpec::AdditiveNoise { sigma, seed }) => {
                    let per = derive_seed(*seed, &[sample.prompt as u64, sample.index as u64]);
                    apply_distortion(&DistortionSpec::AdditiveNoise { sigma: *sigma, seed: per }, &sample.safemark)?
                }
                Some(spec) => apply_distortion(spec, &sample.safemark)?,
            };
            codec.accuracy(&distorted, &sample.message)
        })
        .collect::<Result<_>>()?;
    let n = dataset.len();
    let per_col = samples.len();
    let cells = (0..editor.prompts())
        .map(|p| {
            (0..columns.len())
                .map(|d| 1.0 - ordered_mean(accs[d * per_col + p * n..d * per_col + (p + 1) * n].iter().copied()))
                .collect()
        })
        .collect();
    Ok(HeatmapReport {
        rows: editor.table().entries().iter().map(|e| e.label.clone()).collect(),
        columns: columns
            .iter()
            .map(|c| c.as_ref().map_or_else(|| HeatmapReport::BASELINE.to_string(), DistortionSpec::label))
            .collect(),
        cells,
    })
}
