//! Parametric differentiable editor `E_θ(x, p)` and its frozen reference.
//!
//! Per prompt the editor applies a depthwise `k×k` kernel, a per-channel
//! gain and bias, and adds a low-resolution residual field upsampled to the
//! image size:
//!
//! ```text
//! edit = clamp01(upsample(r) + gain ⊙ conv(x) + bias + ξ · noise)
//! ```
//!
//! All prompts share one [`ParamVector`] with segments named
//! `p{id}.kernel`, `p{id}.gain`, `p{id}.bias` and `p{id}.residual`.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::grad::{ImageTensor, NodeId, ParamVector, Tape};
use crate::rng::{rng_from, stream};
use crate::{Error, Result};

/// Stylisation recipe for the reference editor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptStyle {
    /// Gaussian blur standard deviation in pixels; 0 keeps the delta kernel.
    pub blur_sigma: f64,
    /// Per-channel colour gain; a single value applies to every channel.
    pub gain: Vec<f64>,
    /// Per-channel colour offset; a single value applies to every channel.
    pub bias: Vec<f64>,
    /// Darkening at the corners, added through the residual field.
    pub vignette: f64,
    /// Amplitude of a seeded low-frequency texture in the residual field.
    pub texture: f64,
    /// Editor noise amplitude ξ.
    pub noise: f64,
}

impl Default for PromptStyle {
    fn default() -> Self {
        Self {
            blur_sigma: 0.0,
            gain: vec![1.0],
            bias: vec![0.0],
            vignette: 0.0,
            texture: 0.0,
            noise: 0.0,
        }
    }
}

impl PromptStyle {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    fn validate(&self, label: &str) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("prompt '{label}': {what}")));
        if !(self.blur_sigma >= 0.0) || !self.blur_sigma.is_finite() {
            return bad("blur_sigma must be a finite value >= 0");
        }
        if self.gain.is_empty() || self.bias.is_empty() {
            return bad("gain and bias need at least one value");
        }
        if self.gain.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return bad("gain and bias must be finite");
        }
        if !self.vignette.is_finite() || !self.texture.is_finite() {
            return bad("vignette and texture must be finite");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise must be a finite value >= 0");
        }
        Ok(())
    }

    fn per_channel(values: &[f64], c: usize, label: &str, what: &str) -> Result<Vec<f64>> {
        match values.len() {
            1 => Ok(vec![values[0]; c]),
            n if n == c => Ok(values.to_vec()),
            n => Err(Error::invalid(format!(
                "prompt '{label}': {what} has {n} values for {c} channels"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptEntry {
    pub id: usize,
    pub label: String,
    #[serde(default)]
    pub style: PromptStyle,
}

/// Ordered prompt list; entry `i` must carry id `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTable {
    entries: Vec<PromptEntry>,
}

impl PromptTable {
    pub fn new(entries: Vec<PromptEntry>) -> Result<Self> {
        let t = Self { entries };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::invalid("prompt table is empty"));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.id != i {
                return Err(Error::invalid(format!(
                    "prompt '{}' has id {}, expected {i} (ids are table positions)",
                    e.label, e.id
                )));
            }
            e.style.validate(&e.label)?;
        }
        Ok(())
    }

    /// The desk-scale default: two stylisations whose direct edits land
    /// the watermark accuracy in the degraded band.
    pub fn desk_default() -> Self {
        Self {
            entries: vec![
                PromptEntry {
                    id: 0,
                    label: "blur+sepia".into(),
                    style: PromptStyle {
                        blur_sigma: 1.3,
                        gain: vec![1.0, 0.9, 0.72],
                        bias: vec![0.05, 0.03, 0.0],
                        vignette: 0.08,
                        texture: 0.01,
                        noise: 0.0,
                    },
                },
                PromptEntry {
                    id: 1,
                    label: "soft-focus".into(),
                    style: PromptStyle {
                        blur_sigma: 1.5,
                        gain: vec![0.9],
                        bias: vec![0.06],
                        vignette: 0.0,
                        texture: 0.02,
                        noise: 0.0,
                    },
                },
            ],
        }
    }

    pub fn identity_entry(id: usize) -> PromptEntry {
        PromptEntry {
            id,
            label: "identity".into(),
            style: PromptStyle::default(),
        }
    }

    pub fn entries(&self) -> &[PromptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, prompt: usize) -> Result<&PromptEntry> {
        self.entries
            .get(prompt)
            .ok_or_else(|| Error::invalid(format!("unknown prompt id {prompt}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }
}

/// Shape of the per-prompt parameter blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditorGeometry {
    pub channels: usize,
    pub kernel: usize,
    pub residual: usize,
}

impl EditorGeometry {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            kernel: 5,
            residual: 8,
        }
    }

    fn validate(&self) -> Result<()> {
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::invalid(format!("editor supports 1 or 3 channels, got {}", self.channels)));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.residual == 0 {
            return Err(Error::invalid("residual grid must be non-empty"));
        }
        Ok(())
    }
}

pub fn segment_name(prompt: usize, part: &str) -> String {
    format!("p{prompt}.{part}")
}

/// Parameter layout for `prompts` prompts, all zeros.
pub fn layout(prompts: usize, geom: EditorGeometry) -> Result<ParamVector> {
    let c = geom.channels;
    let k = geom.kernel;
    let r = geom.residual;
    ParamVector::zeros((0..prompts).flat_map(|p| {
        [
            (segment_name(p, "kernel"), c * k * k),
            (segment_name(p, "gain"), c),
            (segment_name(p, "bias"), c),
            (segment_name(p, "residual"), r * r * c),
        ]
    }))
}

/// Normalised 1-D Gaussian taps of odd length `k`; `sigma = 0` is the delta.
pub fn gaussian_taps(sigma: f64, k: usize) -> Vec<f64> {
    let half = (k / 2) as isize;
    if sigma == 0.0 {
        let mut out = vec![0.0; k];
        out[k / 2] = 1.0;
        return out;
    }
    let g: Vec<f64> = (-half..=half)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Separable `k×k` Gaussian kernel, row-major.
pub fn gaussian_kernel(sigma: f64, k: usize) -> Vec<f64> {
    let g = gaussian_taps(sigma, k);
    g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect()
}

/// The editor family together with its frozen reference parameters.
#[derive(Clone, Debug)]
pub struct Editor {
    table: PromptTable,
    geometry: EditorGeometry,
    theta0: ParamVector,
    noise: Vec<f64>,
}

impl Editor {
    /// Builds `θ0`: per prompt a blur kernel, colour cast and a residual field
    /// made of a vignette plus a seeded texture on the coarse grid.
    pub fn reference(table: PromptTable, geometry: EditorGeometry, seed: u64) -> Result<Self> {
        table.validate()?;
        geometry.validate()?;
        let mut theta0 = layout(table.len(), geometry)?;
        let (c, k, r) = (geometry.channels, geometry.kernel, geometry.residual);
        for e in table.entries() {
            let s = &e.style;
            let g = gaussian_kernel(s.blur_sigma, k);
            let kernel = theta0.segment_mut(&segment_name(e.id, "kernel"))?;
            for ch in 0..c {
                kernel[ch * k * k..(ch + 1) * k * k].copy_from_slice(&g);
            }
            let gain = PromptStyle::per_channel(&s.gain, c, &e.label, "gain")?;
            theta0.segment_mut(&segment_name(e.id, "gain"))?.copy_from_slice(&gain);
            let bias = PromptStyle::per_channel(&s.bias, c, &e.label, "bias")?;
            theta0.segment_mut(&segment_name(e.id, "bias"))?.copy_from_slice(&bias);

            let mut rng = rng_from(seed, &[stream::EDITOR, e.id as u64]);
            let centre = (r as f64 - 1.0) / 2.0;
            let reach = (2.0 * centre * centre).sqrt().max(1.0);
            let residual = theta0.segment_mut(&segment_name(e.id, "residual"))?;
            for y in 0..r {
                for x in 0..r {
                    let dy = y as f64 - centre;
                    let dx = x as f64 - centre;
                    let d2 = (dy * dy + dx * dx) / (reach * reach);
                    for ch in 0..c {
                        let tex = if s.texture != 0.0 {
                            s.texture * rng.random_range(-1.0..=1.0)
                        } else {
                            0.0
                        };
                        residual[(y * r + x) * c + ch] = -s.vignette * d2 + tex;
                    }
                }
            }
        }
        Ok(Self {
            noise: table.entries().iter().map(|e| e.style.noise).collect(),
            table,
            geometry,
            theta0,
        })
    }

    pub fn table(&self) -> &PromptTable {
        &self.table
    }

    pub fn geometry(&self) -> EditorGeometry {
        self.geometry
    }

    /// The frozen reference parameters.
    pub fn theta0(&self) -> &ParamVector {
        &self.theta0
    }

    pub fn prompts(&self) -> usize {
        self.table.len()
    }

    /// Records `E_θ(x, prompt)` on the tape. `x` is an `[h, w, c]` node.
    pub fn edit_on_tape(
        &self,
        tape: &mut Tape,
        theta: &ParamVector,
        x: NodeId,
        prompt: usize,
        noise_seed: u64,
    ) -> Result<NodeId> {
        self.table.get(prompt)?;
        if !theta.same_layout(&self.theta0) {
            return Err(Error::invalid("parameter layout does not match the editor"));
        }
        let (h, w, c) = match tape.shape(x) {
            &[h, w, c] if c == self.geometry.channels => (h, w, c),
            s => {
                return Err(Error::Shape {
                    op: "edit",
                    detail: format!("image {s:?} vs editor with {} channels", self.geometry.channels),
                })
            }
        };
        let (k, r) = (self.geometry.kernel, self.geometry.residual);
        let kernel = tape.param(theta, &segment_name(prompt, "kernel"), vec![c, k, k])?;
        let gain = tape.param(theta, &segment_name(prompt, "gain"), vec![c])?;
        let bias = tape.param(theta, &segment_name(prompt, "bias"), vec![c])?;
        let residual = tape.param(theta, &segment_name(prompt, "residual"), vec![r, r, c])?;
        let conv = tape.conv2d_same(x, kernel)?;
        let affine = tape.channel_affine(conv, gain, bias)?;
        let up = tape.upsample(residual, h, w)?;
        let mut out = tape.add(up, affine)?;
        let xi = self.noise[prompt];
        if xi > 0.0 {
            let mut rng = rng_from(noise_seed, &[stream::NOISE, prompt as u64]);
            let noise: Vec<f64> = (0..h * w * c).map(|_| xi * rng.sample::<f64, _>(StandardNormal)).collect();
            let n = tape.constant(vec![h, w, c], noise)?;
            out = tape.add(out, n)?;
        }
        Ok(tape.clamp01(out))
    }

    pub fn edit(&self, theta: &ParamVector, x: &ImageTensor, prompt: usize, noise_seed: u64) -> Result<ImageTensor> {
        let mut tape = Tape::new();
        let node = tape.image(x);
        let out = self.edit_on_tape(&mut tape, theta, node, prompt, noise_seed)?;
        tape.to_image(out)
    }

    /// Direct edit with the frozen reference.
    pub fn edit_reference(&self, x: &ImageTensor, prompt: usize, noise_seed: u64) -> Result<ImageTensor> {
        self.edit(&self.theta0, x, prompt, noise_seed)
    }
}
