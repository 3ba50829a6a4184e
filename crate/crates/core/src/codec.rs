//! Keyed spread-spectrum watermark: a frozen embedder and a differentiable
//! correlation decoder.
//!
//! Each bit `b` owns a balanced `±1` pattern `P_b` over all `N = H·W·C`
//! elements. Embedding adds `(α/√B) Σ_b (2w_b − 1) P_b` and clamps to
//! `[0, 1]`; decoding reads `σ(β ⟨x − mean(x), P_b⟩ / N)`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{ImageTensor, NodeId, Tape};
use crate::rng::{rng_from, stream};
use crate::{Error, Result};

fn default_bits() -> usize {
    WatermarkKey::DEFAULT_BITS
}
fn default_alpha() -> f64 {
    WatermarkKey::DEFAULT_ALPHA
}
fn default_beta() -> f64 {
    WatermarkKey::DEFAULT_BETA
}

/// Secret key plus codec strength settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkKey {
    pub seed: u64,
    #[serde(default = "default_bits")]
    pub b_bits: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

impl WatermarkKey {
    pub const DEFAULT_BITS: usize = 16;
    pub const DEFAULT_ALPHA: f64 = 0.045;
    pub const DEFAULT_BETA: f64 = 400.0;

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            b_bits: Self::DEFAULT_BITS,
            alpha: Self::DEFAULT_ALPHA,
            beta: Self::DEFAULT_BETA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_bits == 0 {
            return Err(Error::invalid("watermark needs at least one bit"));
        }
        // alpha = 0 is allowed so the embedder can be switched off.
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let key: Self = serde_json::from_str(&text)?;
        key.validate()?;
        Ok(key)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A `B`-bit payload. Bit 0 is the most significant bit of the hex form.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitMessage {
    bits: Vec<bool>,
}

impl BitMessage {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn zeros(b_bits: usize) -> Self {
        Self::new(vec![false; b_bits])
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, b_bits: usize) -> Self {
        Self::new((0..b_bits).map(|_| rng.random::<bool>()).collect())
    }

    /// Parses `ceil(B/4)` hex digits; padding bits above `B` must be zero.
    pub fn from_hex(text: &str, b_bits: usize) -> Result<Self> {
        let digits = b_bits.div_ceil(4);
        let text = text.trim().trim_start_matches("0x");
        if text.len() != digits {
            return Err(Error::invalid(format!(
                "a {b_bits}-bit message needs {digits} hex digits, got {}",
                text.len()
            )));
        }
        let mut all = Vec::with_capacity(digits * 4);
        for ch in text.chars() {
            let d = ch
                .to_digit(16)
                .ok_or_else(|| Error::invalid(format!("'{ch}' is not a hex digit")))?;
            all.extend((0..4).rev().map(|i| d >> i & 1 == 1));
        }
        let pad = digits * 4 - b_bits;
        if all[..pad].iter().any(|&b| b) {
            return Err(Error::invalid(format!("message does not fit in {b_bits} bits")));
        }
        Ok(Self::new(all[pad..].to_vec()))
    }

    pub fn to_hex(&self) -> String {
        let pad = self.bits.len().div_ceil(4) * 4 - self.bits.len();
        let padded: Vec<bool> = std::iter::repeat_n(false, pad).chain(self.bits.iter().copied()).collect();
        padded
            .chunks(4)
            .map(|c| {
                let d = c.iter().fold(0u32, |acc, &b| acc << 1 | u32::from(b));
                char::from_digit(d, 16).unwrap_or('0')
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Bits as `0.0` / `1.0`.
    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(u8::from(b))).collect()
    }

    pub fn complement(&self) -> Self {
        Self::new(self.bits.iter().map(|b| !b).collect())
    }
}

impl fmt::Display for BitMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Post-sigmoid bit estimates in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftBits {
    values: Vec<f64>,
}

impl SoftBits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("soft bit {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Thresholds at 0.5; an exact tie decodes as 0.
pub fn harden(soft: &SoftBits) -> BitMessage {
    BitMessage::new(soft.values.iter().map(|&v| v > 0.5).collect())
}

/// Fraction of matching bits.
pub fn bit_accuracy(w: &BitMessage, decoded: &BitMessage) -> Result<f64> {
    if w.len() != decoded.len() || w.is_empty() {
        return Err(Error::invalid(format!(
            "bit accuracy needs equal non-empty lengths, got {} and {}",
            w.len(),
            decoded.len()
        )));
    }
    let hits = w.bits.iter().zip(&decoded.bits).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / w.len() as f64)
}

/// `(1/B) Σ_b (1 − (ŵ_b − w_b)²)`.
pub fn soft_accuracy(w: &BitMessage, soft: &SoftBits) -> Result<f64> {
    if w.len() != soft.len() || w.is_empty() {
        return Err(Error::invalid(format!(
            "soft accuracy needs equal non-empty lengths, got {} and {}",
            w.len(),
            soft.len()
        )));
    }
    let total: f64 = w
        .as_f64()
        .iter()
        .zip(&soft.values)
        .map(|(t, s)| 1.0 - (s - t) * (s - t))
        .sum();
    Ok(total / w.len() as f64)
}

/// Records `1 − mean((ŵ − w)²)` on the tape; `soft` must have shape `[B]`.
pub fn soft_accuracy_on_tape(tape: &mut Tape, soft: NodeId, w: &BitMessage) -> Result<NodeId> {
    let target = tape.constant(vec![w.len()], w.as_f64())?;
    let diff = tape.sub(soft, target)?;
    let sq = tape.square(diff);
    let mse = tape.mean(sq);
    let one = tape.scalar(1.0);
    tape.sub(one, mse)
}

/// A key bound to an image geometry, holding the expanded patterns.
#[derive(Clone, Debug)]
pub struct Codec {
    key: WatermarkKey,
    geometry: (usize, usize, usize),
    patterns: Arc<[f64]>,
}

const PATTERN_ATTEMPTS: usize = 10_000;

impl Codec {
    /// Expands the key into `B` balanced `±1` patterns for an `h×w×c` image.
    /// Candidates are drawn in a fixed order and a candidate is redrawn
    /// whenever its normalised inner product with an earlier pattern exceeds
    /// `4/√N`, so the bank depends only on the key and geometry.
    pub fn new(key: WatermarkKey, geometry: (usize, usize, usize)) -> Result<Self> {
        key.validate()?;
        let (h, w, c) = geometry;
        let n = h * w * c;
        if n < 2 {
            return Err(Error::invalid(format!("image geometry {geometry:?} is too small")));
        }
        let bound = 4.0 / (n as f64).sqrt();
        let mut rng = rng_from(key.seed, &[stream::PATTERNS, h as u64, w as u64, c as u64]);
        let mut base: Vec<f64> = (0..n).map(|i| if i < n / 2 { -1.0 } else { 1.0 }).collect();
        let mut patterns: Vec<f64> = Vec::with_capacity(n * key.b_bits);
        for b in 0..key.b_bits {
            let mut attempts = 0;
            loop {
                base.shuffle(&mut rng);
                let ok = patterns.chunks_exact(n).all(|p| {
                    let dot: f64 = p.iter().zip(&base).map(|(x, y)| x * y).sum();
                    (dot / n as f64).abs() <= bound
                });
                if ok {
                    break;
                }
                attempts += 1;
                if attempts >= PATTERN_ATTEMPTS {
                    return Err(Error::invalid(format!(
                        "could not draw a near-orthogonal pattern for bit {b} at N = {n}"
                    )));
                }
            }
            patterns.extend_from_slice(&base);
        }
        Ok(Self {
            key,
            geometry,
            patterns: patterns.into(),
        })
    }

    pub fn key(&self) -> &WatermarkKey {
        &self.key
    }

    pub fn b_bits(&self) -> usize {
        self.key.b_bits
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        self.geometry
    }

    fn n(&self) -> usize {
        let (h, w, c) = self.geometry;
        h * w * c
    }

    pub fn pattern(&self, b: usize) -> &[f64] {
        let n = self.n();
        &self.patterns[b * n..(b + 1) * n]
    }

    fn check_image(&self, x: &ImageTensor) -> Result<()> {
        if x.shape() != self.geometry {
            return Err(Error::Shape {
                op: "watermark",
                detail: format!("key geometry {:?} vs image {:?}", self.geometry, x.shape()),
            });
        }
        Ok(())
    }

    /// Unclamped additive signal for message `w`.
    pub fn signal(&self, w: &BitMessage) -> Result<Vec<f64>> {
        if w.len() != self.b_bits() {
            return Err(Error::invalid(format!(
                "message has {} bits, key expects {}",
                w.len(),
                self.b_bits()
            )));
        }
        let amp = self.key.alpha / (self.b_bits() as f64).sqrt();
        let mut s = vec![0.0; self.n()];
        for (b, &bit) in w.bits().iter().enumerate() {
            let sign = if bit { amp } else { -amp };
            for (si, p) in s.iter_mut().zip(self.pattern(b)) {
                *si += sign * p;
            }
        }
        Ok(s)
    }

    pub fn embed(&self, x: &ImageTensor, w: &BitMessage) -> Result<ImageTensor> {
        self.check_image(x)?;
        if !x.in_unit_range() {
            return Err(Error::invalid("embed expects pixel values in [0, 1]"));
        }
        let s = self.signal(w)?;
        let (h, wd, c) = self.geometry;
        let data = x.data().iter().zip(&s).map(|(a, b)| (a + b).clamp(0.0, 1.0)).collect();
        ImageTensor::new(h, wd, c, data)
    }

    /// Records the decoder on `tape`; `x` must be an `[h, w, c]` node and the
    /// result is the `[B]` soft-bit node.
    pub fn decode_on_tape(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.geometry;
        if tape.shape(x) != [h, w, c] {
            return Err(Error::Shape {
                op: "watermark",
                detail: format!("key geometry {:?} vs node {:?}", self.geometry, tape.shape(x)),
            });
        }
        let m = tape.mean(x);
        let centred = tape.sub(x, m)?;
        let corr = tape.inner_products(centred, Arc::clone(&self.patterns), self.b_bits())?;
        let logits = tape.scalar_mul(corr, self.key.beta / self.n() as f64);
        Ok(tape.sigmoid(logits))
    }

    pub fn decode_soft(&self, x: &ImageTensor) -> Result<SoftBits> {
        self.check_image(x)?;
        let mut tape = Tape::new();
        let node = tape.image(x);
        let soft = self.decode_on_tape(&mut tape, node)?;
        SoftBits::new(tape.value(soft).to_vec())
    }

    pub fn decode(&self, x: &ImageTensor) -> Result<BitMessage> {
        Ok(harden(&self.decode_soft(x)?))
    }

    /// Hard bit accuracy of decoding `x` against `w`.
    pub fn accuracy(&self, x: &ImageTensor, w: &BitMessage) -> Result<f64> {
        bit_accuracy(w, &self.decode(x)?)
    }
}
