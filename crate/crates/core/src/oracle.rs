//! Exact mutual information and decoder statistics over small discrete
//! watermark channels.
//!
//! A [`DiscreteChannel`] holds `p(x | w)` for every message `w` in
//! `{0,1}^B` (rows) and channel symbol `x` in `0..K` (columns), with a uniform
//! prior over messages. Everything here is computed by full enumeration of
//! the `2^B × K` joint table, so it serves as a brute-force oracle for the
//! closed-form bounds in [`crate::bounds`].

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::{acc_to_mi_lower_bound, fano_block_error_lower_bound, h2};
use crate::rng::{rng_from, stream};
use crate::{Error, Result};

pub const MAX_BITS: u32 = 12;
pub const MAX_ALPHABET: usize = 64;

/// Margins at or above `-CERT_TOLERANCE` count as satisfied.
pub const CERT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteChannel {
    b_bits: u32,
    alphabet_size: usize,
    cond: Vec<f64>,
}

impl DiscreteChannel {
    /// Validates rows to within `1e-12` of a distribution, then renormalises.
    pub fn new(b_bits: u32, alphabet_size: usize, mut cond: Vec<f64>) -> Result<Self> {
        if b_bits == 0 || b_bits > MAX_BITS {
            return Err(Error::invalid(format!("B must be in 1..={MAX_BITS}, got {b_bits}")));
        }
        if alphabet_size == 0 || alphabet_size > MAX_ALPHABET {
            return Err(Error::invalid(format!(
                "alphabet size must be in 1..={MAX_ALPHABET}, got {alphabet_size}"
            )));
        }
        let rows = 1usize << b_bits;
        if cond.len() != rows * alphabet_size {
            return Err(Error::invalid(format!(
                "channel needs {rows}x{alphabet_size} entries, got {}",
                cond.len()
            )));
        }
        for (w, row) in cond.chunks_exact_mut(alphabet_size).enumerate() {
            if let Some(v) = row.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::invalid(format!("row {w} has invalid probability {v}")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("row {w} sums to {s}, not 1")));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(Self {
            b_bits,
            alphabet_size,
            cond,
        })
    }

    /// Noiseless channel: symbol `x = w`, `K = 2^B`.
    pub fn identity(b_bits: u32) -> Result<Self> {
        let n = 1usize << b_bits.min(MAX_BITS + 1);
        let mut cond = vec![0.0; n * n];
        for w in 0..n {
            cond[w * n + w] = 1.0;
        }
        Self::new(b_bits, n, cond)
    }

    /// Binary symmetric channel on a single bit.
    pub fn binary_symmetric(flip: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&flip) {
            return Err(Error::invalid(format!("flip probability {flip} outside [0, 1]")));
        }
        Self::new(1, 2, vec![1.0 - flip, flip, flip, 1.0 - flip])
    }

    /// Every message sees the same output distribution.
    pub fn useless(b_bits: u32, row: &[f64]) -> Result<Self> {
        let rows = 1usize << b_bits.min(MAX_BITS + 1);
        Self::new(b_bits, row.len(), row.repeat(rows))
    }

    /// Random rows drawn by normalising independent unit exponentials
    /// (`-ln U`), i.e. a flat Dirichlet per row.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, b_bits: u32, alphabet_size: usize) -> Result<Self> {
        let rows = 1usize << b_bits.min(MAX_BITS + 1);
        let mut cond = Vec::with_capacity(rows * alphabet_size);
        for _ in 0..rows {
            let draws: Vec<f64> = (0..alphabet_size)
                .map(|_| {
                    let u: f64 = 1.0 - rng.random::<f64>();
                    -u.ln()
                })
                .collect();
            let s: f64 = draws.iter().sum();
            cond.extend(draws.iter().map(|d| d / s));
        }
        // Row sums may be off by an ulp; normalise once more before validation.
        for row in cond.chunks_exact_mut(alphabet_size) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Self::new(b_bits, alphabet_size, cond)
    }

    pub fn b_bits(&self) -> u32 {
        self.b_bits
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn messages(&self) -> usize {
        1 << self.b_bits
    }

    #[inline]
    pub fn prob(&self, w: usize, x: usize) -> f64 {
        self.cond[w * self.alphabet_size + x]
    }

    /// Output marginal `p(x)` under the uniform prior.
    pub fn output_marginal(&self) -> Vec<f64> {
        let pw = 1.0 / self.messages() as f64;
        let mut px = vec![0.0; self.alphabet_size];
        for w in 0..self.messages() {
            for (x, p) in px.iter_mut().enumerate() {
                *p += pw * self.prob(w, x);
            }
        }
        px
    }

    /// Post-processes the output by merging symbol `x` into `mapping[x]`.
    pub fn merge_symbols(&self, mapping: &[usize]) -> Result<Self> {
        if mapping.len() != self.alphabet_size {
            return Err(Error::invalid("merge mapping must cover the alphabet"));
        }
        let k2 = mapping.iter().max().map_or(0, |m| m + 1);
        let mut cond = vec![0.0; self.messages() * k2];
        for w in 0..self.messages() {
            for (x, &y) in mapping.iter().enumerate() {
                cond[w * k2 + y] += self.prob(w, x);
            }
        }
        for row in cond.chunks_exact_mut(k2) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Self::new(self.b_bits, k2, cond)
    }
}

/// Deterministic decoding map from channel symbols to message words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoder {
    map: Vec<usize>,
}

impl Decoder {
    pub fn new(channel: &DiscreteChannel, map: Vec<usize>) -> Result<Self> {
        if map.len() != channel.alphabet_size() {
            return Err(Error::invalid(format!(
                "decoder covers {} symbols, channel has {}",
                map.len(),
                channel.alphabet_size()
            )));
        }
        if let Some(w) = map.iter().find(|&&w| w >= channel.messages()) {
            return Err(Error::invalid(format!("decoded word {w} outside message set")));
        }
        Ok(Self { map })
    }

    pub fn identity(channel: &DiscreteChannel) -> Result<Self> {
        Self::new(channel, (0..channel.alphabet_size()).collect())
    }

    pub fn constant(channel: &DiscreteChannel, word: usize) -> Result<Self> {
        Self::new(channel, vec![word; channel.alphabet_size()])
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, channel: &DiscreteChannel) -> Result<Self> {
        let m = channel.messages();
        Self::new(channel, (0..channel.alphabet_size()).map(|_| rng.random_range(0..m)).collect())
    }

    /// Maximum a posteriori decoder; ties resolve to the smallest word.
    pub fn map_estimate(channel: &DiscreteChannel) -> Result<Self> {
        let map = (0..channel.alphabet_size())
            .map(|x| {
                let mut best = 0;
                for w in 1..channel.messages() {
                    if channel.prob(w, x) > channel.prob(best, x) {
                        best = w;
                    }
                }
                best
            })
            .collect();
        Self::new(channel, map)
    }

    pub fn decode(&self, symbol: usize) -> usize {
        self.map[symbol]
    }
}

/// `I(W; X_e)` in bits under the uniform prior.
pub fn exact_mi(channel: &DiscreteChannel) -> f64 {
    let pw = 1.0 / channel.messages() as f64;
    let px = channel.output_marginal();
    let mut mi = 0.0;
    for w in 0..channel.messages() {
        for (x, &pxv) in px.iter().enumerate() {
            let p = channel.prob(w, x);
            if p > 0.0 {
                mi += pw * p * (p / pxv).log2();
            }
        }
    }
    mi.max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecoderStats {
    /// Average over bits of `Pr[W_b' = W_b]`.
    pub bit_acc: f64,
    /// `Pr[W' != W]`.
    pub block_error: f64,
    pub per_bit_acc: Vec<f64>,
}

fn bit(word: usize, b: u32, b_bits: u32) -> usize {
    // Bit 0 is the most significant bit of the word.
    (word >> (b_bits - 1 - b)) & 1
}

pub fn decoder_stats(channel: &DiscreteChannel, decoder: &Decoder) -> Result<DecoderStats> {
    if decoder.map.len() != channel.alphabet_size() {
        return Err(Error::invalid("decoder does not match channel alphabet"));
    }
    let b = channel.b_bits();
    let pw = 1.0 / channel.messages() as f64;
    let mut correct_block = 0.0;
    let mut per_bit = vec![0.0; b as usize];
    for w in 0..channel.messages() {
        for x in 0..channel.alphabet_size() {
            let p = pw * channel.prob(w, x);
            if p == 0.0 {
                continue;
            }
            let wh = decoder.decode(x);
            if wh == w {
                correct_block += p;
            }
            for (i, acc) in per_bit.iter_mut().enumerate() {
                if bit(wh, i as u32, b) == bit(w, i as u32, b) {
                    *acc += p;
                }
            }
        }
    }
    Ok(DecoderStats {
        bit_acc: per_bit.iter().sum::<f64>() / f64::from(b),
        block_error: (1.0 - correct_block).max(0.0),
        per_bit_acc: per_bit,
    })
}

/// `H(W_b | W_b')` for one bit, from the exact joint of the bit pair.
pub fn bit_conditional_entropy(channel: &DiscreteChannel, decoder: &Decoder, b: u32) -> f64 {
    let bits = channel.b_bits();
    let pw = 1.0 / channel.messages() as f64;
    let mut joint = [[0.0f64; 2]; 2]; // [decoded][true]
    for w in 0..channel.messages() {
        for x in 0..channel.alphabet_size() {
            let wh = decoder.decode(x);
            joint[bit(wh, b, bits)][bit(w, b, bits)] += pw * channel.prob(w, x);
        }
    }
    joint
        .iter()
        .map(|row| {
            let m = row[0] + row[1];
            if m <= 0.0 {
                0.0
            } else {
                m * h2((row[1] / m).clamp(0.0, 1.0))
            }
        })
        .sum()
}

/// Margins of the block-error and accuracy-to-MI bounds on one pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certificate {
    pub b_bits: u32,
    pub alphabet_size: usize,
    pub mi: f64,
    pub bit_acc: f64,
    pub block_error: f64,
    pub fano_bound: f64,
    pub accmi_bound: f64,
    /// `block_error - fano_bound`; non-negative when the bound holds.
    pub margin_fano: f64,
    /// `mi - accmi_bound`; non-negative when the bound holds.
    pub margin_accmi: f64,
}

impl Certificate {
    pub fn fano_holds(&self) -> bool {
        self.margin_fano >= -CERT_TOLERANCE
    }

    pub fn accmi_holds(&self) -> bool {
        self.margin_accmi >= -CERT_TOLERANCE
    }
}

/// Computes both margins without judging them.
pub fn bound_margins(channel: &DiscreteChannel, decoder: &Decoder) -> Result<Certificate> {
    let mi = exact_mi(channel);
    let stats = decoder_stats(channel, decoder)?;
    let b = channel.b_bits();
    let fano_bound = fano_block_error_lower_bound(mi, b)?;
    let accmi_bound = acc_to_mi_lower_bound(stats.bit_acc.clamp(0.0, 1.0), b)?;
    Ok(Certificate {
        b_bits: b,
        alphabet_size: channel.alphabet_size(),
        mi,
        bit_acc: stats.bit_acc,
        block_error: stats.block_error,
        fano_bound,
        accmi_bound,
        margin_fano: stats.block_error - fano_bound,
        margin_accmi: mi - accmi_bound,
    })
}

/// Checks block error against the Fano bound and MI against the
/// accuracy-to-MI bound; a violated margin is an error.
pub fn certify_bounds(channel: &DiscreteChannel, decoder: &Decoder) -> Result<Certificate> {
    let cert = bound_margins(channel, decoder)?;
    if !cert.fano_holds() {
        return Err(Error::Certification(format!(
            "block error {} below Fano bound {} (MI {})",
            cert.block_error, cert.fano_bound, cert.mi
        )));
    }
    if !cert.accmi_holds() {
        return Err(Error::Certification(format!(
            "MI {} below accuracy bound {} (bit accuracy {})",
            cert.mi, cert.accmi_bound, cert.bit_acc
        )));
    }
    Ok(cert)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub trial: usize,
    pub bound: &'static str,
    pub b_bits: u32,
    pub alphabet_size: usize,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub trials: usize,
    pub violations: Vec<Violation>,
    pub min_margin_fano: f64,
    pub min_margin_accmi: f64,
}

/// Alphabet sizes used by the randomised certification run.
pub const RANDOM_ALPHABETS: [usize; 3] = [2, 4, 8];

/// Certifies `trials` random channel/decoder pairs. Trial `i` draws
/// `B` uniformly from `1..=max_bits` and `K` from [`RANDOM_ALPHABETS`];
/// even trials use a random decoder, odd trials the MAP decoder. Each trial
/// has its own derived seed, so results do not depend on scheduling.
pub fn verify_random(trials: usize, seed: u64, max_bits: u32) -> Result<VerifyReport> {
    if max_bits == 0 || max_bits > MAX_BITS {
        return Err(Error::invalid(format!("max bits must be in 1..={MAX_BITS}")));
    }
    let certs: Vec<Certificate> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from(seed, &[stream::ORACLE, i as u64]);
            let b = rng.random_range(1..=max_bits);
            let k = RANDOM_ALPHABETS[rng.random_range(0..RANDOM_ALPHABETS.len())];
            let ch = DiscreteChannel::random(&mut rng, b, k)?;
            let dec = if i % 2 == 0 {
                Decoder::random(&mut rng, &ch)?
            } else {
                Decoder::map_estimate(&ch)?
            };
            bound_margins(&ch, &dec)
        })
        .collect::<Result<_>>()?;

    let mut violations = Vec::new();
    for (i, c) in certs.iter().enumerate() {
        if !c.fano_holds() {
            violations.push(Violation {
                trial: i,
                bound: "fano",
                b_bits: c.b_bits,
                alphabet_size: c.alphabet_size,
                margin: c.margin_fano,
            });
        }
        if !c.accmi_holds() {
            violations.push(Violation {
                trial: i,
                bound: "acc_to_mi",
                b_bits: c.b_bits,
                alphabet_size: c.alphabet_size,
                margin: c.margin_accmi,
            });
        }
    }
    let min = |f: fn(&Certificate) -> f64| certs.iter().map(f).fold(f64::INFINITY, f64::min);
    Ok(VerifyReport {
        trials,
        violations,
        min_margin_fano: min(|c| c.margin_fano),
        min_margin_accmi: min(|c| c.margin_accmi),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_channel_carries_b_bits() {
        for b in 1..=4 {
            let ch = DiscreteChannel::identity(b).unwrap();
            assert!((exact_mi(&ch) - f64::from(b)).abs() < 1e-12);
            let s = decoder_stats(&ch, &Decoder::identity(&ch).unwrap()).unwrap();
            assert_eq!((s.bit_acc, s.block_error), (1.0, 0.0));
        }
    }

    #[test]
    fn useless_channel_carries_nothing() {
        let ch = DiscreteChannel::useless(3, &[0.2, 0.5, 0.3]).unwrap();
        assert!(exact_mi(&ch).abs() < 1e-12);
    }

    #[test]
    fn bsc_mi_matches_closed_form() {
        let ch = DiscreteChannel::binary_symmetric(0.1).unwrap();
        let expected = 1.0 - h2(0.1);
        assert!((exact_mi(&ch) - expected).abs() < 1e-12);
        assert!((exact_mi(&ch) - 0.531).abs() < 1e-3);
    }

    #[test]
    fn constant_decoder_guesses() {
        let ch = DiscreteChannel::binary_symmetric(0.3).unwrap();
        let s = decoder_stats(&ch, &Decoder::constant(&ch, 0).unwrap()).unwrap();
        assert!((s.bit_acc - 0.5).abs() < 1e-12);
        assert!((s.block_error - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_channels() {
        assert!(DiscreteChannel::new(1, 2, vec![0.5, 0.6, 0.5, 0.5]).is_err());
        assert!(DiscreteChannel::new(1, 2, vec![1.5, -0.5, 0.5, 0.5]).is_err());
        assert!(DiscreteChannel::new(13, 2, vec![]).is_err());
        assert!(DiscreteChannel::new(1, 65, vec![]).is_err());
        // rounding noise inside 1e-12 is accepted and renormalised
        let ch = DiscreteChannel::new(1, 2, vec![0.5 + 4e-13, 0.5, 0.5, 0.5]).unwrap();
        assert!((ch.prob(0, 0) + ch.prob(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_certificate_is_tight_on_accmi() {
        let ch = DiscreteChannel::identity(3).unwrap();
        let c = certify_bounds(&ch, &Decoder::identity(&ch).unwrap()).unwrap();
        assert_eq!(c.fano_bound, 0.0);
        assert!(c.margin_accmi.abs() < 1e-9);
    }

    #[test]
    fn bsc_map_certificate_is_tight() {
        let ch = DiscreteChannel::binary_symmetric(0.1).unwrap();
        let dec = Decoder::map_estimate(&ch).unwrap();
        let c = certify_bounds(&ch, &dec).unwrap();
        assert!((c.bit_acc - 0.9).abs() < 1e-12);
        assert!(c.margin_accmi.abs() < 1e-9);
    }

    #[test]
    fn random_verification_is_deterministic() {
        let a = verify_random(64, 9, 3).unwrap();
        let b = verify_random(64, 9, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.violations.is_empty());
    }
}
