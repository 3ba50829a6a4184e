use std::f64::consts::PI;

use proptest::prelude::*;
use rand::Rng;
use safemark_core::grad::ImageTensor;
use safemark_core::ppm;
use safemark_core::rng::rng_from;
use safemark_core::synth::{generate, DatasetSpec, SynthKind, SynthSpec};
use safemark_core::trainer::semantic_loss;

/// Fraction of AC power per radial band, from a naive 2-D DFT of channel 0.
fn band_fractions(x: &ImageTensor) -> [f64; 3] {
    let (h, w, _) = x.shape();
    let mut grey: Vec<f64> = (0..h * w).map(|i| x.get(i / w, i % w, 0)).collect();
    let mean = grey.iter().sum::<f64>() / grey.len() as f64;
    grey.iter_mut().for_each(|v| *v -= mean);
    let mut bands = [0.0; 3];
    let mut total = 0.0;
    for ky in 0..h {
        for kx in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let ph = -2.0 * PI * (ky as f64 * y as f64 / h as f64 + kx as f64 * xx as f64 / w as f64);
                    re += grey[y * w + xx] * ph.cos();
                    im += grey[y * w + xx] * ph.sin();
                }
            }
            let fy = ky.min(h - ky) as f64 / h as f64;
            let fx = kx.min(w - kx) as f64 / w as f64;
            let r = (fy * fy + fx * fx).sqrt();
            if r == 0.0 {
                continue;
            }
            let p = re * re + im * im;
            total += p;
            let band = if r <= 0.125 { 0 } else if r <= 0.25 { 1 } else { 2 };
            bands[band] += p;
        }
    }
    bands.map(|b| b / total)
}

#[test]
fn blobs_have_energy_in_every_band() {
    for seed in 0..4 {
        let x = generate(&SynthSpec {
            kind: SynthKind::GaussianBlobs,
            height: 32,
            width: 32,
            channels: 3,
            seed,
        })
        .unwrap();
        let bands = band_fractions(&x);
        assert!(bands.iter().all(|&b| b > 1e-3), "seed {seed}: {bands:?}");
    }
}

#[test]
fn semantic_loss_matches_naive_sum() {
    let mut rng = rng_from(9, &[]);
    let (h, w, c) = (7, 5, 3);
    let a = ImageTensor::new(h, w, c, (0..h * w * c).map(|_| rng.random()).collect()).unwrap();
    let b = ImageTensor::new(h, w, c, (0..h * w * c).map(|_| rng.random()).collect()).unwrap();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                total += (a.get(y, x, ch) - b.get(y, x, ch)).abs();
            }
        }
    }
    let naive = total / (h * w * c) as f64;
    assert!((semantic_loss(&a, &b).unwrap() - naive).abs() < 1e-14);
}

#[test]
fn datasets_reproduce_element_for_element() {
    let spec = DatasetSpec {
        count: 12,
        ..DatasetSpec::default()
    };
    assert_eq!(spec.generate().unwrap(), spec.generate().unwrap());
}

#[test]
fn ppm_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let x = DatasetSpec::default().generate().unwrap().remove(3);
    let path = dir.path().join("img.ppm");
    ppm::write_ppm(&x, &path).unwrap();
    let y = ppm::read_ppm(&path).unwrap();
    assert!(x.max_abs_diff(&y).unwrap() <= 1.0 / 255.0 + 1e-12);
}

proptest! {
    #[test]
    fn encode_decode_within_quantisation(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, grey in any::<bool>()) {
        let c = if grey { 1 } else { 3 };
        let mut rng = rng_from(seed, &[]);
        let x = ImageTensor::new(h, w, c, (0..h * w * c).map(|_| rng.random()).collect()).unwrap();
        let y = ppm::decode(&ppm::encode(&x)).unwrap();
        prop_assert!(x.max_abs_diff(&y).unwrap() <= 1.0 / 255.0 + 1e-12);
    }

    #[test]
    fn every_kind_stays_in_unit_range(seed in any::<u64>(), h in 1usize..24, w in 1usize..24) {
        for kind in SynthKind::ALL {
            let x = generate(&SynthSpec { kind, height: h, width: w, channels: 3, seed }).unwrap();
            prop_assert!(x.in_unit_range());
        }
    }
}
