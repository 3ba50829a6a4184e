use proptest::prelude::*;
use rand::Rng;
use safemark_core::codec::{BitMessage, Codec, WatermarkKey};
use safemark_core::grad::ImageTensor;
use safemark_core::rng::rng_from;
use safemark_core::synth::{DatasetSpec, SynthKind};

#[test]
fn default_key_decodes_every_64px_image() {
    let codec = Codec::new(WatermarkKey::new(11), (64, 64, 3)).unwrap();
    let ds = DatasetSpec {
        count: 100,
        height: 64,
        width: 64,
        channels: 3,
        kinds: SynthKind::ALL.to_vec(),
        seed: 5,
    };
    let mut rng = rng_from(5, &[0x77]);
    for (i, x) in ds.generate().unwrap().iter().enumerate() {
        let w = BitMessage::random(&mut rng, codec.b_bits());
        let xw = codec.embed(x, &w).unwrap();
        let soft = codec.decode_soft(&xw).unwrap();
        for (b, (&s, &bit)) in soft.values().iter().zip(w.bits()).enumerate() {
            assert_eq!(s > 0.5, bit, "image {i} bit {b}: soft {s}");
        }
        assert_eq!(codec.accuracy(&xw, &w).unwrap(), 1.0);
    }
}

#[test]
fn complement_difference_is_twice_the_signal() {
    let key = WatermarkKey {
        alpha: 0.01,
        ..WatermarkKey::new(8)
    };
    let codec = Codec::new(key, (16, 16, 3)).unwrap();
    let x = ImageTensor::filled(16, 16, 3, 0.5).unwrap();
    let w = BitMessage::random(&mut rng_from(8, &[]), codec.b_bits());
    let a = codec.embed(&x, &w).unwrap();
    let b = codec.embed(&x, &w.complement()).unwrap();
    let s = codec.signal(&w).unwrap();
    for ((p, q), si) in a.data().iter().zip(b.data()).zip(&s) {
        assert!((p - q - 2.0 * si).abs() < 1e-12);
    }
}

fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = rng_from(seed, &[]);
    ImageTensor::new(h, w, 3, (0..h * w * 3).map(|_| rng.random_range(0.2..0.8)).collect()).unwrap()
}

proptest! {
    #[test]
    fn decode_ignores_constant_offsets(seed in any::<u64>(), offset in -0.15f64..0.15) {
        let codec = Codec::new(WatermarkKey::new(seed), (12, 12, 3)).unwrap();
        let x = random_image(seed, 12, 12);
        let shifted = x.map(|v| v + offset);
        let a = codec.decode_soft(&x).unwrap();
        let b = codec.decode_soft(&shifted).unwrap();
        for (p, q) in a.values().iter().zip(b.values()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_perturbation_is_bounded(seed in any::<u64>(), alpha in 0.0f64..0.1) {
        let key = WatermarkKey { alpha, ..WatermarkKey::new(seed) };
        let codec = Codec::new(key, (12, 12, 3)).unwrap();
        let x = random_image(seed, 12, 12);
        let w = BitMessage::random(&mut rng_from(seed, &[1]), codec.b_bits());
        let xw = codec.embed(&x, &w).unwrap();
        prop_assert!(xw.in_unit_range());
        prop_assert!(xw.mean_abs_diff(&x).unwrap() <= alpha + 1e-12);
    }

    #[test]
    fn same_seed_same_patterns(seed in any::<u64>()) {
        let a = Codec::new(WatermarkKey::new(seed), (6, 6, 1)).unwrap();
        let b = Codec::new(WatermarkKey::new(seed), (6, 6, 1)).unwrap();
        for i in 0..a.b_bits() {
            prop_assert_eq!(a.pattern(i), b.pattern(i));
        }
    }
}
