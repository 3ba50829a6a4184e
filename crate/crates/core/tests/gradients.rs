use rand::Rng;
use rand_distr::StandardNormal;
use safemark_core::codec::{BitMessage, Codec, WatermarkKey};
use safemark_core::editor::{Editor, EditorGeometry, PromptTable};
use safemark_core::grad::{finite_difference_gradient, NodeId, ParamVector, Tape};
use safemark_core::rng::rng_from;
use safemark_core::synth::{generate, SynthKind, SynthSpec};
use safemark_core::trainer::{objective, Sample, TrainConfig};

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;
const KINK_GUARD: f64 = 1e-3;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL_TOL * analytic.abs().max(numeric.abs()) + ABS_FLOOR
}

struct Miniature {
    editor: Editor,
    codec: Codec,
    theta: ParamVector,
    samples: Vec<Sample>,
    cfg: TrainConfig,
}

fn miniature(seed: u64) -> Miniature {
    let editor = Editor::reference(PromptTable::desk_default(), EditorGeometry::new(3), seed).unwrap();
    let key = WatermarkKey {
        b_bits: 8,
        ..WatermarkKey::new(seed)
    };
    let codec = Codec::new(key, (8, 8, 3)).unwrap();
    let mut rng = rng_from(seed, &[0x6664]);
    let mut theta = editor.theta0().clone();
    for v in theta.values_mut() {
        *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    // One sample per config keeps few `|e − r|` entries near the abs kink.
    let samples = [seed % 2]
        .into_iter()
        .map(|prompt| {
            let img = generate(&SynthSpec {
                kind: SynthKind::BandNoise,
                height: 8,
                width: 8,
                channels: 3,
                seed,
            })
            .unwrap();
            let message = BitMessage::random(&mut rng, 8);
            Sample {
                image: codec.embed(&img, &message).unwrap(),
                message,
                prompt: prompt as usize,
                noise_seed: 0,
            }
        })
        .collect();
    let cfg = TrainConfig {
        tau: 1.0,
        lambda_sem: 1.0,
        lambda_wm: 1.0,
        ..TrainConfig::default()
    };
    Miniature {
        editor,
        codec,
        theta,
        samples,
        cfg,
    }
}

#[test]
fn pipeline_gradient_matches_finite_differences() {
    let mut accepted = 0;
    let mut seed = 0;
    while accepted < 20 {
        assert!(seed < 200, "too many configs rejected near kinks");
        let m = miniature(seed);
        seed += 1;
        let obj = objective(&m.editor, &m.codec, &m.theta, &m.samples, &m.cfg).unwrap();
        if obj.tape.min_kink_distance() <= KINK_GUARD {
            continue;
        }
        let analytic = obj.tape.backward_params(obj.total, &m.theta).unwrap();
        let numeric = finite_difference_gradient(
            |th| {
                let o = objective(&m.editor, &m.codec, th, &m.samples, &m.cfg).unwrap();
                o.value(o.total)
            },
            &m.theta,
            FD_STEP,
        );
        for (i, (a, n)) in analytic.values().iter().zip(numeric.values()).enumerate() {
            assert!(close(*a, *n), "seed {} coord {i}: analytic {a} vs numeric {n}", seed - 1);
        }
        accepted += 1;
    }
}

/// Checks `d(Σ weights ⊙ op(inputs)) / d inputs` against central differences.
fn check_op(
    name: &str,
    shapes: &[Vec<usize>],
    seed: u64,
    build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
) -> bool {
    let mut rng = rng_from(seed, &[0x6f70]);
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| (0..s.iter().product()).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let out_len = {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = shapes
            .iter()
            .zip(&inputs)
            .map(|(s, v)| t.constant(s.clone(), v.clone()).unwrap())
            .collect();
        let out = build(&mut t, &ids);
        t.value(out).len()
    };
    let weights: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eval = |vals: &[Vec<f64>]| -> (Tape, Vec<NodeId>, NodeId) {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| t.variable(s.clone(), v.clone()).unwrap())
            .collect();
        let out = build(&mut t, &ids);
        let shape = t.shape(out).to_vec();
        let w = t.constant(shape, weights.clone()).unwrap();
        let prod = t.mul(out, w).unwrap();
        let f = t.sum(prod);
        (t, ids, f)
    };
    let (tape, ids, f) = eval(&inputs);
    if tape.min_kink_distance() <= KINK_GUARD {
        return false;
    }
    let grads = tape.backward(f).unwrap();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let mut probe = inputs.clone();
            probe[k][i] += FD_STEP;
            let (t_up, _, f_up) = eval(&probe);
            probe[k][i] -= 2.0 * FD_STEP;
            let (t_dn, _, f_dn) = eval(&probe);
            let numeric = (t_up.value(f_up)[0] - t_dn.value(f_dn)[0]) / (2.0 * FD_STEP);
            assert!(
                close(analytic[i], numeric),
                "{name} input {k}[{i}]: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }
    true
}

#[test]
fn every_primitive_matches_finite_differences() {
    type Build = Box<dyn Fn(&mut Tape, &[NodeId]) -> NodeId>;
    let img = vec![4, 5, 3];
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("add", vec![img.clone(), img.clone()], Box::new(|t, x| t.add(x[0], x[1]).unwrap())),
        ("add-scalar", vec![img.clone(), vec![1]], Box::new(|t, x| t.add(x[0], x[1]).unwrap())),
        ("sub", vec![img.clone(), img.clone()], Box::new(|t, x| t.sub(x[0], x[1]).unwrap())),
        ("scalar-mul", vec![img.clone()], Box::new(|t, x| t.scalar_mul(x[0], -1.7))),
        ("mul", vec![img.clone(), img.clone()], Box::new(|t, x| t.mul(x[0], x[1]).unwrap())),
        (
            "conv2d-same",
            vec![img.clone(), vec![3, 3, 3]],
            Box::new(|t, x| t.conv2d_same(x[0], x[1]).unwrap()),
        ),
        (
            "channel-affine",
            vec![img.clone(), vec![3], vec![3]],
            Box::new(|t, x| t.channel_affine(x[0], x[1], x[2]).unwrap()),
        ),
        ("upsample", vec![vec![3, 2, 3]], Box::new(|t, x| t.upsample(x[0], 7, 5).unwrap())),
        ("sigmoid", vec![img.clone()], Box::new(|t, x| t.sigmoid(x[0]))),
        ("clamp01", vec![img.clone()], Box::new(|t, x| t.clamp01(x[0]))),
        ("abs", vec![img.clone()], Box::new(|t, x| t.abs(x[0]))),
        ("square", vec![img.clone()], Box::new(|t, x| t.square(x[0]))),
        (
            "inner-product",
            vec![img.clone(), img.clone()],
            Box::new(|t, x| t.inner_product(x[0], x[1]).unwrap()),
        ),
        ("sum", vec![img.clone()], Box::new(|t, x| t.sum(x[0]))),
        ("mean", vec![img.clone()], Box::new(|t, x| t.mean(x[0]))),
    ];
    for (name, shapes, build) in &cases {
        let checked = (0..40).filter(|&s| check_op(name, shapes, s, build)).count();
        assert!(checked >= 5, "{name}: only {checked} kink-free draws");
    }
}

#[test]
fn backward_is_linear() {
    let m = miniature(3);
    let cfg_a = TrainConfig {
        lambda_sem: 1.0,
        lambda_wm: 0.0,
        ..m.cfg.clone()
    };
    let cfg_b = TrainConfig {
        lambda_sem: 0.0,
        lambda_wm: 1.0,
        ..m.cfg.clone()
    };
    let cfg_ab = TrainConfig {
        lambda_sem: 0.7,
        lambda_wm: -0.3,
        ..m.cfg.clone()
    };
    let grad = |cfg: &TrainConfig| {
        let o = objective(&m.editor, &m.codec, &m.theta, &m.samples, cfg).unwrap();
        o.tape.backward_params(o.total, &m.theta).unwrap()
    };
    let (ga, gb, gab) = (grad(&cfg_a), grad(&cfg_b), grad(&cfg_ab));
    for i in 0..ga.len() {
        let expect = 0.7 * ga.values()[i] - 0.3 * gb.values()[i];
        assert!((gab.values()[i] - expect).abs() <= 1e-10, "coord {i}");
    }
}

#[test]
fn forward_and_backward_are_bit_identical() {
    let run = || {
        let m = miniature(5);
        let o = objective(&m.editor, &m.codec, &m.theta, &m.samples, &m.cfg).unwrap();
        let g = o.tape.backward_params(o.total, &m.theta).unwrap();
        (o.value(o.total).to_bits(), g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
