//! Hinge-penalised fine-tuning of the editor against its frozen reference.
//!
//! Each step edits watermarked images with the frozen reference (`x_ref`)
//! and the trainable editor (`x_edit`), then minimises
//!
//! ```text
//! L_total = λ_sem · mean|x_ref − x_edit| + λ_wm · max(0, τ − Acc~)
//! ```
//!
//! where `Acc~` is the soft accuracy of the decoder on `x_edit`. The whole
//! minibatch lives on one tape and the hinge acts on the batch-mean soft
//! accuracy, recorded as `clamp01(τ − Acc~)`: for `τ ≤ 1` and `Acc~ ≥ 0` that
//! equals `max(0, τ − Acc~)` and has zero slope whenever `Acc~ ≥ τ`.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{bit_accuracy, harden, soft_accuracy, soft_accuracy_on_tape, BitMessage, Codec};
use crate::editor::Editor;
use crate::grad::{ImageTensor, NodeId, ParamVector, Tape};
use crate::rng::{derive_seed, rng_from, stream};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Multiplies the step size by `gamma` every `step_size` steps.
    Step { step_size: usize, gamma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    AdamLike { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageMode {
    /// A new random message per sample and step.
    Fresh,
    /// One message for the whole run.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub lambda_sem: f64,
    pub lambda_wm: f64,
    pub eta: f64,
    pub schedule: Schedule,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    #[serde(default = "fresh")]
    pub messages: MessageMode,
}

fn fresh() -> MessageMode {
    MessageMode::Fresh
}

impl Default for TrainConfig {
    /// Desk-scale settings for 32×32 images with the default codec.
    fn default() -> Self {
        Self {
            tau: 1.0,
            lambda_sem: 0.45,
            lambda_wm: 1.0,
            eta: 0.1,
            schedule: Schedule::Step {
                step_size: 400,
                gamma: 0.5,
            },
            steps: 1200,
            batch: 16,
            seed: 0,
            optimizer: Optimizer::Sgd,
            messages: MessageMode::Fresh,
        }
    }
}

impl TrainConfig {
    /// The full-scale settings of the original method: τ = 1, λ_sem = 3,
    /// λ_wm = 1, step size 8e-6 grown by 1.3 every step. At desk scale these
    /// barely move the editor; they are kept as an alternative config.
    pub fn full_scale() -> Self {
        Self {
            tau: 1.0,
            lambda_sem: 3.0,
            lambda_wm: 1.0,
            eta: 8e-6,
            schedule: Schedule::Step {
                step_size: 1,
                gamma: 1.3,
            },
            steps: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if !(0.0..=1.0).contains(&self.tau) {
            return fail(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(self.lambda_sem >= 0.0) || !(self.lambda_wm >= 0.0) {
            return fail("lambda weights must be >= 0".into());
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return fail(format!("eta must be > 0, got {}", self.eta));
        }
        if self.batch == 0 {
            return fail("batch must be at least 1".into());
        }
        if let Schedule::Step { step_size, gamma } = self.schedule {
            if step_size == 0 || !(gamma > 0.0) {
                return fail("step schedule needs step_size >= 1 and gamma > 0".into());
            }
        }
        if let Optimizer::AdamLike { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return fail("adam-like needs beta1, beta2 in [0, 1) and eps > 0".into());
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Step size in effect at `step`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.eta,
            Schedule::Step { step_size, gamma } => self.eta * gamma.powi((step / step_size) as i32),
        }
    }
}

/// One row of `steps.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_sem: f64,
    pub loss_wm: f64,
    pub loss_total: f64,
    pub soft_acc: f64,
    pub hard_acc: f64,
    pub hinge_active: bool,
}

/// Mean absolute difference per element.
pub fn semantic_loss(x_ref: &ImageTensor, x_edit: &ImageTensor) -> Result<f64> {
    x_ref.mean_abs_diff(x_edit)
}

/// `max(0, τ − Acc~)`.
pub fn watermark_hinge(soft_acc: f64, tau: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&soft_acc) || !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!(
            "hinge inputs must lie in [0, 1], got soft accuracy {soft_acc} and tau {tau}"
        )));
    }
    Ok((tau - soft_acc).max(0.0))
}

/// A watermarked input ready for editing.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: ImageTensor,
    pub message: BitMessage,
    pub prompt: usize,
    pub noise_seed: u64,
}

/// The loss graph for one minibatch.
pub struct Objective {
    pub tape: Tape,
    pub total: NodeId,
    pub sem: NodeId,
    pub wm: NodeId,
    pub soft_acc: NodeId,
    pub hard_acc: f64,
}

impl Objective {
    pub fn value(&self, node: NodeId) -> f64 {
        self.tape.value(node)[0]
    }

    /// Largest `|∇L_total − λ_sem ∇L_sem|` over parameters.
    pub fn hinge_gradient_gap(&self, theta: &ParamVector, lambda_sem: f64) -> Result<f64> {
        let g_total = self.tape.backward_params(self.total, theta)?;
        let g_sem = self.tape.backward_params(self.sem, theta)?;
        Ok(g_total
            .values()
            .iter()
            .zip(g_sem.values())
            .map(|(t, s)| (t - lambda_sem * s).abs())
            .fold(0.0, f64::max))
    }
}

fn mean_of(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(tape.scalar_mul(acc, 1.0 / nodes.len() as f64))
}

/// Records the full training loss for `samples` on a fresh tape.
pub fn objective(
    editor: &Editor,
    codec: &Codec,
    theta: &ParamVector,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<Objective> {
    if samples.is_empty() {
        return Err(Error::invalid("objective needs at least one sample"));
    }
    let mut tape = Tape::new();
    let mut sems = Vec::with_capacity(samples.len());
    let mut accs = Vec::with_capacity(samples.len());
    let mut hard = 0.0;
    for s in samples {
        let x_ref = editor.edit_reference(&s.image, s.prompt, s.noise_seed)?;
        let x = tape.image(&s.image);
        let r = tape.image(&x_ref);
        let e = editor.edit_on_tape(&mut tape, theta, x, s.prompt, s.noise_seed)?;
        let diff = tape.sub(e, r)?;
        let abs = tape.abs(diff);
        sems.push(tape.mean(abs));
        let soft = codec.decode_on_tape(&mut tape, e)?;
        let decoded = BitMessage::new(tape.value(soft).iter().map(|&v| v > 0.5).collect());
        hard += bit_accuracy(&s.message, &decoded)?;
        accs.push(soft_accuracy_on_tape(&mut tape, soft, &s.message)?);
    }
    let sem = mean_of(&mut tape, &sems)?;
    let soft_acc = mean_of(&mut tape, &accs)?;
    let tau = tape.scalar(cfg.tau);
    let gap = tape.sub(tau, soft_acc)?;
    let wm = tape.clamp01(gap);
    let a = tape.scalar_mul(sem, cfg.lambda_sem);
    let b = tape.scalar_mul(wm, cfg.lambda_wm);
    let total = tape.add(a, b)?;
    Ok(Objective {
        tape,
        total,
        sem,
        wm,
        soft_acc,
        hard_acc: hard / samples.len() as f64,
    })
}

/// First and second moment estimates for the adaptive optimiser.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: ParamVector,
    v: ParamVector,
    t: i32,
}

impl OptimizerState {
    pub fn new(theta: &ParamVector) -> Self {
        Self {
            m: theta.zeros_like(),
            v: theta.zeros_like(),
            t: 0,
        }
    }

    fn apply(&mut self, opt: &Optimizer, theta: &mut ParamVector, grad: &ParamVector, lr: f64) -> Result<()> {
        match *opt {
            Optimizer::Sgd => theta.axpy(-lr, grad),
            Optimizer::AdamLike { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                let (m, v) = (self.m.values_mut(), self.v.values_mut());
                for (i, (p, &g)) in theta.values_mut().iter_mut().zip(grad.values()).enumerate() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
                Ok(())
            }
        }
    }
}

/// What a step produced.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub record: StepRecord,
    /// `max |∇L_total − λ_sem ∇L_sem|`, measured on inactive steps only.
    pub inactive_gradient_gap: Option<f64>,
}

/// One descent step on `theta`.
pub fn train_step(
    editor: &Editor,
    codec: &Codec,
    theta: &mut ParamVector,
    state: &mut OptimizerState,
    samples: &[Sample],
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepOutcome> {
    let obj = objective(editor, codec, theta, samples, cfg)?;
    let record = StepRecord {
        step,
        loss_sem: obj.value(obj.sem),
        loss_wm: obj.value(obj.wm),
        loss_total: obj.value(obj.total),
        soft_acc: obj.value(obj.soft_acc),
        hard_acc: obj.hard_acc,
        hinge_active: obj.value(obj.soft_acc) < cfg.tau,
    };
    if !record.loss_total.is_finite() || !record.soft_acc.is_finite() {
        return Err(Error::NonFinite { step });
    }
    let grad = obj.tape.backward_params(obj.total, theta)?;
    if grad.values().iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { step });
    }
    let gap = if record.hinge_active {
        None
    } else {
        Some(obj.hinge_gradient_gap(theta, cfg.lambda_sem)?)
    };
    state.apply(&cfg.optimizer, theta, &grad, cfg.learning_rate(step))?;
    Ok(StepOutcome {
        record,
        inactive_gradient_gap: gap,
    })
}

/// Minibatch for `step`: images, prompts and messages drawn from the run seed.
pub fn minibatch(
    codec: &Codec,
    dataset: &[ImageTensor],
    prompts: usize,
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<Sample>> {
    let mut rng = rng_from(cfg.seed, &[stream::TRAIN, step as u64]);
    let fixed = BitMessage::random(&mut rng_from(cfg.seed, &[stream::TRAIN, u64::MAX]), codec.b_bits());
    (0..cfg.batch)
        .map(|j| {
            let idx = rng.random_range(0..dataset.len());
            let prompt = rng.random_range(0..prompts);
            let message = match cfg.messages {
                MessageMode::Fresh => BitMessage::random(&mut rng, codec.b_bits()),
                MessageMode::Fixed => fixed.clone(),
            };
            Ok(Sample {
                image: codec.embed(&dataset[idx], &message)?,
                message,
                prompt,
                noise_seed: derive_seed(cfg.seed, &[stream::NOISE, step as u64, j as u64]),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub theta: ParamVector,
    pub records: Vec<StepRecord>,
    /// Largest inactive-step gap; `None` if every step was active.
    pub max_inactive_gradient_gap: Option<f64>,
    pub theta0_fingerprint: String,
}

/// Runs `cfg.steps` descent steps from `θ = θ0`.
pub fn run_training(editor: &Editor, codec: &Codec, dataset: &[ImageTensor], cfg: &TrainConfig) -> Result<RunReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training needs a non-empty dataset"));
    }
    let fingerprint = editor.theta0().fingerprint();
    let mut theta = editor.theta0().clone();
    let mut state = OptimizerState::new(&theta);
    let mut records = Vec::with_capacity(cfg.steps);
    let mut max_gap: Option<f64> = None;
    for step in 0..cfg.steps {
        let samples = minibatch(codec, dataset, editor.prompts(), cfg, step)?;
        let out = train_step(editor, codec, &mut theta, &mut state, &samples, cfg, step)?;
        if let Some(g) = out.inactive_gradient_gap {
            max_gap = Some(max_gap.map_or(g, |m| m.max(g)));
        }
        records.push(out.record);
    }
    if editor.theta0().fingerprint() != fingerprint {
        return Err(Error::invalid("reference editor changed during training"));
    }
    Ok(RunReport {
        theta,
        records,
        max_inactive_gradient_gap: max_gap,
        theta0_fingerprint: fingerprint,
    })
}

/// Evaluation message for image `i`, shared by every prompt.
pub fn eval_message(seed: u64, index: usize, b_bits: usize) -> BitMessage {
    BitMessage::random(&mut rng_from(seed, &[stream::EVAL, index as u64]), b_bits)
}

/// The three images compared for one (prompt, image) pair.
#[derive(Clone, Debug)]
pub struct EditedSample {
    pub prompt: usize,
    pub index: usize,
    pub message: BitMessage,
    pub original: ImageTensor,
    pub mani: ImageTensor,
    pub safemark: ImageTensor,
}

/// Embeds each image with its evaluation message and edits it with both
/// editors under every prompt. Output is ordered prompt-major.
pub fn edited_samples(
    editor: &Editor,
    codec: &Codec,
    theta: &ParamVector,
    dataset: &[ImageTensor],
    seed: u64,
) -> Result<Vec<EditedSample>> {
    let pairs: Vec<(usize, usize)> = (0..editor.prompts())
        .flat_map(|p| (0..dataset.len()).map(move |i| (p, i)))
        .collect();
    pairs
        .into_par_iter()
        .map(|(p, i)| {
            let message = eval_message(seed, i, codec.b_bits());
            let original = codec.embed(&dataset[i], &message)?;
            let noise = derive_seed(seed, &[stream::EVAL, i as u64, p as u64]);
            let mani = editor.edit_reference(&original, p, noise)?;
            let safemark = editor.edit(theta, &original, p, noise)?;
            Ok(EditedSample {
                prompt: p,
                index: i,
                message,
                original,
                mani,
                safemark,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEval {
    pub prompt: String,
    pub original_acc: f64,
    pub mani_acc: f64,
    pub safemark_acc: f64,
    pub safemark_soft_acc: f64,
    pub sem_gap_l1: f64,
    pub psnr_vs_mani: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub original_acc: f64,
    pub mani_acc: f64,
    pub safemark_acc: f64,
    pub safemark_soft_acc: f64,
    pub sem_gap_l1: f64,
    pub psnr_vs_mani: f64,
    pub per_prompt: Vec<PromptEval>,
}

/// Mean in index order, so equal inputs give bit-equal results everywhere.
pub fn ordered_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Accuracy of the frozen editor (Mani) and the trained editor (SafeMark)
/// on freshly embedded images, plus their L1 and PSNR gap.
pub fn evaluate(
    editor: &Editor,
    codec: &Codec,
    theta: &ParamVector,
    dataset: &[ImageTensor],
    seed: u64,
) -> Result<EvalReport> {
    let samples = edited_samples(editor, codec, theta, dataset, seed)?;
    let rows: Vec<[f64; 6]> = samples
        .par_iter()
        .map(|s| {
            let soft = codec.decode_soft(&s.safemark)?;
            Ok([
                codec.accuracy(&s.original, &s.message)?,
                codec.accuracy(&s.mani, &s.message)?,
                bit_accuracy(&s.message, &harden(&soft))?,
                soft_accuracy(&s.message, &soft)?,
                s.safemark.mean_abs_diff(&s.mani)?,
                s.safemark.psnr(&s.mani)?,
            ])
        })
        .collect::<Result<_>>()?;
    let n = dataset.len();
    let per_prompt: Vec<PromptEval> = editor
        .table()
        .entries()
        .iter()
        .enumerate()
        .map(|(p, e)| {
            let block = &rows[p * n..(p + 1) * n];
            let col = |k: usize| ordered_mean(block.iter().map(|r| r[k]));
            PromptEval {
                prompt: e.label.clone(),
                original_acc: col(0),
                mani_acc: col(1),
                safemark_acc: col(2),
                safemark_soft_acc: col(3),
                sem_gap_l1: col(4),
                psnr_vs_mani: col(5),
            }
        })
        .collect();
    let over = |f: fn(&PromptEval) -> f64| ordered_mean(per_prompt.iter().map(f));
    Ok(EvalReport {
        original_acc: over(|p| p.original_acc),
        mani_acc: over(|p| p.mani_acc),
        safemark_acc: over(|p| p.safemark_acc),
        safemark_soft_acc: over(|p| p.safemark_soft_acc),
        sem_gap_l1: over(|p| p.sem_gap_l1),
        psnr_vs_mani: over(|p| p.psnr_vs_mani),
        per_prompt,
    })
}

/// The constraint is met when the final training-set soft accuracy is
/// within 0.01 of `τ`.
pub fn constraint_satisfied(soft_acc: f64, tau: f64) -> bool {
    soft_acc >= tau - 0.01
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::WatermarkKey;
    use crate::editor::{EditorGeometry, PromptTable};
    use crate::synth::DatasetSpec;

    fn setup(h: usize) -> (Editor, Codec, Vec<ImageTensor>) {
        let editor = Editor::reference(PromptTable::desk_default(), EditorGeometry::new(3), 0).unwrap();
        let key = WatermarkKey {
            b_bits: 8,
            ..WatermarkKey::new(1)
        };
        let codec = Codec::new(key, (h, h, 3)).unwrap();
        let ds = DatasetSpec {
            count: 4,
            height: h,
            width: h,
            ..DatasetSpec::default()
        };
        (editor, codec, ds.generate().unwrap())
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(watermark_hinge(1.0, 1.0).unwrap(), 0.0);
        assert!((watermark_hinge(0.95, 1.0).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(watermark_hinge(0.99, 0.9).unwrap(), 0.0);
        assert!(watermark_hinge(1.2, 0.9).is_err());
    }

    #[test]
    fn semantic_loss_examples() {
        let a = ImageTensor::filled(4, 4, 3, 0.3).unwrap();
        let b = ImageTensor::filled(4, 4, 3, 0.55).unwrap();
        assert_eq!(semantic_loss(&a, &a).unwrap(), 0.0);
        assert!((semantic_loss(&a, &b).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = TrainConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), cfg);
        let adam = r#"{"tau":0.9,"lambda_sem":1,"lambda_wm":1,"eta":0.01,
            "schedule":{"kind":"step","step_size":10,"gamma":0.5},"steps":3,"batch":2,"seed":1,
            "optimizer":{"kind":"adam-like","beta1":0.9,"beta2":0.999,"eps":1e-8}}"#;
        let c: TrainConfig = serde_json::from_str(adam).unwrap();
        c.validate().unwrap();
        assert_eq!(c.learning_rate(25), 0.01 * 0.25);
        assert!(serde_json::from_str::<TrainConfig>(&adam.replace("\"seed\"", "\"sed\"")).is_err());
        assert!(TrainConfig { tau: 1.5, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { eta: 0.0, ..cfg }.validate().is_err());
        TrainConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn stationary_start_leaves_theta_unchanged() {
        let (editor, codec, ds) = setup(8);
        let cfg = TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        };
        let mut theta = editor.theta0().clone();
        let mut state = OptimizerState::new(&theta);
        let samples = minibatch(&codec, &ds, editor.prompts(), &cfg, 0).unwrap();
        let out = train_step(&editor, &codec, &mut theta, &mut state, &samples, &cfg, 0).unwrap();
        assert_eq!(out.record.loss_sem, 0.0);
        assert!(!out.record.hinge_active);
        assert_eq!(out.inactive_gradient_gap, Some(0.0));
        assert_eq!(&theta, editor.theta0());
    }

    #[test]
    fn loss_decomposes() {
        let (editor, codec, ds) = setup(8);
        let cfg = TrainConfig {
            steps: 5,
            batch: 2,
            ..TrainConfig::default()
        };
        let run = run_training(&editor, &codec, &ds, &cfg).unwrap();
        assert_eq!(run.records.len(), 5);
        for r in &run.records {
            let lhs = cfg.lambda_sem * r.loss_sem + cfg.lambda_wm * r.loss_wm;
            assert!((lhs - r.loss_total).abs() <= 1e-10);
            assert_eq!(r.hinge_active, r.soft_acc < cfg.tau);
        }
    }

    #[test]
    fn zero_steps_matches_reference() {
        let (editor, codec, ds) = setup(8);
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let run = run_training(&editor, &codec, &ds, &cfg).unwrap();
        assert_eq!(&run.theta, editor.theta0());
        let ev = evaluate(&editor, &codec, &run.theta, &ds, 3).unwrap();
        assert_eq!(ev.safemark_acc, ev.mani_acc);
        assert_eq!(ev.sem_gap_l1, 0.0);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (editor, codec, ds) = setup(8);
        let cfg = TrainConfig::default();
        let mut theta = editor.theta0().clone();
        theta.segment_mut("p1.bias").unwrap()[0] = f64::NAN;
        let mut state = OptimizerState::new(&theta);
        let samples = minibatch(&codec, &ds, editor.prompts(), &cfg, 7).unwrap();
        let samples: Vec<Sample> = samples.into_iter().map(|s| Sample { prompt: 1, ..s }).collect();
        match train_step(&editor, &codec, &mut theta, &mut state, &samples, &cfg, 7) {
            Err(Error::NonFinite { step }) => assert_eq!(step, 7),
            other => panic!("expected non-finite abort, got {:?}", other.map(|o| o.record)),
        }
    }
}
