//! Experiment stages shared by the subcommands and the acceptance suite.

use std::path::Path;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use safemark_core::codec::Codec;
use safemark_core::converge::{phase_tracker, PhaseSummary};
use safemark_core::distort::{wfr_heatmap, DistortionSpec, HeatmapReport};
use safemark_core::editor::Editor;
use safemark_core::grad::{ImageTensor, ParamVector};
use safemark_core::trainer::{constraint_satisfied, evaluate, run_training, EvalReport, RunReport, StepRecord};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::report;

/// Everything a run needs, built once from a validated config.
pub struct Lab {
    pub config: ExperimentConfig,
    pub editor: Editor,
    pub codec: Codec,
    pub dataset: Vec<ImageTensor>,
}

impl Lab {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let dataset = config.dataset_spec().generate().context("stage synth")?;
        Self::with_dataset(config, dataset)
    }

    pub fn with_dataset(config: ExperimentConfig, dataset: Vec<ImageTensor>) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            bail!("dataset is empty");
        }
        let shape = dataset[0].shape();
        if let Some(bad) = dataset.iter().position(|x| x.shape() != shape) {
            bail!("dataset image {bad} has shape {:?}, expected {shape:?}", dataset[bad].shape());
        }
        let mut geometry = config.geometry();
        geometry.channels = shape.2;
        let editor = Editor::reference(config.prompts.clone(), geometry, config.seed).context("building the reference editor")?;
        let codec = Codec::new(config.key(), shape).context("building the codec")?;
        Ok(Self {
            config,
            editor,
            codec,
            dataset,
        })
    }

    pub fn train(&self) -> Result<RunReport> {
        Ok(run_training(&self.editor, &self.codec, &self.dataset, &self.config.train_config())?)
    }

    pub fn evaluate(&self, theta: &ParamVector) -> Result<EvalReport> {
        Ok(evaluate(&self.editor, &self.codec, theta, &self.dataset, self.config.seed)?)
    }

    pub fn heatmap(&self, theta: &ParamVector, grid: &[DistortionSpec]) -> Result<HeatmapReport> {
        Ok(wfr_heatmap(&self.editor, &self.codec, theta, &self.dataset, self.config.seed, grid)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingSummary {
    pub steps: usize,
    pub final_soft_acc: Option<f64>,
    pub final_hard_acc: Option<f64>,
    pub constraint_satisfied: Option<bool>,
    pub first_inactive_step: Option<usize>,
    pub reactivation_count: usize,
    pub max_inactive_gradient_gap: Option<f64>,
    pub theta0_fingerprint: String,
    pub theta_fingerprint: String,
}

impl TrainingSummary {
    pub fn new(run: &RunReport, tau: f64) -> Result<Self> {
        let last = run.records.last();
        let phases = if run.records.is_empty() {
            PhaseSummary {
                first_inactive_step: None,
                reactivation_count: 0,
            }
        } else {
            phase_tracker(&run.records)?
        };
        Ok(Self {
            steps: run.records.len(),
            final_soft_acc: last.map(|r| r.soft_acc),
            final_hard_acc: last.map(|r| r.hard_acc),
            constraint_satisfied: last.map(|r| constraint_satisfied(r.soft_acc, tau)),
            first_inactive_step: phases.first_inactive_step,
            reactivation_count: phases.reactivation_count,
            max_inactive_gradient_gap: run.max_inactive_gradient_gap,
            theta0_fingerprint: run.theta0_fingerprint.clone(),
            theta_fingerprint: run.theta.fingerprint(),
        })
    }

    /// The hinge-inactivity certificate: inactive steps followed the
    /// semantic gradient alone.
    pub fn certified(&self) -> bool {
        self.max_inactive_gradient_gap.is_none_or(|g| g <= 1e-12)
    }
}

/// Original / Mani / SafeMark accuracies for one prompt.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyTable {
    pub prompt: String,
    pub original: f64,
    pub mani: f64,
    pub safemark: f64,
    pub sem_gap_l1: f64,
    pub psnr_vs_mani: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub config_hash: String,
    pub seed: u64,
    pub overall: AccuracyTable,
    pub per_prompt: Vec<AccuracyTable>,
    pub baseline: EvalReport,
    pub trained: EvalReport,
    pub training: TrainingSummary,
    pub heatmap: HeatmapReport,
}

pub struct PipelineRun {
    pub summary: PipelineSummary,
    pub records: Vec<StepRecord>,
    pub theta: ParamVector,
}

fn tables(baseline: &EvalReport, trained: &EvalReport) -> (AccuracyTable, Vec<AccuracyTable>) {
    let overall = AccuracyTable {
        prompt: "all".into(),
        original: baseline.original_acc,
        mani: baseline.mani_acc,
        safemark: trained.safemark_acc,
        sem_gap_l1: trained.sem_gap_l1,
        psnr_vs_mani: trained.psnr_vs_mani,
    };
    let per = baseline
        .per_prompt
        .iter()
        .zip(&trained.per_prompt)
        .map(|(b, t)| AccuracyTable {
            prompt: b.prompt.clone(),
            original: b.original_acc,
            mani: b.mani_acc,
            safemark: t.safemark_acc,
            sem_gap_l1: t.sem_gap_l1,
            psnr_vs_mani: t.psnr_vs_mani,
        })
        .collect();
    (overall, per)
}

/// Baseline evaluation, training, evaluation and the distortion heatmap.
/// With `out` set, each stage persists its artifacts as soon as it ends.
pub fn run_pipeline(lab: &Lab, out: Option<&Path>) -> Result<PipelineRun> {
    let theta0 = lab.editor.theta0();
    info!("baseline evaluation on {} images", lab.dataset.len());
    let baseline = lab.evaluate(theta0).context("stage baseline-eval")?;
    if let Some(dir) = out {
        report::write_json(&dir.join("eval_baseline.json"), &baseline)?;
    }
    info!("training for {} steps", lab.config.train.steps);
    let run = lab.train().context("stage train")?;
    if let Some(dir) = out {
        report::write_steps_csv(&dir.join("steps.csv"), &run.records)?;
        run.theta.save(&dir.join("theta.ckpt")).context("writing theta.ckpt")?;
    }
    let training = TrainingSummary::new(&run, lab.config.train.tau).context("stage phase-report")?;
    info!("evaluating the trained editor");
    let trained = lab.evaluate(&run.theta).context("stage eval")?;
    if let Some(dir) = out {
        report::write_json(&dir.join("eval.json"), &trained)?;
    }
    info!("distortion heatmap over {} distortions", lab.config.distortions.len());
    let heatmap = lab.heatmap(&run.theta, &lab.config.distortions).context("stage distort")?;
    if let Some(dir) = out {
        report::write_heatmap_csv(&dir.join("heatmap.csv"), &heatmap)?;
    }
    let (overall, per_prompt) = tables(&baseline, &trained);
    let summary = PipelineSummary {
        config_hash: lab.config.hash()?,
        seed: lab.config.seed,
        overall,
        per_prompt,
        baseline,
        trained,
        training,
        heatmap,
    };
    if let Some(dir) = out {
        report::write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok(PipelineRun {
        summary,
        records: run.records,
        theta: run.theta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub acc: Option<f64>,
    pub soft_acc: Option<f64>,
    pub sem_gap_l1: Option<f64>,
    pub psnr: Option<f64>,
    pub error: Option<String>,
}

/// Drops repeated τ values, keeping first occurrences in order.
pub fn dedup_taus(taus: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &t in taus {
        if out.contains(&t) {
            warn!("dropping duplicate tau {t}");
        } else {
            out.push(t);
        }
    }
    out
}

/// One training run per τ; a failed run becomes a row with its error.
pub fn sweep_tau(config: &ExperimentConfig, dataset: &[ImageTensor], taus: &[f64]) -> Vec<SweepRow> {
    dedup_taus(taus)
        .into_par_iter()
        .map(|tau| {
            let mut cfg = config.clone();
            cfg.train.tau = tau;
            let outcome = Lab::with_dataset(cfg, dataset.to_vec()).and_then(|lab| {
                let run = lab.train()?;
                lab.evaluate(&run.theta)
            });
            match outcome {
                Ok(r) => SweepRow {
                    tau,
                    acc: Some(r.safemark_acc),
                    soft_acc: Some(r.safemark_soft_acc),
                    sem_gap_l1: Some(r.sem_gap_l1),
                    psnr: Some(r.psnr_vs_mani),
                    error: None,
                },
                Err(e) => SweepRow {
                    tau,
                    acc: None,
                    soft_acc: None,
                    sem_gap_l1: None,
                    psnr: None,
                    error: Some(format!("{e:#}")),
                },
            }
        })
        .collect()
}

/// Nondecreasing within `tol`, comparing each row with every later one.
pub fn monotone_within(values: &[f64], tol: f64) -> bool {
    values
        .iter()
        .enumerate()
        .all(|(i, a)| values[i + 1..].iter().all(|b| *b >= a - tol))
}
