//! Argument parsing and the subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use safemark_core::bounds::{self, BoundReport};
use safemark_core::converge::{self, ConvergenceInstance, FamilyFile, FamilySpec};
use safemark_core::distort::load_grid;
use safemark_core::grad::{ImageTensor, ParamVector};
use safemark_core::oracle::{self, Decoder, DiscreteChannel, VerifyReport, CERT_TOLERANCE};
use safemark_core::ppm;
use safemark_core::synth::DatasetSpec;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::lab::{self, Lab, TrainingSummary};
use crate::report::{self, Manifest};

#[derive(Debug, Parser)]
#[command(name = "safemark-lab", version, about = "Desk-scale watermark-preserving editing experiments")]
pub struct Cli {
    /// Experiment config (JSON); defaults apply to missing sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for reports.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Only errors on stderr and nothing on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset as PPM/PGM files.
    Synth {
        /// Dataset spec (JSON); defaults to the config's dataset.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Evaluate closed-form information bounds as CSV.
    Bounds(BoundsArgs),
    /// Brute-force bound certification on small channels.
    Oracle {
        #[command(subcommand)]
        action: OracleAction,
    },
    /// Fine-tune the editor with the hinge objective.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Original / Mani / SafeMark accuracies for a checkpoint.
    Evaluate {
        /// Editor checkpoint; the frozen reference when omitted.
        #[arg(long)]
        theta: Option<PathBuf>,
        /// Directory of PPM/PGM images; the config's synthetic set when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Watermark failure rates under post-edit distortions.
    Distort {
        #[arg(long)]
        theta: Option<PathBuf>,
        /// Distortion list (JSON); the config's grid when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Finite-step convergence checks and hinge phase tracking.
    Converge {
        /// Family file: generation settings or explicit instances.
        #[arg(long)]
        family: Option<PathBuf>,
        /// A steps.csv from a training run to phase-track.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// One training run per τ.
    SweepTau {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.8, 0.9, 1.0])]
        taus: Vec<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Synthesis, baseline evaluation, training, evaluation, heatmap and
    /// phase report in one run directory.
    Pipeline {
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum OracleAction {
    Verify {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 3)]
        max_bits: u32,
    },
}

#[derive(Debug, Default, Args)]
pub struct BoundsArgs {
    /// The worked example at average accuracy 0.9 and B = 64.
    #[arg(long)]
    pub paper_remark: bool,
    /// Binary entropy of a probability.
    #[arg(long)]
    pub h2: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub bits: Option<u32>,
    /// With --tau and --bits: the capacity bound.
    #[arg(long)]
    pub capacity: bool,
    /// With --tau and --bits: the soft-accuracy MI bound.
    #[arg(long)]
    pub soft_mi: bool,
    /// With --bits: accuracy-to-MI bound at this accuracy.
    #[arg(long)]
    pub acc: Option<f64>,
    /// With --bits: Fano block-error bound at this MI (bits).
    #[arg(long)]
    pub fano: Option<f64>,
    /// With --bits: block error of independent bits at this accuracy.
    #[arg(long)]
    pub iid: Option<f64>,
    /// Hard accuracy implied by a soft accuracy.
    #[arg(long)]
    pub calibration: Option<f64>,
}

#[derive(Debug, Serialize)]
struct BoundRow {
    bound_name: &'static str,
    #[serde(rename = "B")]
    b: u32,
    input: f64,
    value: f64,
    vacuous: bool,
}

impl From<BoundReport> for BoundRow {
    fn from(r: BoundReport) -> Self {
        Self {
            bound_name: r.bound_name,
            b: r.b_bits,
            input: r.input_quantity,
            value: r.bound_value,
            vacuous: r.vacuous,
        }
    }
}

pub fn bound_rows(args: &BoundsArgs) -> Result<Vec<BoundReport>> {
    let mut rows = Vec::new();
    if args.paper_remark {
        rows.extend(bounds::remark_quartet()?);
    }
    if let Some(p) = args.h2 {
        rows.push(bounds::binary_entropy_report(p)?);
    }
    let need_bits = |what: &str| args.bits.with_context(|| format!("{what} needs --bits"));
    if let Some(tau) = args.tau {
        if !args.capacity && !args.soft_mi {
            bail!("--tau needs --capacity or --soft-mi");
        }
        if args.capacity {
            rows.push(bounds::tau_capacity_report(tau, need_bits("--capacity")?)?);
        }
        if args.soft_mi {
            rows.push(bounds::soft_mi_report(tau, need_bits("--soft-mi")?)?);
        }
    } else if args.capacity || args.soft_mi {
        bail!("--capacity and --soft-mi need --tau");
    }
    if let Some(a) = args.acc {
        rows.push(bounds::acc_to_mi_report(a, need_bits("--acc")?)?);
    }
    if let Some(mi) = args.fano {
        rows.push(bounds::fano_report(mi, need_bits("--fano")?)?);
    }
    if let Some(a) = args.iid {
        rows.push(bounds::iid_block_error_report(a, need_bits("--iid")?)?);
    }
    if let Some(s) = args.calibration {
        rows.push(bounds::calibration_report(s)?);
    }
    if rows.is_empty() {
        bail!("no bound selected; try --paper-remark or --h2 0.5");
    }
    Ok(rows)
}

pub fn bounds_csv(args: &BoundsArgs) -> Result<String> {
    let rows: Vec<BoundRow> = bound_rows(args)?.into_iter().map(BoundRow::from).collect();
    report::csv_string(&rows)
}

#[derive(Debug, Serialize)]
pub struct EqualityCheck {
    pub name: &'static str,
    pub value: f64,
    pub expected: f64,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
pub struct OracleReport {
    pub seed: u64,
    pub max_bits: u32,
    #[serde(flatten)]
    pub random: VerifyReport,
    pub equality_checks: Vec<EqualityCheck>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.random.violations.is_empty() && self.equality_checks.iter().all(|c| c.passed)
    }
}

fn equality(name: &'static str, value: f64, expected: f64) -> EqualityCheck {
    EqualityCheck {
        name,
        value,
        expected,
        passed: (value - expected).abs() <= CERT_TOLERANCE,
    }
}

/// Randomised certification plus the cases where a bound is tight.
pub fn oracle_verify(trials: usize, seed: u64, max_bits: u32) -> Result<OracleReport> {
    let random = oracle::verify_random(trials, seed, max_bits)?;
    let id = DiscreteChannel::identity(3)?;
    let id_cert = oracle::bound_margins(&id, &Decoder::identity(&id)?)?;
    let bsc = DiscreteChannel::binary_symmetric(0.1)?;
    let bsc_cert = oracle::bound_margins(&bsc, &Decoder::map_estimate(&bsc)?)?;
    let bsc_capacity = 1.0 - bounds::binary_entropy(0.1)?;
    Ok(OracleReport {
        seed,
        max_bits,
        random,
        equality_checks: vec![
            equality("identity_mi", id_cert.mi, 3.0),
            equality("identity_accmi_margin", id_cert.margin_accmi, 0.0),
            equality("identity_block_error", id_cert.block_error, 0.0),
            equality("bsc_map_bit_acc", bsc_cert.bit_acc, 0.9),
            equality("bsc_mi", bsc_cert.mi, bsc_capacity),
            equality("bsc_map_accmi_margin", bsc_cert.margin_accmi, 0.0),
        ],
    })
}

#[derive(Debug, Serialize)]
struct ConvRow {
    instance_id: usize,
    #[serde(rename = "T_max")]
    t_max: usize,
    hitting_time: Option<usize>,
    min_descent_margin: f64,
    pass: bool,
}

#[derive(Debug, Serialize)]
pub struct ReferenceRun {
    pub instance: ConvergenceInstance,
    pub constants_verified: bool,
    pub budget: usize,
    pub hitting_time: Option<usize>,
    pub descent_holds: bool,
    pub min_descent_margin: f64,
}

#[derive(Debug, Serialize)]
pub struct ConvergeReport {
    pub reference: ReferenceRun,
    pub family_size: usize,
    pub family_failures: Vec<usize>,
    pub phases: Option<converge::PhaseSummary>,
}

impl ConvergeReport {
    pub fn passed(&self) -> bool {
        let r = &self.reference;
        r.constants_verified
            && r.descent_holds
            && r.hitting_time.is_some_and(|t| t <= r.budget)
            && self.family_failures.is_empty()
    }
}

pub fn reference_run() -> Result<ReferenceRun> {
    let instance = ConvergenceInstance::reference();
    let run = converge::run_gd(&instance)?;
    Ok(ReferenceRun {
        constants_verified: instance.verify().is_ok(),
        budget: run.budget,
        hitting_time: run.hitting_time,
        descent_holds: run.descent_holds,
        min_descent_margin: run.min_descent_margin,
        instance,
    })
}

fn read_dataset_dir(dir: &Path) -> Result<Vec<ImageTensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .ppm or .pgm files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| ppm::read_ppm(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn load_theta(path: Option<&Path>, lab: &Lab) -> Result<ParamVector> {
    match path {
        Some(p) => {
            let theta = ParamVector::load(p).with_context(|| format!("loading {}", p.display()))?;
            if !theta.same_layout(lab.editor.theta0()) {
                bail!("checkpoint {} does not match the editor layout", p.display());
            }
            Ok(theta)
        }
        None => Ok(lab.editor.theta0().clone()),
    }
}

struct Session {
    config: ExperimentConfig,
    out: Option<PathBuf>,
    quiet: bool,
}

impl Session {
    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("safemark-out"));
        report::ensure_dir(&dir)?;
        Ok(dir)
    }

    fn say(&self, text: &str) {
        if !self.quiet {
            print!("{text}");
        }
    }

    fn lab(&self, dataset: Option<&Path>) -> Result<Lab> {
        match dataset {
            Some(dir) => Lab::with_dataset(self.config.clone(), read_dataset_dir(dir)?),
            None => Lab::new(self.config.clone()),
        }
    }

    fn manifest(&self, command: &str, artifacts: &[&str], dir: &Path) -> Result<()> {
        Manifest::new(command, self.config.hash()?, self.config.seed, artifacts).write(dir)
    }
}

/// Runs the parsed command. `Ok(false)` means the work finished but an
/// internal certification failed.
pub fn run(cli: Cli) -> Result<bool> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let out = cli.out.clone().or_else(|| config.out.clone());
    let ctx = Session {
        config,
        out,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Synth { spec } => synth(&ctx, spec.as_deref()),
        Command::Bounds(args) => {
            let text = bounds_csv(&args)?;
            ctx.say(&text);
            if let Some(dir) = &ctx.out {
                report::ensure_dir(dir)?;
                std::fs::write(dir.join("bounds.csv"), &text).context("writing bounds.csv")?;
            }
            Ok(true)
        }
        Command::Oracle {
            action: OracleAction::Verify { trials, max_bits },
        } => {
            let rep = oracle_verify(trials, ctx.config.seed, max_bits)?;
            let text = report::to_json(&rep)?;
            ctx.say(&text);
            if let Some(dir) = &ctx.out {
                report::ensure_dir(dir)?;
                std::fs::write(dir.join("oracle.json"), &text).context("writing oracle.json")?;
            }
            Ok(rep.passed())
        }
        Command::Train { steps, tau } => train(ctx, steps, tau),
        Command::Evaluate { theta, dataset } => {
            let lab = ctx.lab(dataset.as_deref())?;
            let theta = load_theta(theta.as_deref(), &lab)?;
            let rep = lab.evaluate(&theta)?;
            let dir = ctx.out_dir()?;
            report::write_json(&dir.join("eval.json"), &rep)?;
            ctx.manifest("evaluate", &["eval.json"], &dir)?;
            ctx.say(&format!(
                "original {:.4}  mani {:.4}  safemark {:.4}  l1 {:.4}\n",
                rep.original_acc, rep.mani_acc, rep.safemark_acc, rep.sem_gap_l1
            ));
            Ok(true)
        }
        Command::Distort { theta, grid, dataset } => {
            let lab = ctx.lab(dataset.as_deref())?;
            let theta = load_theta(theta.as_deref(), &lab)?;
            let grid = match grid {
                Some(p) => load_grid(&p).with_context(|| format!("loading grid {}", p.display()))?,
                None => ctx.config.distortions.clone(),
            };
            let heat = lab.heatmap(&theta, &grid)?;
            let dir = ctx.out_dir()?;
            report::write_heatmap_csv(&dir.join("heatmap.csv"), &heat)?;
            report::write_json(&dir.join("heatmap.json"), &heat)?;
            ctx.manifest("distort", &["heatmap.csv", "heatmap.json"], &dir)?;
            ctx.say(&report::heatmap_csv(&heat)?);
            Ok(true)
        }
        Command::Converge { family, records } => converge_cmd(&ctx, family.as_deref(), records.as_deref()),
        Command::SweepTau { taus, steps } => {
            let mut config = ctx.config.clone();
            if let Some(s) = steps {
                config.train.steps = s;
            }
            let data = config.dataset_spec().generate()?;
            let rows = lab::sweep_tau(&config, &data, &taus);
            let dir = ctx.out_dir()?;
            #[derive(Serialize)]
            struct Row<'a> {
                tau: f64,
                acc: Option<f64>,
                sem_gap_l1: Option<f64>,
                psnr: Option<f64>,
                soft_acc: Option<f64>,
                error: Option<&'a str>,
            }
            let csv_rows: Vec<Row> = rows
                .iter()
                .map(|r| Row {
                    tau: r.tau,
                    acc: r.acc,
                    sem_gap_l1: r.sem_gap_l1,
                    psnr: r.psnr,
                    soft_acc: r.soft_acc,
                    error: r.error.as_deref(),
                })
                .collect();
            let text = report::csv_string(&csv_rows)?;
            std::fs::write(dir.join("sweep.csv"), &text).context("writing sweep.csv")?;
            Manifest::new("sweep-tau", config.hash()?, config.seed, &["sweep.csv"]).write(&dir)?;
            ctx.say(&text);
            Ok(rows.iter().all(|r| r.error.is_none()))
        }
        Command::Pipeline { steps } => {
            let mut config = ctx.config.clone();
            if let Some(s) = steps {
                config.train.steps = s;
            }
            let dir = ctx.out_dir()?;
            let lab = Lab::new(config)?;
            let run = lab::run_pipeline(&lab, Some(&dir))?;
            Manifest::new(
                "pipeline",
                lab.config.hash()?,
                lab.config.seed,
                &["eval_baseline.json", "steps.csv", "theta.ckpt", "eval.json", "heatmap.csv", "summary.json"],
            )
            .write(&dir)?;
            let mut text = String::from("prompt,original,mani,safemark,sem_gap_l1\n");
            for r in run.summary.per_prompt.iter().chain([&run.summary.overall]) {
                text += &format!("{},{:.4},{:.4},{:.4},{:.4}\n", r.prompt, r.original, r.mani, r.safemark, r.sem_gap_l1);
            }
            ctx.say(&text);
            Ok(run.summary.training.certified())
        }
    }
}

fn synth(ctx: &Session, spec: Option<&Path>) -> Result<bool> {
    let spec: DatasetSpec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ctx.config.dataset_spec(),
    };
    let images = spec.generate()?;
    let dir = ctx.out_dir()?;
    let width = images.len().saturating_sub(1).to_string().len().max(3);
    let mut names = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let ext = if img.channels() == 1 { "pgm" } else { "ppm" };
        let name = format!("{i:0width$}.{ext}");
        ppm::write_ppm(img, &dir.join(&name))?;
        names.push(name);
    }
    #[derive(Serialize)]
    struct SynthManifest<'a> {
        #[serde(flatten)]
        base: Manifest,
        dataset: &'a DatasetSpec,
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let base = Manifest::new("synth", ctx.config.hash()?, spec.seed, &refs);
    report::write_json(&dir.join("manifest.json"), &SynthManifest { base, dataset: &spec })?;
    info!("wrote {} images to {}", images.len(), dir.display());
    Ok(true)
}

fn train(ctx: Session, steps: Option<usize>, tau: Option<f64>) -> Result<bool> {
    let mut config = ctx.config.clone();
    if let Some(s) = steps {
        config.train.steps = s;
    }
    if let Some(t) = tau {
        config.train.tau = t;
    }
    let lab = Lab::new(config)?;
    let run = lab.train()?;
    let dir = ctx.out_dir()?;
    report::write_steps_csv(&dir.join("steps.csv"), &run.records)?;
    run.theta.save(&dir.join("theta.ckpt"))?;
    let summary = TrainingSummary::new(&run, lab.config.train.tau)?;
    report::write_json(&dir.join("summary.json"), &summary)?;
    Manifest::new("train", lab.config.hash()?, lab.config.seed, &["steps.csv", "theta.ckpt", "summary.json"]).write(&dir)?;
    ctx.say(&report::to_json(&summary)?);
    Ok(summary.certified())
}

fn converge_cmd(ctx: &Session, family: Option<&Path>, records: Option<&Path>) -> Result<bool> {
    let file = match family {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => FamilyFile::Spec(FamilySpec {
            seed: ctx.config.seed,
            ..FamilySpec::default()
        }),
    };
    let instances = file.instances()?;
    let rows = converge::run_family(&instances)?;
    let phases = match records {
        Some(p) => Some(converge::phase_tracker(&report::read_steps_csv(p)?)?),
        None => None,
    };
    let rep = ConvergeReport {
        reference: reference_run()?,
        family_size: rows.len(),
        family_failures: rows.iter().filter(|r| !r.pass).map(|r| r.instance_id).collect(),
        phases,
    };
    let dir = ctx.out_dir()?;
    let csv_rows: Vec<ConvRow> = rows
        .iter()
        .map(|r| ConvRow {
            instance_id: r.instance_id,
            t_max: r.t_max,
            hitting_time: r.hitting_time,
            min_descent_margin: r.min_descent_margin,
            pass: r.pass,
        })
        .collect();
    report::write_csv(&dir.join("conv.csv"), &csv_rows)?;
    report::write_json(&dir.join("converge.json"), &rep)?;
    ctx.manifest("converge", &["conv.csv", "converge.json"], &dir)?;
    ctx.say(&report::to_json(&rep)?);
    Ok(rep.passed())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_need_a_selection() {
        assert!(bound_rows(&BoundsArgs::default()).is_err());
        let args = BoundsArgs {
            tau: Some(0.9),
            ..BoundsArgs::default()
        };
        assert!(bound_rows(&args).is_err());
    }

    #[test]
    fn capacity_equals_acc_to_mi() {
        let rows = bound_rows(&BoundsArgs {
            tau: Some(0.9),
            bits: Some(64),
            capacity: true,
            acc: Some(0.9),
            ..BoundsArgs::default()
        })
        .unwrap();
        assert_eq!(rows[0].bound_value, rows[1].bound_value);
    }

    #[test]
    fn oracle_equality_cases_pass() {
        let rep = oracle_verify(20, 1, 2).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn reference_convergence_passes() {
        let r = reference_run().unwrap();
        assert_eq!((r.budget, r.hitting_time), (600, Some(40)));
    }
}
