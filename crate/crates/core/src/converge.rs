//! Finite-step entry into the inactive phase, made executable.
//!
//! Instances use the one-dimensional surrogate `Acc~(θ) = 1 − (θ − 1)²` with
//! `L_sem(θ) = ½(θ − θ0)²`, so every constant has a closed form that can be
//! cross-checked by dense sampling of the domain `[θ0, 1]`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_from, stream};
use crate::trainer::StepRecord;
use crate::{Error, Result};

/// Sample count used when certifying constants.
pub const DENSE_SAMPLES: usize = 20_001;
/// Slack on the per-step descent inequality.
pub const DESCENT_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceInstance {
    pub tau: f64,
    pub lambda_wm: f64,
    pub lambda_sem: f64,
    pub theta0: f64,
    /// Smoothness `L` of the surrogate.
    pub l_smooth: f64,
    /// Gradient floor `μ` in the active phase.
    pub mu: f64,
    /// Alignment `c` between the hinge and total gradients.
    pub c: f64,
    /// Gradient cap `M`.
    pub m_cap: f64,
    pub eta: f64,
}

pub fn soft_acc(theta: f64) -> f64 {
    1.0 - (theta - 1.0).powi(2)
}

fn soft_acc_grad(theta: f64) -> f64 {
    -2.0 * (theta - 1.0)
}

impl ConvergenceInstance {
    /// τ = 0.96 from θ0 = 0 with `L = 2, μ = 0.4, c = 1, M = 2, η = 0.02`.
    pub fn reference() -> Self {
        Self {
            tau: 0.96,
            lambda_wm: 1.0,
            lambda_sem: 0.0,
            theta0: 0.0,
            l_smooth: 2.0,
            mu: 0.4,
            c: 1.0,
            m_cap: 2.0,
            eta: 0.02,
        }
    }

    /// Builds an instance with closed-form constants and the largest step
    /// size the step condition allows.
    pub fn derived(tau: f64, lambda_sem: f64, theta0: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1), got {tau}")));
        }
        if !(lambda_sem >= 0.0) {
            return Err(Error::invalid("lambda_sem must be nonnegative"));
        }
        let delta = (1.0 - tau).sqrt();
        if !(theta0 < 1.0 - delta) {
            return Err(Error::invalid(format!(
                "theta0 = {theta0} must start in the active phase below 1 - sqrt(1 - tau)"
            )));
        }
        let lambda_wm = 1.0;
        let c = lambda_wm - lambda_sem * (1.0 - delta - theta0) / (2.0 * delta);
        if c <= 0.0 {
            return Err(Error::invalid(format!(
                "semantic pull overwhelms the hinge (alignment {c})"
            )));
        }
        let span = 1.0 - theta0;
        let mut inst = Self {
            tau,
            lambda_wm,
            lambda_sem,
            theta0,
            l_smooth: 2.0,
            mu: 2.0 * delta,
            c,
            m_cap: (2.0 * lambda_wm * span).max(lambda_sem * span),
            eta: 0.0,
        };
        inst.eta = inst.max_eta();
        Ok(inst)
    }

    pub fn max_eta(&self) -> f64 {
        self.c * self.mu * self.mu / (self.l_smooth * self.m_cap * self.m_cap)
    }

    pub fn active(&self, theta: f64) -> bool {
        soft_acc(theta) < self.tau
    }

    /// `τ − Acc~(θ)` before clipping.
    pub fn gap(&self, theta: f64) -> f64 {
        self.tau - soft_acc(theta)
    }

    pub fn loss_wm(&self, theta: f64) -> f64 {
        self.gap(theta).max(0.0)
    }

    pub fn loss_total(&self, theta: f64) -> f64 {
        self.lambda_wm * self.loss_wm(theta) + 0.5 * self.lambda_sem * (theta - self.theta0).powi(2)
    }

    fn grad_wm(&self, theta: f64) -> f64 {
        if self.active(theta) {
            -soft_acc_grad(theta)
        } else {
            0.0
        }
    }

    pub fn grad_total(&self, theta: f64) -> f64 {
        self.lambda_wm * self.grad_wm(theta) + self.lambda_sem * (theta - self.theta0)
    }

    /// Checks every constant against dense samples of `[θ0, 1]` and the
    /// step-size condition.
    pub fn verify(&self) -> Result<()> {
        let fail = |what: String| Err(Error::Certification(what));
        if !(self.theta0 < 1.0) {
            return fail(format!("theta0 = {} leaves no domain below 1", self.theta0));
        }
        if !(self.eta > 0.0) || self.eta > self.max_eta() * (1.0 + 1e-12) {
            return fail(format!(
                "eta = {} violates 0 < eta <= c mu^2 / (L M^2) = {}",
                self.eta,
                self.max_eta()
            ));
        }
        let step = (1.0 - self.theta0) / (DENSE_SAMPLES - 1) as f64;
        let grid: Vec<f64> = (0..DENSE_SAMPLES).map(|i| self.theta0 + step * i as f64).collect();
        for pair in grid.windows(2) {
            let curv = (soft_acc_grad(pair[1]) - soft_acc_grad(pair[0])).abs() / (pair[1] - pair[0]);
            if curv > self.l_smooth * (1.0 + 1e-9) {
                return fail(format!("smoothness {curv} exceeds L = {}", self.l_smooth));
            }
        }
        for &t in &grid {
            let g_total = self.grad_total(t);
            if g_total.abs() > self.m_cap * (1.0 + 1e-9) {
                return fail(format!("gradient {} at theta {t} exceeds M = {}", g_total.abs(), self.m_cap));
            }
            if !self.active(t) {
                continue;
            }
            let g_wm = self.grad_wm(t);
            if g_wm.abs() < self.mu * (1.0 - 1e-9) {
                return fail(format!("active gradient {} at theta {t} is below mu = {}", g_wm.abs(), self.mu));
            }
            let align = g_wm * g_total / (g_wm * g_wm);
            if align < self.c * (1.0 - 1e-9) {
                return fail(format!("alignment {align} at theta {t} is below c = {}", self.c));
            }
        }
        Ok(())
    }
}

/// `⌈x⌉`, ignoring the few ulps that decimal quotients overshoot integers by.
fn ceil_tolerant(x: f64) -> f64 {
    (x - 1e-9 * x.abs().max(1.0)).ceil()
}

/// `⌈2·L_wm(θ0) / (η c μ²)⌉`.
pub fn budget(inst: &ConvergenceInstance) -> Result<usize> {
    let denom = inst.eta * inst.c * inst.mu * inst.mu;
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::invalid(format!("budget denominator must be positive, got {denom}")));
    }
    let steps = ceil_tolerant(2.0 * inst.loss_wm(inst.theta0) / denom);
    Ok(steps.max(0.0) as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub theta: f64,
    pub loss_wm: f64,
    pub soft_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GdRun {
    pub budget: usize,
    /// First `t` with `Acc~(θ_t) ≥ τ`; `None` when the run stopped at
    /// `budget + 1` without entering.
    pub hitting_time: Option<usize>,
    pub trajectory: Vec<TrajectoryPoint>,
    /// Smallest `L_wm(θ_t) − ηcμ²/2 − f(θ_{t+1})` over active steps.
    pub min_descent_margin: f64,
    pub descent_holds: bool,
}

impl GdRun {
    pub fn within_budget(&self) -> bool {
        self.hitting_time.is_some_and(|t| t <= self.budget)
    }
}

/// Plain gradient descent on `L_total` until the inactive phase.
pub fn run_gd(inst: &ConvergenceInstance) -> Result<GdRun> {
    let t_max = budget(inst)?;
    let need = inst.eta * inst.c * inst.mu * inst.mu / 2.0;
    let mut theta = inst.theta0;
    let mut trajectory = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut hitting_time = None;
    for t in 0..=t_max + 1 {
        trajectory.push(TrajectoryPoint {
            theta,
            loss_wm: inst.loss_wm(theta),
            soft_acc: soft_acc(theta),
        });
        if !inst.active(theta) {
            hitting_time = Some(t);
            break;
        }
        if t == t_max + 1 {
            break;
        }
        let next = theta - inst.eta * inst.grad_total(theta);
        min_margin = min_margin.min(inst.loss_wm(theta) - need - inst.gap(next));
        theta = next;
    }
    Ok(GdRun {
        budget: t_max,
        hitting_time,
        trajectory,
        min_descent_margin: min_margin,
        descent_holds: min_margin >= -DESCENT_TOLERANCE,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_tau_range")]
    pub tau: (f64, f64),
    #[serde(default = "default_lambda_range")]
    pub lambda_sem: (f64, f64),
    #[serde(default = "default_theta_range")]
    pub theta0: (f64, f64),
}

fn default_tau_range() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_lambda_range() -> (f64, f64) {
    (0.0, 0.02)
}
fn default_theta_range() -> (f64, f64) {
    (-1.0, 0.5)
}

impl Default for FamilySpec {
    fn default() -> Self {
        Self {
            count: 50,
            seed: 0,
            tau: default_tau_range(),
            lambda_sem: default_lambda_range(),
            theta0: default_theta_range(),
        }
    }
}

/// A family file holds either generation settings or explicit instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FamilyFile {
    Instances { instances: Vec<ConvergenceInstance> },
    Spec(FamilySpec),
}

impl FamilyFile {
    pub fn instances(&self) -> Result<Vec<ConvergenceInstance>> {
        match self {
            FamilyFile::Instances { instances } => Ok(instances.clone()),
            FamilyFile::Spec(spec) => family(spec),
        }
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Seeded instances with η at its maximum.
pub fn family(spec: &FamilySpec) -> Result<Vec<ConvergenceInstance>> {
    (0..spec.count)
        .map(|i| {
            let mut rng = rng_from(spec.seed, &[stream::FAMILY, i as u64]);
            let tau = draw(&mut rng, spec.tau);
            let lambda_sem = draw(&mut rng, spec.lambda_sem);
            let theta0 = draw(&mut rng, spec.theta0);
            ConvergenceInstance::derived(tau, lambda_sem, theta0)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilyRow {
    pub instance_id: usize,
    pub t_max: usize,
    pub hitting_time: Option<usize>,
    pub min_descent_margin: f64,
    pub pass: bool,
}

/// Verifies and runs each instance; a row passes when the constants
/// certify, the descent inequality holds and entry happens within budget.
pub fn run_family(instances: &[ConvergenceInstance]) -> Result<Vec<FamilyRow>> {
    instances
        .par_iter()
        .enumerate()
        .map(|(instance_id, inst)| {
            let certified = inst.verify().is_ok();
            let run = run_gd(inst)?;
            Ok(FamilyRow {
                instance_id,
                t_max: run.budget,
                hitting_time: run.hitting_time,
                min_descent_margin: run.min_descent_margin,
                pass: certified && run.descent_holds && run.within_budget(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PhaseSummary {
    /// Step of the first record with an inactive hinge.
    pub first_inactive_step: Option<usize>,
    /// Number of inactive → active transitions.
    pub reactivation_count: usize,
}

pub fn phase_tracker(records: &[StepRecord]) -> Result<PhaseSummary> {
    phase_summary(records.iter().map(|r| (r.step, r.hinge_active)))
}

/// Same as [`phase_tracker`] over `(step, hinge_active)` pairs.
pub fn phase_summary(flags: impl IntoIterator<Item = (usize, bool)>) -> Result<PhaseSummary> {
    let mut first = None;
    let mut reactivations = 0;
    let mut prev: Option<bool> = None;
    for (step, active) in flags {
        if !active && first.is_none() {
            first = Some(step);
        }
        if prev == Some(false) && active {
            reactivations += 1;
        }
        prev = Some(active);
    }
    if prev.is_none() {
        return Err(Error::invalid("phase tracking needs at least one step record"));
    }
    Ok(PhaseSummary {
        first_inactive_step: first,
        reactivation_count: reactivations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_budget_and_constants() {
        let inst = ConvergenceInstance::reference();
        inst.verify().unwrap();
        assert_eq!(budget(&inst).unwrap(), 600);
        assert!((inst.max_eta() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn reference_hits_at_forty() {
        // θ_t = 1 − 0.96^t, so entry needs 0.96^t ≤ 0.2.
        let oracle = (0u32..).find(|&t| 0.96f64.powi(t as i32) <= 0.2).unwrap() as usize;
        let run = run_gd(&ConvergenceInstance::reference()).unwrap();
        assert_eq!(run.hitting_time, Some(oracle));
        assert_eq!(oracle, 40);
        assert!(run.descent_holds);
        assert!(run.within_budget());
        for (t, p) in run.trajectory.iter().enumerate() {
            assert!((p.theta - (1.0 - 0.96f64.powi(t as i32))).abs() < 1e-12);
        }
    }

    #[test]
    fn already_inactive_starts_at_zero() {
        let inst = ConvergenceInstance {
            theta0: 1.0,
            ..ConvergenceInstance::reference()
        };
        assert_eq!(budget(&inst).unwrap(), 0);
        let run = run_gd(&inst).unwrap();
        assert_eq!(run.hitting_time, Some(0));
        assert!(run.min_descent_margin.is_infinite());
    }

    #[test]
    fn halving_eta_doubles_budget() {
        let inst = ConvergenceInstance::reference();
        let half = ConvergenceInstance {
            eta: 0.01,
            ..inst.clone()
        };
        assert_eq!(budget(&half).unwrap(), 2 * budget(&inst).unwrap());
        let zero = ConvergenceInstance { eta: 0.0, ..inst };
        assert!(budget(&zero).is_err());
    }

    #[test]
    fn inflated_constants_fail_verification() {
        let inst = ConvergenceInstance::reference();
        assert!(ConvergenceInstance { mu: 0.5, ..inst.clone() }.verify().is_err());
        assert!(ConvergenceInstance { m_cap: 1.5, eta: 0.01, ..inst.clone() }.verify().is_err());
        assert!(ConvergenceInstance { eta: 0.03, ..inst }.verify().is_err());
    }

    #[test]
    fn derived_matches_reference() {
        let d = ConvergenceInstance::derived(0.96, 0.0, 0.0).unwrap();
        let r = ConvergenceInstance::reference();
        for (a, b) in [(d.mu, r.mu), (d.c, r.c), (d.m_cap, r.m_cap), (d.eta, r.eta)] {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn family_is_within_budget() {
        let rows = run_family(&family(&FamilySpec::default()).unwrap()).unwrap();
        assert_eq!(rows.len(), 50);
        assert!(rows.iter().all(|r| r.pass), "{rows:?}");
    }

    #[test]
    fn phase_tracking() {
        assert!(phase_summary([]).is_err());
        let all_inactive = phase_summary([(0, false), (1, false)]).unwrap();
        assert_eq!(all_inactive.first_inactive_step, Some(0));
        assert_eq!(all_inactive.reactivation_count, 0);
        let bouncy = phase_summary([(0, true), (1, false), (2, true), (3, false), (4, true)]).unwrap();
        assert_eq!(bouncy.first_inactive_step, Some(1));
        assert_eq!(bouncy.reactivation_count, 2);
        assert_eq!(phase_summary([(0, true)]).unwrap().first_inactive_step, None);
    }

    #[test]
    fn deterministic_run_never_reactivates() {
        let run = run_gd(&ConvergenceInstance::reference()).unwrap();
        let flags = run
            .trajectory
            .iter()
            .enumerate()
            .map(|(t, p)| (t, p.loss_wm > 0.0));
        assert_eq!(phase_summary(flags).unwrap().reactivation_count, 0);
    }
}
