//! Closed-form pricing quantities for two-item bundles and their numerical
//! verification, plus population summaries of learned bias coefficients.
//!
//! All theorem quantities assume savings-centered users, zero values in use,
//! and a bundle priced at `c_B = r·(c_m + c_1)`.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{ChoiceRecord, UserId};
use crate::error::{ProbeError, Result};
use crate::model::{choice_probabilities, price_utilities, BiasPair, Hyperparams, ModelParams, ReferencePoint};

/// Distance from `r₀` below which `κ` is treated as singular.
pub const KAPPA_SINGULAR_TOL: f64 = 1e-9;
/// Central-difference step for derivative cross-checks.
pub const FD_STEP: f64 = 1e-6;
/// Relative tolerance for analytic vs numeric derivatives.
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremInstance {
    pub c_m: f64,
    pub c_1: f64,
    pub r: f64,
    pub p: f64,
    pub alpha_user: BiasPair,
    pub alpha_item: BiasPair,
    pub hyper: Hyperparams,
}

impl TheoremInstance {
    pub fn c_b(&self) -> f64 {
        self.r * (self.c_m + self.c_1)
    }

    /// Composite exponents; item exponents of 0 are allowed here.
    pub fn composite(&self) -> BiasPair {
        BiasPair {
            plus: 0.5 * (self.alpha_user.plus + self.alpha_item.plus),
            minus: 0.5 * (self.alpha_user.minus + self.alpha_item.minus),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c_b = self.c_b();
        if !(self.c_m > 0.0 && self.c_1 > 0.0) {
            return Err(ProbeError::Validation("prices must be positive".into()));
        }
        if !(c_b > self.c_m && self.c_m + self.c_1 > c_b) {
            return Err(ProbeError::PriceAssumption {
                c_m: self.c_m,
                c_v: self.c_1,
                c_b,
            });
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(ProbeError::InvalidProbability(self.p));
        }
        let a = self.composite();
        if !(a.plus > 0.0 && a.minus > 0.0) {
            return Err(ProbeError::NonPositiveExponent(a.plus.min(a.minus)));
        }
        Ok(())
    }

    pub fn with_c1(&self, c_1: f64) -> Self {
        Self { c_1, ..*self }
    }

    fn savings_hyper(&self) -> Hyperparams {
        Hyperparams {
            reference_point: ReferencePoint::SavingsCentered,
            ..self.hyper
        }
    }

    /// `(u₁(c_m), u₁(c_B))`.
    pub fn price_utilities(&self) -> Result<(f64, f64)> {
        let a = self.composite();
        let hp = self.savings_hyper();
        price_utilities(hp.reference_point, self.c_m, self.c_1, self.c_b(), self.p, a.plus, a.minus, &hp)
    }

    /// `(P(i_m), P(B))` with `ξ = 0`.
    pub fn probabilities(&self) -> Result<(f64, f64)> {
        let (u_m, u_b) = self.price_utilities()?;
        choice_probabilities(u_m, u_b)
    }

    pub fn p_bundle(&self) -> Result<f64> {
        self.probabilities().map(|(_, pb)| pb)
    }

    /// `∂P(B)/∂α_u⁺` and `∂P(B)/∂α_u⁻`.
    pub fn theorem1_derivatives(&self) -> Result<(f64, f64)> {
        let (u_m, u_b) = self.price_utilities()?;
        let (pm, pb) = choice_probabilities(u_m, u_b)?;
        let d_plus = 0.5 * pb * pm * u_b * self.p.ln();
        let d_minus = -0.5 * pb * pm * u_m * (1.0 - self.p).ln();
        Ok((d_plus, d_minus))
    }

    /// `∂P(B)/∂p`.
    pub fn theorem2_derivative(&self) -> Result<f64> {
        let (u_m, u_b) = self.price_utilities()?;
        let (pm, pb) = choice_probabilities(u_m, u_b)?;
        let a = self.composite();
        Ok(pb * pm * (a.plus * u_b / self.p + a.minus * u_m / (1.0 - self.p)))
    }

    /// `∂P(B)/∂c_1` at fixed `r` and `p`.
    pub fn price_derivative(&self) -> Result<f64> {
        let (pm, pb) = self.probabilities()?;
        let a = self.composite();
        let beta = self.hyper.beta_plus;
        let s = self.c_m + self.c_1;
        let r = self.r;
        let bundle = self.p.powf(a.plus) * ((1.0 - r) * s).powf(beta - 1.0) * (1.0 - r);
        let item = (1.0 - self.p).powf(a.minus) * (r * s - self.c_m).powf(beta - 1.0) * r;
        Ok(beta * pb * pm * (bundle - item))
    }

    pub fn a(&self) -> Result<f64> {
        compute_a(self.p, self.alpha_user, self.alpha_item, self.hyper.beta_plus)
    }
}

fn check_beta(beta_plus: f64) -> Result<()> {
    if !(beta_plus > 0.0 && beta_plus < 1.0) {
        return Err(ProbeError::InvalidHyperparams(format!("beta_plus={beta_plus} must lie in (0, 1)")));
    }
    Ok(())
}

/// `A = [(1−p)^{(α_u⁻+α_i⁻)/2} / p^{(α_u⁺+α_i⁺)/2}]^{1/(1−β⁺)}`.
pub fn compute_a(p: f64, alpha_user: BiasPair, alpha_item: BiasPair, beta_plus: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ProbeError::InvalidProbability(p));
    }
    check_beta(beta_plus)?;
    let ap = 0.5 * (alpha_user.plus + alpha_item.plus);
    let am = 0.5 * (alpha_user.minus + alpha_item.minus);
    // log form keeps extreme exponents finite
    let log_ratio = am * (1.0 - p).ln() - ap * p.ln();
    Ok((log_ratio / (1.0 - beta_plus)).exp())
}

/// `r₀ = 1/(1 + A^{(1−β⁺)/β⁺})`.
pub fn compute_r0(a: f64, beta_plus: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(ProbeError::NonFinite(format!("A={a}")));
    }
    check_beta(beta_plus)?;
    let e = (1.0 - beta_plus) / beta_plus * a.ln();
    // 1/(1+eᵉ) computed stably
    Ok(if e > 0.0 {
        let t = (-e).exp();
        t / (1.0 + t)
    } else {
        1.0 / (1.0 + e.exp())
    })
}

/// Turning point ratio `κ`; the bundle probability is minimized at
/// `c_1 = κ·c_m` when `κ > 0`.
pub fn compute_kappa(a: f64, r: f64, beta_plus: f64) -> Result<f64> {
    if !(r > 0.0 && r < 1.0) {
        return Err(ProbeError::InvalidConfig(format!("discount rate r={r} must lie in (0, 1)")));
    }
    let r0 = compute_r0(a, beta_plus)?;
    if (r - r0).abs() < KAPPA_SINGULAR_TOL {
        return Err(ProbeError::Singular {
            value: r,
            singular: r0,
            tolerance: KAPPA_SINGULAR_TOL,
        });
    }
    let root = (r / (1.0 - r).powf(beta_plus)).powf(1.0 / (1.0 - beta_plus));
    let num = (1.0 - r) + a * root;
    let den = r * (1.0 - a * (r / (1.0 - r)).powf(beta_plus / (1.0 - beta_plus)));
    Ok(num / den)
}

/// Draws instances satisfying the theorem preconditions with margins.
pub fn sample_instance(rng: &mut impl Rng, hyper: Hyperparams) -> TheoremInstance {
    loop {
        let c_m = rng.random_range(1.0..=100.0);
        let c_1 = rng.random_range(1.0..=100.0);
        let r: f64 = rng.random_range(0.01..0.99);
        let lower = c_m / (c_m + c_1);
        if r <= lower + 0.01 {
            continue;
        }
        let mut alpha = || rng.random_range(0.25..=4.0);
        let alpha_user = BiasPair::new(alpha(), alpha());
        let alpha_item = BiasPair::new(alpha(), alpha());
        return TheoremInstance {
            c_m,
            c_1,
            r,
            p: rng.random_range(0.05..=0.95),
            alpha_user,
            alpha_item,
            hyper,
        };
    }
}

fn numeric_relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1e-8)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremReport {
    pub theorem: u8,
    pub samples: usize,
    pub sign_violations: usize,
    pub fd_mismatches: usize,
    pub excluded: usize,
    pub max_relative_error: f64,
    /// Up to ten offending instances, for diagnosis.
    pub examples: Vec<TheoremInstance>,
}

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.sign_violations == 0 && self.fd_mismatches == 0
    }
}

struct Check {
    sign_ok: bool,
    rel_err: f64,
    excluded: bool,
}

fn run_verification(theorem: u8, samples: usize, seed: u64, hyper: Hyperparams, check: impl Fn(&TheoremInstance) -> Result<Vec<Check>> + Sync) -> Result<TheoremReport> {
    if samples == 0 {
        return Err(ProbeError::InvalidConfig("samples must be at least 1".into()));
    }
    hyper.validate()?;
    check_beta(hyper.beta_plus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances: Vec<TheoremInstance> = (0..samples).map(|_| sample_instance(&mut rng, hyper)).collect();
    let results: Vec<(TheoremInstance, Vec<Check>)> = instances
        .par_iter()
        .map(|inst| check(inst).map(|c| (*inst, c)))
        .collect::<Result<_>>()?;

    let mut report = TheoremReport {
        theorem,
        samples,
        sign_violations: 0,
        fd_mismatches: 0,
        excluded: 0,
        max_relative_error: 0.0,
        examples: Vec::new(),
    };
    for (inst, checks) in results {
        let mut bad = false;
        for c in checks {
            if c.excluded {
                report.excluded += 1;
                continue;
            }
            if !c.sign_ok {
                report.sign_violations += 1;
                bad = true;
            }
            if c.rel_err > FD_TOLERANCE {
                report.fd_mismatches += 1;
                bad = true;
            }
            report.max_relative_error = report.max_relative_error.max(c.rel_err);
        }
        if bad && report.examples.len() < 10 {
            report.examples.push(inst);
        }
    }
    Ok(report)
}

/// A derivative is treated as a boundary case when the value term it
/// multiplies vanishes.
const DEGENERATE_UTILITY: f64 = 1e-12;

/// Checks `∂P(B)/∂α_u⁺ < 0` and `∂P(B)/∂α_u⁻ > 0` on random instances and
/// compares both against central differences.
pub fn verify_theorem1(samples: usize, seed: u64, hyper: Hyperparams) -> Result<TheoremReport> {
    run_verification(1, samples, seed, hyper, |inst| {
        let (u_m, u_b) = inst.price_utilities()?;
        let (d_plus, d_minus) = inst.theorem1_derivatives()?;
        let fd = |edit: &dyn Fn(&mut TheoremInstance, f64), x0: f64| -> Result<f64> {
            let mut hi = *inst;
            let mut lo = *inst;
            edit(&mut hi, x0 + FD_STEP);
            edit(&mut lo, x0 - FD_STEP);
            Ok((hi.p_bundle()? - lo.p_bundle()?) / (2.0 * FD_STEP))
        };
        let n_plus = fd(&|i, x| i.alpha_user.plus = x, inst.alpha_user.plus)?;
        let n_minus = fd(&|i, x| i.alpha_user.minus = x, inst.alpha_user.minus)?;
        Ok(vec![
            Check {
                sign_ok: d_plus < 0.0,
                rel_err: numeric_relative_error(d_plus, n_plus),
                excluded: u_b.abs() < DEGENERATE_UTILITY,
            },
            Check {
                sign_ok: d_minus > 0.0,
                rel_err: numeric_relative_error(d_minus, n_minus),
                excluded: u_m.abs() < DEGENERATE_UTILITY,
            },
        ])
    })
}

/// Checks `∂P(B)/∂p > 0` on random instances against central differences.
pub fn verify_theorem2(samples: usize, seed: u64, hyper: Hyperparams) -> Result<TheoremReport> {
    run_verification(2, samples, seed, hyper, |inst| {
        let d = inst.theorem2_derivative()?;
        let hi = TheoremInstance { p: inst.p + FD_STEP, ..*inst };
        let lo = TheoremInstance { p: inst.p - FD_STEP, ..*inst };
        let n = (hi.p_bundle()? - lo.p_bundle()?) / (2.0 * FD_STEP);
        Ok(vec![Check {
            sign_ok: d > 0.0,
            rel_err: numeric_relative_error(d, n),
            excluded: false,
        }])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepRegime {
    SingleMinimum,
    MonotoneDecreasing,
    InsufficientGrid,
    /// Neither shape; reported rather than forced into a class.
    Irregular,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub c1_grid: Vec<f64>,
    pub p_bundle: Vec<f64>,
    pub regime: SweepRegime,
    pub a: f64,
    pub r0: f64,
    pub kappa: Option<f64>,
    pub empirical_minimizer: Option<f64>,
    /// `κ·c_m` when `κ > 0`.
    pub predicted_minimizer: Option<f64>,
    /// Whether the empirical shape matches the one predicted from `r` vs `r₀`,
    /// and for a single minimum whether it lies within one grid step of `κ·c_m`.
    pub agrees: bool,
}

/// Smallest additional-item price that keeps `c_B > c_m` at discount `r`.
pub fn min_valid_c1(c_m: f64, r: f64) -> f64 {
    (1.0 - r) * c_m / r
}

/// Grid above [`min_valid_c1`] with log-spaced offsets, so that turning
/// points just past the lower bound are still resolved. The upper end covers
/// three times the predicted turning point when one exists.
pub fn default_grid(instance: &TheoremInstance, points: usize) -> Result<Vec<f64>> {
    let lo = min_valid_c1(instance.c_m, instance.r);
    let a = instance.a()?;
    let hi = match compute_kappa(a, instance.r, instance.hyper.beta_plus) {
        Ok(k) if k > 0.0 => (3.0 * k * instance.c_m).max(10.0 * lo),
        _ => 20.0 * lo,
    };
    let d_min = 1e-6 * lo.max(1e-3);
    let d_max = hi - lo;
    let n = points.max(2);
    let ratio = (d_max / d_min).ln();
    Ok((0..n)
        .map(|i| lo + d_min * (ratio * i as f64 / (n - 1) as f64).exp())
        .collect())
}

/// Evaluates `P(B)` over `c1_grid` at fixed `r` and `p` and classifies the
/// shape of the curve.
pub fn sweep_price(instance: &TheoremInstance, c1_grid: &[f64]) -> Result<SweepReport> {
    if c1_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(ProbeError::InvalidConfig("sweep grid must be strictly increasing".into()));
    }
    let mut p_bundle = Vec::with_capacity(c1_grid.len());
    let mut gaps = Vec::with_capacity(c1_grid.len());
    for &c_1 in c1_grid {
        let inst = instance.with_c1(c_1);
        inst.validate()?;
        let (u_m, u_b) = inst.price_utilities()?;
        p_bundle.push(choice_probabilities(u_m, u_b)?.1);
        gaps.push(u_b - u_m);
    }
    let beta = instance.hyper.beta_plus;
    let a = instance.a()?;
    let r0 = compute_r0(a, beta)?;
    let kappa = compute_kappa(a, instance.r, beta).ok();
    let predicted = kappa.filter(|k| *k > 0.0).map(|k| k * instance.c_m);

    let mut report = SweepReport {
        c1_grid: c1_grid.to_vec(),
        p_bundle,
        regime: SweepRegime::InsufficientGrid,
        a,
        r0,
        kappa,
        empirical_minimizer: None,
        predicted_minimizer: predicted,
        agrees: false,
    };
    if c1_grid.len() < 3 {
        return Ok(report);
    }

    // P(B) is monotone in U(B) − U(i_m), which does not saturate
    let signs: Vec<i8> = gaps
        .windows(2)
        .map(|w| if w[1] < w[0] { -1 } else { 1 })
        .collect();
    let changes = signs.windows(2).filter(|s| s[0] != s[1]).count();
    report.regime = if signs.iter().all(|&s| s < 0) {
        SweepRegime::MonotoneDecreasing
    } else if changes == 1 && signs[0] < 0 {
        SweepRegime::SingleMinimum
    } else {
        SweepRegime::Irregular
    };

    if report.regime == SweepRegime::SingleMinimum {
        let idx = gaps
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let x = c1_grid[idx];
        report.empirical_minimizer = Some(x);
        let step = {
            let left = if idx > 0 { x - c1_grid[idx - 1] } else { 0.0 };
            let right = if idx + 1 < c1_grid.len() { c1_grid[idx + 1] - x } else { 0.0 };
            left.max(right)
        };
        report.agrees = instance.r < r0 && predicted.is_some_and(|k| (k - x).abs() <= step);
    } else if report.regime == SweepRegime::MonotoneDecreasing {
        // with r < r₀ the minimum may simply lie past the grid
        report.agrees = instance.r > r0 || predicted.is_some_and(|k| k >= *c1_grid.last().unwrap());
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PricingQuantities {
    pub a: f64,
    pub r0: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasEffectReport {
    pub unbiased: PricingQuantities,
    pub biased: PricingQuantities,
    pub a_lower: bool,
    pub r0_higher: bool,
    pub kappa_lower: bool,
}

impl BiasEffectReport {
    pub fn orderings_hold(&self) -> bool {
        self.a_lower && self.r0_higher && self.kappa_lower
    }
}

/// Compares `(A, r₀, κ)` for the instance's user exponents against the
/// unbiased user `α_u± = 1`, with item exponents set to 0.
pub fn compare_bias_effect(instance: &TheoremInstance) -> Result<BiasEffectReport> {
    let u = instance.alpha_user;
    let identical = u.plus == 1.0 && u.minus == 1.0;
    if !identical && !(u.minus > 1.0 && u.plus < 1.0) {
        return Err(ProbeError::InvalidConfig(format!(
            "biased setting needs α_u⁻ > 1 > α_u⁺, got ({}, {})",
            u.plus, u.minus
        )));
    }
    bias_orderings(instance)
}

/// [`compare_bias_effect`] without the check on the direction of the bias.
pub fn bias_orderings(instance: &TheoremInstance) -> Result<BiasEffectReport> {
    let beta = instance.hyper.beta_plus;
    let u = instance.alpha_user;
    let identical = u.plus == 1.0 && u.minus == 1.0;
    let zero = BiasPair { plus: 0.0, minus: 0.0 };
    let quantities = |alpha: BiasPair| -> Result<PricingQuantities> {
        let a = compute_a(instance.p, alpha, zero, beta)?;
        let r0 = compute_r0(a, beta)?;
        Ok(PricingQuantities {
            a,
            r0,
            kappa: compute_kappa(a, instance.r, beta)?,
        })
    };
    let unbiased = quantities(BiasPair::UNBIASED)?;
    if !identical && instance.r >= unbiased.r0 {
        return Err(ProbeError::InvalidConfig(format!(
            "discount rate {} must lie below the unbiased threshold {}",
            instance.r, unbiased.r0
        )));
    }
    let biased = quantities(u)?;
    Ok(BiasEffectReport {
        a_lower: biased.a < unbiased.a,
        r0_higher: biased.r0 > unbiased.r0,
        kappa_lower: biased.kappa < unbiased.kappa,
        unbiased,
        biased,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KappaSignCase {
    pub a: f64,
    pub r: f64,
    pub beta_plus: f64,
    pub r0: f64,
    pub kappa: f64,
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCase {
    pub instance: TheoremInstance,
    pub below_threshold: bool,
    pub regime: SweepRegime,
    pub r0: f64,
    pub predicted_minimizer: Option<f64>,
    pub empirical_minimizer: Option<f64>,
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem3Report {
    /// `r₀` at `A = 1`.
    pub r0_at_unit_a: f64,
    pub r0_at_unit_a_ok: bool,
    pub kappa_signs: Vec<KappaSignCase>,
    pub sweeps: Vec<SweepCase>,
}

impl Theorem3Report {
    pub fn violations(&self) -> usize {
        usize::from(!self.r0_at_unit_a_ok)
            + self.kappa_signs.iter().filter(|c| !c.agrees).count()
            + self.sweeps.iter().filter(|c| !c.agrees).count()
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }
}

/// Twenty `(A, r, β⁺)` triples spanning both sides of the threshold.
pub fn kappa_sign_grid() -> Vec<(f64, f64, f64)> {
    let betas = [0.2, 0.3, 0.5, 0.7];
    [0.25, 0.5, 1.0, 2.0, 4.0]
        .iter()
        .flat_map(|&a| [0.15, 0.4, 0.6, 0.85].into_iter().map(move |r| (a, r)))
        .enumerate()
        .map(|(i, (a, r))| (a, r, betas[i % betas.len()]))
        .collect()
}

/// Threshold identity at `A = 1`, the sign of `κ` on [`kappa_sign_grid`],
/// and `sweeps` price sweeps on seeded instances alternating between
/// discount rates below and above `r₀`.
pub fn verify_theorem3(sweeps: usize, points: usize, seed: u64, hyper: Hyperparams) -> Result<Theorem3Report> {
    hyper.validate()?;
    check_beta(hyper.beta_plus)?;
    let r0_at_unit_a = compute_r0(1.0, hyper.beta_plus)?;
    let kappa_signs = kappa_sign_grid()
        .into_iter()
        .map(|(a, r, beta_plus)| {
            let r0 = compute_r0(a, beta_plus)?;
            let kappa = compute_kappa(a, r, beta_plus)?;
            Ok(KappaSignCase {
                a,
                r,
                beta_plus,
                r0,
                kappa,
                agrees: (kappa > 0.0) == (r0 > r),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(sweeps);
    while instances.len() < sweeps {
        let mut inst = sample_instance(&mut rng, hyper);
        inst.c_1 = inst.c_m;
        let r0 = compute_r0(inst.a()?, hyper.beta_plus)?;
        let below = instances.len() % 2 == 0;
        let frac: f64 = rng.random_range(0.2..0.8);
        inst.r = if below { frac * r0 } else { r0 + frac * (1.0 - r0) };
        if inst.r < 0.02 || inst.r > 0.98 {
            continue;
        }
        inst.c_1 = 2.0 * min_valid_c1(inst.c_m, inst.r);
        instances.push((inst, below));
    }
    let sweeps = instances
        .par_iter()
        .map(|&(instance, below_threshold)| {
            let rep = sweep_price(&instance, &default_grid(&instance, points)?)?;
            Ok(SweepCase {
                instance,
                below_threshold,
                regime: rep.regime,
                r0: rep.r0,
                predicted_minimizer: rep.predicted_minimizer,
                empirical_minimizer: rep.empirical_minimizer,
                agrees: rep.agrees
                    && rep.regime
                        == if below_threshold {
                            SweepRegime::SingleMinimum
                        } else {
                            SweepRegime::MonotoneDecreasing
                        },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Theorem3Report {
        r0_at_unit_a,
        r0_at_unit_a_ok: (r0_at_unit_a - 0.5).abs() <= 1e-12,
        kappa_signs,
        sweeps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasEffectCase {
    pub instance: TheoremInstance,
    pub report: BiasEffectReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasEffectSuite {
    pub cases: Vec<BiasEffectCase>,
}

impl BiasEffectSuite {
    pub fn violations(&self) -> usize {
        self.cases.iter().filter(|c| !c.report.orderings_hold()).count()
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }
}

/// Seeded biased settings `α_u⁻ > 1 > α_u⁺` with item exponents 0 and a
/// discount rate below the unbiased threshold.
pub fn verify_bias_effect(settings: usize, seed: u64, hyper: Hyperparams) -> Result<BiasEffectSuite> {
    hyper.validate()?;
    check_beta(hyper.beta_plus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zero = BiasPair { plus: 0.0, minus: 0.0 };
    let mut cases = Vec::with_capacity(settings);
    while cases.len() < settings {
        let p = rng.random_range(0.05..0.95);
        let alpha_user = BiasPair::new(rng.random_range(0.2..0.95), rng.random_range(1.05..4.0));
        let r0 = compute_r0(compute_a(p, BiasPair::UNBIASED, zero, hyper.beta_plus)?, hyper.beta_plus)?;
        let r = rng.random_range(0.1..0.9) * r0;
        let c_m = rng.random_range(1.0..100.0);
        let instance = TheoremInstance {
            c_m,
            c_1: 2.0 * min_valid_c1(c_m, r),
            r,
            p,
            alpha_user,
            alpha_item: zero,
            hyper,
        };
        match compare_bias_effect(&instance) {
            Ok(report) => cases.push(BiasEffectCase { instance, report }),
            Err(ProbeError::Singular { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(BiasEffectSuite { cases })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 { 0.5 * (v[mid - 1] + v[mid]) } else { v[mid] })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserBias {
    pub user_id: UserId,
    pub alpha_plus: f64,
    pub alpha_minus: f64,
    pub bundle_purchases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub users: usize,
    pub median_alpha_plus: Option<f64>,
    pub median_alpha_minus: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketSummary {
    pub label: String,
    pub users: usize,
    pub median_alpha_plus: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasPopulationReport {
    pub users: Vec<UserBias>,
    /// `None` when either coefficient has zero variance.
    pub pearson: Option<f64>,
    pub with_bundle: GroupSummary,
    pub without_bundle: GroupSummary,
    pub buckets: Vec<BucketSummary>,
}

const BUCKETS: [(usize, usize, &str); 6] = [
    (0, 0, "0"),
    (1, 1, "1"),
    (2, 2, "2"),
    (3, 5, "3-5"),
    (6, 10, "6-10"),
    (11, usize::MAX, "11+"),
];

fn summarize(users: &[&UserBias]) -> GroupSummary {
    let plus: Vec<f64> = users.iter().map(|u| u.alpha_plus).collect();
    let minus: Vec<f64> = users.iter().map(|u| u.alpha_minus).collect();
    GroupSummary {
        users: users.len(),
        median_alpha_plus: median(&plus),
        median_alpha_minus: median(&minus),
    }
}

/// Per-user coefficients of every user appearing in `records`, their
/// correlation, and medians by bundle-purchase behavior.
pub fn bias_population_report(params: &ModelParams, records: &[ChoiceRecord]) -> Result<BiasPopulationReport> {
    let mut counts: BTreeMap<UserId, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.user_id).or_default() += usize::from(r.label.is_bundle());
    }
    let known: BTreeSet<UserId> = params.bias.user.keys().copied().collect();
    let users: Vec<UserBias> = counts
        .iter()
        .filter(|(u, _)| known.contains(u))
        .map(|(&user_id, &bundle_purchases)| {
            let a = params.bias.user(user_id);
            UserBias {
                user_id,
                alpha_plus: a.plus,
                alpha_minus: a.minus,
                bundle_purchases,
            }
        })
        .collect();
    if users.len() < 2 {
        return Err(ProbeError::InsufficientData(format!(
            "bias report needs at least 2 users with learned coefficients, found {}",
            users.len()
        )));
    }
    let plus: Vec<f64> = users.iter().map(|u| u.alpha_plus).collect();
    let minus: Vec<f64> = users.iter().map(|u| u.alpha_minus).collect();
    let with: Vec<&UserBias> = users.iter().filter(|u| u.bundle_purchases > 0).collect();
    let without: Vec<&UserBias> = users.iter().filter(|u| u.bundle_purchases == 0).collect();
    let buckets = BUCKETS
        .iter()
        .map(|&(lo, hi, label)| {
            let members: Vec<f64> = users
                .iter()
                .filter(|u| (lo..=hi).contains(&u.bundle_purchases))
                .map(|u| u.alpha_plus)
                .collect();
            BucketSummary {
                label: label.to_string(),
                users: members.len(),
                median_alpha_plus: median(&members),
            }
        })
        .collect();
    Ok(BiasPopulationReport {
        pearson: pearson(&plus, &minus),
        with_bundle: summarize(&with),
        without_bundle: summarize(&without),
        buckets,
        users,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::catalog::Label;

    const ONE: BiasPair = BiasPair::UNBIASED;

    fn instance(c_m: f64, c_1: f64, r: f64, p: f64, user: BiasPair) -> TheoremInstance {
        TheoremInstance {
            c_m,
            c_1,
            r,
            p,
            alpha_user: user,
            alpha_item: ONE,
            hyper: Hyperparams::default(),
        }
    }

    #[test]
    fn a_examples() {
        assert_relative_eq!(compute_a(0.5, ONE, ONE, 0.3).unwrap(), 1.0, epsilon = 1e-15);
        assert!(compute_a(1.0 - 1e-12, ONE, ONE, 0.3).unwrap() < 1e-10);
        let a = compute_a(0.5, BiasPair::new(0.5, 2.0), ONE, 0.3).unwrap();
        let ratio: f64 = 0.5f64.powf(1.5) / 0.5f64.powf(0.75);
        assert_relative_eq!(a, ratio.powf(1.0 / 0.7), max_relative = 1e-13);
        assert!(compute_a(0.0, ONE, ONE, 0.3).is_err());
        assert!(compute_a(1.0, ONE, ONE, 0.3).is_err());
    }

    #[test]
    fn r0_examples() {
        for beta in [0.1, 0.3, 0.8] {
            assert_eq!(compute_r0(1.0, beta).unwrap(), 0.5);
        }
        assert_relative_eq!(compute_r0(2.0, 0.3).unwrap(), 1.0 / (1.0 + 2f64.powf(7.0 / 3.0)), max_relative = 1e-14);
        assert_relative_eq!(compute_r0(2.0, 0.3).unwrap(), 0.1656, epsilon = 1e-4);
        assert!(compute_r0(1e-12, 0.3).unwrap() > 1.0 - 1e-9);
    }

    #[test]
    fn kappa_examples() {
        assert_relative_eq!(compute_kappa(1.0, 0.25, 0.3).unwrap(), 9.651, epsilon = 1e-3);
        assert!(compute_kappa(1.0, 0.4, 0.3).unwrap() > 0.0);
        assert!(compute_kappa(1.0, 0.6, 0.3).unwrap() < 0.0);
        assert!(compute_kappa(1.0, 0.5 - 1e-7, 0.3).unwrap().abs() > 1e5);
        assert!(matches!(compute_kappa(1.0, 0.5, 0.3), Err(ProbeError::Singular { .. })));
    }

    #[test]
    fn theorem_verification_has_no_violations() {
        let t1 = verify_theorem1(1000, 1, Hyperparams::default()).unwrap();
        assert!(t1.passed(), "{t1:?}");
        assert!(t1.max_relative_error < FD_TOLERANCE);
        let t2 = verify_theorem2(1000, 2, Hyperparams::default()).unwrap();
        assert!(t2.passed(), "{t2:?}");
        assert!(verify_theorem1(0, 1, Hyperparams::default()).is_err());
    }

    #[test]
    fn symmetric_instance_has_stated_signs() {
        let inst = instance(10.0, 10.0, 0.75, 0.5, ONE);
        let (dp, dm) = inst.theorem1_derivatives().unwrap();
        assert!(dp < 0.0 && dm > 0.0);
        assert!(inst.theorem2_derivative().unwrap() > 0.0);
    }

    #[test]
    fn theorem2_magnitude_grows_near_zero() {
        let half = BiasPair::new(0.5, 0.5);
        let at = |p| TheoremInstance { alpha_item: half, ..instance(10.0, 10.0, 0.75, p, half) };
        let lo = at(0.1).theorem2_derivative().unwrap();
        let hi = at(0.4).theorem2_derivative().unwrap();
        assert!(lo > hi, "{lo} <= {hi}");
    }

    #[test]
    fn vanishing_gain_gives_vanishing_derivative() {
        // r → 1 drives u₁(c_B) and with it ∂P(B)/∂α_u⁺ to zero
        let mut prev = f64::INFINITY;
        for gap in [1e-2, 1e-6, 1e-10, 1e-14] {
            let inst = instance(10.0, 10.0, 1.0 - gap, 0.5, ONE);
            let d = inst.theorem1_derivatives().unwrap().0.abs();
            assert!(d < prev);
            prev = d;
        }
        assert!(prev < 1e-4);
    }

    #[test]
    fn sweep_low_rate_has_minimum_near_turning_point() {
        let inst = TheoremInstance {
            alpha_item: ONE,
            ..instance(1.0, 5.0, 0.25, 0.5, ONE)
        };
        let grid = default_grid(&inst, 2000).unwrap();
        let rep = sweep_price(&inst, &grid).unwrap();
        assert_eq!(rep.regime, SweepRegime::SingleMinimum);
        assert!(rep.agrees, "{:?} vs {:?}", rep.empirical_minimizer, rep.predicted_minimizer);
        assert_relative_eq!(rep.predicted_minimizer.unwrap(), 9.651, epsilon = 1e-3);
        // analytic derivative changes sign at κ·c_m
        let k = rep.predicted_minimizer.unwrap();
        assert!(inst.with_c1(0.99 * k).price_derivative().unwrap() < 0.0);
        assert!(inst.with_c1(1.01 * k).price_derivative().unwrap() > 0.0);
    }

    #[test]
    fn sweep_high_rate_is_decreasing() {
        let inst = instance(1.0, 5.0, 0.75, 0.5, ONE);
        let grid = default_grid(&inst, 500).unwrap();
        let rep = sweep_price(&inst, &grid).unwrap();
        assert_eq!(rep.regime, SweepRegime::MonotoneDecreasing);
        assert!(rep.agrees);
        assert!(rep.p_bundle.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn sweep_edge_cases() {
        let inst = instance(1.0, 5.0, 0.75, 0.5, ONE);
        let rep = sweep_price(&inst, &[1.0, 2.0]).unwrap();
        assert_eq!(rep.regime, SweepRegime::InsufficientGrid);
        assert!(sweep_price(&inst, &[2.0, 1.0, 3.0]).is_err());
        // c_1 too small for c_B > c_m
        assert!(sweep_price(&inst, &[0.1, 1.0, 2.0]).is_err());
    }

    #[test]
    fn bias_effect_orderings() {
        for p in [0.5, 0.9] {
            let inst = instance(10.0, 10.0, 0.2, p, BiasPair::new(0.5, 2.0));
            let rep = compare_bias_effect(&inst).unwrap();
            assert!(rep.orderings_hold(), "p={p}: {rep:?}");
        }
        let same = compare_bias_effect(&instance(10.0, 10.0, 0.2, 0.5, ONE)).unwrap();
        assert_eq!(same.unbiased, same.biased);
        assert!(compare_bias_effect(&instance(10.0, 10.0, 0.2, 0.5, BiasPair::new(2.0, 0.5))).is_err());
    }

    fn params_with_users(users: &[(UserId, f64, f64)]) -> ModelParams {
        let mut p = ModelParams::new(2, Hyperparams::default(), ONE, 0.0);
        for &(u, a, b) in users {
            p.bias.user.insert(u, BiasPair::new(a, b));
        }
        p
    }

    fn record(user: UserId, label: Label) -> ChoiceRecord {
        ChoiceRecord {
            user_id: user,
            main_item_id: 0,
            bundle_id: 0,
            label,
        }
    }

    #[test]
    fn identical_users_have_undefined_correlation() {
        let params = params_with_users(&[(1, 1.0, 1.0), (2, 1.0, 1.0)]);
        let recs = [record(1, Label::BoughtBundle), record(2, Label::BoughtItem)];
        let rep = bias_population_report(&params, &recs).unwrap();
        assert!(rep.pearson.is_none());
        assert_eq!(rep.with_bundle.users, 1);
        assert_eq!(rep.without_bundle.users, 1);
        assert!(bias_population_report(&params, &recs[..1]).is_err());
    }

    #[test]
    fn anti_correlated_population() {
        let users: Vec<(UserId, f64, f64)> = (0..20).map(|i| (i, 0.5 + 0.1 * i as f64, 3.0 - 0.1 * i as f64)).collect();
        let params = params_with_users(&users);
        let recs: Vec<ChoiceRecord> = (0..20).map(|i| record(i, Label::BoughtItem)).collect();
        let rep = bias_population_report(&params, &recs).unwrap();
        assert!(rep.pearson.unwrap() < -0.99);
        assert_eq!(rep.buckets[0].users, 20);
    }

    #[test]
    fn theorem3_suite_has_no_violations() {
        let rep = verify_theorem3(20, 400, 7, Hyperparams::default()).unwrap();
        assert_eq!(rep.kappa_signs.len(), 20);
        assert!(rep.kappa_signs.iter().any(|c| c.r < c.r0) && rep.kappa_signs.iter().any(|c| c.r > c.r0));
        assert_eq!(rep.sweeps.iter().filter(|c| c.below_threshold).count(), 10);
        assert!(rep.passed(), "{:?}", rep.sweeps.iter().find(|c| !c.agrees));
    }

    #[test]
    fn bias_effect_suite_has_no_violations() {
        let suite = verify_bias_effect(20, 3, Hyperparams::default()).unwrap();
        assert_eq!(suite.cases.len(), 20);
        assert!(suite.passed());
    }

    #[test]
    fn reversed_bias_breaks_the_orderings() {
        let inst = instance(10.0, 10.0, 0.2, 0.5, BiasPair::new(2.0, 0.5));
        assert!(!bias_orderings(&inst).unwrap().orderings_hold());
    }

    proptest! {
        #[test]
        fn r0_in_unit_interval(a in 1e-6f64..1e6, beta in 0.05f64..0.95) {
            let r0 = compute_r0(a, beta).unwrap();
            prop_assert!(r0 > 0.0 && r0 < 1.0);
        }

        #[test]
        fn kappa_sign_matches_threshold(a in 0.05f64..20.0, r in 0.01f64..0.99, beta in 0.1f64..0.9) {
            let r0 = compute_r0(a, beta).unwrap();
            prop_assume!((r - r0).abs() > 1e-6);
            let k = compute_kappa(a, r, beta).unwrap();
            prop_assert_eq!(k > 0.0, r < r0);
        }

        #[test]
        fn low_rate_sweep_changes_direction_once(
            c_m in 1.0f64..50.0,
            p in 0.1f64..0.9,
            ap in 0.3f64..3.0,
            am in 0.3f64..3.0,
            frac in 0.2f64..0.8,
        ) {
            let mut inst = instance(c_m, 1.0, 0.5, p, BiasPair::new(ap, am));
            let r0 = compute_r0(inst.a().unwrap(), inst.hyper.beta_plus).unwrap();
            inst.r = frac * r0;
            prop_assume!(inst.r > 0.02);
            let grid = default_grid(&inst, 300).unwrap();
            let rep = sweep_price(&inst, &grid).unwrap();
            prop_assert_eq!(rep.regime, SweepRegime::SingleMinimum);
            prop_assert!(rep.agrees);
        }
    }
}
