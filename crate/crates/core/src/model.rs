//! Prospect-theory choice model: value and weight functions, bias
//! composition, reference-point utilities, and the two-way choice rule.
//!
//! A decision compares buying the main item `i_m` alone against buying a
//! bundle `B ∋ i_m`. All non-main members are folded into one virtual item
//! whose price and value in use are the member sums. With `p` the probability
//! that the user will later need the virtual item, the price utilities are
//! prospect-theory gains/losses weighted by the perceived probabilities
//! `w⁺ = p^α⁺` and `w⁻ = (1 − p)^α⁻`, and the choice probabilities are a
//! softmax over `U(i_m) = u₁(c_m) + ξ_m` and `U(B) = u₁(c_B) + Σ_{i∈B} ξ_i`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::catalog::{Bundle, Catalog, ChoiceRecord, ItemId, Label, UserId};
use crate::error::{ProbeError, Result};

/// Clamp applied to correlation and choice probabilities before logs/powers.
pub const PROB_EPS: f64 = 1e-6;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReferencePoint {
    /// Reference is the more expensive option; outcomes are savings (gains).
    #[default]
    SavingsCentered,
    /// Reference is the cheaper option; outcomes are extra expense (losses).
    ExpenseCentered,
    MainItemCentered,
    BundleCentered,
}

impl ReferencePoint {
    pub const ALL: [ReferencePoint; 4] = [
        ReferencePoint::SavingsCentered,
        ReferencePoint::ExpenseCentered,
        ReferencePoint::BundleCentered,
        ReferencePoint::MainItemCentered,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ReferencePoint::SavingsCentered => "Type I: Savings-centered",
            ReferencePoint::ExpenseCentered => "Type II: Expense-centered",
            ReferencePoint::BundleCentered => "Type III: Bundle-centered",
            ReferencePoint::MainItemCentered => "Type IV: Main item-centered",
        }
    }
}

impl std::str::FromStr for ReferencePoint {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "savings" | "savings-centered" => Ok(Self::SavingsCentered),
            "expense" | "expense-centered" => Ok(Self::ExpenseCentered),
            "main-item" | "main-item-centered" => Ok(Self::MainItemCentered),
            "bundle" | "bundle-centered" => Ok(Self::BundleCentered),
            other => Err(format!(
                "unknown reference point {other:?} (expected savings|expense|main-item|bundle)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    /// `w(p) = p^α` with personal exponents.
    #[default]
    Power,
    /// Inverse-S probability weighting `p^γ / (p^γ + (1−p)^γ)^{1/γ}`.
    Cpt,
}

impl std::str::FromStr for WeightKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "power" => Ok(Self::Power),
            "cpt" => Ok(Self::Cpt),
            other => Err(format!("unknown weight kind {other:?} (expected power|cpt)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub beta_plus: f64,
    pub beta_minus: f64,
    pub lambda: f64,
    pub reference_point: ReferencePoint,
    pub weight_kind: WeightKind,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            beta_plus: 0.3,
            beta_minus: 0.3,
            lambda: 2.0,
            reference_point: ReferencePoint::SavingsCentered,
            weight_kind: WeightKind::Power,
            gamma1: 0.61,
            gamma2: 0.69,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.beta_plus) || !open_unit(self.beta_minus) {
            return Err(ProbeError::InvalidHyperparams(format!(
                "beta_plus={} and beta_minus={} must lie in (0, 1)",
                self.beta_plus, self.beta_minus
            )));
        }
        if !(self.lambda > 1.0) || !self.lambda.is_finite() {
            return Err(ProbeError::InvalidHyperparams(format!(
                "lambda={} must exceed 1",
                self.lambda
            )));
        }
        for g in [self.gamma1, self.gamma2] {
            if !(g > 0.0 && g <= 1.0) {
                return Err(ProbeError::InvalidGamma(g));
            }
        }
        Ok(())
    }
}

/// Prospect-theory value of a price difference `x` relative to the reference.
pub fn value(x: f64, hp: &Hyperparams) -> f64 {
    if x >= 0.0 {
        x.powf(hp.beta_plus)
    } else {
        -hp.lambda * (-x).powf(hp.beta_minus)
    }
}

/// Projection-bias weight `p^α`. `α < 1` overestimates, `α > 1` underestimates.
pub fn weight_power(p: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ProbeError::InvalidProbability(p));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(ProbeError::NonPositiveExponent(alpha));
    }
    Ok(p.powf(alpha))
}

pub fn weight_cpt(p: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ProbeError::InvalidProbability(p));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(ProbeError::InvalidGamma(gamma));
    }
    if p == 0.0 || p == 1.0 {
        return Ok(p);
    }
    let num = p.powf(gamma);
    let den = (num + (1.0 - p).powf(gamma)).powf(1.0 / gamma);
    Ok(num / den)
}

/// Effective exponent for one decision: the mean of the user and main-item
/// coefficients.
pub fn compose_bias(alpha_user: f64, alpha_item: f64) -> Result<f64> {
    for a in [alpha_user, alpha_item] {
        if !(a > 0.0) || !a.is_finite() {
            return Err(ProbeError::NonPositiveExponent(a));
        }
    }
    Ok(0.5 * (alpha_user + alpha_item))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasPair {
    pub plus: f64,
    pub minus: f64,
}

impl BiasPair {
    pub const UNBIASED: BiasPair = BiasPair {
        plus: 1.0,
        minus: 1.0,
    };

    pub fn new(plus: f64, minus: f64) -> Self {
        Self { plus, minus }
    }
}

impl Default for BiasPair {
    fn default() -> Self {
        Self::UNBIASED
    }
}

/// Per-user and per-item projection-bias exponents. Users missing from the
/// table (never seen in training) use `fallback`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCoefficients {
    pub user: BTreeMap<UserId, BiasPair>,
    pub item: Vec<BiasPair>,
    pub fallback: BiasPair,
}

impl BiasCoefficients {
    pub fn uniform(n_items: usize, init: BiasPair) -> Self {
        Self {
            user: BTreeMap::new(),
            item: vec![init; n_items],
            fallback: init,
        }
    }

    pub fn user(&self, id: UserId) -> BiasPair {
        self.user.get(&id).copied().unwrap_or(self.fallback)
    }

    pub fn item(&self, id: ItemId) -> Result<BiasPair> {
        self.item.get(id).copied().ok_or(ProbeError::UnknownItem(id))
    }
}

/// All learnable state apart from the correlation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub bias: BiasCoefficients,
    /// Value in use, one entry per catalog item.
    pub xi: Vec<f64>,
    pub hyper: Hyperparams,
}

impl ModelParams {
    pub fn new(n_items: usize, hyper: Hyperparams, alpha_init: BiasPair, xi_init: f64) -> Self {
        Self {
            bias: BiasCoefficients::uniform(n_items, alpha_init),
            xi: vec![xi_init; n_items],
            hyper,
        }
    }

    pub fn xi(&self, id: ItemId) -> Result<f64> {
        self.xi.get(id).copied().ok_or(ProbeError::UnknownItem(id))
    }

    /// Composite `(α⁺, α⁻)` for a user facing a decision on `main_item`.
    pub fn composite_alpha(&self, user: UserId, main_item: ItemId) -> Result<BiasPair> {
        let u = self.bias.user(user);
        let i = self.bias.item(main_item)?;
        Ok(BiasPair {
            plus: compose_bias(u.plus, i.plus)?,
            minus: compose_bias(u.minus, i.minus)?,
        })
    }
}

/// Aggregate of all non-main bundle members.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualItem {
    pub price: f64,
    pub xi: f64,
}

pub fn virtual_item(
    bundle: &Bundle,
    main_item: ItemId,
    catalog: &Catalog,
    xi: &[f64],
) -> Result<VirtualItem> {
    if bundle.items.len() < 2 {
        return Err(ProbeError::BundleTooSmall(bundle.id));
    }
    if !bundle.contains(main_item) {
        return Err(ProbeError::MainItemNotInBundle {
            item: main_item,
            bundle: bundle.id,
        });
    }
    let mut out = VirtualItem { price: 0.0, xi: 0.0 };
    for id in bundle.additional_items(main_item) {
        out.price += catalog.price(id)?;
        out.xi += xi.get(id).copied().ok_or(ProbeError::UnknownItem(id))?;
    }
    Ok(out)
}

/// Value terms multiplying each perceived probability:
/// `u₁(c_m) = w⁺·main_plus + w⁻·main_minus`, `u₁(c_B) = w⁺·bundle_plus + w⁻·bundle_minus`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PriceTerms {
    pub main_plus: f64,
    pub main_minus: f64,
    pub bundle_plus: f64,
    pub bundle_minus: f64,
}

pub fn price_terms(
    rp: ReferencePoint,
    c_m: f64,
    c_v: f64,
    c_b: f64,
    hp: &Hyperparams,
) -> Result<PriceTerms> {
    if !(c_b > c_m && c_m + c_v > c_b) {
        return Err(ProbeError::PriceAssumption { c_m, c_v, c_b });
    }
    let saving = c_m + c_v - c_b;
    let premium = c_b - c_m;
    let mut t = PriceTerms::default();
    match rp {
        ReferencePoint::SavingsCentered => {
            t.main_minus = value(premium, hp);
            t.bundle_plus = value(saving, hp);
        }
        ReferencePoint::ExpenseCentered => {
            t.main_plus = value(-saving, hp);
            t.bundle_minus = value(-premium, hp);
        }
        ReferencePoint::BundleCentered => {
            t.bundle_plus = value(saving, hp);
            t.bundle_minus = value(-premium, hp);
        }
        ReferencePoint::MainItemCentered => {
            t.main_plus = value(-saving, hp);
            t.main_minus = value(premium, hp);
        }
    }
    Ok(t)
}

/// Perceived probabilities of needing (`plus`) and not needing (`minus`) the
/// virtual item.
pub fn perceived_weights(p: f64, alpha: BiasPair, hp: &Hyperparams) -> Result<BiasPair> {
    let p = clamp_prob(p);
    match hp.weight_kind {
        WeightKind::Power => Ok(BiasPair {
            plus: weight_power(p, alpha.plus)?,
            minus: weight_power(1.0 - p, alpha.minus)?,
        }),
        WeightKind::Cpt => Ok(BiasPair {
            plus: weight_cpt(p, hp.gamma1)?,
            minus: weight_cpt(1.0 - p, hp.gamma2)?,
        }),
    }
}

/// `(u₁(c_m), u₁(c_B))` for one reference-point type.
#[allow(clippy::too_many_arguments)]
pub fn price_utilities(
    rp: ReferencePoint,
    c_m: f64,
    c_v: f64,
    c_b: f64,
    p: f64,
    alpha_plus: f64,
    alpha_minus: f64,
    hp: &Hyperparams,
) -> Result<(f64, f64)> {
    let t = price_terms(rp, c_m, c_v, c_b, hp)?;
    let w = perceived_weights(p, BiasPair::new(alpha_plus, alpha_minus), hp)?;
    Ok(combine(&t, w))
}

fn combine(t: &PriceTerms, w: BiasPair) -> (f64, f64) {
    (
        w.plus * t.main_plus + w.minus * t.main_minus,
        w.plus * t.bundle_plus + w.minus * t.bundle_minus,
    )
}

/// Two-way softmax `(P(i_m), P(B))`, evaluated relative to the larger utility.
pub fn choice_probabilities(u_main: f64, u_bundle: f64) -> Result<(f64, f64)> {
    if !u_main.is_finite() || !u_bundle.is_finite() {
        return Err(ProbeError::NonFinite(format!(
            "utilities ({u_main}, {u_bundle})"
        )));
    }
    let top = u_main.max(u_bundle);
    let em = (u_main - top).exp();
    let eb = (u_bundle - top).exp();
    let z = em + eb;
    Ok((em / z, eb / z))
}

/// Every intermediate quantity of one decision; shared by prediction,
/// the loss, and the gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChoiceEval {
    /// Correlation probability after clamping.
    pub p: f64,
    pub p_clamped: bool,
    pub alpha: BiasPair,
    pub weights: BiasPair,
    pub terms: PriceTerms,
    pub u1_main: f64,
    pub u1_bundle: f64,
    pub xi_main: f64,
    pub xi_virtual: f64,
    pub u_main: f64,
    pub u_bundle: f64,
    pub p_main: f64,
    pub p_bundle: f64,
}

pub fn evaluate_choice(
    record: &ChoiceRecord,
    catalog: &Catalog,
    params: &ModelParams,
    p: f64,
) -> Result<ChoiceEval> {
    if !p.is_finite() {
        return Err(ProbeError::NonFinite(format!("correlation probability {p}")));
    }
    let bundle = catalog.bundle(record.bundle_id)?;
    let c_m = catalog.price(record.main_item_id)?;
    let virt = virtual_item(bundle, record.main_item_id, catalog, &params.xi)?;
    let hp = &params.hyper;
    let terms = price_terms(hp.reference_point, c_m, virt.price, bundle.price, hp)?;
    let alpha = params.composite_alpha(record.user_id, record.main_item_id)?;
    let pc = clamp_prob(p);
    let weights = perceived_weights(pc, alpha, hp)?;
    let (u1_main, u1_bundle) = combine(&terms, weights);
    let xi_main = params.xi(record.main_item_id)?;
    let u_main = u1_main + xi_main;
    let u_bundle = u1_bundle + xi_main + virt.xi;
    let (p_main, p_bundle) = choice_probabilities(u_main, u_bundle)?;
    Ok(ChoiceEval {
        p: pc,
        p_clamped: pc != p,
        alpha,
        weights,
        terms,
        u1_main,
        u1_bundle,
        xi_main,
        xi_virtual: virt.xi,
        u_main,
        u_bundle,
        p_main,
        p_bundle,
    })
}

/// `(U(i_m), U(B))` with linear value-in-use utilities.
pub fn total_utilities(
    record: &ChoiceRecord,
    catalog: &Catalog,
    params: &ModelParams,
    p: f64,
) -> Result<(f64, f64)> {
    let e = evaluate_choice(record, catalog, params, p)?;
    Ok((e.u_main, e.u_bundle))
}

/// Bundle iff `P(B) > 0.5`; exact ties go to the item.
pub fn label_from_probability(p_bundle: f64) -> Label {
    if p_bundle > 0.5 {
        Label::BoughtBundle
    } else {
        Label::BoughtItem
    }
}

pub fn predict(
    record: &ChoiceRecord,
    catalog: &Catalog,
    params: &ModelParams,
    p: f64,
) -> Result<Label> {
    let e = evaluate_choice(record, catalog, params, p)?;
    Ok(label_from_probability(e.p_bundle))
}
