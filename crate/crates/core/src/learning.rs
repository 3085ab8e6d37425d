//! Cross-entropy loss, analytic gradients, and per-record SGD.
//!
//! With `g = P(B) − y_B` the loss gradient with respect to the utility gap
//! `U(B) − U(i_m)`, the chain rule through the composite exponents
//! `α± = (α_u± + α_i±)/2` gives, for savings-centered users,
//!
//! ```text
//! ∂L/∂α_u⁺ = ∂L/∂α_i⁺ = ½ · g · u₁(c_B) · ln p
//! ∂L/∂α_u⁻ = ∂L/∂α_i⁻ = ½ · (P(i_m) − y_{i_m}) · u₁(c_m) · ln(1 − p)
//! ∂L/∂ξ_k              = g                  for every non-main member k
//! ```
//!
//! The other reference-point types place value terms on both options; the
//! same derivation applies term by term (see [`record_gradients`]).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ChoiceRecord, ItemId, Label};
use crate::correlation::CorrelationModel;
use crate::error::{ProbeError, Result};
use crate::model::{evaluate_choice, BiasPair, ChoiceEval, Hyperparams, ModelParams, WeightKind, PROB_EPS};

/// How the projection-bias exponents are treated during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum AlphaMode {
    /// Per-user and per-item coefficients, learned.
    #[default]
    Personal,
    /// One `(α⁺, α⁻)` for everyone, not learned.
    Fixed { plus: f64, minus: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub eta: f64,
    pub epochs: usize,
    pub seed: u64,
    pub alpha_clamp: [f64; 2],
    pub xi_init: f64,
    pub alpha_init: f64,
    pub p_clamp: f64,
    pub alpha_mode: AlphaMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            epochs: 20,
            seed: 0,
            alpha_clamp: [0.01, 10.0],
            xi_init: 0.0,
            alpha_init: 1.0,
            p_clamp: PROB_EPS,
            alpha_mode: AlphaMode::Personal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.alpha_clamp;
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(ProbeError::InvalidConfig(format!("eta={} must be positive", self.eta)));
        }
        if !(lo > 0.0 && lo <= hi) {
            return Err(ProbeError::InvalidConfig(format!(
                "alpha_clamp [{lo}, {hi}] must satisfy 0 < low <= high"
            )));
        }
        if !(self.alpha_init > 0.0) {
            return Err(ProbeError::InvalidConfig("alpha_init must be positive".into()));
        }
        if !(self.p_clamp > 0.0 && self.p_clamp < 0.5) {
            return Err(ProbeError::InvalidConfig("p_clamp must lie in (0, 0.5)".into()));
        }
        if let AlphaMode::Fixed { plus, minus } = self.alpha_mode {
            if !(plus > 0.0 && minus > 0.0) {
                return Err(ProbeError::InvalidConfig("fixed alphas must be positive".into()));
            }
        }
        Ok(())
    }

    fn initial_alpha(&self) -> BiasPair {
        match self.alpha_mode {
            AlphaMode::Personal => BiasPair::new(self.alpha_init, self.alpha_init),
            AlphaMode::Fixed { plus, minus } => BiasPair::new(plus, minus),
        }
    }
}

/// Parameters at initialization: every α at its initial value, every ξ at
/// `xi_init`, and one user entry per training user.
pub fn initial_params(records: &[ChoiceRecord], catalog: &Catalog, hyper: Hyperparams, config: &TrainConfig) -> ModelParams {
    let init = config.initial_alpha();
    let mut params = ModelParams::new(catalog.n_items(), hyper, init, config.xi_init);
    if config.alpha_mode == AlphaMode::Personal {
        for r in records {
            params.bias.user.entry(r.user_id).or_insert(init);
        }
    }
    params
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet {
    pub d_alpha_u_plus: f64,
    pub d_alpha_u_minus: f64,
    pub d_alpha_i_plus: f64,
    pub d_alpha_i_minus: f64,
    /// Sorted by item id; one entry per bundle member.
    pub d_xi: Vec<(ItemId, f64)>,
}

impl GradientSet {
    pub fn is_finite(&self) -> bool {
        [self.d_alpha_u_plus, self.d_alpha_u_minus, self.d_alpha_i_plus, self.d_alpha_i_minus]
            .iter()
            .chain(self.d_xi.iter().map(|(_, g)| g))
            .all(|g| g.is_finite())
    }
}

/// `−ln P(true label)` with the probability clamped away from zero.
pub fn record_loss(eval: &ChoiceEval, label: Label) -> f64 {
    let p_true = match label {
        Label::BoughtBundle => eval.p_bundle,
        Label::BoughtItem => eval.p_main,
    };
    -p_true.max(PROB_EPS).ln()
}

/// Mean per-record loss. Records that violate the price assumptions are
/// skipped with a warning.
pub fn cross_entropy_loss(records: &[ChoiceRecord], catalog: &Catalog, params: &ModelParams, correlation: &CorrelationModel) -> Result<f64> {
    if records.is_empty() {
        return Err(ProbeError::EmptyInput("records"));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for r in records {
        let p = correlation.probability_for_bundle(catalog, r.bundle_id, r.main_item_id)?;
        match evaluate_choice(r, catalog, params, p) {
            Ok(e) => {
                total += record_loss(&e, r.label);
                used += 1;
            }
            Err(ProbeError::PriceAssumption { .. }) => {
                log::warn!("skipping record {r:?}: price assumption violated");
            }
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(ProbeError::EmptyInput("records satisfying the price assumptions"));
    }
    Ok(total / used as f64)
}

fn gradients_from_eval(record: &ChoiceRecord, catalog: &Catalog, hyper: &Hyperparams, e: &ChoiceEval) -> Result<GradientSet> {
    let y_b = record.label.y_bundle();
    let g_bundle = e.p_bundle - y_b;
    let g_main = e.p_main - (1.0 - y_b);

    // ∂w/∂α for the composite exponent; zero for the CPT weights.
    let (dw_plus, dw_minus) = match hyper.weight_kind {
        WeightKind::Power => (e.weights.plus * e.p.ln(), e.weights.minus * (1.0 - e.p).ln()),
        WeightKind::Cpt => (0.0, 0.0),
    };
    let t = &e.terms;
    // ∂(U_B − U_m)/∂α± = (bundle term − main term)·∂w±/∂α±, halved by composition.
    let d_plus = 0.5 * g_bundle * (t.bundle_plus - t.main_plus) * dw_plus;
    let d_minus = 0.5 * g_bundle * (t.bundle_minus - t.main_minus) * dw_minus;

    let bundle = catalog.bundle(record.bundle_id)?;
    let d_xi = bundle
        .items
        .iter()
        .map(|&k| {
            if k == record.main_item_id {
                // ξ_m enters U(i_m) directly and U(B) through Σ_{i∈B} ξ_i.
                (k, g_main + g_bundle)
            } else {
                (k, g_bundle)
            }
        })
        .collect();

    Ok(GradientSet {
        d_alpha_u_plus: d_plus,
        d_alpha_u_minus: d_minus,
        d_alpha_i_plus: d_plus,
        d_alpha_i_minus: d_minus,
        d_xi,
    })
}

/// Analytic gradient of the per-record loss.
pub fn record_gradients(record: &ChoiceRecord, catalog: &Catalog, params: &ModelParams, p: f64) -> Result<GradientSet> {
    let e = evaluate_choice(record, catalog, params, p)?;
    gradients_from_eval(record, catalog, &params.hyper, &e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Epoch 0 is the loss at initialization.
    pub loss_trace: Vec<EpochLoss>,
    pub skipped_records: usize,
}

/// Per-record SGD over shuffled training records. `Φ` and `b` stay fixed, so
/// each record's correlation probability is computed once up front.
pub fn sgd_train(
    records: &[ChoiceRecord],
    catalog: &Catalog,
    correlation: &CorrelationModel,
    hyper: Hyperparams,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    hyper.validate()?;
    if records.is_empty() {
        return Err(ProbeError::EmptyInput("training records"));
    }
    let mut params = initial_params(records, catalog, hyper, config);

    let mut usable: Vec<(ChoiceRecord, f64)> = Vec::with_capacity(records.len());
    let mut skipped = 0usize;
    for r in records {
        let p = correlation
            .probability_for_bundle(catalog, r.bundle_id, r.main_item_id)?
            .clamp(config.p_clamp, 1.0 - config.p_clamp);
        match evaluate_choice(r, catalog, &params, p) {
            Ok(_) => usable.push((*r, p)),
            Err(ProbeError::PriceAssumption { .. }) => {
                log::warn!("skipping record {r:?}: price assumption violated");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if usable.is_empty() {
        return Err(ProbeError::EmptyInput("records satisfying the price assumptions"));
    }

    let mean_loss = |params: &ModelParams| -> Result<f64> {
        let mut total = 0.0;
        for (r, p) in &usable {
            total += record_loss(&evaluate_choice(r, catalog, params, *p)?, r.label);
        }
        Ok(total / usable.len() as f64)
    };

    let mut trace = vec![EpochLoss {
        epoch: 0,
        loss: mean_loss(&params)?,
    }];
    let [lo, hi] = config.alpha_clamp;
    let learn_alpha = config.alpha_mode == AlphaMode::Personal && hyper.weight_kind == WeightKind::Power;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for &idx in &order {
            let (r, p) = &usable[idx];
            let e = evaluate_choice(r, catalog, &params, *p)?;
            let grad = gradients_from_eval(r, catalog, &params.hyper, &e)?;
            if learn_alpha {
                let user = params.bias.user.entry(r.user_id).or_insert(params.bias.fallback);
                user.plus = (user.plus - config.eta * grad.d_alpha_u_plus).clamp(lo, hi);
                user.minus = (user.minus - config.eta * grad.d_alpha_u_minus).clamp(lo, hi);
                let item = &mut params.bias.item[r.main_item_id];
                item.plus = (item.plus - config.eta * grad.d_alpha_i_plus).clamp(lo, hi);
                item.minus = (item.minus - config.eta * grad.d_alpha_i_minus).clamp(lo, hi);
            }
            for (k, g) in grad.d_xi {
                params.xi[k] -= config.eta * g;
            }
        }
        let loss = mean_loss(&params)?;
        if !loss.is_finite() {
            return Err(ProbeError::Diverged { epoch, loss });
        }
        log::debug!("epoch {epoch}: loss {loss:.6}");
        trace.push(EpochLoss { epoch, loss });
    }

    Ok(TrainOutcome {
        params,
        loss_trace: trace,
        skipped_records: skipped,
    })
}

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub max_relative_error: f64,
    /// Set when the record sits at a clamp boundary where the loss is not
    /// smooth; no comparison is made.
    pub excluded: Option<String>,
    pub checks: Vec<ParamCheck>,
}

/// Compares [`record_gradients`] against central differences of the
/// per-record loss for every learnable scalar the record touches.
pub fn finite_difference_check(record: &ChoiceRecord, catalog: &Catalog, params: &ModelParams, p: f64, step: f64) -> Result<FdReport> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(ProbeError::InvalidConfig(format!("finite-difference step {step} must be positive")));
    }
    let mut base = params.clone();
    let user_alpha = base.bias.user(record.user_id);
    base.bias.user.insert(record.user_id, user_alpha);

    let e = evaluate_choice(record, catalog, &base, p)?;
    let p_true = match record.label {
        Label::BoughtBundle => e.p_bundle,
        Label::BoughtItem => e.p_main,
    };
    if e.p_clamped {
        return Ok(FdReport {
            max_relative_error: 0.0,
            excluded: Some(format!("correlation probability {p} is at the clamp boundary")),
            checks: Vec::new(),
        });
    }
    if p_true <= 2.0 * PROB_EPS {
        return Ok(FdReport {
            max_relative_error: 0.0,
            excluded: Some(format!("true-label probability {p_true} is at the clamp boundary")),
            checks: Vec::new(),
        });
    }
    let alpha_item = base.bias.item(record.main_item_id)?;
    let min_alpha = user_alpha.plus.min(user_alpha.minus).min(alpha_item.plus).min(alpha_item.minus);
    if step >= min_alpha {
        return Err(ProbeError::InvalidConfig(format!(
            "step {step} would push an exponent to a non-positive value"
        )));
    }

    let grad = gradients_from_eval(record, catalog, &base.hyper, &e)?;
    let loss_with = |edit: &dyn Fn(&mut ModelParams, f64), x: f64| -> f64 {
        let mut q = base.clone();
        edit(&mut q, x);
        evaluate_choice(record, catalog, &q, p)
            .map(|e| record_loss(&e, record.label))
            .unwrap_or(f64::NAN)
    };

    let user = record.user_id;
    let main = record.main_item_id;
    let mut checks = Vec::new();
    let mut push = |name: String, analytic: f64, numeric: f64| {
        checks.push(ParamCheck {
            relative_error: relative_error(analytic, numeric),
            name,
            analytic,
            numeric,
        });
    };

    let au = user_alpha;
    let ai = alpha_item;
    push(
        "alpha_u_plus".into(),
        grad.d_alpha_u_plus,
        central_difference(|x| loss_with(&|q, x| q.bias.user.get_mut(&user).unwrap().plus = x, x), au.plus, step),
    );
    push(
        "alpha_u_minus".into(),
        grad.d_alpha_u_minus,
        central_difference(|x| loss_with(&|q, x| q.bias.user.get_mut(&user).unwrap().minus = x, x), au.minus, step),
    );
    push(
        "alpha_i_plus".into(),
        grad.d_alpha_i_plus,
        central_difference(|x| loss_with(&|q, x| q.bias.item[main].plus = x, x), ai.plus, step),
    );
    push(
        "alpha_i_minus".into(),
        grad.d_alpha_i_minus,
        central_difference(|x| loss_with(&|q, x| q.bias.item[main].minus = x, x), ai.minus, step),
    );
    for &(k, g) in &grad.d_xi {
        let x0 = base.xi[k];
        push(
            format!("xi[{k}]"),
            g,
            central_difference(|x| loss_with(&|q, x| q.xi[k] = x, x), x0, step),
        );
    }

    let max_relative_error = checks.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    Ok(FdReport {
        max_relative_error,
        excluded: None,
        checks,
    })
}
