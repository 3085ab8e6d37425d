//! Confusion-matrix metrics, repeated stratified k-fold cross-validation, and
//! the per-user frequency baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ChoiceRecord, Label, UserId};
use crate::correlation::{fit_from_records, CoPurchaseMatrix, CorrelationModel, DEFAULT_RIDGE_PENALTY};
use crate::error::{ProbeError, Result};
use crate::learning::{sgd_train, EpochLoss, TrainConfig};
use crate::model::{evaluate_choice, label_from_probability, Hyperparams, ModelParams};

/// Counts with bundle purchase as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, predicted: Label, actual: Label) {
        match (predicted.is_bundle(), actual.is_bundle()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

pub fn confusion(predictions: &[Label], labels: &[Label]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(ProbeError::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        cm.add(p, y);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when any of the three had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub fn prf1(cm: &ConfusionMatrix) -> Metrics {
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Metrics {
        precision,
        recall,
        f1,
        degenerate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Fraction of each training split used for fitting.
    pub sampling_rate: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            repeats: 5,
            seed: 0,
            sampling_rate: 1.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(ProbeError::InvalidConfig(format!("folds={} must be at least 2", self.folds)));
        }
        if self.repeats < 1 {
            return Err(ProbeError::InvalidConfig("repeats must be at least 1".into()));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(ProbeError::InvalidConfig(format!(
                "sampling rate {} must lie in (0, 1]",
                self.sampling_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hyper: Hyperparams,
    pub train: TrainConfig,
    pub ridge_penalty: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hyper: Hyperparams::default(),
            train: TrainConfig::default(),
            ridge_penalty: DEFAULT_RIDGE_PENALTY,
        }
    }
}

/// SplitMix64 finalizer over `(master, a, b)`; gives independent job seeds.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut z = master
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Index partition into `k` folds, stratified by label. Each class is shuffled
/// and dealt round-robin, continuing the deal across classes, so fold sizes
/// differ by at most one.
pub fn stratified_folds(records: &[ChoiceRecord], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(ProbeError::InvalidConfig(format!("folds={k} must be at least 2")));
    }
    if records.len() < k {
        return Err(ProbeError::InsufficientData(format!(
            "{} records cannot fill {k} folds",
            records.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0usize;
    for class in [Label::BoughtBundle, Label::BoughtItem] {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Everything produced by fitting on one training set.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub copurchase: CoPurchaseMatrix,
    pub correlation: CorrelationModel,
    pub params: ModelParams,
    pub loss_trace: Vec<EpochLoss>,
}

/// Correlation fit followed by SGD, both on `train` only.
pub fn fit_model(train: &[ChoiceRecord], catalog: &Catalog, config: &ModelConfig) -> Result<FittedModel> {
    let (copurchase, correlation) = fit_from_records(train, catalog, config.ridge_penalty)?;
    let outcome = sgd_train(train, catalog, &correlation, config.hyper, &config.train)?;
    Ok(FittedModel {
        copurchase,
        correlation,
        params: outcome.params,
        loss_trace: outcome.loss_trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub predicted: Vec<Label>,
    pub actual: Vec<Label>,
    pub p_bundle: Vec<f64>,
    /// Records violating the price assumptions; not scored.
    pub skipped: usize,
}

pub fn predict_records(
    records: &[ChoiceRecord],
    catalog: &Catalog,
    correlation: &CorrelationModel,
    params: &ModelParams,
    p_clamp: f64,
) -> Result<Predictions> {
    let mut out = Predictions {
        predicted: Vec::with_capacity(records.len()),
        actual: Vec::with_capacity(records.len()),
        p_bundle: Vec::with_capacity(records.len()),
        skipped: 0,
    };
    for r in records {
        let p = correlation
            .probability_for_bundle(catalog, r.bundle_id, r.main_item_id)?
            .clamp(p_clamp, 1.0 - p_clamp);
        match evaluate_choice(r, catalog, params, p) {
            Ok(e) => {
                out.predicted.push(label_from_probability(e.p_bundle));
                out.actual.push(r.label);
                out.p_bundle.push(e.p_bundle);
            }
            Err(ProbeError::PriceAssumption { .. }) => out.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Per-user bundle rates `M(B)/(M(B) + M(i_m))` from `train`, plus the global
/// rate for users absent from it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyRates {
    pub per_user: BTreeMap<UserId, f64>,
    pub global: f64,
}

impl FrequencyRates {
    pub fn fit(train: &[ChoiceRecord]) -> Result<Self> {
        if train.is_empty() {
            return Err(ProbeError::EmptyInput("baseline training records"));
        }
        let mut counts: BTreeMap<UserId, (usize, usize)> = BTreeMap::new();
        for r in train {
            let c = counts.entry(r.user_id).or_default();
            if r.label.is_bundle() {
                c.0 += 1;
            }
            c.1 += 1;
        }
        let bundles: usize = counts.values().map(|c| c.0).sum();
        Ok(Self {
            per_user: counts.into_iter().map(|(u, (b, n))| (u, b as f64 / n as f64)).collect(),
            global: bundles as f64 / train.len() as f64,
        })
    }

    pub fn rate(&self, user: UserId) -> f64 {
        self.per_user.get(&user).copied().unwrap_or(self.global)
    }
}

/// Predicts each test record as a bundle purchase with the user's training
/// bundle rate.
pub fn frequency_baseline(train: &[ChoiceRecord], test: &[ChoiceRecord], seed: u64) -> Result<(Vec<Label>, ConfusionMatrix, Metrics)> {
    let rates = FrequencyRates::fit(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let predicted: Vec<Label> = test
        .iter()
        .map(|r| {
            let u: f64 = rng.random();
            if u < rates.rate(r.user_id) {
                Label::BoughtBundle
            } else {
                Label::BoughtItem
            }
        })
        .collect();
    let actual: Vec<Label> = test.iter().map(|r| r.label).collect();
    let cm = confusion(&predicted, &actual)?;
    Ok((predicted, cm, prf1(&cm)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub repeat: usize,
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub skipped: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub method: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub folds: Vec<FoldResult>,
}

impl MetricReport {
    fn from_folds(method: &str, folds: Vec<FoldResult>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean = |f: fn(&Metrics) -> f64| folds.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        Self {
            method: method.to_string(),
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            f1: mean(|m| m.f1),
            folds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub probe: Option<MetricReport>,
    pub baseline: MetricReport,
}

fn subsample(train: Vec<ChoiceRecord>, rate: f64, seed: u64) -> Vec<ChoiceRecord> {
    if rate >= 1.0 {
        return train;
    }
    let keep = ((train.len() as f64 * rate).ceil() as usize).clamp(1, train.len());
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(keep);
    idx.sort_unstable();
    idx.into_iter().map(|i| train[i]).collect()
}

/// Repeated stratified k-fold evaluation of the full model and the frequency
/// baseline on the same splits. Each repeat re-partitions the records and
/// each fold trains with its own derived seed. Folds run on the current rayon
/// pool; results are ordered by `(repeat, fold)`.
pub fn cross_validate(
    records: &[ChoiceRecord],
    catalog: &Catalog,
    model: &ModelConfig,
    eval: &EvalConfig,
    baseline_only: bool,
) -> Result<CvReport> {
    eval.validate()?;
    let mut jobs = Vec::new();
    for repeat in 0..eval.repeats {
        let folds = stratified_folds(records, eval.folds, derive_seed(eval.seed, repeat as u64, 0))?;
        for (fold, test_idx) in folds.iter().enumerate() {
            let mut in_test = vec![false; records.len()];
            for &i in test_idx {
                in_test[i] = true;
            }
            let train: Vec<ChoiceRecord> = (0..records.len()).filter(|&i| !in_test[i]).map(|i| records[i]).collect();
            let test: Vec<ChoiceRecord> = test_idx.iter().map(|&i| records[i]).collect();
            jobs.push((repeat, fold, train, test));
        }
    }

    type JobOut = (Option<FoldResult>, FoldResult);
    let results: Vec<JobOut> = jobs
        .into_par_iter()
        .map(|(repeat, fold, train, test)| -> Result<JobOut> {
            let job_seed = derive_seed(eval.seed, repeat as u64, fold as u64 + 1);
            let train = subsample(train, eval.sampling_rate, job_seed ^ 0x5A5A);
            if test.is_empty() {
                return Err(ProbeError::EmptyInput("test split"));
            }
            let (_, cm_b, m_b) = frequency_baseline(&train, &test, job_seed ^ 0xB0B0)?;
            let base = FoldResult {
                repeat,
                fold,
                train_size: train.len(),
                test_size: test.len(),
                skipped: 0,
                confusion: cm_b,
                metrics: m_b,
            };
            if baseline_only {
                return Ok((None, base));
            }
            let mut cfg = *model;
            cfg.train.seed = job_seed;
            let fitted = fit_model(&train, catalog, &cfg)?;
            let preds = predict_records(&test, catalog, &fitted.correlation, &fitted.params, cfg.train.p_clamp)?;
            if preds.predicted.is_empty() {
                return Err(ProbeError::EmptyInput("test split"));
            }
            let cm = confusion(&preds.predicted, &preds.actual)?;
            let probe = FoldResult {
                repeat,
                fold,
                train_size: train.len(),
                test_size: preds.predicted.len(),
                skipped: preds.skipped,
                confusion: cm,
                metrics: prf1(&cm),
            };
            Ok((Some(probe), base))
        })
        .collect::<Result<_>>()?;

    let (probe, base): (Vec<Option<FoldResult>>, Vec<FoldResult>) = results.into_iter().unzip();
    let probe: Option<Vec<FoldResult>> = probe.into_iter().collect();
    Ok(CvReport {
        probe: probe.map(|f| MetricReport::from_folds("Probe", f)),
        baseline: MetricReport::from_folds("Frequency", base),
    })
}

/// Plain-text table with columns Method, Precision, Recall, F1.
pub fn format_table(reports: &[&MetricReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>9} {:>9} {:>9}", "Method", "Precision", "Recall", "F1");
    for r in reports {
        let _ = writeln!(s, "{:<16} {:>9.3} {:>9.3} {:>9.3}", r.method, r.precision, r.recall, r.f1);
    }
    s
}
