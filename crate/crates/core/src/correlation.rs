//! Correlation probability `p(i_v | i_m)` from co-purchase structure.
//!
//! The co-purchase matrix `F` counts, per unordered item pair, the users who
//! bought both items (individually or through a bundle). It is normalized as
//! `R = D^{-1/2} F D^{-1/2}` and the probability that a buyer of the main item
//! will need the rest of the bundle is modeled as
//! `σ((x_B ⊙ Φ_m)ᵀ R_m + b)`. `Φ` and `b` are fit by ridge regression on
//! logit-transformed empirical bundle-purchase ratios.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::catalog::{BundleId, Catalog, ChoiceRecord, ItemId, Label, UserId};
use crate::error::{ProbeError, Result};

/// Clamp applied to empirical target ratios before the logit transform.
pub const TARGET_EPS: f64 = 1e-3;

pub const DEFAULT_RIDGE_PENALTY: f64 = 1e-2;

/// Above this many parameters the normal equations are solved by conjugate
/// gradients instead of a dense Cholesky factorization.
const DENSE_SOLVE_LIMIT: usize = 3000;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Symmetric sparse co-purchase counts with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CoPurchaseMatrix {
    rows: Vec<BTreeMap<ItemId, f64>>,
    degree: Vec<f64>,
}

impl CoPurchaseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            rows: vec![BTreeMap::new(); n],
            degree: vec![0.0; n],
        }
    }

    /// Builds from `(row, col, count)` triplets covering both triangles.
    /// Diagonal entries are dropped; repeated coordinates accumulate.
    pub fn from_triplets(n: usize, triplets: impl IntoIterator<Item = (ItemId, ItemId, f64)>) -> Result<Self> {
        let mut m = Self::zeros(n);
        for (j, k, c) in triplets {
            if j >= n {
                return Err(ProbeError::UnknownItem(j));
            }
            if k >= n {
                return Err(ProbeError::UnknownItem(k));
            }
            if !(c >= 0.0) || !c.is_finite() {
                return Err(ProbeError::Validation(format!(
                    "co-purchase count ({j}, {k}) = {c} must be nonnegative"
                )));
            }
            if j == k || c == 0.0 {
                continue;
            }
            *m.rows[j].entry(k).or_insert(0.0) += c;
        }
        if let Some((j, k, c)) = m.triplets().find(|&(j, k, c)| m.get(k, j) != c) {
            return Err(ProbeError::Validation(format!(
                "co-purchase matrix is not symmetric: ({j}, {k}) = {c}, ({k}, {j}) = {}",
                m.get(k, j)
            )));
        }
        m.recompute_degree();
        Ok(m)
    }

    fn recompute_degree(&mut self) {
        self.degree = self.rows.iter().map(|r| r.values().sum()).collect();
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, j: ItemId, k: ItemId) -> f64 {
        self.rows.get(j).and_then(|r| r.get(&k)).copied().unwrap_or(0.0)
    }

    /// `D_jj = Σ_k F_jk`.
    pub fn degree(&self, j: ItemId) -> f64 {
        self.degree.get(j).copied().unwrap_or(0.0)
    }

    /// Nonzero entries in row-major order (both triangles).
    pub fn triplets(&self) -> impl Iterator<Item = (ItemId, ItemId, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(j, row)| row.iter().map(move |(&k, &c)| (j, k, c)))
    }

    pub fn is_symmetric(&self) -> bool {
        self.triplets().all(|(j, k, c)| self.get(k, j) == c)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.rows {
            for c in row.values_mut() {
                *c *= factor;
            }
        }
        out.recompute_degree();
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["row", "col", "count"])?;
        for (j, k, c) in self.triplets() {
            w.write_record([j.to_string(), k.to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, n: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut triplets = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = idx + 2;
            let field = |i: usize| -> Result<&str> {
                rec.get(i).ok_or_else(|| ProbeError::Parse {
                    path: "copurchase".into(),
                    line,
                    message: format!("missing column {i}"),
                })
            };
            let parse_err = |message: String| ProbeError::Parse {
                path: "copurchase".into(),
                line,
                message,
            };
            let j: ItemId = field(0)?.trim().parse().map_err(|e| parse_err(format!("row: {e}")))?;
            let k: ItemId = field(1)?.trim().parse().map_err(|e| parse_err(format!("col: {e}")))?;
            let c: f64 = field(2)?.trim().parse().map_err(|e| parse_err(format!("count: {e}")))?;
            triplets.push((j, k, c));
        }
        Self::from_triplets(n, triplets)
    }
}

/// Items bought by each user: individual purchases plus every member of each
/// purchased bundle.
pub type Baskets = BTreeMap<UserId, BTreeSet<ItemId>>;

pub fn baskets_from_records<'a>(
    records: impl IntoIterator<Item = &'a ChoiceRecord>,
    catalog: &Catalog,
) -> Result<Baskets> {
    let mut baskets = Baskets::new();
    for rec in records {
        let basket = baskets.entry(rec.user_id).or_default();
        match rec.label {
            Label::BoughtItem => {
                basket.insert(rec.main_item_id);
            }
            Label::BoughtBundle => {
                basket.extend(catalog.bundle(rec.bundle_id)?.items.iter().copied());
            }
        }
    }
    Ok(baskets)
}

/// Each unordered pair of distinct items in a user's basket adds one to both
/// `F_jk` and `F_kj`.
pub fn build_copurchase(baskets: &Baskets, n: usize) -> Result<CoPurchaseMatrix> {
    let mut m = CoPurchaseMatrix::zeros(n);
    for basket in baskets.values() {
        let items: Vec<ItemId> = basket.iter().copied().collect();
        if let Some(&bad) = items.iter().find(|&&i| i >= n) {
            return Err(ProbeError::UnknownItem(bad));
        }
        for (a, &j) in items.iter().enumerate() {
            for &k in &items[a + 1..] {
                *m.rows[j].entry(k).or_insert(0.0) += 1.0;
                *m.rows[k].entry(j).or_insert(0.0) += 1.0;
            }
        }
    }
    m.recompute_degree();
    Ok(m)
}

/// Degree-normalized co-purchase matrix `R`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NormalizedMatrix {
    rows: Vec<BTreeMap<ItemId, f64>>,
}

impl NormalizedMatrix {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, j: ItemId, k: ItemId) -> f64 {
        self.rows.get(j).and_then(|r| r.get(&k)).copied().unwrap_or(0.0)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (ItemId, ItemId, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(j, row)| row.iter().map(move |(&k, &v)| (j, k, v)))
    }

    pub fn from_triplets(n: usize, triplets: impl IntoIterator<Item = (ItemId, ItemId, f64)>) -> Result<Self> {
        let mut rows = vec![BTreeMap::new(); n];
        for (j, k, v) in triplets {
            if j >= n || k >= n {
                return Err(ProbeError::UnknownItem(j.max(k)));
            }
            if v != 0.0 {
                rows[j].insert(k, v);
            }
        }
        Ok(Self { rows })
    }
}

/// `R_jk = F_jk / sqrt(D_jj · D_kk)`; rows and columns of zero-degree items
/// are zero.
pub fn normalize(f: &CoPurchaseMatrix) -> NormalizedMatrix {
    let rows = f
        .rows
        .iter()
        .enumerate()
        .map(|(j, row)| {
            let dj = f.degree(j);
            row.iter()
                .filter_map(|(&k, &c)| {
                    let dk = f.degree(k);
                    (dj > 0.0 && dk > 0.0 && c > 0.0).then(|| (k, c / (dj * dk).sqrt()))
                })
                .collect()
        })
        .collect();
    NormalizedMatrix { rows }
}

/// Binary membership vector `x_B` stored sparsely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleIndicator {
    n: usize,
    members: Vec<ItemId>,
}

impl BundleIndicator {
    pub fn new(n: usize, members: &[ItemId]) -> Result<Self> {
        let mut members = members.to_vec();
        members.sort_unstable();
        members.dedup();
        if let Some(&bad) = members.iter().find(|&&i| i >= n) {
            return Err(ProbeError::DimensionMismatch {
                expected: n,
                got: bad + 1,
            });
        }
        if members.len() < 2 {
            return Err(ProbeError::InsufficientData(
                "bundle indicator needs at least two members".into(),
            ));
        }
        Ok(Self { n, members })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn members(&self) -> &[ItemId] {
        &self.members
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.members.binary_search(&item).is_ok()
    }

    pub fn to_dense(&self) -> Vec<u8> {
        let mut v = vec![0; self.n];
        for &i in &self.members {
            v[i] = 1;
        }
        v
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub samples: usize,
    pub parameters: usize,
    pub requested_penalty: f64,
    pub effective_penalty: f64,
    /// Set when the normal system was singular at the requested penalty and
    /// the penalty had to be raised.
    pub regularized: bool,
    pub residual_rms: f64,
    pub solver: String,
}

/// `Φ` (sparse, keyed by `(k, m)` = row of the additional item, column of the
/// main item), the offset `b`, and the normalized matrix `R` they act on.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationModel {
    pub r: NormalizedMatrix,
    pub phi: BTreeMap<(ItemId, ItemId), f64>,
    pub b: f64,
    pub diagnostics: FitDiagnostics,
}

impl CorrelationModel {
    pub fn new(r: NormalizedMatrix) -> Self {
        Self {
            r,
            phi: BTreeMap::new(),
            b: 0.0,
            diagnostics: FitDiagnostics::default(),
        }
    }

    pub fn n(&self) -> usize {
        self.r.n()
    }

    pub fn phi(&self, k: ItemId, m: ItemId) -> f64 {
        self.phi.get(&(k, m)).copied().unwrap_or(0.0)
    }

    /// Pre-sigmoid score `(x_B ⊙ Φ_m)ᵀ R_m + b`.
    pub fn score(&self, members: &[ItemId], main: ItemId) -> f64 {
        members
            .iter()
            .filter(|&&k| k != main)
            .map(|&k| self.phi(k, main) * self.r.get(k, main))
            .sum::<f64>()
            + self.b
    }

    /// Correlation probability for a catalog bundle.
    pub fn probability_for_bundle(&self, catalog: &Catalog, bundle: BundleId, main: ItemId) -> Result<f64> {
        let b = catalog.bundle(bundle)?;
        if !b.contains(main) {
            return Err(ProbeError::MainItemNotInBundle { item: main, bundle });
        }
        Ok(sigmoid(self.score(&b.items, main)))
    }
}

pub fn estimate_correlation(x_b: &BundleIndicator, main: ItemId, model: &CorrelationModel) -> Result<f64> {
    if x_b.n() != model.n() {
        return Err(ProbeError::DimensionMismatch {
            expected: model.n(),
            got: x_b.n(),
        });
    }
    if !x_b.contains(main) {
        return Err(ProbeError::InsufficientData(format!(
            "main item {main} is not set in the bundle indicator"
        )));
    }
    Ok(sigmoid(model.score(x_b.members(), main)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub bundle_purchases: usize,
    pub item_purchases: usize,
    /// `M(B)/M(i_m)` clamped into `[TARGET_EPS, 1 − TARGET_EPS]`.
    pub ratio: f64,
}

/// Empirical `M(B)/M(i_m)` per `(bundle, main item)` context. Contexts with no
/// item-only purchase are omitted.
pub fn empirical_targets(records: &[ChoiceRecord]) -> Result<BTreeMap<(BundleId, ItemId), Target>> {
    if records.is_empty() {
        return Err(ProbeError::EmptyInput("training records"));
    }
    let mut counts: BTreeMap<(BundleId, ItemId), (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = counts.entry((r.bundle_id, r.main_item_id)).or_default();
        match r.label {
            Label::BoughtBundle => e.0 += 1,
            Label::BoughtItem => e.1 += 1,
        }
    }
    Ok(counts
        .into_iter()
        .filter(|(_, (_, m_item))| *m_item > 0)
        .map(|(key, (m_b, m_i))| {
            let ratio = (m_b as f64 / m_i as f64).clamp(TARGET_EPS, 1.0 - TARGET_EPS);
            (
                key,
                Target {
                    bundle_purchases: m_b,
                    item_purchases: m_i,
                    ratio,
                },
            )
        })
        .collect())
}

/// One regression observation: a bundle, its main item, and the target
/// probability.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSample {
    pub members: Vec<ItemId>,
    pub main: ItemId,
    pub target: f64,
}

pub fn samples_from_targets(
    targets: &BTreeMap<(BundleId, ItemId), Target>,
    catalog: &Catalog,
) -> Result<Vec<CorrelationSample>> {
    targets
        .iter()
        .map(|(&(bundle, main), t)| {
            Ok(CorrelationSample {
                members: catalog.bundle(bundle)?.items.clone(),
                main,
                target: t.ratio,
            })
        })
        .collect()
}

/// Ridge fit of `logit(target) ≈ Σ_k Φ_{k,m} R_{k,m} + b` over the samples.
/// Only `Φ` entries with a nonzero `R` feature in some sample are estimated;
/// all others stay zero. `b` is penalized like the `Φ` entries.
pub fn fit_correlation(
    samples: &[CorrelationSample],
    r: NormalizedMatrix,
    ridge_penalty: f64,
) -> Result<CorrelationModel> {
    if samples.is_empty() {
        return Err(ProbeError::EmptyInput("correlation targets"));
    }
    if !(ridge_penalty >= 0.0) || !ridge_penalty.is_finite() {
        return Err(ProbeError::InvalidConfig(format!(
            "ridge penalty {ridge_penalty} must be nonnegative"
        )));
    }

    let mut index: BTreeMap<(ItemId, ItemId), usize> = BTreeMap::new();
    for s in samples {
        for &k in &s.members {
            if k != s.main && r.get(k, s.main) != 0.0 {
                let next = index.len();
                index.entry((k, s.main)).or_insert(next);
            }
        }
    }
    let dim = index.len() + 1;
    let bias_col = dim - 1;

    let mut design: Vec<Vec<(usize, f64)>> = Vec::with_capacity(samples.len());
    let mut y = Vec::with_capacity(samples.len());
    for s in samples {
        if !(s.target > 0.0 && s.target < 1.0) {
            return Err(ProbeError::InvalidProbability(s.target));
        }
        let mut row: Vec<(usize, f64)> = s
            .members
            .iter()
            .filter(|&&k| k != s.main)
            .filter_map(|&k| index.get(&(k, s.main)).map(|&c| (c, r.get(k, s.main))))
            .collect();
        row.push((bias_col, 1.0));
        design.push(row);
        y.push(logit(s.target));
    }

    let (theta, effective, regularized, solver) = if dim <= DENSE_SOLVE_LIMIT {
        solve_dense(&design, &y, dim, ridge_penalty)
    } else {
        let t = solve_cg(&design, &y, dim, ridge_penalty.max(1e-12));
        (t, ridge_penalty.max(1e-12), ridge_penalty < 1e-12, "conjugate-gradient")
    };

    let sse: f64 = design
        .iter()
        .zip(&y)
        .map(|(row, &yi)| {
            let pred: f64 = row.iter().map(|&(c, v)| theta[c] * v).sum();
            (pred - yi).powi(2)
        })
        .sum();

    let phi = index.iter().map(|(&key, &c)| (key, theta[c])).collect();
    Ok(CorrelationModel {
        r,
        phi,
        b: theta[bias_col],
        diagnostics: FitDiagnostics {
            samples: samples.len(),
            parameters: dim,
            requested_penalty: ridge_penalty,
            effective_penalty: effective,
            regularized,
            residual_rms: (sse / samples.len() as f64).sqrt(),
            solver: solver.to_string(),
        },
    })
}

fn solve_dense(design: &[Vec<(usize, f64)>], y: &[f64], dim: usize, penalty: f64) -> (Vec<f64>, f64, bool, &'static str) {
    let mut xtx = DMatrix::<f64>::zeros(dim, dim);
    let mut xty = DVector::<f64>::zeros(dim);
    for (row, &yi) in design.iter().zip(y) {
        for &(a, va) in row {
            xty[a] += va * yi;
            for &(b, vb) in row {
                xtx[(a, b)] += va * vb;
            }
        }
    }
    let scale = (0..dim).map(|i| xtx[(i, i)]).fold(0.0f64, f64::max).max(1.0);
    let mut lambda = penalty;
    let mut regularized = false;
    loop {
        let mut a = xtx.clone();
        for i in 0..dim {
            a[(i, i)] += lambda;
        }
        if let Some(chol) = a.clone().cholesky() {
            let theta = chol.solve(&xty);
            // A factorization that succeeds on a numerically rank-deficient
            // system can still produce garbage; check the residual.
            let resid = (&a * &theta - &xty).norm();
            if resid.is_finite() && resid <= 1e-8 * xty.norm().max(1.0) {
                return (theta.iter().copied().collect(), lambda, regularized, "cholesky");
            }
        }
        regularized = true;
        lambda = if lambda == 0.0 { 1e-10 * scale } else { lambda * 10.0 };
        log::warn!("ridge normal system singular; raising penalty to {lambda:e}");
    }
}

fn solve_cg(design: &[Vec<(usize, f64)>], y: &[f64], dim: usize, penalty: f64) -> Vec<f64> {
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut out: Vec<f64> = v.iter().map(|x| x * penalty).collect();
        for row in design {
            let dot: f64 = row.iter().map(|&(c, val)| v[c] * val).sum();
            for &(c, val) in row {
                out[c] += dot * val;
            }
        }
        out
    };
    let mut rhs = vec![0.0; dim];
    for (row, &yi) in design.iter().zip(y) {
        for &(c, v) in row {
            rhs[c] += v * yi;
        }
    }
    let mut x = vec![0.0; dim];
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rs: f64 = r.iter().map(|v| v * v).sum();
    let tol = 1e-24 * rs.max(1e-300);
    for _ in 0..(10 * dim).max(100) {
        if rs <= tol {
            break;
        }
        let ap = apply(&p);
        let alpha = rs / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..dim {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rs_new / rs;
        for i in 0..dim {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }
    x
}

/// Convenience: co-purchase matrix, normalization, targets, and ridge fit from
/// training records.
pub fn fit_from_records(records: &[ChoiceRecord], catalog: &Catalog, ridge_penalty: f64) -> Result<(CoPurchaseMatrix, CorrelationModel)> {
    let baskets = baskets_from_records(records, catalog)?;
    let f = build_copurchase(&baskets, catalog.n_items())?;
    let r = normalize(&f);
    let targets = empirical_targets(records)?;
    let model = if targets.is_empty() {
        // Every context was bundle-only: nothing to regress on.
        log::warn!("no context has an item-only purchase; correlation model left at Φ = 0, b = 0");
        CorrelationModel::new(r)
    } else {
        let samples = samples_from_targets(&targets, catalog)?;
        fit_correlation(&samples, r, ridge_penalty)?
    };
    Ok((f, model))
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    fn baskets(list: &[(UserId, &[ItemId])]) -> Baskets {
        let mut b = Baskets::new();
        for (u, items) in list {
            b.entry(*u).or_default().extend(items.iter().copied());
        }
        b
    }

    #[test]
    fn single_pair() {
        let f = build_copurchase(&baskets(&[(1, &[1, 2])]), 4).unwrap();
        assert_eq!(f.get(1, 2), 1.0);
        assert_eq!(f.get(2, 1), 1.0);
        assert_eq!(f.triplets().count(), 2);
    }

    #[test]
    fn bundle_members_are_copurchased() {
        let f = build_copurchase(&baskets(&[(1, &[1, 2, 3])]), 4).unwrap();
        for (j, k) in [(1, 2), (1, 3), (2, 3)] {
            assert_eq!(f.get(j, k), 1.0);
            assert_eq!(f.get(k, j), 1.0);
        }
        assert_eq!(f.get(1, 1), 0.0);
    }

    #[test]
    fn repeat_purchases_count_once_per_user() {
        // user 5 buys item 1, then item 2 twice
        let f = build_copurchase(&baskets(&[(5, &[1]), (5, &[2]), (5, &[2])]), 3).unwrap();
        assert_eq!(f.get(1, 2), 1.0);
    }

    #[test]
    fn out_of_range_item_rejected() {
        assert!(build_copurchase(&baskets(&[(1, &[0, 9])]), 3).is_err());
    }

    #[test]
    fn normalize_examples() {
        let f = CoPurchaseMatrix::from_triplets(2, [(0, 1, 4.0), (1, 0, 4.0)]).unwrap();
        let r = normalize(&f);
        assert_eq!(r.get(0, 1), 1.0);
        assert_eq!(r.get(1, 0), 1.0);
        assert_eq!(r.get(0, 0), 0.0);

        let f = CoPurchaseMatrix::from_triplets(4, [(0, 1, 1.0), (1, 0, 1.0), (0, 2, 1.0), (2, 0, 1.0)]).unwrap();
        let r = normalize(&f);
        assert_relative_eq!(r.get(0, 1), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_relative_eq!(r.get(0, 2), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        // item 3 is isolated
        for j in 0..4 {
            assert_eq!(r.get(3, j), 0.0);
            assert_eq!(r.get(j, 3), 0.0);
        }
    }

    fn model_with(n: usize, r: &[(ItemId, ItemId, f64)], phi: &[((ItemId, ItemId), f64)], b: f64) -> CorrelationModel {
        let mut m = CorrelationModel::new(NormalizedMatrix::from_triplets(n, r.iter().copied()).unwrap());
        m.phi = phi.iter().copied().collect();
        m.b = b;
        m
    }

    #[test]
    fn estimate_examples() {
        let x = BundleIndicator::new(3, &[0, 1]).unwrap();
        let zero = model_with(3, &[(1, 0, 0.5), (0, 1, 0.5)], &[], 0.0);
        assert_eq!(estimate_correlation(&x, 0, &zero).unwrap(), 0.5);

        let saturated = model_with(3, &[], &[], 40.0);
        assert!(estimate_correlation(&x, 0, &saturated).unwrap() > 1.0 - 1e-15);

        let m = model_with(3, &[(1, 0, 0.5), (0, 1, 0.5)], &[((1, 0), 2.0), ((0, 0), 100.0)], 0.0);
        assert_relative_eq!(estimate_correlation(&x, 0, &m).unwrap(), 0.731_058_578_630_004_9, epsilon = 1e-15);

        let wrong = BundleIndicator::new(4, &[0, 1]).unwrap();
        assert!(estimate_correlation(&wrong, 0, &m).is_err());
        assert!(estimate_correlation(&x, 2, &m).is_err());
        assert!(BundleIndicator::new(3, &[1]).is_err());
    }

    fn rec(bundle: BundleId, main: ItemId, label: Label) -> ChoiceRecord {
        ChoiceRecord {
            user_id: 0,
            main_item_id: main,
            bundle_id: bundle,
            label,
        }
    }

    #[test]
    fn target_ratios_and_clamps() {
        let mut recs = Vec::new();
        recs.extend(std::iter::repeat_n(rec(1, 0, Label::BoughtBundle), 2));
        recs.extend(std::iter::repeat_n(rec(1, 0, Label::BoughtItem), 8));
        recs.extend(std::iter::repeat_n(rec(2, 0, Label::BoughtItem), 5));
        recs.extend(std::iter::repeat_n(rec(3, 1, Label::BoughtBundle), 9));
        recs.extend(std::iter::repeat_n(rec(3, 1, Label::BoughtItem), 6));
        recs.extend(std::iter::repeat_n(rec(4, 1, Label::BoughtBundle), 3));
        let t = empirical_targets(&recs).unwrap();
        assert_eq!(t[&(1, 0)].ratio, 0.25);
        assert_eq!(t[&(2, 0)].ratio, 1e-3);
        assert_eq!(t[&(3, 1)].ratio, 1.0 - 1e-3);
        assert!(!t.contains_key(&(4, 1)));
        assert!(empirical_targets(&[]).is_err());
    }

    #[test]
    fn single_half_target_gives_zero_offset() {
        let r = NormalizedMatrix::from_triplets(2, []).unwrap();
        let s = [CorrelationSample {
            members: vec![0, 1],
            main: 0,
            target: 0.5,
        }];
        let m = fit_correlation(&s, r, 0.0).unwrap();
        assert!(m.b.abs() < 1e-12);
        assert!(m.phi.is_empty());
    }

    #[test]
    fn huge_penalty_shrinks_to_zero() {
        let r = NormalizedMatrix::from_triplets(3, [(1, 0, 0.5), (0, 1, 0.5), (2, 0, 0.3), (0, 2, 0.3)]).unwrap();
        let s = vec![
            CorrelationSample { members: vec![0, 1], main: 0, target: 0.9 },
            CorrelationSample { members: vec![0, 2], main: 0, target: 0.2 },
        ];
        let m = fit_correlation(&s, r, 1e12).unwrap();
        assert!(m.b.abs() < 1e-9);
        assert!(m.phi.values().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn singular_system_is_regularized_and_flagged() {
        // Two parameters plus offset but only one observation.
        let r = NormalizedMatrix::from_triplets(3, [(1, 0, 0.5), (0, 1, 0.5)]).unwrap();
        let s = vec![CorrelationSample { members: vec![0, 1], main: 0, target: 0.7 }];
        let m = fit_correlation(&s, r, 0.0).unwrap();
        assert!(m.diagnostics.regularized);
        assert!(m.diagnostics.effective_penalty > 0.0);
        assert!(m.b.is_finite());
    }

    #[test]
    fn triplet_csv_roundtrip() {
        let f = build_copurchase(&baskets(&[(1, &[0, 1, 2]), (2, &[0, 1])]), 3).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("row,col,count\n"));
        let back = CoPurchaseMatrix::read_csv(buf.as_slice(), 3).unwrap();
        assert_eq!(back, f);
    }
}
