//! Synthetic worlds sampled from the model itself, for parameter-recovery
//! experiments.
//!
//! A world has a catalog whose bundles all satisfy the pricing assumptions,
//! a planted correlation model built on background co-purchase baskets, and a
//! planted population whose users belong to bias groups. Each decision is a
//! context `(main item, cheapest bundle containing it)`; its label is drawn
//! from the planted `P(B)`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::analysis::pearson;
use crate::catalog::{Bundle, BundleId, Catalog, ChoiceRecord, Item, ItemId, Label, UserId};
use crate::correlation::{build_copurchase, normalize, Baskets, CorrelationModel};
use crate::error::{ProbeError, Result};
use crate::eval::{confusion, derive_seed, fit_model, frequency_baseline, predict_records, prf1, stratified_folds, ModelConfig};
use crate::ingest::{EventKind, RawEvent};
use crate::model::{evaluate_choice, BiasPair, Hyperparams, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasGroup {
    /// Relative share of users.
    pub weight: f64,
    pub alpha_plus: f64,
    pub alpha_minus: f64,
    /// Log-scale standard deviation around the group means.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_bundles: usize,
    pub n_users: usize,
    pub records_per_user: f64,
    /// Log-scale spread of the per-user record count.
    pub records_sigma: f64,
    pub price_range: [f64; 2],
    pub discount_range: [f64; 2],
    pub bundle_size: [usize; 2],
    pub groups: Vec<BiasGroup>,
    /// Mean and standard deviation of the planted values in use.
    pub xi_mean: f64,
    pub xi_sd: f64,
    /// Planted `Φ*` entries are drawn uniformly from `[-phi_scale, phi_scale]`.
    pub phi_scale: f64,
    pub b: f64,
    /// Number of background baskets that shape the co-purchase matrix.
    pub background_baskets: usize,
    pub hyper: Hyperparams,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 50,
            n_bundles: 10,
            n_users: 500,
            records_per_user: 10.0,
            records_sigma: 0.8,
            price_range: [20.0, 200.0],
            discount_range: [0.55, 0.85],
            bundle_size: [2, 4],
            groups: vec![
                BiasGroup {
                    weight: 0.5,
                    alpha_plus: 0.5,
                    alpha_minus: 2.0,
                    spread: 0.1,
                },
                BiasGroup {
                    weight: 0.5,
                    alpha_plus: 2.0,
                    alpha_minus: 0.5,
                    spread: 0.1,
                },
            ],
            xi_mean: -0.6,
            xi_sd: 1.0,
            phi_scale: 4.0,
            b: 0.0,
            background_baskets: 500,
            hyper: Hyperparams::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ProbeError::InvalidConfig(m));
        if self.n_bundles == 0 {
            return bad("n_bundles must be at least 1".into());
        }
        if self.n_users == 0 {
            return bad("n_users must be at least 1".into());
        }
        let [smin, smax] = self.bundle_size;
        if smin < 2 || smin > smax || smax > self.n_items {
            return bad(format!("bundle_size [{smin}, {smax}] must satisfy 2 <= low <= high <= n_items"));
        }
        let [pmin, pmax] = self.price_range;
        if !(pmin > 0.0 && pmin <= pmax) {
            return bad(format!("price_range [{pmin}, {pmax}] must be positive and ordered"));
        }
        let [rmin, rmax] = self.discount_range;
        if !(rmin > 0.0 && rmin <= rmax && rmax < 1.0) {
            return bad(format!("discount_range [{rmin}, {rmax}] must lie inside (0, 1)"));
        }
        if self.groups.is_empty() || self.groups.iter().any(|g| !(g.weight > 0.0 && g.alpha_plus > 0.0 && g.alpha_minus > 0.0 && g.spread >= 0.0)) {
            return bad("bias groups need positive weights and means, nonnegative spreads".into());
        }
        if !(self.records_per_user >= 1.0) || !(self.records_sigma >= 0.0) {
            return bad("records_per_user must be >= 1 and records_sigma >= 0".into());
        }
        self.hyper.validate()
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub catalog: Catalog,
    pub planted: ModelParams,
    pub correlation: CorrelationModel,
    /// `(main item, bundle)` pairs a decision can be about.
    pub contexts: Vec<(ItemId, BundleId)>,
    pub user_group: BTreeMap<UserId, usize>,
}

const MAX_ATTEMPTS: usize = 10_000;

fn make_bundles(config: &SynthConfig, items: &[Item], rng: &mut ChaCha8Rng) -> Result<Vec<Bundle>> {
    let [smin, smax] = config.bundle_size;
    let [rmin, rmax] = config.discount_range;
    let ids: Vec<ItemId> = (0..items.len()).collect();
    let mut bundles = Vec::with_capacity(config.n_bundles);
    let mut seen = BTreeSet::new();
    let mut attempts = 0;
    while bundles.len() < config.n_bundles {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(ProbeError::InvalidConfig(
                "could not construct bundles satisfying the price assumptions".into(),
            ));
        }
        let size = rng.random_range(smin..=smax);
        let mut members: Vec<ItemId> = ids.choose_multiple(rng, size).copied().collect();
        members.sort_unstable();
        if !seen.insert(members.clone()) {
            continue;
        }
        let total: f64 = members.iter().map(|&i| items[i].price).sum();
        let top = members.iter().map(|&i| items[i].price).fold(0.0, f64::max);
        // c_B must exceed every member price so any member can be the main item
        let lo = rmin.max(top / total + 0.02);
        if lo >= rmax {
            seen.remove(&members);
            continue;
        }
        let r = rng.random_range(lo..=rmax);
        let price = (r * total * 100.0).round() / 100.0;
        if !(price > top && price < total) {
            seen.remove(&members);
            continue;
        }
        bundles.push(Bundle::new(bundles.len() as BundleId, members, price));
    }
    Ok(bundles)
}

/// Builds the catalog, planted population, and planted correlation model.
pub fn generate_world(config: &SynthConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1, 0));
    let [pmin, pmax] = config.price_range;
    let items: Vec<Item> = (0..config.n_items)
        .map(|id| Item {
            id,
            price: (rng.random_range(pmin..=pmax) * 100.0).round() / 100.0,
        })
        .collect();
    let bundles = make_bundles(config, &items, &mut rng)?;
    let catalog = Catalog::new(items, bundles)?;
    if !catalog.flagged().is_empty() {
        return Err(ProbeError::Validation("generated bundle failed validation".into()));
    }

    let mut contexts = Vec::new();
    for m in 0..catalog.n_items() {
        if let Some(b) = catalog.cheapest_bundle_containing(m) {
            contexts.push((m, b.id));
        }
    }

    // Background baskets: one to three bundles each, plus a stray item.
    let all_bundles: Vec<&Bundle> = catalog.bundles().collect();
    let mut baskets = Baskets::new();
    for u in 0..config.background_baskets as UserId {
        let basket = baskets.entry(u).or_default();
        for _ in 0..rng.random_range(1..=3usize) {
            basket.extend(all_bundles.choose(&mut rng).unwrap().items.iter().copied());
        }
        basket.insert(rng.random_range(0..catalog.n_items()));
    }
    let f = build_copurchase(&baskets, catalog.n_items())?;
    let mut correlation = CorrelationModel::new(normalize(&f));
    for b in catalog.bundles() {
        for &m in &b.items {
            for k in b.additional_items(m) {
                correlation
                    .phi
                    .entry((k, m))
                    .or_insert_with(|| rng.random_range(-config.phi_scale..=config.phi_scale));
            }
        }
    }
    correlation.b = config.b;

    let normal = Normal::new(config.xi_mean, config.xi_sd.max(0.0)).map_err(|e| ProbeError::InvalidConfig(e.to_string()))?;
    let mut planted = ModelParams::new(catalog.n_items(), config.hyper, BiasPair::UNBIASED, 0.0);
    for x in planted.xi.iter_mut() {
        *x = normal.sample(&mut rng);
    }
    let total_weight: f64 = config.groups.iter().map(|g| g.weight).sum();
    let mut user_group = BTreeMap::new();
    for u in 0..config.n_users as UserId {
        let mut pick = rng.random_range(0.0..total_weight);
        let mut gi = config.groups.len() - 1;
        for (i, g) in config.groups.iter().enumerate() {
            if pick < g.weight {
                gi = i;
                break;
            }
            pick -= g.weight;
        }
        let g = &config.groups[gi];
        let draw = |mean: f64, rng: &mut ChaCha8Rng| -> f64 {
            if g.spread == 0.0 {
                mean
            } else {
                LogNormal::new(mean.ln(), g.spread).map(|d| d.sample(rng)).unwrap_or(mean)
            }
        };
        let plus = draw(g.alpha_plus, &mut rng);
        let minus = draw(g.alpha_minus, &mut rng);
        planted.bias.user.insert(u, BiasPair::new(plus, minus));
        user_group.insert(u, gi);
    }

    Ok(World {
        catalog,
        planted,
        correlation,
        contexts,
        user_group,
    })
}

/// Planted `P(B)` of one decision.
pub fn planted_probability(world: &World, record: &ChoiceRecord) -> Result<f64> {
    let p = world
        .correlation
        .probability_for_bundle(&world.catalog, record.bundle_id, record.main_item_id)?;
    Ok(evaluate_choice(record, &world.catalog, &world.planted, p)?.p_bundle)
}

/// Draws a record count per user (log-normal) and a label per decision from
/// the planted model. Records are ordered by user, then decision.
pub fn sample_records(world: &World, config: &SynthConfig) -> Result<Vec<ChoiceRecord>> {
    if world.contexts.is_empty() {
        return Err(ProbeError::InsufficientData("world has no decision contexts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2, 0));
    let sigma = config.records_sigma;
    let mu = config.records_per_user.ln() - 0.5 * sigma * sigma;
    let counts = LogNormal::new(mu, sigma.max(1e-12)).map_err(|e| ProbeError::InvalidConfig(e.to_string()))?;
    let mut out = Vec::new();
    for &user_id in world.user_group.keys() {
        let n = (counts.sample(&mut rng).round() as usize).max(1);
        for _ in 0..n {
            let &(main_item_id, bundle_id) = world.contexts.choose(&mut rng).unwrap();
            let mut record = ChoiceRecord {
                user_id,
                main_item_id,
                bundle_id,
                label: Label::BoughtItem,
            };
            let pb = planted_probability(world, &record)?;
            if rng.random::<f64>() < pb {
                record.label = Label::BoughtBundle;
            }
            out.push(record);
        }
    }
    Ok(out)
}

/// Purchase events that [`crate::ingest::derive_choice_records`] maps back to
/// exactly `records`: bundle purchases carry playtime that makes the main item
/// the longest played member.
pub fn records_to_events(records: &[ChoiceRecord], catalog: &Catalog, seed: u64) -> Result<Vec<RawEvent>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records
        .iter()
        .map(|r| {
            Ok(match r.label {
                Label::BoughtItem => RawEvent {
                    user: r.user_id,
                    kind: EventKind::Item,
                    id: r.main_item_id as u64,
                    playtime: BTreeMap::new(),
                },
                Label::BoughtBundle => {
                    let b = catalog.bundle(r.bundle_id)?;
                    let playtime = b
                        .items
                        .iter()
                        .map(|&i| {
                            let hours = if i == r.main_item_id {
                                rng.random_range(10.0..20.0)
                            } else {
                                rng.random_range(0.0..5.0)
                            };
                            (i, (hours * 10.0f64).round() / 10.0)
                        })
                        .collect();
                    RawEvent {
                        user: r.user_id,
                        kind: EventKind::Bundle,
                        id: r.bundle_id,
                        playtime,
                    }
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    /// Held-out share, realized as one stratified fold of `round(1/holdout)`.
    pub holdout: f64,
    pub min_user_records: usize,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            holdout: 0.2,
            min_user_records: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserRecovery {
    pub user_id: UserId,
    pub records: usize,
    pub planted: BiasPair,
    pub learned: BiasPair,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub records: usize,
    pub train_records: usize,
    pub test_records: usize,
    pub bundle_share: f64,
    pub probe_f1: f64,
    pub baseline_f1: f64,
    /// Users with at least `min_user_records` training records whose planted
    /// group has `α⁺ ≠ 1`.
    pub sign_users: usize,
    pub sign_recovered: usize,
    pub sign_fraction: Option<f64>,
    pub planted_pearson: Option<f64>,
    pub learned_pearson: Option<f64>,
    pub learned_alpha_plus_quartiles: Option<[f64; 3]>,
    pub users: Vec<UserRecovery>,
}

fn quartiles(values: &[f64]) -> Option<[f64; 3]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |f: f64| v[((v.len() - 1) as f64 * f).round() as usize];
    Some([q(0.25), q(0.5), q(0.75)])
}

/// Generates a world, samples records, fits on a stratified training split,
/// and compares the learned model with the planted truth and with the
/// frequency baseline on the held-out split.
pub fn recovery_experiment(config: &RecoveryConfig) -> Result<RecoveryReport> {
    let world = generate_world(&config.synth)?;
    let records = sample_records(&world, &config.synth)?;
    recovery_on_records(&world, &records, config)
}

pub fn holdout_split(records: &[ChoiceRecord], holdout: f64, seed: u64) -> Result<(Vec<ChoiceRecord>, Vec<ChoiceRecord>)> {
    if !(holdout > 0.0 && holdout < 1.0) {
        return Err(ProbeError::InvalidConfig(format!("holdout {holdout} must lie in (0, 1)")));
    }
    let k = ((1.0 / holdout).round() as usize).max(2);
    let folds = stratified_folds(records, k, seed)?;
    let mut in_test = vec![false; records.len()];
    for &i in &folds[0] {
        in_test[i] = true;
    }
    let (test, train): (Vec<_>, Vec<_>) = records.iter().enumerate().partition(|(i, _)| in_test[*i]);
    Ok((train.into_iter().map(|(_, r)| *r).collect(), test.into_iter().map(|(_, r)| *r).collect()))
}

pub fn recovery_on_records(world: &World, records: &[ChoiceRecord], config: &RecoveryConfig) -> Result<RecoveryReport> {
    let seed = config.synth.seed;
    let (train, test) = holdout_split(records, config.holdout, derive_seed(seed, 3, 0))?;
    let mut model_cfg = config.model;
    model_cfg.train.seed = derive_seed(seed, 4, 0);
    let fitted = fit_model(&train, &world.catalog, &model_cfg)?;
    let preds = predict_records(&test, &world.catalog, &fitted.correlation, &fitted.params, model_cfg.train.p_clamp)?;
    let probe_f1 = prf1(&confusion(&preds.predicted, &preds.actual)?).f1;
    let (_, _, base) = frequency_baseline(&train, &test, derive_seed(seed, 5, 0))?;

    let expected: BTreeMap<UserId, BiasPair> = world
        .user_group
        .iter()
        .map(|(&u, &g)| {
            let group = &config.synth.groups[g];
            (u, BiasPair::new(group.alpha_plus, group.alpha_minus))
        })
        .collect();
    let cmp = compare_biases(&world.planted, &expected, &fitted.params, &train, config.min_user_records);
    Ok(RecoveryReport {
        records: records.len(),
        train_records: train.len(),
        test_records: test.len(),
        bundle_share: records.iter().filter(|r| r.label.is_bundle()).count() as f64 / records.len() as f64,
        probe_f1,
        baseline_f1: base.f1,
        sign_users: cmp.sign_users,
        sign_recovered: cmp.sign_recovered,
        sign_fraction: cmp.sign_fraction,
        planted_pearson: cmp.planted_pearson,
        learned_pearson: cmp.learned_pearson,
        learned_alpha_plus_quartiles: cmp.learned_alpha_plus_quartiles,
        users: cmp.users,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasComparison {
    pub sign_users: usize,
    pub sign_recovered: usize,
    pub sign_fraction: Option<f64>,
    pub planted_pearson: Option<f64>,
    pub learned_pearson: Option<f64>,
    pub learned_alpha_plus_quartiles: Option<[f64; 3]>,
    pub users: Vec<UserRecovery>,
}

/// Planted versus learned exponents for every user in `train`. The sign of
/// `α⁺ − 1` is scored against `expected` (the planted group means) for users
/// with at least `min_user_records` records whose expected `α⁺` is not 1.
pub fn compare_biases(
    planted: &ModelParams,
    expected: &BTreeMap<UserId, BiasPair>,
    learned: &ModelParams,
    train: &[ChoiceRecord],
    min_user_records: usize,
) -> BiasComparison {
    let mut per_user: BTreeMap<UserId, usize> = BTreeMap::new();
    for r in train {
        *per_user.entry(r.user_id).or_default() += 1;
    }
    let mut users = Vec::new();
    let (mut sign_users, mut sign_recovered) = (0, 0);
    for (&u, &n) in &per_user {
        let learned_u = learned.bias.user(u);
        if let Some(e) = expected.get(&u).filter(|e| e.plus != 1.0) {
            if n >= min_user_records {
                sign_users += 1;
                if (learned_u.plus - 1.0).signum() == (e.plus - 1.0).signum() {
                    sign_recovered += 1;
                }
            }
        }
        users.push(UserRecovery {
            user_id: u,
            records: n,
            planted: planted.bias.user(u),
            learned: learned_u,
        });
    }
    let col = |f: fn(&UserRecovery) -> f64| users.iter().map(f).collect::<Vec<f64>>();
    let learned_plus = col(|u| u.learned.plus);
    BiasComparison {
        sign_users,
        sign_recovered,
        sign_fraction: (sign_users > 0).then(|| sign_recovered as f64 / sign_users as f64),
        planted_pearson: pearson(&col(|u| u.planted.plus), &col(|u| u.planted.minus)),
        learned_pearson: pearson(&learned_plus, &col(|u| u.learned.minus)),
        learned_alpha_plus_quartiles: quartiles(&learned_plus),
        users,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::derive_choice_records;
    use crate::model::price_terms;

    fn small() -> SynthConfig {
        SynthConfig {
            n_items: 10,
            n_bundles: 5,
            n_users: 40,
            background_baskets: 50,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn worlds_satisfy_price_assumptions() {
        let cfg = small();
        let w = generate_world(&cfg).unwrap();
        assert_eq!(w.catalog.n_bundles(), 5);
        assert!(w.catalog.flagged().is_empty());
        for b in w.catalog.bundles() {
            for &m in &b.items {
                let c_m = w.catalog.price(m).unwrap();
                let c_v: f64 = b.additional_items(m).map(|i| w.catalog.price(i).unwrap()).sum();
                assert!(price_terms(cfg.hyper.reference_point, c_m, c_v, b.price, &cfg.hyper).is_ok());
            }
        }
    }

    #[test]
    fn zero_bundles_is_an_error() {
        let cfg = SynthConfig { n_bundles: 0, ..small() };
        assert!(generate_world(&cfg).is_err());
    }

    #[test]
    fn seeded_worlds_and_records_are_identical() {
        let cfg = small();
        let (a, b) = (generate_world(&cfg).unwrap(), generate_world(&cfg).unwrap());
        assert_eq!(a.planted, b.planted);
        assert_eq!(a.contexts, b.contexts);
        assert_eq!(a.correlation, b.correlation);
        assert_eq!(sample_records(&a, &cfg).unwrap(), sample_records(&b, &cfg).unwrap());
    }

    #[test]
    fn certain_bundle_context_always_sells_the_bundle() {
        let cfg = small();
        let mut w = generate_world(&cfg).unwrap();
        let &(m, b) = &w.contexts[0];
        for k in w.catalog.bundle(b).unwrap().additional_items(m).collect::<Vec<_>>() {
            w.planted.xi[k] = 1e3;
        }
        let recs = sample_records(&w, &cfg).unwrap();
        let hits: Vec<_> = recs.iter().filter(|r| (r.main_item_id, r.bundle_id) == (m, b)).collect();
        assert!(!hits.is_empty());
        assert!(hits.iter().all(|r| r.label == Label::BoughtBundle));
    }

    #[test]
    fn even_context_sells_half_the_time() {
        // One bundle, one context, ξ tuned so the planted P(B) is exactly 0.5.
        let cfg = SynthConfig {
            n_items: 2,
            n_bundles: 1,
            n_users: 4000,
            records_per_user: 1.0,
            records_sigma: 0.0,
            bundle_size: [2, 2],
            groups: vec![BiasGroup { weight: 1.0, alpha_plus: 1.0, alpha_minus: 1.0, spread: 0.0 }],
            seed: 8,
            ..SynthConfig::default()
        };
        let mut w = generate_world(&cfg).unwrap();
        w.contexts.truncate(1);
        let (m, b) = w.contexts[0];
        let probe = ChoiceRecord { user_id: 0, main_item_id: m, bundle_id: b, label: Label::BoughtItem };
        let p = w.correlation.probability_for_bundle(&w.catalog, b, m).unwrap();
        let e = evaluate_choice(&probe, &w.catalog, &w.planted, p).unwrap();
        let k = w.catalog.bundle(b).unwrap().additional_items(m).next().unwrap();
        w.planted.xi[k] -= e.u_bundle - e.u_main;
        assert!((planted_probability(&w, &probe).unwrap() - 0.5).abs() < 1e-12);

        let recs = sample_records(&w, &cfg).unwrap();
        let n = recs.len() as f64;
        let share = recs.iter().filter(|r| r.label.is_bundle()).count() as f64 / n;
        let sigma = (0.25 / n).sqrt();
        assert!((share - 0.5).abs() < 3.0 * sigma, "share {share}");
    }

    #[test]
    fn events_roundtrip_through_ingest() {
        let cfg = small();
        let w = generate_world(&cfg).unwrap();
        let recs = sample_records(&w, &cfg).unwrap();
        let events = records_to_events(&recs, &w.catalog, 1).unwrap();
        let d = derive_choice_records(&events, &w.catalog);
        assert!(d.discarded.is_empty());
        assert_eq!(d.records, recs);
    }

    #[test]
    fn record_volume_follows_config() {
        let cfg = SynthConfig { seed: 1, ..SynthConfig::default() };
        let w = generate_world(&cfg).unwrap();
        let n = sample_records(&w, &cfg).unwrap().len();
        assert!((4000..6000).contains(&n), "{n}");
    }
}
