use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use probe_core::analysis::{
    bias_orderings, bias_population_report, default_grid, sweep_price, verify_bias_effect, verify_theorem1, verify_theorem2, verify_theorem3, BiasEffectCase,
    BiasEffectSuite, Theorem3Report, TheoremInstance, TheoremReport,
};
use probe_core::correlation::fit_from_records;
use probe_core::eval::{cross_validate, fit_model, format_table, MetricReport};
use probe_core::ingest::{
    dataset_stats, derive_choice_records, load_catalog, load_events, load_records, validate_records, write_bundles, write_events, write_items, write_records,
    DatasetStats, DiscardReason,
};
use probe_core::model::{BiasPair, ModelParams};
use probe_core::persist::{load_model, ModelFile};
use probe_core::synth::{compare_biases, generate_world, records_to_events, sample_records, BiasComparison, SynthConfig};
use probe_core::{Catalog, ChoiceRecord, ProbeError, UserId};
use serde::{Deserialize, Serialize};

use crate::args::{AblationArgs, DataArgs, EvaluateArgs, FitArgs, IngestArgs, ReportArgs, ReportFormat, SweepArgs, TheoremArgs, TrainArgs};
use crate::config::RunConfig;
use crate::run::{Run, Violation};

fn catalog(run: &mut Run, data: &DataArgs) -> anyhow::Result<Catalog> {
    let (items, bundles) = (data.items(), data.bundles());
    run.input("items", &items);
    run.input("bundles", &bundles);
    Ok(load_catalog(&items, &bundles)?)
}

fn records(run: &mut Run, data: &DataArgs, explicit: &Option<PathBuf>, catalog: &Catalog) -> anyhow::Result<Vec<ChoiceRecord>> {
    let path = data.in_data(explicit, "records.csv");
    run.input("records", &path);
    let records = load_records(&path)?;
    validate_records(&records, catalog)?;
    Ok(records)
}

fn apply_ablation(config: &mut RunConfig, ablation: &AblationArgs) {
    if let Some(w) = ablation.weight {
        config.model.hyper.weight_kind = w.into();
    }
    if let Some(r) = ablation.ref_point {
        config.model.hyper.reference_point = r.into();
    }
    if let Some(a) = ablation.alpha {
        config.model.train.alpha_mode = a;
    }
}

#[derive(Debug, Serialize)]
struct IngestStats<'a> {
    #[serde(flatten)]
    stats: DatasetStats,
    discards: BTreeMap<DiscardReason, usize>,
    flagged_bundles: &'a [probe_core::catalog::FlaggedBundle],
}

pub fn ingest(run: &mut Run, args: &IngestArgs) -> anyhow::Result<()> {
    let catalog = catalog(run, &args.data)?;
    let events_path = args.data.in_data(&args.events, "events.jsonl");
    run.input("events", &events_path);
    let events = load_events(&events_path)?;
    let derivation = derive_choice_records(&events, &catalog);
    let stats = dataset_stats(&derivation.records, &events, &catalog);
    run.write_with("records.csv", |w| write_records(w, &derivation.records))?;
    run.write_json(
        "stats.json",
        &IngestStats {
            stats: stats.clone(),
            discards: derivation.discard_counts(),
            flagged_bundles: catalog.flagged(),
        },
    )?;
    println!(
        "{} records from {} events ({} bundle, {} item); {} discarded",
        stats.purchase_records, stats.events, stats.bundle_purchases, stats.item_purchases, stats.discarded
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct CorrelationFile {
    n_items: usize,
    phi: Vec<(usize, usize, f64)>,
    b: f64,
    diagnostics: probe_core::correlation::FitDiagnostics,
}

pub fn fit_correlation(run: &mut Run, config: &mut RunConfig, args: &FitArgs) -> anyhow::Result<()> {
    if let Some(ridge) = args.ridge {
        config.model.ridge_penalty = ridge;
    }
    let catalog = catalog(run, &args.data)?;
    let records = records(run, &args.data, &args.records, &catalog)?;
    let (copurchase, corr) = fit_from_records(&records, &catalog, config.model.ridge_penalty)?;
    run.write_with("copurchase.csv", |w| copurchase.write_csv(w))?;
    run.write_json(
        "correlation.json",
        &CorrelationFile {
            n_items: corr.n(),
            phi: corr.phi.iter().map(|(&(k, m), &v)| (k, m, v)).collect(),
            b: corr.b,
            diagnostics: corr.diagnostics.clone(),
        },
    )?;
    println!(
        "{} parameters from {} targets; residual rms {:.4}",
        corr.diagnostics.parameters, corr.diagnostics.samples, corr.diagnostics.residual_rms
    );
    Ok(())
}

pub fn train(run: &mut Run, config: &mut RunConfig, args: &TrainArgs) -> anyhow::Result<()> {
    apply_ablation(config, &args.ablation);
    if let Some(e) = args.epochs {
        config.model.train.epochs = e;
    }
    if let Some(eta) = args.eta {
        config.model.train.eta = eta;
    }
    config.model.hyper.validate()?;
    config.model.train.validate()?;
    let catalog = catalog(run, &args.data)?;
    let records = records(run, &args.data, &args.records, &catalog)?;
    let fitted = fit_model(&records, &catalog, &config.model)?;
    if let Some(bad) = fitted.loss_trace.iter().find(|e| !e.loss.is_finite()) {
        return Err(ProbeError::NonFinite(format!("loss at epoch {}", bad.epoch)).into());
    }
    run.write_with("model.json", |w| ModelFile::from_parts(&fitted.params, &fitted.correlation)?.write_json(w))?;
    let mut trace = String::from("epoch,loss\n");
    for e in &fitted.loss_trace {
        let _ = writeln!(trace, "{},{}", e.epoch, e.loss);
    }
    run.write("loss.csv", trace.as_bytes())?;
    if let (Some(first), Some(last)) = (fitted.loss_trace.first(), fitted.loss_trace.last()) {
        println!("loss {:.6} -> {:.6} over {} epochs", first.loss, last.loss, last.epoch);
    }
    Ok(())
}

fn table_title(config: &RunConfig) -> String {
    let h = &config.model.hyper;
    format!(
        "{} | weight {:?} | alpha {:?}\n",
        h.reference_point.label(),
        h.weight_kind,
        config.model.train.alpha_mode
    )
}

pub fn evaluate(run: &mut Run, config: &mut RunConfig, args: &EvaluateArgs) -> anyhow::Result<()> {
    apply_ablation(config, &args.ablation);
    if let Some(k) = args.folds {
        config.eval.folds = k;
    }
    if let Some(r) = args.repeats {
        config.eval.repeats = r;
    }
    if let Some(s) = args.sampling_rate {
        config.eval.sampling_rate = s;
    }
    config.model.hyper.validate()?;
    config.model.train.validate()?;
    config.eval.validate()?;
    let catalog = catalog(run, &args.data)?;
    let records = records(run, &args.data, &args.records, &catalog)?;
    if records.len() < config.eval.folds {
        return Err(ProbeError::EmptyInput("test split").into());
    }
    let report = cross_validate(&records, &catalog, &config.model, &config.eval, args.baseline_only)?;
    let mut rows: Vec<&MetricReport> = vec![&report.baseline];
    rows.extend(report.probe.as_ref());
    let table = format!("{}{}", table_title(config), format_table(&rows));
    run.write_json("metrics.json", &report)?;
    run.write("metrics.txt", table.as_bytes())?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct TheoremSummary {
    theorem1: TheoremReport,
    theorem2: TheoremReport,
    theorem3: Theorem3Report,
    bias_effect: BiasEffectSuite,
    forced_invalid: bool,
    violations: usize,
    passed: bool,
}

fn violating_instances(s: &TheoremSummary) -> Vec<serde_json::Value> {
    let mut out: Vec<serde_json::Value> = Vec::new();
    for rep in [&s.theorem1, &s.theorem2] {
        out.extend(rep.examples.iter().map(|i| serde_json::json!({ "theorem": rep.theorem, "instance": i })));
    }
    out.extend(s.theorem3.kappa_signs.iter().filter(|c| !c.agrees).map(|c| serde_json::json!({ "theorem": 3, "kappa_sign": c })));
    out.extend(s.theorem3.sweeps.iter().filter(|c| !c.agrees).map(|c| serde_json::json!({ "theorem": 3, "sweep": c })));
    out.extend(
        s.bias_effect
            .cases
            .iter()
            .filter(|c| !c.report.orderings_hold())
            .map(|c| serde_json::json!({ "bias_effect": c })),
    );
    out
}

pub fn theorems(run: &mut Run, config: &mut RunConfig, args: &TheoremArgs) -> anyhow::Result<()> {
    if let Some(n) = args.samples {
        config.theorems.samples = n;
    }
    let t = &config.theorems;
    let hyper = config.model.hyper;
    let seed = config.seed;
    let theorem1 = verify_theorem1(t.samples, seed, hyper)?;
    let theorem2 = verify_theorem2(t.samples, seed.wrapping_add(1), hyper)?;
    let theorem3 = verify_theorem3(t.sweeps, t.sweep_points, seed.wrapping_add(2), hyper)?;
    let mut bias_effect = verify_bias_effect(t.bias_settings, seed.wrapping_add(3), hyper)?;
    if args.force_invalid {
        let instance = TheoremInstance {
            c_m: 10.0,
            c_1: 10.0,
            r: 0.2,
            p: 0.5,
            alpha_user: BiasPair::new(2.0, 0.5),
            alpha_item: BiasPair { plus: 0.0, minus: 0.0 },
            hyper,
        };
        bias_effect.cases.push(BiasEffectCase {
            instance,
            report: bias_orderings(&instance)?,
        });
    }
    let violations = usize::from(!theorem1.passed()) * (theorem1.sign_violations + theorem1.fd_mismatches)
        + usize::from(!theorem2.passed()) * (theorem2.sign_violations + theorem2.fd_mismatches)
        + theorem3.violations()
        + bias_effect.violations();
    let summary = TheoremSummary {
        theorem1,
        theorem2,
        theorem3,
        bias_effect,
        forced_invalid: args.force_invalid,
        violations,
        passed: violations == 0,
    };
    run.write_json("theorems.json", &summary)?;
    match args.report {
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&summary)?),
        ReportFormat::Text => print!("{}", theorem_text(&summary)),
    }
    if violations > 0 {
        for v in violating_instances(&summary) {
            eprintln!("violation: {v}");
        }
        return Err(Violation(violations).into());
    }
    Ok(())
}

fn theorem_text(s: &TheoremSummary) -> String {
    let mut out = String::new();
    for rep in [&s.theorem1, &s.theorem2] {
        let _ = writeln!(
            out,
            "theorem {}: {} samples, {} sign violations, {} derivative mismatches, {} excluded, max rel err {:.2e}",
            rep.theorem, rep.samples, rep.sign_violations, rep.fd_mismatches, rep.excluded, rep.max_relative_error
        );
    }
    let t3 = &s.theorem3;
    let _ = writeln!(
        out,
        "theorem 3: r0(A=1) = {}, kappa signs {}/{}, sweeps {}/{}",
        t3.r0_at_unit_a,
        t3.kappa_signs.iter().filter(|c| c.agrees).count(),
        t3.kappa_signs.len(),
        t3.sweeps.iter().filter(|c| c.agrees).count(),
        t3.sweeps.len()
    );
    let _ = writeln!(
        out,
        "bias effect: {}/{} settings with A lower, r0 higher, kappa lower",
        s.bias_effect.cases.len() - s.bias_effect.violations(),
        s.bias_effect.cases.len()
    );
    let _ = writeln!(out, "{}", if s.passed { "PASS" } else { "FAIL" });
    out
}

pub fn sweep(run: &mut Run, config: &mut RunConfig, args: &SweepArgs) -> anyhow::Result<()> {
    if !(args.r > 0.0 && args.r < 1.0) {
        return Err(ProbeError::InvalidConfig(format!("discount rate r={} must lie in (0, 1)", args.r)).into());
    }
    let c_1 = 2.0 * probe_core::analysis::min_valid_c1(args.c_m, args.r);
    let instance = TheoremInstance {
        c_m: args.c_m,
        c_1,
        r: args.r,
        p: args.p,
        alpha_user: BiasPair::new(args.alpha_user.0, args.alpha_user.1),
        alpha_item: BiasPair::new(args.alpha_item.0, args.alpha_item.1),
        hyper: config.model.hyper,
    };
    instance.validate()?;
    let report = sweep_price(&instance, &default_grid(&instance, args.points)?)?;
    let mut csv = String::from("c_1,p_bundle\n");
    for (c, p) in report.c1_grid.iter().zip(&report.p_bundle) {
        let _ = writeln!(csv, "{c},{p}");
    }
    run.write("sweep.csv", csv.as_bytes())?;
    run.write_json("sweep.json", &serde_json::json!({ "instance": instance, "report": report }))?;
    println!(
        "regime {:?}; A = {:.6}, r0 = {:.6}, kappa = {:?}, predicted minimizer {:?}, empirical {:?}",
        report.regime, report.a, report.r0, report.kappa, report.predicted_minimizer, report.empirical_minimizer
    );
    Ok(())
}

/// Planted state written next to a synthetic world.
#[derive(Debug, Serialize, Deserialize)]
pub struct Truth {
    pub synth: SynthConfig,
    pub planted: ModelFile,
    pub user_group: BTreeMap<UserId, usize>,
    /// Group mean exponents per user.
    pub expected_alpha: BTreeMap<UserId, [f64; 2]>,
}

pub fn synth(run: &mut Run, config: &mut RunConfig) -> anyhow::Result<()> {
    let cfg = &config.synth;
    let world = generate_world(cfg)?;
    let records = sample_records(&world, cfg)?;
    let events = records_to_events(&records, &world.catalog, cfg.seed)?;
    run.write_with("items.csv", |w| write_items(w, world.catalog.items()))?;
    run.write_with("bundles.jsonl", |w| write_bundles(w, world.catalog.bundles()))?;
    run.write_with("events.jsonl", |w| write_events(w, &events))?;
    run.write_with("records.csv", |w| write_records(w, &records))?;
    let expected_alpha = world
        .user_group
        .iter()
        .map(|(&u, &g)| (u, [cfg.groups[g].alpha_plus, cfg.groups[g].alpha_minus]))
        .collect();
    run.write_json(
        "truth.json",
        &Truth {
            synth: cfg.clone(),
            planted: ModelFile::from_parts(&world.planted, &world.correlation)?,
            user_group: world.user_group.clone(),
            expected_alpha,
        },
    )?;
    let bundles = records.iter().filter(|r| r.label.is_bundle()).count();
    println!(
        "{} items, {} bundles, {} users, {} records ({} bundle purchases)",
        world.catalog.n_items(),
        world.catalog.n_bundles(),
        world.user_group.len(),
        records.len(),
        bundles
    );
    Ok(())
}

fn load_truth(path: &Path) -> anyhow::Result<Truth> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| {
        ProbeError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        }
        .into()
    })
}

#[derive(Debug, Serialize)]
struct Report {
    population: probe_core::analysis::BiasPopulationReport,
    recovery: Option<BiasComparison>,
}

pub fn report(run: &mut Run, config: &mut RunConfig, args: &ReportArgs) -> anyhow::Result<()> {
    let catalog = catalog(run, &args.data)?;
    let records = records(run, &args.data, &args.records, &catalog)?;
    run.input("model", &args.model);
    let (params, _) = load_model(&args.model)?;
    let population = bias_population_report(&params, &records)?;
    let recovery = match &args.truth {
        Some(path) => {
            run.input("truth", path);
            let truth = load_truth(path)?;
            let (planted, _): (ModelParams, _) = truth.planted.into_parts()?;
            let expected = truth
                .expected_alpha
                .iter()
                .map(|(&u, &[plus, minus])| (u, BiasPair::new(plus, minus)))
                .collect();
            Some(compare_biases(&planted, &expected, &params, &records, config.report.min_user_records))
        }
        None => None,
    };
    let report = Report { population, recovery };
    let text = report_text(&report);
    run.write_json("report.json", &report)?;
    run.write("report.txt", text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

fn report_text(r: &Report) -> String {
    let p = &r.population;
    let mut out = String::new();
    let _ = writeln!(out, "users {}, pearson(alpha+, alpha-) {}", p.users.len(), fmt_opt(p.pearson));
    for (name, g) in [("with bundle", &p.with_bundle), ("without bundle", &p.without_bundle)] {
        let _ = writeln!(
            out,
            "{name:<16} {:>6} users  median alpha+ {}  median alpha- {}",
            g.users,
            fmt_opt(g.median_alpha_plus),
            fmt_opt(g.median_alpha_minus)
        );
    }
    let _ = writeln!(out, "{:<8} {:>6} {:>14}", "bundles", "users", "median alpha+");
    for b in &p.buckets {
        let _ = writeln!(out, "{:<8} {:>6} {:>14}", b.label, b.users, fmt_opt(b.median_alpha_plus));
    }
    if let Some(c) = &r.recovery {
        let _ = writeln!(
            out,
            "planted vs learned: sign of alpha+ - 1 recovered for {}/{} users ({}), planted pearson {}, learned pearson {}",
            c.sign_recovered,
            c.sign_users,
            fmt_opt(c.sign_fraction),
            fmt_opt(c.planted_pearson),
            fmt_opt(c.learned_pearson)
        );
    }
    out
}
