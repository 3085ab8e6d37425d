//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and fails
//! if any required criterion fails. Criterion 9 runs only when
//! `PROBE_STEAM_DATA` names a directory holding items.csv, bundles.jsonl and
//! events.jsonl.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use probe_core::analysis::{verify_bias_effect, verify_theorem1, verify_theorem2, verify_theorem3, FD_STEP, FD_TOLERANCE};
use probe_core::correlation::{fit_correlation, normalize, sigmoid, CoPurchaseMatrix, CorrelationModel, CorrelationSample, NormalizedMatrix};
use probe_core::eval::{cross_validate, EvalConfig, ModelConfig};
use probe_core::ingest::{derive_choice_records, load_catalog, load_events, DatasetPaths};
use probe_core::learning::{finite_difference_check, AlphaMode};
use probe_core::model::{evaluate_choice, BiasPair, Hyperparams, ModelParams, ReferencePoint, WeightKind};
use probe_core::synth::{generate_world, recovery_experiment, sample_records, RecoveryConfig, SynthConfig};
use probe_core::{ChoiceRecord, Label};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cfg = SynthConfig {
        n_items: 30,
        n_bundles: 10,
        n_users: 1,
        seed: 101,
        ..SynthConfig::default()
    };
    let world = generate_world(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut params = ModelParams::new(world.catalog.n_items(), cfg.hyper, BiasPair::UNBIASED, 0.0);
    for xi in params.xi.iter_mut() {
        *xi = rng.random_range(-2.0..2.0);
    }
    for a in params.bias.item.iter_mut() {
        *a = BiasPair::new(rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
    }
    let (mut compared, mut excluded, mut worst) = (0, 0, 0.0f64);
    let mut user = 0;
    while compared + excluded < 100 {
        user += 1;
        params.bias.user.insert(user, BiasPair::new(rng.random_range(0.2..3.0), rng.random_range(0.2..3.0)));
        let (main, bundle) = world.contexts[rng.random_range(0..world.contexts.len())];
        let record = ChoiceRecord {
            user_id: user,
            main_item_id: main,
            bundle_id: bundle,
            label: if rng.random_bool(0.5) { Label::BoughtBundle } else { Label::BoughtItem },
        };
        let p = rng.random_range(0.02..0.98);
        if evaluate_choice(&record, &world.catalog, &params, p).is_err() {
            continue;
        }
        let report = finite_difference_check(&record, &world.catalog, &params, p, FD_STEP).unwrap();
        if report.excluded.is_some() {
            excluded += 1;
        } else {
            compared += 1;
            worst = worst.max(report.max_relative_error);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < FD_TOLERANCE && secs < 10.0,
        format!("{compared} records compared, {excluded} at clamp boundaries, max relative error {worst:.2e}, {secs:.2}s"),
    )
}

fn theorem_sign_suites() -> Outcome {
    let start = Instant::now();
    let t1 = verify_theorem1(1000, 1, Hyperparams::default()).unwrap();
    let t2 = verify_theorem2(1000, 2, Hyperparams::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        t1.passed() && t2.passed() && secs < 10.0,
        format!(
            "theorem 1: {} sign violations, {} mismatches; theorem 2: {} sign violations, {} mismatches; max relative error {:.2e}; {secs:.2}s",
            t1.sign_violations,
            t1.fd_mismatches,
            t2.sign_violations,
            t2.fd_mismatches,
            t1.max_relative_error.max(t2.max_relative_error)
        ),
    )
}

fn theorem3_regimes() -> Outcome {
    let start = Instant::now();
    let rep = verify_theorem3(20, 400, 3, Hyperparams::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok_k = rep.kappa_signs.iter().filter(|c| c.agrees).count();
    let ok_s = rep.sweeps.iter().filter(|c| c.agrees).count();
    verdict(
        rep.passed() && secs < 30.0,
        format!(
            "r0(A=1) = {}, kappa sign {ok_k}/{}, sweeps {ok_s}/{}, {secs:.2}s",
            rep.r0_at_unit_a,
            rep.kappa_signs.len(),
            rep.sweeps.len()
        ),
    )
}

fn bias_effect() -> Outcome {
    let suite = verify_bias_effect(20, 4, Hyperparams::default()).unwrap();
    verdict(
        suite.passed() && suite.cases.len() == 20,
        format!("{} settings, {} violations", suite.cases.len(), suite.violations()),
    )
}

fn normalization_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = 0;
    for _ in 0..50 {
        let n = rng.random_range(2..40);
        let triplets: Vec<_> = (0..rng.random_range(0..3 * n))
            .flat_map(|_| {
                let (j, k, c) = (rng.random_range(0..n), rng.random_range(0..n), rng.random_range(1..50) as f64);
                [(j, k, c), (k, j, c)]
            })
            .collect();
        let f = CoPurchaseMatrix::from_triplets(n, triplets).unwrap();
        let r = normalize(&f);
        let symmetric = r.triplets().all(|(j, k, v)| r.get(k, j) == v);
        let bounded = r.triplets().all(|(_, _, v)| (0.0..=1.0).contains(&v));
        let zero_diag = (0..n).all(|j| r.get(j, j) == 0.0);
        let invariant = [0.25, 2.0, 1024.0].iter().all(|&s| normalize(&f.scaled(s)) == r);
        if !(symmetric && bounded && zero_diag && invariant) {
            failures += 1;
        }
    }
    verdict(failures == 0, format!("50 matrices, {failures} failing"))
}

fn ridge_recovery() -> Outcome {
    let n = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let r = NormalizedMatrix::from_triplets(
        n,
        (0..n)
            .flat_map(|j| (0..n).filter(move |&k| k != j).map(move |k| (j, k)))
            .map(|(j, k)| (j, k, 0.1 + 0.05 * (j.min(k) * n + j.max(k)) as f64 / n as f64)),
    )
    .unwrap();
    let mut planted = CorrelationModel::new(r.clone());
    for j in 0..n {
        for k in (0..n).filter(|&k| k != j) {
            planted.phi.insert((k, j), rng.random_range(-3.0..3.0));
        }
    }
    planted.b = -0.4;
    let mut samples = Vec::new();
    for mask in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        if members.len() >= 2 {
            for &main in &members {
                let target = sigmoid(planted.score(&members, main));
                samples.push(CorrelationSample {
                    members: members.clone(),
                    main,
                    target,
                });
            }
        }
    }
    let fitted = fit_correlation(&samples, r, 0.0).unwrap();
    let keys: BTreeSet<_> = planted.phi.keys().chain(fitted.phi.keys()).copied().collect();
    let err = keys
        .iter()
        .map(|&(k, m)| (fitted.phi(k, m) - planted.phi(k, m)).abs())
        .fold((fitted.b - planted.b).abs(), f64::max);
    verdict(err <= 1e-6, format!("{} parameters, max abs error {err:.2e}", keys.len() + 1))
}

fn synthetic_recovery() -> Outcome {
    let start = Instant::now();
    let rep = recovery_experiment(&RecoveryConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let gap = rep.probe_f1 - rep.baseline_f1;
    let sign = rep.sign_fraction.unwrap_or(0.0);
    let pearson = rep.learned_pearson.unwrap_or(0.0);
    verdict(
        gap >= 0.05 && sign >= 0.70 && pearson < 0.0 && secs < 300.0,
        format!(
            "{} records; F1 {:.3} vs baseline {:.3} (gap {gap:.3}); sign recovered {}/{} ({sign:.3}); learned pearson {pearson:.3}; {secs:.2}s",
            rep.records, rep.probe_f1, rep.baseline_f1, rep.sign_recovered, rep.sign_users
        ),
    )
}

fn ablation_ordering() -> Outcome {
    let cfg = SynthConfig::default();
    let world = generate_world(&cfg).unwrap();
    let records = sample_records(&world, &cfg).unwrap();
    let eval = EvalConfig::default();
    let with_mode = |mode: AlphaMode| {
        let mut m = ModelConfig::default();
        m.train.alpha_mode = mode;
        m
    };
    let mut cpt = ModelConfig::default();
    cpt.hyper.weight_kind = WeightKind::Cpt;
    let configs = [
        ("W-I", with_mode(AlphaMode::Personal)),
        ("W-II", with_mode(AlphaMode::Fixed { plus: 1.0, minus: 1.0 })),
        ("W-III", with_mode(AlphaMode::Fixed { plus: 0.5, minus: 2.0 })),
        ("W-IV", with_mode(AlphaMode::Fixed { plus: 2.0, minus: 0.5 })),
        ("W-V", cpt),
    ];
    let f1: Vec<(&str, f64)> = configs
        .iter()
        .map(|(name, m)| (*name, cross_validate(&records, &world.catalog, m, &eval, false).unwrap().probe.unwrap().f1))
        .collect();
    let top = f1[0].1;
    verdict(
        f1[1..].iter().all(|&(_, f)| top >= f),
        f1.iter().map(|(n, f)| format!("{n} {f:.4}")).collect::<Vec<_>>().join(", "),
    )
}

fn steam_reproduction() -> Outcome {
    let Some(dir) = std::env::var_os("PROBE_STEAM_DATA").map(PathBuf::from) else {
        return Outcome::Skip("PROBE_STEAM_DATA not set; dataset not present".into());
    };
    let paths = DatasetPaths::in_dir(&dir);
    let catalog = load_catalog(&paths.items, &paths.bundles).unwrap();
    let records = derive_choice_records(&load_events(&paths.events).unwrap(), &catalog).records;
    let mut f1 = Vec::new();
    for rp in ReferencePoint::ALL {
        let mut m = ModelConfig::default();
        m.hyper.reference_point = rp;
        let rep = cross_validate(&records, &catalog, &m, &EvalConfig::default(), false).unwrap();
        f1.push((rp, rep.probe.unwrap().f1));
    }
    let savings = f1[0].1;
    let main = f1.iter().find(|(rp, _)| *rp == ReferencePoint::MainItemCentered).unwrap().1;
    let highest = f1.iter().all(|&(_, f)| savings >= f);
    let lowest = f1.iter().all(|&(_, f)| main <= f);
    verdict(
        (savings - 0.709).abs() <= 0.03 && highest && lowest,
        f1.iter().map(|(rp, f)| format!("{} {f:.3}", rp.label())).collect::<Vec<_>>().join(", "),
    )
}

fn run_cli(dir: &Path, args: &[&str]) {
    let o = Command::new(env!("CARGO_BIN_EXE_probe")).current_dir(dir).args(args).output().unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn primary_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    run_cli(root, &["--seed", "7", "--out", "world", "synth"]);
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("synth", vec!["synth"]),
        ("ingest", vec!["ingest", "--data", "world"]),
        ("fit-correlation", vec!["fit-correlation", "--data", "world"]),
        ("train", vec!["train", "--data", "world"]),
        ("evaluate", vec!["evaluate", "--data", "world", "--repeats", "2"]),
        ("theorems", vec!["theorems"]),
        ("sweep", vec!["sweep", "--r", "0.3", "--p", "0.7"]),
        ("report", vec!["report", "--data", "world", "--model", "train-a/model.json", "--truth", "world/truth.json"]),
    ];
    let mut differing = Vec::new();
    for (name, args) in &commands {
        for run in ["a", "b"] {
            let out = format!("{name}-{run}");
            let mut full = vec!["--seed", "7", "--out", out.as_str()];
            full.extend(args.iter().copied());
            run_cli(root, &full);
        }
        let a = primary_outputs(&root.join(format!("{name}-a")));
        let b = primary_outputs(&root.join(format!("{name}-b")));
        if a.is_empty() || a != b {
            differing.push(*name);
        }
    }
    verdict(
        differing.is_empty(),
        format!("{} commands run twice; differing: {:?}", commands.len(), differing),
    )
}

#[test]
fn acceptance() {
    let criteria: Vec<(u8, &str, bool, fn() -> Outcome)> = vec![
        (1, "gradient correctness", true, gradient_correctness),
        (2, "theorem 1 and 2 sign suites", true, theorem_sign_suites),
        (3, "theorem 3 regimes", true, theorem3_regimes),
        (4, "projection-bias effect on pricing quantities", true, bias_effect),
        (5, "normalization identities", true, normalization_identities),
        (6, "ridge recovery", true, ridge_recovery),
        (7, "synthetic end-to-end recovery", true, synthetic_recovery),
        (8, "weight-function ablation ordering", true, ablation_ordering),
        (9, "dataset reproduction", false, steam_reproduction),
        (10, "determinism", true, determinism),
    ];
    let mut failed = Vec::new();
    for (id, name, required, check) in criteria {
        match check() {
            Outcome::Pass(d) => println!("criterion {id} ({name}): PASS: {d}"),
            Outcome::Skip(d) => println!("criterion {id} ({name}): SKIP: {d}"),
            Outcome::Fail(d) => {
                println!("criterion {id} ({name}): FAIL: {d}");
                if required {
                    failed.push(id);
                }
            }
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
