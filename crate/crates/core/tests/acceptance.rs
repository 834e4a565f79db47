//! Acceptance checks, one pass/fail line per criterion.

mod common;

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ptq_scaling::ablation::{default_masks, run_dataset_ablation};
use ptq_scaling::advisor::{min_cost_config, pareto_frontier, sweep, SearchSpace};
use ptq_scaling::dataset::{
    aggregate, generate_synthetic, Aggregation, BenchmarkMap, ExperimentDataset, Provenance, Scope, SyntheticConfig,
};
use ptq_scaling::fitting::{adjusted_r_squared, fit_nls, r_squared, FitOptions, FitProblem};
use ptq_scaling::model::{gradient, MoreSensitive};
use ptq_scaling::presets::{LawFile, BUILTIN_PRESETS};
use ptq_scaling::{effective_bit_width, predict, sensitivity_report, Factor, FactorMask, PresetRegistry, PtqConfig, ScalingLawParams, TaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use common::*;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ms(d: Duration) -> String {
    format!("{:.1} ms", d.as_secs_f64() * 1e3)
}

const BEFF_TABLE: [(u32, [&str; 4]); 7] = [
    (16, ["3.13", "4.19", "5.25", "9.50"]),
    (32, ["2.56", "3.59", "4.63", "8.75"]),
    (64, ["2.28", "3.30", "4.31", "8.38"]),
    (128, ["2.14", "3.15", "4.16", "8.19"]),
    (256, ["2.07", "3.07", "4.08", "8.09"]),
    (512, ["2.04", "3.04", "4.04", "8.05"]),
    (1024, ["2.02", "3.02", "4.02", "8.02"]),
];

fn beff_table() -> Check {
    let start = Instant::now();
    let mut cells = 0;
    for (g, row) in BEFF_TABLE {
        for (w, want) in [2, 3, 4, 8].into_iter().zip(row) {
            let got = effective_bit_width(w, g, 16, w).map_err(|e| e.to_string())?.display_2dp();
            ensure(got == want, || format!("G={g} W={w}: {got} != {want}"))?;
            cells += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {}", ms(elapsed)))?;
    Ok(format!("{cells}/28 cells, {}", ms(elapsed)))
}

/// (name, C, [alpha, beta, gamma, delta], reported goodness of fit)
type Published = (&'static str, f64, [Option<f64>; 4], f64);

const PUBLISHED: [Published; 10] = [
    ("opt-general", 0.0255, [Some(0.1016), Some(0.0706), Some(-0.0035), Some(0.3188)], 0.8319),
    ("opt-n-beff", 0.0291, [Some(0.1011), None, None, Some(0.3211)], 0.8024),
    ("opt-n-g-beff", 0.0295, [Some(0.1012), None, Some(-0.0034), Some(0.3198)], 0.8023),
    ("opt-n-cb-beff", 0.0251, [Some(0.1015), Some(0.0705), None, Some(0.3201)], 0.8319),
    ("opt-mem", 2.37e-4, [Some(0.2373), Some(0.1576), Some(-0.0036), Some(0.7900)], 0.75),
    ("opt-util", 5.13e-2, [Some(0.0862), Some(0.0601), Some(-0.0036), Some(0.2561)], 0.84),
    ("llama2-general", 2.07e-2, [Some(0.0996), Some(0.0270), Some(0.0066), Some(0.7266)], 0.98),
    ("llama2-mem", 1.38e-3, [Some(0.1118), Some(0.0330), Some(0.0051), Some(1.7315)], 0.91),
    ("llama2-util", 3.52e-2, [Some(0.0898), Some(0.0232), Some(0.0095), Some(0.6568)], 0.98),
    ("opt-2bit", 2.4915e-2, [Some(0.1085), Some(0.1748), Some(-0.0904), None], 0.8828),
];

const PRESETS_SHA256: &str = "0deef380c6202992597afcbdcd3cefcfbd6c28ef99acb2fec4abd9f357d80453";

fn preset_fidelity() -> Check {
    let digest = hex::encode(Sha256::digest(BUILTIN_PRESETS.as_bytes()));
    ensure(digest == PRESETS_SHA256, || format!("preset file checksum changed: {digest}"))?;
    let reg = PresetRegistry::builtin();
    ensure(reg.len() == PUBLISHED.len(), || format!("{} presets, expected {}", reg.len(), PUBLISHED.len()))?;
    let mut constants = 0;
    for (name, c, exps, reported) in PUBLISHED {
        let preset = reg.get(name).ok_or_else(|| format!("missing preset {name}"))?;
        let p = &preset.params;
        ensure(p.c().to_bits() == c.to_bits(), || format!("{name}: C {} != {c}", p.c()))?;
        constants += 1;
        for (f, want) in Factor::ALL.into_iter().zip(exps) {
            match want {
                Some(v) => {
                    ensure(p.mask().contains(f) && p.exponent(f).to_bits() == v.to_bits(), || {
                        format!("{name}: {} {} != {v}", f.exponent_name(), p.exponent(f))
                    })?;
                    constants += 1;
                }
                None => ensure(!p.mask().contains(f), || format!("{name}: {} should be excluded", f.symbol()))?,
            }
        }
        let got = preset.reported_adj_r_squared.or(preset.reported_r_squared);
        ensure(got.map(f64::to_bits) == Some(reported.to_bits()), || format!("{name}: reported {got:?} != {reported}"))?;
        constants += 1;
    }
    // The task-stratified general row restates the four-factor law at two-decimal R².
    let general = reg.params("opt-general").unwrap();
    ensure(general.c() == 2.55e-2, || "general row C differs from the four-factor law".into())?;
    let r2 = reg.get("opt-general").unwrap().reported_adj_r_squared.unwrap();
    ensure(format!("{r2:.2}") == "0.83", || format!("general row R² {r2:.2} != 0.83"))?;
    Ok(format!("{} presets, {constants} constants, checksum ok", PUBLISHED.len()))
}

const PREDICTION_ORACLE: f64 = 0.360_496_875_332_223_254_556_632_420_303_316_720_344_5;

fn prediction_oracle() -> Check {
    let reg = PresetRegistry::builtin();
    let cfg = PtqConfig::new(6.7e9, 4, 128, 128).unwrap();
    let got = predict(reg.params("opt-general").unwrap(), &cfg).map_err(|e| e.to_string())?;
    let rel = (got - PREDICTION_ORACLE).abs() / PREDICTION_ORACLE;
    ensure(rel <= 1e-10, || format!("{got} vs {PREDICTION_ORACLE}, rel {rel:e}"))?;
    Ok(format!("{got:.12}, rel err {rel:.1e}"))
}

fn noiseless_recovery() -> Check {
    let start = Instant::now();
    let configs = published_configs();
    let opts = FitOptions::default();
    let mut worst_exp: f64 = 0.0;
    let mut worst_r2: f64 = 1.0;
    let mut fits = 0;
    for mask in default_masks() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let truth = random_truth(&mut rng, mask, &configs);
            let problem = FitProblem::new(noiseless(&truth, &configs), mask).map_err(|e| e.to_string())?;
            let fit = fit_nls(&problem, &opts).map_err(|e| format!("mask {mask} seed {seed}: {e}"))?;
            let err = max_exponent_error(&fit.params, &truth);
            ensure(err <= 1e-6, || format!("mask {mask} seed {seed}: exponent error {err:e}"))?;
            ensure(fit.r_squared >= 1.0 - 1e-9, || format!("mask {mask} seed {seed}: R² {}", fit.r_squared))?;
            worst_exp = worst_exp.max(err);
            worst_r2 = worst_r2.min(fit.r_squared);
            fits += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {}", ms(elapsed)))?;
    Ok(format!(
        "{fits} fits, max exponent error {worst_exp:.1e}, min R² 1-{:.1e}, {}",
        1.0 - worst_r2,
        ms(elapsed)
    ))
}

/// Standard errors of (C, exponents in mask order) from the Gauss–Newton covariance at `params`.
fn standard_errors(obs: &[ptq_scaling::Observation], params: &ScalingLawParams) -> Vec<f64> {
    let free: Vec<Factor> = params.mask().iter().collect();
    let p = free.len() + 1;
    let mut j = DMatrix::zeros(obs.len(), p);
    let mut sse = 0.0;
    for (i, o) in obs.iter().enumerate() {
        let y = power_law(params.c(), params.exponents(), &o.cfg);
        let x = raw_features(&o.cfg);
        j[(i, 0)] = y / params.c();
        for (k, f) in free.iter().enumerate() {
            j[(i, k + 1)] = y * x[f.index()];
        }
        sse += (o.accuracy - y).powi(2);
    }
    let sigma2 = sse / (obs.len() - p) as f64;
    let cov = (j.transpose() * &j).try_inverse().expect("full-rank design") * sigma2;
    (0..p).map(|k| cov[(k, k)].sqrt()).collect()
}

fn noisy_recovery() -> Check {
    let reg = PresetRegistry::builtin();
    let truth = reg.params("opt-general").unwrap().clone();
    // A single benchmark makes the per-configuration noise exactly σ.
    let map = BenchmarkMap {
        memorization: vec![],
        utilization: vec!["ARC-e".into()],
    };
    let cfg = SyntheticConfig {
        noise_sigma: 0.01,
        seed: 20_240_917,
        benchmarks: map.clone(),
        ..Default::default()
    };
    let ds = generate_synthetic(&truth, &cfg).map_err(|e| e.to_string())?.dataset;
    let obs = aggregate(&ds, &map, &Aggregation::new(Scope::Utilization)).map_err(|e| e.to_string())?;
    let mask = FactorMask::FULL;
    let fit = fit_nls(&FitProblem::new(obs.clone(), mask).map_err(|e| e.to_string())?, &FitOptions::default())
        .map_err(|e| e.to_string())?;
    let se = standard_errors(&obs, &fit.params);
    let mut worst_z: f64 = (fit.params.c() - truth.c()).abs() / se[0];
    for (k, f) in mask.iter().enumerate() {
        let z = (fit.params.exponent(f) - truth.exponent(f)).abs() / se[k + 1];
        ensure(z <= 3.0, || format!("{} is {z:.2} SE from truth", f.exponent_name()))?;
        worst_z = worst_z.max(z);
    }
    ensure(worst_z <= 3.0, || format!("C is {worst_z:.2} SE from truth"))?;

    let (c, e) = grid_refinement_fit(&obs, mask);
    let mut worst_gap = ((fit.params.c() - c) / c).abs();
    ensure(worst_gap <= 1e-4, || format!("C {} vs oracle {c}", fit.params.c()))?;
    for f in mask.iter() {
        let gap = (fit.params.exponent(f) - e[f.index()]).abs();
        ensure(gap <= 1e-4, || format!("{} {} vs oracle {}", f.exponent_name(), fit.params.exponent(f), e[f.index()]))?;
        worst_gap = worst_gap.max(gap);
    }
    Ok(format!("max |z| {worst_z:.2}, max gap to oracle {worst_gap:.1e}"))
}

fn jacobian_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let params = ScalingLawParams::full(
            TaskKind::General,
            rng.gen_range(1e-4..0.1),
            rng.gen_range(0.05..0.3),
            rng.gen_range(0.02..0.2),
            rng.gen_range(-0.1..0.01),
            rng.gen_range(0.2..1.8),
        )
        .unwrap();
        let cfg = PtqConfig::new(
            rng.gen_range(1e8..7e10),
            rng.gen_range(2..=8),
            rng.gen_range(4..=4096),
            rng.gen_range(16..=2048),
        )
        .unwrap();
        let analytic = gradient(&params, &cfg).map_err(|e| e.to_string())?;
        let theta = [params.c(), params.alpha(), params.beta(), params.gamma(), params.delta()];
        for k in 0..5 {
            let h = 1e-6 * theta[k].abs().max(1e-3);
            let at = |v: f64| {
                let mut t = theta;
                t[k] = v;
                predict(&ScalingLawParams::full(TaskKind::General, t[0], t[1], t[2], t[3], t[4]).unwrap(), &cfg).unwrap()
            };
            let fd = (at(theta[k] + h) - at(theta[k] - h)) / (2.0 * h);
            let rel = (analytic[k] - fd).abs() / analytic[k].abs().max(fd.abs());
            ensure(rel <= 1e-5, || format!("pair {trial}, parameter {k}: analytic {} vs fd {fd}", analytic[k]))?;
            worst = worst.max(rel);
        }
    }
    Ok(format!("100 pairs, max rel err {worst:.1e}"))
}

fn goodness_of_fit_conformance() -> Check {
    // Residuals -1/8, 0, 1/8, 0: SSE = 1/32, SST = 5/16.
    let y = [0.25, 0.5, 0.75, 1.0];
    let f = [0.375, 0.5, 0.625, 1.0];
    let r2 = r_squared(&y, &f).map_err(|e| e.to_string())?;
    let manual = 1.0 - (1.0 / 32.0) / (5.0 / 16.0);
    ensure(r2 == manual, || format!("R² {r2} != {manual}"))?;
    let adj = adjusted_r_squared(r2, 4, 2).map_err(|e| e.to_string())?;
    let manual_adj = 1.0 - (1.0 - manual) * 3.0 / 1.0;
    ensure(adj == manual_adj, || format!("adjusted {adj} != {manual_adj}"))?;
    ensure(r_squared(&y, &y).unwrap() == 1.0, || "perfect fit is not 1".into())?;
    ensure(r_squared(&y, &[0.625; 4]).unwrap() == 0.0, || "mean predictor is not 0".into())?;

    let configs = published_configs();
    let masks: Vec<FactorMask> = FactorMask::all_subsets().filter(|m| !m.is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let opts = FitOptions::default();
    let mut fits = 0;
    while fits < 1000 {
        let mask = masks[rng.gen_range(0..masks.len())];
        let truth = random_truth(&mut rng, mask, &configs);
        let n = rng.gen_range(mask.len() + 3..40);
        let sigma = rng.gen_range(0.001..0.05);
        let obs: Vec<_> = (0..n)
            .map(|_| {
                let cfg = configs[rng.gen_range(0..configs.len())];
                let mut o = noiseless(&truth, &[cfg]).remove(0);
                o.accuracy = (o.accuracy + sigma * (rng.gen::<f64>() - 0.5)).max(1e-3);
                o
            })
            .collect();
        // Random draws can leave a factor constant; those designs are rejected, not fitted.
        let Ok(fit) = FitProblem::new(obs, mask).and_then(|p| fit_nls(&p, &opts)) else {
            continue;
        };
        ensure(fit.adjusted_r_squared <= fit.r_squared, || {
            format!("fit {fits}: adjusted {} > plain {}", fit.adjusted_r_squared, fit.r_squared)
        })?;
        fits += 1;
    }
    Ok(format!("4-point R² = {r2}, adjusted = {adj}, {fits} random fits"))
}

fn ablation_structure() -> Check {
    let ds = ExperimentDataset::load(FIXTURE.as_ref()).map_err(|e| e.to_string())?;
    let report = run_dataset_ablation(
        &ds,
        &BenchmarkMap::default(),
        &Aggregation::new(Scope::General6),
        &default_masks(),
        &FitOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let masks = default_masks();
    let fits: Vec<_> = masks
        .iter()
        .map(|m| report.get(*m).and_then(|e| e.fit()).ok_or_else(|| format!("mask {m} failed")))
        .collect::<Result<_, _>>()?;
    for (i, a) in masks.iter().enumerate() {
        for (j, b) in masks.iter().enumerate() {
            if i != j && a.is_subset_of(*b) {
                ensure(fits[i].r_squared <= fits[j].r_squared, || {
                    format!("R² drops from {a} ({}) to {b} ({})", fits[i].r_squared, fits[j].r_squared)
                })?;
            }
        }
    }
    let full = fits[0].r_squared;
    ensure(fits.iter().all(|f| f.r_squared <= full), || "full mask is not the best plain R²".into())?;
    let (n_beff, n_g_beff, n_cb_beff) = (fits[1], fits[2], fits[3]);
    ensure(n_cb_beff.adjusted_r_squared > n_beff.adjusted_r_squared, || "adding C_b does not raise adjusted R²".into())?;
    ensure(n_g_beff.adjusted_r_squared <= n_beff.adjusted_r_squared, || "adding G alone raises adjusted R²".into())?;
    Ok(format!(
        "adj R²: full {:.4}, N,B_eff {:.4}, N,G,B_eff {:.4}, N,C_b,B_eff {:.4}",
        fits[0].adjusted_r_squared, n_beff.adjusted_r_squared, n_g_beff.adjusted_r_squared, n_cb_beff.adjusted_r_squared
    ))
}

fn sensitivity_finding() -> Check {
    let reg = PresetRegistry::builtin();
    let report = sensitivity_report(reg.params("opt-mem").unwrap(), reg.params("opt-util").unwrap())
        .map_err(|e| e.to_string())?;
    let expected = [(Factor::N, 0.2373, 0.0862), (Factor::Cb, 0.1576, 0.0601), (Factor::Beff, 0.7900, 0.2561)];
    for (f, mem, util) in expected {
        let row = report.row(f).ok_or_else(|| format!("no row for {}", f.symbol()))?;
        ensure(row.first == mem && row.second == util && row.first > row.second, || {
            format!("{}: {} vs {}", f.symbol(), row.first, row.second)
        })?;
        ensure(row.more_sensitive == MoreSensitive::First, || format!("{} not flagged", f.symbol()))?;
    }
    Ok("memorization exceeds utilization on N, C_b, B_eff".into())
}

fn advisor_correctness() -> Check {
    let start = Instant::now();
    let reg = PresetRegistry::builtin();
    let params = reg.params("opt-general").unwrap();
    let space = SearchSpace::published();
    let points = sweep(params, &space, false).map_err(|e| e.to_string())?;
    ensure(points.len() == 384, || format!("{} points", points.len()))?;
    let frontier = pareto_frontier(&points);
    let oracle = pareto_oracle(&points);
    ensure(same_points(&frontier, &oracle), || {
        format!("frontier has {} points, oracle {}", frontier.len(), oracle.len())
    })?;

    let lo = points.iter().map(|p| p.predicted_accuracy).fold(f64::MAX, f64::min);
    let hi = points.iter().map(|p| p.predicted_accuracy).fold(f64::MIN, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..50 {
        let target = rng.gen_range(0.0..hi * 1.02);
        let got = min_cost_config(params, &space, target, false).map_err(|e| e.to_string())?;
        let want = min_cost_oracle(&points, target);
        let same = match (&got, &want) {
            (Some(a), Some(b)) => same_points(&[*a], &[*b]),
            (None, None) => true,
            _ => false,
        };
        ensure(same, || format!("target {i} = {target}: {got:?} vs {want:?}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {}", ms(elapsed)))?;
    Ok(format!(
        "{} frontier points, 50 targets in [0, {:.3}] (sweep range {lo:.3}..{hi:.3}), {}",
        frontier.len(),
        hi * 1.02,
        ms(elapsed)
    ))
}

fn round_trips() -> Check {
    let text = std::fs::read(FIXTURE).map_err(|e| e.to_string())?;
    let ds = ExperimentDataset::read_csv(text.as_slice(), Provenance::default()).map_err(|e| e.to_string())?;
    let mut written = Vec::new();
    ds.write_csv(&mut written).map_err(|e| e.to_string())?;
    ensure(written == text, || "CSV rewrite is not byte-identical".into())?;
    let again = ExperimentDataset::read_csv(written.as_slice(), Provenance::default()).map_err(|e| e.to_string())?;
    let bitwise = ds
        .records()
        .iter()
        .zip(again.records())
        .all(|(a, b)| a.accuracy.to_bits() == b.accuracy.to_bits() && a.n_params.to_bits() == b.n_params.to_bits());
    ensure(ds == again && bitwise, || "CSV reload differs".into())?;

    let file = PresetRegistry::builtin().to_file();
    let toml_text = file.to_toml_string();
    let back = LawFile::from_toml_str(&toml_text).map_err(|e| e.to_string())?;
    ensure(back == file && back.to_toml_string() == toml_text, || "params file does not round-trip".into())?;

    let configs = published_configs();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (i, mask) in default_masks().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(110 + i as u64);
        let truth = random_truth(&mut rng, mask, &configs);
        let generated = generate_synthetic(&truth, &SyntheticConfig::default()).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("gen{i}.csv"));
        generated
            .dataset
            .write_csv(std::fs::File::create(&path).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let loaded = ExperimentDataset::load(&path).map_err(|e| e.to_string())?;
        let obs = aggregate(&loaded, &BenchmarkMap::default(), &Aggregation::new(Scope::General6))
            .map_err(|e| e.to_string())?;
        let fit = fit_nls(&FitProblem::new(obs, mask).map_err(|e| e.to_string())?, &FitOptions::default())
            .map_err(|e| e.to_string())?;
        let err = max_exponent_error(&fit.params, &truth);
        ensure(err <= 1e-6 && fit.r_squared >= 1.0 - 1e-9, || {
            format!("mask {mask}: exponent error {err:e}, R² {}", fit.r_squared)
        })?;
    }
    Ok(format!("{} CSV rows and {} laws round-trip, 4 pipeline closures", ds.len(), file.laws.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("effective bit-width table", beff_table),
        ("preset fidelity", preset_fidelity),
        ("prediction oracle", prediction_oracle),
        ("noiseless fitter recovery", noiseless_recovery),
        ("noisy fitter recovery", noisy_recovery),
        ("analytic Jacobian", jacobian_check),
        ("goodness-of-fit conformance", goodness_of_fit_conformance),
        ("ablation structure", ablation_structure),
        ("sensitivity finding", sensitivity_finding),
        ("advisor correctness", advisor_correctness),
        ("round-trips", round_trips),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
