//! Oracles shared by the integration tests. None of them call into the
//! fitting or advisor code they are used to check.

#![allow(dead_code)]

use std::cmp::Ordering;

use ptq_scaling::advisor::ParetoPoint;
use ptq_scaling::fitting::Observation;
use ptq_scaling::model::{Factor, FactorMask, Grid, MetadataScheme, PtqConfig, ScalingLawParams, TaskKind};
use rand::Rng;

pub const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/synthetic_noisy.csv");

/// Log-features of a configuration computed from its raw fields.
pub fn raw_features(cfg: &PtqConfig) -> [f64; 4] {
    let beff = cfg.w_base() as f64 + (cfg.scale_bits() + cfg.zero_point_bits()) as f64 / cfg.g() as f64;
    [
        cfg.n_params().ln(),
        (cfg.c_b() as f64).log2().ln(),
        (cfg.g() as f64).ln(),
        beff.log2().ln(),
    ]
}

/// The power law evaluated directly, term by term.
pub fn power_law(c: f64, e: [f64; 4], cfg: &PtqConfig) -> f64 {
    let beff = cfg.w_base() as f64 + (cfg.scale_bits() + cfg.zero_point_bits()) as f64 / cfg.g() as f64;
    c * cfg.n_params().powf(e[0])
        * (cfg.c_b() as f64).log2().powf(e[1])
        * (cfg.g() as f64).powf(e[2])
        * beff.log2().powf(e[3])
}

/// Asymmetric configurations of the published 6×4×4×4 grid.
pub fn published_configs() -> Vec<PtqConfig> {
    Grid::published().configs(MetadataScheme::default()).unwrap()
}

/// Exponents drawn from the published sign/magnitude ranges, with C chosen
/// so the largest prediction over `configs` lands in [0.6, 0.95].
pub fn random_truth<R: Rng>(rng: &mut R, mask: FactorMask, configs: &[PtqConfig]) -> ScalingLawParams {
    let ranges = [(0.05, 0.3), (0.02, 0.2), (-0.1, 0.01), (0.2, 0.9)];
    let mut e = [0.0; 4];
    for f in mask.iter() {
        let (lo, hi) = ranges[f.index()];
        e[f.index()] = rng.gen_range(lo..hi);
    }
    let top = configs.iter().map(|c| power_law(1.0, e, c)).fold(f64::MIN, f64::max);
    let c = rng.gen_range(0.6..0.95) / top;
    ScalingLawParams::new(TaskKind::General, c, e, mask).unwrap()
}

pub fn noiseless(params: &ScalingLawParams, configs: &[PtqConfig]) -> Vec<Observation> {
    configs
        .iter()
        .map(|cfg| Observation::new(*cfg, TaskKind::General, power_law(params.c(), params.exponents(), cfg)))
        .collect()
}

pub fn max_exponent_error(a: &ScalingLawParams, b: &ScalingLawParams) -> f64 {
    Factor::ALL
        .iter()
        .map(|f| (a.exponent(*f) - b.exponent(*f)).abs())
        .fold(0.0, f64::max)
}

/// Least-squares minimizer by compass search over `(ln C, exponents)` in a
/// centred parametrization, halving the step whenever no point of the full
/// 3^d neighbourhood improves. Returns `(C, exponents)`.
pub fn grid_refinement_fit(obs: &[Observation], mask: FactorMask) -> (f64, [f64; 4]) {
    let free: Vec<usize> = mask.iter().map(|f| f.index()).collect();
    let d = free.len() + 1;
    let x: Vec<[f64; 4]> = obs.iter().map(|o| raw_features(&o.cfg)).collect();
    let y: Vec<f64> = obs.iter().map(|o| o.accuracy).collect();
    let n = obs.len() as f64;
    let mut mean = [0.0; 4];
    for row in &x {
        for k in 0..4 {
            mean[k] += row[k] / n;
        }
    }
    let sse = |theta: &[f64]| -> f64 {
        x.iter()
            .zip(&y)
            .map(|(row, yi)| {
                let mut z = theta[0];
                for (j, &k) in free.iter().enumerate() {
                    z += theta[j + 1] * (row[k] - mean[k]);
                }
                (yi - z.exp()).powi(2)
            })
            .sum()
    };

    let mut theta = vec![0.0; d];
    theta[0] = (y.iter().sum::<f64>() / n).ln();
    let mut best = sse(&theta);
    let mut step = 0.25;
    let neighbours = 3usize.pow(d as u32);
    while step > 1e-10 {
        let mut best_trial: Option<(f64, Vec<f64>)> = None;
        for code in 0..neighbours {
            let mut trial = theta.clone();
            let mut rest = code;
            for t in trial.iter_mut() {
                *t += step * ((rest % 3) as f64 - 1.0);
                rest /= 3;
            }
            let s = sse(&trial);
            if s < best_trial.as_ref().map_or(best, |b| b.0) {
                best_trial = Some((s, trial));
            }
        }
        match best_trial {
            Some((s, t)) => {
                best = s;
                theta = t;
            }
            None => step /= 2.0,
        }
    }

    let mut e = [0.0; 4];
    let mut ln_c = theta[0];
    for (j, &k) in free.iter().enumerate() {
        e[k] = theta[j + 1];
        ln_c -= theta[j + 1] * mean[k];
    }
    (ln_c.exp(), e)
}

/// Tie-break key: smaller `(w_base, g, c_b)` wins, then smaller model.
fn key(p: &ParetoPoint) -> (u32, u32, u32, u64) {
    (p.cfg.w_base(), p.cfg.g(), p.cfg.c_b(), p.cfg.n_params().to_bits())
}

/// Pairwise dominance check; exact duplicates collapse to the tie-break winner.
pub fn pareto_oracle(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut kept: Vec<ParetoPoint> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let dominated = points.iter().enumerate().any(|(j, q)| {
            if i == j {
                return false;
            }
            let ge = q.predicted_accuracy >= p.predicted_accuracy && q.storage_bits <= p.storage_bits;
            let strict = q.predicted_accuracy > p.predicted_accuracy || q.storage_bits < p.storage_bits;
            let tie_winner = !strict && key(q) < key(p);
            ge && (strict || tie_winner)
        });
        if !dominated {
            kept.push(*p);
        }
    }
    kept.sort_by(|a, b| a.storage_bits.partial_cmp(&b.storage_bits).unwrap());
    kept
}

/// Linear scan for the cheapest point reaching `target`.
pub fn min_cost_oracle(points: &[ParetoPoint], target: f64) -> Option<ParetoPoint> {
    let mut best: Option<ParetoPoint> = None;
    for p in points.iter().filter(|p| p.predicted_accuracy >= target) {
        let better = match &best {
            None => true,
            Some(b) => match p.storage_bits.partial_cmp(&b.storage_bits).unwrap() {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => {
                    p.predicted_accuracy > b.predicted_accuracy
                        || (p.predicted_accuracy == b.predicted_accuracy && key(p) < key(b))
                }
            },
        };
        if better {
            best = Some(*p);
        }
    }
    best
}

pub fn same_points(a: &[ParetoPoint], b: &[ParetoPoint]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(p, q)| {
            p.cfg == q.cfg
                && p.predicted_accuracy.to_bits() == q.predicted_accuracy.to_bits()
                && p.storage_bits.to_bits() == q.storage_bits.to_bits()
        })
}
