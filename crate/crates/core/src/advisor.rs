//! Configuration search on top of a fitted law.
//!
//! Storage is `n_params × B_eff` bits (weights plus group metadata). `C_b`
//! costs no storage and is reported alongside as calibration effort.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{predict, Grid, MetadataScheme, PtqConfig, ScalingLawParams};

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    grid: Grid,
    scheme: MetadataScheme,
}

impl SearchSpace {
    pub fn new(grid: Grid, scheme: MetadataScheme) -> Result<Self> {
        for (name, empty) in [
            ("n_params", grid.n_params.is_empty()),
            ("w_base", grid.w_base.is_empty()),
            ("c_b", grid.c_b.is_empty()),
            ("g", grid.g.is_empty()),
        ] {
            if empty {
                return Err(Error::InvalidSpace(format!("candidate list for {name} is empty")));
            }
        }
        // Validates every candidate value.
        grid.configs(scheme)?;
        Ok(Self { grid, scheme })
    }

    /// The published 6 × 4 × 4 × 4 grid, asymmetric with FP16 scales.
    pub fn published() -> Self {
        Self::new(Grid::published(), MetadataScheme::default()).expect("published grid is valid")
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn scheme(&self) -> MetadataScheme {
        self.scheme
    }

    pub fn configs(&self) -> Vec<PtqConfig> {
        self.grid.configs(self.scheme).expect("validated at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParetoPoint {
    pub cfg: PtqConfig,
    pub b_eff: f64,
    pub predicted_accuracy: f64,
    pub storage_bits: f64,
    /// Outside the law's validity domain.
    pub extrapolated: bool,
}

impl ParetoPoint {
    /// Tie-break key: smaller `(w_base, g, c_b)` first, then smaller model.
    fn tie_key(&self) -> (u32, u32, u32, u64) {
        (self.cfg.w_base(), self.cfg.g(), self.cfg.c_b(), self.cfg.n_params().to_bits())
    }

    /// At least as good on both objectives and strictly better on one.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        self.predicted_accuracy >= other.predicted_accuracy
            && self.storage_bits <= other.storage_bits
            && (self.predicted_accuracy > other.predicted_accuracy || self.storage_bits < other.storage_bits)
    }
}

/// Cheaper first; at equal storage, more accurate first; then the tie-break key.
fn cost_order(a: &ParetoPoint, b: &ParetoPoint) -> Ordering {
    a.storage_bits
        .total_cmp(&b.storage_bits)
        .then(b.predicted_accuracy.total_cmp(&a.predicted_accuracy))
        .then(a.tie_key().cmp(&b.tie_key()))
}

pub fn evaluate(params: &ScalingLawParams, cfg: PtqConfig, allow_extrapolation: bool) -> Result<ParetoPoint> {
    let extrapolated = params.domain().is_some_and(|d| !d.contains(&cfg));
    if extrapolated && !allow_extrapolation {
        return Err(Error::Extrapolation { config: cfg.to_string() });
    }
    let predicted_accuracy = predict(params, &cfg).map_err(|e| e.at_config(cfg))?;
    let b_eff = cfg.effective_bit_width().value();
    Ok(ParetoPoint {
        cfg,
        b_eff,
        predicted_accuracy,
        storage_bits: cfg.n_params() * b_eff,
        extrapolated,
    })
}

/// One point per grid element, in grid order.
pub fn sweep(params: &ScalingLawParams, space: &SearchSpace, allow_extrapolation: bool) -> Result<Vec<ParetoPoint>> {
    space
        .configs()
        .into_par_iter()
        .map(|cfg| evaluate(params, cfg, allow_extrapolation))
        .collect()
}

/// Non-dominated points under (max accuracy, min storage), sorted by storage.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted = points.to_vec();
    sorted.sort_by(cost_order);
    let mut frontier: Vec<ParetoPoint> = Vec::new();
    for p in sorted {
        match frontier.last() {
            Some(last) if p.predicted_accuracy <= last.predicted_accuracy => {}
            _ => frontier.push(p),
        }
    }
    frontier
}

/// Cheapest point predicted to reach `target`, if any.
pub fn cheapest_meeting(points: &[ParetoPoint], target: f64) -> Option<ParetoPoint> {
    points
        .iter()
        .filter(|p| p.predicted_accuracy >= target)
        .min_by(|a, b| cost_order(a, b))
        .copied()
}

pub fn min_cost_config(
    params: &ScalingLawParams,
    space: &SearchSpace,
    target_accuracy: f64,
    allow_extrapolation: bool,
) -> Result<Option<ParetoPoint>> {
    if !target_accuracy.is_finite() || target_accuracy < 0.0 {
        return Err(Error::InvalidConfig {
            field: "target_accuracy",
            reason: format!("must be finite and >= 0, got {target_accuracy}"),
        });
    }
    Ok(cheapest_meeting(&sweep(params, space, allow_extrapolation)?, target_accuracy))
}

pub const TABLE_HEADER: [&str; 9] = [
    "n_params",
    "w_base",
    "c_b",
    "g",
    "b_eff",
    "predicted_accuracy",
    "storage_bits",
    "frontier_flag",
    "extrapolation_flag",
];

#[derive(Debug, Clone, Serialize)]
struct TableRow {
    n_params: f64,
    w_base: u32,
    c_b: u32,
    g: u32,
    b_eff: f64,
    predicted_accuracy: f64,
    storage_bits: f64,
    frontier_flag: bool,
    extrapolation_flag: bool,
}

/// Points with their frontier membership against `universe`.
pub fn flag_frontier(points: &[ParetoPoint], universe: &[ParetoPoint]) -> Vec<(ParetoPoint, bool)> {
    let frontier = pareto_frontier(universe);
    points
        .iter()
        .map(|p| (*p, frontier.iter().any(|f| f.cfg == p.cfg)))
        .collect()
}

fn rows(points: &[(ParetoPoint, bool)]) -> impl Iterator<Item = TableRow> + '_ {
    points.iter().map(|(p, on_frontier)| TableRow {
        n_params: p.cfg.n_params(),
        w_base: p.cfg.w_base(),
        c_b: p.cfg.c_b(),
        g: p.cfg.g(),
        b_eff: p.b_eff,
        predicted_accuracy: p.predicted_accuracy,
        storage_bits: p.storage_bits,
        frontier_flag: *on_frontier,
        extrapolation_flag: p.extrapolated,
    })
}

pub fn write_table_csv<W: Write>(points: &[(ParetoPoint, bool)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TABLE_HEADER)?;
    for r in rows(points) {
        w.write_record([
            r.n_params.to_string(),
            r.w_base.to_string(),
            r.c_b.to_string(),
            r.g.to_string(),
            r.b_eff.to_string(),
            r.predicted_accuracy.to_string(),
            r.storage_bits.to_string(),
            r.frontier_flag.to_string(),
            r.extrapolation_flag.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn write_table_jsonl<W: Write>(points: &[(ParetoPoint, bool)], mut writer: W) -> Result<()> {
    for r in rows(points) {
        let line = serde_json::to_string(&r).expect("rows serialize");
        writeln!(writer, "{line}").map_err(|e| Error::Csv(e.into()))?;
    }
    Ok(())
}
