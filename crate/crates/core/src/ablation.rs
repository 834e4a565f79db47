//! Fits under several factor masks, and fits restricted to a slice of the grid.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{aggregate_records, observations_fingerprint, Aggregation, BenchmarkMap, ExperimentDataset, ExperimentRecord};
use crate::error::{Error, Result};
use crate::fitting::{fit_nls, FitOptions, FitProblem, FitResult, Observation};
use crate::model::{Factor, FactorMask};
use crate::presets::{LawFile, LawRecord};

/// The four-factor law and the three reduced forms it is compared against.
pub fn default_masks() -> Vec<FactorMask> {
    use Factor::*;
    vec![
        FactorMask::from_factors([N, Cb, G, Beff]),
        FactorMask::from_factors([N, Beff]),
        FactorMask::from_factors([N, G, Beff]),
        FactorMask::from_factors([N, Cb, Beff]),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskOutcome {
    Fitted(FitResult),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskFit {
    pub mask: FactorMask,
    pub outcome: MaskOutcome,
}

impl MaskFit {
    pub fn fit(&self) -> Option<&FitResult> {
        match &self.outcome {
            MaskOutcome::Fitted(f) => Some(f),
            MaskOutcome::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    /// Successful fits by descending adjusted R², then failures, ties broken by input order.
    pub entries: Vec<MaskFit>,
    pub dataset_fingerprint: String,
    pub n_observations: usize,
}

impl AblationReport {
    pub fn get(&self, mask: FactorMask) -> Option<&MaskFit> {
        self.entries.iter().find(|e| e.mask == mask)
    }

    /// Law file with one entry per successful fit, named after its mask.
    pub fn to_law_file(&self) -> LawFile {
        let laws = self
            .entries
            .iter()
            .filter_map(|e| {
                e.fit().map(|fit| {
                    let mut rec: LawRecord = fit.to_record(format!("ablation-{}", e.mask));
                    if let Some(d) = rec.diagnostics.as_mut() {
                        d.dataset_fingerprint = Some(self.dataset_fingerprint.clone());
                    }
                    rec
                })
            })
            .collect();
        LawFile::new(laws)
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Row {
            mask: String,
            formula: Option<String>,
            record: Option<LawRecord>,
            error: Option<String>,
        }
        let rows: Vec<Row> = self
            .entries
            .iter()
            .map(|e| match &e.outcome {
                MaskOutcome::Fitted(fit) => Row {
                    mask: e.mask.to_string(),
                    formula: Some(fit.params.formula(4)),
                    record: Some(fit.to_record(format!("ablation-{}", e.mask))),
                    error: None,
                },
                MaskOutcome::Failed(msg) => Row {
                    mask: e.mask.to_string(),
                    formula: None,
                    record: None,
                    error: Some(msg.clone()),
                },
            })
            .collect();
        serde_json::json!({
            "dataset_fingerprint": self.dataset_fingerprint,
            "n_observations": self.n_observations,
            "entries": rows,
        })
    }
}

/// Text table with form, fitted function and adjusted R² columns.
impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let forms: Vec<String> = self.entries.iter().map(|e| format!("Acc = f({})", e.mask)).collect();
        let bodies: Vec<String> = self
            .entries
            .iter()
            .map(|e| match &e.outcome {
                MaskOutcome::Fitted(fit) => fit.params.formula(4),
                MaskOutcome::Failed(msg) => format!("FAILED: {msg}"),
            })
            .collect();
        let w_form = forms.iter().map(|s| s.chars().count()).max().unwrap_or(4).max(4);
        let w_body = bodies.iter().map(|s| s.chars().count()).max().unwrap_or(15).max(15);
        writeln!(f, "# observations: {}  fingerprint: {}", self.n_observations, self.dataset_fingerprint)?;
        writeln!(f, "{:<w_form$} | {:<w_body$} | Adj. R^2", "Form", "Fitted function")?;
        writeln!(f, "{}-+-{}-+-{}", "-".repeat(w_form), "-".repeat(w_body), "-".repeat(8))?;
        for ((form, body), e) in forms.iter().zip(&bodies).zip(&self.entries) {
            let r2 = e.fit().map(|fit| format!("{:.4}", fit.adjusted_r_squared)).unwrap_or_else(|| "-".into());
            // `{:<w$}` pads by chars, which matches the counting above.
            writeln!(f, "{form:<w_form$} | {body:<w_body$} | {r2}")?;
        }
        Ok(())
    }
}

/// One fit per mask on the same observations. Individual failures are recorded, not propagated.
pub fn run_ablation(
    observations: &[Observation],
    masks: &[FactorMask],
    options: &FitOptions,
) -> Result<AblationReport> {
    if masks.is_empty() {
        return Err(Error::InvalidMasks("at least one mask is required".into()));
    }
    for (i, m) in masks.iter().enumerate() {
        if masks[..i].contains(m) {
            return Err(Error::InvalidMasks(format!("mask {m} is listed twice")));
        }
    }
    options.validate()?;

    let fits: Vec<MaskFit> = masks
        .par_iter()
        .map(|&mask| {
            let outcome = FitProblem::new(observations.to_vec(), mask)
                .and_then(|p| fit_nls(&p, options))
                .map_or_else(|e| MaskOutcome::Failed(e.to_string()), MaskOutcome::Fitted);
            MaskFit { mask, outcome }
        })
        .collect();

    let mut indexed: Vec<(usize, MaskFit)> = fits.into_iter().enumerate().collect();
    indexed.sort_by(|(ia, a), (ib, b)| match (a.fit(), b.fit()) {
        (Some(x), Some(y)) => y
            .adjusted_r_squared
            .total_cmp(&x.adjusted_r_squared)
            .then(ia.cmp(ib)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => ia.cmp(ib),
    });
    Ok(AblationReport {
        entries: indexed.into_iter().map(|(_, e)| e).collect(),
        dataset_fingerprint: observations_fingerprint(observations),
        n_observations: observations.len(),
    })
}

/// Aggregates `ds` and runs [`run_ablation`] on the result.
pub fn run_dataset_ablation(
    ds: &ExperimentDataset,
    map: &BenchmarkMap,
    aggregation: &Aggregation,
    masks: &[FactorMask],
    options: &FitOptions,
) -> Result<AblationReport> {
    let observations = aggregate_records(ds.records().iter(), map, aggregation)?;
    run_ablation(&observations, masks, options)
}

/// Conjunction of allowed values per grid field; an unset field admits everything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SliceFilter {
    pub n_params: Option<Vec<f64>>,
    pub w_base: Option<Vec<u32>>,
    pub c_b: Option<Vec<u32>>,
    pub g: Option<Vec<u32>>,
}

impl SliceFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn w_base(bits: u32) -> Self {
        Self {
            w_base: Some(vec![bits]),
            ..Self::default()
        }
    }

    pub fn matches(&self, rec: &ExperimentRecord) -> bool {
        fn ok<T: PartialEq>(allowed: &Option<Vec<T>>, v: &T) -> bool {
            allowed.as_ref().is_none_or(|a| a.contains(v))
        }
        ok(&self.n_params, &rec.n_params) && ok(&self.w_base, &rec.w_base) && ok(&self.c_b, &rec.c_b) && ok(&self.g, &rec.g)
    }
}

impl fmt::Display for SliceFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn join<T: fmt::Display>(v: &[T]) -> String {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("|")
        }
        let mut parts = Vec::new();
        if let Some(v) = &self.n_params {
            parts.push(format!("n_params={}", join(v)));
        }
        if let Some(v) = &self.w_base {
            parts.push(format!("w_base={}", join(v)));
        }
        if let Some(v) = &self.c_b {
            parts.push(format!("c_b={}", join(v)));
        }
        if let Some(v) = &self.g {
            parts.push(format!("g={}", join(v)));
        }
        if parts.is_empty() {
            f.write_str("all")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

impl std::str::FromStr for SliceFilter {
    type Err = Error;

    /// `field=v1|v2,field=v` with fields `n_params`, `w_base`, `c_b`, `g`.
    fn from_str(s: &str) -> Result<Self> {
        let mut filter = SliceFilter::default();
        let bad = |message: String| Error::Parse {
            what: "slice filter".into(),
            message,
        };
        for clause in s.split(',').map(str::trim).filter(|c| !c.is_empty()) {
            let (field, values) = clause
                .split_once('=')
                .ok_or_else(|| bad(format!("`{clause}` is not field=value")))?;
            let values: Vec<&str> = values.split('|').map(str::trim).collect();
            let ints = || {
                values
                    .iter()
                    .map(|v| v.parse::<u32>().map_err(|_| bad(format!("`{v}` is not an integer"))))
                    .collect::<Result<Vec<_>>>()
            };
            match field.trim() {
                "n_params" | "n" => {
                    filter.n_params = Some(
                        values
                            .iter()
                            .map(|v| v.parse::<f64>().map_err(|_| bad(format!("`{v}` is not a number"))))
                            .collect::<Result<_>>()?,
                    )
                }
                "w_base" | "w" => filter.w_base = Some(ints()?),
                "c_b" | "cb" => filter.c_b = Some(ints()?),
                "g" => filter.g = Some(ints()?),
                other => return Err(bad(format!("unknown field `{other}`"))),
            }
        }
        Ok(filter)
    }
}

/// Fits only the records admitted by `filter`.
pub fn fit_slice(
    ds: &ExperimentDataset,
    map: &BenchmarkMap,
    aggregation: &Aggregation,
    filter: &SliceFilter,
    mask: FactorMask,
    options: &FitOptions,
) -> Result<FitResult> {
    let mut selected = ds.records().iter().filter(|r| filter.matches(r)).peekable();
    if selected.peek().is_none() {
        return Err(Error::EmptySlice {
            filter: filter.to_string(),
        });
    }
    let observations = aggregate_records(selected, map, aggregation)?;
    fit_nls(&FitProblem::new(observations, mask)?, options)
}
