//! Nonlinear least-squares estimation of scaling-law parameters.
//!
//! Residuals are taken on the untransformed accuracy scale. The solver is a
//! Levenberg–Marquardt iteration with Marquardt's diagonal scaling, started
//! from the ordinary least-squares fit of the log-linearised law.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    gradient, log_features, predict, Factor, FactorMask, PtqConfig, ScalingLawParams, TaskKind,
    ValidityDomain,
};
use crate::presets::{FitDiagnostics, LawRecord};

/// Lower bound applied to the fitted constant `C`.
pub const C_FLOOR: f64 = 1e-12;

const MAX_DAMPING: f64 = 1e20;
const MIN_DAMPING: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub cfg: PtqConfig,
    pub task: TaskKind,
    pub accuracy: f64,
}

impl Observation {
    pub fn new(cfg: PtqConfig, task: TaskKind, accuracy: f64) -> Self {
        Self { cfg, task, accuracy }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitProblem {
    observations: Vec<Observation>,
    mask: FactorMask,
    fixed: [Option<f64>; 4],
    task: TaskKind,
}

impl FitProblem {
    /// Accuracies must be finite and non-negative; the log terms of every
    /// masked-in factor must be positive for every configuration.
    pub fn new(observations: Vec<Observation>, mask: FactorMask) -> Result<Self> {
        for (index, obs) in observations.iter().enumerate() {
            if !(obs.accuracy.is_finite() && obs.accuracy >= 0.0) {
                return Err(Error::InvalidObservation {
                    index,
                    reason: format!("accuracy must be finite and >= 0, got {}", obs.accuracy),
                });
            }
            log_features(&obs.cfg, mask).map_err(|e| e.at_config(obs.cfg))?;
        }
        let task = observations
            .first()
            .map(|o| o.task.clone())
            .unwrap_or(TaskKind::General);
        let problem = Self {
            observations,
            mask,
            fixed: [None; 4],
            task,
        };
        problem.check_size()?;
        Ok(problem)
    }

    /// Pins the exponent of a masked-in factor to `value` instead of fitting it.
    pub fn with_fixed(mut self, factor: Factor, value: f64) -> Result<Self> {
        if !self.mask.contains(factor) {
            return Err(Error::InvalidParams(format!(
                "cannot pin {factor}: it is not in mask {}",
                self.mask
            )));
        }
        if !value.is_finite() {
            return Err(Error::InvalidParams(format!("pinned {factor} exponent is not finite")));
        }
        self.fixed[factor.index()] = Some(value);
        Ok(self)
    }

    pub fn with_task(mut self, task: TaskKind) -> Self {
        self.task = task;
        self
    }

    fn check_size(&self) -> Result<()> {
        let needed = self.free_parameters() + 2;
        if self.observations.len() < needed {
            return Err(Error::InsufficientObservations {
                needed,
                got: self.observations.len(),
            });
        }
        Ok(())
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }
    pub fn mask(&self) -> FactorMask {
        self.mask
    }
    pub fn task(&self) -> &TaskKind {
        &self.task
    }
    pub fn fixed(&self, factor: Factor) -> Option<f64> {
        self.fixed[factor.index()]
    }

    /// Masked-in factors whose exponents are estimated.
    pub fn free_factors(&self) -> Vec<Factor> {
        self.mask
            .iter()
            .filter(|f| self.fixed[f.index()].is_none())
            .collect()
    }

    /// The constant plus every free exponent.
    pub fn free_parameters(&self) -> usize {
        1 + self.free_factors().len()
    }

    fn params_from(&self, c: f64, free: &[f64]) -> Result<ScalingLawParams> {
        let mut exponents = [0.0; 4];
        for factor in self.mask.iter() {
            if let Some(v) = self.fixed[factor.index()] {
                exponents[factor.index()] = v;
            }
        }
        for (factor, value) in self.free_factors().into_iter().zip(free) {
            exponents[factor.index()] = *value;
        }
        ScalingLawParams::new(self.task.clone(), c, exponents, self.mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iter: usize,
    pub tol_step: f64,
    pub tol_cost: f64,
    pub damping_init: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol_step: 1e-10,
            tol_cost: 1e-12,
            damping_init: 1e-3,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidOptions(format!("{name} must be finite and > 0, got {v}")))
            }
        };
        if self.max_iter == 0 {
            return Err(Error::InvalidOptions("max_iter must be > 0".into()));
        }
        positive("tol_step", self.tol_step)?;
        positive("tol_cost", self.tol_cost)?;
        positive("damping_init", self.damping_init)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ScalingLawParams,
    pub r_squared: f64,
    pub adjusted_r_squared: f64,
    pub sse: f64,
    pub n_observations: usize,
    pub free_parameters: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Norm of the last proposed step in the solver's centred `(ln C, exponents)` coordinates.
    pub final_step_norm: f64,
    /// SSE of the starting point followed by the SSE after every accepted step.
    pub cost_history: Vec<f64>,
}

impl FitResult {
    pub fn diagnostics(&self) -> FitDiagnostics {
        FitDiagnostics {
            r_squared: self.r_squared,
            adjusted_r_squared: self.adjusted_r_squared,
            sse: self.sse,
            n_observations: self.n_observations,
            free_parameters: self.free_parameters,
            iterations: self.iterations,
            converged: self.converged,
            final_step_norm: self.final_step_norm,
            dataset_fingerprint: None,
        }
    }

    /// Law record carrying these parameters plus fit diagnostics.
    pub fn to_record(&self, name: impl Into<String>) -> LawRecord {
        LawRecord {
            diagnostics: Some(self.diagnostics()),
            ..LawRecord::from_params(name, &self.params)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoodnessOfFit {
    pub r_squared: f64,
    pub adjusted_r_squared: f64,
    pub sse: f64,
}

/// Coefficient of determination `1 - SSE / SST` on the given scale.
pub fn r_squared(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    assert_eq!(observed.len(), predicted.len(), "observed and predicted lengths differ");
    if observed.len() < 2 {
        return Err(Error::InsufficientObservations {
            needed: 2,
            got: observed.len(),
        });
    }
    if observed.iter().all(|&y| y == observed[0]) {
        return Err(Error::UndefinedRSquared);
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let sst: f64 = observed.iter().map(|y| (y - mean).powi(2)).sum();
    let sse: f64 = observed
        .iter()
        .zip(predicted)
        .map(|(y, f)| (y - f).powi(2))
        .sum();
    if sst == 0.0 {
        return Err(Error::UndefinedRSquared);
    }
    Ok(1.0 - sse / sst)
}

/// `1 - (1 - R²)(n - 1)/(n - p - 1)` with `p` free parameters.
pub fn adjusted_r_squared(r_squared: f64, n: usize, p: usize) -> Result<f64> {
    if n < p + 2 {
        return Err(Error::InsufficientObservations { needed: p + 2, got: n });
    }
    Ok(1.0 - (1.0 - r_squared) * (n - 1) as f64 / (n - p - 1) as f64)
}

/// Fit statistics of `params`, counting the constant plus every masked-in exponent as free.
pub fn goodness_of_fit(observations: &[Observation], params: &ScalingLawParams) -> Result<GoodnessOfFit> {
    goodness_with_dof(observations, params, 1 + params.mask().len())
}

fn goodness_with_dof(
    observations: &[Observation],
    params: &ScalingLawParams,
    free_parameters: usize,
) -> Result<GoodnessOfFit> {
    let observed: Vec<f64> = observations.iter().map(|o| o.accuracy).collect();
    let predicted = observations
        .iter()
        .map(|o| predict(params, &o.cfg).map_err(|e| e.at_config(o.cfg)))
        .collect::<Result<Vec<_>>>()?;
    let r2 = r_squared(&observed, &predicted)?;
    let sse = observed
        .iter()
        .zip(&predicted)
        .map(|(y, f)| (y - f).powi(2))
        .sum();
    Ok(GoodnessOfFit {
        r_squared: r2,
        adjusted_r_squared: adjusted_r_squared(r2, observed.len(), free_parameters)?,
        sse,
    })
}

/// OLS fit of `ln Acc = ln C + Σ e_k ln x_k` over the free factors.
pub fn warm_start(problem: &FitProblem) -> Result<ScalingLawParams> {
    if let Some((index, obs)) = problem
        .observations
        .iter()
        .enumerate()
        .find(|(_, o)| !(o.accuracy > 0.0))
    {
        return Err(Error::NonPositiveAccuracy {
            index,
            value: obs.accuracy,
        });
    }
    log_linear_fit(problem, problem.observations.iter())
}

fn log_linear_fit<'a>(
    problem: &FitProblem,
    observations: impl Iterator<Item = &'a Observation>,
) -> Result<ScalingLawParams> {
    let free = problem.free_factors();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut target = Vec::new();
    for obs in observations {
        let feats = log_features(&obs.cfg, problem.mask).map_err(|e| e.at_config(obs.cfg))?;
        let offset: f64 = problem
            .mask
            .iter()
            .filter_map(|f| problem.fixed(f).map(|e| e * feats[f.index()]))
            .sum();
        target.push(obs.accuracy.ln() - offset);
        rows.push(free.iter().map(|f| feats[f.index()]).collect());
    }
    let n = rows.len();
    if n < free.len() + 1 {
        return Err(Error::InsufficientObservations {
            needed: free.len() + 1,
            got: n,
        });
    }

    let z_mean = target.iter().sum::<f64>() / n as f64;
    if free.is_empty() {
        return problem.params_from(z_mean.exp().max(C_FLOOR), &[]);
    }

    let k = free.len();
    let means: Vec<f64> = (0..k)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut x = DMatrix::from_fn(n, k, |i, j| rows[i][j] - means[j]);
    let mut scales = vec![0.0; k];
    for (j, factor) in free.iter().enumerate() {
        let norm = x.column(j).norm();
        let magnitude = rows.iter().map(|r| r[j].abs()).fold(1.0, f64::max);
        if norm <= 1e-12 * magnitude * (n as f64).sqrt() {
            return Err(Error::DegenerateDesign { factor: *factor });
        }
        scales[j] = norm;
        x.column_mut(j).unscale_mut(norm);
    }
    // Rank check, adding columns one at a time so the culprit can be named.
    for j in 1..k {
        let sub = x.columns(0, j + 1).into_owned();
        let sv = sub.singular_values();
        let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        if lo <= 1e-10 * hi {
            return Err(Error::DegenerateDesign { factor: free[j] });
        }
    }

    let z = DVector::from_iterator(n, target.iter().map(|t| t - z_mean));
    let coef = x
        .svd(true, true)
        .solve(&z, 1e-14)
        .map_err(|_| Error::DegenerateDesign { factor: free[0] })?;
    let exponents: Vec<f64> = (0..k).map(|j| coef[j] / scales[j]).collect();
    let ln_c = z_mean - exponents.iter().zip(&means).map(|(e, m)| e * m).sum::<f64>();
    problem.params_from(ln_c.exp().max(C_FLOOR), &exponents)
}

/// Fits `problem` from the log-linear warm start.
///
/// When some accuracies are zero the warm start uses the positive ones only.
pub fn fit_nls(problem: &FitProblem, options: &FitOptions) -> Result<FitResult> {
    options.validate()?;
    let start = if problem.observations.iter().all(|o| o.accuracy > 0.0) {
        warm_start(problem)?
    } else {
        log_linear_fit(problem, problem.observations.iter().filter(|o| o.accuracy > 0.0))?
    };
    fit_nls_from(problem, &start, options)
}

/// Fits `problem` starting from `start`, whose exponents for pinned factors are ignored.
pub fn fit_nls_from(
    problem: &FitProblem,
    start: &ScalingLawParams,
    options: &FitOptions,
) -> Result<FitResult> {
    options.validate()?;
    if start.mask() != problem.mask {
        return Err(Error::MaskMismatch {
            left: start.mask().to_string(),
            right: problem.mask.to_string(),
        });
    }
    let original = problem;
    // Working with accuracies divided by their mean makes the iteration, and
    // so every stopping decision, independent of the accuracy units.
    let scale = mean_accuracy(problem);
    let scaled = FitProblem {
        observations: problem
            .observations
            .iter()
            .map(|o| Observation::new(o.cfg, o.task.clone(), o.accuracy / scale))
            .collect(),
        ..problem.clone()
    };
    let problem = &scaled;
    let free = problem.free_factors();
    let dim = free.len() + 1;
    let centre = feature_means(problem, &free);
    // Iterate on (ln C + Σ e·x̄, e): centring the log-features decouples the
    // constant from the exponents, which keeps the normal equations well conditioned.
    let mut theta = Vec::with_capacity(dim);
    theta.push((start.c() / scale).max(C_FLOOR).ln() + dot(&centre, free.iter().map(|f| start.exponent(*f))));
    theta.extend(free.iter().map(|f| start.exponent(*f)));
    let to_params = |theta: &[f64]| {
        let c = (theta[0] - dot(&centre, theta[1..].iter().copied())).exp().max(C_FLOOR);
        problem.params_from(c, &theta[1..])
    };

    let mut params = to_params(&theta)?;
    let mut resid = residuals(problem, &params);
    let mut cost: f64 = resid.iter().map(|r| r * r).sum();
    if !cost.is_finite() {
        return Err(Error::NonFinite { iteration: 0 });
    }
    let mut history = vec![cost];
    let mut damping = options.damping_init;
    let mut converged = false;
    let mut iterations = 0;
    let mut step_norm = f64::NAN;

    while iterations < options.max_iter {
        iterations += 1;
        if cost == 0.0 {
            converged = true;
            step_norm = 0.0;
            break;
        }
        let (jtj, jtr) = normal_equations(problem, &params, &free, &centre)
            .ok_or(Error::NonFinite { iteration: iterations })?;

        let mut lhs = jtj.clone();
        for i in 0..dim {
            lhs[(i, i)] += damping * jtj[(i, i)].max(f64::MIN_POSITIVE);
        }
        let Some(chol) = lhs.cholesky() else {
            damping *= 10.0;
            if damping > MAX_DAMPING {
                break;
            }
            continue;
        };
        let delta = chol.solve(&jtr);
        step_norm = delta.norm();
        let theta_norm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        let small_step = step_norm <= options.tol_step * (theta_norm + options.tol_step);

        let trial: Vec<f64> = theta.iter().zip(delta.iter()).map(|(t, d)| t + d).collect();
        let trial_fit = to_params(&trial).ok().map(|p| {
            let r = residuals(problem, &p);
            // Σ(r - r')(r + r') keeps its precision when the two sums nearly cancel.
            let decrease: f64 = resid.iter().zip(&r).map(|(a, b)| (a - b) * (a + b)).sum();
            let c: f64 = r.iter().map(|x| x * x).sum();
            (c, decrease, r, p)
        });

        match trial_fit {
            Some((c, decrease, r, p)) if c.is_finite() && decrease > 0.0 && c <= cost => {
                let relative_decrease = decrease / cost;
                theta = trial;
                params = p;
                resid = r;
                cost = c;
                history.push(cost);
                damping = (damping / 10.0).max(MIN_DAMPING);
                if small_step || relative_decrease < options.tol_cost {
                    converged = true;
                    break;
                }
            }
            _ => {
                damping *= 10.0;
                if small_step {
                    converged = true;
                    break;
                }
                if damping > MAX_DAMPING {
                    break;
                }
            }
        }
    }

    let problem = original;
    let domain = ValidityDomain::spanning(problem.observations.iter().map(|o| &o.cfg));
    let params = problem.params_from(params.c() * scale, &theta[1..])?.with_domain(domain);
    let free_parameters = problem.free_parameters();
    let gof = goodness_with_dof(&problem.observations, &params, free_parameters)?;
    let history = history.into_iter().map(|c| c * scale * scale).collect();
    Ok(FitResult {
        params,
        r_squared: gof.r_squared,
        adjusted_r_squared: gof.adjusted_r_squared,
        sse: gof.sse,
        n_observations: problem.observations.len(),
        free_parameters,
        iterations,
        converged,
        final_step_norm: step_norm,
        cost_history: history,
    })
}

/// Mean observed accuracy, or 1 when that is not a usable divisor.
fn mean_accuracy(problem: &FitProblem) -> f64 {
    let n = problem.observations.len() as f64;
    let mean = problem.observations.iter().map(|o| o.accuracy).sum::<f64>() / n;
    if mean.is_finite() && mean > 0.0 {
        mean
    } else {
        1.0
    }
}

/// `observed - predicted` per observation, NaN where the law is undefined.
fn residuals(problem: &FitProblem, params: &ScalingLawParams) -> Vec<f64> {
    problem
        .observations
        .iter()
        .map(|o| predict(params, &o.cfg).map_or(f64::NAN, |m| o.accuracy - m))
        .collect()
}

/// Mean log-feature of each free factor over the observations.
fn feature_means(problem: &FitProblem, free: &[Factor]) -> Vec<f64> {
    let n = problem.observations.len() as f64;
    let mut sums = vec![0.0; free.len()];
    for obs in &problem.observations {
        let x = log_features(&obs.cfg, problem.mask).unwrap_or([0.0; 4]);
        for (s, f) in sums.iter_mut().zip(free) {
            *s += x[f.index()];
        }
    }
    sums.into_iter().map(|s| s / n).collect()
}

fn dot(a: &[f64], b: impl Iterator<Item = f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `JᵀJ` and `Jᵀr` in the centred coordinates, or `None` if anything is non-finite.
///
/// The rows are the analytic gradient in `(C, exponents)` pushed through the
/// change of variables: `∂/∂a = C ∂/∂C` and `∂/∂e_k = ∂/∂e_k − x̄_k C ∂/∂C`.
fn normal_equations(
    problem: &FitProblem,
    params: &ScalingLawParams,
    free: &[Factor],
    centre: &[f64],
) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let dim = free.len() + 1;
    let mut jtj = DMatrix::<f64>::zeros(dim, dim);
    let mut jtr = DVector::<f64>::zeros(dim);
    let mut row = vec![0.0; dim];
    for obs in &problem.observations {
        let residual = obs.accuracy - predict(params, &obs.cfg).ok()?;
        let grad = gradient(params, &obs.cfg).ok()?;
        let d_log_c = params.c() * grad[0];
        row[0] = d_log_c;
        for (j, f) in free.iter().enumerate() {
            row[j + 1] = grad[1 + f.index()] - centre[j] * d_log_c;
        }
        if !residual.is_finite() || row.iter().any(|v| !v.is_finite()) {
            return None;
        }
        for a in 0..dim {
            jtr[a] += row[a] * residual;
            for b in 0..dim {
                jtj[(a, b)] += row[a] * row[b];
            }
        }
    }
    Some((jtj, jtr))
}
