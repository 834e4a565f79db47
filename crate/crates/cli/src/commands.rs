use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;
use serde_json::json;

use ptq_scaling::ablation::{default_masks, run_ablation, SliceFilter};
use ptq_scaling::advisor::{flag_frontier, min_cost_config, pareto_frontier, sweep, write_table_csv, write_table_jsonl, SearchSpace};
use ptq_scaling::dataset::{
    aggregate, generate_synthetic, Aggregation, BenchmarkMap, ExperimentDataset, Scope, SyntheticConfig,
};
use ptq_scaling::fitting::{fit_nls, FitOptions, FitProblem};
use ptq_scaling::presets::LawFile;
use ptq_scaling::{
    effective_bit_width, predict, Factor, FactorMask, Grid, MetadataScheme, PresetRegistry, PtqConfig, ScalingLawParams,
};

use crate::output::{emit, Cell, Table};
use crate::{
    AblateArgs, AdviseArgs, BeffArgs, Cli, Command, DataArgs, FitArgs, FitFlags, PredictArgs, PresetsAction, SchemeArgs,
    SpaceArgs, SynthArgs,
};

/// A problem with the invocation itself, reported with exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

macro_rules! usage {
    ($($t:tt)*) => { return Err(Usage(format!($($t)*)).into()) };
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<ptq_scaling::Error>() {
            return if e.is_validation() { 2 } else { 1 };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
    }
    1
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Session::new(cli)?;
    match &cli.command {
        Command::Beff(a) => beff(&ctx, a),
        Command::Predict(a) => predict_cmd(&ctx, a),
        Command::Fit(a) => fit(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
        Command::Advise(a) => advise(&ctx, a),
        Command::Plotdata(a) => crate::plotdata::run(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Presets(a) => presets(&ctx, &a.action),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    fit: Option<FitOptions>,
    benchmarks: Option<BenchmarkMap>,
}

/// Settings shared by every subcommand.
pub struct Session {
    pub json: bool,
    pub output: String,
    pub seed: u64,
    pub registry: PresetRegistry,
    from_file: bool,
    fit: FitOptions,
    benchmarks: BenchmarkMap,
}

impl Session {
    fn new(cli: &Cli) -> Result<Self> {
        let config: ConfigFile = match &cli.config {
            Some(path) => {
                let text = read(path)?;
                toml::from_str(&text).with_context(|| format!("reading config {}", path.display()))?
            }
            None => ConfigFile::default(),
        };
        let registry = match &cli.params_file {
            Some(path) => PresetRegistry::from_file(&LawFile::read(path)?)?,
            None => PresetRegistry::builtin(),
        };
        Ok(Self {
            json: cli.json,
            output: cli.output.clone(),
            seed: cli.seed,
            registry,
            from_file: cli.params_file.is_some(),
            fit: config.fit.unwrap_or_default(),
            benchmarks: config.benchmarks.unwrap_or_default(),
        })
    }

    pub fn emit(&self, bytes: &[u8]) -> Result<()> {
        emit(&self.output, bytes)
    }

    /// The law named `name`, or the only law of a params file.
    pub fn law(&self, name: Option<&str>, fallback: Option<&str>) -> Result<(String, ScalingLawParams)> {
        let name = match (name, self.from_file) {
            (Some(n), _) => n.to_string(),
            (None, true) if self.registry.len() == 1 => self.registry.names().next().unwrap().to_string(),
            (None, true) => usage!(
                "the params file holds {} laws; pick one with --preset ({})",
                self.registry.len(),
                self.registry.names().collect::<Vec<_>>().join(", ")
            ),
            (None, false) => match fallback {
                Some(f) => f.to_string(),
                None => usage!("a law is required: pass --preset or --params-file"),
            },
        };
        match self.registry.params(&name) {
            Some(p) => Ok((name, p.clone())),
            None => usage!(
                "unknown law `{name}` (available: {})",
                self.registry.names().collect::<Vec<_>>().join(", ")
            ),
        }
    }

    fn fit_options(&self, flags: &FitFlags) -> Result<FitOptions> {
        let mut o = self.fit;
        if let Some(v) = flags.max_iter {
            o.max_iter = v;
        }
        if let Some(v) = flags.tol_step {
            o.tol_step = v;
        }
        if let Some(v) = flags.tol_cost {
            o.tol_cost = v;
        }
        if let Some(v) = flags.damping {
            o.damping_init = v;
        }
        o.validate()?;
        Ok(o)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|source| ptq_scaling::Error::Io { path: path.to_path_buf(), source })
        .map_err(Into::into)
}

pub fn scheme(args: &SchemeArgs) -> MetadataScheme {
    if args.symmetric {
        MetadataScheme::symmetric(args.b_s)
    } else {
        MetadataScheme { scale_bits: args.b_s, symmetric: false }
    }
}

/// The space's grid with unspecified axes taken from `defaults`.
pub fn grid(args: &SpaceArgs, defaults: Grid) -> Result<Grid> {
    fn axis<T: Clone>(name: &str, given: &Option<Vec<T>>, default: Vec<T>) -> Result<Vec<T>> {
        match given {
            Some(v) if v.is_empty() => usage!("--{name} was given without values"),
            Some(v) => Ok(v.clone()),
            None => Ok(default),
        }
    }
    Ok(Grid {
        n_params: axis("n-params", &args.n_params, defaults.n_params)?,
        w_base: axis("w-base", &args.w_base, defaults.w_base)?,
        c_b: axis("c-b", &args.c_b, defaults.c_b)?,
        g: axis("g", &args.g, defaults.g)?,
    })
}

fn beff(ctx: &Session, a: &BeffArgs) -> Result<()> {
    let b_z = if a.symmetric { 0 } else { a.b_z.unwrap_or(a.w_base) };
    let v = effective_bit_width(a.w_base, a.g, a.b_s, b_z)?;
    let text = if ctx.json {
        json!({"w_base": a.w_base, "g": a.g, "b_s": a.b_s, "b_z": b_z, "b_eff": v.value(), "display": v.display_2dp()})
            .to_string()
    } else {
        format!("{:?} ({})", v.value(), v.display_2dp())
    };
    ctx.emit(format!("{text}\n").as_bytes())
}

fn predict_cmd(ctx: &Session, a: &PredictArgs) -> Result<()> {
    let (name, params) = ctx.law(a.law.preset.as_deref(), None)?;
    let cfg = PtqConfig::with_scheme(a.n_params, a.w_base, a.c_b, a.g, scheme(&a.scheme))?;
    let extrapolated = params.domain().is_some_and(|d| !d.contains(&cfg));
    if extrapolated {
        eprintln!("warning: {cfg} lies outside the ranges `{name}` was fitted on");
    }
    let acc = predict(&params, &cfg)?;
    let text = if ctx.json {
        json!({
            "law": name,
            "n_params": cfg.n_params(),
            "w_base": cfg.w_base(),
            "c_b": cfg.c_b(),
            "g": cfg.g(),
            "b_eff": cfg.effective_bit_width().value(),
            "predicted_accuracy": acc,
            "extrapolated": extrapolated,
        })
        .to_string()
    } else {
        acc.to_string()
    };
    ctx.emit(format!("{text}\n").as_bytes())
}

/// Loads, slices and aggregates a dataset.
fn observations(ctx: &Session, a: &DataArgs) -> Result<(Scope, Vec<ptq_scaling::Observation>)> {
    let scope: Scope = a.scope.parse()?;
    let ds = ExperimentDataset::load(&a.data)?;
    let ds = match &a.slice {
        Some(s) => {
            let filter: SliceFilter = s.parse()?;
            let records: Vec<_> = ds.records().iter().filter(|r| filter.matches(r)).cloned().collect();
            if records.is_empty() {
                return Err(ptq_scaling::Error::EmptySlice { filter: filter.to_string() }.into());
            }
            ExperimentDataset::from_records(records, ds.provenance().clone())?
        }
        None => ds,
    };
    let agg = Aggregation {
        scope,
        benchmarks: a.benchmarks.clone(),
        scheme: scheme(&a.scheme),
    };
    let obs = aggregate(&ds, &ctx.benchmarks, &agg)?;
    Ok((scope, obs))
}

fn fit(ctx: &Session, a: &FitArgs) -> Result<()> {
    let options = ctx.fit_options(&a.options)?;
    let mask: FactorMask = a.mask.parse()?;
    let (scope, obs) = observations(ctx, &a.data)?;
    let fingerprint = ptq_scaling::dataset::observations_fingerprint(&obs);
    let mut problem = FitProblem::new(obs, mask)?.with_task(scope.task());
    for pin in &a.fixed {
        let Some((factor, value)) = pin.split_once('=') else {
            usage!("--fix expects FACTOR=VALUE, got `{pin}`");
        };
        let factor: Factor = factor.parse()?;
        let value: f64 = value.trim().parse().map_err(|_| Usage(format!("`{value}` is not a number")))?;
        problem = problem.with_fixed(factor, value)?;
    }
    let result = fit_nls(&problem, &options)?;
    eprintln!("{}", result.params.formula(4));
    eprintln!(
        "R² = {:.4}, adjusted R² = {:.4}, {} observations, {} iterations{}",
        result.r_squared,
        result.adjusted_r_squared,
        result.n_observations,
        result.iterations,
        if result.converged { "" } else { " (not converged)" }
    );
    let mut record = result.to_record(a.name.clone());
    if let Some(d) = record.diagnostics.as_mut() {
        d.dataset_fingerprint = Some(fingerprint);
    }
    let bytes = if ctx.json {
        let mut s = serde_json::to_string(&record)?;
        s.push('\n');
        s.into_bytes()
    } else {
        LawFile::new(vec![record]).to_toml_string().into_bytes()
    };
    ctx.emit(&bytes)
}

fn parse_masks(masks: Option<&str>) -> Result<Vec<FactorMask>> {
    match masks.map(str::trim) {
        None => Ok(default_masks()),
        Some("all") => Ok(FactorMask::all_subsets().collect()),
        Some(s) => s
            .split(';')
            .map(str::trim)
            .filter(|m| !m.is_empty())
            .map(|m| m.parse::<FactorMask>().map_err(Into::into))
            .collect(),
    }
}

fn ablate(ctx: &Session, a: &AblateArgs) -> Result<()> {
    let options = ctx.fit_options(&a.options)?;
    let masks = parse_masks(a.masks.as_deref())?;
    let (_, obs) = observations(ctx, &a.data)?;
    let report = run_ablation(&obs, &masks, &options)?;
    if let Some(path) = &a.laws {
        emit(path, report.to_law_file().to_toml_string().as_bytes())?;
    }
    let bytes = if ctx.json {
        let mut out = String::new();
        if let Some(entries) = report.to_json()["entries"].as_array() {
            for e in entries {
                out.push_str(&e.to_string());
                out.push('\n');
            }
        }
        out
    } else {
        report.to_string()
    };
    ctx.emit(bytes.as_bytes())
}

fn advise(ctx: &Session, a: &AdviseArgs) -> Result<()> {
    let (_, params) = ctx.law(a.law.preset.as_deref(), None)?;
    let space = SearchSpace::new(grid(&a.space, Grid::published())?, scheme(&a.space.scheme))?;
    if let Some(t) = a.target {
        if !(t.is_finite() && t > 0.0) {
            usage!("--target must be a positive accuracy, got {t}");
        }
    }
    let points = sweep(&params, &space, a.allow_extrapolation)?;
    let rows = match a.target {
        Some(t) => {
            let best = min_cost_config(&params, &space, t, a.allow_extrapolation)?;
            if best.is_none() {
                eprintln!("no configuration in the space is predicted to reach {t}");
            }
            flag_frontier(&best.into_iter().collect::<Vec<_>>(), &points)
        }
        None if a.frontier => flag_frontier(&pareto_frontier(&points), &points),
        None => flag_frontier(&points, &points),
    };
    let extrapolated = rows.iter().filter(|(p, _)| p.extrapolated).count();
    if extrapolated > 0 {
        eprintln!("warning: {extrapolated} row(s) extrapolate beyond the law's fitted ranges");
    }
    let mut out = Vec::new();
    if ctx.json {
        write_table_jsonl(&rows, &mut out)?;
    } else {
        write_table_csv(&rows, &mut out)?;
    }
    ctx.emit(&out)
}

fn synth(ctx: &Session, a: &SynthArgs) -> Result<()> {
    let (_, params) = ctx.law(a.law.preset.as_deref(), None)?;
    let config = SyntheticConfig {
        grid: grid(&a.space, Grid::published())?,
        noise_sigma: a.sigma,
        seed: ctx.seed,
        benchmarks: ctx.benchmarks.clone(),
        model_family: a.family.clone(),
        scheme: scheme(&a.space.scheme),
    };
    let generated = generate_synthetic(&params, &config)?;
    if generated.clamped_rows > 0 {
        eprintln!("warning: {} accuracies were clamped to [0, 1]", generated.clamped_rows);
    }
    let mut out = Vec::new();
    if ctx.json {
        generated.dataset.write_jsonl(&mut out)?;
    } else {
        generated.dataset.write_csv(&mut out)?;
    }
    ctx.emit(&out)
}

fn presets(ctx: &Session, action: &PresetsAction) -> Result<()> {
    match action {
        PresetsAction::List => {
            let mut table = Table::new(&["name", "task", "factors", "formula"]);
            for p in ctx.registry.iter() {
                table.push(vec![
                    Cell::from(p.name.as_str()),
                    Cell::from(p.params.task().label()),
                    Cell::from(p.params.mask().to_string()),
                    Cell::from(p.params.formula(4)),
                ]);
            }
            ctx.emit(&table.render(ctx.json)?)
        }
        PresetsAction::Show { name } => {
            let Some(p) = ctx.registry.get(name) else {
                usage!("unknown law `{name}`");
            };
            let record = p.to_record();
            let text = if ctx.json {
                serde_json::to_string(&record)? + "\n"
            } else {
                LawFile::new(vec![record]).to_toml_string()
            };
            ctx.emit(text.as_bytes())
        }
        PresetsAction::Export => {
            let text = if ctx.json {
                ctx.registry
                    .iter()
                    .map(|p| serde_json::to_string(&p.to_record()).map(|s| s + "\n"))
                    .collect::<Result<String, _>>()?
            } else {
                ctx.registry.to_toml_string()
            };
            ctx.emit(text.as_bytes())
        }
    }
}
