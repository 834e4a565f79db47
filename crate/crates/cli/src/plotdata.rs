//! Series for redrawing accuracy curves and surfaces from a law. Rendering is left to the caller.

use anyhow::Result;

use ptq_scaling::{predict, Grid, MetadataScheme, PtqConfig, ScalingLawParams};

use crate::commands::{grid, scheme, Session, Usage};
use crate::output::{Cell, Table};
use crate::{Figure, PlotArgs};

/// Calibration sizes for smooth curves: 8, 16, ..., 4096.
fn calibration_sweep() -> Vec<u32> {
    (3..=12).map(|k| 1u32 << k).collect()
}

fn evaluate(law: &ScalingLawParams, cfg: &PtqConfig, outside: &mut usize) -> Result<f64> {
    if law.domain().is_some_and(|d| !d.contains(cfg)) {
        *outside += 1;
    }
    Ok(predict(law, cfg)?)
}

pub fn run(ctx: &Session, a: &PlotArgs) -> Result<()> {
    let scheme = scheme(&a.space.scheme);
    let mut outside = 0;
    let table = match a.figure {
        Figure::BeffCurve => {
            let (_, law) = ctx.law(a.law.preset.as_deref(), Some("opt-general"))?;
            let space = grid(&a.space, Grid::published())?;
            let c_b = a.at_cb.unwrap_or(128);
            let mut t = Table::new(&["n_params", "w_base", "g", "c_b", "b_eff", "accuracy"]);
            for &n in &space.n_params {
                let mut cfgs = Vec::new();
                for &w in &space.w_base {
                    for &g in &space.g {
                        cfgs.push(PtqConfig::with_scheme(n, w, c_b, g, scheme)?);
                    }
                }
                cfgs.sort_by(|x, y| x.effective_bit_width().value().total_cmp(&y.effective_bit_width().value()));
                for cfg in cfgs {
                    let acc = evaluate(&law, &cfg, &mut outside)?;
                    t.push(row(&cfg, &["n_params", "w_base", "g", "c_b"], acc));
                }
            }
            t
        }
        Figure::CbCurve => {
            let (_, law) = ctx.law(a.law.preset.as_deref(), Some("opt-general"))?;
            let space = grid(&a.space, Grid { c_b: calibration_sweep(), ..Grid::published() })?;
            let (n, g) = (a.at_n.unwrap_or(6.7e9), a.at_g.unwrap_or(128));
            let mut t = Table::new(&["w_base", "c_b", "n_params", "g", "b_eff", "accuracy"]);
            for &w in &space.w_base {
                for &c_b in &space.c_b {
                    let cfg = PtqConfig::with_scheme(n, w, c_b, g, scheme)?;
                    let acc = evaluate(&law, &cfg, &mut outside)?;
                    t.push(row(&cfg, &["w_base", "c_b", "n_params", "g"], acc));
                }
            }
            t
        }
        Figure::GsCurve => {
            let (_, law) = ctx.law(a.law.preset.as_deref(), Some("opt-2bit"))?;
            let space = grid(&a.space, Grid::published())?;
            let (w, c_b) = (a.at_w.unwrap_or(2), a.at_cb.unwrap_or(128));
            let mut g_values = space.g.clone();
            g_values.sort_unstable();
            let mut t = Table::new(&["n_params", "g", "w_base", "c_b", "b_eff", "accuracy"]);
            for &n in &space.n_params {
                for &g in &g_values {
                    let cfg = PtqConfig::with_scheme(n, w, c_b, g, scheme)?;
                    let acc = evaluate(&law, &cfg, &mut outside)?;
                    t.push(row(&cfg, &["n_params", "g", "w_base", "c_b"], acc));
                }
            }
            t
        }
        Figure::Surface2bit => {
            let (_, law) = ctx.law(a.law.preset.as_deref(), Some("opt-2bit"))?;
            let space = grid(&a.space, Grid::published())?;
            let w = a.at_w.unwrap_or(2);
            let mut t = Table::new(&["n_params", "g", "c_b", "w_base", "b_eff", "accuracy"]);
            for &n in &space.n_params {
                for &g in &space.g {
                    for &c_b in &space.c_b {
                        let cfg = PtqConfig::with_scheme(n, w, c_b, g, scheme)?;
                        let acc = evaluate(&law, &cfg, &mut outside)?;
                        t.push(row(&cfg, &["n_params", "g", "c_b", "w_base"], acc));
                    }
                }
            }
            t
        }
        Figure::Sensitivity => sensitivity(ctx, a, scheme, &mut outside)?,
    };
    if outside > 0 {
        eprintln!("warning: {outside} point(s) lie outside the law's fitted ranges");
    }
    ctx.emit(&table.render(ctx.json)?)
}

/// The listed configuration fields, then `b_eff` and the accuracy.
fn row(cfg: &PtqConfig, fields: &[&str], acc: f64) -> Vec<Cell> {
    let mut out: Vec<Cell> = fields
        .iter()
        .map(|f| match *f {
            "n_params" => Cell::from(cfg.n_params()),
            "w_base" => Cell::from(cfg.w_base()),
            "c_b" => Cell::from(cfg.c_b()),
            _ => Cell::from(cfg.g()),
        })
        .collect();
    out.push(Cell::from(cfg.effective_bit_width().value()));
    out.push(Cell::from(acc));
    out
}

/// Relative gain of each task law along one factor at a time, measured
/// against the first point of the sweep with the other factors at a baseline.
fn sensitivity(ctx: &Session, a: &PlotArgs, scheme: MetadataScheme, outside: &mut usize) -> Result<Table> {
    let family = a.family.to_ascii_lowercase();
    if a.law.preset.is_some() {
        return Err(Usage("the sensitivity figure takes --family, not --preset".into()).into());
    }
    let laws = [
        ("memorization", ctx.law(Some(&format!("{family}-mem")), None)?.1),
        ("utilization", ctx.law(Some(&format!("{family}-util")), None)?.1),
    ];
    let space = grid(&a.space, Grid { c_b: calibration_sweep(), ..Grid::published() })?;
    let base_n = a.at_n.unwrap_or(6.7e9);
    let base_w = a.at_w.unwrap_or(4);
    let base_cb = a.at_cb.unwrap_or(128);
    let base_g = a.at_g.unwrap_or(128);

    let mut sweeps: Vec<(&str, Vec<PtqConfig>)> = Vec::new();
    sweeps.push((
        "N",
        space.n_params.iter().map(|&n| PtqConfig::with_scheme(n, base_w, base_cb, base_g, scheme)).collect::<Result<_, _>>()?,
    ));
    sweeps.push((
        "C_b",
        space.c_b.iter().map(|&c| PtqConfig::with_scheme(base_n, base_w, c, base_g, scheme)).collect::<Result<_, _>>()?,
    ));
    let mut by_width: Vec<PtqConfig> = space
        .w_base
        .iter()
        .map(|&w| PtqConfig::with_scheme(base_n, w, base_cb, base_g, scheme))
        .collect::<Result<_, _>>()?;
    by_width.sort_by(|x, y| x.effective_bit_width().value().total_cmp(&y.effective_bit_width().value()));
    sweeps.push(("B_eff", by_width));

    let mut t = Table::new(&["factor", "task", "x", "accuracy", "relative_gain_pct"]);
    for (factor, cfgs) in &sweeps {
        for (task, law) in &laws {
            let mut reference = None;
            for cfg in cfgs {
                let acc = evaluate(law, cfg, outside)?;
                let base = *reference.get_or_insert(acc);
                let x = match *factor {
                    "N" => cfg.n_params(),
                    "C_b" => cfg.c_b() as f64,
                    _ => cfg.effective_bit_width().value(),
                };
                t.push(vec![
                    Cell::from(*factor),
                    Cell::from(*task),
                    Cell::from(x),
                    Cell::from(acc),
                    Cell::from(100.0 * (acc / base - 1.0)),
                ]);
            }
        }
    }
    Ok(t)
}
