//! The experiment commands. Each writes its CSV and SVG artifacts and
//! returns the metrics that go into `summary.json`; every metric is
//! recomputable from the CSVs.

use std::collections::BTreeMap;
use std::io::Write;

use anyhow::{anyhow, bail, Context, Result};
use fireflow::format::fmt_f64;
use fireflow::metrics::{
    convergence_series, energy_distance, estimate_order, integrate_many, perturbation_propagation,
    reconstruction_error, straightness, velocity_reuse_error, ErrorPoint, ErrorSeries,
    ReconstructionReport, VelocityReuse,
};
use fireflow::train::{derive_seed, REFLOW_STEPS};
use fireflow::{
    integrate, reflow, train_rectified_flow, AnalyticField, CouplingSource, MlpParams, SolverKind,
    StateVec, TimeGrid, TrainOutcome, VelocityField,
};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::output::{OutputDir, Report};
use crate::svg::{render_panels, Plot, Series, Style};
use crate::Command;

/// Sampling streams derived from the master seed.
const STREAM_DATA: u64 = 10;
const STREAM_STARTS: u64 = 11;
const STREAM_ENERGY_STARTS: u64 = 100;
const STREAM_ENERGY_TARGET: u64 = 200;

/// Paths drawn in trajectory plots.
const PLOTTED_PATHS: usize = 64;

/// Reference grid for learned fields, as a multiple of the finest ladder entry.
const REFERENCE_REFINEMENT: usize = 64;

pub fn run(command: Command, config: &RunConfig, out: &mut OutputDir) -> Result<Report> {
    match command {
        Command::Train => train(config, out),
        Command::Convergence => convergence(config, out),
        Command::Reconstruct => reconstruct(config, out),
        Command::VelocityError => velocity_error(config, out),
        Command::Straightness => straightness_cmd(config, out),
        Command::Perturb => perturb(config, out),
        Command::Energy => energy(config, out),
    }
}

enum Model {
    Analytic(AnalyticField),
    Learned(MlpParams),
}

impl VelocityField for Model {
    fn dim(&self) -> Option<usize> {
        match self {
            Model::Analytic(f) => f.dim(),
            Model::Learned(p) => p.dim(),
        }
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        match self {
            Model::Analytic(f) => f.velocity(x, t),
            Model::Learned(p) => p.velocity(x, t),
        }
    }
}

impl Model {
    fn load(config: &RunConfig) -> Result<Self> {
        if let Some(spec) = &config.field {
            let field = spec
                .parse::<AnalyticField>()
                .map_err(|e| anyhow!("invalid field {spec:?}: {e}"))?;
            return Ok(Model::Analytic(field));
        }
        if let Some(path) = &config.checkpoint {
            let params =
                MlpParams::load(path).with_context(|| format!("loading {}", path.display()))?;
            return Ok(Model::Learned(params));
        }
        bail!("this command needs --field or --checkpoint")
    }

    fn accepts(&self, dim: usize) -> Result<()> {
        match self.dim() {
            Some(d) if d != dim => bail!("field acts on dimension {d}, data has dimension {dim}"),
            _ => Ok(()),
        }
    }
}

fn state(v: &[f64]) -> Result<StateVec> {
    StateVec::new(v.to_vec()).map_err(|e| anyhow!("invalid point {v:?}: {e}"))
}

fn solvers(config: &RunConfig) -> Vec<SolverKind> {
    config.solver.map_or(SolverKind::ALL.to_vec(), |k| vec![k])
}

/// Explicit steps if given, else the step count matching the NFE budget.
fn budget_steps(config: &RunConfig, kind: SolverKind) -> Vec<usize> {
    if config.steps.is_empty() {
        kind.steps_for_nfe(config.nfe).into_iter().collect()
    } else {
        config.steps.clone()
    }
}

/// Start points: `x0` when given, else samples of the source mixture.
fn starts(config: &RunConfig, model: &Model) -> Result<Vec<StateVec>> {
    let points = if config.x0.is_empty() {
        config
            .source
            .build()?
            .sample(config.samples, derive_seed(config.seed, STREAM_STARTS))
    } else {
        vec![state(&config.x0)?]
    };
    model.accepts(points[0].dim())?;
    Ok(points)
}

fn csv_text(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

fn loss_summary(t: &TrainOutcome) -> Value {
    let min = t.losses.iter().copied().fold(f64::INFINITY, f64::min);
    json!({
        "iterations": t.losses.len(),
        "first_loss": t.losses.first(),
        "final_loss": t.losses.last(),
        "min_loss": min,
    })
}

fn loss_series(name: &str, t: &TrainOutcome, color: usize) -> Series {
    let pts = t
        .losses
        .iter()
        .enumerate()
        .map(|(i, &l)| (i as f64, l))
        .collect();
    Series::new(name, pts, Style::Line, color)
}

fn train(config: &RunConfig, out: &mut OutputDir) -> Result<Report> {
    let source = config.source.build().context("source mixture")?;
    let target = config.target.build().context("target mixture")?;
    let cfg = config.train_config();
    let coupling = CouplingSource::Independent {
        source: &source,
        target: &target,
    };
    let one = train_rectified_flow(&cfg, coupling)?;
    let mut plot = Plot::new("Training loss", "iteration", "batch loss").log_y();

    if !config.reflow {
        one.params.save(&out.path("model.json"))?;
        out.record("model.json");
        out.write_csv("loss.csv", |w| one.write_loss_csv(w))?;
        out.write_svg(
            "loss.svg",
            &plot.with(loss_series("1-rectified", &one, 0)).render(),
        )?;
        return Ok(Report {
            metrics: json!({ "model": "model.json", "rectified_1": loss_summary(&one) }),
            nfe_total: 0,
        });
    }

    one.params.save(&out.path("model_1rf.json"))?;
    out.record("model_1rf.json");
    out.write_csv("loss_1rf.csv", |w| one.write_loss_csv(w))?;
    let rf = reflow(&one.params, &cfg, &source, config.reflow_pairs)?;
    out.write_csv("coupling.csv", |w| rf.coupling.write_csv(w))?;
    rf.training.params.save(&out.path("model.json"))?;
    out.record("model.json");
    out.write_csv("loss.csv", |w| rf.training.write_loss_csv(w))?;
    plot = plot
        .with(loss_series("1-rectified", &one, 0))
        .with(loss_series("2-rectified", &rf.training, 1));
    out.write_svg("loss.svg", &plot.render())?;
    Ok(Report {
        metrics: json!({
            "model": "model.json",
            "rectified_1": loss_summary(&one),
            "rectified_2": loss_summary(&rf.training),
            "coupling_pairs": rf.coupling.len(),
            "coupling_steps": REFLOW_STEPS,
        }),
        nfe_total: rf.coupling.len() as u64 * SolverKind::FireFlow.nfe(REFLOW_STEPS),
    })
}

fn convergence(config: &RunConfig, out: &mut OutputDir) -> Result<Report> {
    let model = Model::load(config)?;
    let x0 = if config.x0.is_empty() {
        StateVec::new(vec![1.0; model.dim().unwrap_or(1)])?
    } else {
        state(&config.x0)?
    };
    model.accepts(x0.dim())?;
    let label = config
        .field
        .clone()
        .unwrap_or_else(|| "checkpoint".to_string());

    let mut all = Vec::new();
    for kind in solvers(config) {
        let series = match &model {
            Model::Analytic(f) => {
                convergence_series(f, &x0, kind, &config.steps, &config.schedule)?
            }
            Model::Learned(p) => {
                let finest = config.steps.iter().max().copied().unwrap_or(1);
                let reference_grid = TimeGrid::uniform(finest * REFERENCE_REFINEMENT)?;
                let reference = integrate(p, &x0, &reference_grid, SolverKind::Midpoint)?;
                let mut points = Vec::new();
                for &n in &config.steps {
                    let grid = config.schedule.grid(n)?;
                    let traj = integrate(p, &x0, &grid, kind)?;
                    points.push(ErrorPoint {
                        steps: n,
                        dt: grid.max_abs_dt(),
                        error: traj.last().distance(reference.last()),
                        nfe: traj.nfe_total(),
                    });
                }
                ErrorSeries::new(kind, label.clone(), points)?
            }
        };
        all.push(series);
    }

    out.write_csv("order.csv", |w| {
        writeln!(w, "solver,N,dt,error,nfe")?;
        for s in &all {
            for p in s.points() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    s.solver,
                    p.steps,
                    fmt_f64(p.dt),
                    fmt_f64(p.error),
                    p.nfe
                )?;
            }
        }
        Ok(())
    })?;

    let mut plot = Plot::new(format!("Global error, {label}"), "dt", "error at t = 1")
        .log_x()
        .log_y();
    for (i, s) in all.iter().enumerate() {
        let pts = s.points().iter().map(|p| (p.dt, p.error)).collect();
        plot = plot.with(Series::new(s.solver.name(), pts, Style::Line, i));
    }
    if let Some(anchor) = all.first().and_then(|s| s.points().first().copied()) {
        let dts: Vec<f64> = all[0].points().iter().map(|p| p.dt).collect();
        for (order, color) in [(1, 4), (2, 5)] {
            let pts = dts
                .iter()
                .map(|&h| (h, anchor.error * (h / anchor.dt).powi(order)))
                .collect();
            plot = plot.with(Series::new(
                format!("dt^{order}"),
                pts,
                Style::Dashed,
                color,
            ));
        }
    }
    out.write_svg("order.svg", &plot.render())?;

    let estimates: Vec<Value> = all
        .iter()
        .map(|s| {
            let o = estimate_order(s);
            json!({
                "solver": s.solver,
                "slope": o.slope,
                "intercept": o.intercept,
                "r_squared": o.r_squared,
                "degenerate": o.degenerate,
                "points_used": o.points_used,
            })
        })
        .collect();
    let nfe_total = all.iter().flat_map(|s| s.points()).map(|p| p.nfe).sum();
    Ok(Report {
        metrics: json!({ "field": label, "x0": x0, "order": estimates }),
        nfe_total,
    })
}

fn reconstruct(config: &RunConfig, out: &mut OutputDir) -> Result<Report> {
    let model = Model::load(config)?;
    model.accepts(2)?;
    let data = config
        .target
        .build()?
        .sample(config.samples, derive_seed(config.seed, STREAM_DATA));
    let kinds = solvers(config);

    let mut runs: BTreeMap<(SolverKind, usize), ReconstructionReport> = BTreeMap::new();
    let mut run_one = |kind: SolverKind, n: usize| -> Result<ReconstructionReport> {
        if let Some(r) = runs.get(&(kind, n)) {
            return Ok(r.clone());
        }
        let r = reconstruction_error(&model, &data, n, kind, &config.schedule)?;
        runs.insert((kind, n), r.clone());
        Ok(r)
    };

    let mut rows = Vec::new();
    for &kind in &kinds {
        for &n in &config.steps {
            rows.push(run_one(kind, n)?);
        }
    }
    let mut parity = Vec::new();
    if kinds.contains(&SolverKind::FireFlow) && kinds.contains(&SolverKind::Euler) {
        for &n in &config.steps {
            let ff = run_one(SolverKind::FireFlow, n)?;
            let euler_n = SolverKind::Euler
                .steps_for_nfe(SolverKind::FireFlow.nfe(n))
                .expect("euler matches any budget");
            let eu = run_one(SolverKind::Euler, euler_n)?;
            parity.push((ff, eu));
        }
    }

    out.write_csv("recon.csv", |w| {
        writeln!(w, "solver,N,nfe,mean_err,p50_err,p95_err")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.solver,
                r.steps,
                r.nfe,
                fmt_f64(r.mean),
                fmt_f64(r.p50),
                fmt_f64(r.p95)
            )?;
        }
        Ok(())
    })?;
    out.write_csv("failures.csv", |w| {
        writeln!(w, "solver,N,index,step,message")?;
        for r in &rows {
            for f in &r.failures {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    r.solver,
                    r.steps,
                    f.index,
                    f.step,
                    csv_text(&f.message)
                )?;
            }
        }
        Ok(())
    })?;
    if !parity.is_empty() {
        out.write_csv("parity.csv", |w| {
            writeln!(w, "nfe,fireflow_N,fireflow_mean_err,euler_N,euler_mean_err")?;
            for (ff, eu) in &parity {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    ff.nfe,
                    ff.steps,
                    fmt_f64(ff.mean),
                    eu.steps,
                    fmt_f64(eu.mean)
                )?;
            }
            Ok(())
        })?;
    }

    let mut plot = Plot::new(
        "Reconstruction error",
        "NFE (inversion + reconstruction)",
        "mean error",
    )
    .log_y();
    for (i, &kind) in kinds.iter().enumerate() {
        let pts = rows
            .iter()
            .filter(|r| r.solver == kind)
            .map(|r| (r.nfe as f64, r.mean))
            .collect();
        plot = plot.with(Series::new(kind.name(), pts, Style::Line, i));
    }
    out.write_svg("recon.svg", &plot.render())?;

    let nfe_total = runs.values().map(|r| r.nfe * r.errors.len() as u64).sum();
    let row_json: Vec<Value> = rows
        .iter()
        .map(|r| {
            json!({
                "solver": r.solver, "N": r.steps, "nfe": r.nfe, "mean_err": r.mean,
                "p50_err": r.p50, "p95_err": r.p95, "failures": r.failures.len(),
            })
        })
        .collect();
    let parity_json: Vec<Value> = parity
        .iter()
        .map(|(ff, eu)| {
            json!({
                "nfe": ff.nfe, "fireflow_N": ff.steps, "fireflow_mean_err": ff.mean,
                "euler_N": eu.steps, "euler_mean_err": eu.mean, "fireflow_lower": ff.mean < eu.mean,
            })
        })
        .collect();
    Ok(Report {
        metrics: json!({ "samples": data.len(), "rows": row_json, "parity": parity_json }),
        nfe_total,
    })
}

fn velocity_error(config: &RunConfig, out: &mut OutputDir) -> Result<Report> {
    let model = Model::load(config)?;
    let starts = starts(config, &model)?;

    struct Run {
        steps: usize,
        times: Vec<f64>,
        dts: Vec<f64>,
        means: Vec<f64>,
        solver_nfe: u64,
        instrumentation: u64,
    }
    let mut runs = Vec::new();
    for &n in &config.steps {
        let grid = config.schedule.grid(n)?;
        let reports = starts
            .par_iter()
            .map(|x0| velocity_reuse_error(&model, x0, &grid))
            .collect::<Result<Vec<VelocityReuse>, _>>()?;
        let per_step = reports[0].per_step.len();
        let means = (0..per_step)
            .map(|j| {
                reports.iter().map(|r| r.per_step[j].error).sum::<f64>() / reports.len() as f64
            })
            .collect();
        runs.push(Run {
            steps: n,
            times: reports[0].per_step.iter().map(|s| s.t).collect(),
            dts: (1..n).map(|i| grid.dt(i - 1).abs()).collect(),
            means,
            solver_nfe: reports.iter().map(|r| r.solver_nfe).sum(),
            instrumentation: reports.iter().map(|r| r.instrumentation_evals).sum(),
        });
    }

    out.write_csv("velocity_error.csv", |w| {
        writeln!(w, "steps,step,t,mean_error,dt")?;
        for r in &runs {
            for (j, ((t, e), dt)) in r.times.iter().zip(&r.means).zip(&r.dts).enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    r.steps,
                    j + 1,
                    fmt_f64(*t),
                    fmt_f64(*e),
                    fmt_f64(*dt)
                )?;
            }
        }
        Ok(())
    })?;

    let panels: Vec<Plot> = runs
        .iter()
        .map(|r| {
            let err = r
                .times
                .iter()
                .copied()
                .zip(r.means.iter().copied())
                .collect();
            let dt = r.times.iter().copied().zip(r.dts.iter().copied()).collect();
            Plot::new(format!("{} steps", r.steps), "t", "mean |v_hat - v|")
                .with(Series::new("reuse error", err, Style::Line, 0))
                .with(Series::new("dt", dt, Style::Dashed, 5))
        })
        .collect();
    out.write_svg("velocity_error.svg", &render_panels(&panels))?;

    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let series: Vec<Value> = runs
        .iter()
        .map(|r| {
            json!({
                "steps": r.steps,
                "dt_max": r.dts.iter().copied().fold(0.0, f64::max),
                "mean_error": mean(&r.means),
                "max_error": r.means.iter().copied().fold(0.0, f64::max),
                "solver_nfe": r.solver_nfe,
                "instrumentation_evals": r.instrumentation,
            })
        })
        .collect();
    let ratios: Vec<Value> = runs
        .windows(2)
        .map(|w| {
            json!({
                "from_steps": w[0].steps,
                "to_steps": w[1].steps,
                "mean_error_ratio": mean(&w[0].means) / mean(&w[1].means),
            })
        })
        .collect();
    Ok(Report {
        metrics: json!({ "paths": starts.len(), "series": series, "ratios": ratios }),
        nfe_total: runs.iter().map(|r| r.solver_nfe).sum(),
    })
}

fn straightness_cmd(config: &RunConfig, out: &mut OutputDir) -> Result<Report> {
    let model = Model::load(config)?;
    let starts = starts(config, &model)?;

    struct Run {
        kind: SolverKind,
        steps: usize,
        nfe: u64,
        values: Vec<Option<f64>>,
        plotted: Vec<fireflow::Trajectory>,
    }
    let mut runs = Vec::new();
    for kind in solvers(config) {
        for n in budget_steps(config, kind) {
            let grid = config.schedule.grid(n)?;
            let trajs = integrate_many(&model, &starts, &grid, kind)?;
            let values = trajs.iter().map(|t| straightness(&t.states).ok()).collect();
            runs.push(Run {
                kind,
                steps: n,
                nfe: kind.nfe(n),
                values,
                plotted: trajs.into_iter().take(PLOTTED_PATHS).collect(),
            });
        }
    }
    if runs.is_empty() {
        bail!(
            "no solver can spend exactly {} NFE; pass --steps",
            config.nfe
        );
    }

    out.write_csv("straightness.csv", |w| {
        writeln!(w, "solver,N,nfe,path,straightness")?;
        for r in &runs {
            for (i, v) in r.values.iter().enumerate() {
                if let Some(v) = v {
                    writeln!(w, "{},{},{},{i},{}", r.kind, r.steps, r.nfe, fmt_f64(*v))?;
                }
            }
        }
        Ok(())
    })?;
    let dim = starts[0].dim();
    out.write_csv("trajectories.csv", |w| {
        let xs: Vec<String> = (0..dim).map(|j| format!("x_{j}")).collect();
        writeln!(w, "solver,N,path,step,t,{}", xs.join(","))?;
        for r in &runs {
            for (p, traj) in r.plotted.iter().enumerate() {
                for (s, (t, x)) in traj.times.iter().zip(&traj.states).enumerate() {
                    let xs: Vec<String> = x.as_slice().iter().map(|&c| fmt_f64(c)).collect();
                    writeln!(
                        w,
                        "{},{},{p},{s},{},{}",
                        r.kind,
                        r.steps,
                        fmt_f64(*t),
                        xs.join(",")
                    )?;
                }
            }
        }
        Ok(())
    })?;

    if dim >= 2 {
        let panels: Vec<Plot> = runs
            .iter()
            .map(|r| {
                let mut plot = Plot::new(format!("{}, N = {}", r.kind, r.steps), "x_0", "x_1");
                for traj in &r.plotted {
                    let pts = traj.states.iter().map(|x| (x[0], x[1])).collect();
                    plot = plot.with(Series::new("", pts, Style::Line, 0));
                }
                plot
            })
            .collect();
        out.write_svg("trajectories.svg", &render_panels(&panels))?;
    }

    let summary: Vec<Value> = runs
        .iter()
        .map(|r| {
            let defined: Vec<f64> = r.values.iter().flatten().copied().collect();
            let mean = if defined.is_empty() {
                None
            } else {
                Some(defined.iter().sum::<f64>() / defined.len() as f64)
            };
            json!({
                "solver": r.kind, "N": r.steps, "nfe": r.nfe, "mean": mean,
                "max": defined.iter().copied().fold(0.0, f64::max),
                "paths": defined.len(), "undefined": r.values.len() - defined.len(),
            })
        })
        .collect();
    Ok(Report {
        metrics: json!({ "straightness": summary }),
        nfe_total: runs.iter().map(|r| r.nfe * r.values.len() as u64).sum(),
    })
}

fn perturb(config: &RunConfig, out: &mut OutputDir) -> Result<Report> {
    let Model::Analytic(field) = Model::load(config)? else {
        bail!("perturb needs an analytic field with a known Lipschitz constant");
    };
    let x0 = if config.x0.is_empty() {
        StateVec::new(vec![0.5; field.dim().unwrap_or(1)])?
    } else {
        state(&config.x0)?
    };
    let delta = if config.delta.is_empty() {
        let mut d = vec![0.0; x0.dim()];
        d[0] = 0.1;
        StateVec::new(d)?
    } else {
        state(&config.delta)?
    };
    Model::Analytic(field.clone()).accepts(x0.dim())?;
    if delta.dim() != x0.dim() {
        bail!(
            "perturbation has dimension {}, start point {}",
            delta.dim(),
            x0.dim()
        );
    }
    let r = perturbation_propagation(&field, &x0, &delta, config.horizon)?;
    if !r.satisfied {
        eprintln!(
            "note: |delta_0| = {} exceeds exp(-L T) |delta_T| = {}; the reverse dynamics expand perturbations",
            r.delta_0_norm, r.bound
        );
    }

    out.write_csv("perturb.csv", |w| {
        writeln!(w, "t,separation,reference")?;
        for p in &r.separation {
            writeln!(
                w,
                "{},{},{}",
                fmt_f64(p.t),
                fmt_f64(p.norm),
                fmt_f64(p.reference)
            )?;
        }
        Ok(())
    })?;
    let sep = r.separation.iter().map(|p| (p.t, p.norm)).collect();
    let reference = r.separation.iter().map(|p| (p.t, p.reference)).collect();
    let plot = Plot::new(format!("Backward perturbation, {field}"), "t", "|delta(t)|")
        .with(Series::new("measured", sep, Style::Line, 0))
        .with(Series::new(
            "exp(-L (T - t)) |delta_T|",
            reference,
            Style::Dashed,
            1,
        ));
    out.write_svg("perturb.svg", &plot.render())?;

    Ok(Report {
        metrics: json!({
            "field": field.to_string(),
            "delta_t_norm": r.delta_t_norm,
            "delta_0_norm": r.delta_0_norm,
            "exact_delta_0_norm": r.exact_delta_0_norm,
            "lipschitz": r.lipschitz,
            "horizon": r.horizon,
            "bound": r.bound,
            "satisfied": r.satisfied,
        }),
        nfe_total: 2 * SolverKind::Midpoint.nfe(r.separation.len() - 1),
    })
}

fn energy(config: &RunConfig, out: &mut OutputDir) -> Result<Report> {
    let model = Model::load(config)?;
    model.accepts(2)?;
    let source = config.source.build()?;
    let target = config.target.build()?;

    struct Row {
        seed: usize,
        kind: SolverKind,
        steps: usize,
        nfe: u64,
        energy: f64,
    }
    let mut rows = Vec::new();
    for s in 0..config.seeds {
        let starts = source.sample(
            config.samples,
            derive_seed(config.seed, STREAM_ENERGY_STARTS + s as u64),
        );
        let fresh = target.sample(
            config.samples,
            derive_seed(config.seed, STREAM_ENERGY_TARGET + s as u64),
        );
        for kind in solvers(config) {
            for n in budget_steps(config, kind) {
                let grid = config.schedule.grid(n)?;
                let ends: Vec<StateVec> = integrate_many(&model, &starts, &grid, kind)?
                    .into_iter()
                    .map(|t| t.last().clone())
                    .collect();
                rows.push(Row {
                    seed: s,
                    kind,
                    steps: n,
                    nfe: kind.nfe(n),
                    energy: energy_distance(&ends, &fresh)?,
                });
            }
        }
    }
    if rows.is_empty() {
        bail!(
            "no solver can spend exactly {} NFE; pass --steps",
            config.nfe
        );
    }

    out.write_csv("energy.csv", |w| {
        writeln!(w, "seed,solver,N,nfe,energy")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.seed,
                r.kind,
                r.steps,
                r.nfe,
                fmt_f64(r.energy)
            )?;
        }
        Ok(())
    })?;

    let mut groups: BTreeMap<(SolverKind, usize), Vec<&Row>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.kind, r.steps)).or_default().push(r);
    }
    let mut plot = Plot::new(
        "Energy distance to fresh target samples",
        "seed",
        "energy distance",
    );
    let mut summary = Vec::new();
    for (i, ((kind, n), group)) in groups.iter().enumerate() {
        let pts = group.iter().map(|r| (r.seed as f64, r.energy)).collect();
        plot = plot.with(Series::new(format!("{kind} N={n}"), pts, Style::Markers, i));
        summary.push(json!({
            "solver": kind, "N": n, "nfe": kind.nfe(*n),
            "mean_energy": group.iter().map(|r| r.energy).sum::<f64>() / group.len() as f64,
        }));
    }
    out.write_svg("energy.svg", &plot.render())?;

    Ok(Report {
        metrics: json!({ "samples": config.samples, "seeds": config.seeds, "energy": summary }),
        nfe_total: rows.iter().map(|r| r.nfe * config.samples as u64).sum(),
    })
}
