use cnode_core::cnode::{
    evaluate, intersecting, train, BalanceMode, CharacteristicField, CnodeModel, GradMode, Loss,
    Sample, TrainConfig,
};
use cnode_core::density::{
    mean_nll, sample, train_cnf, Cnf, CnfTrainConfig, ProbeDist, TraceEstimator,
};
use cnode_core::diffcore::gradcheck::check_primitives;
use cnode_core::diffcore::{fnv1a64, AdamConfig, Checkpoint, MlpSpec, ParamVector};
use cnode_core::solver::{integrate_with, FnDynamics, Method, OdeProblem, SolveStats, SolverConfig};
use cnode_core::tasks::{
    burgers_characteristics, first_crossing, gen_pde_dataset, gen_timeseries, gen_toy2d,
    node_pde_baseline, pde_fit, scalar_cnode, scalar_node, timeseries_eval, two_point_task,
    BurgersDemo, NodePdeModel, PdeFitConfig, PdeModel, PdeRegressionTask, SeriesModelKind,
    TimeSeriesConfig, ToyKind,
};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::run::{Outcome, RunDir};

/// Settings shared by every command.
pub struct Ctx<'a> {
    pub cfg: &'a mut RunConfig,
    pub dir: &'a RunDir,
    pub seed: u64,
    pub parallel: bool,
}

impl Ctx<'_> {
    fn solver(&mut self, default: SolverConfig) -> CliResult<SolverConfig> {
        let method: Method = self
            .cfg
            .get("solver.method", default.method.to_string())?
            .parse()?;
        Ok(SolverConfig {
            method,
            h: self.cfg.get("solver.h", default.h)?,
            rtol: self.cfg.get("solver.rtol", default.rtol)?,
            atol: self.cfg.get("solver.atol", default.atol)?,
            max_steps: self.cfg.get("solver.max_steps", default.max_steps)?,
        })
    }

    fn adam(&mut self, lr: f64) -> CliResult<AdamConfig> {
        Ok(AdamConfig {
            lr: self.cfg.get("train.lr", lr)?,
            ..AdamConfig::default()
        })
    }
}

fn spec_hash<T: serde::Serialize>(spec: &T) -> CliResult<u64> {
    Ok(fnv1a64(serde_json::to_string(spec)?.as_bytes()))
}

fn add_stats(out: &mut Outcome, prefix: &str, stats: &SolveStats) {
    out.stat(&format!("{prefix}_nfe"), stats.nfe);
    out.stat(&format!("{prefix}_steps_accepted"), stats.steps_accepted);
    out.stat(&format!("{prefix}_steps_rejected"), stats.steps_rejected);
}

pub fn dispatch(command: &str, ctx: &mut Ctx<'_>) -> CliResult<Outcome> {
    match command {
        "solve" => solve(ctx),
        "gradcheck" => gradcheck(ctx),
        "demo-burgers" => demo_burgers(ctx),
        "demo-intersect" => demo_intersect(ctx),
        "pde-fit" => pde(ctx),
        "timeseries" => timeseries(ctx),
        "toy-classify" => toy(ctx),
        "cnf2d" => cnf2d(ctx),
        other => unreachable!("command `{other}` passed validation"),
    }
}

fn solve(ctx: &mut Ctx<'_>) -> CliResult<Outcome> {
    let dynamics: String = ctx.cfg.require("task.dynamics")?;
    let t: f64 = ctx.cfg.get("task.t", 1.0)?;
    let solver = ctx.solver(SolverConfig::dopri5(1e-8, 1e-10))?;
    let (y0, exact): (Vec<f64>, Vec<f64>) = match dynamics.as_str() {
        "decay" => (vec![1.0], vec![(-t).exp()]),
        "oscillator" => (vec![1.0, 0.0], vec![t.cos(), -t.sin()]),
        "logistic" => (vec![0.5], vec![1.0 / (1.0 + (-t).exp())]),
        other => unreachable!("dynamics `{other}` passed validation"),
    };
    let f = FnDynamics::new(y0.len(), |_s, y: &[f64], dy: &mut [f64]| match dynamics.as_str() {
        "decay" => dy[0] = -y[0],
        "oscillator" => {
            dy[0] = y[1];
            dy[1] = -y[0];
        }
        _ => dy[0] = y[0] * (1.0 - y[0]),
    });
    let mut traj = ctx.dir.csv("trajectory.csv")?;
    let mut header = vec!["s".to_string()];
    header.extend((0..y0.len()).map(|i| format!("y{i}")));
    traj.write_record(&header)?;
    let mut rows = Vec::new();
    let (y, stats) = integrate_with(&OdeProblem::new(&f, (0.0, t), y0), &solver, |s, y| {
        let mut row = vec![s.to_string()];
        row.extend(y.iter().map(|v| v.to_string()));
        rows.push(row);
    })?;
    for row in rows {
        traj.write_record(&row)?;
    }
    traj.flush()?;

    let mut w = ctx.dir.csv("solution.csv")?;
    w.write_record(["component", "value", "exact"])?;
    let mut err: f64 = 0.0;
    for (i, (v, e)) in y.iter().zip(&exact).enumerate() {
        w.write_record([i.to_string(), v.to_string(), e.to_string()])?;
        err = err.max((v - e).abs());
    }
    w.flush()?;
    let shown: Vec<String> = y.iter().map(|v| format!("{v:.6}")).collect();
    println!("{}", shown.join(" "));

    let mut out = Outcome::default();
    out.metric("value", y.clone());
    out.metric("max_abs_error", err);
    add_stats(&mut out, "forward", &stats);
    Ok(out)
}

fn gradcheck(ctx: &mut Ctx<'_>) -> CliResult<Outcome> {
    let instances: usize = ctx.cfg.get("train.instances", 20)?;
    let reports = check_primitives(instances, ctx.seed);
    let mut w = ctx.dir.csv("gradcheck.csv")?;
    w.write_record(["primitive", "instances", "max_rel_err"])?;
    let mut worst: f64 = 0.0;
    println!("{:<14} {:>10} {:>14}", "primitive", "instances", "max rel err");
    for r in &reports {
        w.write_record([r.name.to_string(), r.instances.to_string(), r.max_rel_err.to_string()])?;
        println!("{:<14} {:>10} {:>14.3e}", r.name, r.instances, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    w.flush()?;
    let mut out = Outcome::default();
    out.metric("max_rel_err", worst);
    out.metric("primitives", reports.len());
    if !(worst < 1e-5) {
        return Err(CliError::Check(format!(
            "worst primitive relative error {worst:.3e} ≥ 1e-5"
        )));
    }
    Ok(out)
}

fn demo_burgers(ctx: &mut Ctx<'_>) -> CliResult<Outcome> {
    let profile: String = ctx.cfg.get("task.profile", "decreasing".to_string())?;
    let n: usize = ctx.cfg.get("task.n_train", 11)?;
    let horizon: f64 = ctx.cfg.get("task.horizon", 1.5)?;
    let samples: usize = ctx.cfg.get("task.samples", 16)?;
    let solver = ctx.solver(SolverConfig::dopri5(1e-10, 1e-12))?;
    let f = move |x: f64| match profile.as_str() {
        "zero" => 0.0,
        "identity" => x,
        "decreasing" => 1.0 - x,
        _ => (-((x - 0.5) * 4.0).powi(2)).exp(),
    };
    let x0: Vec<f64> = (0..n)
        .map(|i| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 })
        .collect();
    let demo = BurgersDemo {
        f,
        x0,
        horizon,
        samples,
    };
    let chars = burgers_characteristics(&demo, &solver)?;
    let mut w = ctx.dir.csv("characteristics.csv")?;
    w.write_record(["x0", "u", "t", "x"])?;
    for c in &chars {
        for (t, x) in &c.points {
            w.write_record([c.x0.to_string(), c.u.to_string(), t.to_string(), x.to_string()])?;
        }
    }
    w.flush()?;
    let mut out = Outcome::default();
    out.metric("characteristics", chars.len());
    match first_crossing(&chars) {
        Some(c) => {
            out.metric("crossing_s", c.s);
            out.metric("crossing_x0", vec![chars[c.i].x0, chars[c.j].x0]);
        }
        None => out.metric("crossing_s", serde_json::Value::Null),
    }
    Ok(out)
}

fn demo_intersect(ctx: &mut Ctx<'_>) -> CliResult<Outcome> {
    let solver = ctx.solver(SolverConfig::euler(0.1))?;
    let (model, params) = intersecting();
    let mut w = ctx.dir.csv("trajectories.csv")?;
    w.write_record(["u0", "s", "u"])?;
    let mut out = Outcome::default();
    let mut stats = SolveStats::default();
    for u0 in [0.0, 1.0] {
        let mut rows = Vec::new();
        let evo = model.evolve_observed(&params, &[u0], &solver, |s, y| {
            let (_, u) = model.split_state(s, y);
            rows.push([u0.to_string(), s.to_string(), u[0].to_string()]);
        })?;
        for r in rows {
            w.write_record(&r)?;
        }
        stats.merge(&evo.stats);
        out.metric(&format!("terminal_u_from_{u0}"), evo.u[0]);
    }
    w.flush()?;
    add_stats(&mut out, "forward", &stats);
    out.checkpoint = Some(Checkpoint {
        spec_hash: model.spec_hash(),
        params,
    });
    Ok(out)
}

fn write_points(ctx: &Ctx<'_>, task: &PdeRegressionTask) -> CliResult<()> {
    PdeRegressionTask::write_csv(&task.train, &ctx.dir.file("train.csv"))?;
    PdeRegressionTask::write_csv(&task.test, &ctx.dir.file("test.csv"))?;
    Ok(())
}

fn pde(ctx: &mut Ctx<'_>) -> CliResult<Outcome> {
    let kind: String = ctx.cfg.get("model.kind", "cnode".to_string())?;
    let n_train: usize = ctx.cfg.get("task.n_train", 200)?;
    let n_test: usize = ctx.cfg.get("task.n_test", 200)?;
    let defaults = PdeFitConfig::default();
    let cfg = PdeFitConfig {
        epochs: ctx.cfg.get("train.epochs", defaults.epochs)?,
        batch_size: ctx.cfg.get("train.batch_size", defaults.batch_size)?,
        adam: ctx.adam(defaults.adam.lr)?,
        seed: ctx.seed,
        ..defaults
    };
    let task = gen_pde_dataset(n_train, n_test, ctx.seed);
    write_points(ctx, &task)?;
    let (fit, hash, count) = if kind == "cnode" {
        let model = PdeModel::default();
        (pde_fit(&task, &model, &cfg)?, spec_hash(&model)?, model.param_count())
    } else {
        let model = NodePdeModel::default();
        (
            node_pde_baseline(&task, &model, &cfg)?,
            spec_hash(&model)?,
            model.param_count(),
        )
    };
    let mut w = ctx.dir.csv("metrics.csv")?;
    w.write_record(["epoch", "loss"])?;
    for (e, l) in fit.history.iter().enumerate() {
        w.write_record([e.to_string(), l.to_string()])?;
    }
    w.flush()?;
    let mut out = Outcome::default();
    out.metric("model", kind);
    out.metric("param_count", count);
    out.metric("test_deviation_pct", fit.test_deviation);
    out.metric("flagged_samples", fit.flagged);
    out.metric("max_fixed_point_iterations", fit.max_fp_iterations);
    out.checkpoint = Some(Checkpoint {
        spec_hash: hash,
        params: fit.params,
    });
    Ok(out)
}

fn timeseries(ctx: &mut Ctx<'_>) -> CliResult<Outcome> {
    let kind: SeriesModelKind = ctx.cfg.get("model.kind", "cnode".to_string())?.parse()?;
    let n_train: usize = ctx.cfg.get("task.n_train", 200)?;
    let n_test: usize = ctx.cfg.get("task.n_test", 200)?;
    let windows: usize = ctx.cfg.get("task.windows", 6)?;
    let sigma: f64 = ctx.cfg.get("task.sigma", 0.1)?;
    let defaults = TimeSeriesConfig::default();
    let cfg = TimeSeriesConfig {
        epochs: ctx.cfg.get("train.epochs", defaults.epochs)?,
        adam: ctx.adam(defaults.adam.lr)?,
        k: ctx.cfg.get("model.k", defaults.k)?,
        cnode_hidden: ctx.cfg.get("model.hidden", defaults.cnode_hidden)?,
        node_hidden: ctx.cfg.get("model.hidden", defaults.node_hidden)?,
        solver: ctx.solver(defaults.solver)?,
        seed: ctx.seed,
        ..defaults
    };
    let task = gen_timeseries(n_train, n_test, windows, sigma, ctx.seed);
    let mut w = ctx.dir.csv("train.csv")?;
    for p in &task.train {
        w.serialize(p)?;
    }
    w.flush()?;
    let report = timeseries_eval(kind, &task, &cfg)?;
    let mut w = ctx.dir.csv("metrics.csv")?;
    w.write_record(["epoch", "mse"])?;
    for (e, l) in report.history.iter().enumerate() {
        w.write_record([e.to_string(), l.to_string()])?;
    }
    w.flush()?;
    let mut w = ctx.dir.csv("windows.csv")?;
    w.write_record(["start", "end", "deviation_pct"])?;
    for (a, b, d) in &report.windows {
        w.write_record([a.to_string(), b.to_string(), d.to_string()])?;
    }
    w.flush()?;
    let mut out = Outcome::default();
    out.metric("model", kind.to_string());
    out.metric("param_count", report.param_count);
    out.metric("final_train_mse", report.history.last().copied().unwrap_or(f64::NAN));
    out.metric(
        "window_deviation_pct",
        report.windows.iter().map(|w| w.2).collect::<Vec<_>>(),
    );
    add_stats(&mut out, "total", &report.stats);
    out.checkpoint = Some(Checkpoint {
        spec_hash: spec_hash(&(kind, &cfg))?,
        params: ParamVector::from_parts(vec![("theta", report.params)])?,
    });
    Ok(out)
}

fn toy(ctx: &mut Ctx<'_>) -> CliResult<Outcome> {
    let kind: String = ctx.cfg.get("task.kind", "annuli".to_string())?;
    let family: String = ctx.cfg.get("model.kind", "cnode".to_string())?;
    let k: usize = ctx.cfg.get("model.k", 2)?;
    let hidden: usize = ctx.cfg.get("model.hidden", 16)?;
    let balance: BalanceMode = ctx.cfg.get("model.balance", "u_only".to_string())?.parse()?;
    let n_train: usize = ctx.cfg.get("task.n_train", 256)?;
    let n_test: usize = ctx.cfg.get("task.n_test", 256)?;
    let (train_data, test_data, loss): (Vec<Sample>, Vec<Sample>, Loss) = match kind.as_str() {
        "annuli" => (
            gen_toy2d(ToyKind::AnnuliClassification, n_train, ctx.seed).samples(),
            gen_toy2d(ToyKind::AnnuliClassification, n_test, ctx.seed + 1).samples(),
            Loss::CrossEntropy,
        ),
        "reflection" => (
            gen_toy2d(ToyKind::ReflectionMap, n_train, ctx.seed).samples(),
            gen_toy2d(ToyKind::ReflectionMap, n_test, ctx.seed + 1).samples(),
            Loss::Mse,
        ),
        _ => (two_point_task(), two_point_task(), Loss::Mse),
    };
    let n = train_data[0].z.len();
    let model = match (kind.as_str(), family.as_str()) {
        ("annuli", "cnode") => CnodeModel::new(
            None,
            CharacteristicField::new(k, n, &[hidden], &[hidden], balance),
            Some(MlpSpec::linear(n, 2)),
        )?,
        ("annuli", _) => CnodeModel::new(
            None,
            CharacteristicField::node(n, MlpSpec::tanh(vec![n, hidden, hidden, n])),
            Some(MlpSpec::linear(n, 2)),
        )?,
        (_, "cnode") => scalar_cnode(k, hidden),
        _ => scalar_node(hidden),
    };
    let grad_mode: GradMode = ctx.cfg.get("train.grad_mode", "adjoint".to_string())?.parse()?;
    let batch_default = if kind == "two_point" { 2 } else { 16 };
    let tcfg = TrainConfig {
        epochs: ctx.cfg.get("train.epochs", 150)?,
        batch_size: ctx.cfg.get("train.batch_size", batch_default)?,
        adam: ctx.adam(1e-2)?,
        solver: ctx.solver(SolverConfig::rk4(0.1))?,
        loss,
        grad_mode,
        seed: ctx.seed,
        parallel: ctx.parallel,
    };
    let (params, history) = train(&model, model.init_params(ctx.seed), &train_data, &tcfg)?;
    let mut w = ctx.dir.csv("metrics.csv")?;
    for r in &history {
        w.serialize(r)?;
    }
    w.flush()?;
    let (train_loss, train_metric) = evaluate(&model, &params, &train_data, &tcfg.solver, loss)?;
    let (test_loss, test_metric) = evaluate(&model, &params, &test_data, &tcfg.solver, loss)?;
    let mut out = Outcome::default();
    out.metric("task", kind);
    out.metric("model", family);
    out.metric("param_count", model.param_count());
    out.metric("train_loss", train_loss);
    out.metric("train_metric", train_metric);
    out.metric("test_loss", test_loss);
    out.metric("test_metric", test_metric);
    out.stat(
        "forward_nfe_per_sample_last_epoch",
        history.last().map_or(0, |r| r.nfe_forward.round() as usize),
    );
    out.stat(
        "backward_nfe_per_sample_last_epoch",
        history.last().map_or(0, |r| r.nfe_backward.round() as usize),
    );
    out.checkpoint = Some(Checkpoint {
        spec_hash: model.spec_hash(),
        params,
    });
    Ok(out)
}

/// Negative log-likelihood of the best single Gaussian for the mixture:
/// `ln 2π + ½ ln(1 + m²) + 1`.
pub fn single_gaussian_nll(mean: f64) -> f64 {
    (2.0 * std::f64::consts::PI).ln() + 0.5 * (1.0 + mean * mean).ln() + 1.0
}

fn cnf2d(ctx: &mut Ctx<'_>) -> CliResult<Outcome> {
    let n_train: usize = ctx.cfg.get("task.n_train", 1024)?;
    let n_test: usize = ctx.cfg.get("task.n_test", 1000)?;
    let k: usize = ctx.cfg.get("model.k", 4)?;
    let hidden: usize = ctx.cfg.get("model.hidden", 32)?;
    let trace: String = ctx.cfg.get("train.trace", "exact".to_string())?;
    let probes: usize = ctx.cfg.get("train.probes", 1)?;
    let estimator = if trace == "exact" {
        TraceEstimator::exact()
    } else {
        TraceEstimator::hutchinson(probes, ProbeDist::Rademacher, ctx.seed)
    };
    let inputs = cnode_core::cnode::DirectionInputs {
        x: false,
        u: true,
        cond: false,
    };
    let field = CharacteristicField::new(k, 2, &[hidden], &[hidden], BalanceMode::UOnly)
        .with_direction(MlpSpec::tanh(vec![2, hidden, k]), inputs);
    let cnf = Cnf::new(field)?;
    let tcfg = CnfTrainConfig {
        epochs: ctx.cfg.get("train.epochs", 40)?,
        batch_size: ctx.cfg.get("train.batch_size", 64)?,
        adam: ctx.adam(1e-2)?,
        solver: ctx.solver(SolverConfig::dopri5(1e-5, 1e-7))?,
        estimator,
        seed: ctx.seed,
        parallel: ctx.parallel,
    };
    let train_pts = gen_toy2d(ToyKind::GaussianMixtureDensity, n_train, ctx.seed).inputs;
    let test_pts = gen_toy2d(ToyKind::GaussianMixtureDensity, n_test, ctx.seed + 1).inputs;
    let (params, history) = train_cnf(&cnf, cnf.init_params(ctx.seed), &train_pts, &tcfg)?;
    let mut w = ctx.dir.csv("metrics.csv")?;
    for r in &history {
        w.serialize(r)?;
    }
    w.flush()?;
    let test_nll = mean_nll(&cnf, &params, &test_pts, &tcfg.solver, &TraceEstimator::exact())?;
    let draws = sample(&cnf, &params, 500, &tcfg.solver, ctx.seed + 2)?;
    let mut w = ctx.dir.csv("samples.csv")?;
    w.write_record(["v1", "v2"])?;
    for r in draws.data().chunks(2) {
        w.write_record([r[0].to_string(), r[1].to_string()])?;
    }
    w.flush()?;
    let reference = single_gaussian_nll(cnode_core::tasks::MIXTURE_MEAN);
    let mut out = Outcome::default();
    out.metric("param_count", cnf.field.param_count());
    out.metric("test_nll_nats", test_nll);
    out.metric("test_bits_per_dim", test_nll / (2.0 * std::f64::consts::LN_2));
    out.metric("single_gaussian_nll_nats", reference);
    out.metric("beats_single_gaussian", test_nll < reference);
    out.stat(
        "forward_nfe_per_sample_last_epoch",
        history.last().map_or(0, |r| r.nfe_forward.round() as usize),
    );
    out.stat(
        "adjoint_nfe_per_sample_last_epoch",
        history.last().map_or(0, |r| r.nfe_adjoint.round() as usize),
    );
    out.checkpoint = Some(Checkpoint {
        spec_hash: spec_hash(&cnf)?,
        params,
    });
    Ok(out)
}
