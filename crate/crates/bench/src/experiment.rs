//! Experiment drivers: tuning runs with baselines, the open-loop
//! identification study and the scenario certificate.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use mpc_tune::closed_loop::{mean_cost, plant_step, rollout, ClosedLoop, NoiseLaw, Rollout, UpperLevelCost};
use mpc_tune::mpc::{DesignParameter, MpcConfig};
use mpc_tune::scenario::{certify_bound, epsilon_sweep, write_sweep_csv, ScenarioConfig, ScenarioResult, SweepPoint};
use mpc_tune::sysid::{rls_absorb, ConfidenceEllipsoid, NoiseSpec, RlsState};
use mpc_tune::tuner::{mean, tune, HistoryRecord, TuneError, TuneOptions, TuneState};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{dare_parameter, omniscient_bound};
use crate::config::{episode_seed, ExperimentConfig, Mode, PlantConfig};
use crate::plants::{curvature_disturbance, gen_lateral_plant, gen_random_linear, read_curvature_csv};
use crate::BenchError;

/// One benchmark system with its nominal model.
#[derive(Debug, Clone)]
pub struct Instance {
    pub index: usize,
    pub cl: ClosedLoop,
    pub theta_nominal: DVector<f64>,
    /// Curvature profile of the lateral plant.
    pub kappa: Option<Vec<f64>>,
}

impl Instance {
    /// Same loop with the plant coefficients replaced by `theta`.
    pub fn with_true_theta(&self, cfg: &ExperimentConfig, theta: &DVector<f64>) -> ClosedLoop {
        let mut cl = self.cl.clone();
        let plant = &mut cl.plant;
        plant.theta_true = theta.clone();
        match (&cfg.plant, &self.kappa) {
            (PlantConfig::Lateral { spec, .. }, Some(kappa)) => {
                let mut e = curvature_disturbance(theta, kappa, spec.vx, spec.dt);
                e.truncate(plant.horizon);
                plant.exogenous = e;
            }
            _ => {
                let z = DVector::zeros(plant.n_x());
                plant.noise_input = plant.model.jac_u(&z, &DVector::zeros(plant.n_u()), theta);
            }
        }
        cl
    }
}

pub fn build_instances(cfg: &ExperimentConfig) -> Result<Vec<Instance>, BenchError> {
    let cost_for = |n_x: usize, n_u: usize| {
        UpperLevelCost::quadratic(
            DMatrix::identity(n_x, n_x) * cfg.cost.q_scale,
            DMatrix::identity(n_u, n_u) * cfg.cost.r_scale,
            cfg.cost.c3,
        )
    };
    let assemble = |index, g: crate::plants::GeneratedPlant, kappa| {
        let plant = g.plant;
        let mpc = MpcConfig::new(
            cfg.mpc.horizon,
            plant.x_constraint.clone(),
            plant.u_constraint.clone(),
            cfg.mpc.c1,
            cfg.mpc.c2,
        );
        let cost = cost_for(plant.n_x(), plant.n_u());
        Instance { index, cl: ClosedLoop { plant, mpc, cost }, theta_nominal: g.theta_nominal, kappa }
    };
    match &cfg.plant {
        PlantConfig::RandomLinear { n_systems, spec } => Ok((0..*n_systems)
            .map(|s| assemble(s, gen_random_linear(cfg.seeds.system + s as u64, spec), None))
            .collect()),
        PlantConfig::Lateral { curvature_csv, spec } => {
            let kappa = read_curvature_csv(&cfg.resolve(curvature_csv))?;
            if kappa.len() < spec.horizon {
                return Err(BenchError::Config(format!(
                    "curvature profile has {} samples, horizon is {}",
                    kappa.len(),
                    spec.horizon
                )));
            }
            let g = gen_lateral_plant(spec, &kappa);
            Ok(vec![assemble(0, g, Some(kappa))])
        }
    }
}

fn tune_err(e: TuneError) -> BenchError {
    match e {
        TuneError::InvalidSchedule(m) | TuneError::ConfigMismatch(m) => BenchError::Config(m),
        other => BenchError::Numerical(other.to_string()),
    }
}

fn num<E: std::fmt::Display>(e: E) -> BenchError {
    BenchError::Numerical(e.to_string())
}

/// Initial MPC weights; joint mode carries the nominal model as `vartheta`.
pub fn initial_param(cfg: &ExperimentConfig, inst: &Instance, joint: bool) -> Result<DesignParameter, BenchError> {
    let (n_x, n_u) = (inst.cl.plant.n_x(), inst.cl.plant.n_u());
    let w = &cfg.tuning.initial;
    let eye = |n: usize, s: f64| DMatrix::identity(n, n) * s;
    let param = DesignParameter::from_costs(&eye(n_x, w.q), &eye(n_u, w.r), &eye(n_x, w.p), joint.then(|| inst.theta_nominal.clone()))
        .map_err(|e| BenchError::Config(e.to_string()))?;
    Ok(param.with_box(cfg.tuning.factor_bound, Some(&inst.theta_nominal), f64::INFINITY))
}

pub fn eval_seeds(cfg: &ExperimentConfig, system: usize) -> Vec<u64> {
    (0..cfg.evaluation.episodes).map(|i| episode_seed(cfg.seeds.eval, system, i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub variance: f64,
    pub per_episode: Vec<f64>,
}

impl Stats {
    pub fn new(per_episode: Vec<f64>) -> Self {
        let m = mean(&per_episode);
        let n = per_episode.len();
        let variance = if n > 1 {
            per_episode.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self { mean: m, variance, per_episode }
    }
}

fn suboptimality(cost: f64, best: f64) -> f64 {
    (cost - best) / best
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeRun {
    pub mode: Mode,
    pub iterations: usize,
    pub trained: Stats,
    pub suboptimality: f64,
    pub theta_hat: Vec<f64>,
    pub theta_err: f64,
    pub final_param: Vec<f64>,
    pub clipped_last_50: usize,
    pub skipped: usize,
    #[serde(skip)]
    pub history: Vec<HistoryRecord>,
    #[serde(skip)]
    pub param: DesignParameter,
}

#[derive(Debug, Clone, Serialize)]
pub struct SystemReport {
    pub index: usize,
    pub theta_true: Vec<f64>,
    pub theta_nominal: Vec<f64>,
    pub untrained: Stats,
    pub untrained_suboptimality: f64,
    pub omniscient: Stats,
    /// Riccati terminal cost for the identified model; absent when that model
    /// is not stabilizable.
    pub dare: Option<Stats>,
    pub dare_suboptimality: Option<f64>,
    pub runs: Vec<ModeRun>,
}

impl SystemReport {
    pub fn run(&self, mode: Mode) -> Option<&ModeRun> {
        self.runs.iter().find(|r| r.mode == mode)
    }

    /// `omniscient <= trained <= untrained` on evaluation means.
    pub fn ordered(&self, mode: Mode) -> Option<bool> {
        self.run(mode).map(|r| self.omniscient.mean <= r.trained.mean && r.trained.mean <= self.untrained.mean)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub trained_mean: f64,
    pub ratio_to_untrained: f64,
    pub ordered_systems: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub untrained_mean: f64,
    pub omniscient_mean: f64,
    pub dare_mean: Option<f64>,
    pub modes: Vec<ModeSummary>,
    /// Systems where certainty equivalence ends below joint tuning.
    pub ce_below_alg1: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub name: String,
    pub systems: Vec<SystemReport>,
    pub summary: Summary,
    #[serde(skip)]
    pub rollouts: Vec<(usize, Rollout)>,
}

fn tune_mode(
    cfg: &ExperimentConfig,
    inst: &Instance,
    mode: Mode,
    iterations: usize,
    eval: &[u64],
    best: f64,
) -> Result<ModeRun, BenchError> {
    let tm = mode.tune_mode().ok_or_else(|| BenchError::Config("scenario is not a tuning mode".into()))?;
    let cl = &inst.cl;
    let noise = cl.plant.noise;
    let param = initial_param(cfg, inst, mode == Mode::Alg1)?;
    let rls = RlsState::new(inst.theta_nominal.clone(), cfg.tuning.lambda).map_err(|e| BenchError::Config(e.to_string()))?;
    let state = TuneState::new(param, rls, &noise, cfg.tuning.delta).map_err(tune_err)?;
    let options = TuneOptions {
        mode: tm,
        identify: cfg.tuning.identify,
        noise,
        delta: cfg.tuning.delta,
        pe: None,
        eval_seeds: eval.to_vec(),
        eval_every: cfg.evaluation.every,
        theta_true: Some(cl.plant.theta_true.clone()),
    };
    let system = inst.index;
    let train = cfg.seeds.train;
    let state = tune(state, cl, cfg.schedule_for(mode), &options, iterations, |k| episode_seed(train, system, k))
        .map_err(tune_err)?;
    let trained = Stats::new(mean_cost(cl, &state.param, state.theta_model(), eval).map_err(num)?);
    let theta = &cl.plant.theta_true;
    let tail = state.history.len().saturating_sub(50);
    Ok(ModeRun {
        mode,
        iterations,
        suboptimality: suboptimality(trained.mean, best),
        trained,
        theta_hat: state.rls.theta_hat.iter().copied().collect(),
        theta_err: (&state.rls.theta_hat - theta).norm() / theta.norm(),
        final_param: state.param.to_vec().iter().copied().collect(),
        clipped_last_50: state.history[tail..].iter().filter(|h| h.clipped).count(),
        skipped: state.history.iter().filter(|h| h.skipped).count(),
        history: state.history,
        param: state.param,
    })
}

fn run_system(cfg: &ExperimentConfig, inst: &Instance, modes: &[Mode], iterations: usize) -> Result<SystemReport, BenchError> {
    let cl = &inst.cl;
    let eval = eval_seeds(cfg, inst.index);
    let omni: Vec<f64> = eval
        .iter()
        .map(|&s| omniscient_bound(cl, &cl.plant.sample_trace(s)).map(|o| o.cost))
        .collect::<Result<_, _>>()?;
    let omniscient = Stats::new(omni);
    let best = omniscient.mean;
    if !(best > 0.0) {
        return Err(BenchError::Numerical(format!("omniscient bound {best} is not positive")));
    }
    let p0 = initial_param(cfg, inst, false)?;
    let untrained = Stats::new(mean_cost(cl, &p0, &inst.theta_nominal, &eval).map_err(num)?);
    let runs = modes
        .iter()
        .map(|&m| tune_mode(cfg, inst, m, iterations, &eval, best))
        .collect::<Result<Vec<_>, _>>()?;
    let identified = runs
        .iter()
        .rev()
        .find(|_| cfg.tuning.identify)
        .map_or(inst.theta_nominal.clone(), |r| DVector::from_vec(r.theta_hat.clone()));
    let dare = match dare_parameter(cl, &identified) {
        Ok(p) => Some(Stats::new(mean_cost(cl, &p, &identified, &eval).map_err(num)?)),
        Err(e) => {
            log::warn!("system {}: no Riccati baseline ({e})", inst.index);
            None
        }
    };
    Ok(SystemReport {
        index: inst.index,
        theta_true: cl.plant.theta_true.iter().copied().collect(),
        theta_nominal: inst.theta_nominal.iter().copied().collect(),
        untrained_suboptimality: suboptimality(untrained.mean, best),
        untrained,
        dare_suboptimality: dare.as_ref().map(|d| suboptimality(d.mean, best)),
        dare,
        omniscient,
        runs,
    })
}

/// Tunes every system in every mode of `modes` and evaluates the baselines.
/// An empty `modes` evaluates the baselines only.
pub fn run_experiment(cfg: &ExperimentConfig, modes: &[Mode], iterations: usize) -> Result<BenchReport, BenchError> {
    let instances = build_instances(cfg)?;
    let systems = instances
        .par_iter()
        .map(|inst| run_system(cfg, inst, modes, iterations))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rollouts = Vec::new();
    if let Some(inst) = instances.first() {
        let seed = episode_seed(cfg.seeds.eval, 0, 0);
        let p0 = initial_param(cfg, inst, false)?;
        rollouts.push((0, rollout(&inst.cl, &p0, &inst.theta_nominal, seed, false).map_err(num)?));
        if let Some(run) = systems[0].runs.first() {
            let theta_model = DVector::from_vec(run.theta_hat.clone());
            rollouts.push((iterations, rollout(&inst.cl, &run.param, &theta_model, seed, false).map_err(num)?));
        }
    }

    let avg = |f: &dyn Fn(&SystemReport) -> f64| mean(&systems.iter().map(f).collect::<Vec<_>>());
    let untrained_mean = avg(&|s| s.untrained.mean);
    let modes_summary = modes
        .iter()
        .map(|&m| {
            let trained_mean = avg(&|s| s.run(m).map_or(f64::NAN, |r| r.trained.mean));
            ModeSummary {
                mode: m,
                trained_mean,
                ratio_to_untrained: trained_mean / untrained_mean,
                ordered_systems: systems.iter().filter(|s| s.ordered(m) == Some(true)).count(),
            }
        })
        .collect();
    let ce_below_alg1 = (modes.contains(&Mode::Alg1) && modes.contains(&Mode::Ce)).then(|| {
        systems
            .iter()
            .filter(|s| s.run(Mode::Ce).unwrap().trained.mean < s.run(Mode::Alg1).unwrap().trained.mean)
            .count()
    });
    let dare_mean = systems.iter().all(|s| s.dare.is_some()).then(|| avg(&|s| s.dare.as_ref().unwrap().mean));
    let summary = Summary {
        untrained_mean,
        omniscient_mean: avg(&|s| s.omniscient.mean),
        dare_mean,
        modes: modes_summary,
        ce_below_alg1,
    };
    Ok(BenchReport { name: cfg.name.clone(), systems, summary, rollouts })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn write_history<W: Write>(report: &BenchReport, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["system", "mode", "k", "cost_train", "cost_eval", "grad_norm", "alpha", "radius_ck", "theta_err", "clipped"])?;
    for s in &report.systems {
        for run in &s.runs {
            for h in &run.history {
                w.write_record([
                    s.index.to_string(),
                    run.mode.name().to_string(),
                    h.k.to_string(),
                    h.cost_train.to_string(),
                    opt(h.cost_eval),
                    h.grad_norm.to_string(),
                    h.alpha.to_string(),
                    h.radius_ck.to_string(),
                    opt(h.theta_err),
                    h.clipped.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, BenchError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn csv_err(e: csv::Error) -> BenchError {
    BenchError::Io(std::io::Error::other(e.to_string()))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), BenchError> {
    let mut f = create(dir, name)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| BenchError::Io(e.into()))?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// `history.csv`, `report.json` and one `rollout_<k>.csv` per stored rollout.
pub fn write_report(report: &BenchReport, dir: &Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir)?;
    write_history(report, create(dir, "history.csv")?).map_err(csv_err)?;
    write_json(dir, "report.json", report)?;
    for (k, r) in &report.rollouts {
        r.write_csv(create(dir, &format!("rollout_{k}.csv"))?).map_err(csv_err)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SysIdRun {
    pub system: usize,
    /// Relative error after each iteration, starting with the prior.
    pub rel_err: Vec<f64>,
    pub radius: Vec<f64>,
    /// `theta` inside every confidence set of the run.
    pub covered: bool,
    pub first_below: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SysIdReport {
    pub threshold: f64,
    pub delta: f64,
    pub coverage: f64,
    pub runs: Vec<SysIdRun>,
    /// Relative error after the last iteration, averaged over runs.
    pub mean_final_err: f64,
    /// Iterations until the run-averaged error drops below the threshold.
    pub mean_first_below: Option<usize>,
}

pub const SYSID_THRESHOLD: f64 = 1e-2;

/// Open-loop identification: inputs uniform in the input set, independent
/// uniform noise on every state, one batch of `samples` steps per iteration.
pub fn run_sysid(cfg: &ExperimentConfig) -> Result<SysIdReport, BenchError> {
    let sc = cfg.sysid.as_ref().ok_or_else(|| BenchError::Config("missing sysid section".into()))?;
    let PlantConfig::RandomLinear { spec, .. } = &cfg.plant else {
        return Err(BenchError::Config("sysid needs a random_linear plant".into()));
    };
    let runs = (0..sc.runs)
        .into_par_iter()
        .map(|r| {
            let g = gen_random_linear(cfg.seeds.system + r as u64, spec);
            let mut plant = g.plant;
            let n = plant.n_x();
            let theta = plant.theta_true.clone();
            plant.noise_input = DMatrix::identity(n, n);
            plant.noise_law = NoiseLaw::Uniform;
            plant.noise = NoiseSpec::new(sc.noise_bound, spec.model_error * theta.norm() * (1.0 + 1e-9), sc.noise_bound)
                .map_err(|e| BenchError::Config(e.to_string()))?;
            let model = plant.model.clone();
            let mut rls = RlsState::new(g.theta_nominal.clone(), sc.lambda).map_err(|e| BenchError::Config(e.to_string()))?;
            let check = |rls: &RlsState| -> Result<(f64, f64, bool), BenchError> {
                let ell = ConfidenceEllipsoid::from_state(rls, &plant.noise, sc.delta, None).map_err(num)?;
                let inside = ell.membership(&theta).map_err(num)?;
                Ok(((&rls.theta_hat - &theta).norm() / theta.norm(), ell.radius, inside))
            };
            let (e0, c0, in0) = check(&rls)?;
            let (mut rel_err, mut radius, mut covered) = (vec![e0], vec![c0], in0);
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seeds.train, r, 0));
            let ub = spec.input_bound;
            for _ in 0..sc.iterations {
                let mut x = plant.x0_law.sample(&mut rng);
                let (mut feats, mut targets) = (Vec::with_capacity(sc.samples), Vec::with_capacity(sc.samples));
                for _ in 0..sc.samples {
                    let u = DVector::from_fn(plant.n_u(), |_, _| rng.random_range(-ub..=ub));
                    let w = plant.sample_noise(&mut rng);
                    let next = plant_step(&plant, &x, &u, &(&plant.noise_input * w));
                    feats.push(model.features(&x, &u));
                    targets.push(&next - model.offset(&x, &u));
                    x = next;
                }
                rls = rls_absorb(&rls, &feats, &targets).map_err(num)?;
                let (e, c, inside) = check(&rls)?;
                rel_err.push(e);
                radius.push(c);
                covered &= inside;
            }
            let first_below = rel_err.iter().position(|&e| e < SYSID_THRESHOLD);
            Ok(SysIdRun { system: r, rel_err, radius, covered, first_below })
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    let n = runs.len() as f64;
    let avg_err: Vec<f64> = (0..=sc.iterations).map(|k| runs.iter().map(|r| r.rel_err[k]).sum::<f64>() / n).collect();
    Ok(SysIdReport {
        threshold: SYSID_THRESHOLD,
        delta: sc.delta,
        coverage: runs.iter().filter(|r| r.covered).count() as f64 / n,
        mean_final_err: avg_err[sc.iterations],
        mean_first_below: avg_err.iter().position(|&e| e < SYSID_THRESHOLD),
        runs,
    })
}

pub fn write_sysid(report: &SysIdReport, dir: &Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_writer(create(dir, "sysid.csv")?);
    w.write_record(["run", "k", "rel_err", "radius_ck", "covered"]).map_err(csv_err)?;
    for r in &report.runs {
        for (k, (e, c)) in r.rel_err.iter().zip(&r.radius).enumerate() {
            w.write_record([r.system.to_string(), k.to_string(), e.to_string(), c.to_string(), r.covered.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    write_json(dir, "report.json", report)
}

#[derive(Debug, Clone, Serialize)]
pub struct CertifyReport {
    pub trained_with: Mode,
    pub iterations: usize,
    pub trained_mean: f64,
    /// Model the trained MPC predicts with; centre of the sampling ball.
    pub prediction_model: Vec<f64>,
    pub sampling_radius: f64,
    pub config: ScenarioConfig,
    pub result: ScenarioResult,
    pub sweep: Vec<SweepPoint>,
}

/// Tunes system 0, then bounds the closed-loop gradient norm with respect to
/// the cost factors over plants sampled around the prediction model.
pub fn run_certify(cfg: &ExperimentConfig, iterations: usize) -> Result<CertifyReport, BenchError> {
    let sc = cfg.scenario.as_ref().ok_or_else(|| BenchError::Config("missing scenario section".into()))?;
    let mode = cfg.tuning.modes.iter().copied().find(|m| m.tune_mode().is_some()).unwrap_or(Mode::Ce);
    let instances = build_instances(cfg)?;
    let inst = &instances[0];
    let eval = eval_seeds(cfg, 0);
    let run = tune_mode(cfg, inst, mode, iterations, &eval, 1.0)?;

    let prediction = run.param.vartheta.clone().unwrap_or_else(|| DVector::from_vec(run.theta_hat.clone()));
    let nf = run.param.n_factor_params();
    let n = nf + prediction.len();
    let param = DesignParameter {
        vartheta: Some(prediction.clone()),
        lower: DVector::from_element(n, f64::NEG_INFINITY),
        upper: DVector::from_element(n, f64::INFINITY),
        ..run.param.clone()
    };
    let radius = (sc.radius_scale * (&inst.cl.plant.theta_true - &prediction).norm()).max(1e-12);
    let set = ConfidenceEllipsoid::ball(prediction.clone(), radius);
    let config = ScenarioConfig {
        m: sc.m,
        epsilon: sc.epsilon,
        beta: sc.beta,
        n_p: nf,
        n_theta: prediction.len(),
        seed: cfg.seeds.scenario,
    };
    let seed = episode_seed(cfg.seeds.scenario, 0, 0);
    let result = certify_bound(&config, &set, |theta: &DVector<f64>| -> Result<f64, BenchError> {
        let cl = inst.with_true_theta(cfg, theta);
        let r = rollout(&cl, &param, theta, seed, true).map_err(num)?;
        Ok(r.grad_p.expect("gradient requested").rows(0, nf).norm())
    })
    .map_err(num)?;
    let sweep = epsilon_sweep(&result, &sc.epsilons, config.n_p, config.n_theta).map_err(num)?;
    Ok(CertifyReport {
        trained_with: mode,
        iterations,
        trained_mean: run.trained.mean,
        prediction_model: prediction.iter().copied().collect(),
        sampling_radius: radius,
        config,
        result,
        sweep,
    })
}

pub fn write_certify(report: &CertifyReport, dir: &Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir)?;
    write_sweep_csv(&report.sweep, create(dir, "scenario_sweep.csv")?).map_err(csv_err)?;
    write_json(dir, "scenario.json", report)
}
