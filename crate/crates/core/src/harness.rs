//! Experiment configuration, seeded episodes, benchmark campaigns and output.
//!
//! Configuration is TOML. Every key is optional; an empty file yields the
//! cart-pole benchmark defaults. Tables: `[model]`, `[cost]`, `[controller]`,
//! `[filter]`, `[run]`, `[diagnostics]`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Deserialize;

use crate::ambiguity::{credible_interval, update_ambiguity, AmbiguitySet, IntervalKind};
use crate::dynamics::{Control, ParamBox, State, SystemModel, Theta};
use crate::error::{Error, Result};
use crate::filter::{posterior_summary, FilterConfig, ParticleFilter};
use crate::mpc::{plan, ControllerKind, Optimizer, PlanContext, PlannerSettings, PolicySequence};
use crate::risk::{CandidateRule, CostSpec, ScenarioSet};
use crate::stream::RandomStream;

/// States beyond this magnitude abort the episode.
pub const BLOWUP: f64 = 1e6;

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub theta_true: Vec<f64>,
    pub prior_lo: Vec<f64>,
    pub prior_hi: Vec<f64>,
    pub sigma_w: f64,
    pub dt: f64,
    pub x0: Vec<f64>,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            theta_true: vec![0.1, 0.5],
            prior_lo: vec![0.05, 0.2],
            prior_hi: vec![0.5, 1.0],
            sigma_w: 0.01,
            dt: 0.05,
            x0: vec![0.0; 4],
            u_min: -10.0,
            u_max: 10.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub q_diag: Vec<f64>,
    pub r: f64,
    pub x_star: Vec<f64>,
    pub terminal_weight: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        let c = CostSpec::cartpole();
        Self {
            q_diag: c.q_diag.clone(),
            r: c.r,
            x_star: c.x_star.to_vec(),
            terminal_weight: c.terminal_weight,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    #[default]
    ProjectedGradient,
    CoordinateSearch,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntervalName {
    #[default]
    EqualTail,
    HighestDensity,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    /// `nominal`, `tube`, `stochastic` or `risk_averse`.
    pub kind: String,
    pub horizon: usize,
    /// Outer optimizer iterations per planning call.
    pub budget: usize,
    pub scenarios: usize,
    pub level: f64,
    /// Tube box; defaults to the prior box.
    pub tube_lo: Option<Vec<f64>>,
    pub tube_hi: Option<Vec<f64>>,
    pub stochastic_samples: usize,
    pub grid_points: usize,
    pub optimizer: OptimizerName,
    pub interval: IntervalName,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            kind: "risk_averse".into(),
            horizon: 5,
            budget: 12,
            scenarios: 16,
            level: 0.9,
            tube_lo: None,
            tube_hi: None,
            stochastic_samples: 32,
            grid_points: 3,
            optimizer: OptimizerName::ProjectedGradient,
            interval: IntervalName::EqualTail,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub particles: usize,
    pub jitter: Option<Vec<f64>>,
    pub ess_threshold: Option<f64>,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            particles: 1000,
            jitter: None,
            ess_threshold: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub steps: usize,
    pub n_runs: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            steps: 100,
            n_runs: 50,
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub blind_tol: f64,
    pub consistency_steps: usize,
    pub consistency_particles: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            blind_tol: 1e-8,
            consistency_steps: 500,
            consistency_particles: 300,
        }
    }
}

/// Full experiment configuration.
#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub cost: CostSection,
    pub controller: ControllerSection,
    pub filter: FilterSection,
    pub run: RunSection,
    pub diagnostics: DiagnosticsSection,
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::ConfigInvalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        let c = &self.controller;
        let m = &self.model;
        if r.steps == 0 {
            return Err(invalid("steps", "must be >= 1"));
        }
        if r.n_runs == 0 {
            return Err(invalid("n_runs", "must be >= 1"));
        }
        if c.horizon == 0 {
            return Err(invalid("horizon", "must be >= 1"));
        }
        if c.scenarios == 0 {
            return Err(invalid("scenarios", "must be >= 1"));
        }
        if !(c.level > 0.0 && c.level < 1.0) {
            return Err(invalid("level", "must lie in (0, 1)"));
        }
        if c.stochastic_samples == 0 {
            return Err(invalid("stochastic_samples", "must be >= 1"));
        }
        if self.filter.particles == 0 {
            return Err(invalid("particles", "must be >= 1"));
        }
        if let Some(t) = self.filter.ess_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(invalid("ess_threshold", "must lie in [0, 1]"));
            }
        }
        if !(m.dt > 0.0) || !m.dt.is_finite() {
            return Err(invalid("dt", "must be positive"));
        }
        if !(m.sigma_w >= 0.0) || !m.sigma_w.is_finite() {
            return Err(invalid("sigma_w", "must be finite and >= 0"));
        }
        if !(m.u_min <= m.u_max) {
            return Err(invalid("u_min", "must not exceed u_max"));
        }
        if m.x0.len() != 4 || m.x0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("x0", "needs four finite entries"));
        }
        if m.theta_true.len() != 2 || m.prior_lo.len() != 2 || m.prior_hi.len() != 2 {
            return Err(invalid("theta_true", "theta_true, prior_lo and prior_hi need two entries (m, l)"));
        }
        let prior = self.prior_box()?;
        if prior.lo.iter().any(|v| *v <= 0.0) {
            return Err(invalid("prior_lo", "mass and length must be positive"));
        }
        if !prior.contains(&m.theta_true) {
            return Err(invalid("theta_true", "must lie inside the prior box"));
        }
        if self.tube_box()?.dim() != 2 {
            return Err(invalid("tube_lo", "tube box needs two entries"));
        }
        if let Some(j) = &self.filter.jitter {
            if j.len() != 2 || j.iter().any(|s| !(*s >= 0.0)) {
                return Err(invalid("jitter", "needs two non-negative entries"));
            }
        }
        self.controller_kind(&c.kind)?;
        if self.cost.x_star.len() != 4 {
            return Err(invalid("x_star", "needs four entries"));
        }
        self.cost_spec()?;
        if !(self.diagnostics.blind_tol > 0.0) {
            return Err(invalid("blind_tol", "must be > 0"));
        }
        Ok(())
    }

    pub fn prior_box(&self) -> Result<ParamBox> {
        ParamBox::new(&self.model.prior_lo, &self.model.prior_hi).map_err(|e| invalid("prior_lo", e.to_string()))
    }

    pub fn tube_box(&self) -> Result<ParamBox> {
        let c = &self.controller;
        let lo = c.tube_lo.clone().unwrap_or_else(|| self.model.prior_lo.clone());
        let hi = c.tube_hi.clone().unwrap_or_else(|| self.model.prior_hi.clone());
        ParamBox::new(&lo, &hi).map_err(|e| invalid("tube_lo", e.to_string()))
    }

    pub fn theta_true(&self) -> Theta {
        Theta::new(&self.model.theta_true)
    }

    pub fn system_model(&self) -> Result<SystemModel> {
        let m = &self.model;
        let mut model = SystemModel::cartpole(m.sigma_w, m.dt, self.prior_box()?)?;
        model.control_bounds = ParamBox::new(&[m.u_min], &[m.u_max])?;
        Ok(model)
    }

    pub fn cost_spec(&self) -> Result<CostSpec> {
        let c = &self.cost;
        CostSpec::new(c.q_diag.clone(), c.r, State::new(&c.x_star), c.terminal_weight)
            .map_err(|e| invalid("cost", e.to_string()))
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            n_particles: self.filter.particles,
            jitter_std: self.filter.jitter.clone(),
            ess_threshold: self.filter.ess_threshold,
        }
    }

    pub fn candidate_rule(&self) -> CandidateRule {
        CandidateRule {
            grid_points: Some(self.controller.grid_points),
        }
    }

    pub fn planner_settings(&self) -> PlannerSettings {
        PlannerSettings {
            budget: self.controller.budget,
            optimizer: match self.controller.optimizer {
                OptimizerName::ProjectedGradient => Optimizer::ProjectedGradient,
                OptimizerName::CoordinateSearch => Optimizer::CoordinateSearch,
            },
        }
    }

    pub fn interval_kind(&self) -> IntervalKind {
        match self.controller.interval {
            IntervalName::EqualTail => IntervalKind::EqualTail,
            IntervalName::HighestDensity => IntervalKind::HighestDensity,
        }
    }

    /// Controller by name with the settings of this config.
    pub fn controller_kind(&self, name: &str) -> Result<ControllerKind> {
        let kind = match name {
            "nominal" => ControllerKind::Nominal,
            "tube" => ControllerKind::Tube { tube: self.tube_box()? },
            "stochastic" => ControllerKind::Stochastic {
                samples: self.controller.stochastic_samples,
            },
            "risk_averse" => ControllerKind::RiskAverse {
                level: self.controller.level,
            },
            other => return Err(invalid("kind", format!("unknown controller kind `{other}`"))),
        };
        kind.validate(2).map_err(|e| invalid("kind", e.to_string()))?;
        Ok(kind)
    }

    /// The four benchmark controllers in reporting order.
    pub fn all_kinds(&self) -> Result<Vec<ControllerKind>> {
        KIND_NAMES.iter().map(|n| self.controller_kind(n)).collect()
    }
}

pub const KIND_NAMES: [&str; 4] = ["nominal", "tube", "stochastic", "risk_averse"];

/// Reads and validates a TOML config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_toml(&text)
}

/// One time step of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub state: State,
    pub control: Control,
    pub stage_cost: f64,
    pub theta_hat: Theta,
    pub eps: f64,
    pub planned_value: f64,
    pub warm_value: f64,
    pub violation: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub kind: String,
    pub run: usize,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub total_cost: f64,
    pub tracking_error: f64,
    pub param_error: f64,
    pub violations: usize,
    pub wall_time_s: f64,
    /// Set when the state blew up; `steps` then stops early.
    pub aborted: Option<String>,
}

impl EpisodeRecord {
    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::TotalCost => self.total_cost,
            Metric::TrackingError => self.tracking_error,
            Metric::ParamError => self.param_error,
            Metric::Violations => self.violations as f64,
        }
    }

    /// Recomputes `(total_cost, tracking_error, violations)` from the step log.
    pub fn recompute(&self, q_ref: f64) -> (f64, f64, usize) {
        let total = self.steps.iter().map(|s| s.stage_cost).sum();
        let n = self.steps.len().max(1) as f64;
        let track = self.steps.iter().map(|s| (s.state[2] - q_ref).powi(2)).sum::<f64>() / n;
        let viol = self.steps.iter().filter(|s| s.violation).count();
        (total, track, viol)
    }
}

/// Runs one closed-loop episode. Run `run` of every kind draws the same
/// disturbances, particle initialisation and scenario paths.
pub fn run_episode(cfg: &ExperimentConfig, kind: &ControllerKind, run: usize) -> Result<EpisodeRecord> {
    let started = Instant::now();
    let seed = cfg.run.seed.wrapping_add(run as u64);
    let root = RandomStream::new(seed);
    let mut disturbance = root.split_named("disturbance");
    let mut filter_rng = root.split_named("filter");
    let mut scenario_rng = root.split_named("scenarios");
    let mut optimizer_rng = root.split_named("optimizer");

    let model = cfg.system_model()?;
    let cost = cfg.cost_spec()?;
    let rule = cfg.candidate_rule();
    let settings = cfg.planner_settings();
    let interval = cfg.interval_kind();
    let level = cfg.controller.level;
    let theta_true = cfg.theta_true();
    let horizon = cfg.controller.horizon;
    let nx = model.state_dim();

    let mut filter = ParticleFilter::new(&model.param_box, &cfg.filter_config(), &mut filter_rng)?;
    let mut x = State::new(&cfg.model.x0);
    let mut policy = PolicySequence::zeros(horizon, model.control_dim());
    let mut ambiguity: Option<AmbiguitySet> = None;
    let mut prev: Option<(State, Control)> = None;
    let mut steps = Vec::with_capacity(cfg.run.steps);
    let mut aborted = None;

    for k in 0..cfg.run.steps {
        if let Some((xp, up)) = &prev {
            filter.update(xp, up, &x, &model, &mut filter_rng)?;
        }
        let ci = credible_interval(filter.particles(), level, interval)?;
        let amb = update_ambiguity(ambiguity.as_ref(), ci);
        let scenarios = ScenarioSet::draw(cfg.controller.scenarios, horizon, nx, &mut scenario_rng)?;
        let ctx = PlanContext {
            x0: &x,
            particles: filter.particles(),
            ambiguity: &amb,
            scenarios: &scenarios,
            cost: &cost,
            model: &model,
            rule: &rule,
        };
        let out = plan(kind, ctx, &policy, settings, &mut optimizer_rng)?;
        let u = out.u0.clone();
        steps.push(StepRecord {
            state: x.clone(),
            control: u.clone(),
            stage_cost: cost.stage_cost(&x, &u),
            theta_hat: posterior_summary(filter.particles()).mean,
            eps: amb.radius,
            planned_value: out.planned_value,
            warm_value: out.warm_value,
            violation: x[2].abs() > std::f64::consts::PI,
        });
        policy = out.policy;
        ambiguity = Some(amb);

        let noise = disturbance.normals(nx);
        let next = model.step_stochastic(&x, &u, &theta_true, &noise);
        match next {
            Ok(n) if n.iter().all(|v| v.abs() <= BLOWUP) => {
                prev = Some((x, u));
                x = n;
            }
            Ok(n) => {
                aborted = Some(format!("state magnitude exceeded {BLOWUP:e} at step {k}: {:?}", n.as_slice()));
                break;
            }
            Err(e) => {
                aborted = Some(format!("integration failed at step {k}: {e}"));
                break;
            }
        }
    }
    if aborted.is_none() {
        if let Some((xp, up)) = &prev {
            filter.update(xp, up, &x, &model, &mut filter_rng)?;
        }
    }
    let theta_hat = posterior_summary(filter.particles()).mean;
    let param_error = theta_hat
        .iter()
        .zip(theta_true.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let mut rec = EpisodeRecord {
        kind: kind.name().to_string(),
        run,
        seed,
        steps,
        total_cost: 0.0,
        tracking_error: 0.0,
        param_error,
        violations: 0,
        wall_time_s: 0.0,
        aborted,
    };
    let (total, track, viol) = rec.recompute(cfg.cost.x_star[2]);
    rec.total_cost = total;
    rec.tracking_error = track;
    rec.violations = viol;
    rec.wall_time_s = started.elapsed().as_secs_f64();
    if let Some(msg) = &rec.aborted {
        log::warn!("{} run {run} aborted: {msg}", rec.kind);
    }
    Ok(rec)
}

/// The four reported metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    TotalCost,
    TrackingError,
    ParamError,
    Violations,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::TotalCost,
        Metric::TrackingError,
        Metric::ParamError,
        Metric::Violations,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::TotalCost => "total_cost",
            Metric::TrackingError => "tracking_error",
            Metric::ParamError => "param_error",
            Metric::Violations => "violations",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::TotalCost => "Cumulative cost",
            Metric::TrackingError => "Tracking error (q - pi)^2",
            Metric::ParamError => "Parameter error",
            Metric::Violations => "Angle violations",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricStats {
    pub mean: f64,
    pub std: f64,
    pub n_runs: usize,
}

/// Population mean and std (divisor n) of a sample.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct KindRow {
    pub kind: String,
    /// In [`Metric::ALL`] order.
    pub metrics: Vec<MetricStats>,
    pub aborted: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct BenchmarkTable {
    pub rows: Vec<KindRow>,
}

impl BenchmarkTable {
    /// Aggregates completed episodes per kind, in first-seen kind order.
    pub fn from_records(records: &[EpisodeRecord]) -> Self {
        let mut kinds: Vec<&str> = Vec::new();
        for r in records {
            if !kinds.contains(&r.kind.as_str()) {
                kinds.push(&r.kind);
            }
        }
        let rows = kinds
            .into_iter()
            .map(|k| {
                let done: Vec<&EpisodeRecord> = records.iter().filter(|r| r.kind == k && r.aborted.is_none()).collect();
                let aborted = records.iter().filter(|r| r.kind == k && r.aborted.is_some()).count();
                let metrics = Metric::ALL
                    .iter()
                    .map(|m| {
                        let xs: Vec<f64> = done.iter().map(|r| r.metric(*m)).collect();
                        let (mean, std) = mean_std(&xs);
                        MetricStats {
                            mean,
                            std,
                            n_runs: xs.len(),
                        }
                    })
                    .collect();
                KindRow {
                    kind: k.to_string(),
                    metrics,
                    aborted,
                }
            })
            .collect();
        Self { rows }
    }

    pub fn get(&self, kind: &str, metric: Metric) -> Option<&MetricStats> {
        let row = self.rows.iter().find(|r| r.kind == kind)?;
        let i = Metric::ALL.iter().position(|m| *m == metric)?;
        row.metrics.get(i)
    }
}

/// Every episode of a campaign plus the aggregated table.
#[derive(Clone, Debug)]
pub struct Campaign {
    /// Kind-major, then run index.
    pub records: Vec<EpisodeRecord>,
    pub table: BenchmarkTable,
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("BRAMP_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| invalid("BRAMP_THREADS", format!("not a positive integer: {v}")))?;
        if n == 0 {
            return Err(invalid("BRAMP_THREADS", "must be >= 1"));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// `n_runs` paired episodes of each kind, run in parallel.
pub fn run_campaign(cfg: &ExperimentConfig, kinds: &[ControllerKind]) -> Result<Campaign> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..kinds.len())
        .flat_map(|k| (0..cfg.run.n_runs).map(move |r| (k, r)))
        .collect();
    let records = thread_pool()?.install(|| {
        jobs.par_iter()
            .map(|(k, r)| run_episode(cfg, &kinds[*k], *r))
            .collect::<Result<Vec<_>>>()
    })?;
    let table = BenchmarkTable::from_records(&records);
    Ok(Campaign { records, table })
}

/// Campaign over all four controller kinds.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<Campaign> {
    run_campaign(cfg, &cfg.all_kinds()?)
}

/// `%.12g`-style formatting.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.11e}");
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        trim_zeros(&s).to_string()
    } else {
        format!("{}e{}{:02}", trim_zeros(mant), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const STEP_HEADER: &str =
    "run,step,kind,p,p_dot,q,q_dot,u,stage_cost,theta_m_hat,theta_l_hat,eps_k,planned_value,violation";
pub const SUMMARY_HEADER: &str = "kind,metric,mean,std,n_runs";

pub fn steps_csv(records: &[EpisodeRecord]) -> String {
    let mut out = String::from(STEP_HEADER);
    out.push('\n');
    for r in records {
        for (k, s) in r.steps.iter().enumerate() {
            let _ = write!(out, "{},{},{}", r.run, k, r.kind);
            for v in s.state.iter().chain(s.control.iter()) {
                let _ = write!(out, ",{}", fmt_num(*v));
            }
            let _ = write!(out, ",{}", fmt_num(s.stage_cost));
            for v in s.theta_hat.iter() {
                let _ = write!(out, ",{}", fmt_num(*v));
            }
            let _ = writeln!(
                out,
                ",{},{},{}",
                fmt_num(s.eps),
                fmt_num(s.planned_value),
                u8::from(s.violation)
            );
        }
    }
    out
}

pub fn summary_csv(table: &BenchmarkTable) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for row in &table.rows {
        for (m, s) in Metric::ALL.iter().zip(&row.metrics) {
            let _ = writeln!(out, "{},{},{},{},{}", row.kind, m.name(), fmt_num(s.mean), fmt_num(s.std), s.n_runs);
        }
    }
    out
}

pub fn write_steps_csv(records: &[EpisodeRecord], path: &Path) -> Result<()> {
    std::fs::write(path, steps_csv(records))?;
    Ok(())
}

pub fn write_summary_csv(table: &BenchmarkTable, path: &Path) -> Result<()> {
    std::fs::write(path, summary_csv(table))?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Four grouped bar panels (one per metric) with ±1 std whiskers.
pub fn svg_summary(table: &BenchmarkTable) -> Result<String> {
    if table.rows.is_empty() {
        return Err(Error::Empty("benchmark table"));
    }
    const PW: f64 = 320.0;
    const PH: f64 = 240.0;
    const LEFT: f64 = 60.0;
    const TOP: f64 = 40.0;
    const PLOT_W: f64 = 240.0;
    const PLOT_H: f64 = 150.0;
    const COLORS: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];
    let n = table.rows.len();
    let width = 2.0 * PW;
    let height = 2.0 * PH;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for (pi, metric) in Metric::ALL.iter().enumerate() {
        let ox = (pi % 2) as f64 * PW;
        let oy = (pi / 2) as f64 * PH;
        let stats: Vec<&MetricStats> = table.rows.iter().map(|r| &r.metrics[pi]).collect();
        let top = stats
            .iter()
            .map(|m| m.mean + m.std)
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max);
        let scale = if top > 0.0 { PLOT_H / (1.1 * top) } else { 0.0 };
        let base_y = oy + TOP + PLOT_H;
        let _ = writeln!(s, r#"<g class="panel" id="{}">"#, metric.name());
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-weight="bold">{}</text>"#,
            ox + LEFT + PLOT_W / 2.0,
            oy + 20.0,
            xml_escape(metric.label())
        );
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{base_y}" stroke="black"/><line x1="{x}" y1="{base_y}" x2="{x2}" y2="{base_y}" stroke="black"/>"#,
            x = ox + LEFT,
            y0 = oy + TOP,
            x2 = ox + LEFT + PLOT_W
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text><text x="{}" y="{}" text-anchor="end">0</text>"#,
            ox + LEFT - 4.0,
            oy + TOP + 4.0,
            fmt_num(if top > 0.0 { 1.1 * top } else { 0.0 }),
            ox + LEFT - 4.0,
            base_y + 4.0
        );
        let slot = PLOT_W / n as f64;
        for (i, (row, m)) in table.rows.iter().zip(&stats).enumerate() {
            let mean = if m.mean.is_finite() { m.mean.max(0.0) } else { 0.0 };
            let std = if m.std.is_finite() { m.std } else { 0.0 };
            let h = mean * scale;
            let bx = ox + LEFT + slot * i as f64 + 0.15 * slot;
            let bw = 0.7 * slot;
            let _ = writeln!(
                s,
                r#"<rect class="bar" x="{bx:.2}" y="{:.2}" width="{bw:.2}" height="{h:.2}" fill="{}"/>"#,
                base_y - h,
                COLORS[i % COLORS.len()]
            );
            let cx = bx + bw / 2.0;
            let y_hi = base_y - (mean + std) * scale;
            let y_lo = base_y - (mean - std).max(0.0) * scale;
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.2}" y1="{y_lo:.2}" x2="{cx:.2}" y2="{y_hi:.2}" stroke="black"/><line x1="{:.2}" y1="{y_hi:.2}" x2="{:.2}" y2="{y_hi:.2}" stroke="black"/>"#,
                cx - 4.0,
                cx + 4.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                base_y + 14.0,
                xml_escape(&row.kind)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">controller</text>"#,
            ox + LEFT + PLOT_W / 2.0,
            base_y + 30.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" text-anchor="middle" transform="rotate(-90 {x} {y})">mean ± 1 std</text>"#,
            x = ox + 16.0,
            y = oy + TOP + PLOT_H / 2.0
        );
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_svg_summary(table: &BenchmarkTable, path: &Path) -> Result<()> {
    std::fs::write(path, svg_summary(table)?)?;
    Ok(())
}
