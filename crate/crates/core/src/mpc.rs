//! Receding-horizon controllers.
//!
//! Each planning call shifts the previous control sequence by one step, appends a
//! terminal element, then spends a fixed iteration budget improving it under a
//! controller-specific objective. The improved sequence is never worse than the
//! shifted warm start under that objective.

use rayon::prelude::*;

use crate::ambiguity::AmbiguitySet;
use crate::dynamics::{Control, ParamBox, State, SystemModel, Theta};
use crate::error::{Error, Result};
use crate::filter::{posterior_summary, ParticleSet};
use crate::risk::{expected_cost, worst_case_value, CandidateRule, CostSpec, ScenarioSet};
use crate::stream::RandomStream;

/// Open-loop control sequence `v_0 .. v_{N-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySequence {
    pub controls: Vec<Control>,
}

impl PolicySequence {
    pub fn new(controls: Vec<Control>) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::InvalidArgument("policy horizon must be >= 1".into()));
        }
        let dim = controls[0].dim();
        if controls.iter().any(|c| c.dim() != dim) {
            return Err(Error::InvalidArgument("ragged control sequence".into()));
        }
        Ok(Self { controls })
    }

    pub fn zeros(horizon: usize, control_dim: usize) -> Self {
        Self {
            controls: vec![Control::zeros(control_dim); horizon.max(1)],
        }
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn control_dim(&self) -> usize {
        self.controls[0].dim()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.controls.iter().flat_map(|c| c.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64], control_dim: usize) -> Self {
        Self {
            controls: flat.chunks(control_dim).map(Control::new).collect(),
        }
    }

    pub fn clipped(&self, bounds: &ParamBox) -> Self {
        let mut out = self.clone();
        for c in out.controls.iter_mut() {
            bounds.clip(&mut c.0);
        }
        out
    }
}

/// Single-path cost `Σ l(x_i, u_i) + V_f(x_N)` with controls clipped to bounds.
pub fn rollout_cost(
    x0: &State,
    v: &PolicySequence,
    theta: &Theta,
    noise_path: &[f64],
    cost: &CostSpec,
    model: &SystemModel,
) -> Result<f64> {
    let nx = model.state_dim();
    if noise_path.len() != v.horizon() * nx {
        return Err(Error::DimensionMismatch {
            what: "noise path",
            expected: v.horizon() * nx,
            got: noise_path.len(),
        });
    }
    let mut x = x0.clone();
    let mut total = 0.0;
    for (i, u) in v.controls.iter().enumerate() {
        let mut u = u.clone();
        model.clip_control(&mut u.0);
        total += cost.stage_cost(&x, &u);
        x = model.step_stochastic(&x, &u, theta, &noise_path[i * nx..(i + 1) * nx])?;
    }
    Ok(total + cost.terminal_cost(&x))
}

/// Drops `v_0` and appends `v_f`.
pub fn shift_warm_start(v_prev: &PolicySequence, v_f: &Control) -> PolicySequence {
    let mut controls: Vec<Control> = v_prev.controls.iter().skip(1).cloned().collect();
    controls.push(v_f.clone());
    PolicySequence { controls }
}

/// Outcome of [`improve_policy`].
#[derive(Clone, Debug)]
pub struct Improvement {
    pub policy: PolicySequence,
    pub value: f64,
    pub warm_value: f64,
    pub evaluations: usize,
}

/// Local optimizer behind [`improve_policy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Optimizer {
    /// Projected finite-difference gradient steps with Barzilai-Borwein step
    /// lengths and Armijo backtracking; polls coordinates when the gradient stalls.
    #[default]
    ProjectedGradient,
    /// Compass search only.
    CoordinateSearch,
}

const ARMIJO: f64 = 1e-4;

struct Search<'a> {
    eval: &'a mut dyn FnMut(&[f64]) -> Result<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    evaluations: usize,
}

impl Search<'_> {
    fn f(&mut self, x: &[f64]) -> Result<f64> {
        self.evaluations += 1;
        (self.eval)(x)
    }

    fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }

    fn gradient(&mut self, x: &[f64], fx: f64) -> Result<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            let h = 1e-6 * (1.0 + x[i].abs());
            let up = (x[i] + h).min(self.hi[i]);
            let down = (x[i] - h).max(self.lo[i]);
            probe[i] = up;
            let f_up = if up > x[i] { self.f(&probe)? } else { fx };
            probe[i] = down;
            let f_down = if down < x[i] { self.f(&probe)? } else { fx };
            probe[i] = x[i];
            let span = up - down;
            g[i] = if span > 0.0 { (f_up - f_down) / span } else { 0.0 };
        }
        Ok(g)
    }

    /// Compass poll: first improving ±step move along a shuffled coordinate order.
    fn poll(&mut self, x: &[f64], fx: f64, step: &[f64], rng: &mut RandomStream) -> Result<Option<(Vec<f64>, f64)>> {
        let mut order: Vec<usize> = (0..x.len()).collect();
        for i in (1..order.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        for &i in &order {
            for sign in [1.0, -1.0] {
                let mut y = x.to_vec();
                y[i] += sign * step[i];
                self.project(&mut y);
                if y[i] == x[i] {
                    continue;
                }
                let fy = self.f(&y)?;
                if fy < fx {
                    return Ok(Some((y, fy)));
                }
            }
        }
        Ok(None)
    }
}

/// Budgeted local improvement of `v_warm` inside `bounds` (per control component).
///
/// `budget` counts outer iterations; zero returns the warm start untouched. The
/// returned value never exceeds the warm-start value.
pub fn improve_policy(
    v_warm: &PolicySequence,
    evaluator: &mut dyn FnMut(&PolicySequence) -> Result<f64>,
    bounds: &ParamBox,
    budget: usize,
    optimizer: Optimizer,
    rng: &mut RandomStream,
) -> Result<Improvement> {
    let nu = v_warm.control_dim();
    if bounds.dim() != nu {
        return Err(Error::DimensionMismatch {
            what: "control bounds",
            expected: nu,
            got: bounds.dim(),
        });
    }
    let warm_value = evaluator(v_warm)?;
    if budget == 0 {
        return Ok(Improvement {
            policy: v_warm.clone(),
            value: warm_value,
            warm_value,
            evaluations: 1,
        });
    }
    let n = v_warm.horizon() * nu;
    let lo: Vec<f64> = (0..n).map(|i| bounds.lo[i % nu]).collect();
    let hi: Vec<f64> = (0..n).map(|i| bounds.hi[i % nu]).collect();
    let mut flat_eval = |flat: &[f64]| evaluator(&PolicySequence::from_flat(flat, nu));
    let mut s = Search {
        eval: &mut flat_eval,
        lo,
        hi,
        evaluations: 1,
    };

    let mut x = v_warm.to_flat();
    s.project(&mut x);
    let mut fx = if x == v_warm.to_flat() { warm_value } else { s.f(&x)? };
    let mut poll_step: Vec<f64> = (0..n).map(|i| 0.1 * (s.hi[i] - s.lo[i])).collect();
    let min_step: Vec<f64> = (0..n).map(|i| 1e-9 * (1.0 + s.hi[i] - s.lo[i])).collect();
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None; // (x, g) of the last accepted gradient step
    let mut trial = f64::NAN;

    for _ in 0..budget {
        let mut moved = false;
        if optimizer == Optimizer::ProjectedGradient {
            let g = s.gradient(&x, fx)?;
            if let Some((px, pg)) = prev.take() {
                let sx: Vec<f64> = x.iter().zip(&px).map(|(a, b)| a - b).collect();
                let sy: Vec<f64> = g.iter().zip(&pg).map(|(a, b)| a - b).collect();
                let ss: f64 = sx.iter().map(|v| v * v).sum();
                let sy_dot: f64 = sx.iter().zip(&sy).map(|(a, b)| a * b).sum();
                if sy_dot > 0.0 && ss > 0.0 {
                    trial = ss / sy_dot;
                }
            }
            let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gmax > 0.0 && gmax.is_finite() {
                if !(trial.is_finite() && trial > 0.0) {
                    // first step moves the largest component by 10% of its range
                    trial = 0.1 * (s.hi[0] - s.lo[0]).max(1e-12) / gmax;
                }
                let mut t = trial;
                for _ in 0..40 {
                    let mut y: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - t * gi).collect();
                    s.project(&mut y);
                    let decrease: f64 = g.iter().zip(x.iter().zip(&y)).map(|(gi, (xi, yi))| gi * (xi - yi)).sum();
                    if decrease <= 0.0 {
                        break;
                    }
                    let fy = s.f(&y)?;
                    if fy <= fx - ARMIJO * decrease {
                        prev = Some((x.clone(), g.clone()));
                        x = y;
                        fx = fy;
                        trial = t;
                        moved = true;
                        break;
                    }
                    t *= 0.5;
                }
            }
        }
        if !moved {
            match s.poll(&x, fx, &poll_step, rng)? {
                Some((y, fy)) => {
                    x = y;
                    fx = fy;
                    prev = None;
                }
                None => {
                    for (p, m) in poll_step.iter_mut().zip(&min_step) {
                        *p *= 0.5;
                        if *p < *m {
                            *p = *m;
                        }
                    }
                    if poll_step.iter().zip(&min_step).all(|(p, m)| p <= m) {
                        break;
                    }
                }
            }
        }
    }
    let evaluations = s.evaluations;
    if fx <= warm_value {
        Ok(Improvement {
            policy: PolicySequence::from_flat(&x, nu),
            value: fx,
            warm_value,
            evaluations,
        })
    } else {
        Ok(Improvement {
            policy: v_warm.clone(),
            value: warm_value,
            warm_value,
            evaluations,
        })
    }
}

/// Which objective the planner minimizes.
#[derive(Clone, Debug, PartialEq)]
pub enum ControllerKind {
    /// Expected cost at the posterior mean.
    Nominal,
    /// Worst case over a fixed parameter box.
    Tube { tube: ParamBox },
    /// Expected cost averaged over a stratified posterior subsample.
    Stochastic { samples: usize },
    /// Worst case over the current ambiguity set built at `level`.
    RiskAverse { level: f64 },
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Nominal => "nominal",
            ControllerKind::Tube { .. } => "tube",
            ControllerKind::Stochastic { .. } => "stochastic",
            ControllerKind::RiskAverse { .. } => "risk_averse",
        }
    }

    pub fn validate(&self, theta_dim: usize) -> Result<()> {
        match self {
            ControllerKind::Nominal => Ok(()),
            ControllerKind::Tube { tube } if tube.dim() != theta_dim => Err(Error::DimensionMismatch {
                what: "tube box",
                expected: theta_dim,
                got: tube.dim(),
            }),
            ControllerKind::Tube { .. } => Ok(()),
            ControllerKind::Stochastic { samples } if *samples == 0 => {
                Err(Error::InvalidArgument("stochastic sample count must be >= 1".into()))
            }
            ControllerKind::Stochastic { .. } => Ok(()),
            ControllerKind::RiskAverse { level } if !(*level > 0.0 && *level < 1.0) => {
                Err(Error::InvalidArgument(format!("credible level must lie in (0, 1), got {level}")))
            }
            ControllerKind::RiskAverse { .. } => Ok(()),
        }
    }
}

/// Deterministic stratified pick of `m` particles by cumulative weight.
pub fn stratified_subsample(ps: &ParticleSet, m: usize) -> Vec<Theta> {
    let mut cum = Vec::with_capacity(ps.len());
    let mut acc = 0.0;
    for w in &ps.weights {
        acc += w;
        cum.push(acc);
    }
    (0..m)
        .map(|j| {
            let s = (j as f64 + 0.5) / m as f64 * acc;
            let idx = cum.partition_point(|c| *c < s).min(ps.len() - 1);
            ps.thetas[idx].clone()
        })
        .collect()
}

/// Everything a planning call needs besides the controller kind.
#[derive(Clone, Copy, Debug)]
pub struct PlanContext<'a> {
    pub x0: &'a State,
    pub particles: &'a ParticleSet,
    pub ambiguity: &'a AmbiguitySet,
    pub scenarios: &'a ScenarioSet,
    pub cost: &'a CostSpec,
    pub model: &'a SystemModel,
    pub rule: &'a CandidateRule,
}

/// The objective a controller kind puts on a policy.
pub struct Objective<'a> {
    ctx: PlanContext<'a>,
    target: Target,
}

enum Target {
    Single(Theta),
    WorstOver(ParamBox),
    Average(Vec<Theta>),
}

impl<'a> Objective<'a> {
    pub fn new(kind: &ControllerKind, ctx: PlanContext<'a>) -> Self {
        let target = match kind {
            ControllerKind::Nominal => Target::Single(posterior_summary(ctx.particles).mean),
            ControllerKind::Tube { tube } => Target::WorstOver(tube.clone()),
            ControllerKind::Stochastic { samples } => {
                Target::Average(stratified_subsample(ctx.particles, *samples))
            }
            ControllerKind::RiskAverse { .. } => Target::WorstOver(ctx.ambiguity.bounds.clone()),
        };
        Self { ctx, target }
    }

    /// Value and, for worst-case objectives, the maximizing parameter.
    pub fn evaluate(&self, v: &PolicySequence) -> Result<(f64, Option<Theta>)> {
        let c = &self.ctx;
        match &self.target {
            Target::Single(th) => Ok((expected_cost(c.x0, v, th, c.scenarios, c.cost, c.model)?, None)),
            Target::WorstOver(b) => {
                let (val, th) = worst_case_value(c.x0, v, b, c.scenarios, c.cost, c.model, c.rule)?;
                Ok((val, Some(th)))
            }
            Target::Average(thetas) => {
                let vals: Vec<f64> = thetas
                    .par_iter()
                    .map(|th| expected_cost(c.x0, v, th, c.scenarios, c.cost, c.model))
                    .collect::<Result<_>>()?;
                Ok((vals.iter().sum::<f64>() / vals.len() as f64, None))
            }
        }
    }

    pub fn value(&self, v: &PolicySequence) -> Result<f64> {
        Ok(self.evaluate(v)?.0)
    }
}

/// Result of one receding-horizon planning call.
#[derive(Clone, Debug)]
pub struct PlanOutcome {
    pub u0: Control,
    pub policy: PolicySequence,
    pub planned_value: f64,
    /// Objective value of the shifted warm start under the same scenarios.
    pub warm_value: f64,
    pub worst_theta: Option<Theta>,
    pub evaluations: usize,
}

/// Planner settings shared by all controller kinds.
#[derive(Clone, Copy, Debug)]
pub struct PlannerSettings {
    pub budget: usize,
    pub optimizer: Optimizer,
}

/// Shift `v_prev`, improve it under the kind's objective, return the first control.
pub fn plan(
    kind: &ControllerKind,
    ctx: PlanContext<'_>,
    v_prev: &PolicySequence,
    settings: PlannerSettings,
    rng: &mut RandomStream,
) -> Result<PlanOutcome> {
    let mut v_f = Control::zeros(ctx.model.control_dim());
    ctx.model.clip_control(&mut v_f.0);
    let warm = shift_warm_start(v_prev, &v_f).clipped(&ctx.model.control_bounds);
    let objective = Objective::new(kind, ctx);
    let mut eval = |v: &PolicySequence| objective.value(v);
    let imp = improve_policy(
        &warm,
        &mut eval,
        &ctx.model.control_bounds,
        settings.budget,
        settings.optimizer,
        rng,
    )?;
    let (planned_value, worst_theta) = objective.evaluate(&imp.policy)?;
    Ok(PlanOutcome {
        u0: imp.policy.controls[0].clone(),
        policy: imp.policy,
        planned_value,
        warm_value: imp.warm_value,
        worst_theta,
        evaluations: imp.evaluations,
    })
}
