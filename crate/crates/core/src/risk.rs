//! Risk-measure primitives and value evaluation.
//!
//! - Empirical VaR / CVaR on equally weighted samples.
//! - Scenario-averaged rollout cost and its worst case over a parameter box,
//!   both under common random numbers.
//! - A finite-MDP solver for the nested (stage-wise worst case) and joint
//!   (worst case of the whole expectation) formulations.

use rayon::prelude::*;

use crate::dynamics::{ParamBox, State, SystemModel, Theta};
use crate::error::{Error, Result};
use crate::mpc::{rollout_cost, PolicySequence};
use crate::stream::RandomStream;

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn sorted(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("risk samples"));
    }
    if samples.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("risk samples contain NaN".into()));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// `inf { z : F_n(z) ≥ α }` for the empirical CDF `F_n`.
pub fn empirical_var(samples: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let v = sorted(samples)?;
    let n = v.len() as f64;
    // F_n(v[i]) ≥ (i+1)/n; the first index reaching α is the answer.
    let idx = (0..v.len()).find(|&i| (i + 1) as f64 / n >= alpha).unwrap_or(v.len() - 1);
    Ok(v[idx])
}

/// `inf_t { t + α⁻¹ E[Z - t]₊ }`, where α is the upper-tail mass.
///
/// The objective is convex and piecewise linear with kinks at the samples, so the
/// infimum is attained at one of them; every sample is tried with suffix sums.
pub fn empirical_cvar(samples: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let v = sorted(samples)?;
    let n = v.len();
    let scale = 1.0 / (alpha * n as f64);
    let mut suffix = 0.0;
    let mut best = f64::INFINITY;
    for j in (0..n).rev() {
        // Σ_{i>j} (v_i - v_j), all terms non-negative.
        let excess = suffix - (n - 1 - j) as f64 * v[j];
        best = best.min(v[j] + scale * excess);
        suffix += v[j];
    }
    Ok(best)
}

/// Fixed noise paths shared by every candidate and iterate of one planning call.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSet {
    pub horizon: usize,
    pub state_dim: usize,
    /// Each path is `horizon × state_dim` unit normals, step-major.
    pub paths: Vec<Vec<f64>>,
    pub seed: Option<u64>,
}

impl ScenarioSet {
    pub fn draw(count: usize, horizon: usize, state_dim: usize, rng: &mut RandomStream) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("scenario count must be >= 1".into()));
        }
        let seed = rng.seed();
        let paths = (0..count).map(|_| rng.normals(horizon * state_dim)).collect();
        Ok(Self {
            horizon,
            state_dim,
            paths,
            seed: Some(seed),
        })
    }

    /// A single all-zero path: the deterministic rollout.
    pub fn zeros(horizon: usize, state_dim: usize) -> Self {
        Self {
            horizon,
            state_dim,
            paths: vec![vec![0.0; horizon * state_dim]],
            seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// Quadratic tracking cost `(x-x*)ᵀQ(x-x*) + R·|u|²`, terminal `w·(x-x*)ᵀQ(x-x*)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostSpec {
    pub q_diag: Vec<f64>,
    pub r: f64,
    pub x_star: State,
    pub terminal_weight: f64,
}

impl CostSpec {
    pub fn new(q_diag: Vec<f64>, r: f64, x_star: State, terminal_weight: f64) -> Result<Self> {
        if q_diag.len() != x_star.dim() {
            return Err(Error::DimensionMismatch {
                what: "Q diagonal",
                expected: x_star.dim(),
                got: q_diag.len(),
            });
        }
        if q_diag.iter().any(|q| !(*q >= 0.0)) || !q_diag.iter().any(|q| *q > 0.0) {
            return Err(Error::InvalidArgument(
                "Q entries must be >= 0 with at least one > 0".into(),
            ));
        }
        if !(r > 0.0) {
            return Err(Error::InvalidArgument(format!("R must be > 0, got {r}")));
        }
        if !(terminal_weight >= 0.0) {
            return Err(Error::InvalidArgument("terminal weight must be >= 0".into()));
        }
        Ok(Self {
            q_diag,
            r,
            x_star,
            terminal_weight,
        })
    }

    /// Cart-pole swing-up cost: `Q = diag(1, 0.1, 10, 0.1)`, `R = 0.01`, `x* = (0, 0, π, 0)`.
    pub fn cartpole() -> Self {
        Self {
            q_diag: vec![1.0, 0.1, 10.0, 0.1],
            r: 0.01,
            x_star: State::new(&[0.0, 0.0, std::f64::consts::PI, 0.0]),
            terminal_weight: 1.0,
        }
    }

    pub fn state_cost(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.x_star.iter())
            .zip(&self.q_diag)
            .map(|((xi, si), q)| q * (xi - si) * (xi - si))
            .sum()
    }

    pub fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        self.state_cost(x) + self.r * u.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.terminal_weight * self.state_cost(x)
    }
}

/// Scenario average of the rollout cost under parameter θ.
pub fn expected_cost(
    x0: &State,
    v: &PolicySequence,
    theta: &Theta,
    scen: &ScenarioSet,
    cost: &CostSpec,
    model: &SystemModel,
) -> Result<f64> {
    if scen.horizon != v.horizon() {
        return Err(Error::DimensionMismatch {
            what: "scenario horizon",
            expected: v.horizon(),
            got: scen.horizon,
        });
    }
    if scen.is_empty() {
        return Err(Error::Empty("scenario set"));
    }
    let mut total = 0.0;
    for path in &scen.paths {
        total += rollout_cost(x0, v, theta, path, cost, model)?;
    }
    Ok(total / scen.len() as f64)
}

/// How the supremum over a box is approximated by a finite maximum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CandidateRule {
    /// Extra grid with this many points per dim (≥ 2 includes the corners).
    /// `None` keeps corners and center only.
    pub grid_points: Option<usize>,
}

impl Default for CandidateRule {
    fn default() -> Self {
        Self { grid_points: Some(3) }
    }
}

impl CandidateRule {
    pub const CORNERS_AND_CENTER: CandidateRule = CandidateRule { grid_points: None };

    /// Corners, then center, then grid points; duplicates removed, order fixed.
    pub fn candidates(&self, b: &ParamBox) -> Vec<Theta> {
        let dim = b.dim();
        let mut out: Vec<Theta> = Vec::new();
        let push = |t: Theta, out: &mut Vec<Theta>| {
            if !out.iter().any(|o| o == &t) {
                out.push(t);
            }
        };
        for mask in 0..(1usize << dim) {
            let t = (0..dim)
                .map(|d| if mask >> d & 1 == 1 { b.hi[d] } else { b.lo[d] })
                .collect();
            push(Theta(t), &mut out);
        }
        push(b.center(), &mut out);
        if let Some(g) = self.grid_points.filter(|g| *g >= 2) {
            let total = g.pow(dim as u32);
            for idx in 0..total {
                let mut rem = idx;
                let t = (0..dim)
                    .map(|d| {
                        let i = rem % g;
                        rem /= g;
                        b.lo[d] + b.width(d) * i as f64 / (g - 1) as f64
                    })
                    .collect();
                push(Theta(t), &mut out);
            }
        }
        out
    }
}

/// Max over candidate parameters of [`expected_cost`]; ties resolve to the first
/// candidate in rule order.
pub fn worst_case_value(
    x0: &State,
    v: &PolicySequence,
    b: &ParamBox,
    scen: &ScenarioSet,
    cost: &CostSpec,
    model: &SystemModel,
    rule: &CandidateRule,
) -> Result<(f64, Theta)> {
    let cands = rule.candidates(b);
    worst_case_over(x0, v, &cands, scen, cost, model)
}

/// Max of [`expected_cost`] over an explicit candidate list.
pub fn worst_case_over(
    x0: &State,
    v: &PolicySequence,
    candidates: &[Theta],
    scen: &ScenarioSet,
    cost: &CostSpec,
    model: &SystemModel,
) -> Result<(f64, Theta)> {
    if candidates.is_empty() {
        return Err(Error::Empty("worst-case candidate set"));
    }
    let values: Vec<f64> = candidates
        .par_iter()
        .map(|th| expected_cost(x0, v, th, scen, cost, model))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, val) in values.iter().enumerate() {
        if *val > values[best] {
            best = i;
        }
    }
    Ok((values[best], candidates[best].clone()))
}

// ---------------------------------------------------------------------------
// Finite risk-averse MDP
// ---------------------------------------------------------------------------

/// Finite instance: `transitions[θ][a][x][x']`, `stage_cost[x][a]`, `terminal_cost[x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteRiskMDP {
    pub n_states: usize,
    pub n_actions: usize,
    pub transitions: Vec<Vec<Vec<Vec<f64>>>>,
    pub stage_cost: Vec<Vec<f64>>,
    pub terminal_cost: Vec<f64>,
    pub horizon: usize,
}

/// Joint-mode enumeration limits.
pub const JOINT_MAX_STATES: usize = 4;
pub const JOINT_MAX_ACTIONS: usize = 3;
pub const JOINT_MAX_THETAS: usize = 3;
pub const JOINT_MAX_HORIZON: usize = 3;

impl DiscreteRiskMDP {
    pub fn new(
        transitions: Vec<Vec<Vec<Vec<f64>>>>,
        stage_cost: Vec<Vec<f64>>,
        terminal_cost: Vec<f64>,
        horizon: usize,
    ) -> Result<Self> {
        let n_states = terminal_cost.len();
        if n_states == 0 || transitions.is_empty() {
            return Err(Error::Empty("MDP states or parameter candidates"));
        }
        let n_actions = stage_cost.first().map_or(0, Vec::len);
        if n_actions == 0 || stage_cost.len() != n_states {
            return Err(Error::InvalidArgument("stage cost table must be states × actions".into()));
        }
        for (ti, per_theta) in transitions.iter().enumerate() {
            if per_theta.len() != n_actions {
                return Err(Error::InvalidArgument(format!("theta {ti}: wrong action count")));
            }
            for per_action in per_theta {
                if per_action.len() != n_states {
                    return Err(Error::InvalidArgument(format!("theta {ti}: wrong state count")));
                }
                for row in per_action {
                    let s: f64 = row.iter().sum();
                    if row.len() != n_states || row.iter().any(|p| *p < 0.0) || (s - 1.0).abs() > 1e-9 {
                        return Err(Error::InvalidArgument(format!(
                            "theta {ti}: transition row must be a distribution over {n_states} states"
                        )));
                    }
                }
            }
        }
        if stage_cost.iter().any(|r| r.len() != n_actions) {
            return Err(Error::InvalidArgument("ragged stage cost table".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions,
            stage_cost,
            terminal_cost,
            horizon,
        })
    }

    pub fn n_thetas(&self) -> usize {
        self.transitions.len()
    }

    fn expect(&self, theta: usize, a: usize, x: usize, values: &[f64]) -> f64 {
        self.transitions[theta][a][x].iter().zip(values).map(|(p, v)| p * v).sum()
    }

    fn worst_expect(&self, a: usize, x: usize, values: &[f64]) -> f64 {
        (0..self.n_thetas())
            .map(|t| self.expect(t, a, x, values))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max_x min_a max_θ { E_θ[V_f(x')] - V_f(x) + l(x, a) }`, the smallest δ with
    /// `V_{i+1} ≤ V_i + δ` guaranteed.
    pub fn terminal_descent_delta(&self) -> f64 {
        (0..self.n_states)
            .map(|x| {
                (0..self.n_actions)
                    .map(|a| {
                        self.worst_expect(a, x, &self.terminal_cost) - self.terminal_cost[x]
                            + self.stage_cost[x][a]
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Terminal-cost descent: every state has an action whose worst-case expected
    /// terminal cost drops by at least the stage cost.
    pub fn satisfies_terminal_descent(&self, tol: f64) -> bool {
        self.terminal_descent_delta() <= tol
    }

    fn within_joint_cap(&self) -> bool {
        self.n_states <= JOINT_MAX_STATES
            && self.n_actions <= JOINT_MAX_ACTIONS
            && self.n_thetas() <= JOINT_MAX_THETAS
            && self.horizon <= JOINT_MAX_HORIZON
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpMode {
    /// Stage-wise worst case: `V_i(x) = min_a l(x,a) + max_θ E_θ[V_{i-1}(x')]`.
    Nested,
    /// `min_π max_θ E_θ[cost]` by exhaustive enumeration of deterministic Markov policies.
    Joint,
}

/// Value tables indexed by time-to-go `i = 0..=N`, and the first action of the
/// optimal policy for `i = 1..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct DpSolution {
    pub mode: DpMode,
    pub values: Vec<Vec<f64>>,
    pub policies: Vec<Vec<usize>>,
}

impl DpSolution {
    pub fn value(&self, horizon: usize) -> &[f64] {
        &self.values[horizon]
    }
}

pub fn dp_solve_discrete(m: &DiscreteRiskMDP, mode: DpMode) -> Result<DpSolution> {
    match mode {
        DpMode::Nested => Ok(solve_nested(m)),
        DpMode::Joint => solve_joint(m),
    }
}

fn solve_nested(m: &DiscreteRiskMDP) -> DpSolution {
    let mut values = vec![m.terminal_cost.clone()];
    let mut policies = Vec::with_capacity(m.horizon);
    for _ in 1..=m.horizon {
        let prev = values.last().expect("V_0 present");
        let mut v = vec![0.0; m.n_states];
        let mut pol = vec![0; m.n_states];
        for x in 0..m.n_states {
            let mut best = f64::INFINITY;
            for a in 0..m.n_actions {
                let q = m.stage_cost[x][a] + m.worst_expect(a, x, prev);
                if q < best {
                    best = q;
                    pol[x] = a;
                }
            }
            v[x] = best;
        }
        values.push(v);
        policies.push(pol);
    }
    DpSolution {
        mode: DpMode::Nested,
        values,
        policies,
    }
}

fn solve_joint(m: &DiscreteRiskMDP) -> Result<DpSolution> {
    if !m.within_joint_cap() {
        return Err(Error::InvalidArgument(format!(
            "joint enumeration capped at {JOINT_MAX_STATES} states, {JOINT_MAX_ACTIONS} actions, \
             {JOINT_MAX_THETAS} thetas, horizon {JOINT_MAX_HORIZON}"
        )));
    }
    let mut values = vec![m.terminal_cost.clone()];
    let mut policies = Vec::with_capacity(m.horizon);
    for h in 1..=m.horizon {
        let (v, p) = joint_at_horizon(m, h);
        values.push(v);
        policies.push(p);
    }
    Ok(DpSolution {
        mode: DpMode::Joint,
        values,
        policies,
    })
}

/// Enumerates every map (stage, state) → action for a horizon `h`.
fn joint_at_horizon(m: &DiscreteRiskMDP, h: usize) -> (Vec<f64>, Vec<usize>) {
    let (ns, na) = (m.n_states, m.n_actions);
    let slots = ns * h;
    let total = na.pow(slots as u32);
    let mut best = vec![f64::INFINITY; ns];
    let mut best_first = vec![0; ns];
    let mut actions = vec![0usize; slots];
    let mut w = vec![0.0; ns];
    let mut next = vec![0.0; ns];
    let mut worst = vec![0.0; ns];
    for code in 0..total {
        let mut c = code;
        for slot in actions.iter_mut() {
            *slot = c % na;
            c /= na;
        }
        worst.fill(f64::NEG_INFINITY);
        for theta in 0..m.n_thetas() {
            w.copy_from_slice(&m.terminal_cost);
            // stage t uses actions[t*ns .. (t+1)*ns]; evaluate backwards.
            for t in (0..h).rev() {
                for x in 0..ns {
                    let a = actions[t * ns + x];
                    next[x] = m.stage_cost[x][a] + m.expect(theta, a, x, &w);
                }
                std::mem::swap(&mut w, &mut next);
            }
            for x in 0..ns {
                worst[x] = worst[x].max(w[x]);
            }
        }
        for x in 0..ns {
            if worst[x] < best[x] {
                best[x] = worst[x];
                best_first[x] = actions[x];
            }
        }
    }
    (best, best_first)
}

/// Built-in instances used by the validators.
#[derive(Clone, Debug)]
pub struct NamedInstance {
    pub name: &'static str,
    pub mdp: DiscreteRiskMDP,
}

/// Three states, one action, two parameters, N = 2. From state 0 both parameters
/// scatter evenly to states 1 and 2; from there the parameters disagree about which
/// state leads to the costly state 0. A stage-wise worst case picks the bad
/// parameter per branch, a fixed parameter cannot: nested value 1, joint value 0.5.
pub fn strict_gap_instance() -> DiscreteRiskMDP {
    let theta_a = vec![vec![
        vec![0.0, 0.5, 0.5],
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
    ]];
    let theta_b = vec![vec![
        vec![0.0, 0.5, 0.5],
        vec![0.0, 0.0, 1.0],
        vec![1.0, 0.0, 0.0],
    ]];
    DiscreteRiskMDP::new(
        vec![theta_a, theta_b],
        vec![vec![0.0]; 3],
        vec![1.0, 0.0, 0.0],
        2,
    )
    .expect("valid built-in instance")
}

/// Absorbing zero-cost goal at state 0, a "step toward goal" action and a
/// "wait" action; terminal cost large enough that stepping toward the goal is a
/// descent direction for every parameter.
pub fn descent_instance() -> DiscreteRiskMDP {
    let slow = vec![
        // toward goal
        vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.8, 0.2, 0.0, 0.0],
            vec![0.1, 0.7, 0.2, 0.0],
            vec![0.0, 0.2, 0.6, 0.2],
        ],
        // wait
        vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ],
    ];
    let fast = vec![
        vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.4, 0.6, 0.0, 0.0],
            vec![0.0, 0.5, 0.5, 0.0],
        ],
        vec![
            vec![0.9, 0.1, 0.0, 0.0],
            vec![0.0, 0.9, 0.1, 0.0],
            vec![0.0, 0.0, 0.9, 0.1],
            vec![0.0, 0.0, 0.0, 1.0],
        ],
    ];
    DiscreteRiskMDP::new(
        vec![slow, fast],
        vec![
            vec![0.0, 0.0],
            vec![1.0, 0.5],
            vec![2.0, 1.0],
            vec![3.0, 1.5],
        ],
        vec![0.0, 6.0, 14.0, 24.0],
        3,
    )
    .expect("valid built-in instance")
}

/// Same chain as [`descent_instance`] with a zero terminal cost, so the terminal
/// cost cannot pay for any stage cost and `δ > 0`.
pub fn no_descent_instance() -> DiscreteRiskMDP {
    let mut m = descent_instance();
    m.terminal_cost = vec![0.0; m.n_states];
    m
}

pub fn builtin_instances() -> Vec<NamedInstance> {
    vec![
        NamedInstance {
            name: "strict-gap",
            mdp: strict_gap_instance(),
        },
        NamedInstance {
            name: "descent",
            mdp: descent_instance(),
        },
        NamedInstance {
            name: "no-descent",
            mdp: no_descent_instance(),
        },
    ]
}

/// Random instance within the joint-enumeration cap.
pub fn random_instance(rng: &mut RandomStream) -> DiscreteRiskMDP {
    let pick = |rng: &mut RandomStream, lo: usize, hi: usize| lo + (rng.next_u64() % (hi - lo + 1) as u64) as usize;
    let ns = pick(rng, 2, JOINT_MAX_STATES);
    let na = pick(rng, 1, JOINT_MAX_ACTIONS);
    let nt = pick(rng, 1, JOINT_MAX_THETAS);
    let h = pick(rng, 1, JOINT_MAX_HORIZON);
    let transitions = (0..nt)
        .map(|_| {
            (0..na)
                .map(|_| {
                    (0..ns)
                        .map(|_| {
                            // sparse-ish rows make the parameters disagree more
                            let raw: Vec<f64> = (0..ns)
                                .map(|_| {
                                    let u = rng.uniform();
                                    if u < 0.3 { 0.0 } else { u }
                                })
                                .collect();
                            let s: f64 = raw.iter().sum();
                            if s == 0.0 {
                                let mut r = vec![0.0; ns];
                                r[(rng.next_u64() % ns as u64) as usize] = 1.0;
                                r
                            } else {
                                raw.iter().map(|v| v / s).collect()
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let stage_cost = (0..ns).map(|_| (0..na).map(|_| rng.uniform()).collect()).collect();
    let terminal_cost = (0..ns).map(|_| 2.0 * rng.uniform()).collect();
    DiscreteRiskMDP::new(transitions, stage_cost, terminal_cost, h).expect("generated rows are normalized")
}
