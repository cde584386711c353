//! System models, fixed-step RK4 discretization and the Gaussian transition kernel.
//!
//! Angles are never wrapped: the swing-up target sits at `q = π` and the angle
//! constraint is counted on the unwrapped value.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Inline storage for the short vectors used throughout (state dim ≤ 4 for the
/// built-in models).
pub type Vector = SmallVec<[f64; 4]>;

macro_rules! vector_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(pub Vector);

        impl $name {
            pub fn new(values: &[f64]) -> Self {
                Self(Vector::from_slice(values))
            }

            pub fn zeros(dim: usize) -> Self {
                Self(SmallVec::from_elem(0.0, dim))
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }
        }

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(SmallVec::from_vec(v))
            }
        }

        impl<const D: usize> From<[f64; D]> for $name {
            fn from(v: [f64; D]) -> Self {
                Self(Vector::from_slice(&v))
            }
        }
    };
}

vector_newtype!(
    /// System state. Cart-pole order: `p, p_dot, q, q_dot`.
    State
);
vector_newtype!(
    /// Control input (scalar force for the cart-pole).
    Control
);
vector_newtype!(
    /// Model parameters. Cart-pole: pole mass `m` and pole length `ℓ`.
    Theta
);

/// Axis-aligned box `[lo_d, hi_d]` over some vector space (parameters mostly).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBox {
    pub lo: Vector,
    pub hi: Vector,
}

impl ParamBox {
    pub fn new(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                what: "box bounds",
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.is_empty() {
            return Err(Error::Empty("box has zero dimensions"));
        }
        for (d, (l, h)) in lo.iter().zip(hi).enumerate() {
            if !l.is_finite() || !h.is_finite() {
                return Err(Error::InvalidArgument(format!("box dim {d} has non-finite bound")));
            }
            if l > h {
                return Err(Error::InvalidArgument(format!(
                    "box dim {d} is empty: lo {l} > hi {h}"
                )));
            }
        }
        Ok(Self {
            lo: Vector::from_slice(lo),
            hi: Vector::from_slice(hi),
        })
    }

    /// Degenerate box holding a single point.
    pub fn point(p: &[f64]) -> Self {
        Self {
            lo: Vector::from_slice(p),
            hi: Vector::from_slice(p),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, d: usize) -> f64 {
        self.hi[d] - self.lo[d]
    }

    pub fn center(&self) -> Theta {
        Theta(self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect())
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .enumerate()
                .all(|(d, v)| *v >= self.lo[d] && *v <= self.hi[d])
    }

    /// `self ⊆ other` with an absolute per-endpoint tolerance.
    pub fn is_subset_of(&self, other: &ParamBox, tol: f64) -> bool {
        self.dim() == other.dim()
            && (0..self.dim()).all(|d| {
                self.lo[d] >= other.lo[d] - tol && self.hi[d] <= other.hi[d] + tol
            })
    }

    pub fn clip(&self, p: &mut [f64]) {
        for (d, v) in p.iter_mut().enumerate() {
            *v = v.clamp(self.lo[d], self.hi[d]);
        }
    }
}

/// Continuous-time drift `ẋ = f(x, u, θ)`.
pub trait Drift: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn theta_dim(&self) -> usize;
    /// Writes the state derivative into `dx`.
    fn eval(&self, x: &[f64], u: &[f64], theta: &[f64], dx: &mut [f64]) -> Result<()>;
}

/// Cart-pole with known cart mass and unknown pole mass/length.
#[derive(Clone, Copy, Debug)]
pub struct CartPole {
    pub cart_mass: f64,
    pub gravity: f64,
}

impl Default for CartPole {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            gravity: 9.81,
        }
    }
}

impl Drift for CartPole {
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn theta_dim(&self) -> usize {
        2
    }

    fn eval(&self, x: &[f64], u: &[f64], theta: &[f64], dx: &mut [f64]) -> Result<()> {
        if x.iter().chain(u).chain(theta).any(|v| !v.is_finite()) {
            return Err(Error::Domain("cart-pole input is not finite".into()));
        }
        let (m, l) = (theta[0], theta[1]);
        if m <= 0.0 || l <= 0.0 {
            return Err(Error::Domain(format!(
                "cart-pole needs m > 0 and l > 0, got m={m}, l={l}"
            )));
        }
        let big_m = self.cart_mass;
        let g = self.gravity;
        let (q, q_dot) = (x[2], x[3]);
        let (s, c) = q.sin_cos();
        let f = u[0];
        let denom = big_m + m * s * s;
        dx[0] = x[1];
        dx[1] = (f + m * s * (l * q_dot * q_dot + g * c)) / denom;
        dx[2] = q_dot;
        dx[3] = (-f * c - m * l * q_dot * q_dot * c * s - (big_m + m) * g * s) / (l * denom);
        Ok(())
    }
}

/// Scalar test system `ẋ = a·x + θ·u` with a known pole `a` and unknown input gain θ.
///
/// The one-step mean is linear in θ, which makes the Bayes update conjugate under a
/// Gaussian prior.
#[derive(Clone, Copy, Debug)]
pub struct ScalarGain {
    pub a: f64,
}

impl Drift for ScalarGain {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn theta_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64], u: &[f64], theta: &[f64], dx: &mut [f64]) -> Result<()> {
        dx[0] = self.a * x[0] + theta[0] * u[0];
        Ok(())
    }
}

/// Scalar system `ẋ = θ₀·x + θ₁·u` with both coefficients unknown.
///
/// At `u = 0` only θ₀ is visible, at `x = 0` only θ₁: the blind-zone test bed.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScalarAffine;

impl Drift for ScalarAffine {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn theta_dim(&self) -> usize {
        2
    }
    fn eval(&self, x: &[f64], u: &[f64], theta: &[f64], dx: &mut [f64]) -> Result<()> {
        dx[0] = theta[0] * x[0] + theta[1] * u[0];
        Ok(())
    }
}

type DriftFn = dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync;

/// Drift backed by a closure; handy for test ODEs.
#[derive(Clone)]
pub struct FnDrift {
    dims: (usize, usize, usize),
    f: Arc<DriftFn>,
}

impl FnDrift {
    pub fn new(
        state_dim: usize,
        control_dim: usize,
        theta_dim: usize,
        f: impl Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dims: (state_dim, control_dim, theta_dim),
            f: Arc::new(f),
        }
    }
}

impl fmt::Debug for FnDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnDrift").field("dims", &self.dims).finish()
    }
}

impl Drift for FnDrift {
    fn state_dim(&self) -> usize {
        self.dims.0
    }
    fn control_dim(&self) -> usize {
        self.dims.1
    }
    fn theta_dim(&self) -> usize {
        self.dims.2
    }
    fn eval(&self, x: &[f64], u: &[f64], theta: &[f64], dx: &mut [f64]) -> Result<()> {
        (self.f)(x, u, theta, dx);
        Ok(())
    }
}

/// Discrete-time stochastic model: drift, RK4 step, additive Gaussian noise.
#[derive(Clone, Debug)]
pub struct SystemModel {
    pub drift: Arc<dyn Drift>,
    /// Per-dimension process-noise std, applied once per discrete step.
    pub noise_std: Vector,
    pub dt: f64,
    pub param_box: ParamBox,
    pub control_bounds: ParamBox,
}

impl SystemModel {
    pub fn new(
        drift: Arc<dyn Drift>,
        noise_std: &[f64],
        dt: f64,
        param_box: ParamBox,
        control_bounds: ParamBox,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if noise_std.len() != drift.state_dim() {
            return Err(Error::DimensionMismatch {
                what: "noise_std",
                expected: drift.state_dim(),
                got: noise_std.len(),
            });
        }
        if noise_std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("noise_std must be finite and >= 0".into()));
        }
        if param_box.dim() != drift.theta_dim() {
            return Err(Error::DimensionMismatch {
                what: "param_box",
                expected: drift.theta_dim(),
                got: param_box.dim(),
            });
        }
        if control_bounds.dim() != drift.control_dim() {
            return Err(Error::DimensionMismatch {
                what: "control_bounds",
                expected: drift.control_dim(),
                got: control_bounds.dim(),
            });
        }
        Ok(Self {
            drift,
            noise_std: Vector::from_slice(noise_std),
            dt,
            param_box,
            control_bounds,
        })
    }

    /// Cart-pole with the same σ_w on all four state dimensions and `u ∈ [-10, 10]`.
    pub fn cartpole(sigma_w: f64, dt: f64, param_box: ParamBox) -> Result<Self> {
        Self::new(
            Arc::new(CartPole::default()),
            &[sigma_w; 4],
            dt,
            param_box,
            ParamBox::new(&[-10.0], &[10.0])?,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.drift.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.drift.control_dim()
    }

    pub fn theta_dim(&self) -> usize {
        self.drift.theta_dim()
    }

    pub fn rk4_step(&self, x: &State, u: &Control, theta: &Theta) -> Result<State> {
        rk4_step(self.drift.as_ref(), x, u, theta, self.dt)
    }

    pub fn step_stochastic(
        &self,
        x: &State,
        u: &Control,
        theta: &Theta,
        noise: &[f64],
    ) -> Result<State> {
        step_stochastic(self, x, u, theta, noise)
    }

    pub fn clip_control(&self, u: &mut [f64]) {
        self.control_bounds.clip(u);
    }
}

/// Cart-pole derivative with `M = 1 kg`, `g = 9.81 m/s²`.
pub fn cartpole_rhs(state: &State, u: &Control, theta: &Theta) -> Result<State> {
    let mut dx = State::zeros(4);
    CartPole::default().eval(state, u, theta, &mut dx.0)?;
    Ok(dx)
}

/// Classical RK4 step with `u` held over the step.
pub fn rk4_step(drift: &dyn Drift, x: &State, u: &Control, theta: &Theta, dt: f64) -> Result<State> {
    let n = drift.state_dim();
    if x.dim() != n {
        return Err(Error::DimensionMismatch {
            what: "state",
            expected: n,
            got: x.dim(),
        });
    }
    if u.dim() != drift.control_dim() {
        return Err(Error::DimensionMismatch {
            what: "control",
            expected: drift.control_dim(),
            got: u.dim(),
        });
    }
    if theta.dim() != drift.theta_dim() {
        return Err(Error::DimensionMismatch {
            what: "theta",
            expected: drift.theta_dim(),
            got: theta.dim(),
        });
    }
    let zero: Vector = SmallVec::from_elem(0.0, n);
    let (mut k1, mut k2, mut k3, mut k4) = (zero.clone(), zero.clone(), zero.clone(), zero.clone());
    let mut tmp = zero;

    drift.eval(x, u, theta, &mut k1)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    drift.eval(&tmp, u, theta, &mut k2)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    drift.eval(&tmp, u, theta, &mut k3)?;
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    drift.eval(&tmp, u, theta, &mut k4)?;
    for i in 0..n {
        tmp[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    if tmp.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("RK4 step produced a non-finite state".into()));
    }
    Ok(State(tmp))
}

/// RK4 step plus `noise_std ⊙ noise`. The caller owns the noise draw.
pub fn step_stochastic(
    model: &SystemModel,
    x: &State,
    u: &Control,
    theta: &Theta,
    noise: &[f64],
) -> Result<State> {
    if noise.len() != model.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "noise",
            expected: model.state_dim(),
            got: noise.len(),
        });
    }
    let mut next = model.rk4_step(x, u, theta)?;
    for ((v, s), w) in next.0.iter_mut().zip(&model.noise_std).zip(noise) {
        *v += s * w;
    }
    Ok(next)
}

/// Log of [`transition_density`]; `-inf` never occurs for finite inputs.
pub fn log_transition_density(
    model: &SystemModel,
    x_next: &State,
    x: &State,
    u: &Control,
    theta: &Theta,
) -> Result<f64> {
    if let Some(d) = model.noise_std.iter().position(|s| *s == 0.0) {
        return Err(Error::DegenerateKernel(d));
    }
    if x_next.dim() != model.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "x_next",
            expected: model.state_dim(),
            got: x_next.dim(),
        });
    }
    let mean = model.rk4_step(x, u, theta)?;
    let log_2pi = (2.0 * PI).ln();
    let mut acc = 0.0;
    for ((xn, mu), s) in x_next.iter().zip(mean.iter()).zip(&model.noise_std) {
        let z = (xn - mu) / s;
        acc += -0.5 * z * z - s.ln() - 0.5 * log_2pi;
    }
    Ok(acc)
}

/// Density of `x_next` under one stochastic step from `(x, u)` with parameter θ:
/// a product of independent Gaussians centred at the RK4 mean.
pub fn transition_density(
    model: &SystemModel,
    x_next: &State,
    x: &State,
    u: &Control,
    theta: &Theta,
) -> Result<f64> {
    Ok(log_transition_density(model, x_next, x, u, theta)?.exp())
}
