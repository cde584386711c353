//! Particle approximation of the parameter posterior.
//!
//! One filter step is: jitter the particles, reweight them by the transition
//! kernel of the newest observed transition, then resample by inverse transform.

use rayon::prelude::*;

use crate::dynamics::{log_transition_density, Control, ParamBox, State, SystemModel, Theta};
use crate::error::{Error, Result};
use crate::stream::RandomStream;

/// Weighted particles. Weights are non-negative and sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    pub thetas: Vec<Theta>,
    pub weights: Vec<f64>,
}

impl ParticleSet {
    /// Builds a set from explicit particles and (unnormalized) weights.
    pub fn new(thetas: Vec<Theta>, weights: Vec<f64>) -> Result<Self> {
        if thetas.is_empty() {
            return Err(Error::Empty("particle set"));
        }
        if thetas.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                what: "particle weights",
                expected: thetas.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("particle weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("particle weights sum to zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { thetas, weights })
    }

    pub fn equally_weighted(thetas: Vec<Theta>) -> Result<Self> {
        let n = thetas.len();
        Self::new(thetas, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.thetas[0].dim()
    }

    /// Effective sample size `1 / Σ w²`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// `n` equally weighted particles drawn uniformly over `param_box`.
pub fn init_particles(param_box: &ParamBox, n: usize, rng: &mut RandomStream) -> Result<ParticleSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("particle count must be >= 1".into()));
    }
    let thetas = (0..n)
        .map(|_| {
            Theta(
                (0..param_box.dim())
                    .map(|d| rng.uniform_in(param_box.lo[d], param_box.hi[d]))
                    .collect(),
            )
        })
        .collect();
    Ok(ParticleSet {
        thetas,
        weights: vec![1.0 / n as f64; n],
    })
}

/// Adds independent zero-mean Gaussian jitter to each particle, then clips to the box.
pub fn propagate(
    ps: &ParticleSet,
    jitter_std: &[f64],
    param_box: &ParamBox,
    rng: &mut RandomStream,
) -> ParticleSet {
    let thetas = ps
        .thetas
        .iter()
        .map(|th| {
            let mut next = th.clone();
            for (v, s) in next.0.iter_mut().zip(jitter_std) {
                if *s > 0.0 {
                    *v += s * rng.normal();
                }
            }
            param_box.clip(&mut next.0);
            next
        })
        .collect();
    ParticleSet {
        thetas,
        weights: ps.weights.clone(),
    }
}

/// Result of a likelihood reweighting.
#[derive(Clone, Debug)]
pub struct Reweighted {
    pub particles: ParticleSet,
    /// Every likelihood underflowed; weights fell back to uniform.
    pub degenerate: bool,
}

/// Reweights by the transition kernel of `(x_prev, u_prev) → x_new`.
///
/// Computed in the log domain with max-subtraction, which only differs from the
/// direct ratio where the direct ratio would underflow.
pub fn reweight(
    ps: &ParticleSet,
    x_prev: &State,
    u_prev: &Control,
    x_new: &State,
    model: &SystemModel,
) -> Result<Reweighted> {
    let log_lik: Vec<f64> = ps
        .thetas
        .par_iter()
        .map(|th| log_transition_density(model, x_new, x_prev, u_prev, th))
        .collect::<Result<_>>()?;
    let log_post: Vec<f64> = log_lik
        .iter()
        .zip(&ps.weights)
        .map(|(l, w)| if *w > 0.0 { l + w.ln() } else { f64::NEG_INFINITY })
        .collect();
    let max = log_post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        log::warn!("all particle likelihoods vanished; falling back to uniform weights");
        let n = ps.len();
        return Ok(Reweighted {
            particles: ParticleSet {
                thetas: ps.thetas.clone(),
                weights: vec![1.0 / n as f64; n],
            },
            degenerate: true,
        });
    }
    let raw: Vec<f64> = log_post.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(Reweighted {
        particles: ParticleSet {
            thetas: ps.thetas.clone(),
            weights: raw.into_iter().map(|w| w / total).collect(),
        },
        degenerate: false,
    })
}

/// Inverse-transform resampling: draw `s ~ U(0, 1]` and pick the particle whose
/// cumulative-weight bracket contains it. Output is equally weighted.
pub fn resample_inverse_transform(ps: &ParticleSet, rng: &mut RandomStream) -> ParticleSet {
    let n = ps.len();
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in &ps.weights {
        acc += w;
        cum.push(acc);
    }
    let last_positive = ps.weights.iter().rposition(|w| *w > 0.0).unwrap_or(n - 1);
    let thetas = (0..n)
        .map(|_| {
            let s = 1.0 - rng.uniform();
            let j = cum.partition_point(|c| *c < s).min(last_positive);
            ps.thetas[j].clone()
        })
        .collect();
    ParticleSet {
        thetas,
        weights: vec![1.0 / n as f64; n],
    }
}

/// Weighted mean plus per-dimension sorted marginals for quantile queries.
#[derive(Clone, Debug)]
pub struct PosteriorSummary {
    pub mean: Theta,
    // Per dim: (value, cumulative weight) sorted by value.
    marginals: Vec<Vec<(f64, f64)>>,
}

/// Slack on cumulative-weight comparisons; weights of 1/N do not sum exactly.
const CUM_TOL: f64 = 1e-12;

impl PosteriorSummary {
    /// Smallest value in dim `d` whose cumulative weight reaches `p`.
    pub fn quantile(&self, d: usize, p: f64) -> f64 {
        let m = &self.marginals[d];
        let idx = m.partition_point(|(_, c)| *c < p - CUM_TOL).min(m.len() - 1);
        m[idx].0
    }

    /// Sorted `(value, weight)` pairs for dim `d`.
    pub fn marginal(&self, d: usize) -> Vec<(f64, f64)> {
        let m = &self.marginals[d];
        let mut prev = 0.0;
        m.iter()
            .map(|(v, c)| {
                let w = c - prev;
                prev = *c;
                (*v, w)
            })
            .collect()
    }

    /// Weighted standard deviation in dim `d`.
    pub fn std(&self, d: usize) -> f64 {
        let mu = self.mean[d];
        self.marginal(d)
            .iter()
            .map(|(v, w)| w * (v - mu) * (v - mu))
            .sum::<f64>()
            .max(0.0)
            .sqrt()
    }
}

pub fn posterior_summary(ps: &ParticleSet) -> PosteriorSummary {
    let dim = ps.dim();
    let mut mean = Theta::zeros(dim);
    for (th, w) in ps.thetas.iter().zip(&ps.weights) {
        for d in 0..dim {
            mean.0[d] += w * th[d];
        }
    }
    let marginals = (0..dim)
        .map(|d| {
            let mut pairs: Vec<(f64, f64)> =
                ps.thetas.iter().zip(&ps.weights).map(|(th, w)| (th[d], *w)).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut acc = 0.0;
            for p in pairs.iter_mut() {
                acc += p.1;
                p.1 = acc;
            }
            pairs
        })
        .collect();
    PosteriorSummary { mean, marginals }
}

/// Filter settings.
#[derive(Clone, Debug)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Per-dim jitter std. `None` means 0.005 × box width.
    pub jitter_std: Option<Vec<f64>>,
    /// Resample only when ESS / N drops below this fraction. `None` resamples every step.
    pub ess_threshold: Option<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_particles: 1000,
            jitter_std: None,
            ess_threshold: None,
        }
    }
}

impl FilterConfig {
    pub fn jitter_for(&self, param_box: &ParamBox) -> Vec<f64> {
        match &self.jitter_std {
            Some(j) => j.clone(),
            None => (0..param_box.dim()).map(|d| 0.005 * param_box.width(d)).collect(),
        }
    }
}

/// What happened during one [`ParticleFilter::update`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateReport {
    pub degenerate: bool,
    pub resampled: bool,
}

/// Stateful wrapper running the propagate → reweight → resample cycle.
#[derive(Clone, Debug)]
pub struct ParticleFilter {
    particles: ParticleSet,
    param_box: ParamBox,
    jitter: Vec<f64>,
    ess_threshold: Option<f64>,
}

impl ParticleFilter {
    pub fn new(param_box: &ParamBox, config: &FilterConfig, rng: &mut RandomStream) -> Result<Self> {
        let jitter = config.jitter_for(param_box);
        if jitter.len() != param_box.dim() || jitter.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidArgument("jitter_std must be >= 0 per parameter dim".into()));
        }
        Ok(Self {
            particles: init_particles(param_box, config.n_particles, rng)?,
            param_box: param_box.clone(),
            jitter,
            ess_threshold: config.ess_threshold,
        })
    }

    /// Starts from explicit particles instead of the uniform prior.
    pub fn from_particles(
        particles: ParticleSet,
        param_box: &ParamBox,
        jitter: Vec<f64>,
        ess_threshold: Option<f64>,
    ) -> Self {
        Self {
            particles,
            param_box: param_box.clone(),
            jitter,
            ess_threshold,
        }
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.particles
    }

    pub fn update(
        &mut self,
        x_prev: &State,
        u_prev: &Control,
        x_new: &State,
        model: &SystemModel,
        rng: &mut RandomStream,
    ) -> Result<UpdateReport> {
        let jittered = propagate(&self.particles, &self.jitter, &self.param_box, rng);
        let rw = reweight(&jittered, x_prev, u_prev, x_new, model)?;
        let n = rw.particles.len() as f64;
        let resample = match self.ess_threshold {
            None => true,
            Some(frac) => rw.particles.ess() < frac * n,
        };
        self.particles = if resample {
            resample_inverse_transform(&rw.particles, rng)
        } else {
            rw.particles
        };
        Ok(UpdateReport {
            degenerate: rw.degenerate,
            resampled: resample,
        })
    }
}
