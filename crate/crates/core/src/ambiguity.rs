//! Credible intervals and the forward-shrinking ambiguity box.

use crate::dynamics::ParamBox;
use crate::error::{Error, Result};
use crate::filter::{posterior_summary, ParticleSet};

/// Endpoint tolerance for the nestedness test.
pub const NEST_TOL: f64 = 1e-12;

/// Which credible-interval construction feeds the ambiguity set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum IntervalKind {
    #[default]
    EqualTail,
    HighestDensity,
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("credible level must lie in (0, 1), got {level}")))
    }
}

/// Equal-tail interval per dimension: `[q((1-l)/2), q((1+l)/2)]`.
pub fn credible_interval_eti(ps: &ParticleSet, level: f64) -> Result<ParamBox> {
    check_level(level)?;
    let s = posterior_summary(ps);
    let lo: Vec<f64> = (0..ps.dim()).map(|d| s.quantile(d, (1.0 - level) / 2.0)).collect();
    let hi: Vec<f64> = (0..ps.dim()).map(|d| s.quantile(d, (1.0 + level) / 2.0)).collect();
    ParamBox::new(&lo, &hi)
}

/// Shortest contiguous window of sorted samples carrying at least `level` of the
/// weight, per dimension. Ties go to the leftmost window.
pub fn credible_interval_hpdi(ps: &ParticleSet, level: f64) -> Result<ParamBox> {
    check_level(level)?;
    let s = posterior_summary(ps);
    let mut lo = Vec::with_capacity(ps.dim());
    let mut hi = Vec::with_capacity(ps.dim());
    for d in 0..ps.dim() {
        let (l, h) = shortest_window(&s.marginal(d), level);
        lo.push(l);
        hi.push(h);
    }
    ParamBox::new(&lo, &hi)
}

fn shortest_window(sorted: &[(f64, f64)], level: f64) -> (f64, f64) {
    let n = sorted.len();
    let mut best = (sorted[0].0, sorted[n - 1].0);
    let mut best_width = f64::INFINITY;
    let mut mass = 0.0;
    let mut j = 0;
    for i in 0..n {
        while j < n && mass < level - 1e-12 {
            mass += sorted[j].1;
            j += 1;
        }
        if mass < level - 1e-12 {
            break;
        }
        let width = sorted[j - 1].0 - sorted[i].0;
        if width < best_width {
            best_width = width;
            best = (sorted[i].0, sorted[j - 1].0);
        }
        mass -= sorted[i].1;
    }
    best
}

pub fn credible_interval(ps: &ParticleSet, level: f64, kind: IntervalKind) -> Result<ParamBox> {
    match kind {
        IntervalKind::EqualTail => credible_interval_eti(ps, level),
        IntervalKind::HighestDensity => credible_interval_hpdi(ps, level),
    }
}

/// Half the Euclidean diameter of a box.
pub fn radius(b: &ParamBox) -> f64 {
    0.5 * (0..b.dim()).map(|d| b.width(d).powi(2)).sum::<f64>().sqrt()
}

/// The time-varying ambiguity set `A_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmbiguitySet {
    pub bounds: ParamBox,
    pub step: usize,
    pub radius: f64,
}

impl AmbiguitySet {
    /// `A_0`: the first credible interval, unconditionally.
    pub fn initial(ci: ParamBox) -> Self {
        let radius = radius(&ci);
        Self {
            bounds: ci,
            step: 0,
            radius,
        }
    }

    /// Accept `ci` only if it nests inside the current box; otherwise keep the box.
    pub fn update(&self, ci: &ParamBox) -> Self {
        let bounds = if ci.is_subset_of(&self.bounds, NEST_TOL) {
            // Clamp the tolerance slack away so nesting holds exactly.
            let mut lo = ci.lo.clone();
            let mut hi = ci.hi.clone();
            self.bounds.clip(&mut lo);
            self.bounds.clip(&mut hi);
            ParamBox { lo, hi }
        } else {
            self.bounds.clone()
        };
        let radius = radius(&bounds);
        Self {
            bounds,
            step: self.step + 1,
            radius,
        }
    }
}

/// `prev = None` is the `k = 0` case.
pub fn update_ambiguity(prev: Option<&AmbiguitySet>, ci: ParamBox) -> AmbiguitySet {
    match prev {
        None => AmbiguitySet::initial(ci),
        Some(a) => a.update(&ci),
    }
}
