//! Numeric instruments for identifiability, consistency and stability.
//!
//! Blind zones are groups of candidate parameters whose likelihood functions are
//! linearly dependent at a context `(x, u)`; data from that context cannot tell
//! them apart. Combining contexts intersects the zones, and a candidate set whose
//! combined region is empty is identifiable from those contexts.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::dynamics::{
    transition_density, Control, ParamBox, ScalarAffine, ScalarGain, State, SystemModel, Theta,
};
use crate::error::{Error, Result};
use crate::filter::{posterior_summary, FilterConfig, ParticleFilter, ParticleSet};
use crate::stream::RandomStream;

/// Observation grid with a fixed cell volume (discretized measure).
#[derive(Clone, Debug)]
pub struct ObservationGrid {
    pub points: Vec<State>,
    pub cell_volume: f64,
}

impl ObservationGrid {
    /// `n` points along coordinate `dim` spanning `center ± half_width`; other
    /// coordinates are held at `center`.
    pub fn slice(center: &State, dim: usize, half_width: f64, n: usize) -> Result<Self> {
        if n < 2 || dim >= center.dim() || !(half_width > 0.0) {
            return Err(Error::InvalidArgument("grid slice needs n >= 2, a valid dim and width > 0".into()));
        }
        let step = 2.0 * half_width / (n - 1) as f64;
        let points = (0..n)
            .map(|i| {
                let mut p = center.clone();
                p.0[dim] = center[dim] - half_width + step * i as f64;
                p
            })
            .collect();
        Ok(Self {
            points,
            cell_volume: step,
        })
    }
}

/// Rows are observation grid points, columns candidate parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodMatrix {
    pub values: DMatrix<f64>,
    pub cell_volume: f64,
}

impl LikelihoodMatrix {
    pub fn from_columns(columns: &[Vec<f64>], cell_volume: f64) -> Result<Self> {
        if columns.len() < 2 || columns[0].len() < 2 {
            return Err(Error::InvalidArgument("likelihood matrix needs >= 2 rows and >= 2 columns".into()));
        }
        let rows = columns[0].len();
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::InvalidArgument("ragged likelihood columns".into()));
        }
        if columns.iter().flatten().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("likelihood entries must be >= 0".into()));
        }
        Ok(Self {
            values: DMatrix::from_fn(rows, columns.len(), |r, c| columns[c][r]),
            cell_volume,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// Vertical stack: the same candidates observed under both contexts.
    pub fn stack(&self, other: &LikelihoodMatrix) -> Result<LikelihoodMatrix> {
        if self.n_cols() != other.n_cols() {
            return Err(Error::DimensionMismatch {
                what: "stacked likelihood columns",
                expected: self.n_cols(),
                got: other.n_cols(),
            });
        }
        let (r1, r2) = (self.n_rows(), other.n_rows());
        let values = DMatrix::from_fn(r1 + r2, self.n_cols(), |r, c| {
            if r < r1 {
                self.values[(r, c)]
            } else {
                other.values[(r - r1, c)]
            }
        });
        Ok(LikelihoodMatrix {
            values,
            cell_volume: self.cell_volume,
        })
    }

    fn columns(&self, cols: &[usize]) -> DMatrix<f64> {
        // Pad with zero rows so the SVD returns a full right basis.
        let rows = self.n_rows().max(cols.len());
        DMatrix::from_fn(rows, cols.len(), |r, c| {
            if r < self.n_rows() {
                self.values[(r, cols[c])]
            } else {
                0.0
            }
        })
    }
}

/// Entry `(g, i)` = `q(grid_g; θ_i, x, u) · cell volume`.
pub fn likelihood_matrix(
    thetas: &[Theta],
    context: (&State, &Control),
    grid: &ObservationGrid,
    model: &SystemModel,
) -> Result<LikelihoodMatrix> {
    if thetas.len() < 2 {
        return Err(Error::InvalidArgument("likelihood matrix needs >= 2 thetas".into()));
    }
    let (x, u) = context;
    let columns = thetas
        .iter()
        .map(|th| {
            grid.points
                .iter()
                .map(|g| Ok(transition_density(model, g, x, u, th)? * grid.cell_volume))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    LikelihoodMatrix::from_columns(&columns, grid.cell_volume)
}

/// Disjoint blind zones over candidate indices; each zone has at least two members.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlindRegion {
    pub zones: Vec<Vec<usize>>,
}

impl BlindRegion {
    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    fn from_groups(groups: Vec<Vec<usize>>) -> Self {
        let mut zones = merge_overlapping(groups);
        zones.retain(|z| z.len() >= 2);
        Self { zones }
    }
}

/// Exhaustive minimal-dependent-set search up to this many columns.
pub const EXHAUSTIVE_MAX_COLS: usize = 6;

fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    m.clone().svd(false, false).singular_values.iter().copied().collect()
}

fn is_dependent(lm: &LikelihoodMatrix, cols: &[usize], tol: f64) -> bool {
    if cols.len() > lm.n_rows() {
        return true;
    }
    let sv = singular_values(&lm.columns(cols));
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    max == 0.0 || min < tol * max
}

fn merge_overlapping(groups: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    let mut merged: Vec<Vec<usize>> = Vec::new();
    for g in groups {
        let mut cur = g;
        loop {
            let hit = merged.iter().position(|m| m.iter().any(|i| cur.contains(i)));
            match hit {
                Some(p) => {
                    let m = merged.swap_remove(p);
                    cur.extend(m);
                }
                None => break,
            }
        }
        cur.sort_unstable();
        cur.dedup();
        merged.push(cur);
    }
    merged.sort();
    merged
}

/// Linear-dependency analysis of the likelihood columns.
///
/// Dependence means the smallest singular value of the column subset falls below
/// `tol` times its largest. Up to [`EXHAUSTIVE_MAX_COLS`] columns the minimal
/// dependent subsets are enumerated exactly; above that, supports of numeric
/// null vectors are used. Overlapping sets are merged into disjoint zones.
pub fn blind_regions(lm: &LikelihoodMatrix, tol: f64) -> Result<BlindRegion> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be > 0, got {tol}")));
    }
    let all: Vec<usize> = (0..lm.n_cols()).collect();
    Ok(BlindRegion::from_groups(dependent_groups(lm, &all, tol)))
}

fn dependent_groups(lm: &LikelihoodMatrix, cols: &[usize], tol: f64) -> Vec<Vec<usize>> {
    if cols.len() < 2 {
        return Vec::new();
    }
    if cols.len() <= EXHAUSTIVE_MAX_COLS {
        let n = cols.len();
        let mut masks: Vec<u32> = (1u32..(1 << n)).filter(|m| m.count_ones() >= 2).collect();
        masks.sort_by_key(|m| m.count_ones());
        let mut circuits: Vec<u32> = Vec::new();
        for m in masks {
            if circuits.iter().any(|c| c & m == *c) {
                continue; // contains a smaller dependent set: not minimal
            }
            let subset: Vec<usize> = (0..n).filter(|i| m >> i & 1 == 1).map(|i| cols[i]).collect();
            if is_dependent(lm, &subset, tol) {
                circuits.push(m);
            }
        }
        circuits
            .into_iter()
            .map(|m| (0..n).filter(|i| m >> i & 1 == 1).map(|i| cols[i]).collect())
            .collect()
    } else {
        let svd = lm.columns(cols).svd(false, true);
        let v_t = svd.v_t.expect("right singular vectors requested");
        let max = svd.singular_values.iter().copied().fold(0.0, f64::max);
        let mut groups = Vec::new();
        for (k, s) in svd.singular_values.iter().enumerate() {
            if max == 0.0 || *s < tol * max {
                let row = v_t.row(k);
                let peak = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let support: Vec<usize> = (0..cols.len())
                    .filter(|i| row[*i].abs() > 1e-8 * peak)
                    .map(|i| cols[i])
                    .collect();
                if support.len() >= 2 {
                    groups.push(support);
                }
            }
        }
        groups
    }
}

/// Intersects the zones of two regions and keeps the parts that stay dependent
/// in the stacked matrix.
pub fn combine_regions(
    br1: &BlindRegion,
    br2: &BlindRegion,
    lm_joint: &LikelihoodMatrix,
    tol: f64,
) -> Result<BlindRegion> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be > 0, got {tol}")));
    }
    let n = lm_joint.n_cols();
    if br1.zones.iter().chain(&br2.zones).flatten().any(|i| *i >= n) {
        return Err(Error::InvalidArgument(format!("zone index out of range for {n} candidates")));
    }
    let mut groups = Vec::new();
    for z1 in &br1.zones {
        for z2 in &br2.zones {
            let cand: Vec<usize> = z1.iter().copied().filter(|i| z2.contains(i)).collect();
            if cand.len() >= 2 {
                groups.extend(dependent_groups(lm_joint, &cand, tol));
            }
        }
    }
    Ok(BlindRegion::from_groups(groups))
}

/// Discretized relative entropy `Σ p log(p / q) · Δ`, with `0 log 0 = 0`.
/// Returns `+∞` when `q` vanishes where `p` does not.
pub fn kl_step(p_true: &[f64], p_marginal: &[f64], cell_volume: f64) -> Result<f64> {
    if p_true.len() != p_marginal.len() {
        return Err(Error::DimensionMismatch {
            what: "density grids",
            expected: p_true.len(),
            got: p_marginal.len(),
        });
    }
    for (name, p) in [("p_true", p_true), ("p_marginal", p_marginal)] {
        if p.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("{name} has negative entries")));
        }
        let mass = p.iter().sum::<f64>() * cell_volume;
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("{name} integrates to {mass}, not 1")));
        }
    }
    let mut acc = 0.0;
    for (p, q) in p_true.iter().zip(p_marginal) {
        if *p > 0.0 {
            if *q == 0.0 {
                return Ok(f64::INFINITY);
            }
            acc += p * (p / q).ln();
        }
    }
    Ok((acc * cell_volume).max(0.0))
}

/// One step of a descent audit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DescentStep {
    pub delta_v: f64,
    pub neg_cost: f64,
    pub violated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescentReport {
    pub steps: Vec<DescentStep>,
    pub violation_rate: f64,
}

impl DescentReport {
    /// Violation rate over steps `k` in `range` (clamped).
    pub fn violation_rate_in(&self, range: std::ops::Range<usize>) -> f64 {
        let end = range.end.min(self.steps.len());
        let start = range.start.min(end);
        if start == end {
            return 0.0;
        }
        self.steps[start..end].iter().filter(|s| s.violated).count() as f64 / (end - start) as f64
    }
}

/// Flags `k` where `V_{k+1} - V_k > -l_k + slack`.
pub fn descent_audit(values: &[f64], stage_costs: &[f64], slack: f64) -> Result<DescentReport> {
    if values.len() != stage_costs.len() {
        return Err(Error::DimensionMismatch {
            what: "descent audit",
            expected: values.len(),
            got: stage_costs.len(),
        });
    }
    if values.len() < 2 {
        return Err(Error::InvalidArgument("descent audit needs at least two values".into()));
    }
    let steps: Vec<DescentStep> = values
        .windows(2)
        .zip(stage_costs)
        .map(|(w, l)| {
            let delta_v = w[1] - w[0];
            DescentStep {
                delta_v,
                neg_cost: -l,
                violated: delta_v > -l + slack,
            }
        })
        .collect();
    let violation_rate = steps.iter().filter(|s| s.violated).count() as f64 / steps.len() as f64;
    Ok(DescentReport { steps, violation_rate })
}

// ---------------------------------------------------------------------------
// Built-in identifiability scenarios
// ---------------------------------------------------------------------------

/// Three candidates for `ẋ = a·x + b·u`: `(a, b) = (-1, 1), (-1, 2), (-2, 1)`.
///
/// At `η₁ = (x=1, u=0)` only `a` is visible, so candidates 0 and 1 coincide.
/// At `η₂ = (x=0, u=1)` the one-step means all differ.
#[derive(Clone, Debug)]
pub struct BlindScenario {
    pub model: SystemModel,
    pub thetas: Vec<Theta>,
    pub eta1: (State, Control),
    pub eta2: (State, Control),
    /// Index of the true parameter in `thetas`.
    pub truth: usize,
}

impl BlindScenario {
    pub fn new() -> Self {
        let model = SystemModel::new(
            Arc::new(ScalarAffine),
            &[0.01],
            0.05,
            ParamBox::new(&[-2.5, 0.5], &[-0.5, 2.5]).expect("static box"),
            ParamBox::new(&[-5.0], &[5.0]).expect("static box"),
        )
        .expect("static model");
        Self {
            model,
            thetas: vec![Theta::new(&[-1.0, 1.0]), Theta::new(&[-1.0, 2.0]), Theta::new(&[-2.0, 1.0])],
            eta1: (State::new(&[1.0]), Control::new(&[0.0])),
            eta2: (State::new(&[0.0]), Control::new(&[1.0])),
            truth: 0,
        }
    }

    /// Likelihood matrix at a context over a ±8σ grid around the truth's mean.
    pub fn matrix_at(&self, ctx: &(State, Control)) -> Result<LikelihoodMatrix> {
        let mean = self.model.rk4_step(&ctx.0, &ctx.1, &self.thetas[self.truth])?;
        let sigma = self.model.noise_std[0];
        // wide enough to cover every candidate's mean
        let spread = self
            .thetas
            .iter()
            .map(|t| self.model.rk4_step(&ctx.0, &ctx.1, t).map(|m| (m[0] - mean[0]).abs()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let grid = ObservationGrid::slice(&mean, 0, spread + 8.0 * sigma, 801)?;
        likelihood_matrix(&self.thetas, (&ctx.0, &ctx.1), &grid, &self.model)
    }
}

impl Default for BlindScenario {
    fn default() -> Self {
        Self::new()
    }
}

/// Blind regions at each context and their combination.
#[derive(Clone, Debug)]
pub struct BlindReport {
    pub at_eta1: BlindRegion,
    pub at_eta2: BlindRegion,
    pub combined: BlindRegion,
}

pub fn blind_scenario_report(sc: &BlindScenario, tol: f64) -> Result<BlindReport> {
    let m1 = sc.matrix_at(&sc.eta1)?;
    let m2 = sc.matrix_at(&sc.eta2)?;
    let at_eta1 = blind_regions(&m1, tol)?;
    let at_eta2 = blind_regions(&m2, tol)?;
    let combined = combine_regions(&at_eta1, &at_eta2, &m1.stack(&m2)?, tol)?;
    Ok(BlindReport {
        at_eta1,
        at_eta2,
        combined,
    })
}

/// Which contexts the designed input sequence visits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisitSchedule {
    Alternating,
    OnlyEta1,
}

/// Posterior mass on every candidate after `steps` observed transitions from the
/// scheduled contexts. Particles sit on the finite candidate set (no jitter) and
/// resample only when ESS falls below half, so exact ties are not broken by
/// resampling drift.
pub fn candidate_posterior(
    sc: &BlindScenario,
    schedule: VisitSchedule,
    steps: usize,
    n_particles: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let root = RandomStream::new(seed);
    let mut init = root.split_named("init");
    let mut obs = root.split_named("observations");
    let mut frng = root.split_named("filter");
    let k = sc.thetas.len();
    let thetas = (0..n_particles)
        .map(|_| sc.thetas[(init.next_u64() % k as u64) as usize].clone())
        .collect();
    let ps = ParticleSet::equally_weighted(thetas)?;
    let mut filter = ParticleFilter::from_particles(ps, &sc.model.param_box, vec![0.0; 2], Some(0.5));
    let truth = &sc.thetas[sc.truth];
    for step in 0..steps {
        let ctx = match schedule {
            VisitSchedule::OnlyEta1 => &sc.eta1,
            VisitSchedule::Alternating if step % 2 == 0 => &sc.eta1,
            VisitSchedule::Alternating => &sc.eta2,
        };
        let x_new = sc.model.step_stochastic(&ctx.0, &ctx.1, truth, &[obs.normal()])?;
        filter.update(&ctx.0, &ctx.1, &x_new, &sc.model, &mut frng)?;
    }
    let ps = filter.particles();
    Ok(sc
        .thetas
        .iter()
        .map(|c| {
            ps.thetas
                .iter()
                .zip(&ps.weights)
                .filter(|(t, _)| *t == c)
                .map(|(_, w)| w)
                .sum()
        })
        .collect())
}

/// Identifiable scalar system `ẋ = -x + θ·u` with `θ* = 1.5` on the prior box `[0.5, 3]`.
pub fn identifiable_scalar_model() -> SystemModel {
    SystemModel::new(
        Arc::new(ScalarGain { a: -1.0 }),
        &[0.01],
        0.05,
        ParamBox::new(&[0.5], &[3.0]).expect("static box"),
        ParamBox::new(&[-5.0], &[5.0]).expect("static box"),
    )
    .expect("static model")
}

/// Persistently exciting input: two incommensurate sinusoids.
pub fn exciting_input(k: usize) -> f64 {
    let t = k as f64;
    2.0 * (0.37 * t).sin() + (1.3 * t).cos()
}

/// Posterior std of θ after each step on the identifiable scalar system.
/// Element 0 is the prior std.
pub fn posterior_std_trace(steps: usize, n_particles: usize, seed: u64) -> Result<Vec<f64>> {
    let model = identifiable_scalar_model();
    let theta_true = Theta::new(&[1.5]);
    let root = RandomStream::new(seed);
    let mut noise = root.split_named("disturbance");
    let mut frng = root.split_named("filter");
    let cfg = FilterConfig {
        n_particles,
        ..FilterConfig::default()
    };
    let mut filter = ParticleFilter::new(&model.param_box, &cfg, &mut frng)?;
    let mut trace = vec![posterior_summary(filter.particles()).std(0)];
    let mut x = State::new(&[0.0]);
    for k in 0..steps {
        let u = Control::new(&[exciting_input(k)]);
        let x_new = model.step_stochastic(&x, &u, &theta_true, &[noise.normal()])?;
        filter.update(&x, &u, &x_new, &model, &mut frng)?;
        trace.push(posterior_summary(filter.particles()).std(0));
        x = x_new;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Oracle: a subset is dependent iff its rank (by Gaussian elimination with
    // partial pivoting) is below its size.
    fn rank(cols: &[Vec<f64>]) -> usize {
        let rows = cols[0].len();
        let mut m: Vec<Vec<f64>> = (0..rows).map(|r| cols.iter().map(|c| c[r]).collect()).collect();
        let ncols = cols.len();
        let mut rank = 0;
        for c in 0..ncols {
            let pivot = (rank..rows).max_by(|a, b| m[*a][c].abs().total_cmp(&m[*b][c].abs()));
            let Some(p) = pivot else { break };
            if m[p][c].abs() < 1e-9 {
                continue;
            }
            m.swap(rank, p);
            for r in 0..rows {
                if r != rank {
                    let f = m[r][c] / m[rank][c];
                    for cc in 0..ncols {
                        m[r][cc] -= f * m[rank][cc];
                    }
                }
            }
            rank += 1;
        }
        rank
    }

    fn oracle_zones(cols: &[Vec<f64>]) -> Vec<Vec<usize>> {
        let n = cols.len();
        let mut circuits: Vec<u32> = Vec::new();
        let mut masks: Vec<u32> = (1u32..(1 << n)).filter(|m| m.count_ones() >= 2).collect();
        masks.sort_by_key(|m| m.count_ones());
        for m in masks {
            if circuits.iter().any(|c| c & m == *c) {
                continue;
            }
            let sub: Vec<Vec<f64>> = (0..n).filter(|i| m >> i & 1 == 1).map(|i| cols[i].clone()).collect();
            if rank(&sub) < sub.len() {
                circuits.push(m);
            }
        }
        merge_overlapping(
            circuits
                .into_iter()
                .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
                .collect(),
        )
    }

    fn random_cols(rng: &mut RandomStream, n: usize, rows: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..rows).map(|_| rng.uniform()).collect()).collect()
    }

    #[test]
    fn full_rank_has_no_zones() {
        let mut rng = RandomStream::new(1);
        let cols = random_cols(&mut rng, 5, 12);
        let lm = LikelihoodMatrix::from_columns(&cols, 1.0).unwrap();
        assert!(blind_regions(&lm, 1e-8).unwrap().is_empty());
    }

    #[test]
    fn duplicate_pair_is_one_zone() {
        let mut rng = RandomStream::new(2);
        let mut cols = random_cols(&mut rng, 5, 12);
        cols[4] = cols[1].clone();
        let lm = LikelihoodMatrix::from_columns(&cols, 1.0).unwrap();
        let br = blind_regions(&lm, 1e-8).unwrap();
        assert_eq!(br.zones, vec![vec![1, 4]]);
        assert_eq!(br.zones, oracle_zones(&cols));
    }

    #[test]
    fn convex_combination_is_one_zone() {
        let mut rng = RandomStream::new(3);
        let mut cols = random_cols(&mut rng, 3, 10);
        cols[2] = cols[0].iter().zip(&cols[1]).map(|(a, b)| 0.5 * (a + b)).collect();
        let lm = LikelihoodMatrix::from_columns(&cols, 1.0).unwrap();
        let br = blind_regions(&lm, 1e-8).unwrap();
        assert_eq!(br.zones, vec![vec![0, 1, 2]]);
        assert_eq!(br.zones, oracle_zones(&cols));
    }

    #[test]
    fn exhaustive_matches_oracle_on_random_structures() {
        let mut rng = RandomStream::new(4);
        for _ in 0..30 {
            let n = 3 + (rng.next_u64() % 4) as usize;
            let mut cols = random_cols(&mut rng, n, 8);
            // plant a duplicate or a combination
            let i = (rng.next_u64() % n as u64) as usize;
            let j = (i + 1) % n;
            let k = (i + 2) % n;
            if rng.uniform() < 0.5 {
                cols[k] = cols[i].clone();
            } else {
                cols[k] = cols[i].iter().zip(&cols[j]).map(|(a, b)| 0.3 * a + 0.7 * b).collect();
            }
            let lm = LikelihoodMatrix::from_columns(&cols, 1.0).unwrap();
            assert_eq!(blind_regions(&lm, 1e-8).unwrap().zones, oracle_zones(&cols));
        }
    }

    #[test]
    fn greedy_path_finds_duplicates() {
        let mut rng = RandomStream::new(5);
        let mut cols = random_cols(&mut rng, 9, 20);
        cols[7] = cols[2].clone();
        let lm = LikelihoodMatrix::from_columns(&cols, 1.0).unwrap();
        assert_eq!(blind_regions(&lm, 1e-8).unwrap().zones, vec![vec![2, 7]]);
    }

    #[test]
    fn tolerance_must_be_positive() {
        let lm = LikelihoodMatrix::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap();
        assert!(blind_regions(&lm, 0.0).is_err());
    }

    #[test]
    fn combine_rules() {
        let mut rng = RandomStream::new(6);
        let mut cols = random_cols(&mut rng, 4, 10);
        cols[1] = cols[0].clone();
        let lm = LikelihoodMatrix::from_columns(&cols, 1.0).unwrap();
        let joint = lm.stack(&lm).unwrap();
        let br = blind_regions(&lm, 1e-8).unwrap();
        assert_eq!(combine_regions(&br, &BlindRegion::default(), &joint, 1e-8).unwrap(), BlindRegion::default());
        assert_eq!(combine_regions(&br, &br, &joint, 1e-8).unwrap(), br);

        let a = BlindRegion { zones: vec![vec![0, 1]] };
        let b = BlindRegion { zones: vec![vec![1, 2]] };
        assert!(combine_regions(&a, &b, &joint, 1e-8).unwrap().is_empty());
        let bad = BlindRegion { zones: vec![vec![0, 9]] };
        assert!(combine_regions(&a, &bad, &joint, 1e-8).is_err());
    }

    #[test]
    fn combine_drops_zones_resolved_by_second_context() {
        // Context 1: columns 0, 1 identical. Context 2: they differ.
        let mut rng = RandomStream::new(7);
        let mut c1 = random_cols(&mut rng, 3, 8);
        c1[1] = c1[0].clone();
        let c2 = random_cols(&mut rng, 3, 8);
        let m1 = LikelihoodMatrix::from_columns(&c1, 1.0).unwrap();
        let m2 = LikelihoodMatrix::from_columns(&c2, 1.0).unwrap();
        let br1 = blind_regions(&m1, 1e-8).unwrap();
        // Pretend context 2 were blind on the same pair; the stacked matrix decides.
        let claimed = BlindRegion { zones: vec![vec![0, 1]] };
        let joint = m1.stack(&m2).unwrap();
        assert!(combine_regions(&br1, &claimed, &joint, 1e-8).unwrap().is_empty());
    }

    #[test]
    fn likelihood_columns_integrate_to_one() {
        let model = identifiable_scalar_model();
        let x = State::new(&[0.3]);
        let u = Control::new(&[1.0]);
        let thetas = vec![Theta::new(&[1.0]), Theta::new(&[2.0])];
        let mean = model.rk4_step(&x, &u, &Theta::new(&[1.5])).unwrap();
        let grid = ObservationGrid::slice(&mean, 0, 0.05 + 8.0 * 0.01, 2001).unwrap();
        let lm = likelihood_matrix(&thetas, (&x, &u), &grid, &model).unwrap();
        for c in 0..2 {
            let s: f64 = lm.values.column(c).iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "column {c} sums to {s}");
        }
        let same = likelihood_matrix(&[thetas[0].clone(), thetas[0].clone()], (&x, &u), &grid, &model).unwrap();
        assert_eq!(same.values.column(0), same.values.column(1));
        assert!(likelihood_matrix(&thetas[..1], (&x, &u), &grid, &model).is_err());
    }

    #[test]
    fn cartpole_lengths_are_distinguishable() {
        let model = SystemModel::cartpole(0.01, 0.05, ParamBox::new(&[0.05, 0.2], &[0.5, 1.0]).unwrap()).unwrap();
        let x = State::new(&[0.0, 0.0, 0.5, 1.0]);
        let u = Control::new(&[2.0]);
        // Close lengths so the off-slice coordinates of both means stay within a sigma.
        let thetas = vec![Theta::new(&[0.1, 0.5]), Theta::new(&[0.1, 0.51])];
        let mean = model.rk4_step(&x, &u, &thetas[0]).unwrap();
        let other = model.rk4_step(&x, &u, &thetas[1]).unwrap();
        for d in 0..3 {
            assert!((mean[d] - other[d]).abs() < 0.01, "dim {d}: {} vs {}", mean[d], other[d]);
        }
        let grid = ObservationGrid::slice(&mean, 3, 0.2, 401).unwrap();
        let lm = likelihood_matrix(&thetas, (&x, &u), &grid, &model).unwrap();
        let tol = 1e-8;
        let diff = (0..lm.n_rows())
            .map(|r| (lm.values[(r, 0)] - lm.values[(r, 1)]).abs())
            .fold(0.0, f64::max);
        assert!(diff > 10.0 * tol);
        assert!(blind_regions(&lm, tol).unwrap().is_empty());
    }

    #[test]
    fn kl_values() {
        let dx = 0.001;
        let grid: Vec<f64> = (0..16001).map(|i| -8.0 + i as f64 * dx).collect();
        let gauss = |mu: f64| -> Vec<f64> {
            grid.iter()
                .map(|x| (-(x - mu) * (x - mu) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt())
                .collect()
        };
        // Truncation at ±8σ from mean 1 loses a little mass; renormalize both.
        let norm = |v: Vec<f64>| {
            let s: f64 = v.iter().sum::<f64>() * dx;
            v.into_iter().map(|p| p / s).collect::<Vec<_>>()
        };
        let p = norm(gauss(0.0));
        let q = norm(gauss(1.0));
        assert_eq!(kl_step(&p, &p, dx).unwrap(), 0.0);
        assert!((kl_step(&p, &q, dx).unwrap() - 0.5).abs() < 1e-3);

        let mut z = q.clone();
        z[8000] = 0.0;
        let s: f64 = z.iter().sum::<f64>() * dx;
        let z: Vec<f64> = z.into_iter().map(|v| v / s).collect();
        assert_eq!(kl_step(&p, &z, dx).unwrap(), f64::INFINITY);
        assert!(kl_step(&p, &q[..10], dx).is_err());
    }

    #[test]
    fn kl_pinsker() {
        let mut rng = RandomStream::new(10);
        for _ in 0..200 {
            let n = 20;
            let mk = |rng: &mut RandomStream| {
                let v: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-3).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let (p, q) = (mk(&mut rng), mk(&mut rng));
            let kl = kl_step(&p, &q, 1.0).unwrap();
            let tv = 0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>();
            assert!(kl >= 0.0);
            assert!(kl >= 0.5 * (2.0 * tv).powi(2) / 4.0 * 2.0 - 1e-12 || kl >= 2.0 * tv * tv - 1e-12);
        }
    }

    #[test]
    fn descent_audit_cases() {
        let costs = [1.0, 2.0, 0.5, 1.0];
        let dec = [10.0, 8.0, 5.0, 4.0];
        let r = descent_audit(&dec, &costs, 2.0).unwrap();
        assert_eq!(r.violation_rate, 0.0);
        let flat = [3.0; 4];
        let r = descent_audit(&flat, &costs, 0.0).unwrap();
        assert!(r.steps.iter().all(|s| s.violated));
        assert_eq!(r.violation_rate, 1.0);
        assert!(descent_audit(&flat, &costs[..3], 0.0).is_err());
        assert!(descent_audit(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn blind_scenario_structure() {
        let sc = BlindScenario::new();
        let rep = blind_scenario_report(&sc, 1e-8).unwrap();
        assert_eq!(rep.at_eta1.zones, vec![vec![0, 1]]);
        assert!(rep.combined.is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn zones_disjoint_and_combine_commutes(seed in 0u64..5000) {
                let mut rng = RandomStream::new(seed);
                let n = 3 + (rng.next_u64() % 4) as usize;
                let mut c1 = random_cols(&mut rng, n, 6);
                let mut c2 = random_cols(&mut rng, n, 6);
                c1[1] = c1[0].clone();
                c2[2] = c2[0].iter().zip(&c2[1]).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
                if rng.uniform() < 0.5 { c2[1] = c2[0].clone(); }
                let m1 = LikelihoodMatrix::from_columns(&c1, 1.0).unwrap();
                let m2 = LikelihoodMatrix::from_columns(&c2, 1.0).unwrap();
                let b1 = blind_regions(&m1, 1e-8).unwrap();
                let b2 = blind_regions(&m2, 1e-8).unwrap();
                for br in [&b1, &b2] {
                    for (i, z) in br.zones.iter().enumerate() {
                        prop_assert!(z.len() >= 2);
                        for w in &br.zones[i + 1..] {
                            prop_assert!(z.iter().all(|k| !w.contains(k)));
                        }
                    }
                }
                let joint = m1.stack(&m2).unwrap();
                prop_assert_eq!(
                    combine_regions(&b1, &b2, &joint, 1e-8).unwrap(),
                    combine_regions(&b2, &b1, &joint, 1e-8).unwrap()
                );
            }

            #[test]
            fn kl_nonnegative_zero_iff_equal(seed in 0u64..5000) {
                let mut rng = RandomStream::new(seed);
                let mk = |rng: &mut RandomStream| {
                    let v: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
                    let s: f64 = v.iter().sum();
                    v.into_iter().map(|x| x / s).collect::<Vec<_>>()
                };
                let (p, q) = (mk(&mut rng), mk(&mut rng));
                prop_assert!(kl_step(&p, &q, 1.0).unwrap() > 0.0);
                prop_assert_eq!(kl_step(&p, &p, 1.0).unwrap(), 0.0);
            }
        }
    }
}
