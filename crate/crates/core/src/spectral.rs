//! Averaged matrix `E[W]`, its spectral gap, and canonical-path
//! (Poincaré) lower bounds on that gap.
//!
//! `W` for one inner phase has `1/m` on each route's block and identity rows
//! for nodes left out. Routes are disjoint, so `W` and its mean are
//! symmetric and doubly stochastic, and the chain they define has the
//! uniform stationary distribution.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::channel::{RandomStream, SPECTRAL_STREAM};
use crate::graph::{Graph, SquareIndex, Topology};
use crate::protocol::{InnerRoundOutcome, Route};
use crate::sim;
use crate::{Error, Result};

/// Default Monte-Carlo sample count for graphs without a closed form.
pub const DEFAULT_MC_SAMPLES: usize = 10_000;

const SYMMETRY_TOL: f64 = 1e-9;
const STOCHASTIC_TOL: f64 = 1e-9;
// accumulator entries allowed across all chunks of a Monte-Carlo estimate
const MC_MEMORY_BUDGET: usize = 32_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    ClosedForm,
    MonteCarlo { samples: usize },
}

impl Provenance {
    pub fn samples(&self) -> Option<usize> {
        match self {
            Provenance::ClosedForm => None,
            Provenance::MonteCarlo { samples } => Some(*samples),
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::ClosedForm => f.write_str("closed-form"),
            Provenance::MonteCarlo { samples } => write!(f, "monte-carlo({samples})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedMatrix {
    pub entries: DMatrix<f64>,
    pub provenance: Provenance,
}

impl AveragedMatrix {
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let a = &self.entries;
        (a - a.transpose()).amax()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.entries
            .row_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Symmetric, rows summing to one, entries in `[0, 1]`, all within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let a = &self.entries;
        if a.nrows() != a.ncols() || a.nrows() == 0 {
            return Err(Error::InvalidMatrix(
                "averaged matrix must be square and non-empty".into(),
            ));
        }
        if self.max_asymmetry() > tol {
            return Err(Error::InvalidMatrix(format!(
                "asymmetry {} exceeds {tol}",
                self.max_asymmetry()
            )));
        }
        if self.max_row_sum_error() > tol {
            return Err(Error::InvalidMatrix(format!(
                "row sums deviate from 1 by {}",
                self.max_row_sum_error()
            )));
        }
        if a.iter().any(|&x| x < -tol || x > 1.0 + tol) {
            return Err(Error::InvalidMatrix("entries outside [0, 1]".into()));
        }
        Ok(())
    }
}

fn add_route_block(acc: &mut DMatrix<f64>, participation: &mut [usize], route: &Route) {
    let w = 1.0 / route.len() as f64;
    for &a in &route.nodes {
        participation[a] += 1;
        for &b in &route.nodes {
            acc[(a, b)] += w;
        }
    }
}

/// Realized averaging matrix of one inner phase.
pub fn realized_matrix(outcome: &InnerRoundOutcome, n: usize) -> DMatrix<f64> {
    routes_matrix(&outcome.routes, n)
}

pub fn routes_matrix(routes: &[Route], n: usize) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(n, n);
    let mut part = vec![0usize; n];
    for route in routes {
        add_route_block(&mut w, &mut part, route);
    }
    for (u, &p) in part.iter().enumerate() {
        if p == 0 {
            w[(u, u)] = 1.0;
        }
    }
    w
}

/// Exact `E[W]` for the cycle (`11^T / n`) and the grid (`(P_row + P_col) / 2`).
pub fn expected_matrix_closed_form(g: &Graph) -> Result<AveragedMatrix> {
    let n = g.n();
    let entries = match g.topology() {
        Topology::Cycle => DMatrix::from_element(n, n, 1.0 / n as f64),
        Topology::Grid2d => {
            let m = g.m() as f64;
            DMatrix::from_fn(n, n, |u, w| {
                let (a, b) = (g.square_of(u), g.square_of(w));
                match (a.i == b.i, a.j == b.j) {
                    (true, true) => 1.0 / m,
                    (true, false) | (false, true) => 0.5 / m,
                    (false, false) => 0.0,
                }
            })
        }
        Topology::Rgg => {
            return Err(Error::UnsupportedTopology(
                "rgg has no closed-form averaged matrix; use Monte-Carlo".into(),
            ))
        }
    };
    Ok(AveragedMatrix {
        entries,
        provenance: Provenance::ClosedForm,
    })
}

fn chunk_count(n: usize, samples: usize) -> usize {
    let by_memory = (MC_MEMORY_BUDGET / (n * n).max(1)).max(1);
    by_memory.min(16).min(samples).max(1)
}

/// Average of `samples` realized matrices, then symmetrized.
///
/// Work is split into a fixed number of chunks, each with its own sibling
/// stream of `rng`, and chunks are summed in index order, so the result does
/// not depend on thread count.
pub fn expected_matrix_monte_carlo<S>(
    g: &Graph,
    sampler: S,
    samples: usize,
    rng: &RandomStream,
) -> Result<AveragedMatrix>
where
    S: Fn(&Graph, &mut RandomStream) -> Result<Vec<Route>> + Sync + Send,
{
    if samples == 0 {
        return Err(Error::invalid("samples must be >= 1"));
    }
    let n = g.n();
    let chunks = chunk_count(n, samples);
    let per = samples / chunks;
    let extra = samples % chunks;
    let sampler = &sampler;
    let partials = sim::map_indexed(chunks, move |c| -> Result<DMatrix<f64>> {
        let count = per + usize::from(c < extra);
        let mut stream = rng.sibling(SPECTRAL_STREAM + c as u64);
        let mut acc = DMatrix::zeros(n, n);
        let mut part = vec![0usize; n];
        for _ in 0..count {
            for route in sampler(g, &mut stream)? {
                add_route_block(&mut acc, &mut part, &route);
            }
        }
        for (u, &p) in part.iter().enumerate() {
            acc[(u, u)] += (count - p) as f64;
        }
        Ok(acc)
    });
    let mut total = DMatrix::zeros(n, n);
    for p in partials {
        total += p?;
    }
    total /= samples as f64;
    let sym = (&total + total.transpose()) * 0.5;
    Ok(AveragedMatrix {
        entries: sym,
        provenance: Provenance::MonteCarlo { samples },
    })
}

/// Monte-Carlo estimate with at least `floor` samples, doubling the count
/// until every hop of `paths` has positive estimated probability.
pub fn expected_matrix_covering(
    g: &Graph,
    paths: &CanonicalPathSet,
    floor: usize,
    max_samples: usize,
    rng: &RandomStream,
) -> Result<AveragedMatrix> {
    if paths.n() != g.n() {
        return Err(Error::InvalidPathSet(
            "path set does not match graph".into(),
        ));
    }
    let mut samples = floor.max(1);
    loop {
        let avg = expected_matrix_monte_carlo(g, protocol_sampler, samples, rng)?;
        let covered = paths.pairs().all(|(u, w)| {
            paths
                .path(u, w)
                .windows(2)
                .all(|h| avg.entries[(h[0], h[1])] > 0.0)
        });
        if covered {
            return Ok(avg);
        }
        if samples >= max_samples {
            return Err(Error::InvalidPathSet(format!(
                "{samples} samples leave canonical path edges unobserved"
            )));
        }
        samples = (samples * 2).min(max_samples);
    }
}

/// Routes of one inner phase as drawn by the protocol.
pub fn protocol_sampler(g: &Graph, rng: &mut RandomStream) -> Result<Vec<Route>> {
    crate::protocol::sample_routes(g, rng).map(|(_, routes)| routes)
}

/// Eigenvalues of a symmetric matrix in descending order.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// `1 - (second largest eigenvalue of E[W])`, clamped to `[0, 2]`.
pub fn lambda2_gap(avg: &AveragedMatrix) -> Result<f64> {
    if avg.n() < 2 {
        return Err(Error::InvalidMatrix("need at least 2 nodes".into()));
    }
    let asym = avg.max_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::InvalidMatrix(format!(
            "matrix not symmetric (max |A - A^T| = {asym})"
        )));
    }
    let ev = symmetric_eigenvalues(&avg.entries);
    Ok((1.0 - ev[1]).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathFamily {
    GridCases12,
    RggCases123,
    CycleTrivial,
}

/// One path per ordered pair `(u, w)`, `u != w`, of at most two hops.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalPathSet {
    n: usize,
    family: PathFamily,
    // intermediate node of the two-hop path, row-major over (u, w)
    via: Vec<Option<usize>>,
}

impl CanonicalPathSet {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn family(&self) -> PathFamily {
        self.family
    }

    pub fn via(&self, u: usize, w: usize) -> Option<usize> {
        self.via[u * self.n + w]
    }

    pub fn path(&self, u: usize, w: usize) -> Vec<usize> {
        match self.via(u, w) {
            Some(z) => vec![u, z, w],
            None => vec![u, w],
        }
    }

    /// Ordered pairs `(u, w)` with `u != w`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n;
        (0..n).flat_map(move |u| (0..n).filter(move |&w| w != u).map(move |w| (u, w)))
    }

    fn build(
        n: usize,
        family: PathFamily,
        mut via: impl FnMut(usize, usize) -> Option<usize>,
    ) -> Self {
        let mut table = vec![None; n * n];
        for u in 0..n {
            for w in 0..n {
                if u != w {
                    table[u * n + w] = via(u, w);
                }
            }
        }
        Self {
            n,
            family,
            via: table,
        }
    }
}

pub fn canonical_paths_cycle(g: &Graph) -> Result<CanonicalPathSet> {
    if g.topology() != Topology::Cycle {
        return Err(Error::UnsupportedTopology(format!(
            "expected cycle, got {}",
            g.topology()
        )));
    }
    Ok(CanonicalPathSet::build(
        g.n(),
        PathFamily::CycleTrivial,
        |_, _| None,
    ))
}

/// Same row or column: direct hop. Otherwise through the rectangle corner
/// sharing `w`'s column and `u`'s row.
pub fn canonical_paths_grid(g: &Graph) -> Result<CanonicalPathSet> {
    if g.topology() != Topology::Grid2d {
        return Err(Error::UnsupportedTopology(format!(
            "expected grid2d, got {}",
            g.topology()
        )));
    }
    Ok(CanonicalPathSet::build(
        g.n(),
        PathFamily::GridCases12,
        |u, w| {
            let (a, b) = (g.square_of(u), g.square_of(w));
            if a.i == b.i || a.j == b.j {
                None
            } else {
                Some(g.nodes_in_square(SquareIndex::new(b.i, a.j))[0])
            }
        },
    ))
}

/// Square-level analogue of the grid paths. The intermediate node inside a
/// square is the one whose in-square label is `label(u) + label(w) mod a`,
/// `a` the smallest occupancy. Pairs inside one square detour through the
/// right neighbour square (left one in the last column).
pub fn canonical_paths_rgg(g: &Graph) -> Result<CanonicalPathSet> {
    if g.topology() != Topology::Rgg {
        return Err(Error::UnsupportedTopology(format!(
            "expected rgg, got {}",
            g.topology()
        )));
    }
    if !g.is_regular() {
        return Err(Error::ProtocolPrecondition(
            "rgg must have every square occupied".into(),
        ));
    }
    let (a_min, _) = g.occupancy_range();
    let labels: Vec<usize> = (0..g.n()).map(|u| g.label_in_square(u)).collect();
    let m = g.m();
    Ok(CanonicalPathSet::build(
        g.n(),
        PathFamily::RggCases123,
        |u, w| {
            let (a, b) = (g.square_of(u), g.square_of(w));
            let pick = |sq: SquareIndex| g.nodes_in_square(sq)[(labels[u] + labels[w]) % a_min];
            if a == b {
                let i = if a.i == m { a.i - 1 } else { a.i + 1 };
                Some(pick(SquareIndex::new(i, a.j)))
            } else if a.i == b.i || a.j == b.j {
                None
            } else {
                Some(pick(SquareIndex::new(b.i, a.j)))
            }
        },
    ))
}

pub fn canonical_paths(g: &Graph) -> Result<CanonicalPathSet> {
    match g.topology() {
        Topology::Cycle => canonical_paths_cycle(g),
        Topology::Grid2d => canonical_paths_grid(g),
        Topology::Rgg => canonical_paths_rgg(g),
    }
}

/// Number of paths through each directed edge.
pub fn edge_path_counts(paths: &CanonicalPathSet) -> HashMap<(usize, usize), usize> {
    let mut counts = HashMap::new();
    for (u, w) in paths.pairs() {
        for hop in paths.path(u, w).windows(2) {
            *counts.entry((hop[0], hop[1])).or_insert(0) += 1;
        }
    }
    counts
}

/// Poincaré coefficient
/// `rho = max_e sum_{paths through e} |gamma_uw| pi(u) pi(w)` with
/// `|gamma_uw| = sum_hops 1 / (pi(a) W_ab)` and `pi = 1/n`.
/// `1 - lambda_{n-1}(W) >= 1 / rho`.
pub fn poincare_coefficient(avg: &AveragedMatrix, paths: &CanonicalPathSet) -> Result<f64> {
    let n = avg.n();
    if paths.n() != n {
        return Err(Error::InvalidPathSet(format!(
            "path set covers {} nodes, matrix has {n}",
            paths.n()
        )));
    }
    if avg.max_row_sum_error() > STOCHASTIC_TOL || avg.max_asymmetry() > SYMMETRY_TOL {
        return Err(Error::InvalidMatrix(
            "uniform stationary distribution requires a symmetric stochastic matrix".into(),
        ));
    }
    let pi = 1.0 / n as f64;
    let mut load: HashMap<(usize, usize), f64> = HashMap::new();
    for (u, w) in paths.pairs() {
        let path = paths.path(u, w);
        let mut length = 0.0;
        for hop in path.windows(2) {
            let p = avg.entries[(hop[0], hop[1])];
            if p.is_nan() || p <= 0.0 {
                return Err(Error::InvalidPathSet(format!(
                    "path {u}->{w} uses edge ({},{}) with zero probability",
                    hop[0], hop[1]
                )));
            }
            length += 1.0 / (pi * p);
        }
        let weight = length * pi * pi;
        for hop in path.windows(2) {
            *load.entry((hop[0], hop[1])).or_insert(0.0) += weight;
        }
    }
    Ok(load.into_values().fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub topology: Topology,
    pub n: usize,
    pub lambda2: f64,
    pub poincare_rho: f64,
    pub poincare_bound: f64,
    pub provenance: String,
    pub samples: Option<usize>,
    /// (min, max) nodes per square; random geometric graphs only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub occupancy: Option<(usize, usize)>,
}

/// Gap and canonical-path bound for `g`. Random geometric graphs use
/// [`expected_matrix_covering`] with `samples` as the floor.
pub fn spectral_report(g: &Graph, samples: usize, rng: &RandomStream) -> Result<SpectralReport> {
    let paths = canonical_paths(g)?;
    let avg = match g.topology() {
        Topology::Rgg => {
            expected_matrix_covering(g, &paths, samples, samples.saturating_mul(64), rng)?
        }
        _ => expected_matrix_closed_form(g)?,
    };
    let lambda2 = lambda2_gap(&avg)?;
    let rho = poincare_coefficient(&avg, &paths)?;
    Ok(SpectralReport {
        topology: g.topology(),
        n: g.n(),
        lambda2,
        poincare_rho: rho,
        poincare_bound: 1.0 / rho,
        provenance: avg.provenance.to_string(),
        samples: avg.provenance.samples(),
        occupancy: (g.topology() == Topology::Rgg).then(|| g.occupancy_range()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::NoiseModel;
    use crate::graph::{build_cycle, build_grid, build_rgg};
    use crate::protocol::{self, run_inner_phase, DisseminationMode};

    // Cyclic Jacobi rotations; independent of the nalgebra solver.
    fn jacobi_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
        let n = a.nrows();
        let mut a = a.clone();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)].powi(2))
                .sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    #[test]
    fn jacobi_oracle_grid_m4_gap_is_half() {
        let g = build_grid(4).unwrap();
        let w = expected_matrix_closed_form(&g).unwrap();
        let ev = jacobi_eigenvalues(&w.entries);
        assert!((1.0 - ev[1] - 0.5).abs() < 1e-10);
        assert!((lambda2_gap(&w).unwrap() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn cycle_gap_is_one() {
        for n in 3..=32 {
            let w = expected_matrix_closed_form(&build_cycle(n).unwrap()).unwrap();
            assert!((lambda2_gap(&w).unwrap() - 1.0).abs() < 1e-10, "n={n}");
        }
        let w = expected_matrix_closed_form(&build_cycle(5).unwrap()).unwrap();
        assert!(w.entries.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn grid_gap_is_half_and_matches_oracle() {
        for m in 2..=10 {
            let w = expected_matrix_closed_form(&build_grid(m).unwrap()).unwrap();
            w.validate(1e-12).unwrap();
            let gap = lambda2_gap(&w).unwrap();
            assert!((gap - 0.5).abs() < 1e-10, "m={m}: {gap}");
            if m <= 6 {
                let ev = jacobi_eigenvalues(&w.entries);
                assert!((1.0 - ev[1] - gap).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_has_no_gap() {
        let w = AveragedMatrix {
            entries: DMatrix::identity(6, 6),
            provenance: Provenance::ClosedForm,
        };
        assert_eq!(lambda2_gap(&w).unwrap(), 0.0);
    }

    #[test]
    fn asymmetric_rejected() {
        let mut e = DMatrix::identity(3, 3);
        e[(0, 1)] = 0.3;
        let w = AveragedMatrix {
            entries: e,
            provenance: Provenance::ClosedForm,
        };
        assert!(matches!(lambda2_gap(&w), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn grid_closed_form_entries() {
        let g = build_grid(3).unwrap();
        let w = expected_matrix_closed_form(&g).unwrap().entries;
        assert!((w[(0, 1)] - 1.0 / 6.0).abs() < 1e-15);
        assert!((w[(0, 3)] - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(w[(0, 4)], 0.0);
        assert!((w[(4, 4)] - 1.0 / 3.0).abs() < 1e-15);
        let rgg = build_rgg(200, 2.0, &mut RandomStream::new(1, 0)).unwrap();
        assert!(matches!(
            expected_matrix_closed_form(&rgg),
            Err(Error::UnsupportedTopology(_))
        ));
    }

    #[test]
    fn realized_matrices() {
        let c = build_cycle(4).unwrap();
        let out = run_inner_phase(
            &c,
            &[0.0; 4],
            &NoiseModel::noiseless(),
            DisseminationMode::AggregateNoise,
            &mut RandomStream::new(0, 0),
        )
        .unwrap();
        let w = realized_matrix(&out, 4);
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let g = build_grid(2).unwrap();
        let mut rng = RandomStream::new(3, 0);
        loop {
            let out = run_inner_phase(
                &g,
                &[0.0; 4],
                &NoiseModel::noiseless(),
                DisseminationMode::AggregateNoise,
                &mut rng,
            )
            .unwrap();
            if out.direction.zeta() == -1 {
                let w = realized_matrix(&out, 4);
                let expect = DMatrix::from_row_slice(
                    4,
                    4,
                    &[
                        0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.5,
                        0.5,
                    ],
                );
                assert_eq!(w, expect);
                break;
            }
        }
    }

    #[test]
    fn realized_matrix_is_symmetric_stochastic_block_projector() {
        let g = build_rgg(200, 2.0, &mut RandomStream::new(2, 0)).unwrap();
        let mut rng = RandomStream::new(4, 0);
        for _ in 0..20 {
            let out = run_inner_phase(
                &g,
                &vec![0.0; g.n()],
                &NoiseModel::noiseless(),
                DisseminationMode::AggregateNoise,
                &mut rng,
            )
            .unwrap();
            let w = realized_matrix(&out, g.n());
            assert_eq!(w, w.transpose());
            for r in w.row_iter() {
                assert!((r.sum() - 1.0).abs() < 1e-12);
            }
            assert!(((&w * &w) - &w).amax() < 1e-12);
        }
    }

    #[test]
    fn monte_carlo_against_closed_form() {
        let g = build_grid(3).unwrap();
        let exact = expected_matrix_closed_form(&g).unwrap();
        let root = RandomStream::new(5, 0);
        let mc = expected_matrix_monte_carlo(&g, protocol_sampler, 10_000, &root).unwrap();
        mc.validate(1e-9).unwrap();
        assert_eq!(mc.provenance, Provenance::MonteCarlo { samples: 10_000 });
        assert!((&mc.entries - &exact.entries).amax() <= 0.02);

        let c = build_cycle(6).unwrap();
        let one = expected_matrix_monte_carlo(&c, protocol_sampler, 1, &root).unwrap();
        assert!((&one.entries - expected_matrix_closed_form(&c).unwrap().entries).amax() < 1e-15);
        assert!(expected_matrix_monte_carlo(&c, protocol_sampler, 0, &root).is_err());
    }

    #[test]
    fn grid_monte_carlo_is_direction_mixture() {
        // Grid routes are fixed given the direction, so the estimate is
        // p * P_row + (1 - p) * P_col for the empirical horizontal share p.
        let m = 4;
        let g = build_grid(m).unwrap();
        let samples = 4_000;
        let mc =
            expected_matrix_monte_carlo(&g, protocol_sampler, samples, &RandomStream::new(50, 0))
                .unwrap();
        let p = mc.entries[(0, 1)] * m as f64;
        let q = mc.entries[(0, m)] * m as f64;
        assert!((p + q - 1.0).abs() < 1e-12);
        assert!(
            (p - 0.5).abs() < 4.0 * (0.25 / samples as f64).sqrt(),
            "p={p}"
        );
        let row = protocol::Direction::Horizontal;
        let col = protocol::Direction::Vertical;
        let blocks = |d: protocol::Direction| {
            let routes: Vec<Route> = (1..=m)
                .map(|lane| Route {
                    nodes: (1..=m)
                        .map(|k| g.nodes_in_square(d.square(lane, k))[0])
                        .collect(),
                })
                .collect();
            routes_matrix(&routes, g.n())
        };
        let expect = blocks(row) * p + blocks(col) * q;
        assert!((&mc.entries - expect).amax() < 1e-12);
    }

    #[test]
    fn monte_carlo_error_halves_when_samples_quadruple() {
        let g = build_grid(4).unwrap();
        let exact = expected_matrix_closed_form(&g).unwrap().entries;
        let mean_err = |samples: usize| -> f64 {
            (0..128u64)
                .map(|s| {
                    let mc = expected_matrix_monte_carlo(
                        &g,
                        protocol_sampler,
                        samples,
                        &RandomStream::new(900 + s, 0),
                    )
                    .unwrap();
                    (&mc.entries - &exact).amax()
                })
                .sum::<f64>()
                / 128.0
        };
        let ratio = mean_err(1_000) / mean_err(4_000);
        assert!((1.4..2.8).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn covering_estimate_reaches_every_path_edge() {
        let g = build_rgg(200, 2.0, &mut RandomStream::new(11, 0)).unwrap();
        let paths = canonical_paths_rgg(&g).unwrap();
        let avg =
            expected_matrix_covering(&g, &paths, 500, 1 << 20, &RandomStream::new(12, 0)).unwrap();
        let samples = avg.provenance.samples().unwrap();
        assert!(samples >= 500 && (samples / 500).is_power_of_two());
        assert!(poincare_coefficient(&avg, &paths).is_ok());
        assert!(expected_matrix_covering(&g, &paths, 1, 1, &RandomStream::new(12, 0)).is_err());
    }

    // Exact E[W] for an RGG from occupancies: nodes in distinct squares of a
    // common row share a route with probability 1/(2 n_u n_w).
    fn rgg_exact(g: &Graph) -> DMatrix<f64> {
        let n = g.n();
        let m = g.m() as f64;
        let occ = |u: usize| g.nodes_in_square(g.square_of(u)).len() as f64;
        let mut w = DMatrix::from_fn(n, n, |u, v| {
            let (a, b) = (g.square_of(u), g.square_of(v));
            if a != b && (a.i == b.i || a.j == b.j) {
                0.5 / (m * occ(u) * occ(v))
            } else {
                0.0
            }
        });
        for u in 0..n {
            let off: f64 = w.row(u).sum();
            w[(u, u)] = 1.0 - off;
        }
        w
    }

    #[test]
    fn rgg_monte_carlo_converges_to_occupancy_formula() {
        let g = build_rgg(200, 2.0, &mut RandomStream::new(6, 0)).unwrap();
        let mc =
            expected_matrix_monte_carlo(&g, protocol_sampler, 20_000, &RandomStream::new(7, 0))
                .unwrap();
        let exact = rgg_exact(&g);
        assert!((&mc.entries - &exact).amax() < 0.01);
        let exact_gap = 1.0 - jacobi_eigenvalues(&exact)[1];
        assert!((lambda2_gap(&mc).unwrap() - exact_gap).abs() < 0.02);
    }

    #[test]
    fn grid_paths_cases() {
        let g = build_grid(3).unwrap();
        let p = canonical_paths_grid(&g).unwrap();
        // (1,1) -> (3,3) passes (3,1)
        assert_eq!(p.path(0, 8), vec![0, 2, 8]);
        assert_eq!(p.path(0, 2), vec![0, 2]);
        assert_eq!(p.path(0, 6), vec![0, 6]);
        for m in 2..=8 {
            let g = build_grid(m).unwrap();
            let counts = edge_path_counts(&canonical_paths_grid(&g).unwrap());
            assert!(counts.values().all(|&c| c <= m), "m={m}");
        }
    }

    #[test]
    fn grid_poincare_coefficient_exact() {
        // Row edge (u -> z): one direct path of length 2mn and m - 1 corner
        // paths of length 4mn, each weighted by 1/n^2: rho = 4 - 2/m.
        for m in 2..=8 {
            let g = build_grid(m).unwrap();
            let w = expected_matrix_closed_form(&g).unwrap();
            let rho = poincare_coefficient(&w, &canonical_paths_grid(&g).unwrap()).unwrap();
            assert!((rho - (4.0 - 2.0 / m as f64)).abs() < 1e-9, "m={m}: {rho}");
            assert!(1.0 / rho <= lambda2_gap(&w).unwrap() + 1e-12);
        }
        let g = build_grid(4).unwrap();
        let rho = poincare_coefficient(
            &expected_matrix_closed_form(&g).unwrap(),
            &canonical_paths_grid(&g).unwrap(),
        )
        .unwrap();
        assert!(rho <= 4.0);
    }

    #[test]
    fn cycle_poincare_is_tight() {
        let g = build_cycle(9).unwrap();
        let w = expected_matrix_closed_form(&g).unwrap();
        let rho = poincare_coefficient(&w, &canonical_paths_cycle(&g).unwrap()).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rgg_paths_cases() {
        let g = build_rgg(200, 2.0, &mut RandomStream::new(8, 0)).unwrap();
        let p = canonical_paths_rgg(&g).unwrap();
        let m = g.m();
        let (a, b) = g.occupancy_range();
        for (u, w) in p.pairs() {
            let path = p.path(u, w);
            assert!(path.len() <= 3);
            let (su, sw) = (g.square_of(u), g.square_of(w));
            if su == sw {
                let z = g.square_of(path[1]);
                let expect_i = if su.i == m { su.i - 1 } else { su.i + 1 };
                assert_eq!(z, SquareIndex::new(expect_i, su.j));
            }
        }
        let counts = edge_path_counts(&p);
        let limit = (b as f64 / a as f64) * m as f64 + 1.0;
        // per-square load can exceed the asymptotic count by the label collisions
        let worst = *counts.values().max().unwrap() as f64;
        assert!(
            worst <= limit * (b as f64 / a as f64).ceil() + m as f64,
            "{worst} vs {limit}"
        );
    }

    #[test]
    fn rgg_poincare_sound_on_monte_carlo_matrix() {
        let g = build_rgg(200, 2.0, &mut RandomStream::new(9, 0)).unwrap();
        let report = spectral_report(&g, DEFAULT_MC_SAMPLES, &RandomStream::new(10, 0)).unwrap();
        assert!(report.poincare_bound <= report.lambda2);
        assert_eq!(report.samples, Some(DEFAULT_MC_SAMPLES));
        // reported shape constant c1 = rho / ln n
        let c1 = report.poincare_rho / (200f64).ln();
        assert!(c1.is_finite() && c1 > 0.0);
    }

    #[test]
    fn zero_probability_edge_rejected() {
        let g = build_grid(3).unwrap();
        let w = AveragedMatrix {
            entries: DMatrix::identity(9, 9),
            provenance: Provenance::ClosedForm,
        };
        assert!(matches!(
            poincare_coefficient(&w, &canonical_paths_grid(&g).unwrap()),
            Err(Error::InvalidPathSet(_))
        ));
    }

    #[test]
    fn report_serializes() {
        let g = build_grid(4).unwrap();
        let r = spectral_report(&g, 1, &RandomStream::new(0, 0)).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        for key in [
            "topology",
            "n",
            "lambda2",
            "poincare_rho",
            "poincare_bound",
            "provenance",
            "samples",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["provenance"], "closed-form");
    }
}
