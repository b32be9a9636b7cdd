//! Error statistics over Monte-Carlo run traces.
//!
//! Per recorded `tau` and sample path `p` a [`Snapshot`] keeps the node mean,
//! the squared distance to the initial sample mean and the squared distance
//! to the current mean. Across paths:
//!
//! - `mse  = mean_p ||theta - theta_bar 1||^2 / n`
//! - `e1   = var_p(mean theta)` (consensus-direction variance)
//! - `e2   = mean_p ||theta - mean(theta) 1||^2 / n` (disagreement energy)
//!
//! Per path `mse_p = (mean_p - theta_bar)^2 + e2_p` exactly, so
//! `mse = e1_biased + e2` with `e1_biased = mean_p (mean_p - theta_bar)^2`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::graph::Topology;
use crate::protocol::ProtocolConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tau: usize,
    /// Cumulative link transmissions up to this iteration.
    pub transmissions: u64,
    pub mean: f64,
    pub ssd_initial_mean: f64,
    pub ssd_current_mean: f64,
    pub gap: f64,
    pub theta: Option<Vec<f64>>,
}

impl Snapshot {
    pub fn capture(
        tau: usize,
        transmissions: u64,
        theta: &[f64],
        theta_bar: f64,
        keep: bool,
    ) -> Self {
        let mean = sample_mean(theta);
        let ssd_initial_mean = pairwise_sum(
            &theta
                .iter()
                .map(|t| (t - theta_bar).powi(2))
                .collect::<Vec<_>>(),
        );
        let ssd_current_mean =
            pairwise_sum(&theta.iter().map(|t| (t - mean).powi(2)).collect::<Vec<_>>());
        Self {
            tau,
            transmissions,
            mean,
            ssd_initial_mean,
            ssd_current_mean,
            gap: consensus_gap(theta),
            theta: keep.then(|| theta.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub sample_path_id: u64,
    pub n: usize,
    /// Sample mean of the initial values.
    pub theta_bar: f64,
    /// Wall-clock rounds per outer iteration.
    pub inner_rounds: usize,
    pub topology: Topology,
    pub config: ProtocolConfig,
    pub snapshots: Vec<Snapshot>,
}

impl RunTrace {
    pub fn taus(&self) -> impl Iterator<Item = usize> + '_ {
        self.snapshots.iter().map(|s| s.tau)
    }

    pub fn final_snapshot(&self) -> &Snapshot {
        self.snapshots
            .last()
            .expect("trace holds at least the initial snapshot")
    }

    pub fn validate(&self) -> Result<()> {
        if self.snapshots.is_empty() {
            return Err(Error::invalid("trace has no snapshots"));
        }
        for w in self.snapshots.windows(2) {
            if w[1].tau <= w[0].tau {
                return Err(Error::invalid("snapshot taus must be strictly increasing"));
            }
            if w[1].transmissions < w[0].transmissions {
                return Err(Error::invalid("transmission counts must be non-decreasing"));
            }
        }
        Ok(())
    }
}

fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let (a, b) = xs.split_at(xs.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// Arithmetic mean with pairwise summation. Zero for an empty slice.
pub fn sample_mean(theta: &[f64]) -> f64 {
    if theta.is_empty() {
        return 0.0;
    }
    pairwise_sum(theta) / theta.len() as f64
}

pub fn consensus_gap(theta: &[f64]) -> f64 {
    let (lo, hi) = theta
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| {
            (lo.min(t), hi.max(t))
        });
    if theta.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tau: usize,
    pub transmissions: u64,
    pub mse: f64,
    pub e1: f64,
    pub e1_biased: f64,
    pub e2: f64,
    /// Mean over paths of `mean(theta) - theta_bar`.
    pub bias: f64,
    pub mse_se: f64,
    pub e1_se: f64,
    pub e2_se: f64,
    pub paths: usize,
}

impl CurvePoint {
    /// Three standard errors of `mse`.
    pub fn ci_halfwidth(&self) -> f64 {
        3.0 * self.mse_se
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseCurve {
    pub n: usize,
    pub theta_bar: f64,
    pub inner_rounds: usize,
    pub points: Vec<CurvePoint>,
}

impl MseCurve {
    pub fn at(&self, tau: usize) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.tau == tau)
    }
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// Unbiased sample variance and its standard error from the fourth moment.
fn variance_and_se(xs: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / k;
    let s2 = m2 * k / (k - 1.0);
    let var_of_s2 = ((m4 - (k - 3.0) / (k - 1.0) * s2 * s2) / k).max(0.0);
    (s2, var_of_s2.sqrt())
}

/// Across-path MSE and its decomposition at every recorded `tau`.
pub fn mse_curve(traces: &[RunTrace], theta_bar: f64) -> Result<MseCurve> {
    if traces.len() < 2 {
        return Err(Error::invalid("mse_curve needs at least 2 traces"));
    }
    let first = &traces[0];
    for t in traces {
        t.validate()?;
        if t.n != first.n
            || t.snapshots.len() != first.snapshots.len()
            || !t.taus().eq(first.taus())
        {
            return Err(Error::invalid("traces have misaligned snapshot grids"));
        }
    }
    let n = first.n as f64;
    let paths = traces.len();
    let points = (0..first.snapshots.len())
        .map(|k| {
            let snaps: Vec<&Snapshot> = traces.iter().map(|t| &t.snapshots[k]).collect();
            let mse_p: Vec<f64> = snaps.iter().map(|s| s.ssd_initial_mean / n).collect();
            let e2_p: Vec<f64> = snaps.iter().map(|s| s.ssd_current_mean / n).collect();
            let means: Vec<f64> = snaps.iter().map(|s| s.mean).collect();
            let (mse, mse_se) = mean_and_se(&mse_p);
            let (e2, e2_se) = mean_and_se(&e2_p);
            let (e1, e1_se) = variance_and_se(&means);
            let e1_biased =
                means.iter().map(|m| (m - theta_bar).powi(2)).sum::<f64>() / paths as f64;
            let bias = means.iter().map(|m| m - theta_bar).sum::<f64>() / paths as f64;
            CurvePoint {
                tau: snaps[0].tau,
                transmissions: snaps[0].transmissions,
                mse,
                e1,
                e1_biased,
                e2,
                bias,
                mse_se,
                e1_se,
                e2_se,
                paths,
            }
        })
        .collect();
    Ok(MseCurve {
        n: first.n,
        theta_bar,
        inner_rounds: first.inner_rounds,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundPoint {
    pub tau: usize,
    pub estimate: f64,
    /// `estimate - 3 * standard error`.
    pub lower: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub sigma2: f64,
    pub delta: f64,
    pub lambda2: f64,
    pub applicable: bool,
    pub note: Option<String>,
    pub points: Vec<BoundPoint>,
    pub passed: bool,
}

impl BoundReport {
    pub fn failures(&self) -> impl Iterator<Item = &BoundPoint> {
        self.points.iter().filter(|p| !p.pass)
    }
}

fn bound_report(
    name: &str,
    sigma2: f64,
    delta: f64,
    lambda2: f64,
    points: Vec<BoundPoint>,
) -> BoundReport {
    let passed = points.iter().all(|p| p.pass);
    BoundReport {
        name: name.into(),
        sigma2,
        delta,
        lambda2,
        applicable: true,
        note: None,
        points,
        passed,
    }
}

/// Consensus-direction variance against `sigma^2 delta / lambda2^2`.
/// A point fails only if `e1 - 3 se` is above the bound.
pub fn check_e1_bound(curve: &MseCurve, sigma2: f64, delta: f64, lambda2: f64) -> BoundReport {
    let bound = sigma2 * delta / (lambda2 * lambda2);
    let points = curve
        .points
        .iter()
        .map(|p| {
            let lower = p.e1 - 3.0 * p.e1_se;
            BoundPoint {
                tau: p.tau,
                estimate: p.e1,
                lower,
                bound,
                pass: lower <= bound,
            }
        })
        .collect();
    bound_report("e1", sigma2, delta, lambda2, points)
}

/// Two-term envelope for the disagreement energy.
pub fn e2_envelope(tau: usize, sigma2: f64, delta: f64, lambda2: f64, e2_initial: f64) -> f64 {
    let shift = tau as f64 + 1.0 / delta - 1.0;
    sigma2 / (lambda2 * lambda2) * shift.ln() / shift + e2_initial * (1.0 / delta - 1.0) / shift
}

/// Disagreement energy against [`e2_envelope`]. Only derived for
/// `delta <= lambda2^2 / 4`; otherwise the report is marked inapplicable.
pub fn check_e2_bound(
    curve: &MseCurve,
    sigma2: f64,
    delta: f64,
    lambda2: f64,
    e2_initial: f64,
) -> BoundReport {
    let limit = lambda2 * lambda2 / 4.0;
    if !(delta > 0.0 && delta < 0.5) || delta > limit {
        return BoundReport {
            name: "e2".into(),
            sigma2,
            delta,
            lambda2,
            applicable: false,
            note: Some(format!(
                "envelope requires delta in (0, 1/2) and delta <= lambda2^2/4 = {limit}"
            )),
            points: Vec::new(),
            passed: false,
        };
    }
    let points = curve
        .points
        .iter()
        .map(|p| {
            let bound = e2_envelope(p.tau, sigma2, delta, lambda2, e2_initial);
            let lower = p.e2 - 3.0 * p.e2_se;
            BoundPoint {
                tau: p.tau,
                estimate: p.e2,
                lower,
                bound,
                pass: lower <= bound,
            }
        })
        .collect();
    bound_report("e2", sigma2, delta, lambda2, points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoppingTime {
    pub tau: usize,
    pub transmissions: u64,
    /// `M * tau` message-passing rounds.
    pub rounds: u64,
}

/// First recorded `tau` with `mse <= target`; resolution is the snapshot stride.
pub fn stopping_time(curve: &MseCurve, target: f64) -> Result<Option<StoppingTime>> {
    if target.is_nan() || target <= 0.0 {
        return Err(Error::invalid(format!(
            "target must be positive, got {target}"
        )));
    }
    Ok(curve
        .points
        .iter()
        .find(|p| p.mse <= target)
        .map(|p| StoppingTime {
            tau: p.tau,
            transmissions: p.transmissions,
            rounds: (curve.inner_rounds * p.tau) as u64,
        }))
}

pub fn write_trace_csv<W: Write>(traces: &[RunTrace], mut out: W) -> Result<()> {
    writeln!(
        out,
        "sample_path_id,tau,transmissions_total,mse_to_initial_mean,consensus_gap,theta_mean"
    )?;
    for t in traces {
        for s in &t.snapshots {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                t.sample_path_id,
                s.tau,
                s.transmissions,
                s.ssd_initial_mean / t.n as f64,
                s.gap,
                s.mean
            )?;
        }
    }
    Ok(())
}

/// The `ci` column is three standard errors of `mse`.
pub fn write_curve_csv<W: Write>(curve: &MseCurve, mut out: W) -> Result<()> {
    writeln!(out, "tau,transmissions,mse,e1,e2,ci,paths")?;
    for p in &curve.points {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.tau,
            p.transmissions,
            p.mse,
            p.e1,
            p.e2,
            p.ci_halfwidth(),
            p.paths
        )?;
    }
    Ok(())
}

/// Full theta at one recorded `tau`, one row per (path, node).
pub fn write_theta_csv<W: Write>(traces: &[RunTrace], index: usize, mut out: W) -> Result<()> {
    writeln!(out, "sample_path_id,node,theta")?;
    for t in traces {
        let snap = t
            .snapshots
            .get(index)
            .ok_or_else(|| Error::invalid("snapshot index out of range"))?;
        let theta = snap
            .theta
            .as_ref()
            .ok_or_else(|| Error::invalid("trace was recorded without full theta"))?;
        for (k, v) in theta.iter().enumerate() {
            writeln!(out, "{},{k},{v}", t.sample_path_id)?;
        }
    }
    Ok(())
}
