//! Integrated risks conditional on the historical routes, the information
//! lower bound, a Monte Carlo oracle and the dominance checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::covariance::{CovarianceModel, PriorSpec};
use crate::error::{EtaError, Result};
use crate::estimators::{
    gseg_form, gseg_weights, neighborhood_variance, optimal_route_weight, optimal_seg_weights, route_form,
    unit_counts, BayesPosterior, LinearForm, Partition, UnitCounts, WeightRule,
};
use crate::trips::{Neighborhood, NeighborhoodCounts, NeighborhoodKind, NoiseSampler, Route, RouteHistory};

/// Expected variance, expected squared bias and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskReport {
    pub variance: f64,
    pub bias2: f64,
    pub total: f64,
}

impl RiskReport {
    pub fn new(variance: f64, bias2: f64) -> Self {
        Self { variance, bias2, total: variance + bias2 }
    }

    /// Prior-only risk `|y|τ²`.
    pub fn prior_only(len: usize, prior: &PriorSpec) -> Self {
        Self::new(0.0, len as f64 * prior.tau2)
    }
}

/// The three squared-bias terms of the route-based risk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RouteBias {
    /// From neighbors with more or fewer segments than `y`.
    pub length: f64,
    /// From traversals of segments off `y`.
    pub off_route: f64,
    /// From shrinkage toward `|y|μ`.
    pub shrinkage: f64,
}

pub fn risk_gseg(
    partition: &Partition,
    counts: &UnitCounts,
    weights: &[f64],
    cov: &CovarianceModel,
    prior: &PriorSpec,
) -> RiskReport {
    let units = partition.units();
    let mut variance = 0.0;
    for a in 0..units.len() {
        if counts.n[a] == 0 || weights[a] == 0.0 {
            continue;
        }
        for b in 0..units.len() {
            if counts.n[b] == 0 || weights[b] == 0.0 || counts.n_union[a][b] == 0 {
                continue;
            }
            let ratio = counts.n_union[a][b] as f64 / (counts.n[a] as f64 * counts.n[b] as f64);
            variance += ratio * weights[a] * weights[b] * cov.pair_sum(&units[a], &units[b]);
        }
    }
    let bias2 = units.iter().zip(weights).map(|(u, &phi)| (1.0 - phi).powi(2) * u.len() as f64 * prior.tau2).sum();
    RiskReport::new(variance, bias2)
}

pub fn risk_route(
    y: &Route,
    counts: &NeighborhoodCounts,
    nbhd_variance: f64,
    phi: f64,
    prior: &PriorSpec,
) -> (RiskReport, RouteBias) {
    if counts.m == 0 {
        let bias = RouteBias { length: 0.0, off_route: 0.0, shrinkage: y.len() as f64 * prior.tau2 };
        return (RiskReport::new(0.0, bias.shrinkage), bias);
    }
    let m = counts.m as f64;
    let variance = (phi / m).powi(2) * nbhd_variance;
    let bias = RouteBias {
        length: (phi * (counts.mean_len - y.len() as f64) * prior.mu).powi(2),
        off_route: counts.off_route.iter().map(|&(_, c)| (phi * c as f64 / m).powi(2) * prior.tau2).sum(),
        shrinkage: counts.on_route.iter().map(|&c| (1.0 - phi * c as f64 / m).powi(2) * prior.tau2).sum(),
    };
    (RiskReport::new(variance, bias.length + bias.off_route + bias.shrinkage), bias)
}

/// Risk of the Bayes-optimal estimator: `wᵀFw + τ²‖e_y − Fw‖²` with
/// `w = Q⁻¹e_y`.
pub fn risk_optimal(post: &BayesPosterior<'_>, y: &Route) -> RiskReport {
    let w = post.weights(y);
    let fw = post.information() * &w;
    let variance = w.dot(&fw);
    let resid = post.indicator(y) - fw;
    RiskReport::new(variance, post.prior().tau2 * resid.norm_squared())
}

/// `|y|² / (Σ_{s,t∈y} N_{s∪t} ψ_{s,t} + |y|/τ²)` with the full-network
/// precision `Ψ`.
pub fn lower_bound(history: &RouteHistory, y: &Route, cov: &CovarianceModel, prior: &PriorSpec) -> Result<f64> {
    let psi = cov.precision()?;
    let seg = y.segments();
    let mut info = 0.0;
    for (a, &s) in seg.iter().enumerate() {
        info += history.n_s(s) as f64 * psi[(s, s)];
        for &t in &seg[..a] {
            let n = history.n_pair(s, t);
            if n > 0 {
                info += 2.0 * n as f64 * psi[(s, t)];
            }
        }
    }
    let len = seg.len() as f64;
    Ok(len * len / (info + len / prior.tau2))
}

/// Mean squared error over replicates, with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub replicates: usize,
}

impl McEstimate {
    /// Whether `value` lies within `k` standard errors.
    pub fn agrees(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_error
    }
}

/// Monte Carlo risk of each linear form: every replicate draws fresh `θ` and
/// noise on the fixed historical routes. Replicate `i` uses its own ChaCha
/// stream, and results are reduced in replicate order, so the output does not
/// depend on the number of worker threads.
pub fn mc_risk(
    history: &RouteHistory,
    y: &Route,
    forms: &[LinearForm],
    cov: &CovarianceModel,
    prior: &PriorSpec,
    replicates: usize,
    seed: u64,
) -> Result<Vec<McEstimate>> {
    if replicates < 2 {
        return Err(EtaError::InvalidParameter(format!("need at least 2 replicates, got {replicates}")));
    }
    let noise = NoiseSampler::new(history.routes(), cov)?;
    let mut touched: Vec<usize> =
        history.routes().iter().flat_map(|r| r.segments().iter().copied()).chain(y.segments().iter().copied()).collect();
    touched.sort_unstable();
    touched.dedup();
    let mut slot = vec![usize::MAX; history.num_segments()];
    for (k, &s) in touched.iter().enumerate() {
        slot[s] = k;
    }
    let sd = prior.tau2.sqrt();
    let errors: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let theta: Vec<f64> =
                touched.iter().map(|_| prior.mu + sd * rng.sample::<f64, _>(StandardNormal)).collect();
            let eps = noise.sample(&mut rng);
            let times: Vec<Vec<f64>> = history
                .routes()
                .iter()
                .zip(eps)
                .map(|(r, e)| r.segments().iter().zip(e).map(|(&s, x)| theta[slot[s]] + x).collect())
                .collect();
            let truth: f64 = y.segments().iter().map(|&s| theta[slot[s]]).sum();
            forms.iter().map(|f| (f.apply(&times) - truth).powi(2)).collect()
        })
        .collect();
    let r = replicates as f64;
    Ok((0..forms.len())
        .map(|k| {
            let mean = errors.iter().map(|e| e[k]).sum::<f64>() / r;
            let var = errors.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>() / (r - 1.0);
            McEstimate { mean, std_error: (var / r).sqrt(), replicates }
        })
        .collect())
}

/// `N_{s∪t}·N_s^δ·N_t^δ ≤ N_{s∪t}^δ·N_s·N_t` for all `s, t ∈ y`.
pub fn check_nb_condition(history: &RouteHistory, y: &Route, nbhd: &Neighborhood) -> bool {
    let seg = y.segments();
    let in_nbhd = |s: usize, t: usize| nbhd.members.iter().filter(|&&n| history.route(n).contains(s) && history.route(n).contains(t)).count();
    let local: Vec<usize> = seg.iter().map(|&s| in_nbhd(s, s)).collect();
    for (a, &s) in seg.iter().enumerate() {
        for (b, &t) in seg.iter().enumerate() {
            let lhs = history.n_pair(s, t) as u128 * local[a] as u128 * local[b] as u128;
            let rhs = in_nbhd(s, t) as u128 * history.n_s(s) as u128 * history.n_s(t) as u128;
            if lhs > rhs {
                return false;
            }
        }
    }
    true
}

/// Optimal-weight risks of the estimators compared by the dominance results.
#[derive(Debug, Clone, Serialize)]
pub struct DominanceReport {
    pub seg: RiskReport,
    pub route: RiskReport,
    pub gseg_whole: RiskReport,
    pub route_exact: RiskReport,
    /// `Σ ≥ 0` elementwise on the whole network.
    pub nonnegative_covariance: bool,
    /// `Σ ≥ 0` elementwise on the predicting route.
    pub nonnegative_on_route: bool,
    pub nb_condition: bool,
    /// `R(seg*) ≤ R(route*)`, when its preconditions hold.
    pub seg_beats_route: Option<bool>,
    /// `R(seg*) ≤ R(g-seg*, whole route) ≤ R(route*, exact route)`, when
    /// covariances on the route are nonnegative.
    pub chain_holds: Option<bool>,
    /// Outcomes when the preconditions fail; informative only.
    pub unconditional_seg_beats_route_exact: bool,
}

impl DominanceReport {
    pub fn violations(&self) -> usize {
        usize::from(self.seg_beats_route == Some(false)) + usize::from(self.chain_holds == Some(false))
    }
}

const DOMINANCE_SLACK: f64 = 1e-10;

/// Compares the optimal segment, generalized segment (whole route) and
/// route-based estimators on one problem. `nbhd` is the route-based
/// neighborhood checked against the segment estimator.
pub fn dominance_audit(
    history: &RouteHistory,
    y: &Route,
    nbhd: &Neighborhood,
    cov: &CovarianceModel,
    prior: &PriorSpec,
) -> Result<DominanceReport> {
    let singles = Partition::singletons(y);
    let sc = unit_counts(history, &singles);
    let seg = risk_gseg(&singles, &sc, &optimal_seg_weights(&singles, &sc, cov, prior)?, cov, prior);
    let whole = Partition::whole(y);
    let wc = unit_counts(history, &whole);
    let gseg_whole = risk_gseg(&whole, &wc, &optimal_seg_weights(&whole, &wc, cov, prior)?, cov, prior);
    let route = optimal_route_risk(history, y, nbhd, cov, prior).0;
    let exact = history.resolve(y, NeighborhoodKind::ExactRoute);
    let route_exact = optimal_route_risk(history, y, &exact, cov, prior).0;
    let n = cov.dim();
    let nonnegative_covariance = cov.nonnegative_on(&(0..n).collect::<Vec<_>>());
    let nonnegative_on_route = cov.nonnegative_on(y.segments());
    let nb_condition = check_nb_condition(history, y, nbhd);
    let le = |a: &RiskReport, b: &RiskReport| a.total <= b.total + DOMINANCE_SLACK * (1.0 + b.total.abs());
    Ok(DominanceReport {
        seg,
        route,
        gseg_whole,
        route_exact,
        nonnegative_covariance,
        nonnegative_on_route,
        nb_condition,
        seg_beats_route: (nonnegative_covariance && nb_condition).then(|| le(&seg, &route)),
        chain_holds: nonnegative_on_route.then(|| le(&seg, &gseg_whole) && le(&gseg_whole, &route_exact)),
        unconditional_seg_beats_route_exact: le(&seg, &route_exact),
    })
}

/// Optimal route-based weight and its risk.
pub fn optimal_route_risk(
    history: &RouteHistory,
    y: &Route,
    nbhd: &Neighborhood,
    cov: &CovarianceModel,
    prior: &PriorSpec,
) -> (RiskReport, RouteBias, f64) {
    let counts = history.neighborhood_counts(y, nbhd);
    let var = neighborhood_variance(history, nbhd, cov);
    let phi = optimal_route_weight(y, &counts, var, prior);
    let (report, bias) = risk_route(y, &counts, var, phi, prior);
    (report, bias, phi)
}

/// Weights, risk and linear form of a generalized segment estimator.
pub fn gseg_summary(
    history: &RouteHistory,
    partition: &Partition,
    rule: WeightRule,
    cov: &CovarianceModel,
    prior: &PriorSpec,
) -> Result<(Vec<f64>, RiskReport, LinearForm)> {
    let counts = unit_counts(history, partition);
    let weights = gseg_weights(history, partition, rule, Some(cov), prior)?;
    let risk = risk_gseg(partition, &counts, &weights, cov, prior);
    let form = gseg_form(history, partition, &counts, &weights, prior);
    Ok((weights, risk, form))
}

/// Route-based counterpart of [`gseg_summary`].
pub fn route_summary(
    history: &RouteHistory,
    y: &Route,
    nbhd: &Neighborhood,
    rule: WeightRule,
    cov: &CovarianceModel,
    prior: &PriorSpec,
) -> Result<(f64, RiskReport, RouteBias, LinearForm)> {
    let phi = crate::estimators::route_weight(history, y, nbhd, rule, Some(cov), prior)?;
    let counts = history.neighborhood_counts(y, nbhd);
    let (risk, bias) = risk_route(y, &counts, neighborhood_variance(history, nbhd, cov), phi, prior);
    Ok((phi, risk, bias, route_form(history, y, nbhd, phi, prior)))
}
