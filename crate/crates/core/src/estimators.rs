//! Segment, generalized segment, route-based and Bayes-optimal predictors.
//!
//! Every estimator here is affine in the observed adjusted times, so each one
//! is first reduced to a [`LinearForm`] over `(trip, position)` slots and then
//! applied to the times. The risk oracle reuses the same forms.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceModel, PriorSpec};
use crate::error::{EtaError, Result};
use crate::trips::{Neighborhood, NeighborhoodCounts, Route, RouteHistory};

/// Shrinkage weight `φ(n)` applied to a unit with `n` observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightRule {
    /// `n / (n + λ)`
    Ratio { lambda: f64 },
    /// `1{n ≥ c}`
    Threshold { c: usize },
    /// `n·k·τ² / (n·k·τ² + Σ_{s,t∈unit} σ_{s,t})` for a unit of `k` segments.
    IndepOptimal,
    /// Minimizes the integrated risk given the historical routes.
    Optimal,
}

impl WeightRule {
    pub fn name(&self) -> &'static str {
        match self {
            WeightRule::Ratio { .. } => "ratio",
            WeightRule::Threshold { .. } => "threshold",
            WeightRule::IndepOptimal => "indep_optimal",
            WeightRule::Optimal => "optimal",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightRule::Ratio { lambda } if !(lambda > 0.0 && lambda.is_finite()) => {
                Err(EtaError::InvalidParameter(format!("ratio rule needs lambda > 0, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    /// Weight for a unit of `k` segments observed `n` times. `unit_var` is
    /// `Σ_{s,t∈unit} σ_{s,t}`, needed only by [`WeightRule::IndepOptimal`].
    pub fn weight(&self, n: usize, k: usize, unit_var: Option<f64>, prior: &PriorSpec) -> Result<f64> {
        if n == 0 {
            return Ok(0.0);
        }
        let nf = n as f64;
        Ok(match *self {
            WeightRule::Ratio { lambda } => nf / (nf + lambda),
            WeightRule::Threshold { c } => f64::from(u8::from(n >= c)),
            WeightRule::IndepOptimal => {
                let var = unit_var.ok_or(EtaError::MissingCovariance("indep_optimal"))?;
                let signal = nf * k as f64 * prior.tau2;
                signal / (signal + var)
            }
            WeightRule::Optimal => {
                return Err(EtaError::InvalidParameter("optimal weights are solved per route".into()));
            }
        })
    }
}

/// Contiguous, disjoint super-segments covering a route, in route order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    units: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(y: &Route, units: Vec<Vec<usize>>) -> Result<Self> {
        let flat: Vec<usize> = units.iter().flatten().copied().collect();
        if units.iter().any(Vec::is_empty) {
            return Err(EtaError::InvalidPartition("empty super-segment".into()));
        }
        if flat != y.segments() {
            return Err(EtaError::InvalidPartition(
                "super-segments must be consecutive runs that cover the route once, in order".into(),
            ));
        }
        Ok(Self { units })
    }

    /// Consecutive runs of the given lengths.
    pub fn from_sizes(y: &Route, sizes: &[usize]) -> Result<Self> {
        let mut units = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &k in sizes {
            let end = (start + k).min(y.len());
            units.push(y.segments()[start..end].to_vec());
            start = end;
        }
        Self::new(y, units)
    }

    pub fn singletons(y: &Route) -> Self {
        Self { units: y.segments().iter().map(|&s| vec![s]).collect() }
    }

    pub fn whole(y: &Route) -> Self {
        Self { units: vec![y.segments().to_vec()] }
    }

    pub fn units(&self) -> &[Vec<usize>] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// `N_S` and `N_{S∪T}` for the units of a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitCounts {
    /// Trips containing each unit, increasing.
    pub trips: Vec<Vec<usize>>,
    pub n: Vec<usize>,
    pub n_union: Vec<Vec<usize>>,
}

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut count) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                i += 1;
                j += 1;
            }
        }
    }
    count
}

pub fn unit_counts(history: &RouteHistory, partition: &Partition) -> UnitCounts {
    let trips: Vec<Vec<usize>> = partition.units().iter().map(|u| history.trips_containing(u)).collect();
    let n: Vec<usize> = trips.iter().map(Vec::len).collect();
    let k = trips.len();
    let mut n_union = vec![vec![0; k]; k];
    for a in 0..k {
        n_union[a][a] = n[a];
        for b in 0..a {
            let c = intersection_size(&trips[a], &trips[b]);
            n_union[a][b] = c;
            n_union[b][a] = c;
        }
    }
    UnitCounts { trips, n, n_union }
}

/// `Θ̂ = intercept + Σ coef·T′_{trip, position}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearForm {
    pub intercept: f64,
    pub terms: Vec<(usize, usize, f64)>,
}

impl LinearForm {
    pub fn apply(&self, times: &[Vec<f64>]) -> f64 {
        self.intercept + self.terms.iter().map(|&(n, k, a)| a * times[n][k]).sum::<f64>()
    }

    /// Sum of coefficients.
    pub fn total_weight(&self) -> f64 {
        self.terms.iter().map(|t| t.2).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionTerm {
    pub segments: Vec<usize>,
    pub count: usize,
    pub weight: f64,
    /// `None` when nothing was observed.
    pub sample_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub value: f64,
    pub terms: Vec<PredictionTerm>,
}

/// Weights `φ_S(N_S)` for each unit under `rule`.
pub fn gseg_weights(
    history: &RouteHistory,
    partition: &Partition,
    rule: WeightRule,
    cov: Option<&CovarianceModel>,
    prior: &PriorSpec,
) -> Result<Vec<f64>> {
    rule.validate()?;
    let counts = unit_counts(history, partition);
    if rule == WeightRule::Optimal {
        let cov = cov.ok_or(EtaError::MissingCovariance("optimal"))?;
        return optimal_seg_weights(partition, &counts, cov, prior);
    }
    partition
        .units()
        .iter()
        .zip(&counts.n)
        .map(|(u, &n)| rule.weight(n, u.len(), cov.map(|c| c.pair_sum(u, u)), prior))
        .collect()
}

/// Matrix `A + diag(|S|τ²)` and right-hand side `|S|τ²` of the optimality
/// system, restricted to units with `N_S > 0` (returned as `active`).
pub fn optimal_seg_system(
    partition: &Partition,
    counts: &UnitCounts,
    cov: &CovarianceModel,
    prior: &PriorSpec,
) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
    let units = partition.units();
    let active: Vec<usize> = (0..units.len()).filter(|&a| counts.n[a] > 0).collect();
    let k = active.len();
    let mut lhs = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for (i, &a) in active.iter().enumerate() {
        let size = units[a].len() as f64 * prior.tau2;
        rhs[i] = size;
        for (j, &b) in active.iter().enumerate() {
            let ratio = counts.n_union[a][b] as f64 / (counts.n[a] as f64 * counts.n[b] as f64);
            lhs[(i, j)] = ratio * cov.pair_sum(&units[a], &units[b]);
        }
        lhs[(i, i)] += size;
    }
    (lhs, rhs, active)
}

/// Risk-minimizing `φ*_S`; units never observed get 0.
pub fn optimal_seg_weights(
    partition: &Partition,
    counts: &UnitCounts,
    cov: &CovarianceModel,
    prior: &PriorSpec,
) -> Result<Vec<f64>> {
    let (lhs, rhs, active) = optimal_seg_system(partition, counts, cov, prior);
    let mut phi = vec![0.0; partition.len()];
    if active.is_empty() {
        return Ok(phi);
    }
    let chol = Cholesky::new(lhs).ok_or_else(|| EtaError::Singular("optimal weight system".into()))?;
    let sol = chol.solve(&rhs);
    for (i, &a) in active.iter().enumerate() {
        phi[a] = sol[i];
    }
    if phi.iter().any(|x| !x.is_finite()) {
        return Err(EtaError::NonFinite("optimal segment weights"));
    }
    Ok(phi)
}

/// Generalized segment estimator with given weights, as a linear form.
pub fn gseg_form(
    history: &RouteHistory,
    partition: &Partition,
    counts: &UnitCounts,
    weights: &[f64],
    prior: &PriorSpec,
) -> LinearForm {
    let mut form = LinearForm::default();
    for ((unit, trips), &phi) in partition.units().iter().zip(&counts.trips).zip(weights) {
        form.intercept += (1.0 - phi) * unit.len() as f64 * prior.mu;
        if trips.is_empty() || phi == 0.0 {
            continue;
        }
        let a = phi / trips.len() as f64;
        for &n in trips {
            let route = history.route(n);
            for &s in unit {
                form.terms.push((n, route.position(s).expect("trip contains unit"), a));
            }
        }
    }
    form
}

fn unit_sample_means(history: &RouteHistory, times: &[Vec<f64>], partition: &Partition, counts: &UnitCounts) -> Vec<Option<f64>> {
    partition
        .units()
        .iter()
        .zip(&counts.trips)
        .map(|(unit, trips)| {
            if trips.is_empty() {
                return None;
            }
            let total: f64 = trips
                .iter()
                .map(|&n| {
                    let route = history.route(n);
                    unit.iter().map(|&s| times[n][route.position(s).expect("contained")]).sum::<f64>()
                })
                .sum();
            Some(total / trips.len() as f64)
        })
        .collect()
}

pub fn predict_gseg(
    history: &RouteHistory,
    times: &[Vec<f64>],
    partition: &Partition,
    rule: WeightRule,
    cov: Option<&CovarianceModel>,
    prior: &PriorSpec,
) -> Result<Prediction> {
    let counts = unit_counts(history, partition);
    let weights = gseg_weights(history, partition, rule, cov, prior)?;
    let means = unit_sample_means(history, times, partition, &counts);
    let mut value = 0.0;
    let mut terms = Vec::with_capacity(partition.len());
    for (a, unit) in partition.units().iter().enumerate() {
        let phi = weights[a];
        let prior_part = (1.0 - phi) * unit.len() as f64 * prior.mu;
        value += prior_part + means[a].map_or(0.0, |m| phi * m);
        terms.push(PredictionTerm { segments: unit.clone(), count: counts.n[a], weight: phi, sample_mean: means[a] });
    }
    if !value.is_finite() {
        return Err(EtaError::NonFinite("generalized segment prediction"));
    }
    Ok(Prediction { value, terms })
}

pub fn predict_segment(
    history: &RouteHistory,
    times: &[Vec<f64>],
    y: &Route,
    rule: WeightRule,
    cov: Option<&CovarianceModel>,
    prior: &PriorSpec,
) -> Result<Prediction> {
    predict_gseg(history, times, &Partition::singletons(y), rule, cov, prior)
}

/// `Σ_{n∈δ} Σ_{s,t∈y_n} σ_{s,t}`.
pub fn neighborhood_variance(history: &RouteHistory, nbhd: &Neighborhood, cov: &CovarianceModel) -> f64 {
    nbhd.members
        .iter()
        .map(|&n| {
            let seg = history.route(n).segments();
            cov.pair_sum(seg, seg)
        })
        .sum()
}

/// Closed-form `φ*_δ(M_δ)` of the route-based estimator.
pub fn optimal_route_weight(
    y: &Route,
    counts: &NeighborhoodCounts,
    nbhd_variance: f64,
    prior: &PriorSpec,
) -> f64 {
    if counts.m == 0 {
        return 0.0;
    }
    let m = counts.m as f64;
    let on: f64 = counts.on_route.iter().map(|&c| c as f64).sum();
    let sq: f64 = counts
        .on_route
        .iter()
        .copied()
        .chain(counts.off_route.iter().map(|&(_, c)| c))
        .map(|c| (c as f64).powi(2))
        .sum();
    let gap = counts.mean_len - y.len() as f64;
    let denom = sq / m * prior.tau2 + nbhd_variance / m + m * prior.mu.powi(2) * gap * gap;
    on * prior.tau2 / denom
}

pub fn route_weight(
    history: &RouteHistory,
    y: &Route,
    nbhd: &Neighborhood,
    rule: WeightRule,
    cov: Option<&CovarianceModel>,
    prior: &PriorSpec,
) -> Result<f64> {
    rule.validate()?;
    let m = nbhd.members.len();
    match rule {
        WeightRule::Optimal => {
            let cov = cov.ok_or(EtaError::MissingCovariance("optimal"))?;
            let counts = history.neighborhood_counts(y, nbhd);
            Ok(optimal_route_weight(y, &counts, neighborhood_variance(history, nbhd, cov), prior))
        }
        _ => rule.weight(m, y.len(), cov.map(|c| c.pair_sum(y.segments(), y.segments())), prior),
    }
}

pub fn route_form(history: &RouteHistory, y: &Route, nbhd: &Neighborhood, phi: f64, prior: &PriorSpec) -> LinearForm {
    let mut form = LinearForm { intercept: (1.0 - phi) * y.len() as f64 * prior.mu, terms: Vec::new() };
    if nbhd.members.is_empty() || phi == 0.0 {
        return form;
    }
    let a = phi / nbhd.members.len() as f64;
    for &n in &nbhd.members {
        for k in 0..history.route(n).len() {
            form.terms.push((n, k, a));
        }
    }
    form
}

pub fn predict_route(
    history: &RouteHistory,
    times: &[Vec<f64>],
    y: &Route,
    nbhd: &Neighborhood,
    rule: WeightRule,
    cov: Option<&CovarianceModel>,
    prior: &PriorSpec,
) -> Result<Prediction> {
    let phi = route_weight(history, y, nbhd, rule, cov, prior)?;
    let m = nbhd.members.len();
    let mean = (m > 0).then(|| nbhd.members.iter().map(|&n| times[n].iter().sum::<f64>()).sum::<f64>() / m as f64);
    let value = (1.0 - phi) * y.len() as f64 * prior.mu + mean.map_or(0.0, |x| phi * x);
    if !value.is_finite() {
        return Err(EtaError::NonFinite("route prediction"));
    }
    Ok(Prediction {
        value,
        terms: vec![PredictionTerm { segments: y.segments().to_vec(), count: m, weight: phi, sample_mean: mean }],
    })
}

/// Exact posterior of `θ` under the Gaussian model: keeps the accumulated
/// information matrix `F = Σ_n U_nᵀ B_n⁻¹ U_n` and a factorization of
/// `Q = F + I/τ²`.
pub struct BayesPosterior<'a> {
    history: &'a RouteHistory,
    cov: &'a CovarianceModel,
    prior: PriorSpec,
    info: DMatrix<f64>,
    q_chol: Cholesky<f64, Dyn>,
}

fn trip_block(cov: &CovarianceModel, route: &Route, trip: usize) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(cov.submatrix(route.segments())).ok_or(EtaError::SingularTripBlock { trip })
}

/// Per-trip coefficients and intercept of the Bayes-optimal prediction.
#[derive(Debug, Clone, Serialize)]
pub struct BayesExplain {
    pub intercept: f64,
    pub terms: Vec<ExplainTerm>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExplainTerm {
    pub trip: usize,
    pub segment: usize,
    pub label: String,
    pub coefficient: f64,
}

impl<'a> BayesPosterior<'a> {
    pub fn new(history: &'a RouteHistory, cov: &'a CovarianceModel, prior: &PriorSpec) -> Result<Self> {
        prior.validate()?;
        let m = history.num_segments();
        if cov.dim() != m {
            return Err(EtaError::Dimension { expected: m, got: cov.dim() });
        }
        let mut info = DMatrix::zeros(m, m);
        for (n, route) in history.routes().iter().enumerate() {
            let inv = trip_block(cov, route, n)?.inverse();
            let seg = route.segments();
            for (a, &s) in seg.iter().enumerate() {
                for (b, &t) in seg.iter().enumerate() {
                    info[(s, t)] += inv[(a, b)];
                }
            }
        }
        let mut q = info.clone();
        for s in 0..m {
            q[(s, s)] += 1.0 / prior.tau2;
        }
        let q_chol = Cholesky::new(q).ok_or_else(|| EtaError::Singular("posterior precision".into()))?;
        Ok(Self { history, cov, prior: *prior, info, q_chol })
    }

    pub fn information(&self) -> &DMatrix<f64> {
        &self.info
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn indicator(&self, y: &Route) -> DVector<f64> {
        let mut e = DVector::zeros(self.info.nrows());
        for &s in y.segments() {
            e[s] = 1.0;
        }
        e
    }

    /// `w = Q⁻¹ e_y`
    pub fn weights(&self, y: &Route) -> DVector<f64> {
        self.q_chol.solve(&self.indicator(y))
    }

    pub fn form(&self, y: &Route) -> Result<LinearForm> {
        let w = self.weights(y);
        let mut form = LinearForm { intercept: self.prior.mu / self.prior.tau2 * w.sum(), terms: Vec::new() };
        for (n, route) in self.history.routes().iter().enumerate() {
            let wy = DVector::from_iterator(route.len(), route.segments().iter().map(|&s| w[s]));
            let c = trip_block(self.cov, route, n)?.solve(&wy);
            form.terms.extend(c.iter().enumerate().map(|(k, &a)| (n, k, a)));
        }
        Ok(form)
    }

    pub fn predict(&self, y: &Route, times: &[Vec<f64>]) -> Result<Prediction> {
        let value = self.form(y)?.apply(times);
        if !value.is_finite() {
            return Err(EtaError::NonFinite("Bayes-optimal prediction"));
        }
        Ok(Prediction { value, terms: Vec::new() })
    }

    /// Coefficients labelled by trip and segment, for display.
    pub fn explain(&self, y: &Route, net: &crate::network::RoadNetwork) -> Result<BayesExplain> {
        let form = self.form(y)?;
        let terms = form
            .terms
            .iter()
            .map(|&(n, k, a)| {
                let s = self.history.route(n).segments()[k];
                ExplainTerm { trip: n + 1, segment: s, label: format!("T'{},{}", n + 1, net.segment(s)), coefficient: a }
            })
            .collect();
        Ok(BayesExplain { intercept: form.intercept, terms })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{explicit_covariance, gram_covariance, GramLaw};
    use crate::fixtures::{self, random_fixture, FixtureCovariance};
    use crate::network::AdjacencyRule;
    use crate::trips::{synthesize_times, NeighborhoodKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prior() -> PriorSpec {
        PriorSpec::new(1.0, 0.2).unwrap()
    }

    // times T′_{n,k} = 10·(n+1) + k make every slot identifiable
    fn tagged_times(history: &RouteHistory) -> Vec<Vec<f64>> {
        history.routes().iter().enumerate().map(|(n, r)| (0..r.len()).map(|k| 10.0 * (n + 1) as f64 + k as f64).collect()).collect()
    }

    #[test]
    fn example_plain_averages() {
        let (_, history, y) = fixtures::example_history();
        let t = tagged_times(&history);
        let all = WeightRule::Threshold { c: 1 };
        let p = prior();
        // s1 from trips 1, 4, 5 at position 0; s2 from trip 2, 3 at position 0 and trip 4 at 1
        let seg = predict_segment(&history, &t, &y, all, None, &p).unwrap();
        let expected = (t[0][0] + t[3][0] + t[4][0]) / 3.0 + (t[1][0] + t[2][0] + t[3][1]) / 3.0;
        assert!((seg.value - expected).abs() < 1e-12);
        let gseg = predict_gseg(&history, &t, &Partition::whole(&y), all, None, &p).unwrap();
        assert!((gseg.value - (t[3][0] + t[3][1])).abs() < 1e-12);
        let nb = Neighborhood::given(vec![3, 4]);
        let route = predict_route(&history, &t, &y, &nb, all, None, &p).unwrap();
        assert!((route.value - (t[3][0] + t[3][1] + t[4][0] + t[4][1]) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_data_falls_back_to_prior() {
        let net = fixtures::example_network();
        let y = fixtures::example_route(&net);
        let history = RouteHistory::new(&net, Vec::new());
        let cov = fixtures::example_diffusion(&net, AdjacencyRule::default());
        let p = prior();
        for rule in [WeightRule::Ratio { lambda: 1.0 }, WeightRule::Threshold { c: 0 }, WeightRule::IndepOptimal, WeightRule::Optimal] {
            let seg = predict_segment(&history, &[], &y, rule, Some(&cov), &p).unwrap();
            assert_eq!(seg.value, 2.0);
            let nb = history.resolve(&y, NeighborhoodKind::OdBall { c: 2 });
            assert_eq!(predict_route(&history, &[], &y, &nb, rule, Some(&cov), &p).unwrap().value, 2.0);
        }
        let post = BayesPosterior::new(&history, &cov, &p).unwrap();
        assert!((post.predict(&y, &[]).unwrap().value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_weight() {
        let w = WeightRule::Ratio { lambda: 1.0 }.weight(3, 1, None, &prior()).unwrap();
        assert_eq!(w, 0.75);
        assert!(WeightRule::Ratio { lambda: 0.0 }.validate().is_err());
        assert!(matches!(WeightRule::IndepOptimal.weight(2, 1, None, &prior()), Err(EtaError::MissingCovariance(_))));
    }

    #[test]
    fn partition_validation() {
        let net = fixtures::example_network();
        let y = fixtures::example_long_route(&net);
        let seg = y.segments();
        assert!(Partition::new(&y, vec![vec![seg[0]], vec![seg[1], seg[2]]]).is_ok());
        assert!(Partition::new(&y, vec![vec![seg[0], seg[2]], vec![seg[1]]]).is_err());
        assert!(Partition::new(&y, vec![vec![seg[0]], vec![seg[1]]]).is_err());
        assert!(Partition::new(&y, vec![vec![seg[0]], vec![seg[0], seg[1], seg[2]]]).is_err());
        assert!(Partition::new(&y, vec![vec![], seg.to_vec()]).is_err());
        assert_eq!(Partition::from_sizes(&y, &[1, 2]).unwrap().units()[1], vec![seg[1], seg[2]]);
    }

    #[test]
    fn negative_pair_weights() {
        let net = fixtures::example_network();
        let history = RouteHistory::new(&net, fixtures::example_routes(&net));
        let y = fixtures::example_route(&net);
        let cov = fixtures::negative_pair_covariance(&net);
        let p = PriorSpec::new(1.0, 1.0).unwrap();
        let phi = gseg_weights(&history, &Partition::singletons(&y), WeightRule::Optimal, Some(&cov), &p).unwrap();
        // by hand: [[1/3 + 1, -0.9/9], [-0.9/9, 1/3 + 1]] φ = 1
        let a = 1.0 / 3.0 + 1.0;
        let b = -0.9 / 9.0;
        let expected = 1.0 / (a + b);
        assert!((phi[0] - expected).abs() < 1e-12 && (phi[1] - expected).abs() < 1e-12);
    }

    fn residual(partition: &Partition, counts: &UnitCounts, cov: &CovarianceModel, p: &PriorSpec, phi: &[f64]) -> f64 {
        let (lhs, rhs, active) = optimal_seg_system(partition, counts, cov, p);
        let x = DVector::from_iterator(active.len(), active.iter().map(|&a| phi[a]));
        (lhs * x - rhs).amax()
    }

    #[test]
    fn diagonal_bayes_matches_indep_rule() {
        for seed in 0..40 {
            let fx = random_fixture(seed, 4, 20, FixtureCovariance::Diagonal);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = synthesize_times(&fx.net, fx.history.routes().to_vec(), &fx.cov, &fx.prior, &mut rng).unwrap();
            let post = BayesPosterior::new(&ds.history, &fx.cov, &fx.prior).unwrap();
            let bayes = post.predict(&fx.y, &ds.times).unwrap().value;
            let seg = predict_segment(&ds.history, &ds.times, &fx.y, WeightRule::IndepOptimal, Some(&fx.cov), &fx.prior)
                .unwrap()
                .value;
            assert!((bayes - seg).abs() < 1e-10, "seed {seed}: {bayes} vs {seg}");
        }
    }

    #[test]
    fn whole_route_optimal_equals_indep_rule() {
        let (net, history, y) = fixtures::example_history();
        let cov = fixtures::example_diffusion(&net, AdjacencyRule::default());
        let p = prior();
        let whole = Partition::whole(&y);
        let opt = gseg_weights(&history, &whole, WeightRule::Optimal, Some(&cov), &p).unwrap();
        let ind = gseg_weights(&history, &whole, WeightRule::IndepOptimal, Some(&cov), &p).unwrap();
        assert!((opt[0] - ind[0]).abs() < 1e-12);
    }

    #[test]
    fn explain_lists_every_observation() {
        let (net, history, y) = fixtures::example_history();
        let cov = fixtures::example_diffusion(&net, AdjacencyRule::default());
        let post = BayesPosterior::new(&history, &cov, &prior()).unwrap();
        let ex = post.explain(&y, &net).unwrap();
        assert_eq!(ex.terms.len(), 15);
        assert_eq!(ex.terms[0].label, "T'1,(1,0)->(1,1)");
        // unbiasedness in μ: Σ coefficients·μ + intercept = |y|μ
        let total: f64 = ex.terms.iter().map(|t| t.coefficient).sum();
        assert!((total + ex.intercept - 2.0).abs() < 1e-10);
    }

    #[test]
    fn singular_trip_block_named() {
        let net = fixtures::example_network();
        let history = RouteHistory::new(&net, fixtures::example_routes(&net));
        let y = fixtures::example_route(&net);
        let (a, b) = (y.segments()[0], y.segments()[1]);
        let cov = explicit_covariance(net.num_segments(), &[(a, b, 1.0)], 1.0).unwrap();
        assert!(matches!(BayesPosterior::new(&history, &cov, &prior()), Err(EtaError::SingularTripBlock { trip: 3 })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn singleton_gseg_is_segment(seed in 0u64..100_000, kind in 0usize..3) {
            let kinds = [FixtureCovariance::Diffusion, FixtureCovariance::GramPositive, FixtureCovariance::GramSigned];
            let fx = random_fixture(seed, 4, 20, kinds[kind]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = synthesize_times(&fx.net, fx.history.routes().to_vec(), &fx.cov, &fx.prior, &mut rng).unwrap();
            for rule in [WeightRule::Ratio { lambda: 2.0 }, WeightRule::Threshold { c: 2 }, WeightRule::IndepOptimal, WeightRule::Optimal] {
                let a = predict_segment(&ds.history, &ds.times, &fx.y, rule, Some(&fx.cov), &fx.prior).unwrap();
                let b = predict_gseg(&ds.history, &ds.times, &Partition::singletons(&fx.y), rule, Some(&fx.cov), &fx.prior).unwrap();
                prop_assert_eq!(a.value, b.value);
            }
        }

        #[test]
        fn optimal_system_residual(seed in 0u64..100_000, sizes in proptest::collection::vec(1usize..4, 1..4)) {
            let fx = random_fixture(seed, 4, 20, FixtureCovariance::Diffusion);
            let partition = Partition::from_sizes(&fx.y, &sizes)
                .or_else(|_| Partition::from_sizes(&fx.y, &[fx.y.len()]))
                .unwrap();
            let counts = unit_counts(&fx.history, &partition);
            let phi = optimal_seg_weights(&partition, &counts, &fx.cov, &fx.prior).unwrap();
            prop_assert!(residual(&partition, &counts, &fx.cov, &fx.prior, &phi) <= 1e-10);
            for (a, &n) in counts.n.iter().enumerate() {
                if n == 0 {
                    prop_assert_eq!(phi[a], 0.0);
                }
            }
        }

        #[test]
        fn estimators_scale_linearly(seed in 0u64..100_000) {
            let fx = random_fixture(seed, 3, 15, FixtureCovariance::Diffusion);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = synthesize_times(&fx.net, fx.history.routes().to_vec(), &fx.cov, &fx.prior, &mut rng).unwrap();
            let doubled: Vec<Vec<f64>> = ds.times.iter().map(|t| t.iter().map(|x| 2.0 * x).collect()).collect();
            let p2 = PriorSpec { mu: 2.0 * fx.prior.mu, ..fx.prior };
            let nb = ds.history.resolve(&fx.y, NeighborhoodKind::OdBall { c: 1 });
            let rule = WeightRule::Ratio { lambda: 1.0 };
            let pairs = [
                (predict_segment(&ds.history, &ds.times, &fx.y, rule, None, &fx.prior).unwrap().value,
                 predict_segment(&ds.history, &doubled, &fx.y, rule, None, &p2).unwrap().value),
                (predict_route(&ds.history, &ds.times, &fx.y, &nb, rule, None, &fx.prior).unwrap().value,
                 predict_route(&ds.history, &doubled, &fx.y, &nb, rule, None, &p2).unwrap().value),
                (BayesPosterior::new(&ds.history, &fx.cov, &fx.prior).unwrap().predict(&fx.y, &ds.times).unwrap().value,
                 BayesPosterior::new(&ds.history, &fx.cov, &p2).unwrap().predict(&fx.y, &doubled).unwrap().value),
            ];
            for (one, two) in pairs {
                prop_assert!((2.0 * one - two).abs() < 1e-9 * (1.0 + two.abs()));
            }
        }

        #[test]
        fn forms_match_predictions(seed in 0u64..100_000) {
            let fx = random_fixture(seed, 4, 20, FixtureCovariance::GramSigned);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = synthesize_times(&fx.net, fx.history.routes().to_vec(), &fx.cov, &fx.prior, &mut rng).unwrap();
            let partition = Partition::singletons(&fx.y);
            let counts = unit_counts(&ds.history, &partition);
            let w = gseg_weights(&ds.history, &partition, WeightRule::Optimal, Some(&fx.cov), &fx.prior).unwrap();
            let form = gseg_form(&ds.history, &partition, &counts, &w, &fx.prior);
            let direct = predict_gseg(&ds.history, &ds.times, &partition, WeightRule::Optimal, Some(&fx.cov), &fx.prior).unwrap();
            prop_assert!((form.apply(&ds.times) - direct.value).abs() < 1e-10);
            let nb = ds.history.resolve(&fx.y, NeighborhoodKind::OdExact);
            let phi = route_weight(&ds.history, &fx.y, &nb, WeightRule::Optimal, Some(&fx.cov), &fx.prior).unwrap();
            let rf = route_form(&ds.history, &fx.y, &nb, phi, &fx.prior);
            let rd = predict_route(&ds.history, &ds.times, &fx.y, &nb, WeightRule::Optimal, Some(&fx.cov), &fx.prior).unwrap();
            prop_assert!((rf.apply(&ds.times) - rd.value).abs() < 1e-10);
        }
    }

    #[test]
    fn gram_fixture_posterior_builds() {
        let net = fixtures::example_network();
        let history = RouteHistory::new(&net, fixtures::example_routes(&net));
        let cov = gram_covariance(net.num_segments(), GramLaw::Unif0To1, 1);
        assert!(BayesPosterior::new(&history, &cov, &prior()).is_ok());
    }
}
