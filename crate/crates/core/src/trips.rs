//! Origin/destination law, route sampling, synthetic adjusted times and the
//! counting statistics the estimators consume.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceModel, PriorSpec};
use crate::error::{EtaError, Result};
use crate::network::{RoadNetwork, Vertex};

pub const RETRY_CAP: u64 = 1_000_000;

/// Ordered chain of distinct segments.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Route {
    segments: Vec<usize>,
    sorted: Vec<usize>,
    origin: Vertex,
    destination: Vertex,
}

impl Route {
    /// Route through consecutive grid vertices.
    pub fn from_vertices(net: &RoadNetwork, path: &[Vertex]) -> Result<Self> {
        if path.len() < 2 {
            return Err(EtaError::InvalidRoute("needs at least one segment".into()));
        }
        let segments = path
            .windows(2)
            .map(|w| {
                net.find(w[0], w[1]).ok_or_else(|| EtaError::InvalidRoute(format!("no segment {}->{}", w[0], w[1])))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_segments(net, segments)
    }

    pub fn from_segments(net: &RoadNetwork, segments: Vec<usize>) -> Result<Self> {
        let first = *segments.first().ok_or_else(|| EtaError::InvalidRoute("empty".into()))?;
        if let Some(&bad) = segments.iter().find(|&&s| s >= net.num_segments()) {
            return Err(EtaError::InvalidRoute(format!("unknown segment index {bad}")));
        }
        for w in segments.windows(2) {
            if net.segment(w[0]).head != net.segment(w[1]).tail {
                return Err(EtaError::InvalidRoute(format!(
                    "{} does not chain into {}",
                    net.segment(w[0]),
                    net.segment(w[1])
                )));
            }
        }
        let mut sorted = segments.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(EtaError::InvalidRoute("repeats a segment".into()));
        }
        let origin = net.segment(first).tail;
        let destination = net.segment(*segments.last().unwrap()).head;
        Ok(Self { segments, sorted, origin, destination })
    }

    pub fn segments(&self) -> &[usize] {
        &self.segments
    }

    /// Segment indices in increasing order.
    pub fn segment_set(&self) -> &[usize] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn origin(&self) -> Vertex {
        self.origin
    }

    pub fn destination(&self) -> Vertex {
        self.destination
    }

    pub fn contains(&self, s: usize) -> bool {
        self.sorted.binary_search(&s).is_ok()
    }

    /// Position of `s` along the route.
    pub fn position(&self, s: usize) -> Option<usize> {
        self.segments.iter().position(|&x| x == s)
    }

    pub fn contains_all(&self, set: &[usize]) -> bool {
        set.iter().all(|&s| self.contains(s))
    }

    /// Number of direction changes along the route.
    pub fn turns(&self, net: &RoadNetwork) -> usize {
        self.segments
            .windows(2)
            .filter(|w| net.segment(w[0]).direction() != net.segment(w[1]).direction())
            .count()
    }
}

/// Symmetric beta-binomial law of one coordinate on `{0..=p}`.
#[derive(Debug, Clone)]
pub struct OdLaw {
    alpha: f64,
    p: u32,
    pmf: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

impl OdLaw {
    pub fn new(alpha: f64, p: u32) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(EtaError::InvalidParameter(format!("alpha must be positive, got {alpha}")));
        }
        // pmf(0) = Π (α+i)/(2α+i); successive ratios follow from the beta recursion
        let mut pmf = Vec::with_capacity(p as usize + 1);
        let mut cur: f64 = (0..p).map(|i| (alpha + i as f64) / (2.0 * alpha + i as f64)).product();
        for k in 0..=p {
            pmf.push(cur);
            if k < p {
                let (kf, pf) = (k as f64, p as f64);
                cur *= (pf - kf) / (kf + 1.0) * (alpha + kf) / (alpha + pf - kf - 1.0);
            }
        }
        let sampler = WeightedIndex::new(&pmf)
            .map_err(|e| EtaError::InvalidParameter(format!("beta-binomial weights: {e}")))?;
        Ok(Self { alpha, p, pmf, sampler })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn p(&self) -> u32 {
        self.p
    }

    pub fn pmf(&self, k: u32) -> f64 {
        self.pmf.get(k as usize).copied().unwrap_or(0.0)
    }

    pub fn sample_coord<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        self.sampler.sample(rng) as u32
    }

    /// Independent coordinates.
    pub fn sample_vertex<R: Rng + ?Sized>(&self, rng: &mut R) -> Vertex {
        let i = self.sample_coord(rng);
        let j = self.sample_coord(rng);
        Vertex::new(i, j)
    }
}

fn straight(from: Vertex, to: Vertex) -> Vec<Vertex> {
    let mut path = vec![from];
    let mut cur = from;
    while cur != to {
        if cur.i != to.i {
            cur.i = if to.i > cur.i { cur.i + 1 } else { cur.i - 1 };
        } else {
            cur.j = if to.j > cur.j { cur.j + 1 } else { cur.j - 1 };
        }
        path.push(cur);
    }
    path
}

/// All shortest routes from `origin` to `destination` with the fewest turns:
/// the straight route when the endpoints are aligned, else the two L-shapes.
pub fn route_candidates(net: &RoadNetwork, origin: Vertex, destination: Vertex) -> Result<Vec<Route>> {
    if origin == destination {
        return Err(EtaError::InvalidRoute("origin equals destination".into()));
    }
    if !net.contains_vertex(origin) || !net.contains_vertex(destination) {
        return Err(EtaError::InvalidRoute(format!("{origin}->{destination} leaves the grid")));
    }
    if origin.i == destination.i || origin.j == destination.j {
        return Ok(vec![Route::from_vertices(net, &straight(origin, destination))?]);
    }
    let mut out = Vec::with_capacity(2);
    for corner in [Vertex::new(destination.i, origin.j), Vertex::new(origin.i, destination.j)] {
        let mut path = straight(origin, corner);
        path.extend(straight(corner, destination).into_iter().skip(1));
        out.push(Route::from_vertices(net, &path)?);
    }
    Ok(out)
}

/// Draws an origin/destination pair (resampling collisions) and one of the
/// minimal-turn shortest routes uniformly.
pub fn sample_route<R: Rng + ?Sized>(law: &OdLaw, net: &RoadNetwork, rng: &mut R) -> Result<Route> {
    for _ in 0..RETRY_CAP {
        let origin = law.sample_vertex(rng);
        let destination = law.sample_vertex(rng);
        if origin == destination {
            continue;
        }
        return choose_route(net, origin, destination, rng);
    }
    Err(EtaError::RetryCapExceeded(RETRY_CAP))
}

/// Uniform pick among [`route_candidates`]; no draw when the route is unique.
pub fn choose_route<R: Rng + ?Sized>(net: &RoadNetwork, origin: Vertex, destination: Vertex, rng: &mut R) -> Result<Route> {
    let mut cands = route_candidates(net, origin, destination)?;
    let pick = if cands.len() == 1 { 0 } else { rng.random_range(0..cands.len()) };
    Ok(cands.swap_remove(pick))
}

pub fn sample_routes<R: Rng + ?Sized>(law: &OdLaw, net: &RoadNetwork, n: usize, rng: &mut R) -> Result<Vec<Route>> {
    (0..n).map(|_| sample_route(law, net, rng)).collect()
}

/// Historical routes with per-segment posting lists and an OD index.
#[derive(Debug, Clone)]
pub struct RouteHistory {
    p: u32,
    routes: Vec<Route>,
    postings: Vec<Vec<u32>>,
    od_index: HashMap<(Vertex, Vertex), Vec<u32>>,
}

impl RouteHistory {
    pub fn new(net: &RoadNetwork, routes: Vec<Route>) -> Self {
        let mut postings = vec![Vec::new(); net.num_segments()];
        let mut od_index: HashMap<(Vertex, Vertex), Vec<u32>> = HashMap::new();
        for (n, r) in routes.iter().enumerate() {
            for &s in r.segments() {
                postings[s].push(n as u32);
            }
            od_index.entry((r.origin(), r.destination())).or_default().push(n as u32);
        }
        Self { p: net.p(), routes, postings, od_index }
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    pub fn route(&self, n: usize) -> &Route {
        &self.routes[n]
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    pub fn num_segments(&self) -> usize {
        self.postings.len()
    }

    /// Trips traversing `s`, in increasing order.
    pub fn trips_through(&self, s: usize) -> &[u32] {
        &self.postings[s]
    }

    /// `N_s`
    pub fn n_s(&self, s: usize) -> usize {
        self.postings[s].len()
    }

    /// `N_{s∪t}`: trips traversing both.
    pub fn n_pair(&self, s: usize, t: usize) -> usize {
        if s == t {
            return self.n_s(s);
        }
        let (short, other) = if self.n_s(s) <= self.n_s(t) { (s, t) } else { (t, s) };
        self.postings[short].iter().filter(|&&n| self.routes[n as usize].contains(other)).count()
    }

    /// Trips whose routes contain every segment of `set`.
    pub fn trips_containing(&self, set: &[usize]) -> Vec<usize> {
        let Some(&rarest) = set.iter().min_by_key(|&&s| self.n_s(s)) else {
            return (0..self.len()).collect();
        };
        self.postings[rarest]
            .iter()
            .map(|&n| n as usize)
            .filter(|&n| self.routes[n].contains_all(set))
            .collect()
    }

    /// `N_S`
    pub fn n_set(&self, set: &[usize]) -> usize {
        self.trips_containing(set).len()
    }

    /// `N_{S∪T}`
    pub fn n_union(&self, s_set: &[usize], t_set: &[usize]) -> usize {
        let mut both: Vec<usize> = s_set.iter().chain(t_set).copied().collect();
        both.sort_unstable();
        both.dedup();
        self.n_set(&both)
    }

    pub fn with_od(&self, origin: Vertex, destination: Vertex) -> &[u32] {
        self.od_index.get(&(origin, destination)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn resolve(&self, y: &Route, kind: NeighborhoodKind) -> Neighborhood {
        let members = match kind {
            NeighborhoodKind::ExactRoute => self
                .with_od(y.origin(), y.destination())
                .iter()
                .map(|&n| n as usize)
                .filter(|&n| self.routes[n].segments() == y.segments())
                .collect(),
            NeighborhoodKind::OdExact => self.with_od(y.origin(), y.destination()).iter().map(|&n| n as usize).collect(),
            NeighborhoodKind::OdBall { c } => self.od_ball(y, c),
            NeighborhoodKind::OdBallGrowing { .. } => self.od_ball(y, kind.radius(self.p).unwrap_or(0)),
            NeighborhoodKind::Given => Vec::new(),
        };
        Neighborhood { kind, members }
    }

    fn od_ball(&self, y: &Route, c: u32) -> Vec<usize> {
        let near = |a: Vertex, b: Vertex| a.l1(b) <= c;
        let ball_size = 2 * (c as usize) * (c as usize + 1) + 1;
        let mut members: Vec<usize> = if ball_size * ball_size > self.len() {
            (0..self.len())
                .filter(|&n| {
                    let r = &self.routes[n];
                    near(r.origin(), y.origin()) && near(r.destination(), y.destination())
                })
                .collect()
        } else {
            let ball = |center: Vertex| -> Vec<Vertex> {
                let (c, p) = (c as i64, self.p as i64);
                let mut out = Vec::new();
                for di in -c..=c {
                    let rest = c - di.abs();
                    for dj in -rest..=rest {
                        let (i, j) = (center.i as i64 + di, center.j as i64 + dj);
                        if (0..=p).contains(&i) && (0..=p).contains(&j) {
                            out.push(Vertex::new(i as u32, j as u32));
                        }
                    }
                }
                out
            };
            let origins = ball(y.origin());
            let dests = ball(y.destination());
            let mut out = Vec::new();
            for &o in &origins {
                for &d in &dests {
                    out.extend(self.with_od(o, d).iter().map(|&n| n as usize));
                }
            }
            out.sort_unstable();
            out
        };
        members.dedup();
        members
    }

    /// Counters of a neighborhood relative to the predicting route.
    pub fn neighborhood_counts(&self, y: &Route, nbhd: &Neighborhood) -> NeighborhoodCounts {
        let m = nbhd.members.len();
        let mut n_s_delta: HashMap<usize, usize> = HashMap::new();
        let mut total_len = 0usize;
        for &n in &nbhd.members {
            let r = &self.routes[n];
            total_len += r.len();
            for &s in r.segments() {
                *n_s_delta.entry(s).or_default() += 1;
            }
        }
        let on_route: Vec<usize> = y.segments().iter().map(|s| n_s_delta.get(s).copied().unwrap_or(0)).collect();
        let mut off_route: Vec<(usize, usize)> =
            n_s_delta.iter().filter(|(s, _)| !y.contains(**s)).map(|(&s, &c)| (s, c)).collect();
        off_route.sort_unstable();
        NeighborhoodCounts {
            m,
            mean_len: if m == 0 { 0.0 } else { total_len as f64 / m as f64 },
            on_route,
            off_route,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NeighborhoodKind {
    ExactRoute,
    OdExact,
    OdBall { c: u32 },
    /// Ball of radius `⌈fraction·p⌉`.
    OdBallGrowing { fraction: f64 },
    /// Membership listed by the caller; see [`Neighborhood::given`].
    Given,
}

impl NeighborhoodKind {
    pub fn radius(&self, p: u32) -> Option<u32> {
        match *self {
            NeighborhoodKind::OdBall { c } => Some(c),
            NeighborhoodKind::OdBallGrowing { fraction } => Some((fraction * p as f64 - 1e-12).ceil().max(0.0) as u32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub kind: NeighborhoodKind,
    /// Member trip indices, increasing.
    pub members: Vec<usize>,
}

impl Neighborhood {
    pub fn given(mut members: Vec<usize>) -> Self {
        members.sort_unstable();
        members.dedup();
        Self { kind: NeighborhoodKind::Given, members }
    }
}

/// `M_δ`, `ȳ_δ` and `N_s^δ` split into on-route and off-route segments.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodCounts {
    pub m: usize,
    pub mean_len: f64,
    /// `N_s^δ` for each segment of `y`, in route order.
    pub on_route: Vec<usize>,
    /// `(s, N_s^δ)` for traversed segments not on `y`, by segment index.
    pub off_route: Vec<(usize, usize)>,
}

/// Historical routes with adjusted times and the true segment effects.
#[derive(Debug, Clone)]
pub struct TripDataset {
    pub history: RouteHistory,
    /// `times[n][k]` is `T′` on the k-th segment of route n.
    pub times: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TripLine {
    route: Vec<usize>,
    times: Vec<f64>,
}

impl TripDataset {
    pub fn new(history: RouteHistory, times: Vec<Vec<f64>>, theta: Vec<f64>) -> Result<Self> {
        if times.len() != history.len() {
            return Err(EtaError::Dimension { expected: history.len(), got: times.len() });
        }
        for (r, t) in history.routes().iter().zip(&times) {
            if r.len() != t.len() {
                return Err(EtaError::Dimension { expected: r.len(), got: t.len() });
            }
        }
        Ok(Self { history, times, theta })
    }

    /// One JSON object per trip.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (r, t) in self.history.routes().iter().zip(&self.times) {
            let line = TripLine { route: r.segments().to_vec(), times: t.clone() };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(net: &RoadNetwork, text: &str, theta: Vec<f64>) -> Result<Self> {
        let mut routes = Vec::new();
        let mut times = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let trip: TripLine = serde_json::from_str(line)?;
            routes.push(Route::from_segments(net, trip.route)?);
            times.push(trip.times);
        }
        Self::new(RouteHistory::new(net, routes), times, theta)
    }
}

/// Per-route square-root factors `L` with `L Lᵀ = Σ_y`, shared across trips
/// that follow the same route.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    factors: Vec<DMatrix<f64>>,
    which: Vec<usize>,
}

impl NoiseSampler {
    pub fn new(routes: &[Route], cov: &CovarianceModel) -> Result<Self> {
        let mut seen: HashMap<&[usize], usize> = HashMap::new();
        let mut factors = Vec::new();
        let mut which = Vec::with_capacity(routes.len());
        for (n, r) in routes.iter().enumerate() {
            let k = match seen.get(r.segments()) {
                Some(&k) => k,
                None => {
                    let f = sqrt_factor(cov.submatrix(r.segments()), n)?;
                    factors.push(f);
                    seen.insert(r.segments(), factors.len() - 1);
                    factors.len() - 1
                }
            };
            which.push(k);
        }
        Ok(Self { factors, which })
    }

    /// One draw of `ε_n` per trip.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        self.which
            .iter()
            .map(|&k| {
                let f = &self.factors[k];
                let z = DVector::from_fn(f.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
                (f * z).iter().copied().collect()
            })
            .collect()
    }
}

fn sqrt_factor(block: DMatrix<f64>, trip: usize) -> Result<DMatrix<f64>> {
    if let Some(chol) = block.clone().cholesky() {
        return Ok(chol.l());
    }
    // PSD but singular blocks (e.g. Σ = 0) go through the eigen route
    let eig = SymmetricEigen::new(block);
    let max = eig.eigenvalues.max().max(0.0);
    let min = eig.eigenvalues.min();
    if min < -1e-8 * max.max(1e-300) && min < -1e-14 {
        return Err(EtaError::SingularTripBlock { trip });
    }
    let mut f = eig.eigenvectors;
    for (k, lambda) in eig.eigenvalues.iter().enumerate() {
        f.column_mut(k).scale_mut(lambda.max(0.0).sqrt());
    }
    Ok(f)
}

/// Draws `θ_s ~ N(μ, τ²)` per segment, then `T′ = θ + ε` per trip.
pub fn synthesize_times<R: Rng + ?Sized>(
    net: &RoadNetwork,
    routes: Vec<Route>,
    cov: &CovarianceModel,
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<TripDataset> {
    if cov.dim() != net.num_segments() {
        return Err(EtaError::Dimension { expected: net.num_segments(), got: cov.dim() });
    }
    let sd = prior.tau2.sqrt();
    let theta: Vec<f64> =
        (0..net.num_segments()).map(|_| prior.mu + sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let noise = NoiseSampler::new(&routes, cov)?.sample(rng);
    let times = routes
        .iter()
        .zip(noise)
        .map(|(r, eps)| r.segments().iter().zip(eps).map(|(&s, e)| theta[s] + e).collect())
        .collect();
    TripDataset::new(RouteHistory::new(net, routes), times, theta)
}
