//! The worked-example grid and small random fixtures for property checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::covariance::{
    diffusion_covariance, explicit_covariance, gram_covariance, CovarianceModel, GramLaw, LaplacianVariant, PriorSpec,
};
use crate::network::{AdjacencyRule, RoadNetwork, SegmentGraph, Vertex};
use crate::trips::{sample_routes, OdLaw, Route, RouteHistory};

fn path(net: &RoadNetwork, pts: &[(u32, u32)]) -> Route {
    let verts: Vec<Vertex> = pts.iter().map(|&(i, j)| Vertex::new(i, j)).collect();
    Route::from_vertices(net, &verts).expect("fixture route is valid")
}

/// The 3×3 grid.
pub fn example_network() -> RoadNetwork {
    RoadNetwork::build_grid(3).expect("p = 3")
}

/// Six historical trips on the 3×3 grid.
pub fn example_routes(net: &RoadNetwork) -> Vec<Route> {
    vec![
        path(net, &[(1, 0), (1, 1), (2, 1), (3, 1)]),
        path(net, &[(1, 1), (1, 2), (2, 2), (3, 2)]),
        path(net, &[(1, 1), (1, 2), (1, 3), (2, 3)]),
        path(net, &[(1, 0), (1, 1), (1, 2)]),
        path(net, &[(1, 0), (1, 1), (0, 1)]),
        path(net, &[(1, 3), (2, 3), (3, 3)]),
    ]
}

/// Predicting route `(1,0)→(1,1)→(1,2)`.
pub fn example_route(net: &RoadNetwork) -> Route {
    path(net, &[(1, 0), (1, 1), (1, 2)])
}

/// Predicting route `(1,2)→(1,3)→(2,3)→(3,3)` of the three-segment example.
pub fn example_long_route(net: &RoadNetwork) -> Route {
    path(net, &[(1, 2), (1, 3), (2, 3), (3, 3)])
}

pub fn example_history() -> (RoadNetwork, RouteHistory, Route) {
    let net = example_network();
    let routes = example_routes(&net);
    let y = example_route(&net);
    let history = RouteHistory::new(&net, routes);
    (net, history, y)
}

/// `e^{−𝓛}` on the 3×3 grid segment graph.
pub fn example_diffusion(net: &RoadNetwork, rule: AdjacencyRule) -> CovarianceModel {
    diffusion_covariance(&SegmentGraph::build(net, rule), 1.0, 1.0, 0.0, LaplacianVariant::Symmetric)
        .expect("grid graph has no isolated segments")
}

/// Unit variances with `σ_{s₁,s₂} = −0.9` on the example route.
pub fn negative_pair_covariance(net: &RoadNetwork) -> CovarianceModel {
    let y = example_route(net);
    let (a, b) = (y.segments()[0], y.segments()[1]);
    explicit_covariance(net.num_segments(), &[(a, a, 1.0), (b, b, 1.0), (a, b, -0.9)], 1.0).expect("valid")
}

/// `σ² = (0.1, 10, 10)` with `σ_{s₃,s₄} = 1` on the three-segment route.
pub fn uneven_variance_covariance(net: &RoadNetwork) -> CovarianceModel {
    let y = example_long_route(net);
    let (a, b, c) = (y.segments()[0], y.segments()[1], y.segments()[2]);
    explicit_covariance(
        net.num_segments(),
        &[(a, a, 0.1), (b, b, 10.0), (c, c, 10.0), (a, b, 1.0), (a, c, 0.0), (b, c, 0.0)],
        1.0,
    )
    .expect("valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureCovariance {
    /// Diffusion kernel plus white noise: elementwise nonnegative.
    Diffusion,
    /// Gram matrix of `U[0,1]` entries: elementwise nonnegative.
    GramPositive,
    /// Gram matrix of `U[−1,1]` entries: mixed signs.
    GramSigned,
    /// Independent segments with random variances.
    Diagonal,
}

/// Small random problem: grid, history, predicting route, covariance, prior.
#[derive(Debug, Clone)]
pub struct RandomFixture {
    pub net: RoadNetwork,
    pub history: RouteHistory,
    pub y: Route,
    pub cov: CovarianceModel,
    pub prior: PriorSpec,
    pub seed: u64,
}

/// Draws `p ∈ 1..=max_p`, `N ∈ 0..=max_n` trips and a predicting route. With
/// probability one half the route is a copy of a historical trip so the
/// exact-route neighborhood is often non-empty.
pub fn random_fixture(seed: u64, max_p: u32, max_n: usize, kind: FixtureCovariance) -> RandomFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(1..=max_p);
    let n = rng.random_range(0..=max_n);
    let alpha = [0.3, 1.0, 3.0][rng.random_range(0..3)];
    let net = RoadNetwork::build_grid(p).expect("p >= 1");
    let law = OdLaw::new(alpha, p).expect("alpha > 0");
    let routes = sample_routes(&law, &net, n, &mut rng).expect("routes");
    let y = if !routes.is_empty() && rng.random_bool(0.5) {
        routes[rng.random_range(0..routes.len())].clone()
    } else {
        sample_routes(&law, &net, 1, &mut rng).expect("route").remove(0)
    };
    let m = net.num_segments();
    let cov = match kind {
        FixtureCovariance::Diffusion => {
            let rule = AdjacencyRule::ALL[rng.random_range(0..AdjacencyRule::ALL.len())];
            let (u, v, white) = (rng.random_range(0.2..3.0), rng.random_range(0.2..3.0), rng.random_range(0.0..1.0));
            diffusion_covariance(&SegmentGraph::build(&net, rule), u, v, white, LaplacianVariant::Symmetric)
                .expect("diffusion")
        }
        FixtureCovariance::GramPositive => scaled(gram_covariance(m, GramLaw::Unif0To1, rng.random()), m),
        FixtureCovariance::GramSigned => scaled(gram_covariance(m, GramLaw::UnifNeg1To1, rng.random()), m),
        FixtureCovariance::Diagonal => {
            let entries: Vec<_> = (0..m).map(|s| (s, s, rng.random_range(0.1..3.0))).collect();
            explicit_covariance(m, &entries, 1.0).expect("diagonal")
        }
    };
    let prior = PriorSpec { mu: rng.random_range(0.5..2.0), tau2: rng.random_range(0.1..1.0) };
    let history = RouteHistory::new(&net, routes);
    RandomFixture { net, history, y, cov, prior, seed }
}

// Gram entries shrink like 1/m; rescale to unit-order variances
fn scaled(cov: CovarianceModel, m: usize) -> CovarianceModel {
    let sigma = cov.sigma() * (m as f64 * 3.0);
    CovarianceModel::from_matrix(sigma, cov.provenance().to_string() + " x3m").expect("scaled Gram")
}
