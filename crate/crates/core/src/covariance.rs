//! Covariance models for segment travel-time errors.

use std::fmt;
use std::io::{Read, Write};
use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EtaError, Result};
use crate::network::{AdjacencyRule, RoadNetwork, SegmentGraph};

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_REL_TOL: f64 = 1e-8;

/// Prior on segment effects: `θ_s ~ N(mu, tau2)` i.i.d.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mu: f64,
    pub tau2: f64,
}

impl PriorSpec {
    pub fn new(mu: f64, tau2: f64) -> Result<Self> {
        let prior = Self { mu, tau2 };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau2 > 0.0 && self.tau2.is_finite()) || !self.mu.is_finite() {
            return Err(EtaError::InvalidParameter(format!(
                "prior needs finite mu and tau2 > 0, got mu={} tau2={}",
                self.mu, self.tau2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianVariant {
    /// `D^{-1/2} (D - A) D^{-1/2}`
    #[default]
    Symmetric,
    /// `D^{-1/2} (D - A) D^{1/2}`, taken literally: diagonal `d_a`, not
    /// symmetric unless the graph is regular.
    AsPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramLaw {
    UnifNeg1To1,
    Unif0To1,
}

impl GramLaw {
    fn sample<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            GramLaw::UnifNeg1To1 => rng.random_range(-1.0..=1.0),
            GramLaw::Unif0To1 => rng.random_range(0.0..=1.0),
        }
    }
}

/// How a covariance model over a network's segments is built. Serialized with
/// a `kind` tag so it can live in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceSpec {
    Diffusion {
        u: f64,
        v: f64,
        #[serde(default)]
        white: f64,
        #[serde(default)]
        laplacian: LaplacianVariant,
    },
    Gram {
        law: GramLaw,
        seed: u64,
    },
    Explicit {
        /// `(s, t, value)` with segment indices; mirrored across the diagonal.
        entries: Vec<(usize, usize, f64)>,
        default_diag: f64,
    },
}

impl CovarianceSpec {
    pub fn build(&self, net: &RoadNetwork, rule: AdjacencyRule) -> Result<CovarianceModel> {
        match self {
            CovarianceSpec::Diffusion { u, v, white, laplacian } => {
                let g = SegmentGraph::build(net, rule);
                diffusion_covariance(&g, *u, *v, *white, *laplacian)
            }
            CovarianceSpec::Gram { law, seed } => Ok(gram_covariance(net.num_segments(), *law, *seed)),
            CovarianceSpec::Explicit { entries, default_diag } => {
                explicit_covariance(net.num_segments(), entries, *default_diag)
            }
        }
    }

    /// Whether the model is Gaussian-compatible (every spec here is).
    pub fn is_gaussian(&self) -> bool {
        true
    }

    /// Parses the compact command-line form, e.g. `diffusion:u=1,v=1,white=1`
    /// or `gram:law=unif01,seed=7`. Unknown keys are rejected; a `p=` key is
    /// accepted and returned separately.
    pub fn parse_descriptor(text: &str) -> Result<(Self, Option<u32>)> {
        let (kind, rest) = text.split_once(':').unwrap_or((text, ""));
        let mut p = None;
        let mut kv = Vec::new();
        for part in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| EtaError::Config(format!("expected key=value, got {part:?}")))?;
            if k == "p" {
                p = Some(v.parse().map_err(|_| EtaError::Config(format!("bad grid size {v:?}")))?);
            } else {
                kv.push((k.to_string(), v.to_string()));
            }
        }
        let num = |key: &str, default: Option<f64>| -> Result<f64> {
            match kv.iter().find(|(k, _)| k == key) {
                Some((_, v)) => v.parse().map_err(|_| EtaError::Config(format!("bad value for {key}: {v:?}"))),
                None => default.ok_or_else(|| EtaError::Config(format!("missing {key}"))),
            }
        };
        let allow = |keys: &[&str]| -> Result<()> {
            match kv.iter().find(|(k, _)| !keys.contains(&k.as_str())) {
                Some((k, _)) => Err(EtaError::Config(format!("unknown key {k:?} for {kind}"))),
                None => Ok(()),
            }
        };
        let spec = match kind {
            "diffusion" => {
                allow(&["u", "v", "white", "laplacian"])?;
                let laplacian = match kv.iter().find(|(k, _)| k == "laplacian").map(|(_, v)| v.as_str()) {
                    None | Some("symmetric") => LaplacianVariant::Symmetric,
                    Some("as_printed") => LaplacianVariant::AsPrinted,
                    Some(other) => return Err(EtaError::Config(format!("unknown laplacian {other:?}"))),
                };
                CovarianceSpec::Diffusion {
                    u: num("u", Some(1.0))?,
                    v: num("v", Some(1.0))?,
                    white: num("white", Some(0.0))?,
                    laplacian,
                }
            }
            "gram" => {
                allow(&["law", "seed"])?;
                let law = match kv.iter().find(|(k, _)| k == "law").map(|(_, v)| v.as_str()) {
                    Some("unif01") | Some("unif_0_1") => GramLaw::Unif0To1,
                    None | Some("unif11") | Some("unif_neg1_1") => GramLaw::UnifNeg1To1,
                    Some(other) => return Err(EtaError::Config(format!("unknown law {other:?}"))),
                };
                CovarianceSpec::Gram { law, seed: num("seed", Some(0.0))? as u64 }
            }
            "identity" => {
                allow(&[])?;
                CovarianceSpec::Explicit { entries: Vec::new(), default_diag: 1.0 }
            }
            other => return Err(EtaError::Config(format!("unknown covariance kind {other:?}"))),
        };
        Ok((spec, p))
    }
}

impl fmt::Display for CovarianceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovarianceSpec::Diffusion { u, v, white, laplacian } => {
                write!(f, "diffusion(u={u}, v={v}, white={white}, {laplacian:?})")
            }
            CovarianceSpec::Gram { law, seed } => write!(f, "gram({law:?}, seed={seed})"),
            CovarianceSpec::Explicit { entries, default_diag } => {
                write!(f, "explicit({} entries, diag={default_diag})", entries.len())
            }
        }
    }
}

/// Dense symmetric PSD covariance over segment indices, with a lazily cached
/// precision matrix.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    sigma: DMatrix<f64>,
    precision: OnceLock<std::result::Result<DMatrix<f64>, String>>,
    provenance: String,
}

impl CovarianceModel {
    /// Wraps a matrix after checking symmetry and positive semidefiniteness.
    pub fn from_matrix(sigma: DMatrix<f64>, provenance: impl Into<String>) -> Result<Self> {
        check_symmetric(&sigma)?;
        check_psd(&sigma)?;
        Ok(Self::trusted(sigma, provenance))
    }

    // PSD by construction; only symmetrize rounding noise away
    fn trusted(mut sigma: DMatrix<f64>, provenance: impl Into<String>) -> Self {
        symmetrize(&mut sigma);
        Self { sigma, precision: OnceLock::new(), provenance: provenance.into() }
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.sigma[(s, t)]
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// `Ψ = Σ⁻¹`, factored once and cached.
    pub fn precision(&self) -> Result<&DMatrix<f64>> {
        let cached = self.precision.get_or_init(|| {
            let chol = Cholesky::new(self.sigma.clone())
                .ok_or_else(|| "Cholesky factorization failed".to_string())?;
            let inv = chol.inverse();
            if inv.iter().all(|x| x.is_finite()) {
                Ok(inv)
            } else {
                Err("inverse has non-finite entries".to_string())
            }
        });
        cached.as_ref().map_err(|e| EtaError::Singular(e.clone()))
    }

    /// `Σ_{s∈S, t∈T} σ_{s,t}`.
    pub fn pair_sum(&self, s_set: &[usize], t_set: &[usize]) -> f64 {
        let mut total = 0.0;
        for &s in s_set {
            for &t in t_set {
                total += self.sigma[(s, t)];
            }
        }
        total
    }

    /// Principal sub-matrix on `idx` (in the given order).
    pub fn submatrix(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.sigma[(idx[a], idx[b])])
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| i == j || self.sigma[(i, j)] == 0.0))
    }

    /// Whether every entry among `idx` is nonnegative, up to roundoff of
    /// `1e-12` times the largest entry.
    pub fn nonnegative_on(&self, idx: &[usize]) -> bool {
        let floor = -1e-12 * self.sigma.amax();
        idx.iter().all(|&s| idx.iter().all(|&t| self.sigma[(s, t)] >= floor))
    }

    pub fn diagnostics(&self, routes: &[Vec<usize>]) -> AssumptionDiagnostics {
        assumption_diagnostics(self, routes)
    }

    /// Lower triangle as CSV: a header of segment indices, then row `k` with
    /// `k + 1` values.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        let n = self.dim();
        w.write_record((0..n).map(|k| k.to_string()))?;
        for i in 0..n {
            w.write_record((0..=i).map(|j| format!("{:e}", self.sigma[(i, j)])))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().flexible(true).has_headers(true).from_reader(input);
        let n = r.headers()?.len();
        let mut sigma = DMatrix::zeros(n, n);
        let mut rows = 0;
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if i >= n || rec.len() != i + 1 {
                return Err(EtaError::Dimension { expected: i + 1, got: rec.len() });
            }
            for (j, field) in rec.iter().enumerate() {
                let x: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| EtaError::InvalidParameter(format!("bad number {field:?}")))?;
                sigma[(i, j)] = x;
                sigma[(j, i)] = x;
            }
            rows += 1;
        }
        if rows != n {
            return Err(EtaError::Dimension { expected: n, got: rows });
        }
        Self::from_matrix(sigma, "csv")
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(EtaError::Dimension { expected: m.nrows(), got: m.ncols() });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(EtaError::NonFinite("covariance"));
    }
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if worst > SYMMETRY_TOL {
        return Err(EtaError::NotSymmetric(worst));
    }
    Ok(())
}

fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max().max(0.0);
    if min < -PSD_REL_TOL * max || (max == 0.0 && min < 0.0) {
        return Err(EtaError::NotPsd { min_eigenvalue: min });
    }
    Ok(())
}

/// Normalized Laplacian of the segment graph.
pub fn normalized_laplacian(g: &SegmentGraph, variant: LaplacianVariant) -> Result<DMatrix<f64>> {
    let n = g.len();
    let deg = g.degrees();
    if let Some(segment) = deg.iter().position(|&d| d == 0) {
        return Err(EtaError::ZeroDegree { segment });
    }
    let mut lap = DMatrix::zeros(n, n);
    for a in 0..n {
        let da = deg[a] as f64;
        lap[(a, a)] = match variant {
            LaplacianVariant::Symmetric => 1.0,
            LaplacianVariant::AsPrinted => da,
        };
        for &b in g.neighbors(a) {
            let db = deg[b] as f64;
            lap[(a, b)] = match variant {
                LaplacianVariant::Symmetric => -1.0 / (da * db).sqrt(),
                LaplacianVariant::AsPrinted => -(db / da).sqrt(),
            };
        }
    }
    Ok(lap)
}

/// `Σ = u·exp(−v𝓛) + white·I`.
pub fn diffusion_covariance(
    g: &SegmentGraph,
    u: f64,
    v: f64,
    white: f64,
    variant: LaplacianVariant,
) -> Result<CovarianceModel> {
    if !(u >= 0.0 && v >= 0.0 && white >= 0.0) {
        return Err(EtaError::InvalidParameter(format!("diffusion needs u, v, white >= 0, got {u}, {v}, {white}")));
    }
    let n = g.len();
    let provenance = format!("diffusion(u={u}, v={v}, white={white}, {variant:?})");
    let kernel = diffusion_kernel(g, v, variant)?;
    let mut sigma = kernel * u;
    for a in 0..n {
        sigma[(a, a)] += white;
    }
    if sigma.iter().any(|x| !x.is_finite()) {
        return Err(EtaError::NonFinite("diffusion covariance"));
    }
    match variant {
        LaplacianVariant::Symmetric => Ok(CovarianceModel::trusted(sigma, provenance)),
        LaplacianVariant::AsPrinted => {
            symmetrize(&mut sigma);
            CovarianceModel::from_matrix(sigma, provenance)
        }
    }
}

/// `exp(−v𝓛)`. For [`LaplacianVariant::AsPrinted`] the result is generally
/// not symmetric.
pub fn diffusion_kernel(g: &SegmentGraph, v: f64, variant: LaplacianVariant) -> Result<DMatrix<f64>> {
    let lap = normalized_laplacian(g, variant)?;
    Ok(match variant {
        LaplacianVariant::Symmetric => expm_symmetric(lap, -v),
        LaplacianVariant::AsPrinted => {
            // similar to the unnormalized D - A
            let deg = g.degrees();
            let n = g.len();
            let plain = DMatrix::from_fn(n, n, |a, b| lap[(a, b)] * (deg[a] as f64 / deg[b] as f64).sqrt());
            let mut e = expm_symmetric(plain, -v);
            for a in 0..n {
                for b in 0..n {
                    e[(a, b)] *= (deg[b] as f64 / deg[a] as f64).sqrt();
                }
            }
            e
        }
    })
}

// exp(scale·M) for symmetric M
fn expm_symmetric(m: DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let vecs = eig.eigenvectors;
    let mut scaled = vecs.clone();
    for (k, lambda) in eig.eigenvalues.iter().enumerate() {
        let f = (scale * lambda).exp();
        scaled.column_mut(k).scale_mut(f);
    }
    scaled * vecs.transpose()
}

/// `Σ = KᵀK / m²` with i.i.d. entries of `K` (m × m).
pub fn gram_covariance(m: usize, law: GramLaw, seed: u64) -> CovarianceModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // row-major fill so the draw order does not depend on nalgebra's layout
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            k[(i, j)] = law.sample(&mut rng);
        }
    }
    let denom = (m * m) as f64;
    let sigma = k.tr_mul(&k) / denom;
    CovarianceModel::trusted(sigma, format!("gram({law:?}, seed={seed})"))
}

/// Sparse entries over `dim` segments; missing diagonals take `default_diag`,
/// missing off-diagonals are zero.
pub fn explicit_covariance(dim: usize, entries: &[(usize, usize, f64)], default_diag: f64) -> Result<CovarianceModel> {
    let mut sigma = DMatrix::from_diagonal_element(dim, dim, default_diag);
    let mut set = vec![false; dim * dim];
    for &(s, t, x) in entries {
        if s >= dim || t >= dim {
            return Err(EtaError::Dimension { expected: dim, got: s.max(t) + 1 });
        }
        for (a, b) in [(s, t), (t, s)] {
            if set[a * dim + b] && sigma[(a, b)] != x {
                return Err(EtaError::NotSymmetric((sigma[(a, b)] - x).abs()));
            }
            sigma[(a, b)] = x;
            set[a * dim + b] = true;
        }
    }
    CovarianceModel::from_matrix(sigma, format!("explicit({} entries)", entries.len()))
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionDiagnostics {
    pub dim: usize,
    pub provenance: String,
    pub max_row_abs_sum_sigma: f64,
    /// `None` when Σ is singular.
    pub max_row_abs_sum_precision: Option<f64>,
    /// Smallest `Σ_{s,t∈y} σ_{s,t}` over the supplied routes.
    pub min_route_variance: Option<f64>,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

fn max_row_abs_sum(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Reports the quantities the asymptotic theory assumes bounded.
pub fn assumption_diagnostics(cov: &CovarianceModel, routes: &[Vec<usize>]) -> AssumptionDiagnostics {
    let eig = SymmetricEigen::new(cov.sigma.clone());
    AssumptionDiagnostics {
        dim: cov.dim(),
        provenance: cov.provenance.clone(),
        max_row_abs_sum_sigma: max_row_abs_sum(&cov.sigma),
        max_row_abs_sum_precision: cov.precision().ok().map(max_row_abs_sum),
        min_route_variance: routes.iter().map(|y| cov.pair_sum(y, y)).reduce(f64::min),
        min_eigenvalue: eig.eigenvalues.min(),
        max_eigenvalue: eig.eigenvalues.max(),
    }
}
