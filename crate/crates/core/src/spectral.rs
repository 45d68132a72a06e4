//! Gaussian affinity kernel, diffusion operator and diffusion-map embedding.
//!
//! The transition matrix `P = Diag(d)⁻¹ K` is never decomposed directly. Its
//! spectrum is read off the symmetric conjugate `S = Diag(d)^{-½} K
//! Diag(d)^{-½}`, whose eigenvectors `v` map back to right eigenvectors of
//! `P` as `f = √vol · Diag(d)^{-½} v`. That scaling makes the eigenfunctions
//! orthonormal under the stationary weights `π = d / vol`, so the embedding
//! `z_i = (λ_1 f_1(i), …, λ_D f_D(i))` reproduces diffusion distances exactly
//! when every non-trivial pair is kept.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::data::PointCloud;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_POINTS: usize = 20_000;

/// Ridge added to local covariance targets.
pub const DEFAULT_RIDGE: f64 = 1e-6;

/// Points used by the median heuristic before it switches to a strided subset.
const MEDIAN_SUBSET: usize = 3_000;

#[derive(Clone, Debug)]
pub struct KernelMatrix {
    matrix: DMatrix<f64>,
    bandwidth: f64,
}

impl KernelMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.matrix.row_iter().map(|r| r.sum()).collect()
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn build_kernel(x: &PointCloud, bandwidth: f64) -> Result<KernelMatrix> {
    build_kernel_with_limit(x, bandwidth, DEFAULT_MAX_POINTS)
}

/// `K_ij = exp(-‖x_i - x_j‖² / bandwidth²)`, filled from the upper triangle so
/// the result is exactly symmetric.
pub fn build_kernel_with_limit(
    x: &PointCloud,
    bandwidth: f64,
    max_points: usize,
) -> Result<KernelMatrix> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::invalid(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    let n = x.len();
    if n > max_points {
        return Err(Error::Capacity {
            n,
            limit: max_points,
        });
    }
    let inv = 1.0 / (bandwidth * bandwidth);
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.point(i);
            (i + 1..n)
                .map(|j| (-sq_dist(xi, x.point(j)) * inv).exp())
                .collect()
        })
        .collect();
    let mut matrix = DMatrix::from_element(n, n, 1.0);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + 1 + off;
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    Ok(KernelMatrix { matrix, bandwidth })
}

/// Median of pairwise Euclidean distances. Clouds larger than 3000 points use
/// an evenly strided subset of 3000.
pub fn median_heuristic_bandwidth(x: &PointCloud) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(Error::invalid("median heuristic needs at least two points"));
    }
    let idx: Vec<usize> = if n > MEDIAN_SUBSET {
        (0..MEDIAN_SUBSET).map(|i| i * n / MEDIAN_SUBSET).collect()
    } else {
        (0..n).collect()
    };
    let mut dists: Vec<f64> = idx
        .par_iter()
        .enumerate()
        .flat_map_iter(|(a, &i)| {
            idx[a + 1..]
                .iter()
                .map(move |&j| sq_dist(x.point(i), x.point(j)).sqrt())
        })
        .collect();
    let median = median(&mut dists);
    if !(median > 0.0) {
        return Err(Error::DegenerateData(
            "median pairwise distance is zero (identical points)".into(),
        ));
    }
    Ok(median)
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    let len = values.len();
    let mid = len / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if len % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Row-stochastic `P_ij = K_ij / d_i`.
pub fn transition_matrix(kernel: &KernelMatrix) -> DMatrix<f64> {
    let degrees = kernel.degrees();
    let mut p = kernel.matrix.clone();
    for (i, d) in degrees.iter().enumerate() {
        p.row_mut(i).scale_mut(1.0 / d);
    }
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    pub(crate) bandwidth: f64,
    pub(crate) eigenvalues: Vec<f64>,
    /// `n × D`, column `i` is `f_{i+1}`.
    pub(crate) eigenfunctions: DMatrix<f64>,
    pub(crate) degrees: Vec<f64>,
    pub(crate) pi: Vec<f64>,
    pub(crate) source_name: String,
    pub(crate) source_hash: String,
    pub(crate) embedding: PointCloud,
}

impl DiffusionModel {
    pub(crate) fn from_parts(
        bandwidth: f64,
        eigenvalues: Vec<f64>,
        eigenfunctions: DMatrix<f64>,
        degrees: Vec<f64>,
        source_name: String,
        source_hash: String,
    ) -> Result<Self> {
        let n = eigenfunctions.nrows();
        let dim = eigenfunctions.ncols();
        if eigenvalues.len() != dim {
            return Err(Error::Shape {
                expected: dim,
                actual: eigenvalues.len(),
            });
        }
        if degrees.len() != n {
            return Err(Error::Shape {
                expected: n,
                actual: degrees.len(),
            });
        }
        let vol: f64 = degrees.iter().sum();
        let pi = degrees.iter().map(|d| d / vol).collect();
        let mut coords = Vec::with_capacity(n * dim);
        for i in 0..n {
            for (j, lambda) in eigenvalues.iter().enumerate() {
                coords.push(lambda * eigenfunctions[(i, j)]);
            }
        }
        let embedding = PointCloud::new("embedding", dim, coords)?;
        Ok(Self {
            bandwidth,
            eigenvalues,
            eigenfunctions,
            degrees,
            pi,
            source_name,
            source_hash,
            embedding,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn len(&self) -> usize {
        self.degrees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degrees.is_empty()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenfunctions(&self) -> &DMatrix<f64> {
        &self.eigenfunctions
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn stationary(&self) -> &[f64] {
        &self.pi
    }

    /// The embedded training points, one row per point.
    pub fn embedding(&self) -> &PointCloud {
        &self.embedding
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }
}

/// Diffusion map keeping the `dim` leading non-trivial eigenpairs of `P`.
pub fn diffusion_map(kernel: &KernelMatrix, dim: usize) -> Result<DiffusionModel> {
    diffusion_map_from(kernel, dim, String::new(), String::new())
}

/// Diffusion map of `x`, recording the cloud's name and content hash.
pub fn embed_cloud(x: &PointCloud, bandwidth: f64, dim: usize) -> Result<DiffusionModel> {
    let kernel = build_kernel(x, bandwidth)?;
    diffusion_map_from(&kernel, dim, x.name().to_owned(), x.content_hash())
}

fn diffusion_map_from(
    kernel: &KernelMatrix,
    dim: usize,
    source_name: String,
    source_hash: String,
) -> Result<DiffusionModel> {
    let n = kernel.len();
    if dim == 0 || dim >= n {
        return Err(Error::invalid(format!(
            "embedding dimension must be in 1..={}, got {dim}",
            n.saturating_sub(1)
        )));
    }
    let degrees = kernel.degrees();
    let vol: f64 = degrees.iter().sum();
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let sym = DMatrix::from_fn(n, n, |i, j| kernel.matrix[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);

    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 100 * n.max(10)).ok_or_else(|| {
        Error::Eigen {
            message: "symmetric QR iteration did not converge".into(),
            max_residual: f64::NAN,
        }
    })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let scale = vol.sqrt();
    let mut eigenvalues = Vec::with_capacity(dim);
    let mut eigenfunctions = DMatrix::zeros(n, dim);
    for (col, &k) in order[1..=dim].iter().enumerate() {
        eigenvalues.push(eig.eigenvalues[k]);
        let v = eig.eigenvectors.column(k);
        let pivot = v.iter().copied().fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            eigenfunctions[(i, col)] = sign * scale * inv_sqrt[i] * v[i];
        }
    }

    let model = DiffusionModel::from_parts(
        kernel.bandwidth,
        eigenvalues,
        eigenfunctions,
        degrees,
        source_name,
        source_hash,
    )?;
    let max_residual = eigen_residual(&model, &transition_matrix(kernel));
    if !(max_residual < 1e-6) {
        return Err(Error::Eigen {
            message: "eigenpair residual too large".into(),
            max_residual,
        });
    }
    Ok(model)
}

/// `max_i ‖P f_i − λ_i f_i‖∞` over the retained pairs.
pub fn eigen_residual(model: &DiffusionModel, p: &DMatrix<f64>) -> f64 {
    let pf = p * &model.eigenfunctions;
    let mut worst = 0.0_f64;
    for (j, lambda) in model.eigenvalues.iter().enumerate() {
        for i in 0..model.len() {
            let r = (pf[(i, j)] - lambda * model.eigenfunctions[(i, j)]).abs();
            worst = worst.max(if r.is_nan() { f64::INFINITY } else { r });
        }
    }
    worst
}

/// Discrete diffusion distance `sqrt(Σ_u (P_iu − P_ju)² / π_u)`.
pub fn diffusion_distance(model: &DiffusionModel, p: &DMatrix<f64>, i: usize, j: usize) -> Result<f64> {
    let n = model.len();
    if i >= n || j >= n {
        return Err(Error::invalid(format!("index out of range for {n} points")));
    }
    if p.nrows() != n || p.ncols() != n {
        return Err(Error::Shape {
            expected: n,
            actual: p.nrows(),
        });
    }
    let sum: f64 = (0..n)
        .map(|u| {
            let diff = p[(i, u)] - p[(j, u)];
            diff * diff / model.pi[u]
        })
        .sum();
    Ok(sum.sqrt())
}

/// Indices of the `k` points of `z` nearest to `query`, ties to the lower index.
pub fn knn(z: &PointCloud, query: &[f64], k: usize) -> Result<Vec<usize>> {
    if query.len() != z.dim() {
        return Err(Error::Shape {
            expected: z.dim(),
            actual: query.len(),
        });
    }
    if k > z.len() {
        return Err(Error::invalid(format!("k = {k} exceeds {} points", z.len())));
    }
    let mut scored: Vec<(f64, usize)> = z
        .rows()
        .enumerate()
        .map(|(i, row)| (sq_dist(row, query), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// Sample covariance (denominator `k − 1`) of the `k` embedded points nearest
/// to `z_i`, including `z_i`, plus `ridge · I`.
pub fn local_covariance(
    model: &DiffusionModel,
    i: usize,
    k_neighbors: usize,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    let dim = model.dim();
    if k_neighbors <= dim {
        return Err(Error::IllConditionedNeighborhood {
            k: k_neighbors,
            dim,
        });
    }
    if i >= model.len() {
        return Err(Error::invalid(format!("index {i} out of range")));
    }
    let z = model.embedding();
    let neighbors = knn(z, z.point(i), k_neighbors.min(z.len()))?;
    Ok(covariance_of(z, &neighbors, ridge))
}

fn covariance_of(z: &PointCloud, rows: &[usize], ridge: f64) -> DMatrix<f64> {
    let dim = z.dim();
    let k = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for &r in rows {
        for (m, v) in mean.iter_mut().zip(z.point(r)) {
            *m += v / k;
        }
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for &r in rows {
        let p = z.point(r);
        for a in 0..dim {
            for b in 0..=a {
                cov[(a, b)] += (p[a] - mean[a]) * (p[b] - mean[b]);
            }
        }
    }
    let denom = (k - 1.0).max(1.0);
    for a in 0..dim {
        for b in 0..=a {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
        cov[(a, a)] += ridge;
    }
    cov
}

/// Local covariance targets for every training point.
pub fn local_covariances(model: &DiffusionModel, k_neighbors: usize, ridge: f64) -> Result<Vec<DMatrix<f64>>> {
    if k_neighbors <= model.dim() {
        return Err(Error::IllConditionedNeighborhood {
            k: k_neighbors,
            dim: model.dim(),
        });
    }
    (0..model.len())
        .into_par_iter()
        .map(|i| local_covariance(model, i, k_neighbors, ridge))
        .collect()
}
