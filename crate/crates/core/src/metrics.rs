//! Evaluation metrics: the local bi-Lipschitz statistic of a map between
//! clouds, an entropic Gromov–Wasserstein discrepancy, and an unbiased
//! squared MMD. All reductions run in a fixed order, so results do not depend
//! on the number of threads.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::rng;
use crate::spectral;

const SINKHORN_TOL: f64 = 1e-12;

pub type Metric = dyn Fn(&[f64], &[f64]) -> f64 + Sync;

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Bilip {
    pub k: usize,
    pub values: Vec<f64>,
    /// Neighbor pairs skipped because their latent distance was zero.
    pub skipped_pairs: usize,
}

impl Bilip {
    pub fn median(&self) -> f64 {
        spectral::median(&mut self.values.clone())
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Bi-Lipschitz statistic of `map` over the `k`-nearest latent neighborhoods
/// of `z`, with Euclidean metrics on both sides.
pub fn bilip_k<F>(map: F, z: &PointCloud, k: usize) -> Result<Bilip>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    bilip_k_with(map, z, k, &euclidean, &euclidean)
}

pub fn bilip_k_with<F>(map: F, z: &PointCloud, k: usize, metric_z: &Metric, metric_x: &Metric) -> Result<Bilip>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let rows: Vec<Vec<f64>> = (0..z.len()).into_par_iter().map(|i| map(z.point(i))).collect::<Result<_>>()?;
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid("map returned points of differing dimension"));
    }
    let fz = PointCloud::new("image", dim, rows.concat())?;
    bilip_k_pairs(z, &fz, k, metric_z, metric_x)
}

/// Bi-Lipschitz statistic for paired clouds, where row `i` of `fz` is the
/// image of row `i` of `z`.
pub fn bilip_k_pairs(
    z: &PointCloud,
    fz: &PointCloud,
    k: usize,
    metric_z: &Metric,
    metric_x: &Metric,
) -> Result<Bilip> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if z.len() < k + 1 {
        return Err(Error::invalid(format!("{} points cannot supply {k} neighbors each", z.len())));
    }
    if fz.len() != z.len() {
        return Err(Error::Shape {
            expected: z.len(),
            actual: fz.len(),
        });
    }
    let per_point: Vec<(f64, usize)> = (0..z.len())
        .into_par_iter()
        .map(|i| {
            let zi = z.point(i);
            let mut scored: Vec<(f64, usize)> = (0..z.len())
                .filter(|&j| j != i)
                .map(|j| (metric_z(zi, z.point(j)), j))
                .collect();
            scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let (mut lo, mut hi, mut skipped) = (f64::INFINITY, 0.0f64, 0usize);
            for &(dz, j) in &scored[..k] {
                if dz == 0.0 {
                    skipped += 1;
                    continue;
                }
                let r = metric_x(fz.point(i), fz.point(j)) / dz;
                lo = lo.min(r);
                hi = hi.max(r);
            }
            if skipped == k {
                return Err(Error::DegenerateData(format!(
                    "all {k} latent neighbors of point {i} coincide with it"
                )));
            }
            Ok((hi.max(1.0 / lo), skipped))
        })
        .collect::<Result<_>>()?;
    Ok(Bilip {
        k,
        skipped_pairs: per_point.iter().map(|p| p.1).sum(),
        values: per_point.into_iter().map(|p| p.0).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GwConfig {
    /// Starting regularization, relative to the mean squared intra-cloud
    /// distance.
    pub epsilon: f64,
    /// Number of times `ε` is halved after the first level.
    pub halvings: usize,
    /// Outer iterations per `ε` level.
    pub max_iter: usize,
    /// Threshold on the largest coupling entry change.
    pub tol: f64,
    pub sinkhorn_iter: usize,
    /// Additional starts from random couplings.
    pub restarts: usize,
    pub seed: u64,
    /// Frank–Wolfe polishing with exact assignments when the clouds have
    /// equal size.
    pub refine: bool,
}

impl Default for GwConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            halvings: 3,
            max_iter: 100,
            tol: 1e-9,
            sinkhorn_iter: 2000,
            restarts: 4,
            seed: 0,
            refine: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GwResult {
    /// Unregularized squared-loss objective of the returned coupling.
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Absolute `ε` of the last level.
    pub epsilon: f64,
    /// `|X| × |Y|` coupling with uniform marginals.
    pub coupling: DMatrix<f64>,
}

pub fn gromov_wasserstein(x: &PointCloud, y: &PointCloud, epsilon: f64, max_iter: usize, seed: u64) -> Result<GwResult> {
    gromov_wasserstein_with(
        x,
        y,
        &GwConfig {
            epsilon,
            max_iter,
            seed,
            ..GwConfig::default()
        },
    )
}

pub fn gromov_wasserstein_with(x: &PointCloud, y: &PointCloud, config: &GwConfig) -> Result<GwResult> {
    if !(config.epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    if config.max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    // Solve in a canonical argument order so that swapping X and Y gives the
    // same value bit for bit.
    let swap = (x.len(), x.content_hash()) > (y.len(), y.content_hash());
    if swap {
        let mut r = solve_gw(y, x, config)?;
        r.coupling = r.coupling.transpose();
        Ok(r)
    } else {
        solve_gw(x, y, config)
    }
}

fn distance_matrix(x: &PointCloud) -> DMatrix<f64> {
    let n = x.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| euclidean(x.point(i), x.point(j))).collect())
        .collect();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

struct GwProblem {
    c1: DMatrix<f64>,
    c2: DMatrix<f64>,
    /// Row and column parts of the constant term of the squared loss.
    row_const: Vec<f64>,
    col_const: Vec<f64>,
}

impl GwProblem {
    fn new(x: &PointCloud, y: &PointCloud) -> Self {
        let c1 = distance_matrix(x);
        let c2 = distance_matrix(y);
        let (n, m) = (c1.nrows(), c2.nrows());
        let row_const = (0..n).map(|i| c1.row(i).iter().map(|d| d * d).sum::<f64>() / n as f64).collect();
        let col_const = (0..m).map(|j| c2.row(j).iter().map(|d| d * d).sum::<f64>() / m as f64).collect();
        Self {
            c1,
            c2,
            row_const,
            col_const,
        }
    }

    /// `C₁ T C₂`.
    fn cross(&self, t: &DMatrix<f64>) -> DMatrix<f64> {
        &self.c1 * t * &self.c2
    }

    /// Linearized cost `constC − 2 C₁ T C₂`.
    fn tensor(&self, t: &DMatrix<f64>) -> DMatrix<f64> {
        let mut cost = self.cross(t) * -2.0;
        for j in 0..cost.ncols() {
            for i in 0..cost.nrows() {
                cost[(i, j)] += self.row_const[i] + self.col_const[j];
            }
        }
        cost
    }

    fn objective(&self, t: &DMatrix<f64>) -> f64 {
        self.tensor(t).dot(t)
    }

    fn constant_dot(&self, t: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for j in 0..t.ncols() {
            for i in 0..t.nrows() {
                s += (self.row_const[i] + self.col_const[j]) * t[(i, j)];
            }
        }
        s
    }
}

fn solve_gw(x: &PointCloud, y: &PointCloud, config: &GwConfig) -> Result<GwResult> {
    let (n, m) = (x.len(), y.len());
    let problem = GwProblem::new(x, y);
    let mean_sq = 0.5 * (problem.row_const.iter().sum::<f64>() / n as f64 + problem.col_const.iter().sum::<f64>() / m as f64);
    let product = DMatrix::from_element(n, m, 1.0 / (n * m) as f64);
    if mean_sq == 0.0 {
        return Ok(GwResult {
            value: 0.0,
            converged: true,
            iterations: 0,
            epsilon: 0.0,
            coupling: product,
        });
    }
    let eps0 = config.epsilon * mean_sq;
    let mut best: Option<GwResult> = None;
    for start in 0..=config.restarts {
        let mut r = rng::substream(config.seed, start as u64);
        let mut run = if start == 0 {
            let mut run = entropic_run(&problem, product.clone(), eps0, 0, config);
            if config.refine && n == m {
                run.coupling = frank_wolfe(&problem, run.coupling);
                if let Some(better) = swap_search(&problem, &run.coupling) {
                    run.coupling = better;
                }
            }
            run
        } else if config.refine && n == m {
            // Local search from a random vertex.
            let perm = rng::permutation(&mut r, n);
            let mut vertex = DMatrix::zeros(n, n);
            for (i, &j) in perm.iter().enumerate() {
                vertex[(i, j)] = 1.0 / n as f64;
            }
            let t = frank_wolfe(&problem, vertex);
            GwResult {
                value: f64::NAN,
                converged: true,
                iterations: 0,
                epsilon: 0.0,
                coupling: swap_search(&problem, &t).unwrap_or(t),
            }
        } else {
            // Restarts skip the annealing, which would smooth them back into
            // the basin of the first start.
            entropic_run(&problem, random_coupling(n, m, r), eps0, config.halvings, config)
        };
        run.value = problem.objective(&run.coupling).max(0.0);
        if best.as_ref().is_none_or(|b| run.value < b.value) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Random permutation mixed with a positive random matrix, scaled to
/// uniform marginals. Starting near a vertex spreads restarts across basins.
fn random_coupling(n: usize, m: usize, mut r: rng::Rng) -> DMatrix<f64> {
    let rows = rng::permutation(&mut r, n);
    let cols = rng::permutation(&mut r, m);
    let mut t = DMatrix::from_fn(n, m, |_, _| 0.05 + rng::uniform(&mut r));
    for s in 0..n.max(m) {
        t[(rows[s % n], cols[s % m])] += n.max(m) as f64;
    }
    for _ in 0..200 {
        for i in 0..n {
            let s = t.row(i).sum() * n as f64;
            t.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        for j in 0..m {
            let s = t.column(j).sum() * m as f64;
            t.column_mut(j).iter_mut().for_each(|v| *v /= s);
        }
    }
    t
}

fn entropic_run(
    problem: &GwProblem,
    mut t: DMatrix<f64>,
    eps0: f64,
    first_level: usize,
    config: &GwConfig,
) -> GwResult {
    let (n, m) = t.shape();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut iterations = 0;
    let mut converged = false;
    let mut eps = eps0;
    for level in first_level..=config.halvings {
        eps = eps0 / f64::powi(2.0, level as i32);
        converged = false;
        for _ in 0..config.max_iter {
            iterations += 1;
            let cost = problem.tensor(&t);
            let next = sinkhorn(&cost, eps, &mut f, &mut g, config.sinkhorn_iter);
            let change = (&next - &t).amax();
            t = next;
            if change < config.tol {
                converged = true;
                break;
            }
        }
    }
    GwResult {
        value: f64::NAN,
        converged,
        iterations,
        epsilon: eps,
        coupling: t,
    }
}

/// Sinkhorn scaling for uniform marginals in stabilized form: the dual
/// potentials `f`, `g` are absorbed into the kernel whenever the scalings
/// drift too far from one, and are kept as a warm start for the next call.
fn sinkhorn(cost: &DMatrix<f64>, eps: f64, f: &mut [f64], g: &mut [f64], max_iter: usize) -> DMatrix<f64> {
    let (n, m) = cost.shape();
    let (p, q) = (1.0 / n as f64, 1.0 / m as f64);
    let kernel = |f: &[f64], g: &[f64]| DMatrix::from_fn(n, m, |i, j| ((f[i] + g[j] - cost[(i, j)]) / eps).exp());
    let mut k = kernel(f, g);
    let mut iter = 0;
    while iter < max_iter {
        let mut u = DVector::from_element(n, 1.0);
        let mut v = DVector::from_element(m, 1.0);
        let mut absorb = false;
        let mut done = false;
        while iter < max_iter {
            iter += 1;
            let kv = &k * &v;
            u = kv.map(|s| p / s);
            let ktu = k.tr_mul(&u);
            v = ktu.map(|s| q / s);
            if iter % 10 == 0 {
                let kv = &k * &v;
                let err: f64 = u.iter().zip(kv.iter()).map(|(a, b)| (a * b - p).abs()).sum();
                if err < SINKHORN_TOL {
                    done = true;
                    break;
                }
            }
            let drift = u.iter().chain(v.iter()).map(|s| s.ln().abs()).fold(0.0, f64::max);
            if !drift.is_finite() || drift > 30.0 {
                absorb = true;
                break;
            }
        }
        if u.iter().chain(v.iter()).all(|s| s.is_finite() && *s > 0.0) {
            f.iter_mut().zip(u.iter()).for_each(|(fi, ui)| *fi += eps * ui.ln());
            g.iter_mut().zip(v.iter()).for_each(|(gj, vj)| *gj += eps * vj.ln());
        } else {
            // Underflow: restart from potentials that make every row sum
            // representable.
            for i in 0..n {
                f[i] = (0..m).map(|j| cost[(i, j)] - g[j]).fold(f64::INFINITY, f64::min);
            }
        }
        k = kernel(f, g);
        if done || !absorb {
            break;
        }
    }
    k
}

/// Frank–Wolfe on the squared-loss objective over square couplings with
/// exact assignment as the linear step and a closed-form line search.
fn frank_wolfe(problem: &GwProblem, mut t: DMatrix<f64>) -> DMatrix<f64> {
    let n = t.nrows();
    for _ in 0..200 {
        let cross = problem.cross(&t);
        let cost = problem.tensor(&t);
        let flat: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| cost[(i, j)]).collect();
        let Ok((rows, cols)) = lsap::solve(n, n, &flat, false) else {
            break;
        };
        let mut vertex = DMatrix::zeros(n, n);
        for (&i, &j) in rows.iter().zip(&cols) {
            vertex[(i, j)] = 1.0 / n as f64;
        }
        let delta = &vertex - &t;
        let a = -2.0 * problem.cross(&delta).dot(&delta);
        let b = problem.constant_dot(&delta) - 4.0 * cross.dot(&delta);
        let tau = if a > 0.0 {
            (-b / (2.0 * a)).clamp(0.0, 1.0)
        } else if a + b < 0.0 {
            1.0
        } else {
            0.0
        };
        let gain = tau * (b + a * tau);
        if tau == 0.0 || gain > -1e-15 {
            break;
        }
        t += delta * tau;
    }
    t
}

/// Rounds a square coupling to the permutation sharing most of its mass and
/// improves it by pairwise exchanges. Returns the result only if it beats
/// `t`.
fn swap_search(problem: &GwProblem, t: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = t.nrows();
    let flat: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| t[(i, j)]).collect();
    let (rows, cols) = lsap::solve(n, n, &flat, true).ok()?;
    let mut perm = vec![0; n];
    for (&i, &j) in rows.iter().zip(&cols) {
        perm[i] = j;
    }
    let (c1, c2) = (&problem.c1, &problem.c2);
    for _ in 0..100 {
        let mut improved = false;
        for r in 0..n {
            for s in r + 1..n {
                let (pr, ps) = (perm[r], perm[s]);
                let gain: f64 = (0..n)
                    .filter(|&k| k != r && k != s)
                    .map(|k| (c1[(r, k)] - c1[(s, k)]) * (c2[(ps, perm[k])] - c2[(pr, perm[k])]))
                    .sum();
                if gain > 1e-12 {
                    perm.swap(r, s);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    let mut vertex = DMatrix::zeros(n, n);
    for (i, &j) in perm.iter().enumerate() {
        vertex[(i, j)] = 1.0 / n as f64;
    }
    (problem.objective(&vertex) < problem.objective(t)).then_some(vertex)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Mmd {
    pub value: f64,
    pub bandwidth: f64,
}

/// Unbiased squared MMD with kernel `exp(−‖a − b‖² / bandwidth²)`. The
/// bandwidth defaults to the median heuristic on the pooled cloud.
pub fn mmd(x: &PointCloud, y: &PointCloud, bandwidth: Option<f64>) -> Result<Mmd> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::invalid("both clouds need at least two points"));
    }
    if x.dim() != y.dim() {
        return Err(Error::Shape {
            expected: x.dim(),
            actual: y.dim(),
        });
    }
    let bandwidth = match bandwidth {
        Some(b) if b > 0.0 => b,
        Some(_) => return Err(Error::invalid("bandwidth must be positive")),
        None => {
            let pooled = PointCloud::new("pooled", x.dim(), [x.as_slice(), y.as_slice()].concat())?;
            spectral::median_heuristic_bandwidth(&pooled)?
        }
    };
    let inv = 1.0 / (bandwidth * bandwidth);
    let kernel_sum = |a: &PointCloud, b: &PointCloud, skip_diagonal: bool| -> f64 {
        let rows: Vec<f64> = (0..a.len())
            .into_par_iter()
            .map(|i| {
                let p = a.point(i);
                (0..b.len())
                    .filter(|&j| !(skip_diagonal && i == j))
                    .map(|j| {
                        let d2: f64 = p.iter().zip(b.point(j)).map(|(u, v)| (u - v) * (u - v)).sum();
                        (-d2 * inv).exp()
                    })
                    .sum()
            })
            .collect();
        rows.iter().sum()
    };
    let (n, m) = (x.len() as f64, y.len() as f64);
    let value = kernel_sum(x, x, true) / (n * (n - 1.0)) + kernel_sum(y, y, true) / (m * (m - 1.0))
        - 2.0 * kernel_sum(x, y, false) / (n * m);
    Ok(Mmd { value, bandwidth })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BilipSummary {
    pub k: usize,
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
    pub skipped_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GwSummary {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub epsilon: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub restarts: usize,
}

/// Collected metric values with the parameters that produced them.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub bilip: Option<BilipSummary>,
    pub bilip_values: Vec<f64>,
    pub gw: Option<GwSummary>,
    pub mmd: Option<Mmd>,
    /// Free-form context such as input hashes and sizes.
    pub context: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn set_bilip(&mut self, b: &Bilip) {
        self.bilip = Some(BilipSummary {
            k: b.k,
            count: b.values.len(),
            median: b.median(),
            mean: b.mean(),
            max: b.max(),
            skipped_pairs: b.skipped_pairs,
        });
        self.bilip_values = b.values.clone();
    }

    pub fn set_gw(&mut self, r: &GwResult, config: &GwConfig) {
        self.gw = Some(GwSummary {
            value: r.value,
            converged: r.converged,
            iterations: r.iterations,
            epsilon: config.epsilon,
            max_iter: config.max_iter,
            seed: config.seed,
            restarts: config.restarts,
        });
    }

    /// One `key=value` line per scalar, sorted by key.
    pub fn to_key_value(&self) -> String {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        if let Some(b) = &self.bilip {
            entries.insert("bilip.k".into(), b.k.to_string());
            entries.insert("bilip.count".into(), b.count.to_string());
            entries.insert("bilip.median".into(), fmt(b.median));
            entries.insert("bilip.mean".into(), fmt(b.mean));
            entries.insert("bilip.max".into(), fmt(b.max));
            entries.insert("bilip.skipped_pairs".into(), b.skipped_pairs.to_string());
        }
        if let Some(g) = &self.gw {
            entries.insert("gw.value".into(), fmt(g.value));
            entries.insert("gw.converged".into(), g.converged.to_string());
            entries.insert("gw.iterations".into(), g.iterations.to_string());
            entries.insert("gw.epsilon".into(), fmt(g.epsilon));
            entries.insert("gw.max_iter".into(), g.max_iter.to_string());
            entries.insert("gw.seed".into(), g.seed.to_string());
            entries.insert("gw.restarts".into(), g.restarts.to_string());
        }
        if let Some(m) = &self.mmd {
            entries.insert("mmd.value".into(), fmt(m.value));
            entries.insert("mmd.bandwidth".into(), fmt(m.bandwidth));
        }
        for (k, v) in &self.context {
            entries.insert(format!("context.{k}"), v.clone());
        }
        entries.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.12e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_circle, gen_torus};

    fn normal_cloud(n: usize, dim: usize, shift: f64, seed: u64) -> PointCloud {
        let mut r = rng::seeded(seed);
        let flat = (0..n * dim).map(|_| shift + rng::normal(&mut r)).collect();
        PointCloud::new("normal", dim, flat).unwrap()
    }

    #[test]
    fn bilip_identity_and_scaling() {
        let z = normal_cloud(60, 2, 0.0, 1);
        let id = bilip_k(|p| Ok(p.to_vec()), &z, 5).unwrap();
        assert!(id.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let s = bilip_k(|p| Ok(p.iter().map(|v| 3.0 * v).collect()), &z, 5).unwrap();
        assert!(s.values.iter().all(|v| (v - 3.0).abs() < 1e-12));
        let c = bilip_k(|p| Ok(p.iter().map(|v| -0.25 * v).collect()), &z, 7).unwrap();
        assert!(c.values.iter().all(|v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn bilip_matches_exhaustive_oracle() {
        let z = normal_cloud(50, 2, 0.0, 2);
        let mut r = rng::seeded(3);
        let image: Vec<Vec<f64>> = (0..50).map(|_| rng::normal_vec(&mut r, 3)).collect();
        let fz = PointCloud::from_rows("f", &image).unwrap();
        let k = 6;
        let got = bilip_k_pairs(&z, &fz, k, &euclidean, &euclidean).unwrap();
        for i in 0..50 {
            let mut d: Vec<(f64, usize)> = (0..50)
                .filter(|&j| j != i)
                .map(|j| (euclidean(z.point(i), z.point(j)), j))
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let ratios: Vec<f64> = d[..k].iter().map(|&(dz, j)| euclidean(&image[i], &image[j]) / dz).collect();
            let mut best = f64::INFINITY;
            // Smallest K with 1/K ≤ r ≤ K for every ratio.
            for &r in &ratios {
                for cand in [r, 1.0 / r] {
                    if cand >= 1.0 && ratios.iter().all(|&q| q <= cand && q >= 1.0 / cand) {
                        best = best.min(cand);
                    }
                }
            }
            assert!((got.values[i] - best).abs() < 1e-12);
        }
    }

    #[test]
    fn bilip_skips_duplicates_and_rejects_degenerate() {
        let z = PointCloud::from_rows("z", &[vec![0.0], vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        let b = bilip_k(|p| Ok(vec![2.0 * p[0]]), &z, 2).unwrap();
        assert!(b.skipped_pairs >= 2);
        assert!(b.values.iter().all(|v| (v - 2.0).abs() < 1e-12));
        let dup = PointCloud::from_rows("z", &[vec![0.0], vec![0.0], vec![0.0]]).unwrap();
        assert!(matches!(bilip_k(|p| Ok(p.to_vec()), &dup, 2), Err(Error::DegenerateData(_))));
        assert!(bilip_k(|p| Ok(p.to_vec()), &dup, 3).is_err());
    }

    fn rotate(x: &PointCloud, angle: f64, shift: [f64; 3]) -> PointCloud {
        let (s, c) = angle.sin_cos();
        let rows: Vec<Vec<f64>> = x
            .rows()
            .map(|p| vec![c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1], p[2] + shift[2]])
            .collect();
        PointCloud::from_rows("rotated", &rows).unwrap()
    }

    #[test]
    fn gw_self_and_rotation_vanish() {
        let x = gen_torus(60, 2.0, 0.7, 4).unwrap();
        let same = gromov_wasserstein(&x, &x, 0.05, 100, 0).unwrap();
        assert!(same.value < 1e-6, "{}", same.value);
        let rot = rotate(&x, 0.7, [1.0, -2.0, 0.5]);
        let moved = gromov_wasserstein(&x, &rot, 0.05, 100, 0).unwrap();
        assert!(moved.value < 1e-6, "{}", moved.value);
    }

    /// Objective of the permutation coupling `i ↦ perm[i]`.
    fn permutation_objective(x: &PointCloud, y: &PointCloud, perm: &[usize]) -> f64 {
        let n = perm.len();
        let mut s = 0.0;
        for i in 0..n {
            for k in 0..n {
                let d = euclidean(x.point(i), x.point(k)) - euclidean(y.point(perm[i]), y.point(perm[k]));
                s += d * d;
            }
        }
        s / (n * n) as f64
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn gw_matches_permutation_brute_force() {
        for seed in 0..50 {
            let n = 2 + seed as usize % 3;
            let x = normal_cloud(n, 2, 0.0, 100 + seed);
            let y = normal_cloud(n, 2, 0.0, 200 + seed);
            let brute = permutations(n)
                .iter()
                .map(|p| permutation_objective(&x, &y, p))
                .fold(f64::INFINITY, f64::min);
            let got = gromov_wasserstein(&x, &y, 0.05, 100, seed).unwrap();
            assert!((got.value - brute).abs() <= 0.05 * brute, "seed {seed}: {} vs {brute}", got.value);
        }
    }

    #[test]
    fn gw_is_symmetric() {
        let x = gen_circle(40, 1.0, 0.05, 1).unwrap();
        let y = gen_torus(30, 1.5, 0.5, 2).unwrap();
        let a = gromov_wasserstein(&x, &y, 0.05, 50, 3).unwrap();
        let b = gromov_wasserstein(&y, &x, 0.05, 50, 3).unwrap();
        assert!((a.value - b.value).abs() <= 1e-9);
        assert!(a.value > 0.0);
        assert_eq!(a.coupling.shape(), (40, 30));
        assert_eq!(b.coupling.shape(), (30, 40));
    }

    #[test]
    fn gw_coupling_has_uniform_marginals() {
        let x = gen_circle(25, 1.0, 0.05, 1).unwrap();
        let y = gen_torus(35, 1.5, 0.5, 2).unwrap();
        let r = gromov_wasserstein(&x, &y, 0.05, 50, 0).unwrap();
        for i in 0..25 {
            assert!((r.coupling.row(i).sum() - 1.0 / 25.0).abs() < 1e-9);
        }
        for j in 0..35 {
            assert!((r.coupling.column(j).sum() - 1.0 / 35.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gw_rejects_bad_arguments() {
        let x = gen_circle(10, 1.0, 0.0, 1).unwrap();
        assert!(gromov_wasserstein(&x, &x, 0.0, 10, 0).is_err());
        assert!(gromov_wasserstein(&x, &x, 0.1, 0, 0).is_err());
    }

    #[test]
    fn mmd_two_by_two_by_hand() {
        let x = PointCloud::from_rows("x", &[vec![0.0], vec![1.0]]).unwrap();
        let y = PointCloud::from_rows("y", &[vec![0.0], vec![2.0]]).unwrap();
        let k = |d: f64| (-d * d / 4.0f64).exp();
        let xx = 2.0 * k(1.0) / 2.0;
        let yy = 2.0 * k(2.0) / 2.0;
        let xy = (k(0.0) + k(2.0) + k(1.0) + k(1.0)) / 4.0;
        let expected = xx + yy - 2.0 * xy;
        let got = mmd(&x, &y, Some(2.0)).unwrap();
        assert!((got.value - expected).abs() < 1e-15);
    }

    #[test]
    fn mmd_same_distribution_is_small() {
        let c = gen_circle(2000, 1.0, 0.01, 5).unwrap();
        let even: Vec<usize> = (0..2000).step_by(2).collect();
        let odd: Vec<usize> = (1..2000).step_by(2).collect();
        let v = mmd(&c.subset(&even).unwrap(), &c.subset(&odd).unwrap(), None).unwrap();
        assert!(v.value.abs() < 0.01, "{}", v.value);
    }

    #[test]
    fn mmd_separated_distributions_are_far() {
        let x = normal_cloud(500, 1, 0.0, 6);
        let y = normal_cloud(500, 1, 10.0, 7);
        assert!(mmd(&x, &y, None).unwrap().value > 0.5);
    }

    #[test]
    fn report_formats() {
        let mut report = MetricReport::default();
        report.mmd = Some(Mmd {
            value: 0.25,
            bandwidth: 1.5,
        });
        report.context.insert("real".into(), "abc".into());
        let kv = report.to_key_value();
        assert!(kv.contains("mmd.value=2.500000000000e-1\n"));
        assert!(kv.contains("context.real=abc\n"));
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["mmd"]["bandwidth"], 1.5);
    }
}
