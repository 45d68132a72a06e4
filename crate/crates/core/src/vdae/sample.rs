use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use super::VdaeModel;
use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::neural::reparameterize;
use crate::rng::{self, Rng};

const BURST_BLOCK: usize = 4096;
const JACOBIAN_STEP: f64 = 1e-5;
const JACOBIAN_DRAWS: usize = 10_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleOptions {
    /// Add `N(0, cI)` to each decoded step instead of returning the mean.
    pub ambient_noise: bool,
    pub keep_trajectory: bool,
}

#[derive(Clone, Debug)]
pub struct Samples {
    pub points: PointCloud,
    /// Latent positions `z′` of the final step.
    pub latent: PointCloud,
    /// One cloud per step when trajectories were requested.
    pub trajectory: Vec<PointCloud>,
}

/// One random-walk step from `x`. `ambient` is standard-normal noise in data
/// space, scaled by `√c` when present.
pub fn walk_step(
    model: &VdaeModel,
    x: &[f64],
    noise: &[f64],
    ambient: Option<&[f64]>,
) -> Result<Vec<f64>> {
    Ok(step(model, x, noise, ambient)?.1)
}

fn step(
    model: &VdaeModel,
    x: &[f64],
    noise: &[f64],
    ambient: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = model.encode(x)?;
    let l = model.factor(x)?;
    let z_prime = reparameterize(&z, &l, noise)?;
    let mut out = model.decode(&z_prime)?;
    if let Some(a) = ambient {
        if a.len() != out.len() {
            return Err(Error::Shape {
                expected: out.len(),
                actual: a.len(),
            });
        }
        let sd = model.c().sqrt();
        out.iter_mut().zip(a).for_each(|(o, e)| *o += sd * e);
    }
    Ok((z_prime, out))
}

/// Current positions of a set of independent chains.
#[derive(Clone, Debug)]
pub struct WalkState {
    points: Vec<Vec<f64>>,
    latent: Vec<Vec<f64>>,
    rngs: Vec<Rng>,
    step: usize,
}

impl WalkState {
    /// Chain `i` starts at row `i` of `seeds` and draws from sub-stream `i` of
    /// `rng_seed`.
    pub fn new(seeds: &PointCloud, rng_seed: u64) -> Self {
        Self {
            points: seeds.rows().map(<[f64]>::to_vec).collect(),
            latent: Vec::new(),
            rngs: (0..seeds.len() as u64).map(|i| rng::substream(rng_seed, i)).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn advance(&mut self, model: &VdaeModel, ambient_noise: bool) -> Result<()> {
        let d = model.dim();
        let m = model.data_dim();
        let t = self.step + 1;
        let moved: Vec<(Vec<f64>, Vec<f64>)> = self
            .points
            .par_iter()
            .zip(self.rngs.par_iter_mut())
            .map(|(x, r)| {
                let noise = rng::normal_vec(r, d);
                let ambient = ambient_noise.then(|| rng::normal_vec(r, m));
                let (z, out) = step(model, x, &noise, ambient.as_deref())?;
                if out.iter().chain(&z).any(|v| !v.is_finite()) {
                    return Err(Error::SamplingDivergence { step: t });
                }
                Ok((z, out))
            })
            .collect::<Result<_>>()?;
        let (latent, points) = moved.into_iter().unzip();
        self.latent = latent;
        self.points = points;
        self.step = t;
        Ok(())
    }

    pub fn points(&self, dim: usize) -> Result<PointCloud> {
        PointCloud::new(format!("step{}", self.step), dim, self.points.concat())
    }

    fn latent(&self, dim: usize) -> Result<PointCloud> {
        PointCloud::new("latent", dim, self.latent.concat())
    }
}

/// Runs one chain per row of `seeds` for `n_steps` steps.
pub fn sample(
    model: &VdaeModel,
    seeds: &PointCloud,
    n_steps: usize,
    rng_seed: u64,
    options: SampleOptions,
) -> Result<Samples> {
    if n_steps == 0 {
        return Err(Error::invalid("at least one step is required"));
    }
    if seeds.dim() != model.data_dim() {
        return Err(Error::Shape {
            expected: model.data_dim(),
            actual: seeds.dim(),
        });
    }
    let m = model.data_dim();
    let mut state = WalkState::new(seeds, rng_seed);
    let mut trajectory = Vec::new();
    for _ in 0..n_steps {
        state.advance(model, options.ambient_noise)?;
        if options.keep_trajectory {
            trajectory.push(state.points(m)?);
        }
    }
    Ok(Samples {
        points: state.points(m)?.with_name("samples"),
        latent: state.latent(model.dim())?,
        trajectory,
    })
}

/// `n_chains` training points drawn without replacement (cycling through a
/// fresh permutation when more chains than points are requested).
pub fn initial_points(model: &VdaeModel, n_chains: usize, seed: u64) -> Result<PointCloud> {
    if n_chains == 0 {
        return Err(Error::invalid("at least one chain is required"));
    }
    let n = model.training.len();
    let mut r = rng::seeded(seed);
    let mut idx = Vec::with_capacity(n_chains);
    while idx.len() < n_chains {
        let perm = rng::permutation(&mut r, n);
        idx.extend(perm.into_iter().take(n_chains - idx.len()));
    }
    Ok(model.training.subset(&idx)?.with_name("seeds"))
}

/// `n_samples` latent draws `z′ = ψ̃(x) + √scale · L(x) ε`.
fn latent_draws(model: &VdaeModel, x: &[f64], n_samples: usize, rng_seed: u64, scale: f64) -> Result<Vec<Vec<f64>>> {
    let z = model.encode(x)?;
    let l = model.factor(x)? * scale.sqrt();
    let d = model.dim();
    let blocks: Vec<Vec<Vec<f64>>> = (0..n_samples.div_ceil(BURST_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut r = rng::substream(rng_seed, b as u64);
            let len = BURST_BLOCK.min(n_samples - b * BURST_BLOCK);
            (0..len)
                .map(|_| reparameterize(&z, &l, &rng::normal_vec(&mut r, d)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(blocks.into_iter().flatten().collect())
}

fn decode_all(model: &VdaeModel, latent: &[Vec<f64>]) -> Result<PointCloud> {
    let rows: Vec<Vec<f64>> = latent.par_iter().map(|z| model.decode(z)).collect::<Result<_>>()?;
    PointCloud::new("burst", model.data_dim(), rows.concat())
}

/// One-step latent draws from a single point.
pub fn burst_latent(model: &VdaeModel, x: &[f64], n_samples: usize, rng_seed: u64) -> Result<PointCloud> {
    if n_samples == 0 {
        return Err(Error::invalid("at least one sample is required"));
    }
    let draws = latent_draws(model, x, n_samples, rng_seed, 1.0)?;
    PointCloud::new("latent", model.dim(), draws.concat())
}

/// One-step decoded draws from a single point.
pub fn burst(model: &VdaeModel, x: &[f64], n_samples: usize, rng_seed: u64) -> Result<PointCloud> {
    if n_samples == 0 {
        return Err(Error::invalid("at least one sample is required"));
    }
    decode_all(model, &latent_draws(model, x, n_samples, rng_seed, 1.0)?)
}

#[derive(Clone, Debug)]
pub struct BurstCheck {
    /// Sample covariance of the decoded burst, `m × m`.
    pub empirical: DMatrix<f64>,
    /// `J Σ Jᵀ`.
    pub predicted: DMatrix<f64>,
    /// Eigenvalues of `empirical`, largest first.
    pub eigenvalues: Vec<f64>,
    /// Decoder Jacobian averaged over the latent draws.
    pub jacobian: DMatrix<f64>,
    /// Decoder Jacobian at `z₀` alone.
    pub pointwise_jacobian: DMatrix<f64>,
    /// Latent step covariance `Σ`.
    pub latent_covariance: DMatrix<f64>,
    /// `‖empirical − predicted‖_F / ‖predicted‖_F`.
    pub relative_error: f64,
    /// The same error with `pointwise_jacobian` in place of `jacobian`.
    pub pointwise_error: f64,
}

/// Central-difference decoder Jacobian at `z`, `m × D`.
fn decoder_jacobian(model: &VdaeModel, z: &[f64]) -> Result<DMatrix<f64>> {
    let (d, m) = (model.dim(), model.data_dim());
    let mut jacobian = DMatrix::zeros(m, d);
    for j in 0..d {
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[j] += JACOBIAN_STEP;
        zm[j] -= JACOBIAN_STEP;
        let (fp, fm) = (model.decode(&zp)?, model.decode(&zm)?);
        for i in 0..m {
            jacobian[(i, j)] = (fp[i] - fm[i]) / (2.0 * JACOBIAN_STEP);
        }
    }
    Ok(jacobian)
}

/// Compares the covariance of a decoded burst with its linearization
/// `J Σ Jᵀ` around `z₀ = ψ̃(x)`. The latent step covariance is
/// `Σ = cov_scale · C̃(x)`.
///
/// A ReLU decoder is only piecewise linear, so its Jacobian at `z₀` reflects
/// a single linear piece. `J` is therefore the Jacobian of the decoder
/// smoothed by the step distribution, estimated as the mean Jacobian over up
/// to `JACOBIAN_DRAWS` of the draws. The pointwise version is reported too.
pub fn burst_covariance_check(
    model: &VdaeModel,
    x: &[f64],
    n_samples: usize,
    rng_seed: u64,
    cov_scale: f64,
) -> Result<BurstCheck> {
    if n_samples < 2 {
        return Err(Error::invalid("at least two samples are required"));
    }
    if !(cov_scale > 0.0) {
        return Err(Error::invalid("covariance scale must be positive"));
    }
    let z0 = model.encode(x)?;
    let pointwise_jacobian = decoder_jacobian(model, &z0)?;
    let latent_covariance = model.covariance(x)? * cov_scale;
    let latent = latent_draws(model, x, n_samples, rng_seed, cov_scale)?;
    let used = &latent[..latent.len().min(JACOBIAN_DRAWS)];
    let partials: Vec<DMatrix<f64>> = used
        .par_chunks(256)
        .map(|chunk| {
            chunk.iter().try_fold(DMatrix::zeros(model.data_dim(), model.dim()), |acc, z| {
                Ok::<_, Error>(acc + decoder_jacobian(model, z)?)
            })
        })
        .collect::<Result<_>>()?;
    let jacobian = partials.into_iter().fold(DMatrix::zeros(model.data_dim(), model.dim()), |a, b| a + b)
        / used.len() as f64;

    let samples = decode_all(model, &latent)?;
    let empirical = sample_covariance(&samples);
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(empirical.clone()).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let error_for = |j: &DMatrix<f64>| {
        let predicted = j * &latent_covariance * j.transpose();
        let err = (&empirical - &predicted).norm() / predicted.norm();
        (predicted, err)
    };
    let (predicted, relative_error) = error_for(&jacobian);
    let (_, pointwise_error) = error_for(&pointwise_jacobian);
    Ok(BurstCheck {
        empirical,
        predicted,
        eigenvalues,
        jacobian,
        pointwise_jacobian,
        latent_covariance,
        relative_error,
        pointwise_error,
    })
}

/// Centered covariance with denominator `n − 1`.
pub(crate) fn sample_covariance(x: &PointCloud) -> DMatrix<f64> {
    let m = x.dim();
    let mean = x.mean();
    let mut cov = DMatrix::zeros(m, m);
    for p in x.rows() {
        for a in 0..m {
            let da = p[a] - mean[a];
            for b in 0..=a {
                cov[(a, b)] += da * (p[b] - mean[b]);
            }
        }
    }
    let denom = (x.len() - 1) as f64;
    for a in 0..m {
        for b in 0..=a {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    cov
}
