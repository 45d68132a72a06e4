//! The variational diffusion autoencoder: a frozen encoder onto the diffusion
//! embedding, a covariance network for one random-walk step in latent space,
//! and a decoder back to the data space.
//!
//! All three networks see normalized coordinates. Inputs are centered and
//! divided by one isotropic scale (so the geometry is preserved), and latent
//! vectors are divided by the RMS of the training embedding. The public
//! accessors on [`VdaeModel`] convert back to raw units.

mod loss;
mod sample;
mod train;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::neural::{CovarianceHead, Mlp};
use crate::spectral::{self, DiffusionModel};

pub use loss::{kl_term, local_elbo_loss, neighbor_select, LossEval};
pub use sample::{
    burst, burst_covariance_check, burst_latent, initial_points, sample, walk_step, BurstCheck,
    SampleOptions, Samples, WalkState,
};
pub use train::{evaluate, train, train_with_diffusion};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Embedding dimension `D`.
    pub dim: usize,
    /// Kernel bandwidth; the median heuristic is used when absent.
    pub bandwidth: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// When set, the phase-two learning rate decays geometrically from `lr`
    /// to this value over the epochs.
    pub lr_final: Option<f64>,
    pub seed: u64,
    /// Scale of the latent random-walk covariance target `α Σ*`.
    pub alpha: f64,
    /// Variance of the decoder's Gaussian likelihood.
    pub c: f64,
    pub k_neighbors: usize,
    pub ridge: f64,
    pub encoder_epochs: usize,
    pub encoder_lr: f64,
    pub encoder_lr_final: Option<f64>,
    /// Hidden widths shared by the encoder, covariance network and decoder.
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            bandwidth: None,
            batch_size: 64,
            epochs: 300,
            lr: 1e-3,
            lr_final: None,
            seed: 0,
            alpha: 1.0,
            c: 1.0,
            k_neighbors: 20,
            ridge: spectral::DEFAULT_RIDGE,
            encoder_epochs: 300,
            encoder_lr: 1e-3,
            encoder_lr_final: None,
            hidden: vec![500],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if !(self.alpha > 0.0) || !(self.c > 0.0) {
            return Err(Error::invalid("alpha and c must be positive"));
        }
        if !(self.lr > 0.0) || !(self.encoder_lr > 0.0) || [self.lr_final, self.encoder_lr_final].iter().any(|l| matches!(l, Some(l) if !(*l > 0.0))) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::invalid("ridge must be non-negative"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if matches!(self.bandwidth, Some(b) if !(b > 0.0)) {
            return Err(Error::invalid("bandwidth must be positive"));
        }
        Ok(())
    }
}

/// Per-epoch averages of the loss and its two terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub encoder_relative_mse: f64,
    pub encoder_loss: Vec<f64>,
    /// `[loss, kl, reconstruction]` before the first update.
    pub initial: [f64; 3],
    pub loss: Vec<f64>,
    pub kl: Vec<f64>,
    pub reconstruction: Vec<f64>,
}

/// Centering and one isotropic scale for data-space coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: 1.0,
        }
    }

    pub fn fit(x: &PointCloud) -> Self {
        let mean = x.mean();
        let ss: f64 = x
            .rows()
            .map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        let rms = (ss / (x.len() * x.dim()) as f64).sqrt();
        Self {
            mean,
            scale: if rms > 0.0 { rms } else { 1.0 },
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).map(|(v, m)| (v - m) / self.scale).collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).map(|(v, m)| m + v * self.scale).collect()
    }
}

#[derive(Clone, Debug)]
pub struct VdaeModel {
    pub(crate) diffusion: DiffusionModel,
    pub(crate) training: PointCloud,
    pub(crate) encoder: Mlp,
    pub(crate) covnet: CovarianceHead,
    pub(crate) decoder: Mlp,
    pub(crate) input_norm: InputNorm,
    pub(crate) latent_scale: f64,
    pub(crate) config: TrainConfig,
    pub(crate) history: TrainHistory,
    /// Normalized encoder outputs of the training points.
    pub(crate) latent_cache: PointCloud,
    /// Local covariance targets `Σ*` of the training points, raw latent units.
    pub(crate) targets: Vec<DMatrix<f64>>,
}

impl VdaeModel {
    /// Assembles a model from trained or hand-built parts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        diffusion: DiffusionModel,
        training: PointCloud,
        encoder: Mlp,
        covnet: CovarianceHead,
        decoder: Mlp,
        input_norm: InputNorm,
        latent_scale: f64,
        config: TrainConfig,
        history: TrainHistory,
    ) -> Result<Self> {
        let m = training.dim();
        let d = diffusion.dim();
        let checks = [
            (encoder.input_dim(), m),
            (encoder.output_dim(), d),
            (covnet.net().input_dim(), m),
            (covnet.dim(), d),
            (decoder.input_dim(), d),
            (decoder.output_dim(), m),
            (input_norm.mean.len(), m),
            (diffusion.len(), training.len()),
        ];
        for (actual, expected) in checks {
            if actual != expected {
                return Err(Error::Shape { expected, actual });
            }
        }
        if !(latent_scale > 0.0) {
            return Err(Error::invalid("latent scale must be positive"));
        }
        if !(config.alpha > 0.0 && config.c > 0.0) {
            return Err(Error::invalid("alpha and c must be positive"));
        }
        let targets = spectral::local_covariances(
            &diffusion,
            config.k_neighbors.min(diffusion.len()),
            config.ridge,
        )?;
        let mut model = Self {
            diffusion,
            latent_cache: training.clone(),
            training,
            encoder,
            covnet,
            decoder,
            input_norm,
            latent_scale,
            config,
            history,
            targets,
        };
        model.refresh_latent_cache()?;
        Ok(model)
    }

    pub(crate) fn refresh_latent_cache(&mut self) -> Result<()> {
        let mut flat = Vec::with_capacity(self.training.len() * self.dim());
        for x in self.training.rows() {
            flat.extend(self.encoder.forward(&self.input_norm.apply(x))?);
        }
        self.latent_cache = PointCloud::new("latent", self.dim(), flat)?;
        Ok(())
    }

    pub fn diffusion(&self) -> &DiffusionModel {
        &self.diffusion
    }

    pub fn training(&self) -> &PointCloud {
        &self.training
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn covnet(&self) -> &CovarianceHead {
        &self.covnet
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn input_norm(&self) -> &InputNorm {
        &self.input_norm
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn alpha(&self) -> f64 {
        self.config.alpha
    }

    pub fn c(&self) -> f64 {
        self.config.c
    }

    /// Latent dimension `D`.
    pub fn dim(&self) -> usize {
        self.diffusion.dim()
    }

    /// Data dimension `m`.
    pub fn data_dim(&self) -> usize {
        self.training.dim()
    }

    pub fn local_target(&self, i: usize) -> &DMatrix<f64> {
        &self.targets[i]
    }

    fn check_data(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.data_dim() {
            return Err(Error::Shape {
                expected: self.data_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                actual: z.len(),
            });
        }
        Ok(())
    }

    /// `ψ̃(x)` in raw latent units.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_data(x)?;
        let z = self.encoder.forward(&self.input_norm.apply(x))?;
        Ok(z.into_iter().map(|v| v * self.latent_scale).collect())
    }

    /// Cholesky factor of `C̃(x)` in raw latent units.
    pub fn factor(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_data(x)?;
        Ok(self.covnet.factor(&self.input_norm.apply(x))? * self.latent_scale)
    }

    pub fn covariance(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let l = self.factor(x)?;
        Ok(&l * l.transpose())
    }

    /// Decoder mean `ψ̃⁻¹(z)` for a raw latent vector.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        let zn: Vec<f64> = z.iter().map(|v| v / self.latent_scale).collect();
        Ok(self.input_norm.invert(&self.decoder.forward(&zn)?))
    }

    /// Encoder embedding of the training points, raw latent units.
    pub fn encoded_training(&self) -> PointCloud {
        let flat = self.latent_cache.as_slice().iter().map(|v| v * self.latent_scale).collect();
        PointCloud::new("latent", self.dim(), flat).expect("cache is non-empty and finite")
    }
}
