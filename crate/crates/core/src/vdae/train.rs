use rayon::prelude::*;

use super::loss::evaluate_point;
use super::{InputNorm, TrainConfig, TrainHistory, VdaeModel};
use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::neural::{
    decayed_lr, fit_regression, softplus_inverse, with_epoch, AdamState, CovarianceHead, Gradients, Mlp,
    RegressionConfig, GRAD_CHUNK,
};
use crate::rng;
use crate::spectral::{self, DiffusionModel};

// Offsets that derive independent seeds from `TrainConfig::seed`.
const SEED_ENCODER: u64 = 0x11;
const SEED_REGRESSION: u64 = 0x12;
const SEED_COVNET: u64 = 0x13;
const SEED_DECODER: u64 = 0x14;
const SEED_BATCHES: u64 = 0x15;
const SEED_EVAL: u64 = 0x16;

/// Builds the diffusion map of `x` and trains a model on it.
pub fn train(x: &PointCloud, config: &TrainConfig) -> Result<VdaeModel> {
    config.validate()?;
    check_size(x, config)?;
    let bandwidth = match config.bandwidth {
        Some(b) => b,
        None => spectral::median_heuristic_bandwidth(x)?,
    };
    let diffusion = spectral::embed_cloud(x, bandwidth, config.dim)?;
    train_with_diffusion(x, diffusion, config)
}

fn check_size(x: &PointCloud, config: &TrainConfig) -> Result<()> {
    if x.len() < config.batch_size {
        return Err(Error::invalid(format!(
            "{} points is fewer than the batch size {}",
            x.len(),
            config.batch_size
        )));
    }
    Ok(())
}

/// Trains on `x` with a diffusion map already computed from it. The
/// embedding dimension of `diffusion` overrides `config.dim`.
pub fn train_with_diffusion(
    x: &PointCloud,
    diffusion: DiffusionModel,
    config: &TrainConfig,
) -> Result<VdaeModel> {
    let mut config = config.clone();
    config.dim = diffusion.dim();
    config.bandwidth = Some(diffusion.bandwidth());
    config.validate()?;
    check_size(x, &config)?;
    if diffusion.len() != x.len() {
        return Err(Error::Shape {
            expected: x.len(),
            actual: diffusion.len(),
        });
    }
    if !diffusion.source_hash().is_empty() && diffusion.source_hash() != x.content_hash() {
        return Err(Error::Format("diffusion model was built from a different point cloud".into()));
    }
    let (n, m, d) = (x.len(), x.dim(), diffusion.dim());
    let norm = InputNorm::fit(x);
    let z = diffusion.embedding();
    let latent_scale = (z.as_slice().iter().map(|v| v * v).sum::<f64>() / (n * d) as f64).sqrt();
    if !(latent_scale > 0.0) {
        return Err(Error::DegenerateData("diffusion embedding is identically zero".into()));
    }

    // Phase 1: regress the encoder onto the embedding.
    let xn = PointCloud::new("x", m, x.rows().flat_map(|p| norm.apply(p)).collect())?;
    let zn = PointCloud::new("z", d, z.as_slice().iter().map(|v| v / latent_scale).collect())?;
    let widths = |input: usize, output: usize| -> Vec<usize> {
        std::iter::once(input)
            .chain(config.hidden.iter().copied())
            .chain(std::iter::once(output))
            .collect()
    };
    let encoder = Mlp::new(&widths(m, d), config.seed.wrapping_add(SEED_ENCODER))?;
    let regression = fit_regression(
        encoder,
        &xn,
        &zn,
        &RegressionConfig {
            epochs: config.encoder_epochs,
            lr: config.encoder_lr,
            lr_final: config.encoder_lr_final,
            batch_size: config.batch_size,
            seed: config.seed.wrapping_add(SEED_REGRESSION),
        },
    )?;
    let zmean = zn.mean();
    let spread: f64 = zn
        .rows()
        .map(|p| p.iter().zip(&zmean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    let history = TrainHistory {
        encoder_relative_mse: regression.final_loss * (n * d) as f64 / spread,
        encoder_loss: regression.loss_curve.clone(),
        ..TrainHistory::default()
    };

    let covnet = CovarianceHead::new(m, &config.hidden, d, config.seed.wrapping_add(SEED_COVNET))?;
    let decoder = Mlp::new(&widths(d, m), config.seed.wrapping_add(SEED_DECODER))?;
    let mut model = VdaeModel::from_parts(
        diffusion,
        x.clone(),
        regression.net,
        covnet,
        decoder,
        norm,
        latent_scale,
        config.clone(),
        history,
    )?;
    init_covnet_output(&mut model);

    // Phase 2: covariance network and decoder with the encoder frozen.
    let initial = evaluate(&model, config.seed.wrapping_add(SEED_EVAL))?;
    model.history.initial = initial;
    let mut adam_cov = AdamState::for_mlp(model.covnet.net(), config.lr);
    let mut adam_dec = AdamState::for_mlp(&model.decoder, config.lr);
    let mut rng = rng::seeded(config.seed.wrapping_add(SEED_BATCHES));
    for epoch in 0..config.epochs {
        let lr = decayed_lr(config.lr, config.lr_final, epoch, config.epochs);
        adam_cov.lr = lr;
        adam_dec.lr = lr;
        let order = rng::permutation(&mut rng, n);
        let mut sums = [0.0; 3];
        let mut count = 0usize;
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let noise: Vec<Vec<f64>> = batch.iter().map(|_| rng::normal_vec(&mut rng, d)).collect();
            let step = batch_gradients(&model, batch, &noise).map_err(|e| with_epoch(e, epoch))?;
            let (mut g_cov, mut g_dec, parts) = step;
            if parts.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDivergence {
                    epoch,
                    message: "loss is not finite".into(),
                });
            }
            let scale = 1.0 / batch.len() as f64;
            g_cov.scale(scale);
            g_dec.scale(scale);
            adam_cov
                .step_mlp(model.covnet.net_mut(), &g_cov)
                .map_err(|e| with_epoch(e, epoch))?;
            adam_dec.step_mlp(&mut model.decoder, &g_dec).map_err(|e| with_epoch(e, epoch))?;
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p;
            }
            count += batch.len();
        }
        let h = &mut model.history;
        h.loss.push(sums[0] / count as f64);
        h.kl.push(sums[1] / count as f64);
        h.reconstruction.push(sums[2] / count as f64);
    }
    Ok(model)
}

/// Starts the covariance network at a constant isotropic factor whose scale
/// matches the median local target.
fn init_covnet_output(model: &mut VdaeModel) {
    let d = model.dim();
    let s2 = model.latent_scale * model.latent_scale;
    let mut scales: Vec<f64> = model
        .targets
        .iter()
        .map(|t| (model.config.alpha * t.trace() / (d as f64 * s2)).sqrt())
        .collect();
    let target = spectral::median(&mut scales);
    let raw = softplus_inverse((target - CovarianceHead::SOFTPLUS_FLOOR).max(1e-8));
    let net = model.covnet.net_mut();
    net.zero_output_layer();
    let last = net.layers().len() - 1;
    let bias = net.layers_mut()[last].bias_mut();
    for r in 0..d {
        bias[crate::neural::tril_index(r, r)] = raw;
    }
}

/// Summed gradients and `[loss, kl, reconstruction]` totals over one batch.
fn batch_gradients(
    model: &VdaeModel,
    batch: &[usize],
    noise: &[Vec<f64>],
) -> Result<(Gradients, Gradients, [f64; 3])> {
    let items: Vec<(usize, &[f64])> = batch.iter().copied().zip(noise.iter().map(Vec::as_slice)).collect();
    let partials: Vec<(Gradients, Gradients, [f64; 3])> = items
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g_cov = Gradients::zeros_like(model.covnet.net());
            let mut g_dec = Gradients::zeros_like(&model.decoder);
            let mut parts = [0.0; 3];
            for &(i, eps) in chunk {
                let (e, _) = evaluate_point(model, i, batch, eps)?;
                g_cov.add_assign(&e.covnet_grads);
                g_dec.add_assign(&e.decoder_grads);
                parts[0] += e.loss;
                parts[1] += e.kl;
                parts[2] += e.reconstruction;
            }
            Ok((g_cov, g_dec, parts))
        })
        .collect::<Result<_>>()?;
    let mut g_cov = Gradients::zeros_like(model.covnet.net());
    let mut g_dec = Gradients::zeros_like(&model.decoder);
    let mut parts = [0.0; 3];
    for (c, dgr, p) in &partials {
        g_cov.add_assign(c);
        g_dec.add_assign(dgr);
        for (s, v) in parts.iter_mut().zip(p) {
            *s += v;
        }
    }
    Ok((g_cov, g_dec, parts))
}

/// Mean `[loss, kl, reconstruction]` over one shuffled pass of the training
/// set, without updating the model.
pub fn evaluate(model: &VdaeModel, seed: u64) -> Result<[f64; 3]> {
    let n = model.training.len();
    let mut rng = rng::seeded(seed);
    let order = rng::permutation(&mut rng, n);
    let mut sums = [0.0; 3];
    let mut count = 0usize;
    for batch in order.chunks(model.config.batch_size.max(2)) {
        if batch.len() < 2 {
            continue;
        }
        let noise: Vec<Vec<f64>> = batch.iter().map(|_| rng::normal_vec(&mut rng, model.dim())).collect();
        let (_, _, parts) = batch_gradients(model, batch, &noise)?;
        for (s, p) in sums.iter_mut().zip(parts) {
            *s += p;
        }
        count += batch.len();
    }
    Ok(sums.map(|s| s / count as f64))
}
