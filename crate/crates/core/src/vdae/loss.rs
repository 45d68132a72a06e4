use nalgebra::{Cholesky, DMatrix, Dyn};

use super::VdaeModel;
use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::neural::{reparameterize, reparameterize_factor_grad, Gradients};

/// `KL(N(0, C̃) ‖ N(0, α Σ*))`.
pub fn kl_term(c_tilde: &DMatrix<f64>, sigma_star: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid("alpha must be positive"));
    }
    let d = c_tilde.nrows();
    for m in [c_tilde, sigma_star] {
        if m.nrows() != d || m.ncols() != d {
            return Err(Error::Shape {
                expected: d,
                actual: m.ncols(),
            });
        }
    }
    let l = cholesky(c_tilde.clone(), "C̃")?.l();
    let target = cholesky(sigma_star * alpha, "αΣ*")?;
    Ok(kl_from_factor(&l, &target)?.0)
}

fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditionedCovariance(format!("{what} has non-finite entries")));
    }
    Cholesky::new(m).ok_or_else(|| Error::IllConditionedCovariance(format!("{what} is not positive definite")))
}

/// KL value for `C̃ = L Lᵀ` against the Gaussian with covariance factored by
/// `target`, together with `∂KL/∂L` restricted to the lower triangle.
pub(crate) fn kl_from_factor(
    l: &DMatrix<f64>,
    target: &Cholesky<f64, Dyn>,
) -> Result<(f64, DMatrix<f64>)> {
    let d = l.nrows();
    let la = target.l_dirty();
    let w = la
        .solve_lower_triangular(l)
        .ok_or_else(|| Error::IllConditionedCovariance("singular target factor".into()))?;
    let trace = w.norm_squared();
    let mut log_det_target = 0.0;
    let mut log_det_c = 0.0;
    for i in 0..d {
        log_det_target += 2.0 * la[(i, i)].ln();
        if !(l[(i, i)] > 0.0) {
            return Err(Error::IllConditionedCovariance("factor has a non-positive diagonal".into()));
        }
        log_det_c += 2.0 * l[(i, i)].ln();
    }
    let value = 0.5 * (trace - d as f64 + log_det_target - log_det_c);

    let mut grad = target.solve(l);
    for r in 0..d {
        for c in (r + 1)..d {
            grad[(r, c)] = 0.0;
        }
        grad[(r, r)] -= 1.0 / l[(r, r)];
    }
    Ok((value, grad))
}

/// Batch member whose embedding is nearest to `z_prime`, excluding `exclude`.
/// `embedding` is indexed by the values in `batch`.
pub fn neighbor_select(
    batch: &[usize],
    z_prime: &[f64],
    embedding: &PointCloud,
    exclude: usize,
) -> Result<usize> {
    if !batch.contains(&exclude) {
        return Err(Error::invalid(format!("index {exclude} is not in the batch")));
    }
    if z_prime.len() != embedding.dim() {
        return Err(Error::Shape {
            expected: embedding.dim(),
            actual: z_prime.len(),
        });
    }
    let mut best: Option<(f64, usize)> = None;
    for &y in batch {
        if y == exclude {
            continue;
        }
        if y >= embedding.len() {
            return Err(Error::invalid(format!("batch index {y} out of range")));
        }
        let d: f64 = embedding
            .point(y)
            .iter()
            .zip(z_prime)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let better = match best {
            None => true,
            Some((bd, by)) => d < bd || (d == bd && y < by),
        };
        if better {
            best = Some((d, y));
        }
    }
    best.map(|(_, y)| y)
        .ok_or_else(|| Error::invalid("batch has no point other than the excluded one"))
}

/// One evaluation of the local evidence loss with its parameter gradients.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub kl: f64,
    pub reconstruction: f64,
    /// Training index of the selected neighbor `x′`.
    pub neighbor: usize,
    pub covnet_grads: Gradients,
    pub decoder_grads: Gradients,
}

/// Loss for training point `index` against its batch, with the latent step
/// driven by the fixed standard-normal `noise`.
pub fn local_elbo_loss(
    model: &VdaeModel,
    index: usize,
    batch: &[usize],
    noise: &[f64],
) -> Result<LossEval> {
    Ok(evaluate_point(model, index, batch, noise)?.0)
}

/// Loss evaluation plus the ReLU activation pattern of both networks.
pub(crate) fn evaluate_point(
    model: &VdaeModel,
    index: usize,
    batch: &[usize],
    noise: &[f64],
) -> Result<(LossEval, Vec<bool>)> {
    let d = model.dim();
    if noise.len() != d {
        return Err(Error::Shape {
            expected: d,
            actual: noise.len(),
        });
    }
    if index >= model.training.len() {
        return Err(Error::invalid(format!("index {index} out of range")));
    }
    let s = model.latent_scale;
    let sx = model.input_norm.scale;
    let c = model.config.c;

    let xn = model.input_norm.apply(model.training.point(index));
    let (l_hat, cov_trace) = model.covnet.factor_trace(&xn)?;
    let z = model.latent_cache.point(index);
    let z_prime = reparameterize(z, &l_hat, noise)?;
    let neighbor = neighbor_select(batch, &z_prime, &model.latent_cache, index)?;
    let target_n = model.input_norm.apply(model.training.point(neighbor));

    let dec_trace = model.decoder.forward_trace(&z_prime)?;
    let resid: Vec<f64> = dec_trace.output().iter().zip(&target_n).map(|(a, b)| a - b).collect();
    let reconstruction = sx * sx * resid.iter().map(|r| r * r).sum::<f64>() / (2.0 * c);
    let upstream: Vec<f64> = resid.iter().map(|r| sx * sx * r / c).collect();
    let (decoder_grads, grad_z) = model.decoder.backward(&dec_trace, &upstream)?;

    let target = cholesky(&model.targets[index] * (model.config.alpha / (s * s)), "αΣ*")?;
    let (kl, mut grad_l) = kl_from_factor(&l_hat, &target)?;
    grad_l += reparameterize_factor_grad(&grad_z, noise);
    let covnet_grads = model.covnet.backward(&cov_trace, &grad_l)?;

    let mut pattern = cov_trace.relu_pattern();
    pattern.extend(dec_trace.relu_pattern());
    Ok((
        LossEval {
            loss: kl + reconstruction,
            kl,
            reconstruction,
            neighbor,
            covnet_grads,
            decoder_grads,
        },
        pattern,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_circle;
    use crate::neural::{CovarianceHead, Mlp};
    use crate::rng;
    use crate::spectral::embed_cloud;
    use crate::vdae::{InputNorm, TrainConfig, TrainHistory};

    fn random_spd(r: &mut rng::Rng, d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng::normal(r));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn kl_scalar_closed_form() {
        let c = DMatrix::from_element(1, 1, 2.0);
        let s = DMatrix::from_element(1, 1, 1.0);
        let expected = 0.5 * (2.0 - 1.0 + 0.5f64.ln());
        assert!((kl_term(&c, &s, 1.0).unwrap() - expected).abs() < 1e-10);
        assert!((expected - 0.1534264).abs() < 1e-7);
    }

    #[test]
    fn kl_zero_at_target() {
        let mut r = rng::seeded(1);
        for d in 1..5 {
            let s = random_spd(&mut r, d);
            let alpha = 0.7;
            let v = kl_term(&(&s * alpha), &s, alpha).unwrap();
            assert!(v.abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut r = rng::seeded(2);
        for i in 0..1000 {
            let d = 1 + i % 4;
            let c = random_spd(&mut r, d);
            let s = random_spd(&mut r, d);
            assert!(kl_term(&c, &s, 1.0 + rng::uniform(&mut r)).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_minimum_under_perturbation() {
        let mut r = rng::seeded(3);
        let d = 3;
        let s = random_spd(&mut r, d);
        let c = s.clone();
        for a in 0..d {
            for b in 0..=a {
                for sign in [-0.01, 0.01] {
                    let mut p = c.clone();
                    p[(a, b)] *= 1.0 + sign;
                    p[(b, a)] = p[(a, b)];
                    if Cholesky::new(p.clone()).is_none() {
                        continue;
                    }
                    assert!(kl_term(&p, &s, 1.0).unwrap() > 0.0);
                }
            }
        }
    }

    /// Monte-Carlo oracle: mean of `log q(z) − log p(z)` with `z ∼ q`.
    fn kl_monte_carlo(c: &DMatrix<f64>, a: &DMatrix<f64>, n: usize, seed: u64) -> f64 {
        let d = c.nrows();
        let lc = Cholesky::new(c.clone()).unwrap();
        let la = Cholesky::new(a.clone()).unwrap();
        let log_det = |ch: &Cholesky<f64, Dyn>| (0..d).map(|i| 2.0 * ch.l_dirty()[(i, i)].ln()).sum::<f64>();
        let (ldc, lda) = (log_det(&lc), log_det(&la));
        let lcl = lc.l();
        let mut r = rng::seeded(seed);
        let mut total = 0.0;
        for _ in 0..n {
            let e = nalgebra::DVector::from_vec(rng::normal_vec(&mut r, d));
            let z = &lcl * &e;
            let qa = e.norm_squared();
            let pa = la.l_dirty().solve_lower_triangular(&z).unwrap().norm_squared();
            total += 0.5 * (pa - qa) + 0.5 * (lda - ldc);
        }
        total / n as f64
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut r = rng::seeded(4);
        for d in 1..=3 {
            let c = random_spd(&mut r, d);
            let s = random_spd(&mut r, d);
            let exact = kl_term(&c, &s, 1.0).unwrap();
            let mc = kl_monte_carlo(&c, &s, 1_000_000, 10 + d as u64);
            assert!((exact - mc).abs() / exact < 0.02, "d={d} exact={exact} mc={mc}");
        }
    }

    #[test]
    fn kl_rejects_indefinite() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let s = DMatrix::identity(2, 2);
        assert!(matches!(kl_term(&c, &s, 1.0), Err(Error::IllConditionedCovariance(_))));
    }

    fn cloud(rows: &[[f64; 2]]) -> PointCloud {
        PointCloud::from_rows("z", &rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn neighbor_exact_member() {
        let z = cloud(&[[0.0, 0.0], [1.0, 1.0], [2.0, 0.0], [5.0, 5.0]]);
        assert_eq!(neighbor_select(&[0, 1, 2, 3], &[2.0, 0.0], &z, 0).unwrap(), 2);
    }

    #[test]
    fn neighbor_two_point_batch() {
        let z = cloud(&[[0.0, 0.0], [9.0, 9.0]]);
        assert_eq!(neighbor_select(&[0, 1], &[0.0, 0.0], &z, 0).unwrap(), 1);
        assert_eq!(neighbor_select(&[0, 1], &[9.0, 9.0], &z, 1).unwrap(), 0);
    }

    #[test]
    fn neighbor_ties_lowest_index() {
        let z = cloud(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]]);
        assert_eq!(neighbor_select(&[2, 1, 0], &[0.0, 0.0], &z, 2).unwrap(), 0);
    }

    #[test]
    fn neighbor_singleton_batch_errors() {
        let z = cloud(&[[1.0, 0.0]]);
        assert!(matches!(neighbor_select(&[0], &[0.0, 0.0], &z, 0), Err(Error::InvalidArgument(_))));
        assert!(neighbor_select(&[0], &[0.0, 0.0], &z, 1).is_err());
    }

    #[test]
    fn neighbor_matches_brute_force() {
        let mut r = rng::seeded(5);
        let flat = rng::normal_vec(&mut r, 200 * 3);
        let z = PointCloud::new("z", 3, flat).unwrap();
        for _ in 0..200 {
            let perm = rng::permutation(&mut r, 200);
            let batch = &perm[..2 + perm[0] % 30];
            let q = rng::normal_vec(&mut r, 3);
            let exclude = batch[0];
            let mut scored: Vec<(f64, usize)> = batch
                .iter()
                .filter(|&&y| y != exclude)
                .map(|&y| (z.point(y).iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum(), y))
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            assert_eq!(neighbor_select(batch, &q, &z, exclude).unwrap(), scored[0].1);
        }
    }

    pub(crate) fn small_model(seed: u64) -> VdaeModel {
        let x = gen_circle(60, 1.0, 0.02, seed).unwrap();
        let diffusion = embed_cloud(&x, 0.5, 2).unwrap();
        let hidden = [12, 10];
        let encoder = Mlp::new(&[3, 12, 10, 2], seed + 1).unwrap();
        let covnet = CovarianceHead::new(3, &hidden, 2, seed + 2).unwrap();
        let decoder = Mlp::new(&[2, 12, 10, 3], seed + 3).unwrap();
        let norm = InputNorm::fit(&x);
        let config = TrainConfig {
            k_neighbors: 8,
            alpha: 1.5,
            c: 0.7,
            ..TrainConfig::default()
        };
        VdaeModel::from_parts(diffusion, x, encoder, covnet, decoder, norm, 0.8, config, TrainHistory::default())
            .unwrap()
    }

    #[test]
    fn loss_is_sum_of_nonnegative_terms() {
        let model = small_model(7);
        let mut r = rng::seeded(8);
        let batch: Vec<usize> = (0..20).collect();
        for i in 0..20 {
            let noise = rng::normal_vec(&mut r, 2);
            let e = local_elbo_loss(&model, i, &batch, &noise).unwrap();
            assert!(e.kl >= 0.0 && e.reconstruction >= 0.0);
            assert!((e.loss - e.kl - e.reconstruction).abs() < 1e-12);
            assert_ne!(e.neighbor, i);
        }
    }

    #[test]
    fn kl_part_agrees_with_kl_term() {
        let model = small_model(9);
        let batch: Vec<usize> = (0..10).collect();
        let e = local_elbo_loss(&model, 3, &batch, &[0.3, -0.2]).unwrap();
        let c = model.covariance(model.training().point(3)).unwrap();
        let expected = kl_term(&c, model.local_target(3), model.alpha()).unwrap();
        assert!((e.kl - expected).abs() < 1e-9 * expected.max(1.0));
    }

    fn loss_only(model: &VdaeModel, i: usize, batch: &[usize], noise: &[f64]) -> (f64, usize, Vec<bool>) {
        let (e, p) = evaluate_point(model, i, batch, noise).unwrap();
        (e.loss, e.neighbor, p)
    }

    /// Central differences over every covariance-network and decoder parameter,
    /// skipping coordinates where a ReLU kink or a neighbor switch is crossed.
    pub(crate) fn check_loss_gradients(model: &VdaeModel, i: usize, batch: &[usize], noise: &[f64]) -> (f64, usize) {
        let h = 1e-5;
        let base = local_elbo_loss(model, i, batch, noise).unwrap();
        let (_, base_neighbor, _) = loss_only(model, i, batch, noise);
        let mut worst = 0.0f64;
        let mut checked = 0;
        for which in 0..2 {
            let analytic = if which == 0 { &base.covnet_grads } else { &base.decoder_grads };
            let blocks: Vec<Vec<f64>> = analytic.blocks().iter().map(|b| b.to_vec()).collect();
            for (b, grad) in blocks.iter().enumerate() {
                for k in 0..grad.len() {
                    let eval = |delta: f64| {
                        let mut m = model.clone();
                        let params = if which == 0 {
                            m.covnet.net_mut().params_mut()
                        } else {
                            m.decoder.params_mut()
                        };
                        let mut params = params;
                        params[b][k] += delta;
                        loss_only(&m, i, batch, noise)
                    };
                    let (fp, np, pp) = eval(h);
                    let (fm, nm, pm) = eval(-h);
                    if pp != pm || np != base_neighbor || nm != base_neighbor {
                        continue;
                    }
                    let fd = (fp - fm) / (2.0 * h);
                    let a = grad[k];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
                    worst = worst.max(rel);
                    checked += 1;
                }
            }
        }
        (worst, checked)
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let model = small_model(11);
        let mut r = rng::seeded(12);
        let batch: Vec<usize> = (0..15).collect();
        for trial in 0..4 {
            let noise = rng::normal_vec(&mut r, 2);
            let (worst, checked) = check_loss_gradients(&model, trial * 3, &batch, &noise);
            assert!(checked > 100, "{checked}");
            assert!(worst < 1e-4, "trial {trial}: {worst}");
        }
    }
}
