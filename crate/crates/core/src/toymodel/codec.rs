use rand::Rng as _;

use super::likelihood::{gaussian_bits, logistic_bits};
use super::{Batch, LossBreakdown, Quantizer, ToyCodec};
use crate::error::{Error, Result};
use crate::scalar::{all_finite, c, Real};
use crate::seed;

/// Latents from one clean forward pass, enough to re-evaluate the rate under
/// perturbed entropy-side parameters without touching the transforms.
#[derive(Clone, Debug)]
pub struct LatentCache<T> {
    pub(crate) batch_size: usize,
    pub(crate) y: Vec<T>,
    pub(crate) y_hat: Vec<T>,
    pub(crate) hyper_noise: Option<Vec<T>>,
}

struct Noise<T> {
    y: Option<Vec<T>>,
    z: Option<Vec<T>>,
}

fn uniform_noise<T: Real>(seed: u64, tag: &str, n: usize) -> Vec<T> {
    let mut rng = seed::derived_rng(seed, tag, 0);
    (0..n).map(|_| T::from_f(rng.random::<f64>() - 0.5)).collect()
}

fn ensure_finite<T: Real>(xs: &[T], layer: &str) -> Result<()> {
    if all_finite(xs) {
        Ok(())
    } else {
        Err(Error::NonFinite(layer.into()))
    }
}

/// Entropy-side intermediates for one sample.
struct EntropyTrace<T> {
    z_hat: Vec<T>,
    h: Vec<T>,
    e: Vec<T>,
    bits_y: f64,
    bits_z: f64,
    /// d bits_y / d v_k with v = ŷ − μ, and d bits_y / d log σ_k.
    dy_offset: Vec<f64>,
    dy_log_sigma: Vec<f64>,
    /// d bits_z / d v_j with v = ẑ − loc, and d bits_z / d log s_j.
    dz_offset: Vec<f64>,
    dz_log_scale: Vec<f64>,
}

/// Per-sample contributions to the batch sums.
struct SampleSums {
    sq_err: f64,
    bits_y: f64,
    bits_z: f64,
}

impl<T: Real> ToyCodec<T> {
    fn noise(&self, batch_size: usize, quant: Quantizer) -> Noise<T> {
        match quant {
            Quantizer::Noise(s) => Noise {
                y: Some(uniform_noise(s, "quant.y", batch_size * self.config.latent_dim)),
                z: Some(uniform_noise(s, "quant.z", batch_size * self.config.hyper_dim)),
            },
            Quantizer::Round => Noise { y: None, z: None },
        }
    }

    fn entropy_pass(&self, p: &[T], y: &[T], y_hat: &[T], uz: Option<&[T]>) -> Result<EntropyTrace<T>> {
        let l = &self.layout;
        let k = self.config.latent_dim;
        let j = self.config.hyper_dim;

        let mut z = vec![T::zero(); j];
        l.ha.apply(p, y, &mut z);
        ensure_finite(&z, "h_a")?;
        let z_hat: Vec<T> = match uz {
            Some(u) => z.iter().zip(u).map(|(a, b)| *a + *b).collect(),
            None => z.iter().map(|v| v.round()).collect(),
        };
        let mut h = vec![T::zero(); l.hs.out];
        l.hs.apply(p, &z_hat, &mut h);
        ensure_finite(&h, "h_s")?;
        let mut e = vec![T::zero(); l.ge0.out];
        l.ge0.apply(p, &h, &mut e);
        e.iter_mut().for_each(|v| *v = v.tanh());
        ensure_finite(&e, "g_e.0")?;
        let mut mu_rho = vec![T::zero(); 2 * k];
        l.ge1.apply(p, &e, &mut mu_rho);
        ensure_finite(&mu_rho, "g_e.1")?;

        let mut bits_y = 0.0;
        let mut dy_offset = vec![0.0; k];
        let mut dy_log_sigma = vec![0.0; k];
        for i in 0..k {
            let b = gaussian_bits((y_hat[i] - mu_rho[i]).to_f(), mu_rho[k + i].to_f());
            bits_y += b.bits;
            dy_offset[i] = b.d_offset;
            dy_log_sigma[i] = b.d_log_scale;
        }
        let mut bits_z = 0.0;
        let mut dz_offset = vec![0.0; j];
        let mut dz_log_scale = vec![0.0; j];
        for i in 0..j {
            let v = (z_hat[i] - p[l.prior_loc + i]).to_f();
            let b = logistic_bits(v, p[l.prior_log_scale + i].to_f());
            bits_z += b.bits;
            dz_offset[i] = b.d_offset;
            dz_log_scale[i] = b.d_log_scale;
        }
        if !(bits_y.is_finite() && bits_z.is_finite()) {
            return Err(Error::NonFinite("g_e.prior".into()));
        }
        Ok(EntropyTrace { z_hat, h, e, bits_y, bits_z, dy_offset, dy_log_sigma, dz_offset, dz_log_scale })
    }

    /// Forward (and optionally backward) pass for one sample. `weights` are
    /// the derivatives of the batch total with respect to the summed squared
    /// error and the summed bits.
    #[allow(clippy::too_many_arguments)]
    fn sample_pass(
        &self,
        p: &[T],
        x: &[T],
        uy: Option<&[T]>,
        uz: Option<&[T]>,
        grad: Option<(&mut [T], f64, f64)>,
        latents: Option<(&mut Vec<T>, &mut Vec<T>)>,
    ) -> Result<SampleSums> {
        let l = &self.layout;
        let k = self.config.latent_dim;
        let j = self.config.hyper_dim;

        let mut s1 = vec![T::zero(); l.ga0.out];
        l.ga0.apply(p, x, &mut s1);
        s1.iter_mut().for_each(|v| *v = v.tanh());
        ensure_finite(&s1, "g_a.0")?;
        let mut y = vec![T::zero(); k];
        l.ga1.apply(p, &s1, &mut y);
        ensure_finite(&y, "g_a.1")?;
        let y_hat: Vec<T> = match uy {
            Some(u) => y.iter().zip(u).map(|(a, b)| *a + *b).collect(),
            None => y.iter().map(|v| v.round()).collect(),
        };

        let ent = self.entropy_pass(p, &y, &y_hat, uz)?;

        let mut s8 = vec![T::zero(); l.gs0.out];
        l.gs0.apply(p, &y_hat, &mut s8);
        s8.iter_mut().for_each(|v| *v = v.tanh());
        ensure_finite(&s8, "g_s.0")?;
        let mut x_hat = vec![T::zero(); l.gs1.out];
        l.gs1.apply(p, &s8, &mut x_hat);
        ensure_finite(&x_hat, "g_s.1")?;
        let sq_err: f64 = x.iter().zip(&x_hat).map(|(a, b)| (*a - *b).to_f().powi(2)).sum();

        if let Some((ys, yhs)) = latents {
            ys.extend_from_slice(&y);
            yhs.extend_from_slice(&y_hat);
        }

        let Some((grad, w_sq, w_bits)) = grad else {
            return Ok(SampleSums { sq_err, bits_y: ent.bits_y, bits_z: ent.bits_z });
        };

        // Synthesis.
        let d_xhat: Vec<T> = x_hat.iter().zip(x).map(|(a, b)| c::<T>(2.0 * w_sq) * (*a - *b)).collect();
        let mut d_s8 = vec![T::zero(); s8.len()];
        l.gs1.backprop(p, &s8, &d_xhat, grad, Some(&mut d_s8));
        let d_a8: Vec<T> = d_s8.iter().zip(&s8).map(|(g, s)| *g * (T::one() - *s * *s)).collect();
        let mut d_yhat = vec![T::zero(); k];
        l.gs0.backprop(p, &y_hat, &d_a8, grad, Some(&mut d_yhat));

        // Gaussian conditional on ŷ.
        let mut d_mu_rho = vec![T::zero(); 2 * k];
        for i in 0..k {
            let g = c::<T>(w_bits * ent.dy_offset[i]);
            d_yhat[i] += g;
            d_mu_rho[i] = -g;
            d_mu_rho[k + i] = c(w_bits * ent.dy_log_sigma[i]);
        }
        let mut d_e = vec![T::zero(); ent.e.len()];
        l.ge1.backprop(p, &ent.e, &d_mu_rho, grad, Some(&mut d_e));
        let d_pre_e: Vec<T> = d_e.iter().zip(&ent.e).map(|(g, s)| *g * (T::one() - *s * *s)).collect();
        let mut d_h = vec![T::zero(); ent.h.len()];
        l.ge0.backprop(p, &ent.h, &d_pre_e, grad, Some(&mut d_h));
        let mut d_zhat = vec![T::zero(); j];
        l.hs.backprop(p, &ent.z_hat, &d_h, grad, Some(&mut d_zhat));

        // Logistic prior on ẑ.
        for i in 0..j {
            let g = c::<T>(w_bits * ent.dz_offset[i]);
            d_zhat[i] += g;
            grad[l.prior_loc + i] -= g;
            grad[l.prior_log_scale + i] += c(w_bits * ent.dz_log_scale[i]);
        }
        // Rounding has zero derivative; additive noise passes it through.
        if uz.is_none() {
            d_zhat.iter_mut().for_each(|v| *v = T::zero());
        }
        let mut d_y = vec![T::zero(); k];
        l.ha.backprop(p, &y, &d_zhat, grad, Some(&mut d_y));
        if uy.is_some() {
            for (a, b) in d_y.iter_mut().zip(&d_yhat) {
                *a += *b;
            }
        }

        // Analysis.
        let mut d_s1 = vec![T::zero(); s1.len()];
        l.ga1.backprop(p, &s1, &d_y, grad, Some(&mut d_s1));
        let d_a1: Vec<T> = d_s1.iter().zip(&s1).map(|(g, s)| *g * (T::one() - *s * *s)).collect();
        l.ga0.backprop(p, x, &d_a1, grad, None);

        Ok(SampleSums { sq_err, bits_y: ent.bits_y, bits_z: ent.bits_z })
    }

    fn assemble(&self, batch: &Batch<T>, sq_err: f64, bits_y: f64, bits_z: f64) -> LossBreakdown<T> {
        let bd = (batch.batch_size * batch.dim) as f64;
        let distortion = sq_err / bd;
        let rate_y = bits_y / bd;
        let rate_z = bits_z / bd;
        let total = self.config.lambda * self.config.distortion_scale * distortion + rate_y + rate_z;
        LossBreakdown { total: c(total), distortion: c(distortion), rate_y: c(rate_y), rate_z: c(rate_z) }
    }

    fn run(
        &self,
        params: &[T],
        batch: &Batch<T>,
        quant: Quantizer,
        mut grad: Option<&mut [T]>,
        mut cache: Option<&mut LatentCache<T>>,
    ) -> Result<LossBreakdown<T>> {
        self.check_layout(params)?;
        self.check_batch(batch)?;
        let noise = self.noise(batch.batch_size, quant);
        let (k, j) = (self.config.latent_dim, self.config.hyper_dim);
        let bd = (batch.batch_size * batch.dim) as f64;
        let w_sq = self.config.lambda * self.config.distortion_scale / bd;
        let w_bits = 1.0 / bd;
        let (mut sq, mut by, mut bz) = (0.0, 0.0, 0.0);
        for b in 0..batch.batch_size {
            let uy = noise.y.as_ref().map(|u| &u[b * k..(b + 1) * k]);
            let uz = noise.z.as_ref().map(|u| &u[b * j..(b + 1) * j]);
            let g = grad.as_deref_mut().map(|g| (g, w_sq, w_bits));
            let lat = cache.as_deref_mut().map(|c| (&mut c.y, &mut c.y_hat));
            let s = self.sample_pass(params, batch.sample(b), uy, uz, g, lat)?;
            sq += s.sq_err;
            by += s.bits_y;
            bz += s.bits_z;
        }
        if let Some(c) = cache {
            c.batch_size = batch.batch_size;
            c.hyper_noise = noise.z;
        }
        Ok(self.assemble(batch, sq, by, bz))
    }

    pub fn forward_loss(&self, params: &[T], batch: &Batch<T>, quant: Quantizer) -> Result<LossBreakdown<T>> {
        self.run(params, batch, quant, None, None)
    }

    /// Forward pass that also returns the latents needed by
    /// [`ToyCodec::eval_rate_only`].
    pub fn forward_cached(
        &self,
        params: &[T],
        batch: &Batch<T>,
        quant: Quantizer,
    ) -> Result<(LossBreakdown<T>, LatentCache<T>)> {
        let mut cache = LatentCache { batch_size: 0, y: Vec::new(), y_hat: Vec::new(), hyper_noise: None };
        let loss = self.run(params, batch, quant, None, Some(&mut cache))?;
        Ok((loss, cache))
    }

    /// Exact gradient of the total loss, for the same quantization
    /// realization as the paired [`ToyCodec::forward_loss`] call.
    pub fn backward(&self, params: &[T], batch: &Batch<T>, quant: Quantizer) -> Result<(LossBreakdown<T>, Vec<T>)> {
        let mut grad = vec![T::zero(); self.layout.n];
        let loss = self.run(params, batch, quant, Some(&mut grad), None)?;
        Ok((loss, grad))
    }

    /// `rate_y + rate_z` recomputed from cached latents. Only the hyper and
    /// entropy-parameter layers are read.
    pub fn eval_rate_only(&self, params: &[T], cache: Option<&LatentCache<T>>) -> Result<T> {
        let cache = cache.ok_or(Error::MissingCache)?;
        if cache.batch_size == 0 {
            return Err(Error::MissingCache);
        }
        self.check_layout(params)?;
        let (k, j) = (self.config.latent_dim, self.config.hyper_dim);
        let mut bits = 0.0;
        for b in 0..cache.batch_size {
            let uz = cache.hyper_noise.as_ref().map(|u| &u[b * j..(b + 1) * j]);
            let ent = self.entropy_pass(params, &cache.y[b * k..(b + 1) * k], &cache.y_hat[b * k..(b + 1) * k], uz)?;
            bits += ent.bits_y + ent.bits_z;
        }
        Ok(c(bits / (cache.batch_size * self.config.input_dim) as f64))
    }
}
