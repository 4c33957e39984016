//! Toy latent-diffusion harness: linear-beta noise scheduler, closed-form
//! forward diffusion, the classifier-free-guidance reverse sampling loop and
//! calibration batch generation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantizedGraph;
use crate::rng::normal_tensor;
use crate::tensor::Tensor;

/// Noise schedule: per-step betas and cumulative alpha-bar products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl SchedulerConfig {
    /// Linear beta ramp over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::invalid("scheduler needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if t_max == 1 {
            vec![beta_start]
        } else {
            (0..t_max)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
                .collect()
        };
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for &beta in &betas {
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        Ok(SchedulerConfig { betas, alpha_bars })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// Beta at timestep `t` in [1, T].
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product of (1 - beta) up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// A batch of latents at a fixed timestep. `cond` carries one condition row
/// per sample; `None` marks an unconditional batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub z: Tensor,
    pub t: usize,
    pub cond: Option<Tensor>,
    pub seed: u64,
}

/// Closed-form forward diffusion:
/// `z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * noise`.
pub fn forward_diffuse(
    z0: &Tensor,
    t: usize,
    scheduler: &SchedulerConfig,
    noise: &Tensor,
) -> Result<Tensor> {
    if t > scheduler.t_max() {
        return Err(Error::invalid(format!(
            "timestep {t} outside schedule of {} steps",
            scheduler.t_max()
        )));
    }
    if z0.shape() != noise.shape() {
        return Err(Error::shape(
            "forward_diffuse",
            format!("z0 {:?} vs noise {:?}", z0.shape(), noise.shape()),
        ));
    }
    if t == 0 {
        return Ok(z0.clone());
    }
    let ab = scheduler.alpha_bar(t);
    let a = ab.sqrt();
    let b = (1.0 - ab).sqrt();
    let data = z0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(z, n)| a * z + b * n)
        .collect();
    Tensor::new(z0.shape().to_vec(), data)
}

/// Classifier-free-guidance blend. The identity points g = 0 and g = 1 are
/// returned exactly.
pub fn guided_eps(eps_cond: &Tensor, eps_uncond: &Tensor, guidance: f64) -> Tensor {
    if guidance == 0.0 {
        return eps_uncond.clone();
    }
    if guidance == 1.0 {
        return eps_cond.clone();
    }
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(u, c)| u + guidance * (c - u))
        .collect();
    Tensor::new(eps_uncond.shape().to_vec(), data).expect("matching shapes")
}

/// One ancestral DDPM update from `z_t` to `z_{t-1}`. `noise` is required
/// for t > 1 and ignored at t = 1.
pub fn ancestral_update(
    scheduler: &SchedulerConfig,
    z: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if z.shape() != eps_hat.shape() {
        return Err(Error::shape(
            "ancestral_update",
            format!("z {:?} vs eps {:?}", z.shape(), eps_hat.shape()),
        ));
    }
    let beta = scheduler.beta(t);
    let ab_t = scheduler.alpha_bar(t);
    let eps_coef = beta / (1.0 - ab_t).sqrt();
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let mut data: Vec<f64> = z
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(zt, e)| (zt - eps_coef * e) * inv_sqrt_alpha)
        .collect();
    if t > 1 {
        let noise = noise.ok_or_else(|| Error::invalid("noise required for t > 1"))?;
        if noise.shape() != z.shape() {
            return Err(Error::shape(
                "ancestral_update",
                format!("noise {:?} vs z {:?}", noise.shape(), z.shape()),
            ));
        }
        let ab_prev = scheduler.alpha_bar(t - 1);
        let sigma = ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt();
        for (d, n) in data.iter_mut().zip(noise.data()) {
            *d += sigma * n;
        }
    }
    Tensor::new(z.shape().to_vec(), data)
}

/// Seeded initial latent for a sampling chain.
pub fn sample_init_latent(shape: Vec<usize>, seed: u64) -> Tensor {
    normal_tensor(shape, seed, "sample-init", 0)
}

/// Seeded per-step ancestral noise, shared by every execution path of the
/// same chain.
pub fn sample_step_noise(shape: Vec<usize>, seed: u64, t: usize) -> Tensor {
    normal_tensor(shape, seed, "sample-noise", t as u64)
}

/// Stack conditional rows over unconditional zero rows: the batch layout
/// used for guided prediction.
pub fn stacked_cond_rows(cond: &Tensor, n: usize) -> Result<Tensor> {
    let dims = cond.shape();
    if dims.len() != 1 {
        return Err(Error::shape(
            "sample",
            format!("condition vector must be 1D, got {dims:?}"),
        ));
    }
    let d = dims[0];
    let mut rows = Vec::with_capacity(2 * n * d);
    for _ in 0..n {
        rows.extend_from_slice(cond.data());
    }
    rows.extend(std::iter::repeat(0.0).take(n * d));
    Tensor::new(vec![2 * n, d], rows)
}

/// Duplicate a latent batch along the batch axis.
pub fn duplicate_batch(z: &Tensor) -> Result<Tensor> {
    let mut shape = z.shape().to_vec();
    shape[0] *= 2;
    let mut data = Vec::with_capacity(z.numel() * 2);
    data.extend_from_slice(z.data());
    data.extend_from_slice(z.data());
    Tensor::new(shape, data)
}

/// Split a 2n-row tensor into its two n-row halves.
pub fn split_halves(out: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut shape = out.shape().to_vec();
    if shape[0] % 2 != 0 {
        return Err(Error::shape(
            "sample",
            format!("cannot halve batch of {}", shape[0]),
        ));
    }
    shape[0] /= 2;
    let half = out.numel() / 2;
    let a = Tensor::new(shape.clone(), out.data()[..half].to_vec())?;
    let b = Tensor::new(shape, out.data()[half..].to_vec())?;
    Ok((a, b))
}

/// Guided noise prediction through the quantized path: one forward over the
/// [conditional; unconditional] stacked batch.
pub fn predict_guided_q(
    qgraph: &QuantizedGraph,
    z: &Tensor,
    t: usize,
    cond: &Tensor,
    guidance: f64,
) -> Result<Tensor> {
    let n = z.shape()[0];
    let stacked = duplicate_batch(z)?;
    let cond_rows = stacked_cond_rows(cond, n)?;
    let out = qgraph.forward_q(&stacked, t, &cond_rows, None)?;
    let (eps_c, eps_u) = split_halves(&out)?;
    Ok(guided_eps(&eps_c, &eps_u, guidance))
}

/// Reverse-diffusion sampling through the quantized execution path.
/// Returns the final z0 batch of `n` samples.
pub fn sample(
    qgraph: &QuantizedGraph,
    scheduler: &SchedulerConfig,
    guidance: f64,
    cond: &Tensor,
    n: usize,
    seed: u64,
) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    if guidance < 0.0 {
        return Err(Error::invalid("guidance must be non-negative"));
    }
    let shape = qgraph.graph().input.latent_shape(n);
    let mut z = sample_init_latent(shape.clone(), seed);
    for t in (1..=scheduler.t_max()).rev() {
        let eps_hat = predict_guided_q(qgraph, &z, t, cond, guidance)?;
        let noise = if t > 1 {
            Some(sample_step_noise(shape.clone(), seed, t))
        } else {
            None
        };
        z = ancestral_update(scheduler, &z, &eps_hat, t, noise.as_ref())?;
    }
    Ok(z)
}

/// Unconditional forward-diffused batches for calibration, one `LatentBatch`
/// per requested timestep. Draws are sub-seeded per timestep, so the batch
/// generated for a step does not depend on which other steps are requested.
pub fn gen_calibration_batches(
    scheduler: &SchedulerConfig,
    steps: &[usize],
    n: usize,
    latent: [usize; 3],
    seed: u64,
) -> Result<Vec<LatentBatch>> {
    if steps.is_empty() {
        return Err(Error::invalid("calibration step set is empty"));
    }
    if n == 0 {
        return Err(Error::invalid("calibration needs at least one sample"));
    }
    let [c, h, w] = latent;
    let shape = vec![n, c, h, w];
    let mut batches = Vec::with_capacity(steps.len());
    for &t in steps {
        if t < 1 || t > scheduler.t_max() {
            return Err(Error::invalid(format!(
                "calibration step {t} outside [1, {}]",
                scheduler.t_max()
            )));
        }
        let z0 = normal_tensor(shape.clone(), seed, "calib-z0", t as u64);
        let noise = normal_tensor(shape.clone(), seed, "calib-noise", t as u64);
        let z = forward_diffuse(&z0, t, scheduler, &noise)?;
        batches.push(LatentBatch {
            z,
            t,
            cond: None,
            seed,
        });
    }
    Ok(batches)
}
