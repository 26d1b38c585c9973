//! Linear-beta noise schedule, forward noising, the noise-prediction loss,
//! and the DDPM / DDIM reverse samplers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Steps are 1-based: `beta(t)` and `alpha_bar(t)` for `1 <= t <= T`, with
/// `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie in (0,1)".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            steps: betas.len(),
            betas,
            alpha_bars,
        })
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior variance of the ancestral step at `t`.
    pub fn sigma2(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Re-derives the cached products and bounds; used after deserializing.
    pub fn validate(&self) -> Result<()> {
        let fresh = NoiseSchedule::from_betas(self.betas.clone())?;
        if fresh.alpha_bars != self.alpha_bars || self.steps != self.betas.len() {
            return Err(Error::schema("schedule.alpha_bars", "inconsistent with betas"));
        }
        Ok(())
    }
}

/// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise<T: Real>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    s.check(t)?;
    let a = s.alpha_bar(t);
    let (ca, cb) = (T::of(a.sqrt()), T::of((1.0 - a).sqrt()));
    z0.zip_map(eps, |x, e| ca * x + cb * e)
}

/// The random part of one loss evaluation: a batch-level timestep and the
/// noise added to every latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LossDraw<T: Real = f32> {
    pub t: usize,
    pub eps: Tensor<T>,
}

impl<T: Real> LossDraw<T> {
    pub fn sample<R: Rng + ?Sized>(s: &NoiseSchedule, shape: &[usize], rng: &mut R) -> Self {
        let t = rng.random_range(1..=s.steps);
        Self {
            t,
            eps: Tensor::randn(shape, 1.0, rng),
        }
    }
}

/// Builds the noise-prediction loss `mean (eps - eps_hat(z_t, t))^2` on the
/// graph. `predict` receives the noised latent as a graph input.
pub fn noise_loss<T, F>(
    g: &mut Graph<T>,
    z0: &Tensor<T>,
    draw: &LossDraw<T>,
    s: &NoiseSchedule,
    predict: F,
) -> Result<Var>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, Var, usize) -> Result<Var>,
{
    let zt = forward_noise(z0, draw.t, &draw.eps, s)?;
    let zt = g.input(zt);
    let eps_hat = predict(g, zt, draw.t)?;
    let target = g.input(draw.eps.clone());
    let loss = g.mse(eps_hat, target)?;
    let v = g.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::numerical("loss", format!("non-finite loss at t={}", draw.t)));
    }
    Ok(loss)
}

/// One ancestral step from `t` to `t - 1`; no noise is added at `t = 1`.
pub fn ddpm_step<R: Rng + ?Sized>(
    z_t: &Tensor<f32>,
    t: usize,
    eps_hat: &Tensor<f32>,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    s.check(t)?;
    let beta = s.beta(t);
    let c_eps = (beta / (1.0 - s.alpha_bar(t)).sqrt()) as f32;
    let c_out = (1.0 / (1.0 - beta).sqrt()) as f32;
    let mut mu = z_t.zip_map(eps_hat, |z, e| (z - c_eps * e) * c_out)?;
    if t > 1 {
        let sigma = s.sigma2(t).sqrt();
        let noise = Tensor::<f32>::randn(z_t.shape(), sigma, rng);
        mu.add_assign(&noise);
    }
    Ok(mu)
}

/// Deterministic (eta = 0) step from `t` to `t_prev < t`.
pub fn ddim_step(
    z_t: &Tensor<f32>,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor<f32>,
    s: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    s.check(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("ddim step {t} -> {t_prev} is not backward")));
    }
    let a = s.alpha_bar(t);
    let ap = s.alpha_bar(t_prev);
    let (sa, sb) = (a.sqrt() as f32, (1.0 - a).sqrt() as f32);
    let (pa, pb) = (ap.sqrt() as f32, (1.0 - ap).sqrt() as f32);
    z_t.zip_map(eps_hat, |z, e| {
        let x0 = (z - sb * e) / sa;
        pa * x0 + pb * e
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            _ => Err(Error::InvalidArgument(format!("unknown sampler {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// DDIM sub-schedule length; DDPM always walks every step.
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: 50,
        }
    }
}

/// Evenly strided DDIM timesteps `t_k = round(k T / n)`, from `k = n` down to 1.
pub fn ddim_timesteps(total: usize, n: usize) -> Vec<usize> {
    let n = n.clamp(1, total);
    let mut ts: Vec<usize> = (1..=n)
        .rev()
        .map(|k| ((k * total) as f64 / n as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}

/// Runs the reverse chain from `z_T ~ N(0, I)` of `shape` down to `z_0`.
/// `eps_model(z_t, t)` is the conditioned noise predictor.
pub fn sample<R, F>(
    eps_model: F,
    shape: &[usize],
    s: &NoiseSchedule,
    rng: &mut R,
    cfg: SamplerConfig,
) -> Result<Tensor<f32>>
where
    R: Rng + ?Sized,
    F: FnMut(&Tensor<f32>, usize) -> Result<Tensor<f32>>,
{
    let z_t = Tensor::<f32>::randn(shape, 1.0, rng);
    sample_from(eps_model, z_t, s, rng, cfg)
}

/// As [`sample`], starting from a given `z_T`.
pub fn sample_from<R, F>(
    mut eps_model: F,
    mut z: Tensor<f32>,
    s: &NoiseSchedule,
    rng: &mut R,
    cfg: SamplerConfig,
) -> Result<Tensor<f32>>
where
    R: Rng + ?Sized,
    F: FnMut(&Tensor<f32>, usize) -> Result<Tensor<f32>>,
{
    let finite = |z: &Tensor<f32>, t: usize| {
        if z.is_finite() {
            Ok(())
        } else {
            Err(Error::numerical("sampling", format!("non-finite latent at step {t}")))
        }
    };
    match cfg.kind {
        SamplerKind::Ddpm => {
            for t in (1..=s.steps).rev() {
                let eps = eps_model(&z, t)?;
                z = ddpm_step(&z, t, &eps, s, rng)?;
                finite(&z, t)?;
            }
        }
        SamplerKind::Ddim => {
            let ts = ddim_timesteps(s.steps, cfg.steps);
            for (i, &t) in ts.iter().enumerate() {
                let t_prev = ts.get(i + 1).copied().unwrap_or(0);
                let eps = eps_model(&z, t)?;
                z = ddim_step(&z, t, t_prev, &eps, s)?;
                finite(&z, t)?;
            }
        }
    }
    Ok(z)
}
