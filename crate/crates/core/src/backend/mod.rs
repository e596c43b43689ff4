//! Conditional latent diffusion model interface.
//!
//! [`DiffusionBackend`] is the contract the inversion engine relies on. The
//! engine only needs gradients with respect to the conditioning tensor, so a
//! backend provides a noise prediction and its vector-Jacobian product; the
//! forward process, the denoising loss and the sampler are derived from those.

pub mod adapter;
pub mod toy;

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use adapter::AdapterBackend;
pub use toy::ToyBackend;

/// Cumulative signal retention ᾱ_1..ᾱ_T, strictly decreasing.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::Config("noise schedule needs at least one timestep".into()));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config("every alpha_bar must lie in (0, 1]".into()));
        }
        if let Some(t) = alpha_bar.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!(
                "alpha_bar must be strictly decreasing (fails between t={} and t={})",
                t + 1,
                t + 2
            )));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    /// ᾱ_t = Π_{s≤t} (1 − β_s) with β linear from `beta_start` to `beta_end`.
    pub fn linear_beta(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("T must be positive".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut acc = 1.0;
        let alpha_bar = (0..steps)
            .map(|i| {
                let frac = if steps == 1 {
                    0.0
                } else {
                    i as f64 / (steps - 1) as f64
                };
                acc *= 1.0 - (beta_start + (beta_end - beta_start) * frac);
                acc
            })
            .collect();
        NoiseSchedule::from_alpha_bar(alpha_bar)
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Timestep { t, max: self.len() });
        }
        Ok(())
    }

    /// ᾱ_t for 1-based `t`; `t = 0` yields 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Latent tensor `h × w × c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage(Array3<f64>);

impl LatentImage {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent"));
        }
        Ok(LatentImage(data))
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        LatentImage(Array3::zeros(shape))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        let (h, w, c) = self.0.dim();
        [h, w, c]
    }
}

/// Pixel image `H × W × 3` with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PixelImage(Array3<f64>);

impl PixelImage {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::shape("pixel channels", 3, data.dim().2));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pixel image"));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Format {
                what: "pixel image",
                msg: "values must lie in [0, 1]".into(),
            });
        }
        Ok(PixelImage(data))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        let (h, w, c) = self.0.dim();
        [h, w, c]
    }
}

pub(crate) fn check_shape(context: &'static str, want: [usize; 3], got: [usize; 3]) -> Result<()> {
    if want != got {
        return Err(Error::shape(context, format!("{want:?}"), format!("{got:?}")));
    }
    Ok(())
}

/// Conditional diffusion model used by the inversion engine.
///
/// Implementors supply the five model-specific operations; everything else has
/// a default derived from them and the schedule.
pub trait DiffusionBackend: Send + Sync {
    fn schedule(&self) -> &NoiseSchedule;

    fn latent_shape(&self) -> [usize; 3];

    fn pixel_shape(&self) -> [usize; 3];

    fn encode_image(&self, img: &PixelImage) -> Result<LatentImage>;

    fn decode_latent(&self, x: &LatentImage) -> Result<PixelImage>;

    /// ε_θ(x_t, t, cond)
    fn predict_noise(
        &self,
        x_t: &LatentImage,
        t: usize,
        cond: &ArrayView2<'_, f64>,
    ) -> Result<Array3<f64>>;

    /// Gradient of `<upstream, ε_θ(x_t, t, cond)>` with respect to `cond`.
    fn predict_noise_vjp(
        &self,
        x_t: &LatentImage,
        t: usize,
        cond: &ArrayView2<'_, f64>,
        upstream: &Array3<f64>,
    ) -> Result<Array2<f64>>;

    fn timesteps(&self) -> usize {
        self.schedule().len()
    }

    /// Closed-form forward process x_t = √ᾱ_t·x + √(1−ᾱ_t)·ε.
    fn add_noise(&self, x: &LatentImage, t: usize, eps: &Array3<f64>) -> Result<LatentImage> {
        let ab = self.schedule().alpha_bar(t)?;
        self.schedule().check(t)?;
        check_shape("noise", x.shape(), shape3(eps))?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let out = Zip::from(x.data())
            .and(eps)
            .map_collect(|&xv, &ev| sa * xv + sn * ev);
        LatentImage::new(out)
    }

    /// Mean squared error between the injected and the predicted noise.
    fn ldm_loss(
        &self,
        x: &LatentImage,
        t: usize,
        eps: &Array3<f64>,
        cond: &ArrayView2<'_, f64>,
    ) -> Result<f64> {
        let x_t = self.add_noise(x, t, eps)?;
        let pred = self.predict_noise(&x_t, t, cond)?;
        let n = eps.len() as f64;
        Ok(Zip::from(eps)
            .and(&pred)
            .fold(0.0, |acc, &e, &p| acc + (e - p) * (e - p))
            / n)
    }

    /// [`ldm_loss`](Self::ldm_loss) together with its gradient with respect to `cond`.
    fn ldm_loss_grad(
        &self,
        x: &LatentImage,
        t: usize,
        eps: &Array3<f64>,
        cond: &ArrayView2<'_, f64>,
    ) -> Result<(f64, Array2<f64>)> {
        let x_t = self.add_noise(x, t, eps)?;
        let pred = self.predict_noise(&x_t, t, cond)?;
        let n = eps.len() as f64;
        let residual = eps - &pred;
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / n;
        let upstream = residual.mapv(|r| -2.0 * r / n);
        let grad = self.predict_noise_vjp(&x_t, t, cond, &upstream)?;
        Ok((loss, grad))
    }

    /// Ancestral sampling over `steps` evenly strided timesteps from T down to 1.
    fn sample(&self, cond: &ArrayView2<'_, f64>, steps: usize, seed: u64) -> Result<LatentImage> {
        if steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        let big_t = self.timesteps();
        let steps = steps.min(big_t);
        let ts: Vec<usize> = (0..steps).map(|k| big_t - k * big_t / steps).collect();
        let mut r = rng::rng_from(&[rng::stream::SAMPLER, seed]);
        let mut x = LatentImage::new(rng::standard_normal(&mut r, self.latent_shape()))?;
        for (k, &t) in ts.iter().enumerate() {
            let ab = self.schedule().alpha_bar(t)?;
            let eps = self.predict_noise(&x, t, cond)?;
            let x0 = (x.data() - &(eps * (1.0 - ab).sqrt())) / ab.sqrt();
            let Some(&prev) = ts.get(k + 1) else {
                return LatentImage::new(x0);
            };
            let ab_prev = self.schedule().alpha_bar(prev)?;
            let beta = 1.0 - ab / ab_prev;
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ct = (ab / ab_prev).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
            let z: Array3<f64> = rng::standard_normal(&mut r, self.latent_shape());
            x = LatentImage::new(x0 * c0 + x.data() * ct + z * sigma)?;
        }
        unreachable!("loop returns on its last step")
    }
}

fn shape3(a: &Array3<f64>) -> [usize; 3] {
    let (h, w, c) = a.dim();
    [h, w, c]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Toy,
    Adapter,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// JSON description of which backend to build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendManifest {
    #[serde(rename = "type")]
    pub kind: BackendKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "T", default = "default_timesteps")]
    pub timesteps: usize,
    #[serde(default = "default_latent_shape")]
    pub latent_shape: [usize; 3],
    #[serde(default = "default_pixel_shape")]
    pub pixel_shape: [usize; 3],
    #[serde(default)]
    pub schedule: ScheduleSpec,
    /// Adapter executable and arguments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
}

fn default_timesteps() -> usize {
    1000
}

fn default_latent_shape() -> [usize; 3] {
    [4, 4, 2]
}

fn default_pixel_shape() -> [usize; 3] {
    [16, 16, 3]
}

impl BackendManifest {
    pub fn toy(seed: u64) -> Self {
        BackendManifest {
            kind: BackendKind::Toy,
            seed,
            timesteps: default_timesteps(),
            latent_shape: default_latent_shape(),
            pixel_shape: default_pixel_shape(),
            schedule: ScheduleSpec::default(),
            command: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear_beta(self.timesteps, self.schedule.beta_start, self.schedule.beta_end)
    }

    /// Builds the backend. `context_dim` is the conditioning width of the text encoder in use.
    pub fn build(&self, context_dim: usize) -> Result<Box<dyn DiffusionBackend>> {
        match self.kind {
            BackendKind::Toy => Ok(Box::new(ToyBackend::from_manifest(self, context_dim)?)),
            BackendKind::Adapter => {
                let command = self
                    .command
                    .as_deref()
                    .filter(|c| !c.is_empty())
                    .ok_or_else(|| Error::Config("adapter backend needs a `command`".into()))?;
                let backend = AdapterBackend::spawn(command)?;
                if backend.timesteps() != self.timesteps || backend.latent_shape() != self.latent_shape {
                    return Err(Error::Config(format!(
                        "adapter reports T={} latent {:?}, manifest declares T={} latent {:?}",
                        backend.timesteps(),
                        backend.latent_shape(),
                        self.timesteps,
                        self.latent_shape
                    )));
                }
                Ok(Box::new(backend))
            }
        }
    }
}
