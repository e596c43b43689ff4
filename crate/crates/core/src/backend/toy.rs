//! Seeded toy latent diffusion model.
//!
//! The denoiser is `ε̂ = A·x_t + w(t)·B·pool(cond) + b` with `w(t) = 1 − ᾱ_t`.
//! Because the conditioning gain grows with `t`, prompts only change the loss
//! appreciably at the noisy end of the chain, which is the behavior the
//! inversion engine exploits when it restricts the timestep range.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

use super::{check_shape, BackendManifest, DiffusionBackend, LatentImage, NoiseSchedule, PixelImage};
use crate::error::{Error, Result};
use crate::rng;

/// Orthogonal colour basis: luma, red-blue and green-magenta contrasts.
const CHANNEL_BASIS: [[f64; 3]; 3] = [
    [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    [0.5, 0.0, -0.5],
    [1.0 / 6.0, -1.0 / 3.0, 1.0 / 6.0],
];

/// Standard deviation of the random perturbation added to the identity in `A`.
const SELF_PERTURBATION: f64 = 0.1;
const BIAS_SCALE: f64 = 0.05;
const COND_SCALE: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct ToyBackend {
    schedule: NoiseSchedule,
    latent_shape: [usize; 3],
    pixel_shape: [usize; 3],
    context_dim: usize,
    /// n × n, acting on the flattened noisy latent.
    self_map: Array2<f64>,
    /// n × context_dim, acting on the position-pooled conditioning.
    cond_map: Array2<f64>,
    bias: Array1<f64>,
}

impl ToyBackend {
    pub fn new(
        seed: u64,
        schedule: NoiseSchedule,
        latent_shape: [usize; 3],
        pixel_shape: [usize; 3],
        context_dim: usize,
    ) -> Result<Self> {
        let [h, w, c] = latent_shape;
        let [ph, pw, pc] = pixel_shape;
        if h == 0 || w == 0 || c == 0 || context_dim == 0 {
            return Err(Error::Config("latent shape and context width must be positive".into()));
        }
        if c > CHANNEL_BASIS.len() {
            return Err(Error::Config(format!(
                "toy backend supports at most {} latent channels, got {c}",
                CHANNEL_BASIS.len()
            )));
        }
        if pc != 3 || ph == 0 || pw == 0 || ph % h != 0 || pw % w != 0 {
            return Err(Error::Config(format!(
                "pixel shape {pixel_shape:?} must have 3 channels and tile the latent grid {h}x{w}"
            )));
        }
        let n = h * w * c;
        let mut r = rng::rng_from(&[rng::stream::PARAMS, 0x0054_4f59, seed]);
        let mut self_map: Array2<f64> = rng::standard_normal(&mut r, (n, n));
        self_map *= SELF_PERTURBATION / (n as f64).sqrt();
        self_map += &Array2::eye(n);
        let mut cond_map: Array2<f64> = rng::standard_normal(&mut r, (n, context_dim));
        cond_map *= COND_SCALE;
        let mut bias: Array1<f64> = rng::standard_normal(&mut r, n);
        bias *= BIAS_SCALE;
        Ok(ToyBackend {
            schedule,
            latent_shape,
            pixel_shape,
            context_dim,
            self_map,
            cond_map,
            bias,
        })
    }

    pub fn from_manifest(manifest: &BackendManifest, context_dim: usize) -> Result<Self> {
        ToyBackend::new(
            manifest.seed,
            manifest.noise_schedule()?,
            manifest.latent_shape,
            manifest.pixel_shape,
            context_dim,
        )
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    /// Conditioning gain w(t) = 1 − ᾱ_t.
    pub fn cond_gain(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.schedule.alpha_bar(t)?)
    }

    /// Minimum-norm latent whose expected loss over `t ∈ [t_low, t_high]` is
    /// minimized, among all conditionings, by `cond`.
    ///
    /// Averaged over noise and uniform `t`, the loss is a convex quadratic in the
    /// pooled conditioning `c`, with stationary point given by
    /// `Σ w·√ᾱ · BᵀA x = −Σ w² · BᵀB c − Σ w · Bᵀb`. This solves for `x`.
    pub fn render(&self, cond: &ArrayView2<'_, f64>, t_low: usize, t_high: usize) -> Result<LatentImage> {
        self.check_cond(cond)?;
        self.schedule.check(t_low)?;
        self.schedule.check(t_high)?;
        if t_low == 0 || t_low > t_high {
            return Err(Error::Config(format!("invalid timestep range [{t_low}, {t_high}]")));
        }
        let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
        for t in t_low..=t_high {
            let ab = self.schedule.alpha_bar(t)?;
            let w = 1.0 - ab;
            s1 += w * ab.sqrt();
            s2 += w * w;
            s3 += w;
        }
        let pooled = cond.mean_axis(Axis(0)).expect("nonempty");
        let bt = self.cond_map.t();
        let rhs = -(bt.dot(&self.cond_map).dot(&pooled) * s2 + bt.dot(&self.bias) * s3) / s1;
        let m = bt.dot(&self.self_map);
        let gram = m.dot(&m.t());
        let k = self.context_dim;
        let gram = nalgebra::DMatrix::from_fn(k, k, |i, j| gram[[i, j]]);
        let rhs = nalgebra::DVector::from_fn(k, |i, _| rhs[i]);
        let coef = gram
            .cholesky()
            .ok_or(Error::NonFinite("render system"))?
            .solve(&rhs);
        let coef = Array1::from_iter(coef.iter().copied());
        let x = m.t().dot(&coef);
        let [h, w, c] = self.latent_shape;
        LatentImage::new(x.into_shape_with_order((h, w, c)).expect("latent size"))
    }

    fn check_cond(&self, cond: &ArrayView2<'_, f64>) -> Result<()> {
        if cond.nrows() == 0 || cond.ncols() != self.context_dim {
            return Err(Error::shape(
                "conditioning",
                format!("L x {}", self.context_dim),
                format!("{} x {}", cond.nrows(), cond.ncols()),
            ));
        }
        Ok(())
    }
}

impl DiffusionBackend for ToyBackend {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_shape(&self) -> [usize; 3] {
        self.latent_shape
    }

    fn pixel_shape(&self) -> [usize; 3] {
        self.pixel_shape
    }

    /// Average-pools each pixel block and projects colour onto the channel basis.
    fn encode_image(&self, img: &PixelImage) -> Result<LatentImage> {
        check_shape("pixel image", self.pixel_shape, img.shape())?;
        let [h, w, c] = self.latent_shape;
        let (fh, fw) = (self.pixel_shape[0] / h, self.pixel_shape[1] / w);
        let norm = (fh * fw) as f64;
        let px = img.data();
        let out = Array3::from_shape_fn((h, w, c), |(i, j, k)| {
            let basis = CHANNEL_BASIS[k];
            let mut acc = 0.0;
            for y in i * fh..(i + 1) * fh {
                for x in j * fw..(j + 1) * fw {
                    acc += (0..3).map(|ch| basis[ch] * px[[y, x, ch]]).sum::<f64>();
                }
            }
            acc / norm
        });
        LatentImage::new(out)
    }

    /// Nearest-neighbour upsampling and the pseudo-inverse colour map, clamped to [0, 1].
    fn decode_latent(&self, x: &LatentImage) -> Result<PixelImage> {
        check_shape("latent", self.latent_shape, x.shape())?;
        let [h, w, c] = self.latent_shape;
        let [ph, pw, _] = self.pixel_shape;
        let (fh, fw) = (ph / h, pw / w);
        let lat = x.data();
        let out = Array3::from_shape_fn((ph, pw, 3), |(y, xx, ch)| {
            let (i, j) = (y / fh, xx / fw);
            let v: f64 = (0..c)
                .map(|k| {
                    let b = CHANNEL_BASIS[k];
                    let norm2: f64 = b.iter().map(|v| v * v).sum();
                    lat[[i, j, k]] * b[ch] / norm2
                })
                .sum();
            v.clamp(0.0, 1.0)
        });
        PixelImage::new(out)
    }

    fn predict_noise(
        &self,
        x_t: &LatentImage,
        t: usize,
        cond: &ArrayView2<'_, f64>,
    ) -> Result<Array3<f64>> {
        check_shape("noisy latent", self.latent_shape, x_t.shape())?;
        self.check_cond(cond)?;
        let gain = self.cond_gain(t)?;
        let flat = x_t.data().iter().copied().collect::<Array1<f64>>();
        let pooled = cond.mean_axis(Axis(0)).expect("nonempty conditioning");
        let out = self.self_map.dot(&flat) + self.cond_map.dot(&pooled) * gain + &self.bias;
        Ok(out
            .into_shape_with_order(self.latent_shape)
            .expect("n matches latent shape"))
    }

    fn predict_noise_vjp(
        &self,
        x_t: &LatentImage,
        t: usize,
        cond: &ArrayView2<'_, f64>,
        upstream: &Array3<f64>,
    ) -> Result<Array2<f64>> {
        check_shape("noisy latent", self.latent_shape, x_t.shape())?;
        self.check_cond(cond)?;
        let (h, w, c) = upstream.dim();
        check_shape("noise cotangent", self.latent_shape, [h, w, c])?;
        let gain = self.cond_gain(t)?;
        let u = upstream.iter().copied().collect::<Array1<f64>>();
        let pooled_grad = self.cond_map.t().dot(&u) * (gain / cond.nrows() as f64);
        let rows = cond.nrows();
        Ok(pooled_grad
            .broadcast((rows, self.context_dim))
            .expect("row broadcast")
            .to_owned())
    }
}
