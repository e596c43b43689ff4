//! Prompt inversion by projected L-BFGS with delayed projection.
//!
//! Each iteration snaps the free prompt embedding onto the vocabulary, samples
//! a timestep from the configured range together with Gaussian noise, takes the
//! gradient of the denoising loss at the *projected* embedding, and moves the
//! *free* embedding along the L-BFGS direction. Only the returned prompt is
//! forced onto the vocabulary; the free variable may wander off it.

pub mod lbfgs;

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{DiffusionBackend, LatentImage};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::{Lexicon, Metric, PromptState};

pub use lbfgs::LbfgsHistory;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Lbfgs,
    /// Adam moments with the same delayed-projection scheme; kept for ablations.
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lbfgs" => Ok(Optimizer::Lbfgs),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Shape of the fixed `(t, seed)` grid used to score prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Defaults to T / 2, the start of the band where prompts matter.
    pub t_low: Option<usize>,
    /// Defaults to the backend's T.
    pub t_high: Option<usize>,
    pub timesteps: usize,
    pub seeds: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            t_low: None,
            t_high: None,
            timesteps: 8,
            seeds: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridEntry {
    pub t: usize,
    pub seed: u64,
}

/// Fixed set of `(timestep, noise seed)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGrid {
    entries: Vec<GridEntry>,
}

impl EvalGrid {
    pub fn new(entries: Vec<GridEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("evaluation grid is empty".into()));
        }
        Ok(EvalGrid { entries })
    }

    /// `timesteps` evenly spaced values in `[t_low, t_high]` (ends included) × seeds `0..seeds`.
    pub fn uniform(t_low: usize, t_high: usize, timesteps: usize, seeds: usize) -> Result<Self> {
        if t_low == 0 || t_low > t_high || timesteps == 0 || seeds == 0 {
            return Err(Error::Config(format!(
                "bad evaluation grid: t in [{t_low}, {t_high}], {timesteps} timesteps, {seeds} seeds"
            )));
        }
        let ts: Vec<usize> = if timesteps == 1 {
            vec![t_high]
        } else {
            (0..timesteps)
                .map(|k| {
                    let span = (t_high - t_low) as f64;
                    t_low + (span * k as f64 / (timesteps - 1) as f64).round() as usize
                })
                .collect()
        };
        let entries = ts
            .into_iter()
            .flat_map(|t| (0..seeds as u64).map(move |seed| GridEntry { t, seed }))
            .collect();
        EvalGrid::new(entries)
    }

    pub fn from_spec(spec: &GridSpec, big_t: usize) -> Result<Self> {
        let t_low = spec.t_low.unwrap_or((big_t / 2).max(1));
        EvalGrid::uniform(t_low, spec.t_high.unwrap_or(big_t), spec.timesteps, spec.seeds)
    }

    pub fn entries(&self) -> &[GridEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Noise tensor for one grid entry; depends only on `(seed, t)`.
pub fn grid_noise(entry: GridEntry, shape: [usize; 3]) -> Array3<f64> {
    rng::standard_normal(
        &mut rng::rng_from(&[rng::stream::EVAL, entry.seed, entry.t as u64]),
        shape,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub prompt_length: usize,
    pub t_start: usize,
    /// Upper end of the timestep range; `None` means T.
    pub t_end: Option<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    pub lbfgs_history: usize,
    pub curvature_threshold: f64,
    pub metric: Metric,
    pub init_token_ids: Option<Vec<usize>>,
    pub seed: u64,
    pub noise_samples_per_step: usize,
    pub optimizer: Optimizer,
    pub eval_grid: GridSpec,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            prompt_length: 8,
            t_start: 500,
            t_end: None,
            steps: 200,
            learning_rate: 0.1,
            lbfgs_history: 10,
            curvature_threshold: 1e-8,
            metric: Metric::Euclidean,
            init_token_ids: None,
            seed: 0,
            noise_samples_per_step: 1,
            optimizer: Optimizer::Lbfgs,
            eval_grid: GridSpec::default(),
        }
    }
}

impl InversionConfig {
    pub fn t_end_for(&self, big_t: usize) -> usize {
        self.t_end.unwrap_or(big_t)
    }

    pub fn validate(&self, big_t: usize) -> Result<()> {
        let t_end = self.t_end_for(big_t);
        if !(1 <= self.t_start && self.t_start <= t_end && t_end <= big_t) {
            return Err(Error::Config(format!(
                "timestep range [{}, {t_end}] must satisfy 1 <= t_start <= t_end <= T = {big_t}",
                self.t_start
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be a positive number".into()));
        }
        if self.prompt_length == 0 {
            return Err(Error::Config("prompt length must be positive".into()));
        }
        if self.noise_samples_per_step == 0 {
            return Err(Error::Config("noise_samples_per_step must be positive".into()));
        }
        if self.curvature_threshold.is_nan() || self.curvature_threshold < 0.0 {
            return Err(Error::Config("curvature threshold must be non-negative".into()));
        }
        if let Some(init) = &self.init_token_ids {
            if init.len() != self.prompt_length {
                return Err(Error::Config(format!(
                    "init prompt has {} tokens, prompt length is {}",
                    init.len(),
                    self.prompt_length
                )));
            }
        }
        EvalGrid::from_spec(&self.eval_grid, big_t)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    /// Timestep of the first draw of the iteration.
    pub t: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub token_ids: Vec<usize>,
    pub prompt: String,
    pub loss_trace: Vec<TraceEntry>,
    pub final_loss_estimate: f64,
}

/// What the optimizer minimizes for one `(t, ε)` draw.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// Denoising loss on the target latent.
    Target(&'a LatentImage),
    /// Loss on the target minus loss on the negative, sharing `(t, ε)`.
    Contrast {
        target: &'a LatentImage,
        negative: &'a LatentImage,
    },
}

impl Objective<'_> {
    fn check(&self, backend: &dyn DiffusionBackend) -> Result<()> {
        let want = backend.latent_shape();
        let latents: &[&LatentImage] = match self {
            Objective::Target(x) => &[*x],
            Objective::Contrast { target, negative } => &[*target, *negative],
        };
        for x in latents {
            crate::backend::check_shape("target latent", want, x.shape())?;
        }
        Ok(())
    }

    fn value_and_grad(
        &self,
        backend: &dyn DiffusionBackend,
        t: usize,
        eps: &Array3<f64>,
        cond: &ArrayView2<'_, f64>,
    ) -> Result<(f64, Array2<f64>)> {
        match *self {
            Objective::Target(x) => backend.ldm_loss_grad(x, t, eps, cond),
            Objective::Contrast { target, negative } => {
                let (lp, gp) = backend.ldm_loss_grad(target, t, eps, cond)?;
                let (ln, gn) = backend.ldm_loss_grad(negative, t, eps, cond)?;
                Ok((lp - ln, gp - gn))
            }
        }
    }

    fn value(
        &self,
        backend: &dyn DiffusionBackend,
        t: usize,
        eps: &Array3<f64>,
        cond: &ArrayView2<'_, f64>,
    ) -> Result<f64> {
        match *self {
            Objective::Target(x) => backend.ldm_loss(x, t, eps, cond),
            Objective::Contrast { target, negative } => {
                Ok(backend.ldm_loss(target, t, eps, cond)? - backend.ldm_loss(negative, t, eps, cond)?)
            }
        }
    }
}

/// Mean denoising loss of `token_ids` over `grid`.
pub fn evaluate_prompt(
    backend: &dyn DiffusionBackend,
    encoder: &dyn TextEncoder,
    lexicon: &Lexicon,
    token_ids: &[usize],
    target: &LatentImage,
    grid: &EvalGrid,
) -> Result<f64> {
    evaluate_objective(backend, encoder, lexicon, token_ids, Objective::Target(target), grid)
}

pub fn evaluate_objective(
    backend: &dyn DiffusionBackend,
    encoder: &dyn TextEncoder,
    lexicon: &Lexicon,
    token_ids: &[usize],
    objective: Objective<'_>,
    grid: &EvalGrid,
) -> Result<f64> {
    objective.check(backend)?;
    let rows = lexicon.embed(token_ids)?;
    let cond = encoder.encode(&rows.view())?;
    let shape = backend.latent_shape();
    let mut total = 0.0;
    for &entry in grid.entries() {
        let eps = grid_noise(entry, shape);
        total += objective.value(backend, entry.t, &eps, &cond.view())?;
    }
    Ok(total / grid.len() as f64)
}

/// Hooks for watching an inversion run.
pub trait Observer {
    /// Called at the start of iteration `iteration` (1-based) after projection.
    fn on_iterate(&mut self, _iteration: usize, _state: &PromptState) {}
}

impl Observer for () {}

impl<F: FnMut(usize, &PromptState)> Observer for F {
    fn on_iterate(&mut self, iteration: usize, state: &PromptState) {
        self(iteration, state)
    }
}

#[derive(Clone, Debug)]
struct AdamState {
    m: Array2<f64>,
    v: Array2<f64>,
    steps: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One inversion run, advanced an iteration at a time.
///
/// The run borrows the model immutably and owns all optimizer state, so it can
/// be moved between threads between iterations.
pub struct Inversion<'a> {
    backend: &'a dyn DiffusionBackend,
    encoder: &'a dyn TextEncoder,
    lexicon: &'a Lexicon,
    objective: Objective<'a>,
    config: InversionConfig,
    t_end: usize,
    free: Array2<f64>,
    history: LbfgsHistory,
    adam: Option<AdamState>,
    /// Projected point of the previous iteration.
    previous: Option<Array2<f64>>,
    draws: ChaCha8Rng,
    iteration: usize,
    trace: Vec<TraceEntry>,
}

impl<'a> Inversion<'a> {
    pub fn new(
        backend: &'a dyn DiffusionBackend,
        encoder: &'a dyn TextEncoder,
        lexicon: &'a Lexicon,
        objective: Objective<'a>,
        config: InversionConfig,
    ) -> Result<Self> {
        let big_t = backend.timesteps();
        config.validate(big_t)?;
        objective.check(backend)?;
        if encoder.input_dim() != lexicon.dim() {
            return Err(Error::shape("encoder input width", lexicon.dim(), encoder.input_dim()));
        }
        if config.prompt_length > encoder.max_len() {
            return Err(Error::Capacity {
                len: config.prompt_length,
                max: encoder.max_len(),
            });
        }
        let init_ids = match &config.init_token_ids {
            Some(ids) => {
                lexicon.vocab().check_ids(ids)?;
                ids.clone()
            }
            None => {
                let feasible: Vec<usize> = lexicon.vocab().feasible_ids().collect();
                let mut r = rng::rng_from(&[rng::stream::INIT, config.seed]);
                (0..config.prompt_length)
                    .map(|_| feasible[r.gen_range(0..feasible.len())])
                    .collect()
            }
        };
        let free = lexicon.embed(&init_ids)?;
        let adam = (config.optimizer == Optimizer::Adam).then(|| AdamState {
            m: Array2::zeros(free.raw_dim()),
            v: Array2::zeros(free.raw_dim()),
            steps: 0,
        });
        Ok(Inversion {
            backend,
            encoder,
            lexicon,
            objective,
            t_end: config.t_end_for(big_t),
            history: LbfgsHistory::new(config.lbfgs_history, config.curvature_threshold),
            draws: rng::rng_from(&[rng::stream::DRAWS, config.seed]),
            trace: Vec::with_capacity(config.steps),
            config,
            free,
            adam,
            previous: None,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.steps
    }

    /// The unprojected variable.
    pub fn free(&self) -> &Array2<f64> {
        &self.free
    }

    pub fn history(&self) -> &LbfgsHistory {
        &self.history
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    /// Projects the current free variable.
    pub fn state(&self) -> Result<PromptState> {
        self.lexicon.project_state(self.free.clone(), self.config.metric)
    }

    fn draw(&mut self) -> Vec<(usize, Array3<f64>)> {
        let shape = self.backend.latent_shape();
        (0..self.config.noise_samples_per_step)
            .map(|_| {
                let t = self.draws.gen_range(self.config.t_start..=self.t_end);
                (t, rng::standard_normal(&mut self.draws, shape))
            })
            .collect()
    }

    /// Mean objective and its gradient at `projected` over the draws.
    fn gradient_at(&self, projected: &Array2<f64>, draws: &[(usize, Array3<f64>)]) -> Result<(f64, Array2<f64>)> {
        let cond = self.encoder.encode(&projected.view())?;
        let mut loss = 0.0;
        let mut cond_grad = Array2::zeros(cond.raw_dim());
        for (t, eps) in draws {
            let (l, g) = self.objective.value_and_grad(self.backend, *t, eps, &cond.view())?;
            loss += l;
            cond_grad += &g;
        }
        let k = draws.len() as f64;
        loss /= k;
        cond_grad /= k;
        let grad = self.encoder.encode_vjp(&projected.view(), &cond_grad.view())?;
        Ok((loss, grad))
    }

    /// Runs one iteration.
    pub fn step(&mut self, observer: &mut dyn Observer) -> Result<()> {
        let iteration = self.iteration + 1;
        let state = self.state()?;
        observer.on_iterate(iteration, &state);
        let draws = self.draw();
        let t = draws[0].0;
        let (loss, grad) = self.gradient_at(&state.projected, &draws)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { iteration });
        }
        let direction = match &mut self.adam {
            None => {
                // Curvature pairs difference successive projected points, both
                // evaluated under the current draws.
                if let Some(prev) = self.previous.take() {
                    if prev != state.projected {
                        let (_, prev_grad) = self.gradient_at(&prev, &draws)?;
                        let s = &state.projected - &prev;
                        let y = &grad - &prev_grad;
                        self.history.push(s.into_raw_vec_and_offset().0, y.into_raw_vec_and_offset().0);
                    }
                }
                let flat = grad.as_standard_layout();
                let dir = self
                    .history
                    .direction(flat.as_slice().expect("standard layout"))
                    .map_err(|_| Error::Divergence { iteration })?;
                Array2::from_shape_vec(grad.raw_dim(), dir).expect("same size")
            }
            Some(adam) => {
                adam.steps += 1;
                adam.m.zip_mut_with(&grad, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
                adam.v.zip_mut_with(&grad, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
                let c1 = 1.0 - ADAM_BETA1.powi(adam.steps);
                let c2 = 1.0 - ADAM_BETA2.powi(adam.steps);
                ndarray::Zip::from(&adam.m)
                    .and(&adam.v)
                    .map_collect(|&m, &v| (m / c1) / ((v / c2).sqrt() + ADAM_EPS))
            }
        };
        let next = &self.free - &(direction * self.config.learning_rate);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration });
        }
        self.free = next;
        if self.adam.is_none() {
            self.previous = Some(state.projected);
        }
        self.trace.push(TraceEntry { iter: iteration, t, loss });
        self.iteration = iteration;
        log::debug!("iter {iteration} t={t} loss={loss:.6}");
        Ok(())
    }

    /// Projects the final free variable and scores it on the evaluation grid.
    pub fn finish(self) -> Result<InversionResult> {
        let state = self.state()?;
        let grid = EvalGrid::from_spec(&self.config.eval_grid, self.backend.timesteps())?;
        let final_loss_estimate = evaluate_objective(
            self.backend,
            self.encoder,
            self.lexicon,
            &state.token_ids,
            self.objective,
            &grid,
        )?;
        Ok(InversionResult {
            prompt: self.lexicon.detokenize(&state.token_ids)?,
            token_ids: state.token_ids,
            loss_trace: self.trace,
            final_loss_estimate,
        })
    }

    pub fn run(mut self, observer: &mut dyn Observer) -> Result<InversionResult> {
        while !self.is_done() {
            self.step(observer)?;
        }
        self.finish()
    }
}

pub fn invert(
    backend: &dyn DiffusionBackend,
    encoder: &dyn TextEncoder,
    lexicon: &Lexicon,
    target: &LatentImage,
    config: &InversionConfig,
) -> Result<InversionResult> {
    Inversion::new(backend, encoder, lexicon, Objective::Target(target), config.clone())?.run(&mut ())
}

/// Inversion that pulls towards `target` and pushes away from `negative`.
pub fn invert_negative(
    backend: &dyn DiffusionBackend,
    encoder: &dyn TextEncoder,
    lexicon: &Lexicon,
    target: &LatentImage,
    negative: &LatentImage,
    config: &InversionConfig,
) -> Result<InversionResult> {
    let objective = Objective::Contrast { target, negative };
    Inversion::new(backend, encoder, lexicon, objective, config.clone())?.run(&mut ())
}

/// Writes the loss trace as `iter,t,loss` rows.
pub fn write_trace_csv<W: std::io::Write>(trace: &[TraceEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "t", "loss"]).map_err(std::io::Error::from)?;
    for e in trace {
        w.write_record([e.iter.to_string(), e.t.to_string(), e.loss.to_string()])
            .map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}
