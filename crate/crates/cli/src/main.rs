//! `promptinv`: invert images into hard prompts and run the timestep analyses.

mod images;
mod manifest;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use promptinv::inversion::{write_trace_csv, GridSpec};
use promptinv::probe::{curve_grid, curves_svg, parse_range, write_curve_csv, write_sweep_csv};
use promptinv::testbed::{ToyModel, ToySpec};
use promptinv::{
    evaluate_prompt, invert, invert_negative, loss_curve, range_sweep, BackendManifest, DiffusionBackend, EvalGrid,
    InversionConfig, Metric, Optimizer, TextEncoder,
};

use crate::manifest::{Model, RunManifest};
use crate::output::{write_json, ResultFile};

#[derive(Parser)]
#[command(name = "promptinv", version, about = "Hard prompt inversion for latent diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find a prompt for a target image.
    Invert {
        #[command(flatten)]
        run: RunArgs,
        target: PathBuf,
    },
    /// Find a prompt close to a target image and away from a negative image.
    InvertNeg {
        #[command(flatten)]
        run: RunArgs,
        target: PathBuf,
        negative: PathBuf,
    },
    /// Per-timestep loss curves of prompts on a target.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        target: PathBuf,
        /// Prompt to evaluate; repeat for several curves.
        #[arg(long = "prompt", required = true)]
        prompts: Vec<String>,
        #[arg(long, default_value_t = promptinv::probe::DEFAULT_CURVE_STRIDE)]
        stride: usize,
        #[arg(long, default_value_t = promptinv::probe::DEFAULT_CURVE_SAMPLES)]
        samples: usize,
        /// Also write curves.svg.
        #[arg(long)]
        plot: bool,
    },
    /// One inversion per timestep range.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        target: PathBuf,
        /// Range as LOW-HIGH; repeat for several.
        #[arg(long = "range", required = true)]
        ranges: Vec<String>,
    },
    /// Concatenate the prompts of several result files.
    Compose {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Sample an image from a prompt.
    Generate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampler steps.
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
    /// Write a seeded toy model, run manifest and planted target.
    InitToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        vocab_size: usize,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 16)]
        context_dim: usize,
        /// Length of the planted prompt and of the configured inversion.
        #[arg(long, default_value_t = 2)]
        length: usize,
        /// Serve the toy backend through the adapter protocol instead of in-process.
        #[arg(long)]
        adapter: bool,
    },
    /// Serve a toy backend over stdin/stdout.
    #[command(hide = true)]
    ToyAdapter {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        context_dim: usize,
    },
}

/// Manifest location and flag overrides; flags win over the manifest.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    t_start: Option<usize>,
    #[arg(long)]
    t_end: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    optimizer: Option<Optimizer>,
    /// Draws averaged per step.
    #[arg(long)]
    noise_samples: Option<usize>,
}

impl RunArgs {
    fn open(&self) -> Result<(Model, PathBuf)> {
        let mut model = RunManifest::open(&self.manifest)?;
        let c = &mut model.config;
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.t_start {
            c.t_start = v;
        }
        if let Some(v) = self.t_end {
            c.t_end = Some(v);
        }
        if let Some(v) = self.length {
            c.prompt_length = v;
            c.init_token_ids = None;
        }
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = self.metric {
            c.metric = v;
        }
        if let Some(v) = self.optimizer {
            c.optimizer = v;
        }
        if let Some(v) = self.noise_samples {
            c.noise_samples_per_step = v;
        }
        c.validate(model.backend.timesteps())?;
        let out = self.out.clone().unwrap_or_else(|| model.out.clone());
        std::fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
        Ok((model, out))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PROMPTINV_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for numeric failures, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let numeric = e
        .chain()
        .filter_map(|c| c.downcast_ref::<promptinv::Error>())
        .any(promptinv::Error::is_numeric);
    if numeric {
        3
    } else {
        2
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Invert { run, target } => cmd_invert(&run, &target, None),
        Command::InvertNeg { run, target, negative } => cmd_invert(&run, &target, Some(&negative)),
        Command::Probe {
            run,
            target,
            prompts,
            stride,
            samples,
            plot,
        } => cmd_probe(&run, &target, &prompts, stride, samples, plot),
        Command::Sweep { run, target, ranges } => cmd_sweep(&run, &target, &ranges),
        Command::Compose { results, output } => cmd_compose(&results, &output),
        Command::Generate {
            manifest,
            out,
            prompt,
            seed,
            steps,
        } => cmd_generate(&manifest, out, &prompt, seed, steps),
        Command::InitToy {
            out,
            seed,
            vocab_size,
            dim,
            context_dim,
            length,
            adapter,
        } => cmd_init_toy(&out, seed, vocab_size, dim, context_dim, length, adapter),
        Command::ToyAdapter { seed, context_dim } => {
            let backend = BackendManifest::toy(seed).build(context_dim)?;
            promptinv::backend::adapter::serve(backend.as_ref(), std::io::stdin().lock(), std::io::stdout().lock())?;
            Ok(())
        }
    }
}

fn cmd_invert(run: &RunArgs, target: &Path, negative: Option<&Path>) -> Result<()> {
    let (m, out) = run.open()?;
    let backend = m.backend.as_ref();
    let x = images::load_latent(target, backend)?;
    let cfg = &m.config;
    let mut file = match negative {
        None => {
            let r = invert(backend, &m.encoder, &m.lexicon, &x, cfg)?;
            ResultFile::new(r, cfg)
        }
        Some(neg_path) => {
            let neg = images::load_latent(neg_path, backend)?;
            let r = invert_negative(backend, &m.encoder, &m.lexicon, &x, &neg, cfg)?;
            let grid = EvalGrid::from_spec(&cfg.eval_grid, backend.timesteps())?;
            let on_target = evaluate_prompt(backend, &m.encoder, &m.lexicon, &r.token_ids, &x, &grid)?;
            let on_negative = evaluate_prompt(backend, &m.encoder, &m.lexicon, &r.token_ids, &neg, &grid)?;
            let mut f = ResultFile::new(r, cfg);
            f.target_loss = Some(on_target);
            f.negative_loss = Some(on_negative);
            f
        }
    };
    write_trace_csv(&std::mem::take(&mut file.trace), create(&out.join("trace.csv"))?)?;
    write_json(&out.join("result.json"), &file)?;
    println!("{}", file.prompt);
    Ok(())
}

fn cmd_probe(run: &RunArgs, target: &Path, prompts: &[String], stride: usize, samples: usize, plot: bool) -> Result<()> {
    let (m, out) = run.open()?;
    let backend = m.backend.as_ref();
    let x = images::load_latent(target, backend)?;
    let grid = curve_grid(backend.timesteps(), stride);
    let mut curves = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let ids = m.lexicon.tokenize(prompt)?;
        let curve = loss_curve(backend, &m.encoder, &m.lexicon, &x, &ids, &grid, samples, m.config.seed)?;
        let path = out.join(format!("curve_{i}.csv"));
        write_curve_csv(&curve, create(&path)?)?;
        println!("{}\t{}", path.display(), curve.prompt);
        curves.push(curve);
    }
    if plot {
        let path = out.join("curves.svg");
        std::fs::write(&path, curves_svg(&curves)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_sweep(run: &RunArgs, target: &Path, ranges: &[String]) -> Result<()> {
    let ranges = ranges.iter().map(|r| parse_range(r)).collect::<promptinv::Result<Vec<_>>>()?;
    let (m, out) = run.open()?;
    let backend = m.backend.as_ref();
    let x = images::load_latent(target, backend)?;
    let entries = range_sweep(backend, &m.encoder, &m.lexicon, &x, &ranges, &m.config)?;
    for e in &entries {
        let cfg = InversionConfig {
            t_start: e.t_low,
            t_end: Some(e.t_high),
            ..m.config.clone()
        };
        let mut file = ResultFile::new(e.result.clone(), &cfg);
        file.trace.clear();
        write_json(&out.join(format!("range_{}_{}.json", e.t_low, e.t_high)), &file)?;
    }
    write_sweep_csv(&entries, create(&out.join("sweep.csv"))?)?;
    for e in &entries {
        println!("{}-{}\t{}", e.t_low, e.t_high, e.result.prompt);
    }
    Ok(())
}

fn cmd_compose(results: &[PathBuf], output: &Path) -> Result<()> {
    let mut parts = Vec::new();
    for path in results {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading result {}", path.display()))?;
        let file: ResultFile =
            serde_json::from_str(&text).with_context(|| format!("parsing result {}", path.display()))?;
        parts.push(file.prompt);
    }
    let composed = parts.join(" ");
    std::fs::write(output, format!("{composed}\n")).with_context(|| format!("writing {}", output.display()))?;
    println!("{composed}");
    Ok(())
}

fn cmd_generate(manifest: &Path, out: Option<PathBuf>, prompt: &str, seed: u64, steps: usize) -> Result<()> {
    let m = RunManifest::open(manifest)?;
    let out = out.unwrap_or(m.out.clone());
    let ids = m.lexicon.tokenize(prompt)?;
    if ids.is_empty() {
        bail!("prompt is empty");
    }
    std::fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
    let cond = m.encoder.encode(&m.lexicon.embed(&ids)?.view())?;
    let latent = m.backend.sample(&cond.view(), steps, seed)?;
    let img = m.backend.decode_latent(&latent)?;
    images::write_png(&out.join("generated.png"), &img)?;
    images::write_latent(&out.join("generated.tensor"), &latent)?;
    println!("{}", out.join("generated.tensor").display());
    Ok(())
}

fn cmd_init_toy(
    out: &Path,
    seed: u64,
    vocab_size: usize,
    dim: usize,
    context_dim: usize,
    length: usize,
    adapter: bool,
) -> Result<()> {
    if vocab_size == 0 || length == 0 {
        bail!("vocabulary size and prompt length must be positive");
    }
    let spec = ToySpec {
        vocab_size,
        dim,
        context_dim,
        ..ToySpec::with_seed(seed)
    };
    let model = ToyModel::new(&spec)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("vocab.txt"), model.lexicon.vocab().to_text())?;
    model.lexicon.table().save(&out.join("embeddings.bin"))?;
    model.encoder.params().save(&out.join("encoder.bin"))?;

    let mut backend = spec.backend.clone();
    if adapter {
        let exe = std::env::current_exe()?.to_string_lossy().into_owned();
        backend.kind = promptinv::backend::BackendKind::Adapter;
        backend.command = Some(vec![
            exe,
            "toy-adapter".into(),
            "--seed".into(),
            seed.to_string(),
            "--context-dim".into(),
            context_dim.to_string(),
        ]);
    }
    write_json(&out.join("backend.json"), &backend)?;

    let t_low = GridSpec::default().t_low.unwrap_or(spec.backend.timesteps / 2);
    let (ids, target) = model.planted_instance(length, t_low, seed)?;
    images::write_latent(&out.join("target.tensor"), &target)?;
    images::write_png(&out.join("target.png"), &model.backend.decode_latent(&target)?)?;

    let manifest = RunManifest {
        backend: "backend.json".into(),
        vocab: "vocab.txt".into(),
        embeddings: "embeddings.bin".into(),
        encoder: "encoder.bin".into(),
        config: InversionConfig {
            prompt_length: length,
            seed,
            noise_samples_per_step: 16,
            ..InversionConfig::default()
        },
        out: "out".into(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("{}", model.lexicon.detokenize(&ids)?);
    Ok(())
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(std::io::BufWriter::new(f))
}
