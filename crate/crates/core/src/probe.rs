//! Timestep analyses: per-timestep loss curves and inversion sweeps over ranges.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backend::{DiffusionBackend, LatentImage};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::inversion::{invert, InversionConfig, InversionResult};
use crate::rng;
use crate::vocab::Lexicon;

pub const DEFAULT_CURVE_STRIDE: usize = 50;
pub const DEFAULT_CURVE_SAMPLES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub prompt: String,
    /// Sorted by `t`.
    pub points: Vec<CurvePoint>,
    pub noise_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeSweepEntry {
    pub t_low: usize,
    pub t_high: usize,
    pub result: InversionResult,
}

/// Every `stride`-th timestep up to and including T.
pub fn curve_grid(big_t: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let grid: Vec<usize> = (1..=big_t / stride).map(|k| k * stride).collect();
    if grid.is_empty() {
        vec![big_t]
    } else {
        grid
    }
}

/// Mean denoising loss of a prompt at each timestep of `timesteps`.
///
/// Noise for sample `k` at timestep `t` is seeded by `(seed, t, k)`, so a point
/// does not depend on which other timesteps were requested and curves for
/// different prompts see the same noise.
#[allow(clippy::too_many_arguments)]
pub fn loss_curve(
    backend: &dyn DiffusionBackend,
    encoder: &dyn TextEncoder,
    lexicon: &Lexicon,
    target: &LatentImage,
    prompt_ids: &[usize],
    timesteps: &[usize],
    noise_samples: usize,
    seed: u64,
) -> Result<LossCurve> {
    if timesteps.is_empty() {
        return Err(Error::Config("loss curve needs at least one timestep".into()));
    }
    if noise_samples == 0 {
        return Err(Error::Config("loss curve needs at least one noise sample".into()));
    }
    for &t in timesteps {
        if t == 0 {
            return Err(Error::Timestep { t, max: backend.timesteps() });
        }
        backend.schedule().check(t)?;
    }
    let rows = lexicon.embed(prompt_ids)?;
    let cond = encoder.encode(&rows.view())?;
    let shape = backend.latent_shape();
    let mut ts = timesteps.to_vec();
    ts.sort_unstable();
    let points = ts
        .into_iter()
        .map(|t| {
            let mut total = 0.0;
            for k in 0..noise_samples {
                let mut r = rng::rng_from(&[rng::stream::PROBE, seed, t as u64, k as u64]);
                let eps = rng::standard_normal(&mut r, shape);
                total += backend.ldm_loss(target, t, &eps, &cond.view())?;
            }
            Ok(CurvePoint {
                t,
                mean_loss: total / noise_samples as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossCurve {
        prompt: lexicon.detokenize(prompt_ids)?,
        points,
        noise_samples,
        seed,
    })
}

/// One inversion per range, each with `t_start = t_low` and `t_end = t_high`.
pub fn range_sweep(
    backend: &dyn DiffusionBackend,
    encoder: &dyn TextEncoder,
    lexicon: &Lexicon,
    target: &LatentImage,
    ranges: &[(usize, usize)],
    base: &InversionConfig,
) -> Result<Vec<RangeSweepEntry>> {
    ranges
        .iter()
        .map(|&(t_low, t_high)| {
            let config = InversionConfig {
                t_start: t_low,
                t_end: Some(t_high),
                ..base.clone()
            };
            let result = invert(backend, encoder, lexicon, target, &config)?;
            log::info!("range [{t_low}, {t_high}]: {} ({:.6})", result.prompt, result.final_loss_estimate);
            Ok(RangeSweepEntry { t_low, t_high, result })
        })
        .collect()
}

/// Parses `lo-hi` or `lo:hi`.
pub fn parse_range(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("malformed timestep range `{s}`, expected LOW-HIGH"));
    let (lo, hi) = s.split_once(['-', ':']).ok_or_else(bad)?;
    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

pub fn write_curve_csv<W: Write>(curve: &LossCurve, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "mean_loss"]).map_err(std::io::Error::from)?;
    for p in &curve.points {
        w.write_record([p.t.to_string(), p.mean_loss.to_string()])
            .map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(entries: &[RangeSweepEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t_low", "t_high", "final_loss_estimate", "prompt"])
        .map_err(std::io::Error::from)?;
    for e in entries {
        w.write_record([
            e.t_low.to_string(),
            e.t_high.to_string(),
            e.result.final_loss_estimate.to_string(),
            e.result.prompt.clone(),
        ])
        .map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Line chart of several curves as a standalone SVG document.
pub fn curves_svg(curves: &[LossCurve]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 48.0;
    const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let pts = curves.iter().flat_map(|c| c.points.iter());
    let (mut t0, mut t1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in pts {
        t0 = t0.min(p.t as f64);
        t1 = t1.max(p.t as f64);
        y0 = y0.min(p.mean_loss);
        y1 = y1.max(p.mean_loss);
    }
    if t0 > t1 {
        (t0, t1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let sx = |t: f64| PAD + (t - t0) / (t1 - t0).max(1e-12) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v - y0) / (y1 - y0).max(1e-12) * (H - 2.0 * PAD);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{b} H{r}" stroke="black" fill="none"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(
        svg,
        r#"<text x="{x}" y="{y}" font-size="12" text-anchor="middle">t ({t0} to {t1})</text>"#,
        x = W / 2.0,
        y = H - 12.0
    );
    for (i, c) in curves.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let line: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.t as f64), sy(p.mean_loss)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" stroke="{colour}" fill="none" stroke-width="1.5"/>"#,
            line.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" font-size="12" fill="{colour}">{}</text>"#,
            xml_escape(&c.prompt),
            x = PAD + 8.0,
            y = PAD + 14.0 * (i + 1) as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
