//! Frozen text encoder mapping prompt embeddings to the conditioning tensor.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{io, rng};

/// Differentiable map from `L × d` prompt rows to an `L × context_dim` conditioning tensor.
///
/// Real text encoders plug into the inversion engine through this trait.
pub trait TextEncoder: Send + Sync {
    fn max_len(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn context_dim(&self) -> usize;

    fn encode(&self, prompt: &ArrayView2<'_, f64>) -> Result<Array2<f64>>;

    /// Pulls a cotangent on the conditioning back onto the prompt rows.
    fn encode_vjp(
        &self,
        prompt: &ArrayView2<'_, f64>,
        upstream: &ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>>;
}

/// Parameters of [`ToyEncoder`]. Values are kept `f32`-representable so a saved
/// copy reloads bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `max_len × d`
    pub positional: Array2<f64>,
    /// `context_dim × d`
    pub weight: Array2<f64>,
    /// `1 × context_dim`
    pub bias: Array2<f64>,
    /// `max_len × max_len` cross-position mixing.
    pub mixing: Array2<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    seed: Option<u64>,
    dim: usize,
    context_dim: usize,
    max_len: usize,
    blocks: Vec<BlockShape>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockShape {
    name: String,
    rows: usize,
    cols: usize,
}

const BLOCK_NAMES: [&str; 4] = ["positional", "weight", "bias", "mixing"];

impl EncoderParams {
    /// Seeded parameters: small positional offsets, a scaled Gaussian weight and
    /// a mixing matrix close to the identity.
    pub fn seeded(seed: u64, dim: usize, context_dim: usize, max_len: usize) -> Result<Self> {
        if dim == 0 || context_dim == 0 || max_len == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let mut r = rng::rng_from(&[rng::stream::PARAMS, 0x0045_4e43, seed]);
        let mut positional: Array2<f64> = rng::standard_normal(&mut r, (max_len, dim));
        positional *= 0.1;
        let mut weight: Array2<f64> = rng::standard_normal(&mut r, (context_dim, dim));
        weight *= 1.0 / (dim as f64).sqrt();
        let mut bias: Array2<f64> = rng::standard_normal(&mut r, (1, context_dim));
        bias *= 0.05;
        let mut mixing: Array2<f64> = rng::standard_normal(&mut r, (max_len, max_len));
        mixing *= 0.1;
        mixing += &Array2::eye(max_len);
        let mut params = EncoderParams {
            positional,
            weight,
            bias,
            mixing,
            seed: Some(seed),
        };
        params.round();
        params.validate()?;
        Ok(params)
    }

    fn round(&mut self) {
        io::round_to_f32(&mut self.positional);
        io::round_to_f32(&mut self.weight);
        io::round_to_f32(&mut self.bias);
        io::round_to_f32(&mut self.mixing);
    }

    pub fn dim(&self) -> usize {
        self.positional.ncols()
    }

    pub fn context_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn max_len(&self) -> usize {
        self.positional.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (l, d, c) = (self.max_len(), self.dim(), self.context_dim());
        let shapes = [
            (self.positional.dim(), (l, d)),
            (self.weight.dim(), (c, d)),
            (self.bias.dim(), (1, c)),
            (self.mixing.dim(), (l, l)),
        ];
        for ((got, want), name) in shapes.into_iter().zip(BLOCK_NAMES) {
            if got != want {
                return Err(Error::Format {
                    what: "encoder parameters",
                    msg: format!("block `{name}` has shape {got:?}, expected {want:?}"),
                });
            }
        }
        if l == 0 || d == 0 || c == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let blocks = [&self.positional, &self.weight, &self.bias, &self.mixing];
        if blocks.iter().any(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("encoder parameters"));
        }
        Ok(())
    }

    fn sidecar(&self) -> Sidecar {
        let blocks = [&self.positional, &self.weight, &self.bias, &self.mixing]
            .iter()
            .zip(BLOCK_NAMES)
            .map(|(b, name)| BlockShape {
                name: name.into(),
                rows: b.nrows(),
                cols: b.ncols(),
            })
            .collect();
        Sidecar {
            seed: self.seed,
            dim: self.dim(),
            context_dim: self.context_dim(),
            max_len: self.max_len(),
            blocks,
        }
    }

    pub fn write(&self, binary: &mut impl Write, sidecar: &mut impl Write) -> Result<()> {
        for block in [&self.positional, &self.weight, &self.bias, &self.mixing] {
            io::write_matrix(binary, block)?;
        }
        serde_json::to_writer_pretty(&mut *sidecar, &self.sidecar())?;
        sidecar.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(binary: &mut impl Read, sidecar: &mut impl Read) -> Result<Self> {
        let meta: Sidecar = serde_json::from_reader(sidecar)?;
        let names: Vec<&str> = meta.blocks.iter().map(|b| b.name.as_str()).collect();
        if names != BLOCK_NAMES {
            return Err(Error::Format {
                what: "encoder sidecar",
                msg: format!("expected blocks {BLOCK_NAMES:?}, found {names:?}"),
            });
        }
        let mut blocks = Vec::with_capacity(4);
        for shape in &meta.blocks {
            let m = io::read_matrix(binary)?;
            if m.dim() != (shape.rows, shape.cols) {
                return Err(Error::Format {
                    what: "encoder parameters",
                    msg: format!(
                        "block `{}` is {:?} but the sidecar says {:?}",
                        shape.name,
                        m.dim(),
                        (shape.rows, shape.cols)
                    ),
                });
            }
            blocks.push(m);
        }
        let mixing = blocks.pop().unwrap();
        let bias = blocks.pop().unwrap();
        let weight = blocks.pop().unwrap();
        let positional = blocks.pop().unwrap();
        let params = EncoderParams {
            positional,
            weight,
            bias,
            mixing,
            seed: meta.seed,
        };
        params.validate()?;
        if (params.dim(), params.context_dim(), params.max_len())
            != (meta.dim, meta.context_dim, meta.max_len)
        {
            return Err(Error::Format {
                what: "encoder sidecar",
                msg: "declared dimensions disagree with the blocks".into(),
            });
        }
        Ok(params)
    }

    /// Writes `path` and its `path.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bin = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut side = std::fs::File::create(sidecar_path(path))?;
        self.write(&mut bin, &mut side)?;
        bin.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bin = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut side = std::fs::File::open(sidecar_path(path))?;
        EncoderParams::read(&mut bin, &mut side)
    }
}

/// `params.bin` → `params.bin.json`
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

/// Positional offset, one affine map with `tanh` per position, then a fixed
/// mixing across positions.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    params: EncoderParams,
}

impl ToyEncoder {
    pub fn new(params: EncoderParams) -> Result<Self> {
        params.validate()?;
        Ok(ToyEncoder { params })
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    fn check(&self, prompt: &ArrayView2<'_, f64>) -> Result<usize> {
        let len = prompt.nrows();
        if len > self.params.max_len() {
            return Err(Error::Capacity {
                len,
                max: self.params.max_len(),
            });
        }
        if prompt.ncols() != self.params.dim() {
            return Err(Error::shape("prompt embedding columns", self.params.dim(), prompt.ncols()));
        }
        Ok(len)
    }

    fn hidden(&self, prompt: &ArrayView2<'_, f64>, len: usize) -> Array2<f64> {
        let p = &self.params;
        let z = prompt + &p.positional.slice(s![..len, ..]);
        let bias: Array1<f64> = p.bias.row(0).to_owned();
        let mut h = z.dot(&p.weight.t()) + &bias;
        h.mapv_inplace(f64::tanh);
        h
    }
}

impl TextEncoder for ToyEncoder {
    fn max_len(&self) -> usize {
        self.params.max_len()
    }

    fn input_dim(&self) -> usize {
        self.params.dim()
    }

    fn context_dim(&self) -> usize {
        self.params.context_dim()
    }

    fn encode(&self, prompt: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let len = self.check(prompt)?;
        let h = self.hidden(prompt, len);
        Ok(self.params.mixing.slice(s![..len, ..len]).dot(&h))
    }

    fn encode_vjp(
        &self,
        prompt: &ArrayView2<'_, f64>,
        upstream: &ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let len = self.check(prompt)?;
        if upstream.dim() != (len, self.context_dim()) {
            return Err(Error::shape(
                "conditioning cotangent",
                format!("{:?}", (len, self.context_dim())),
                format!("{:?}", upstream.dim()),
            ));
        }
        let h = self.hidden(prompt, len);
        let mut dh = self.params.mixing.slice(s![..len, ..len]).t().dot(upstream);
        dh.zip_mut_with(&h, |g, &hv| *g *= 1.0 - hv * hv);
        Ok(dh.dot(&self.params.weight))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn identity_params(dim: usize, max_len: usize) -> EncoderParams {
        EncoderParams {
            positional: Array2::zeros((max_len, dim)),
            weight: Array2::eye(dim),
            bias: Array2::zeros((1, dim)),
            mixing: Array2::eye(max_len),
            seed: None,
        }
    }

    #[test]
    fn zeros_propagate() {
        let enc = ToyEncoder::new(identity_params(3, 4)).unwrap();
        let out = enc.encode(&Array2::zeros((2, 3)).view()).unwrap();
        assert_eq!(out, Array2::<f64>::zeros((2, 3)));
    }

    #[test]
    fn identity_encoder_is_tanh() {
        let enc = ToyEncoder::new(identity_params(2, 2)).unwrap();
        let x = ndarray::array![[0.5, -1.0], [2.0, 0.0]];
        assert_eq!(enc.encode(&x.view()).unwrap(), x.mapv(f64::tanh));
    }

    #[test]
    fn encoding_is_deterministic() {
        let enc = ToyEncoder::new(EncoderParams::seeded(11, 4, 4, 8).unwrap()).unwrap();
        let x = rng::standard_normal(&mut rng::rng_from(&[5]), (3, 4));
        let a = enc.encode(&x.view()).unwrap();
        let b = enc.encode(&x.view()).unwrap();
        assert_eq!(a, b);
        let again = ToyEncoder::new(EncoderParams::seeded(11, 4, 4, 8).unwrap()).unwrap();
        assert_eq!(again.encode(&x.view()).unwrap(), a);
    }

    #[test]
    fn capacity_is_enforced() {
        let enc = ToyEncoder::new(EncoderParams::seeded(1, 2, 2, 3).unwrap()).unwrap();
        assert!(matches!(
            enc.encode(&Array2::zeros((4, 2)).view()),
            Err(Error::Capacity { len: 4, max: 3 })
        ));
    }

    #[test]
    fn params_round_trip_through_files() {
        let params = EncoderParams::seeded(3, 4, 5, 6).unwrap();
        let mut bin = Vec::new();
        let mut side = Vec::new();
        params.write(&mut bin, &mut side).unwrap();
        let back = EncoderParams::read(&mut bin.as_slice(), &mut side.as_slice()).unwrap();
        assert_eq!(back, params);
        let meta: serde_json::Value = serde_json::from_slice(&side).unwrap();
        assert_eq!(meta["seed"], 3);
        assert_eq!(meta["blocks"][1]["rows"], 5);
    }

    #[test]
    fn sidecar_mismatch_is_rejected() {
        let params = EncoderParams::seeded(3, 4, 4, 6).unwrap();
        let mut bin = Vec::new();
        let mut side = Vec::new();
        params.write(&mut bin, &mut side).unwrap();
        let text = String::from_utf8(side).unwrap().replace("\"max_len\": 6", "\"max_len\": 7");
        assert!(EncoderParams::read(&mut bin.as_slice(), &mut text.as_bytes()).is_err());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let enc = ToyEncoder::new(EncoderParams::seeded(2, 4, 3, 6).unwrap()).unwrap();
        let mut r = rng::rng_from(&[17]);
        for _ in 0..20 {
            let x: Array2<f64> = rng::standard_normal(&mut r, (5, 4));
            let v: Array2<f64> = rng::standard_normal(&mut r, (5, 4));
            let u: Array2<f64> = rng::standard_normal(&mut r, (5, 3));
            let grad = enc.encode_vjp(&x.view(), &u.view()).unwrap();
            let analytic = (&grad * &v).sum();
            let h = 1e-4;
            let f = |y: Array2<f64>| (enc.encode(&y.view()).unwrap() * &u).sum();
            let numeric = (f(&x + &(&v * h)) - f(&x - &(&v * h))) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
            assert!(rel < 1e-4, "analytic {analytic} numeric {numeric}");
        }
    }
}
