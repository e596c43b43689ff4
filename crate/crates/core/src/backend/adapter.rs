//! Out-of-process backends.
//!
//! An adapter is an executable that speaks a framed request/response protocol
//! on stdin/stdout. Each message is one line of JSON followed by the binary
//! payload of every tensor it lists, in order. A payload is a little-endian
//! `u64` byte count followed by that many bytes of little-endian `f64` values
//! in row-major order.
//!
//! Requests carry `{"op": ..., "t": ..., "tensors": [{"name", "shape"}]}`:
//!
//! | op                  | request tensors                  | response tensors |
//! |---------------------|----------------------------------|------------------|
//! | `info`              | –                                | `alpha_bar` `[T]` |
//! | `encode_image`      | `image`                          | `latent`         |
//! | `decode_latent`     | `latent`                         | `image`          |
//! | `predict_noise`     | `x_t`, `cond`                    | `eps`            |
//! | `predict_noise_vjp` | `x_t`, `cond`, `upstream`        | `cond_grad`      |
//! | `shutdown`          | –                                | –                |
//!
//! Responses carry `{"ok": true, "tensors": [...]}` (plus `latent_shape` and
//! `pixel_shape` for `info`), or `{"ok": false, "error": "..."}` with no payload.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, ArrayD, ArrayView2, IxDyn};
use serde::{Deserialize, Serialize};

use super::{DiffusionBackend, LatentImage, NoiseSchedule, PixelImage};
use crate::error::{Error, Result};

const MAX_PAYLOAD: u64 = 1 << 34;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default)]
    pub tensors: Vec<TensorSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_shape: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_shape: Option<[usize; 3]>,
    #[serde(default)]
    pub tensors: Vec<TensorSpec>,
}

/// Writes a header line and the payloads of `tensors`.
pub fn write_frame<H: Serialize>(
    writer: &mut impl Write,
    header: &H,
    tensors: &[&ArrayD<f64>],
) -> Result<()> {
    serde_json::to_writer(&mut *writer, header)?;
    writer.write_all(b"\n")?;
    for t in tensors {
        writer.write_u64::<LittleEndian>((t.len() * 8) as u64)?;
        for &v in t.iter() {
            writer.write_f64::<LittleEndian>(v)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Reads a header line; `None` on a clean end of stream.
pub fn read_header<H: for<'de> Deserialize<'de>>(reader: &mut impl BufRead) -> Result<Option<H>> {
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    serde_json::from_str(line.trim_end())
        .map(Some)
        .map_err(|e| Error::Protocol(format!("bad header: {e}")))
}

pub fn read_payloads(reader: &mut impl Read, specs: &[TensorSpec]) -> Result<Vec<ArrayD<f64>>> {
    specs
        .iter()
        .map(|spec| {
            let bytes = reader.read_u64::<LittleEndian>()?;
            let want = spec.shape.iter().product::<usize>() as u64 * 8;
            if bytes != want || bytes > MAX_PAYLOAD {
                return Err(Error::Protocol(format!(
                    "tensor `{}` of shape {:?} announced {bytes} bytes",
                    spec.name, spec.shape
                )));
            }
            let mut data = vec![0f64; (bytes / 8) as usize];
            reader.read_f64_into::<LittleEndian>(&mut data)?;
            Ok(ArrayD::from_shape_vec(IxDyn(&spec.shape), data).expect("size checked"))
        })
        .collect()
}

fn spec(name: &str, t: &ArrayD<f64>) -> TensorSpec {
    TensorSpec {
        name: name.into(),
        shape: t.shape().to_vec(),
    }
}

fn find<'a>(specs: &[TensorSpec], data: &'a [ArrayD<f64>], name: &str) -> Result<&'a ArrayD<f64>> {
    specs
        .iter()
        .position(|s| s.name == name)
        .map(|i| &data[i])
        .ok_or_else(|| Error::Protocol(format!("missing tensor `{name}`")))
}

fn into3(a: ArrayD<f64>, name: &str) -> Result<Array3<f64>> {
    a.into_dimensionality()
        .map_err(|_| Error::Protocol(format!("tensor `{name}` must have rank 3")))
}

fn into2(a: ArrayD<f64>, name: &str) -> Result<Array2<f64>> {
    a.into_dimensionality()
        .map_err(|_| Error::Protocol(format!("tensor `{name}` must have rank 2")))
}

/// Serves `backend` over the adapter protocol until `shutdown` or end of input.
pub fn serve(backend: &dyn DiffusionBackend, reader: impl Read, writer: impl Write) -> Result<()> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    while let Some(req) = read_header::<Request>(&mut reader)? {
        let inputs = read_payloads(&mut reader, &req.tensors)?;
        if req.op == "shutdown" {
            write_frame(&mut writer, &Response { ok: true, ..Default::default() }, &[])?;
            return Ok(());
        }
        match handle(backend, &req, &inputs) {
            Ok((mut resp, outputs)) => {
                resp.ok = true;
                resp.tensors = outputs.iter().map(|(n, t)| spec(n, t)).collect();
                let refs: Vec<&ArrayD<f64>> = outputs.iter().map(|(_, t)| t).collect();
                write_frame(&mut writer, &resp, &refs)?;
            }
            Err(e) => {
                let resp = Response {
                    ok: false,
                    error: Some(e.to_string()),
                    ..Default::default()
                };
                write_frame(&mut writer, &resp, &[])?;
            }
        }
    }
    Ok(())
}

type Outputs = Vec<(&'static str, ArrayD<f64>)>;

fn handle(
    backend: &dyn DiffusionBackend,
    req: &Request,
    inputs: &[ArrayD<f64>],
) -> Result<(Response, Outputs)> {
    let specs = &req.tensors;
    let timestep = || req.t.ok_or_else(|| Error::Protocol(format!("`{}` needs `t`", req.op)));
    let latent = |name: &str| -> Result<LatentImage> {
        LatentImage::new(into3(find(specs, inputs, name)?.clone(), name)?)
    };
    let cond = || into2(find(specs, inputs, "cond")?.clone(), "cond");
    match req.op.as_str() {
        "info" => {
            let ab = ArrayD::from_shape_vec(
                IxDyn(&[backend.timesteps()]),
                backend.schedule().values().to_vec(),
            )
            .expect("1-d");
            let resp = Response {
                latent_shape: Some(backend.latent_shape()),
                pixel_shape: Some(backend.pixel_shape()),
                ..Default::default()
            };
            Ok((resp, vec![("alpha_bar", ab)]))
        }
        "encode_image" => {
            let img = PixelImage::new(into3(find(specs, inputs, "image")?.clone(), "image")?)?;
            let lat = backend.encode_image(&img)?;
            Ok((Response::default(), vec![("latent", lat.into_inner().into_dyn())]))
        }
        "decode_latent" => {
            let img = backend.decode_latent(&latent("latent")?)?;
            Ok((Response::default(), vec![("image", img.data().clone().into_dyn())]))
        }
        "predict_noise" => {
            let eps = backend.predict_noise(&latent("x_t")?, timestep()?, &cond()?.view())?;
            Ok((Response::default(), vec![("eps", eps.into_dyn())]))
        }
        "predict_noise_vjp" => {
            let up = into3(find(specs, inputs, "upstream")?.clone(), "upstream")?;
            let g = backend.predict_noise_vjp(&latent("x_t")?, timestep()?, &cond()?.view(), &up)?;
            Ok((Response::default(), vec![("cond_grad", g.into_dyn())]))
        }
        other => Err(Error::Protocol(format!("unknown op `{other}`"))),
    }
}

struct Channel {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: BufWriter<Box<dyn Write + Send>>,
}

impl Channel {
    fn call(&mut self, req: &Request, tensors: &[&ArrayD<f64>]) -> Result<(Response, Vec<ArrayD<f64>>)> {
        write_frame(&mut self.writer, req, tensors)?;
        let resp: Response = read_header(&mut self.reader)?
            .ok_or_else(|| Error::Protocol("adapter closed its output".into()))?;
        if !resp.ok {
            return Err(Error::Protocol(
                resp.error.unwrap_or_else(|| format!("`{}` failed", req.op)),
            ));
        }
        let data = read_payloads(&mut self.reader, &resp.tensors)?;
        Ok((resp, data))
    }
}

/// Client side of the adapter protocol.
pub struct AdapterBackend {
    channel: Mutex<Channel>,
    child: Option<Mutex<Child>>,
    schedule: NoiseSchedule,
    latent_shape: [usize; 3],
    pixel_shape: [usize; 3],
}

impl std::fmt::Debug for AdapterBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdapterBackend")
            .field("timesteps", &self.schedule.len())
            .field("latent_shape", &self.latent_shape)
            .field("pixel_shape", &self.pixel_shape)
            .finish_non_exhaustive()
    }
}

impl AdapterBackend {
    /// Connects over an existing stream pair and queries the model description.
    pub fn connect(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>) -> Result<Self> {
        let mut channel = Channel {
            reader: BufReader::new(reader),
            writer: BufWriter::new(writer),
        };
        let (resp, data) = channel.call(
            &Request {
                op: "info".into(),
                ..Default::default()
            },
            &[],
        )?;
        let ab = find(&resp.tensors, &data, "alpha_bar")?;
        let schedule = NoiseSchedule::from_alpha_bar(ab.iter().copied().collect())?;
        let latent_shape = resp
            .latent_shape
            .ok_or_else(|| Error::Protocol("info lacks latent_shape".into()))?;
        let pixel_shape = resp
            .pixel_shape
            .ok_or_else(|| Error::Protocol("info lacks pixel_shape".into()))?;
        Ok(AdapterBackend {
            channel: Mutex::new(channel),
            child: None,
            schedule,
            latent_shape,
            pixel_shape,
        })
    }

    /// Launches `command[0]` with the remaining arguments and connects to its stdio.
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("empty adapter command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Config(format!("cannot start adapter `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        let mut backend = AdapterBackend::connect(Box::new(stdout), Box::new(stdin))?;
        backend.child = Some(Mutex::new(child));
        Ok(backend)
    }

    fn call(&self, req: Request, tensors: &[&ArrayD<f64>]) -> Result<Vec<ArrayD<f64>>> {
        let mut ch = self.channel.lock().map_err(|_| Error::Protocol("adapter channel poisoned".into()))?;
        Ok(ch.call(&req, tensors)?.1)
    }

    fn single(&self, req: Request, tensors: &[&ArrayD<f64>]) -> Result<ArrayD<f64>> {
        let op = req.op.clone();
        self.call(req, tensors)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Protocol(format!("`{op}` returned no tensor")))
    }
}

impl Drop for AdapterBackend {
    fn drop(&mut self) {
        if let Ok(ch) = self.channel.get_mut() {
            let req = Request {
                op: "shutdown".into(),
                ..Default::default()
            };
            let _ = ch.call(&req, &[]);
        }
        if let Some(child) = self.child.take() {
            if let Ok(mut child) = child.into_inner() {
                let _ = child.wait();
            }
        }
    }
}

impl DiffusionBackend for AdapterBackend {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_shape(&self) -> [usize; 3] {
        self.latent_shape
    }

    fn pixel_shape(&self) -> [usize; 3] {
        self.pixel_shape
    }

    fn encode_image(&self, img: &PixelImage) -> Result<LatentImage> {
        let image = img.data().clone().into_dyn();
        let req = Request {
            op: "encode_image".into(),
            t: None,
            tensors: vec![spec("image", &image)],
        };
        LatentImage::new(into3(self.single(req, &[&image])?, "latent")?)
    }

    fn decode_latent(&self, x: &LatentImage) -> Result<PixelImage> {
        let latent = x.data().clone().into_dyn();
        let req = Request {
            op: "decode_latent".into(),
            t: None,
            tensors: vec![spec("latent", &latent)],
        };
        PixelImage::new(into3(self.single(req, &[&latent])?, "image")?)
    }

    fn predict_noise(
        &self,
        x_t: &LatentImage,
        t: usize,
        cond: &ArrayView2<'_, f64>,
    ) -> Result<Array3<f64>> {
        let x = x_t.data().clone().into_dyn();
        let c = cond.to_owned().into_dyn();
        let req = Request {
            op: "predict_noise".into(),
            t: Some(t),
            tensors: vec![spec("x_t", &x), spec("cond", &c)],
        };
        into3(self.single(req, &[&x, &c])?, "eps")
    }

    fn predict_noise_vjp(
        &self,
        x_t: &LatentImage,
        t: usize,
        cond: &ArrayView2<'_, f64>,
        upstream: &Array3<f64>,
    ) -> Result<Array2<f64>> {
        let x = x_t.data().clone().into_dyn();
        let c = cond.to_owned().into_dyn();
        let u = upstream.clone().into_dyn();
        let req = Request {
            op: "predict_noise_vjp".into(),
            t: Some(t),
            tensors: vec![spec("x_t", &x), spec("cond", &c), spec("upstream", &u)],
        };
        into2(self.single(req, &[&x, &c, &u])?, "cond_grad")
    }
}
