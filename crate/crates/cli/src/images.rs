//! Image and tensor files.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::{Array3, IxDyn};

use promptinv::io::{read_tensor, write_tensor};
use promptinv::{DiffusionBackend, LatentImage, PixelImage};

/// Loads a PNG, or a raw tensor shaped like either a latent or a pixel image.
pub fn load_latent(path: &Path, backend: &dyn DiffusionBackend) -> Result<LatentImage> {
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let img = read_png(path)?;
        return Ok(backend.encode_image(&img)?);
    }
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let t = read_tensor(&mut r).with_context(|| format!("reading tensor {}", path.display()))?;
    let shape = t.shape().to_vec();
    let as3 = |t: ndarray::ArrayD<f64>| -> Result<Array3<f64>> { Ok(t.into_dimensionality()?) };
    if shape == backend.latent_shape() {
        Ok(LatentImage::new(as3(t)?)?)
    } else if shape == backend.pixel_shape() {
        Ok(backend.encode_image(&PixelImage::new(as3(t)?)?)?)
    } else {
        bail!(
            "{}: tensor shape {:?} matches neither the latent shape {:?} nor the pixel shape {:?}",
            path.display(),
            shape,
            backend.latent_shape(),
            backend.pixel_shape()
        )
    }
}

pub fn read_png(path: &Path) -> Result<PixelImage> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().with_context(|| format!("decoding {}", path.display()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .with_context(|| format!("decoding {}", path.display()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => bail!("{}: indexed PNG was not expanded", path.display()),
    };
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let px = &buf[(y * w + x) * channels..];
        let v = if channels < 3 { px[0] } else { px[c] };
        v as f64 / 255.0
    });
    Ok(PixelImage::new(data)?)
}

pub fn write_png(path: &Path, img: &PixelImage) -> Result<()> {
    let [h, w, _] = img.shape();
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let mut writer = enc.write_header()?;
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

pub fn write_latent(path: &Path, x: &LatentImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    let dynamic = x.data().clone().into_shape_with_order(IxDyn(&x.shape()))?;
    write_tensor(&mut w, &dynamic)?;
    Ok(())
}
