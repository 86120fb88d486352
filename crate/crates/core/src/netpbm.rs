//! Binary PPM (P6) images and PGM (P5) masks, 8-bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};

use crate::error::{Error, Result};
use crate::features::Image;
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn encode(path: &Path, buf: &[u8], w: usize, h: usize, sub: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let mut out = create(path)?;
    PnmEncoder::new(&mut out)
        .with_subtype(sub)
        .write_image(buf, w as u32, h as u32, color)
        .map_err(|e| Error::Image(e.to_string()))?;
    out.flush()?;
    Ok(())
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let t = img.tensor();
    let (c, h, w) = t.dims3()?;
    let n = h * w;
    let d = t.data();
    let mut buf = Vec::with_capacity(3 * n);
    for p in 0..n {
        for k in 0..3 {
            buf.push(quantize(d[(k % c) * n + p]));
        }
    }
    encode(path.as_ref(), &buf, w, h, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}

/// Writes an `H×W` map in `[0, 1]` as 8-bit grey; binary masks become 0/255.
pub fn write_pgm(path: impl AsRef<Path>, mask: &Tensor) -> Result<()> {
    let (h, w) = mask.dims2()?;
    let buf: Vec<u8> = mask.data().iter().map(|&v| quantize(v)).collect();
    encode(path.as_ref(), &buf, w, h, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    reader.with_guessed_format()?.decode().map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let rgb = decode(path.as_ref())?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let n = h * w;
    let mut data = vec![0.0f32; 3 * n];
    for (p, px) in rgb.pixels().enumerate() {
        for k in 0..3 {
            data[k * n + p] = px.0[k] as f32 / 255.0;
        }
    }
    Image::new(Tensor::new(vec![3, h, w], data)?)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let g = decode(path.as_ref())?.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Tensor::new(vec![h, w], g.as_raw().iter().map(|&v| v as f32 / 255.0).collect())
}
