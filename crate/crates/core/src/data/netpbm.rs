//! Binary Netpbm rasters: P6 for RGB images, P5 for masks.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit raster, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 (grey) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<u8>,
}

fn data_err(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {detail}", path.display()))
}

pub fn decode(reader: impl BufRead, path: &Path) -> Result<Raster> {
    let decoder = PnmDecoder::new(reader).map_err(|e| data_err(path, e))?;
    let subtype = decoder.subtype();
    let channels = match subtype {
        PnmSubtype::Graymap(SampleEncoding::Binary) => 1,
        PnmSubtype::Pixmap(SampleEncoding::Binary) => 3,
        other => {
            return Err(data_err(
                path,
                format!("unsupported netpbm subtype {other:?}"),
            ))
        }
    };
    let maxval = decoder.header().maximal_sample();
    if maxval != 255 {
        return Err(data_err(path, format!("maxval {maxval} (expected 255)")));
    }
    let (w, h) = decoder.dimensions();
    let mut data = vec![0u8; decoder.total_bytes() as usize];
    decoder
        .read_image(&mut data)
        .map_err(|e| data_err(path, e))?;
    Ok(Raster {
        width: w as usize,
        height: h as usize,
        channels,
        data,
    })
}

pub fn encode(raster: &Raster, writer: impl Write) -> Result<()> {
    let (subtype, color) = match raster.channels {
        1 => (
            PnmSubtype::Graymap(SampleEncoding::Binary),
            ExtendedColorType::L8,
        ),
        3 => (
            PnmSubtype::Pixmap(SampleEncoding::Binary),
            ExtendedColorType::Rgb8,
        ),
        c => return Err(Error::invalid("netpbm_write", format!("{c} channels"))),
    };
    if raster.data.len() != raster.width * raster.height * raster.channels {
        return Err(Error::invalid(
            "netpbm_write",
            "raster size does not match extents",
        ));
    }
    PnmEncoder::new(writer)
        .with_subtype(subtype)
        .encode(
            raster.data.as_slice(),
            raster.width as u32,
            raster.height as u32,
            color,
        )
        .map_err(|e| Error::Data(format!("netpbm encode: {e}")))
}

pub fn read(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode(BufReader::new(file), path)
}

pub fn write(path: &Path, raster: &Raster) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(raster, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// `(1, 3, h, w)` tensor with values `k / 255`.
pub fn image_tensor(r: &Raster) -> Result<Tensor> {
    if r.channels != 3 {
        return Err(Error::Data(format!(
            "expected an RGB image, got {} channels",
            r.channels
        )));
    }
    let (h, w) = (r.height, r.width);
    Ok(Tensor::from_fn([1, 3, h, w], |[_, c, i, j]| {
        r.data[(i * w + j) * 3 + c] as f64 / 255.0
    }))
}

/// `(1, 1, h, w)` mask, foreground where the grey value exceeds 127.
pub fn mask_tensor(r: &Raster) -> Result<Tensor> {
    if r.channels != 1 {
        return Err(Error::Data(format!(
            "expected a grey mask, got {} channels",
            r.channels
        )));
    }
    let data = r.data.iter().map(|&v| (v > 127) as u8 as f64).collect();
    Tensor::new([1, 1, r.height, r.width], data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Inverse of [`image_tensor`] for the first batch entry.
pub fn image_raster(t: &Tensor) -> Raster {
    let [_, c, h, w] = t.shape();
    assert_eq!(c, 3, "image tensor must have 3 channels");
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                data.push(quantize(t.at([0, ch, i, j])));
            }
        }
    }
    Raster {
        width: w,
        height: h,
        channels: 3,
        data,
    }
}

/// Mask tensor as 0/255 grey values.
pub fn mask_raster(t: &Tensor) -> Raster {
    let [_, _, h, w] = t.shape();
    let data = t.data()[..h * w]
        .iter()
        .map(|&v| if v > 0.5 { 255 } else { 0 })
        .collect();
    Raster {
        width: w,
        height: h,
        channels: 1,
        data,
    }
}
