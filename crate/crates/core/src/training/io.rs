//! Raster files (PGM/PPM) and the raw tensor container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder};

use crate::error::{Error, Result};
use crate::tensor::{numel, DType, Scalar, Tensor};

/// Planar image with samples scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[channels, height, width]`.
    pub data: Vec<f32>,
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

struct Decoded {
    channels: usize,
    height: usize,
    width: usize,
    maxval: u32,
    /// Samples as stored, widened to u16.
    samples: Vec<u16>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let dec = PnmDecoder::new(open(path)?).map_err(|e| format_err(path, e))?;
    let maxval = dec.header().maximal_sample();
    let (width, height) = dec.dimensions();
    let color = dec.color_type();
    let channels = color.channel_count() as usize;
    let mut buf = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut buf).map_err(|e| format_err(path, e))?;
    let wide = color.bytes_per_pixel() as usize / channels == 2;
    // the decoder stretches samples to the full 8/16-bit range; undo that
    let full = if wide { 65535.0 } else { 255.0 };
    let unscale = |v: u16| -> u16 {
        if maxval as f64 == full {
            v
        } else {
            (v as f64 * maxval as f64 / full).round() as u16
        }
    };
    let samples = if wide {
        buf.chunks_exact(2)
            .map(|c| unscale(u16::from_ne_bytes([c[0], c[1]])))
            .collect()
    } else {
        buf.iter().map(|&v| unscale(v as u16)).collect()
    };
    Ok(Decoded {
        channels,
        height: height as usize,
        width: width as usize,
        maxval,
        samples,
    })
}

/// Reads a P2/P5 graymap (8 or 16 bit) or P3/P6 pixmap.
pub fn read_image(path: &Path) -> Result<Raster> {
    let d = decode(path)?;
    let (c, plane) = (d.channels, d.height * d.width);
    let mut data = vec![0f32; c * plane];
    for (i, px) in d.samples.chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * plane + i] = v as f32 / d.maxval as f32;
        }
    }
    Ok(Raster {
        channels: c,
        height: d.height,
        width: d.width,
        data,
    })
}

/// Reads an integer label mask from a single-channel P2/P5 file.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let d = decode(path)?;
    if d.channels != 1 {
        return Err(format_err(path, "label masks must be single-channel graymaps"));
    }
    let labels = d
        .samples
        .iter()
        .map(|&v| u8::try_from(v).map_err(|_| format_err(path, format!("label {v} exceeds 255"))))
        .collect::<Result<_>>()?;
    Ok((d.height, d.width, labels))
}

/// Writes labels as an 8-bit graymap, binary (P5) or ASCII (P2).
pub fn write_mask(path: &Path, height: usize, width: usize, labels: &[u8], ascii: bool) -> Result<()> {
    assert_eq!(labels.len(), height * width);
    let encoding = if ascii { SampleEncoding::Ascii } else { SampleEncoding::Binary };
    let mut out = create(path)?;
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(encoding))
        .encode(labels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| format_err(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes a 1-channel raster as P5 (8 or 16 bit) or a 3-channel one as P6.
pub fn write_image(path: &Path, raster: &Raster, sixteen_bit: bool) -> Result<()> {
    let plane = raster.height * raster.width;
    let c = raster.channels;
    let interleaved = (0..plane)
        .flat_map(|i| (0..c).map(move |ch| ch * plane + i))
        .map(|j| raster.data[j].clamp(0.0, 1.0));
    let (w, h) = (raster.width as u32, raster.height as u32);
    let subtype = match c {
        1 => PnmSubtype::Graymap(SampleEncoding::Binary),
        3 => PnmSubtype::Pixmap(SampleEncoding::Binary),
        _ => return Err(format_err(path, format!("cannot store {c} channels"))),
    };
    let mut out = create(path)?;
    if sixteen_bit {
        // the pnm encoder only writes 8-bit pixmaps, so emit P5/P6 by hand
        let magic = if c == 1 { "P5" } else { "P6" };
        let mut bytes = format!("{magic}\n{w} {h}\n65535\n").into_bytes();
        for v in interleaved {
            bytes.extend_from_slice(&((v * 65535.0).round() as u16).to_be_bytes());
        }
        out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        return out.flush().map_err(|e| Error::io(path, e));
    }
    let s: Vec<u8> = interleaved.map(|v| (v * 255.0).round() as u8).collect();
    let color = if c == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
    let result = PnmEncoder::new(&mut out).with_subtype(subtype).encode(&s[..], w, h, color);
    result.map_err(|e| format_err(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

const TENSOR_MAGIC: &[u8; 4] = b"CSTN";
pub const TENSOR_VERSION: u32 = 1;

/// Serialises a tensor: magic, version (u32), dtype code (u8), rank (u32),
/// extents (u64 each), then the little-endian payload.
pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 8 * t.ndim() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(T::DTYPE as u8);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format("truncated tensor data".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(bytes: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, 8)?.try_into().expect("8 bytes")))
}

/// Inverse of [`encode_tensor`]; the stored dtype must match `T`.
pub fn decode_tensor<T: Scalar>(mut bytes: &[u8]) -> Result<Tensor<T>> {
    let b = &mut bytes;
    if take(b, 4)? != TENSOR_MAGIC {
        return Err(Error::Format("not a tensor container".into()));
    }
    let version = read_u32(b)?;
    if version != TENSOR_VERSION {
        return Err(Error::Version { found: version, expected: TENSOR_VERSION });
    }
    let code = take(b, 1)?[0];
    let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!("stored {dtype:?}, requested {:?}", T::DTYPE)));
    }
    let ndim = read_u32(b)? as usize;
    let shape = (0..ndim).map(|_| read_u64(b).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let size = dtype.size();
    let payload = take(b, numel(&shape) * size)?;
    if !b.is_empty() {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }
    Tensor::new(shape, payload.chunks_exact(size).map(T::read_le).collect())
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format(m) => format_err(path, m),
        other => other,
    })
}
