//! Binary containers.
//!
//! Every container is an 8-byte magic, a little-endian `u64` byte length,
//! a UTF-8 JSON header of that length, and a little-endian payload.
//!
//! * `.gmr` kernel files (`GMRCONV1`): header `{dims, k, n, c_in, c_out,
//!   clip}`, then ring weights `(C_out, C_in, n)` row-major as `f64`, then
//!   the `n` log-sigmas as `f64`.
//! * dense blocks (`GMRDENS1`): header `{shape}`, then `f64` values.
//! * datasets (`GMRDATA1`): header with extents, then `f64` images and
//!   `u32` labels.
//!
//! Readers reject unknown magic, inconsistent extents, truncation and
//! trailing bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{GmrError, Result};
use crate::gmr_kernel::{ring_geometry, GmrLayerParams, RingWeights, SigmaParams, SIGMA_MIN};
use crate::tensor::Tensor;

pub const GMR_MAGIC: &[u8; 8] = b"GMRCONV1";
pub const DENSE_MAGIC: &[u8; 8] = b"GMRDENS1";
pub const DATASET_MAGIC: &[u8; 8] = b"GMRDATA1";

/// Upper bound on a JSON header, to fail fast on garbage lengths.
const MAX_HEADER: u64 = 1 << 24;

pub(crate) fn write_header<W: Write, H: Serialize>(w: &mut W, magic: &[u8; 8], header: &H) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(magic)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

pub(crate) fn read_header<R: Read, H: DeserializeOwned>(r: &mut R, magic: &[u8; 8]) -> Result<H> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(truncated)?;
    if &m != magic {
        return Err(GmrError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let len = read_u64(r)?;
    if len > MAX_HEADER {
        return Err(GmrError::Format(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(truncated)?;
    let text = std::str::from_utf8(&json).map_err(|e| GmrError::Format(format!("header is not UTF-8: {e}")))?;
    serde_json::from_str(text).map_err(|e| GmrError::Format(format!("bad header: {e}")))
}

fn truncated(e: std::io::Error) -> GmrError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        GmrError::Format("file is truncated".into())
    } else {
        GmrError::Io(e)
    }
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Fails unless the reader is exhausted.
pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(GmrError::Format("unexpected trailing bytes".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmrHeader {
    pub dims: usize,
    pub k: usize,
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub clip: [f64; 2],
}

impl GmrHeader {
    pub fn of(p: &GmrLayerParams) -> Self {
        let g = &p.geometry;
        GmrHeader { dims: g.dims, k: g.k, n: g.n, c_in: p.c_in(), c_out: p.c_out(), clip: [SIGMA_MIN, g.sigma_max()] }
    }
}

/// Writes one `.gmr` block.
pub fn write_gmr<W: Write>(w: &mut W, p: &GmrLayerParams) -> Result<()> {
    write_header(w, GMR_MAGIC, &GmrHeader::of(p))?;
    write_f64s(w, p.weights.w.data())?;
    write_f64s(w, &p.sigma.log_sigma)
}

/// Reads one `.gmr` block, leaving the reader just past it.
pub fn read_gmr_block<R: Read>(r: &mut R) -> Result<GmrLayerParams> {
    let h: GmrHeader = read_header(r, GMR_MAGIC)?;
    let geometry =
        ring_geometry(h.k, h.n, h.dims).map_err(|e| GmrError::Format(format!("inconsistent extents: {e}")))?;
    if h.c_in == 0 || h.c_out == 0 {
        return Err(GmrError::Format("zero channel extent".into()));
    }
    if h.clip != [SIGMA_MIN, geometry.sigma_max()] {
        return Err(GmrError::Format(format!("clip range {:?} does not match {} rings", h.clip, h.n)));
    }
    let w = read_f64s(r, h.c_out * h.c_in * h.n)?;
    let log_sigma = read_f64s(r, h.n)?;
    let weights =
        RingWeights::new(Tensor::new(&[h.c_out, h.c_in, h.n], w)?).map_err(|e| GmrError::Format(e.to_string()))?;
    GmrLayerParams::new(geometry, weights, SigmaParams { log_sigma })
}

/// Reads a complete `.gmr` stream (no trailing data allowed).
pub fn read_gmr<R: Read>(r: &mut R) -> Result<GmrLayerParams> {
    let p = read_gmr_block(r)?;
    expect_eof(r)?;
    Ok(p)
}

pub fn gmr_to_bytes(p: &GmrLayerParams) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    write_gmr(&mut v, p)?;
    Ok(v)
}

pub fn gmr_from_bytes(bytes: &[u8]) -> Result<GmrLayerParams> {
    read_gmr(&mut &bytes[..])
}

pub fn save_gmr(path: impl AsRef<Path>, p: &GmrLayerParams) -> Result<()> {
    std::fs::write(path, gmr_to_bytes(p)?)?;
    Ok(())
}

pub fn load_gmr(path: impl AsRef<Path>) -> Result<GmrLayerParams> {
    gmr_from_bytes(&std::fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct DenseHeader {
    shape: Vec<usize>,
}

pub fn write_dense<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_header(w, DENSE_MAGIC, &DenseHeader { shape: t.shape().to_vec() })?;
    write_f64s(w, t.data())
}

pub fn read_dense<R: Read>(r: &mut R) -> Result<Tensor> {
    let h: DenseHeader = read_header(r, DENSE_MAGIC)?;
    if h.shape.is_empty() || h.shape.contains(&0) {
        return Err(GmrError::Format(format!("bad dense block shape {:?}", h.shape)));
    }
    let len = h
        .shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .filter(|&l| l <= (1 << 32))
        .ok_or_else(|| GmrError::Format(format!("dense block shape {:?} is implausibly large", h.shape)))?;
    Tensor::new(&h.shape, read_f64s(r, len)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: String,
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// free-form provenance (e.g. the generator spec)
    pub meta: serde_json::Value,
}

/// Images `(count, channels, H, W)` and labels.
pub fn write_dataset<W: Write>(w: &mut W, header: &DatasetHeader, images: &[f64], labels: &[u32]) -> Result<()> {
    let per = header.channels * header.height * header.width;
    if images.len() != header.count * per || labels.len() != header.count {
        return Err(GmrError::Shape("dataset payload does not match its header".into()));
    }
    write_header(w, DATASET_MAGIC, header)?;
    write_f64s(w, images)?;
    let mut buf = Vec::with_capacity(labels.len() * 4);
    for l in labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<(DatasetHeader, Vec<f64>, Vec<u32>)> {
    let h: DatasetHeader = read_header(r, DATASET_MAGIC)?;
    let per = h.channels * h.height * h.width;
    if per == 0 || h.classes == 0 {
        return Err(GmrError::Format("dataset header has zero extents".into()));
    }
    let images = read_f64s(r, h.count * per)?;
    let mut buf = vec![0u8; h.count * 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    let labels: Vec<u32> = buf.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some(l) = labels.iter().find(|&&l| l as usize >= h.classes) {
        return Err(GmrError::Format(format!("label {l} out of range for {} classes", h.classes)));
    }
    expect_eof(r)?;
    Ok((h, images, labels))
}
