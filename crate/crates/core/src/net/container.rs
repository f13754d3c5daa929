use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GmrError, Result};
use crate::io::{expect_eof, read_dense, read_gmr_block, read_header, write_dense, write_gmr, write_header};

use super::{Layer, LayerSpec, Network};

pub const NETWORK_MAGIC: &[u8; 8] = b"GMRNET01";
const NETWORK_SCHEMA: &str = "gmr-network/1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema: String,
    in_channels: usize,
    layers: Vec<LayerSpec>,
}

/// Manifest followed by one parameter block per parameterized layer, in
/// layer order.
pub fn write_network<W: Write>(w: &mut W, net: &Network) -> Result<()> {
    let manifest = Manifest { schema: NETWORK_SCHEMA.into(), in_channels: net.in_channels, layers: net.specs() };
    write_header(w, NETWORK_MAGIC, &manifest)?;
    for layer in &net.layers {
        match layer {
            Layer::GmrConv(p) => write_gmr(w, p)?,
            Layer::DenseConv(t) | Layer::LinearHead(t) | Layer::Bias(t) => write_dense(w, t)?,
            Layer::AvgPoolDownsample { mix, .. } => write_dense(w, mix)?,
            Layer::Relu | Layer::GlobalAvgPool => {}
        }
    }
    Ok(())
}

pub fn read_network<R: Read>(r: &mut R) -> Result<Network> {
    let m: Manifest = read_header(r, NETWORK_MAGIC)?;
    if m.schema != NETWORK_SCHEMA {
        return Err(GmrError::Format(format!("unsupported network schema {:?}", m.schema)));
    }
    let layers = m
        .layers
        .iter()
        .map(|s| {
            Ok(match *s {
                LayerSpec::GmrConv { .. } => Layer::GmrConv(read_gmr_block(r)?),
                LayerSpec::DenseConv { .. } => Layer::DenseConv(read_dense(r)?),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::AvgPoolDownsample { window, .. } => Layer::AvgPoolDownsample { window, mix: read_dense(r)? },
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
                LayerSpec::LinearHead { .. } => Layer::LinearHead(read_dense(r)?),
                LayerSpec::Bias { .. } => Layer::Bias(read_dense(r)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    expect_eof(r)?;
    let net = Network { in_channels: m.in_channels, layers };
    if net.specs() != m.layers {
        return Err(GmrError::Format("parameter blocks disagree with the manifest".into()));
    }
    net.validate()?;
    Ok(net)
}

pub fn network_to_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    write_network(&mut v, net)?;
    Ok(v)
}

pub fn network_from_bytes(mut bytes: &[u8]) -> Result<Network> {
    read_network(&mut bytes)
}

pub fn save_network(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_network(&mut w, net)?;
    w.flush()?;
    Ok(())
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    read_network(&mut BufReader::new(File::open(path)?))
}
