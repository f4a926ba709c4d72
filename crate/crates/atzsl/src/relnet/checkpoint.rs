//! Model checkpoint container.
//!
//! Binary layout (all integers little-endian):
//! magic `ATZM`, u32 version, the architecture fields, then every parameter
//! tensor in the canonical flat order as (rank, extents, f64 entries).
//! Round-trips are bitwise exact. Writes go to a temporary file in the target
//! directory and are renamed into place, so an interrupted save never leaves
//! a partial checkpoint behind.

use super::{Combine, Dense, NetConfig, RelationNet};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ATZM";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.rank() as u64);
        for &e in t.shape() {
            self.u64(e as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data(format!(
                "{}: truncated checkpoint at byte offset {}",
                self.path, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.usize()?;
        if rank > 2 {
            return Err(Error::data(format!(
                "{}: unsupported tensor rank {rank} at byte offset {}",
                self.path, self.pos
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.usize()?);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        Tensor::new(shape, data)
    }
}

/// Serialize a network. The write is atomic: tmp file then rename.
pub fn save_checkpoint(net: &RelationNet, path: &Path) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let c = &net.config;
    w.u64(c.input_dim as u64);
    w.u64(c.prototype_dim as u64);
    w.u64(c.feature_hidden.len() as u64);
    for &h in &c.feature_hidden {
        w.u64(h as u64);
    }
    w.u64(c.attr_hidden as u64);
    w.u64(c.embed_dim as u64);
    w.u64(c.relation_hidden as u64);
    w.f64(c.temperature);
    w.buf.push(match c.combine {
        Combine::Concat => 0,
        Combine::Product => 1,
    });
    let tensors = net.param_tensors();
    w.u64(tensors.len() as u64);
    for t in tensors {
        w.tensor(t);
    }

    let display = path.display().to_string();
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&display, e))?;
        f.write_all(&w.buf).map_err(|e| Error::io(&display, e))?;
        f.sync_all().map_err(|e| Error::io(&display, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(&display, e))?;
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`]; layer shapes are validated
/// against the stored architecture.
pub fn load_checkpoint(path: &Path) -> Result<RelationNet> {
    let display = path.display().to_string();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(&display, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: &display,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::data(format!("{display}: not a checkpoint file")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!(
            "{display}: unsupported checkpoint version {version}"
        )));
    }
    let input_dim = r.usize()?;
    let prototype_dim = r.usize()?;
    let n_hidden = r.usize()?;
    let mut feature_hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        feature_hidden.push(r.usize()?);
    }
    let attr_hidden = r.usize()?;
    let embed_dim = r.usize()?;
    let relation_hidden = r.usize()?;
    let temperature = r.f64()?;
    let combine = match r.take(1)?[0] {
        0 => Combine::Concat,
        1 => Combine::Product,
        other => {
            return Err(Error::data(format!(
                "{display}: unknown combine mode {other}"
            )))
        }
    };
    let config = NetConfig {
        input_dim,
        prototype_dim,
        feature_hidden,
        attr_hidden,
        embed_dim,
        relation_hidden,
        temperature,
        combine,
    };
    config.validate()?;

    let n_tensors = r.usize()?;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        tensors.push(r.tensor()?);
    }
    if r.pos != buf.len() {
        return Err(Error::data(format!(
            "{display}: {} trailing bytes after checkpoint payload",
            buf.len() - r.pos
        )));
    }

    // Expected layer shapes, in the canonical order.
    let mut expected: Vec<(usize, usize)> = Vec::new();
    let mut prev = config.input_dim;
    for &h in &config.feature_hidden {
        expected.push((prev, h));
        prev = h;
    }
    expected.push((prev, config.embed_dim));
    expected.push((config.prototype_dim, config.attr_hidden));
    expected.push((config.attr_hidden, config.embed_dim));
    expected.push((config.relation_input_dim(), config.relation_hidden));
    expected.push((config.relation_hidden, 1));

    if tensors.len() != expected.len() * 2 {
        return Err(Error::data(format!(
            "{display}: expected {} parameter tensors, found {}",
            expected.len() * 2,
            tensors.len()
        )));
    }
    let mut layers = Vec::with_capacity(expected.len());
    for (i, (inp, out)) in expected.iter().enumerate() {
        let weight = tensors[2 * i].clone();
        let bias = tensors[2 * i + 1].clone();
        if weight.shape() != [*inp, *out] || bias.shape() != [*out] {
            return Err(Error::data(format!(
                "{display}: layer {i} has shape {:?}/{:?}, expected [{inp}, {out}]/[{out}]",
                weight.shape(),
                bias.shape()
            )));
        }
        layers.push(Dense { weight, bias });
    }
    let n_feature = config.feature_hidden.len() + 1;
    let relation_layers = layers.split_off(n_feature + 2);
    let attr_layers = layers.split_off(n_feature);
    Ok(RelationNet {
        config,
        feature_layers: layers,
        attr_layers,
        relation_layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relnet::RelationNet;
    use tempfile::tempdir;

    fn sample_net() -> RelationNet {
        let config = NetConfig {
            input_dim: 5,
            prototype_dim: 3,
            feature_hidden: vec![7, 4],
            attr_hidden: 6,
            embed_dim: 4,
            relation_hidden: 5,
            temperature: 2.5,
            combine: Combine::Concat,
        };
        RelationNet::init_params(&config, 99).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let net = sample_net();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, net.config);
        for (a, b) in loaded.param_tensors().iter().zip(net.param_tensors()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // The temporary file must not linger.
        assert!(!dir.path().join("model.tmp").exists());
    }

    #[test]
    fn truncated_file_reports_offset() {
        let net = sample_net();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("byte offset"), "{err}");
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
