//! Binary checkpoints for the multi-task model and the domain-transform
//! network.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "FACECKPT"
//! version  u32      currently 1
//! kind     u8       1 = multi-task model, 2 = transform network
//! config   kind 1 only:
//!            n_blocks u32, then per block (layers u32, channels u32)
//!            input channels/height/width u32 ×3
//!            fc widths u32 ×3
//!            anti_out u32, recg_out u32
//!            scale profile u8 (0 = desk, 1 = paper)
//! params   n_params u32, then per tensor:
//!            rank u32, dims u32 ×rank, values f64 ×len (raw bits)
//! ```
//!
//! Parameters appear in declaration order; round trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fda::TransformNet;
use crate::model::{BackboneConfig, MultiTaskModel, ScaleProfile};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FACECKPT";
const VERSION: u32 = 1;
const KIND_MODEL: u8 = 1;
const KIND_TRANSFORM: u8 = 2;

// ── Writing ─────────────────────────────────────────────────────────────

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_params(buf: &mut Vec<u8>, params: &[Tensor]) {
    put_u32(buf, params.len());
    for p in params {
        put_u32(buf, p.shape().len());
        for &d in p.shape() {
            put_u32(buf, d);
        }
        for &v in p.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_model(path: &Path, model: &MultiTaskModel) -> Result<()> {
    let cfg = model.cfg();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(KIND_MODEL);
    put_u32(&mut buf, cfg.blocks.len());
    for &(layers, channels) in &cfg.blocks {
        put_u32(&mut buf, layers);
        put_u32(&mut buf, channels);
    }
    for d in [cfg.input.0, cfg.input.1, cfg.input.2] {
        put_u32(&mut buf, d);
    }
    for d in cfg.fc_dims {
        put_u32(&mut buf, d);
    }
    put_u32(&mut buf, cfg.anti_out);
    put_u32(&mut buf, cfg.recg_out);
    buf.push(match cfg.scale_profile {
        ScaleProfile::Desk => 0,
        ScaleProfile::Paper => 1,
    });
    put_params(&mut buf, model.params());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn save_transform(path: &Path, net: &TransformNet) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(KIND_TRANSFORM);
    put_params(&mut buf, net.params());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

// ── Reading ─────────────────────────────────────────────────────────────

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Decode {
            path: self.path.display().to_string(),
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail(format!(
                "truncated: wanted {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn header(&mut self, expected_kind: u8) -> Result<()> {
        let magic = self.take(MAGIC.len())?;
        if magic != MAGIC {
            self.pos = 0;
            return Err(self.fail("bad magic"));
        }
        let at_version = self.pos;
        let version = self.u32()?;
        if version != VERSION as usize {
            self.pos = at_version;
            return Err(self.fail(format!("unsupported version {version}")));
        }
        let at_kind = self.pos;
        let kind = self.u8()?;
        if kind != expected_kind {
            self.pos = at_kind;
            return Err(self.fail(format!("kind {kind}, expected {expected_kind}")));
        }
        Ok(())
    }

    fn params(&mut self) -> Result<Vec<Tensor>> {
        let n = self.u32()?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let rank = self.u32()?;
            if rank == 0 || rank > 4 {
                return Err(self.fail(format!("implausible tensor rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()?);
            }
            let len: usize = shape.iter().product();
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(self.f64()?);
            }
            let at = self.pos;
            out.push(Tensor::new(shape, values).map_err(|e| {
                self.pos = at;
                self.fail(e.to_string())
            })?);
        }
        if self.pos != self.buf.len() {
            return Err(self.fail(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(out)
    }
}

pub fn load_model(path: &Path) -> Result<MultiTaskModel> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    r.header(KIND_MODEL)?;
    let n_blocks = r.u32()?;
    if n_blocks > 64 {
        return Err(r.fail(format!("implausible block count {n_blocks}")));
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let layers = r.u32()?;
        let channels = r.u32()?;
        blocks.push((layers, channels));
    }
    let input = (r.u32()?, r.u32()?, r.u32()?);
    let fc_dims = [r.u32()?, r.u32()?, r.u32()?];
    let anti_out = r.u32()?;
    let recg_out = r.u32()?;
    let at_profile = r.pos;
    let scale_profile = match r.u8()? {
        0 => ScaleProfile::Desk,
        1 => ScaleProfile::Paper,
        other => {
            r.pos = at_profile;
            return Err(r.fail(format!("unknown scale profile {other}")));
        }
    };
    let cfg = BackboneConfig { blocks, input, fc_dims, anti_out, recg_out, scale_profile };
    let at_params = r.pos;
    let params = r.params()?;
    let mut model = MultiTaskModel::build(cfg, 0).map_err(|e| Error::Decode {
        path: path.display().to_string(),
        offset: 13,
        detail: format!("config rejected: {e}"),
    })?;
    model.set_params(params).map_err(|e| Error::Decode {
        path: path.display().to_string(),
        offset: at_params,
        detail: format!("parameters inconsistent with config: {e}"),
    })?;
    Ok(model)
}

pub fn load_transform(path: &Path) -> Result<TransformNet> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    r.header(KIND_TRANSFORM)?;
    let at_params = r.pos;
    let params = r.params()?;
    let mut net = TransformNet::build(0);
    net.set_params(params).map_err(|e| Error::Decode {
        path: path.display().to_string(),
        offset: at_params,
        detail: format!("parameters inconsistent with topology: {e}"),
    })?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneConfig;

    fn bits(params: &[Tensor]) -> Vec<Vec<u64>> {
        params.iter().map(|p| p.values().iter().map(|v| v.to_bits()).collect()).collect()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = MultiTaskModel::build(BackboneConfig::desk(4), 3).unwrap();
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.cfg(), model.cfg());
        assert_eq!(back.param_names(), model.param_names());
        assert_eq!(bits(back.params()), bits(model.params()));

        // saving the loaded model reproduces the file byte for byte
        let path2 = dir.path().join("model2.ckpt");
        save_model(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn loaded_model_scores_match_original() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = MultiTaskModel::build(BackboneConfig::desk(3), 11).unwrap();
        save_model(&path, &model).unwrap();
        let mut back = load_model(&path).unwrap();

        let mut r = crate::rng::stream(4, "ckpt-img", 0);
        use rand::Rng;
        let img = Tensor::new(
            vec![3, 32, 32],
            (0..3 * 1024).map(|_| r.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let a = model.liveness_score(&img).unwrap();
        let b = back.liveness_score(&img).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn transform_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = TransformNet::build(21);
        save_transform(&path, &net).unwrap();
        let back = load_transform(&path).unwrap();
        assert_eq!(bits(back.params()), bits(net.params()));
    }

    #[test]
    fn corrupt_files_fail_with_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = MultiTaskModel::build(BackboneConfig::desk(2), 0).unwrap();
        save_model(&path, &model).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        match load_model(&path) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected decode error, got {other:?}"),
        }

        let mut bad_version = good.clone();
        bad_version[8] = 9;
        fs::write(&path, &bad_version).unwrap();
        match load_model(&path) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected decode error, got {other:?}"),
        }

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Decode { .. })));

        let mut trailing = good.clone();
        trailing.push(0);
        fs::write(&path, &trailing).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Decode { .. })));

        // model checkpoint opened as a transform net: kind mismatch at its offset
        fs::write(&path, &good).unwrap();
        match load_transform(&path) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("expected decode error, got {other:?}"),
        }
    }
}
