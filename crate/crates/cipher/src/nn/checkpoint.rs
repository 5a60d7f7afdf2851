//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "CIPHCKPT"
//! version u32      1
//! dtype   u8       1 = f32, 2 = f64
//! arch    32 bytes sha256 of the canonical architecture string
//! meta    u32 count, then (key u32+bytes, value u32+bytes) pairs, sorted
//! params  u32 count, then (name u32+bytes, ndim u32, dims u32*, raw data)
//! ```
//!
//! Parameters are written in visitor order, so saving a freshly loaded
//! checkpoint reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::param::{ParamMut, ParamSet};
use super::scalar::Scalar;
use crate::error::{CipherError, Result};

const MAGIC: &[u8; 8] = b"CIPHCKPT";
const VERSION: u32 = 1;

pub fn arch_hash(arch: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(arch.as_bytes());
    h.finalize().into()
}

fn dtype_tag<F: Scalar>() -> u8 {
    match F::DTYPE {
        "f32" => 1,
        "f64" => 2,
        other => unreachable!("unknown dtype {other}"),
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Serialize the network parameters plus metadata into the container bytes.
pub fn encode<F: Scalar, P: ParamSet<F> + ?Sized>(
    arch: &str,
    meta: &BTreeMap<String, String>,
    net: &mut P,
) -> Vec<u8> {
    let mut meta = meta.clone();
    meta.insert("arch".to_string(), arch.to_string());

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(dtype_tag::<F>());
    out.extend_from_slice(&arch_hash(arch));

    put_u32(&mut out, meta.len() as u32);
    for (k, v) in &meta {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }

    let mut entries: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    net.visit_params("", &mut |p: ParamMut<'_, F>| {
        let mut data = Vec::new();
        F::write_le(p.value, &mut data);
        entries.push((p.name, p.shape, data));
    });
    put_u32(&mut out, entries.len() as u32);
    for (name, shape, data) in entries {
        put_str(&mut out, &name);
        put_u32(&mut out, shape.len() as u32);
        for d in shape {
            put_u32(&mut out, d as u32);
        }
        out.extend_from_slice(&data);
    }
    out
}

pub fn save<F: Scalar, P: ParamSet<F> + ?Sized>(
    path: &Path,
    arch: &str,
    meta: &BTreeMap<String, String>,
    net: &mut P,
) -> Result<()> {
    let bytes = encode(arch, meta, net);
    let mut f = std::fs::File::create(path).map_err(|e| CipherError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CipherError::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CipherError::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| CipherError::Checkpoint("non-utf8 string".to_string()))
    }
}

/// Read only the metadata map (cheap; no parameter copies).
pub fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = std::fs::read(path).map_err(|e| CipherError::io(path, e))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    check_header(&mut r, None)?;
    r.take(32)?; // arch hash
    read_meta_entries(&mut r)
}

fn check_header(r: &mut Reader<'_>, dtype: Option<u8>) -> Result<u8> {
    if r.take(8)? != MAGIC {
        return Err(CipherError::Checkpoint(
            "bad magic (not a checkpoint file)".to_string(),
        ));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CipherError::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let tag = r.take(1)?[0];
    if let Some(want) = dtype {
        if tag != want {
            let name = |t| match t {
                1 => "f32",
                2 => "f64",
                _ => "unknown",
            };
            return Err(CipherError::Checkpoint(format!(
                "dtype mismatch: file is {}, network is {}",
                name(tag),
                name(want)
            )));
        }
    }
    Ok(tag)
}

fn read_meta_entries(r: &mut Reader<'_>) -> Result<BTreeMap<String, String>> {
    let n = r.u32()?;
    let mut meta = BTreeMap::new();
    for _ in 0..n {
        let k = r.string()?;
        let v = r.string()?;
        meta.insert(k, v);
    }
    Ok(meta)
}

/// Load parameters into `net`, verifying dtype, architecture hash, and that
/// the stored tensors match the network's parameters name for name, in
/// order. Returns the metadata map (without the implicit "arch" entry
/// removed -- callers can inspect it).
pub fn load<F: Scalar, P: ParamSet<F> + ?Sized>(
    path: &Path,
    arch: &str,
    net: &mut P,
) -> Result<BTreeMap<String, String>> {
    let bytes = std::fs::read(path).map_err(|e| CipherError::io(path, e))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    check_header(&mut r, Some(dtype_tag::<F>()))?;
    let file_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let meta = read_meta_entries(&mut r)?;
    if file_hash != arch_hash(arch) {
        let stored = meta.get("arch").map(String::as_str).unwrap_or("<missing>");
        return Err(CipherError::Checkpoint(format!(
            "architecture mismatch: file was saved for '{stored}', loading into '{arch}'"
        )));
    }

    let count = r.u32()? as usize;
    let mut loaded = 0usize;
    let mut failure: Option<CipherError> = None;
    // Walk file entries and network parameters in lockstep.
    let mut entries: Vec<(String, Vec<usize>, Vec<F>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut len = 1usize;
        for _ in 0..ndim {
            let d = r.u32()? as usize;
            shape.push(d);
            len *= d;
        }
        let raw = r.take(len * F::BYTES)?;
        let data = F::read_le(raw)
            .ok_or_else(|| CipherError::Checkpoint("misaligned tensor data".to_string()))?;
        entries.push((name, shape, data));
    }

    let mut idx = 0usize;
    net.visit_params("", &mut |p: ParamMut<'_, F>| {
        if failure.is_some() {
            return;
        }
        if idx >= entries.len() {
            failure = Some(CipherError::Checkpoint(format!(
                "missing parameter '{}' in file",
                p.name
            )));
            return;
        }
        let (name, shape, data) = &entries[idx];
        idx += 1;
        if *name != p.name {
            failure = Some(CipherError::Checkpoint(format!(
                "parameter order mismatch: file has '{name}', network expects '{}'",
                p.name
            )));
            return;
        }
        if *shape != p.shape {
            failure = Some(CipherError::shape(
                format!("checkpoint parameter '{name}'"),
                format!("{:?}", p.shape),
                format!("{shape:?}"),
            ));
            return;
        }
        p.value.copy_from_slice(data);
        loaded += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if idx != entries.len() {
        return Err(CipherError::Checkpoint(format!(
            "file has {} extra parameter(s) the network does not expect",
            entries.len() - idx
        )));
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv::{Conv2d, ConvInit};
    use crate::nn::rng::seeded_rng;

    fn test_net(seed: u64) -> Conv2d<f32> {
        let mut rng = seeded_rng(seed, "ckpt-test");
        Conv2d::new(2, 3, 3, 1, 1, ConvInit::WeightScaled, &mut rng)
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let mut net = test_net(1);
        let mut meta = BTreeMap::new();
        meta.insert("stage".to_string(), "2".to_string());
        save(&p1, "conv-test-v1", &meta, &mut net).unwrap();

        let mut net2 = test_net(2);
        let meta2 = load(&p2.with_file_name("a.ckpt"), "conv-test-v1", &mut net2).unwrap();
        assert_eq!(meta2.get("stage").unwrap(), "2");
        assert_eq!(meta2.get("arch").unwrap(), "conv-test-v1");
        assert_eq!(net.w, net2.w);
        assert_eq!(net.b, net2.b);

        // re-save without the implicit arch key; encoder re-adds it
        let mut meta3 = meta2.clone();
        meta3.remove("arch");
        save(&p2, "conv-test-v1", &meta3, &mut net2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn rejects_wrong_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let mut net = test_net(1);
        save(&p, "arch-a", &BTreeMap::new(), &mut net).unwrap();
        let err = load(&p, "arch-b", &mut net).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("arch-a") && msg.contains("arch-b"), "{msg}");
    }

    #[test]
    fn rejects_wrong_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let mut net = test_net(1);
        save(&p, "arch-a", &BTreeMap::new(), &mut net).unwrap();
        let mut rng = seeded_rng(1, "ckpt-test");
        let mut net64 = Conv2d::<f64>::new(2, 3, 3, 1, 1, ConvInit::WeightScaled, &mut rng);
        let err = load(&p, "arch-a", &mut net64).unwrap_err();
        assert!(err.to_string().contains("dtype"), "{err}");
    }

    #[test]
    fn meta_reader_skips_params() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let mut net = test_net(3);
        let mut meta = BTreeMap::new();
        meta.insert("k".to_string(), "v".to_string());
        save(&p, "arch", &meta, &mut net).unwrap();
        let m = read_meta(&p).unwrap();
        assert_eq!(m.get("k").unwrap(), "v");
    }
}
