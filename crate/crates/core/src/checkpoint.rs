//! Flat binary checkpoint format.
//!
//! Layout: 8-byte magic, u64 LE spec-JSON length, the `ArchSpec` JSON
//! document, then one record per tensor until end of file:
//! u32 LE name length, UTF-8 name, u32 LE rank, rank u64 LE dims, and the
//! data as little-endian 8-byte floats. Parameters and batch-norm running
//! state are stored under their dotted visit names.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{build_network, ArchSpec, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MILNETV1";

fn collect_tensors(net: &mut Network) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    net.visit_params(&mut |name, p| out.push((name, p.value.clone())));
    net.visit_state(&mut |name, t| out.push((name, t.clone())));
    out
}

pub fn save_bytes(net: &mut Network) -> Result<Vec<u8>> {
    let spec_json = serde_json::to_vec(net.spec())
        .map_err(|e| Error::data(format!("cannot serialize arch spec: {e}")))?;
    let tensors = collect_tensors(net);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(spec_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&spec_json);
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(net: &mut Network, path: &Path) -> Result<()> {
    let bytes = save_bytes(net)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_bytes(bytes: &[u8]) -> Result<Network> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint { offset: 0, msg: "bad magic string".to_string() });
    }
    let spec_len = cur.u64("spec length")? as usize;
    let spec_offset = cur.pos;
    let spec_bytes = cur.take(spec_len, "spec JSON")?;
    let spec: ArchSpec = serde_json::from_slice(spec_bytes).map_err(|e| Error::Checkpoint {
        offset: spec_offset as u64,
        msg: format!("invalid arch spec JSON: {e}"),
    })?;

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    while cur.pos < bytes.len() {
        let name_offset = cur.pos;
        let name_len = cur.u32("tensor name length")? as usize;
        let name_bytes = cur.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint {
                offset: name_offset as u64,
                msg: "tensor name is not UTF-8".to_string(),
            })?
            .to_string();
        let rank = cur.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint {
                offset: name_offset as u64,
                msg: format!("implausible rank {rank} for tensor '{name}'"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("tensor dimension")? as usize);
        }
        let len: usize = shape.iter().product();
        let data_bytes = cur.take(len * 8, "tensor data")?;
        let data: Vec<f64> = data_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(Error::Checkpoint {
                offset: name_offset as u64,
                msg: format!("duplicate tensor '{name}'"),
            });
        }
    }

    let mut net = build_network(&spec, 0)?;
    let mut missing = Vec::new();
    let mut fill = |name: String, dst: &mut Tensor| match tensors.remove(&name) {
        Some(src) => {
            if src.shape() != dst.shape() {
                missing.push(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                ));
            } else {
                *dst = src;
            }
        }
        None => missing.push(format!("tensor '{name}' absent from checkpoint")),
    };
    net.visit_params(&mut |name, p| fill(name, &mut p.value));
    net.visit_state(&mut |name, t| fill(name, t));
    if !missing.is_empty() {
        return Err(Error::Checkpoint {
            offset: bytes.len() as u64,
            msg: missing.join("; "),
        });
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint {
            offset: bytes.len() as u64,
            msg: format!("unexpected tensor '{extra}' in checkpoint"),
        });
    }
    Ok(net)
}

pub fn load(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    load_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{named_arch, Mode};
    use crate::rng::rng_from;
    use rand::Rng;

    fn trained_net() -> Network {
        let mut net = build_network(&named_arch("minimal").unwrap(), 7).unwrap();
        let mut rng = rng_from(1, 0, 0);
        let data: Vec<f64> = (0..2 * 3 * 8 * 8).map(|_| rng.gen()).collect();
        let batch = Tensor::from_vec(&[2, 3, 8, 8], data).unwrap();
        net.forward(&batch, Mode::Train).unwrap();
        net
    }

    #[test]
    fn round_trip_preserves_every_tensor_and_output() {
        let mut net = trained_net();
        let bytes = save_bytes(&mut net).unwrap();
        let mut back = load_bytes(&bytes).unwrap();

        let mut original = Vec::new();
        net.visit_params(&mut |name, p| original.push((name, p.value.clone())));
        let mut restored = Vec::new();
        back.visit_params(&mut |name, p| restored.push((name, p.value.clone())));
        assert_eq!(original.len(), restored.len());
        for ((n1, t1), (n2, t2)) in original.iter().zip(&restored) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "mismatch in {n1}");
        }

        // restored running statistics allow eval mode immediately
        let input = Tensor::zeros(&[1, 3, 8, 8]);
        let a = net.forward(&input, Mode::Eval).unwrap();
        let b = back.forward(&input, Mode::Eval).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn truncation_reports_byte_offset() {
        let mut net = trained_net();
        let bytes = save_bytes(&mut net).unwrap();
        let cut = bytes.len() - 5;
        let err = load_bytes(&bytes[..cut]).unwrap_err();
        match err {
            Error::Checkpoint { offset, .. } => assert!(offset <= cut as u64),
            other => panic!("expected checkpoint error, got {other}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let err = load_bytes(b"NOTMILNT").unwrap_err();
        assert!(matches!(err, Error::Checkpoint { offset: 0, .. }));
    }

    #[test]
    fn missing_tensor_rejected() {
        let mut net = trained_net();
        let full = save_bytes(&mut net).unwrap();
        // drop the final tensor record by scanning for its name marker
        let needle = b"stage3.block1.proj.bn.count";
        let pos = full
            .windows(needle.len())
            .rposition(|w| w == needle)
            .expect("state tensor present");
        let cut = pos - 4; // u32 name length precedes the name
        let err = load_bytes(&full[..cut]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }));
    }
}
