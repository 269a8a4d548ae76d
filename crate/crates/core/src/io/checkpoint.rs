//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "ISAG"
//! 4       4   u32     format version (1)
//! 8       4   u32     num_classes
//! 12      4   u32     sigma_embed_dim
//! 16      4   u32     class_embed_dim
//! 20      4   u32     number of layer widths L
//! 24      4L  u32     layer widths, input to output
//! ..      4   u32     number of dropout sites S
//! ..      4S  u32     dropout sites
//! ..      8   u64     training step of the snapshot
//! ..      8   u64     training seed
//! ..      8   f64     training dropout probability
//! ..      8   u64     parameter count P
//! ..      4P  f32     parameters in the network's flat layout
//! ```

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::nn::{Architecture, DenoiserNet};

pub const MAGIC: [u8; 4] = *b"ISAG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub p_train: f64,
}

pub fn encode(net: &DenoiserNet, meta: &CheckpointMeta) -> Vec<u8> {
    let arch = net.architecture();
    let mut out = Vec::with_capacity(64 + 4 * net.params().len());
    out.extend_from_slice(&MAGIC);
    let u32s = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    u32s(&mut out, VERSION as usize);
    u32s(&mut out, arch.num_classes);
    u32s(&mut out, arch.sigma_embed_dim);
    u32s(&mut out, arch.class_embed_dim);
    u32s(&mut out, arch.widths.len());
    for &w in &arch.widths {
        u32s(&mut out, w);
    }
    u32s(&mut out, arch.dropout_sites.len());
    for &s in &arch.dropout_sites {
        u32s(&mut out, s);
    }
    out.extend_from_slice(&meta.step.to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&meta.p_train.to_le_bytes());
    out.extend_from_slice(&(net.params().len() as u64).to_le_bytes());
    for &p in net.params() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated {
            needed: self.pos.saturating_add(n),
            available: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(DenoiserNet, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic }.into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version, supported: VERSION }.into());
    }
    let num_classes = r.u32()? as usize;
    let sigma_embed_dim = r.u32()? as usize;
    let class_embed_dim = r.u32()? as usize;
    let n_widths = r.u32()? as usize;
    let widths = (0..n_widths).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let n_sites = r.u32()? as usize;
    let dropout_sites = (0..n_sites).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let meta = CheckpointMeta { step: r.u64()?, seed: r.u64()?, p_train: r.f64()? };
    let n_params = r.u64()? as usize;
    let arch = Architecture { widths, num_classes, sigma_embed_dim, class_embed_dim, dropout_sites };
    arch.validate()
        .map_err(|e| CheckpointError::ArchitectureMismatch(format!("invalid stored architecture: {e}")))?;
    let expected = arch.param_count();
    let available = (bytes.len() - r.pos) / 4;
    if n_params != expected || available != expected || (bytes.len() - r.pos) % 4 != 0 {
        if n_params == expected && available < expected {
            return Err(CheckpointError::Truncated { needed: r.pos + 4 * expected, available: bytes.len() }.into());
        }
        return Err(CheckpointError::LengthMismatch {
            expected,
            found: if n_params != expected { n_params } else { available },
        }
        .into());
    }
    let blob = r.take(4 * expected)?;
    let params = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((DenoiserNet::from_params(arch, params)?, meta))
}

pub fn save_checkpoint(net: &DenoiserNet, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(DenoiserNet, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Load and require a specific architecture.
pub fn load_checkpoint_for(path: &Path, expected: &Architecture) -> Result<(DenoiserNet, CheckpointMeta)> {
    let (net, meta) = load_checkpoint(path)?;
    if net.architecture() != expected {
        return Err(CheckpointError::ArchitectureMismatch(format!(
            "{} holds a {}-class net with widths {:?}, config expects {} classes with widths {:?}",
            path.display(),
            net.num_classes(),
            net.architecture().widths,
            expected.num_classes,
            expected.widths
        ))
        .into());
    }
    Ok((net, meta))
}

/// The network as it will be after a save/load round trip.
pub fn quantized(net: &DenoiserNet) -> DenoiserNet {
    let params = net.params().iter().map(|&p| p as f32 as f64).collect();
    DenoiserNet::from_params(net.architecture().clone(), params).expect("same architecture")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(classes: usize) -> DenoiserNet {
        DenoiserNet::new(Architecture::with_hidden(&[16, 8], classes, 4, 2), 3).unwrap()
    }

    const META: CheckpointMeta = CheckpointMeta { step: 2000, seed: 42, p_train: 0.1 };

    #[test]
    fn round_trip_is_exact_at_f32() {
        let n = net(2);
        let (back, meta) = decode(&encode(&n, &META)).unwrap();
        assert_eq!(meta, META);
        assert_eq!(back.architecture(), n.architecture());
        for (a, b) in n.params().iter().zip(back.params()) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
        }
        assert_eq!(back, quantized(&n));
        assert_eq!(encode(&back, &META), encode(&n, &META));
    }

    #[test]
    fn corruptions_have_distinct_errors() {
        let good = encode(&net(2), &META);
        let ck = |bytes: &[u8]| match decode(bytes) {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("expected checkpoint error, got {other:?}"),
        };

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert_eq!(ck(&bad), CheckpointError::BadMagic { found: *b"XXXX" });

        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert_eq!(ck(&bad), CheckpointError::UnsupportedVersion { found: 7, supported: 1 });

        assert!(matches!(ck(&good[..good.len() - 6]), CheckpointError::Truncated { .. }));
        assert!(matches!(ck(&good[..10]), CheckpointError::Truncated { .. }));

        let mut bad = good.clone();
        bad.extend_from_slice(&[0; 4]);
        assert!(matches!(ck(&bad), CheckpointError::LengthMismatch { .. }));
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.ckpt");
        save_checkpoint(&net(2), &META, &path).unwrap();
        let three = net(3);
        match load_checkpoint_for(&path, three.architecture()) {
            Err(Error::Checkpoint(CheckpointError::ArchitectureMismatch(_))) => {}
            other => panic!("{other:?}"),
        }
        assert!(load_checkpoint_for(&path, net(2).architecture()).is_ok());
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
