//! Bit-exact weight copies and their on-disk form.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! b"EVPSNAP1"
//! u64 header_len, header_len bytes of TOML (format version, topology, provenance)
//! u64 record_count
//! per record: u32 name_len, name bytes, u32 ndim, ndim x u64 dims, numel x f64 data
//! 32 bytes: SHA-256 over the concatenated f64 data bytes of every record
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MtlNetwork, Topology};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EVPSNAP1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub run_id: String,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Copy of every parameter of a network, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot {
    entries: Vec<SnapshotEntry>,
    provenance: Provenance,
}

impl WeightSnapshot {
    pub fn new(entries: Vec<SnapshotEntry>, provenance: Provenance) -> Self {
        Self { entries, provenance }
    }

    pub fn entries(&self) -> &[SnapshotEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&SnapshotEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Names of parameters whose values differ (bitwise) from `net`.
    pub fn diff(&self, net: &MtlNetwork) -> Vec<String> {
        let params = net.params();
        let mut out = Vec::new();
        for entry in &self.entries {
            match params.iter().find(|p| p.name == entry.name) {
                Some(p) if same_bits(p.tensor.data(), &entry.data) => {}
                _ => out.push(entry.name.clone()),
            }
        }
        for p in &params {
            if self.entry(p.name).is_none() {
                out.push(p.name.to_string());
            }
        }
        out
    }

    /// Hex SHA-256 over all data bytes, the same value stored in the file trailer.
    pub fn checksum(&self) -> String {
        hex::encode(self.digest())
    }

    fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            for v in &e.data {
                hasher.update(v.to_le_bytes());
            }
        }
        let mut out = [0u8; 32];
        out.copy_from_slice(hasher.finalize().as_slice());
        out
    }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    description: String,
    topology: Topology,
    provenance: Provenance,
}

pub fn write_snapshot<W: Write>(mut w: W, snap: &WeightSnapshot, topology: &Topology) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        description: topology.describe(),
        topology: topology.clone(),
        provenance: snap.provenance.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Format(format!("snapshot header: {e}")))?;
    w.write_all(MAGIC)?;
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    w.write_all(&(snap.entries.len() as u64).to_le_bytes())?;
    for e in &snap.entries {
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for d in &e.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&snap.digest())?;
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated snapshot: {e}")))?;
    Ok(buf)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

// Guards allocations driven by untrusted length fields.
const MAX_LEN: u64 = 1 << 32;

fn checked_len(v: u64, what: &str) -> Result<usize> {
    if v > MAX_LEN {
        return Err(Error::Format(format!("{what} of {v} is implausible")));
    }
    Ok(v as usize)
}

/// Reads a snapshot file, verifying the magic and the data checksum.
pub fn read_snapshot<R: Read>(mut r: R) -> Result<(Topology, WeightSnapshot)> {
    if &read_exact::<8>(&mut r)? != MAGIC {
        return Err(Error::Format("not a snapshot file (bad magic)".into()));
    }
    let header_len = checked_len(read_u64(&mut r)?, "header length")?;
    let mut text = vec![0u8; header_len];
    r.read_exact(&mut text)
        .map_err(|e| Error::Format(format!("truncated snapshot header: {e}")))?;
    let text = String::from_utf8(text).map_err(|_| Error::Format("snapshot header is not UTF-8".into()))?;
    let header: Header = toml::from_str(&text).map_err(|e| Error::Format(format!("snapshot header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported snapshot format version {}",
            header.format_version
        )));
    }

    let count = checked_len(read_u64(&mut r)?, "record count")?;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = checked_len(read_u32(&mut r)? as u64, "name length")?;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated record name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(checked_len(read_u64(&mut r)?, "dimension")?);
        }
        let numel: usize = shape.iter().product();
        checked_len(numel as u64, "record size")?;
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(read_exact(&mut r)?));
        }
        entries.push(SnapshotEntry { name, shape, data });
    }
    let stored: [u8; 32] = read_exact(&mut r)?;
    let snap = WeightSnapshot::new(entries, header.provenance);
    if snap.digest() != stored {
        return Err(Error::Integrity("snapshot checksum mismatch".into()));
    }
    Ok((header.topology, snap))
}
