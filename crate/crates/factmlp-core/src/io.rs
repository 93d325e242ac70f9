//! File formats: the embedding container, CSV import/export, the fact-map
//! text format, and the checksum shared with the model container.
//!
//! Embedding container layout (little endian throughout):
//!   magic "EMB1" | u32 header length | header JSON | n*d f64 row-major |
//!   u64 FNV-1a checksum of all preceding bytes.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbedMeta, EmbeddingSet, FactSet};
use crate::error::{FactError, Result};

pub const EMBED_MAGIC: &[u8; 4] = b"EMB1";
pub const EMBED_VERSION: u32 = 1;

/// FNV-1a 64-bit checksum.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbedHeader {
    version: u32,
    n: usize,
    d: usize,
    dtype: String,
    order: String,
    #[serde(default)]
    meta: EmbedMeta,
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let header = EmbedHeader {
        version: EMBED_VERSION,
        n: set.n(),
        d: set.d(),
        dtype: "f64".into(),
        order: "row-major".into(),
        meta: set.meta.clone(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| FactError::Malformed(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + header_json.len() + set.n() * set.d() * 8);
    buf.extend_from_slice(EMBED_MAGIC);
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for i in 0..set.n() {
        for j in 0..set.d() {
            buf.extend_from_slice(&set.data()[(i, j)].to_le_bytes());
        }
    }
    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let buf = fs::read(path)?;
    if buf.len() < 4 + 4 + 8 {
        return Err(FactError::Truncated("file shorter than any valid container".into()));
    }
    if &buf[0..4] != EMBED_MAGIC {
        return Err(FactError::Malformed("bad magic; not an embedding container".into()));
    }
    let body = &buf[..buf.len() - 8];
    let stored = u64::from_le_bytes(buf[buf.len() - 8..].try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(FactError::ChecksumMismatch);
    }
    let hlen = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    if 8 + hlen > body.len() {
        return Err(FactError::Truncated("header extends past end of file".into()));
    }
    let header: EmbedHeader = serde_json::from_slice(&buf[8..8 + hlen])
        .map_err(|e| FactError::Malformed(format!("header JSON: {e}")))?;
    if header.version != EMBED_VERSION {
        return Err(FactError::VersionMismatch {
            found: header.version,
            expected: EMBED_VERSION,
        });
    }
    if header.dtype != "f64" || header.order != "row-major" {
        return Err(FactError::Malformed(format!(
            "unsupported dtype/order {}/{}",
            header.dtype, header.order
        )));
    }
    let need = header.n * header.d * 8;
    let payload = &body[8 + hlen..];
    if payload.len() != need {
        return Err(FactError::Truncated(format!(
            "payload holds {} bytes, header promises {}",
            payload.len(),
            need
        )));
    }
    let mut data = DMatrix::zeros(header.n, header.d);
    let mut off = 0;
    for i in 0..header.n {
        for j in 0..header.d {
            data[(i, j)] = f64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
            off += 8;
        }
    }
    EmbeddingSet::new(data, header.meta)
}

/// CSV export: one row per embedding; optional header row d0,d1,...
pub fn export_embeddings_csv(set: &EmbeddingSet, path: &Path, header: bool) -> Result<()> {
    let mut out = String::new();
    if header {
        let names: Vec<String> = (0..set.d()).map(|j| format!("d{j}")).collect();
        out.push_str(&names.join(","));
        out.push('\n');
    }
    for i in 0..set.n() {
        let row: Vec<String> = (0..set.d())
            .map(|j| format!("{}", set.data()[(i, j)]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn import_embeddings_csv(path: &Path, header: bool) -> Result<EmbeddingSet> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 && header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| FactError::Malformed(format!("line {}: {e}", ln + 1)))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(FactError::Malformed(format!(
                    "line {}: ragged row ({} fields vs {})",
                    ln + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(FactError::Malformed("CSV has no data rows".into()));
    }
    let n = rows.len();
    let d = rows[0].len();
    let data = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    EmbeddingSet::from_matrix(data, "csv")
}

/// Fact-map text format: "factmap v1 <n_keys> <n_values>" then one 1-based
/// value index per line, in key order.
pub fn write_fact_set(f: &FactSet, path: &Path) -> Result<()> {
    let mut out = format!("factmap v1 {} {}\n", f.n_keys(), f.n_values());
    for &v in f.entries() {
        out.push_str(&format!("{}\n", v + 1));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_fact_set(path: &Path) -> Result<FactSet> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let head = lines
        .next()
        .ok_or_else(|| FactError::Truncated("empty fact map".into()))?;
    let parts: Vec<&str> = head.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "factmap" {
        return Err(FactError::Malformed("expected 'factmap v1 <nk> <nv>' header".into()));
    }
    if parts[1] != "v1" {
        return Err(FactError::VersionMismatch {
            found: parts[1].trim_start_matches('v').parse().unwrap_or(0),
            expected: 1,
        });
    }
    let nk: usize = parts[2]
        .parse()
        .map_err(|_| FactError::Malformed("bad key count".into()))?;
    let nv: usize = parts[3]
        .parse()
        .map_err(|_| FactError::Malformed("bad value count".into()))?;
    let mut map = Vec::with_capacity(nk);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let v: usize = line
            .trim()
            .parse()
            .map_err(|_| FactError::Malformed(format!("bad entry '{line}'")))?;
        if v == 0 || v > nv {
            return Err(FactError::Malformed(format!(
                "entry {v} outside 1..={nv}"
            )));
        }
        map.push(v - 1);
    }
    if map.len() != nk {
        return Err(FactError::Truncated(format!(
            "fact map has {} entries, header promises {nk}",
            map.len()
        )));
    }
    FactSet::new(map, nv)
}
