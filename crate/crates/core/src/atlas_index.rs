//! The immutable labeled atlas and exact Euclidean k-NN over it.
//!
//! An ATL1 file is one JSON header line followed by a complete EMB1 body:
//!
//! ```text
//! {"magic":"ATL1","options":{...},"label_table":{...},"checksum":{"algorithm":"xxh64","digest":"…"}}\n
//! <EMB1 bytes>
//! ```
//!
//! The checksum is XXH64 (seed 0) over the header serialized *without* its
//! `checksum` field, a newline, and the EMB1 body.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::annotation::LabelTable;
use crate::embedding_io::{emb1_bytes, read_emb1, EmbeddingSet};
use crate::error::{Error, Result};

pub const ATL1_MAGIC: &str = "ATL1";
pub const CHECKSUM_ALGORITHM: &str = "xxh64";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildOptions {
    /// Scale stored vectors (and incoming queries) to unit L2 norm.
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checksum {
    pub algorithm: String,
    pub digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Atl1Header {
    magic: String,
    options: BuildOptions,
    label_table: LabelTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    checksum: Option<Checksum>,
}

/// One neighbor in a k-NN answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub rank: usize,
    pub patch_id: String,
    pub label_id: u32,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct Atlas {
    set: EmbeddingSet,
    labels: LabelTable,
    options: BuildOptions,
    checksum: u64,
    bytes: Vec<u8>,
}

fn normalize_row(row: &mut [f32]) -> bool {
    let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / norm) as f32;
    }
    true
}

fn xxh64(parts: &[&[u8]]) -> u64 {
    let mut h = XxHash64::with_seed(0);
    for p in parts {
        std::hash::Hasher::write(&mut h, p);
    }
    std::hash::Hasher::finish(&h)
}

fn header_bytes(header: &Atl1Header) -> Vec<u8> {
    serde_json::to_vec(header).expect("header serializes")
}

/// Squared Euclidean distance, f32 inputs widened to f64 and summed in order.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn validate_contents(set: &EmbeddingSet, labels: &LabelTable) -> Result<()> {
    for (row, r) in set.records().iter().enumerate() {
        if !labels.contains_id(r.label_id) {
            return Err(Error::MissingLabel { label_id: r.label_id, row });
        }
    }
    let mut ids = HashSet::with_capacity(set.count());
    for r in set.records() {
        if !ids.insert(r.patch_id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate patch id {} in atlas", r.patch_id)));
        }
    }
    Ok(())
}

pub fn build_atlas(set: EmbeddingSet, labels: LabelTable, opts: BuildOptions) -> Result<Atlas> {
    if set.is_empty() {
        return Err(Error::InvalidInput("atlas needs at least one embedding".into()));
    }
    validate_contents(&set, &labels)?;
    let set = if opts.normalize {
        let (dim, mut vectors, records) = set.into_parts();
        for (row, chunk) in vectors.chunks_exact_mut(dim).enumerate() {
            if !normalize_row(chunk) {
                return Err(Error::ZeroVector { row });
            }
        }
        EmbeddingSet::new(dim, vectors, records)?
    } else {
        set
    };

    let mut header = Atl1Header {
        magic: ATL1_MAGIC.into(),
        options: opts,
        label_table: labels.clone(),
        checksum: None,
    };
    let body = emb1_bytes(&set);
    let checksum = xxh64(&[&header_bytes(&header), b"\n", &body]);
    header.checksum = Some(Checksum {
        algorithm: CHECKSUM_ALGORITHM.into(),
        digest: format!("{checksum:016x}"),
    });
    let mut bytes = header_bytes(&header);
    bytes.push(b'\n');
    bytes.extend_from_slice(&body);

    Ok(Atlas {
        set,
        labels,
        options: opts,
        checksum,
        bytes,
    })
}

impl Atlas {
    pub fn embeddings(&self) -> &EmbeddingSet {
        &self.set
    }

    pub fn label_table(&self) -> &LabelTable {
        &self.labels
    }

    pub fn options(&self) -> BuildOptions {
        self.options
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn checksum_hex(&self) -> String {
        format!("{:016x}", self.checksum)
    }

    pub fn dim(&self) -> usize {
        self.set.dim()
    }

    pub fn count(&self) -> usize {
        self.set.count()
    }

    /// The exact ATL1 bytes for this atlas.
    pub fn to_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&self.bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file)).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses and verifies an ATL1 stream.
    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)
            .map_err(|e| Error::Format(format!("reading ATL1 header: {e}")))?;
        if line.last() == Some(&b'\n') {
            line.pop();
        }
        let mut header: Atl1Header = serde_json::from_slice(&line)
            .map_err(|e| Error::Format(format!("bad ATL1 header: {e}")))?;
        if header.magic != ATL1_MAGIC {
            return Err(Error::Format(format!(
                "magic mismatch: expected {ATL1_MAGIC}, found {:?}",
                header.magic
            )));
        }
        let stored = header
            .checksum
            .take()
            .ok_or_else(|| Error::Format("ATL1 header has no checksum".into()))?;
        if stored.algorithm != CHECKSUM_ALGORITHM {
            return Err(Error::Format(format!(
                "unsupported checksum algorithm {:?}",
                stored.algorithm
            )));
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body)
            .map_err(|e| Error::Format(format!("reading ATL1 body: {e}")))?;
        let computed = xxh64(&[&header_bytes(&header), b"\n", &body]);
        if format!("{computed:016x}") != stored.digest {
            return Err(Error::Format(format!(
                "checksum mismatch: header {}, content {computed:016x}",
                stored.digest
            )));
        }
        let set = read_emb1(&body[..])?;
        validate_contents(&set, &header.label_table)?;
        header.checksum = Some(stored);
        let mut bytes = header_bytes(&header);
        bytes.push(b'\n');
        bytes.extend_from_slice(&body);
        Ok(Atlas {
            set,
            labels: header.label_table,
            options: header.options,
            checksum: computed,
            bytes,
        })
    }

    fn prepare_query<'q>(&self, query: &'q [f32]) -> Result<std::borrow::Cow<'q, [f32]>> {
        if query.len() != self.dim() {
            return Err(Error::DimMismatch {
                got: query.len(),
                expected: self.dim(),
            });
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: 0 });
        }
        if self.options.normalize {
            let mut q = query.to_vec();
            if !normalize_row(&mut q) {
                return Err(Error::ZeroVector { row: 0 });
            }
            Ok(q.into())
        } else {
            Ok(query.into())
        }
    }

    /// The `k` nearest atlas rows by exact full scan, ordered by
    /// (distance, patch_id).
    pub fn knn(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
        if k < 1 || k > self.count() {
            return Err(Error::KOutOfRange { k, max: self.count() });
        }
        let q = self.prepare_query(query)?;
        Ok(self.scan(&q, k))
    }

    fn scan(&self, q: &[f32], k: usize) -> Vec<SearchHit> {
        let records = self.set.records();
        let mut scored: Vec<(f64, usize)> = self
            .set
            .rows()
            .enumerate()
            .map(|(i, row)| (squared_distance(q, row), i))
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0)
                .then_with(|| records[a.1].patch_id.cmp(&records[b.1].patch_id))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        scored
            .into_iter()
            .enumerate()
            .map(|(rank, (d2, i))| SearchHit {
                rank: rank + 1,
                patch_id: records[i].patch_id.clone(),
                label_id: records[i].label_id,
                distance: d2.sqrt(),
            })
            .collect()
    }

    /// [`Atlas::knn`] for every row of `queries`, in row order.
    pub fn knn_batch(&self, queries: &EmbeddingSet, k: usize) -> Result<Vec<Vec<SearchHit>>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        if k < 1 || k > self.count() {
            return Err(Error::KOutOfRange { k, max: self.count() });
        }
        if queries.dim() != self.dim() {
            return Err(Error::DimMismatch {
                got: queries.dim(),
                expected: self.dim(),
            });
        }
        queries
            .rows()
            .collect::<Vec<_>>()
            .into_par_iter()
            .enumerate()
            .map(|(row, q)| {
                let q = self.prepare_query(q).map_err(|e| match e {
                    Error::ZeroVector { .. } => Error::ZeroVector { row },
                    other => other,
                })?;
                Ok(self.scan(&q, k))
            })
            .collect()
    }
}

/// Reads only the header of an ATL1 file and recomputes its checksum over the
/// file's current bytes; returns (stored, computed) digests.
pub fn file_checksums(path: &Path) -> Result<(String, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("ATL1 file has no header line".into()))?;
    let mut header: Atl1Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("bad ATL1 header: {e}")))?;
    let stored = header
        .checksum
        .take()
        .map(|c| c.digest)
        .unwrap_or_default();
    let computed = xxh64(&[&header_bytes(&header), b"\n", &bytes[nl + 1..]]);
    Ok((stored, format!("{computed:016x}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::PatchRecord;

    fn set(rows: &[&[f32]], labels: &[u32]) -> EmbeddingSet {
        let recs = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| PatchRecord::from_ids(format!("p{i:03}"), "s", l))
            .collect();
        EmbeddingSet::from_rows(rows.iter().map(|r| r.to_vec()).collect(), recs).unwrap()
    }

    #[test]
    fn self_query_hits_itself() {
        let s = set(&[&[0.0, 0.0], &[3.0, 4.0], &[1.0, 1.0]], &[0, 1, 2]);
        let atlas = build_atlas(s, LabelTable::synthetic(0, 3), BuildOptions::default()).unwrap();
        let hits = atlas.knn(&[3.0, 4.0], 2).unwrap();
        assert_eq!(hits[0].patch_id, "p001");
        assert_eq!(hits[0].distance, 0.0);
        assert_eq!(hits[0].rank, 1);
        assert_eq!(hits[1].patch_id, "p002");
        assert!((hits[1].distance - 13f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_patch_id() {
        let s = set(&[&[1.0], &[-1.0], &[1.0]], &[0, 0, 1]);
        let atlas = build_atlas(s, LabelTable::synthetic(0, 2), BuildOptions::default()).unwrap();
        let ids: Vec<_> = atlas.knn(&[0.0], 3).unwrap().into_iter().map(|h| h.patch_id).collect();
        assert_eq!(ids, ["p000", "p001", "p002"]);
        let ids: Vec<_> = atlas.knn(&[0.0], 1).unwrap().into_iter().map(|h| h.patch_id).collect();
        assert_eq!(ids, ["p000"]);
    }

    #[test]
    fn k_and_dim_errors() {
        let s = set(&[&[0.0, 0.0], &[1.0, 0.0]], &[0, 1]);
        let atlas = build_atlas(s, LabelTable::synthetic(0, 2), BuildOptions::default()).unwrap();
        assert!(matches!(atlas.knn(&[0.0, 0.0], 3), Err(Error::KOutOfRange { k: 3, max: 2 })));
        assert!(matches!(atlas.knn(&[0.0, 0.0], 0), Err(Error::KOutOfRange { .. })));
        assert!(matches!(atlas.knn(&[0.0], 1), Err(Error::DimMismatch { got: 1, expected: 2 })));
        assert!(atlas.knn(&[f32::NAN, 0.0], 1).is_err());
    }

    #[test]
    fn build_errors() {
        let s = set(&[&[0.0], &[1.0]], &[0, 99]);
        let err = build_atlas(s, LabelTable::synthetic(0, 5), BuildOptions::default()).unwrap_err();
        assert!(matches!(err, Error::MissingLabel { label_id: 99, row: 1 }));
        let s = set(&[&[1.0, 0.0], &[0.0, 0.0]], &[0, 1]);
        let err = build_atlas(s, LabelTable::synthetic(0, 2), BuildOptions { normalize: true }).unwrap_err();
        assert_eq!(err.to_string(), "zero vector row 1");
        assert!(build_atlas(EmbeddingSet::empty(3), LabelTable::synthetic(0, 1), BuildOptions::default()).is_err());
    }

    #[test]
    fn normalize_scales_rows_and_queries() {
        let s = set(&[&[3.0, 4.0], &[0.0, 2.0]], &[0, 1]);
        let atlas = build_atlas(s, LabelTable::synthetic(0, 2), BuildOptions { normalize: true }).unwrap();
        assert_eq!(atlas.embeddings().row(0), &[0.6, 0.8]);
        let hits = atlas.knn(&[0.0, 10.0], 1).unwrap();
        assert_eq!(hits[0].patch_id, "p001");
        assert_eq!(hits[0].distance, 0.0);
    }

    #[test]
    fn atl1_round_trip_and_tamper_detection() {
        let s = set(&[&[0.5, 1.5], &[2.0, -1.0]], &[0, 1]);
        let atlas = build_atlas(s, LabelTable::synthetic(0, 2), BuildOptions { normalize: true }).unwrap();
        let bytes = atlas.to_bytes().to_vec();
        let back = Atlas::read(&bytes[..]).unwrap();
        assert_eq!(back.to_bytes(), &bytes[..]);
        assert_eq!(back.checksum(), atlas.checksum());
        assert_eq!(back.options(), atlas.options());
        assert_eq!(back.embeddings(), atlas.embeddings());

        let mut tampered = bytes.clone();
        let last = tampered.len() - 3;
        tampered[last] ^= 0x01;
        assert!(Atlas::read(&tampered[..]).unwrap_err().to_string().contains("checksum mismatch"));
    }

    #[test]
    fn batch_matches_single() {
        let s = set(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0]], &[0, 1, 1]);
        let atlas = build_atlas(s.clone(), LabelTable::synthetic(0, 2), BuildOptions::default()).unwrap();
        let batch = atlas.knn_batch(&s, 2).unwrap();
        for (i, hits) in batch.iter().enumerate() {
            assert_eq!(hits, &atlas.knn(s.row(i), 2).unwrap());
        }
        assert!(atlas.knn_batch(&EmbeddingSet::empty(2), 2).unwrap().is_empty());
        let single = s.select(&[1]);
        assert_eq!(atlas.knn_batch(&single, 3).unwrap()[0], atlas.knn(s.row(1), 3).unwrap());
    }
}
