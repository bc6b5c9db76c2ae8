//! Embedding containers and their on-disk / on-wire formats.
//!
//! EMB1 layout:
//!
//! ```text
//! {"magic":"EMB1","dim":D,"count":N,"dtype":"f32le"}\n
//! N·D little-endian f32 values, row-major
//! N lines of PatchRecord JSON
//! ```

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::PatchRecord;

pub const EMB1_MAGIC: &str = "EMB1";
pub const EMB1_DTYPE: &str = "f32le";

/// Dense row-major `count × dim` matrix with one [`PatchRecord`] per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    vectors: Vec<f32>,
    records: Vec<PatchRecord>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, vectors: Vec<f32>, records: Vec<PatchRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("embedding dim must be at least 1".into()));
        }
        if vectors.len() != dim * records.len() {
            return Err(Error::InvalidInput(format!(
                "{} values do not form {} rows of dim {dim}",
                vectors.len(),
                records.len()
            )));
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: pos / dim });
        }
        Ok(Self { dim, vectors, records })
    }

    pub fn from_rows(rows: Vec<Vec<f32>>, records: Vec<PatchRecord>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::InvalidInput(format!(
                "row {i} has {} values, expected {dim}",
                r.len()
            )));
        }
        Self::new(dim, rows.concat(), records)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim: dim.max(1),
            vectors: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.dim)
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }

    pub fn labels(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.label_id).collect()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut vectors = Vec::with_capacity(indices.len() * self.dim);
        let mut records = Vec::with_capacity(indices.len());
        for &i in indices {
            vectors.extend_from_slice(self.row(i));
            records.push(self.records[i].clone());
        }
        Self {
            dim: self.dim,
            vectors,
            records,
        }
    }

    /// Appends `other` below `self`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if other.count() > 0 && self.count() > 0 && other.dim != self.dim {
            return Err(Error::DimMismatch {
                got: other.dim,
                expected: self.dim,
            });
        }
        let dim = if self.count() == 0 { other.dim } else { self.dim };
        let mut vectors = self.vectors.clone();
        vectors.extend_from_slice(&other.vectors);
        let mut records = self.records.clone();
        records.extend_from_slice(&other.records);
        Ok(Self { dim, vectors, records })
    }

    pub fn into_parts(self) -> (usize, Vec<f32>, Vec<PatchRecord>) {
        (self.dim, self.vectors, self.records)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Emb1Header {
    magic: String,
    dim: usize,
    count: usize,
    dtype: String,
}

/// Serializes `set` in EMB1 layout.
pub fn write_emb1<W: Write>(set: &EmbeddingSet, mut w: W) -> std::io::Result<()> {
    let header = Emb1Header {
        magic: EMB1_MAGIC.into(),
        dim: set.dim,
        count: set.count(),
        dtype: EMB1_DTYPE.into(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in &set.vectors {
        w.write_all(&v.to_le_bytes())?;
    }
    for r in &set.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn emb1_bytes(set: &EmbeddingSet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(set.vectors.len() * 4 + 64 + set.count() * 128);
    write_emb1(set, &mut buf).expect("writing to memory cannot fail");
    buf
}

fn read_line_bytes<R: BufRead>(r: &mut R, what: &str) -> Result<Vec<u8>> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)
        .map_err(|e| Error::Format(format!("reading {what}: {e}")))?;
    if line.last() == Some(&b'\n') {
        line.pop();
    }
    Ok(line)
}

/// Parses an EMB1 stream, validating magic, payload length, finiteness and
/// metadata count.
pub fn read_emb1<R: BufRead>(mut r: R) -> Result<EmbeddingSet> {
    let line = read_line_bytes(&mut r, "EMB1 header")?;
    let header: Emb1Header = serde_json::from_slice(&line)
        .map_err(|e| Error::Format(format!("bad EMB1 header: {e}")))?;
    if header.magic != EMB1_MAGIC {
        return Err(Error::Format(format!(
            "magic mismatch: expected {EMB1_MAGIC}, found {:?}",
            header.magic
        )));
    }
    if header.dtype != EMB1_DTYPE {
        return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.dim == 0 {
        return Err(Error::Format("header dim must be at least 1".into()));
    }

    let (dim, count) = (header.dim, header.count);
    let mut vectors = Vec::with_capacity(dim.saturating_mul(count).min(1 << 26));
    let mut row_bytes = vec![0u8; dim * 4];
    for row in 0..count {
        r.read_exact(&mut row_bytes).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated payload at row {row}")),
            _ => Error::Format(format!("reading payload row {row}: {e}")),
        })?;
        for chunk in row_bytes.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::NonFinite { row });
            }
            vectors.push(v);
        }
    }

    let mut records = Vec::with_capacity(count.min(1 << 20));
    loop {
        let line = read_line_bytes(&mut r, "metadata")?;
        if line.is_empty() {
            // blank line or EOF; EOF keeps returning empty
            let mut probe = [0u8; 1];
            match r.read(&mut probe) {
                Ok(0) => break,
                Ok(_) => {
                    return Err(Error::Format(format!(
                        "metadata/count mismatch: blank line after record {}",
                        records.len()
                    )))
                }
                Err(e) => return Err(Error::Format(format!("reading metadata: {e}"))),
            }
        }
        let rec: PatchRecord = serde_json::from_slice(&line).map_err(|e| {
            Error::Format(format!("metadata record {}: {e}", records.len()))
        })?;
        records.push(rec);
    }
    if records.len() != count {
        return Err(Error::Format(format!(
            "metadata/count mismatch: header count {count}, found {} records",
            records.len()
        )));
    }
    EmbeddingSet::new(dim, vectors, records)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_emb1(BufReader::new(file)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_emb1(set, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `patch_id, slide_id, label_id, v1 … v_dim` rows. A leading header row
/// (non-integer `label_id` column) is skipped; row numbers count data rows from 1.
pub fn import_csv(path: &Path, dim: usize) -> Result<EmbeddingSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    import_csv_reader(file, dim)
}

pub fn import_csv_reader<R: Read>(reader: R, dim: usize) -> Result<EmbeddingSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut vectors = Vec::new();
    let mut records = Vec::new();
    let mut row_no = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("csv: {e}")))?;
        if i == 0 && rec.get(2).is_some_and(|f| f.parse::<u32>().is_err()) {
            continue;
        }
        row_no += 1;
        let values = rec.len().saturating_sub(3);
        if rec.len() < 3 || values != dim {
            return Err(Error::Format(format!("row {row_no}: expected {dim} values, found {values}")));
        }
        let label_id: u32 = rec[2]
            .parse()
            .map_err(|_| Error::Format(format!("row {row_no}: label_id {:?} is not an integer", &rec[2])))?;
        for field in rec.iter().skip(3) {
            let v: f32 = field
                .parse()
                .map_err(|_| Error::Format(format!("row {row_no}: {field:?} is not a number")))?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row: row_no - 1 });
            }
            vectors.push(v);
        }
        records.push(PatchRecord::from_ids(&rec[0], &rec[1], label_id));
    }
    EmbeddingSet::new(dim, vectors, records)
}

/// HTTP feature-extractor service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorEndpoint {
    pub base_url: String,
    /// Per-request timeout in seconds.
    pub timeout: u64,
    pub max_retries: u32,
    pub batch_size: usize,
    /// Batches allowed in flight at once.
    pub max_in_flight: usize,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
}

impl Default for ExtractorEndpoint {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8080".into(),
            timeout: 30,
            max_retries: 2,
            batch_size: 16,
            max_in_flight: 2,
            backoff_ms: 250,
        }
    }
}

impl ExtractorEndpoint {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.max_in_flight < 1 {
            return Err(Error::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

/// A patch image on disk and the record it belongs to.
#[derive(Debug, Clone)]
pub struct PatchImage {
    pub record: PatchRecord,
    pub path: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedImage {
    pub id: String,
    pub format: String,
    pub data_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub images: Vec<EmbedImage>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedVector {
    pub id: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dim: usize,
    pub embeddings: Vec<EmbedVector>,
}

fn image_format(path: &Path) -> String {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(ext) if ext == "tif" || ext == "tiff" => "tiff".into(),
        Some(ext) if ext == "jpg" || ext == "jpeg" => "jpeg".into(),
        _ => "png".into(),
    }
}

async fn post_batch(
    client: &reqwest::Client,
    ep: &ExtractorEndpoint,
    batch: &[PatchImage],
) -> Result<(usize, Vec<Vec<f32>>)> {
    let mut images = Vec::with_capacity(batch.len());
    for p in batch {
        let bytes = std::fs::read(&p.path).map_err(|e| Error::io(&p.path, e))?;
        images.push(EmbedImage {
            id: p.record.patch_id.clone(),
            format: image_format(&p.path),
            data_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
        });
    }
    let body = EmbedRequest { images };
    let url = format!("{}/embed", ep.base_url.trim_end_matches('/'));

    let mut attempt = 0u32;
    let response: EmbedResponse = loop {
        let outcome = client.post(&url).json(&body).send().await;
        let failure = match outcome {
            Ok(resp) if resp.status() == reqwest::StatusCode::OK => {
                break resp
                    .json()
                    .await
                    .map_err(|e| Error::Extractor(format!("bad response body: {e}")))?;
            }
            Ok(resp) => format!("HTTP status {}", resp.status().as_u16()),
            Err(e) => format!("request failed: {e}"),
        };
        if attempt >= ep.max_retries {
            return Err(Error::Extractor(format!(
                "{failure} after {} attempt(s)",
                attempt + 1
            )));
        }
        log::warn!("extractor {failure}; retrying");
        tokio::time::sleep(Duration::from_millis(ep.backoff_ms << attempt.min(16))).await;
        attempt += 1;
    };

    let mut by_id: HashMap<String, Vec<f32>> = HashMap::with_capacity(response.embeddings.len());
    for e in response.embeddings {
        if e.vector.len() != response.dim {
            return Err(Error::Extractor(format!(
                "embedding for id {} has {} values, response dim {}",
                e.id,
                e.vector.len(),
                response.dim
            )));
        }
        if e.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Extractor(format!("non-finite embedding for id {}", e.id)));
        }
        if by_id.insert(e.id.clone(), e.vector).is_some() {
            return Err(Error::Extractor(format!("duplicate embedding for id {}", e.id)));
        }
    }
    let mut rows = Vec::with_capacity(batch.len());
    for p in batch {
        let v = by_id
            .remove(&p.record.patch_id)
            .ok_or_else(|| Error::Extractor(format!("missing embedding for id {}", p.record.patch_id)))?;
        rows.push(v);
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(Error::Extractor(format!("unexpected embedding id {extra}")));
    }
    Ok((response.dim, rows))
}

/// Embeds patch images through the extractor service.
///
/// Images are posted in batches of `batch_size`, at most `max_in_flight`
/// concurrently; rows come back in input order whatever order the service
/// answers in.
pub async fn fetch_embeddings(patches: &[PatchImage], ep: &ExtractorEndpoint) -> Result<EmbeddingSet> {
    ep.validate()?;
    let mut seen = HashSet::new();
    for p in patches {
        if !seen.insert(p.record.patch_id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate patch id {}", p.record.patch_id)));
        }
    }
    if patches.is_empty() {
        return Err(Error::InvalidInput("no patches to embed".into()));
    }
    let client = reqwest::Client::builder()
        .timeout(Duration::from_secs(ep.timeout))
        .build()
        .map_err(|e| Error::Extractor(e.to_string()))?;

    let batches: Vec<(usize, Vec<Vec<f32>>)> = stream::iter(patches.chunks(ep.batch_size))
        .map(|batch| post_batch(&client, ep, batch))
        .buffered(ep.max_in_flight)
        .try_collect()
        .await?;

    let dim = batches[0].0;
    let mut vectors = Vec::with_capacity(dim * patches.len());
    for (i, (d, rows)) in batches.into_iter().enumerate() {
        if d != dim {
            return Err(Error::Extractor(format!(
                "dim inconsistency: batch 0 returned {dim}, batch {i} returned {d}"
            )));
        }
        for r in rows {
            vectors.extend_from_slice(&r);
        }
    }
    EmbeddingSet::new(dim, vectors, patches.iter().map(|p| p.record.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(n: usize) -> Vec<PatchRecord> {
        (0..n).map(|i| PatchRecord::from_ids(format!("p{i}"), "s", i as u32 % 3)).collect()
    }

    #[test]
    fn small_file_layout() {
        let set = EmbeddingSet::new(4, (0..8).map(|i| i as f32).collect(), recs(2)).unwrap();
        let bytes = emb1_bytes(&set);
        let header = br#"{"magic":"EMB1","dim":4,"count":2,"dtype":"f32le"}"#;
        assert!(bytes.starts_with(header));
        assert_eq!(bytes[header.len()], b'\n');
        let back = read_emb1(&bytes[..]).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.count(), 2);
        assert_eq!(back.dim(), 4);
    }

    #[test]
    fn truncated_payload_names_row() {
        let set = EmbeddingSet::new(4, vec![1.0; 8], recs(2)).unwrap();
        let bytes = emb1_bytes(&set);
        let header_len = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        let cut = &bytes[..header_len + 31];
        let err = read_emb1(cut).unwrap_err().to_string();
        assert_eq!(err, "truncated payload at row 1");
    }

    #[test]
    fn nan_names_row() {
        let set = EmbeddingSet::new(2, vec![0.0; 4], recs(2)).unwrap();
        let mut bytes = emb1_bytes(&set);
        let header_len = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        bytes[header_len..header_len + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(read_emb1(&bytes[..]).unwrap_err().to_string(), "non-finite value row 0");
    }

    #[test]
    fn magic_and_count_mismatch() {
        let bad = b"{\"magic\":\"EMB2\",\"dim\":1,\"count\":0,\"dtype\":\"f32le\"}\n";
        assert!(read_emb1(&bad[..]).unwrap_err().to_string().contains("magic mismatch"));
        let set = EmbeddingSet::new(1, vec![1.0, 2.0], recs(2)).unwrap();
        let mut bytes = emb1_bytes(&set);
        let last_line = bytes[..bytes.len() - 1].iter().rposition(|&b| b == b'\n').unwrap();
        bytes.truncate(last_line + 1);
        assert!(read_emb1(&bytes[..]).unwrap_err().to_string().contains("metadata/count mismatch"));
    }

    #[test]
    fn empty_set_round_trips() {
        let set = EmbeddingSet::empty(8);
        let back = read_emb1(&emb1_bytes(&set)[..]).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 8);
    }

    #[test]
    fn file_size_arithmetic() {
        let rec = PatchRecord::from_ids("only", "s", 0);
        let set = EmbeddingSet::new(1024, vec![0.5; 1024], vec![rec.clone()]).unwrap();
        let header = r#"{"magic":"EMB1","dim":1024,"count":1,"dtype":"f32le"}"#.len() + 1;
        let meta = serde_json::to_string(&rec).unwrap().len() + 1;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.emb");
        write_embeddings(&set, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, header + 4096 + meta);
    }

    #[test]
    fn constructor_rejects_non_finite() {
        let err = EmbeddingSet::new(2, vec![0.0, 0.0, f32::INFINITY, 0.0], recs(2)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 1 }));
        assert!(EmbeddingSet::new(2, vec![0.0; 3], recs(2)).is_err());
    }

    #[test]
    fn csv_import_cases() {
        let text = "patch_id,slide_id,label_id,a,b,c\np1,s1,0,1.5,2,3\np2,s1,1,1e-3,-2.5E2,0\n";
        let set = import_csv_reader(text.as_bytes(), 3).unwrap();
        assert_eq!(set.count(), 2);
        assert_eq!(set.row(1), &[0.001, -250.0, 0.0]);
        assert_eq!(set.records()[1].label_id, 1);

        let short = "p1,s1,0,1,2,3\np2,s1,1,1,2\n";
        let err = import_csv_reader(short.as_bytes(), 3).unwrap_err().to_string();
        assert!(err.starts_with("row 2: expected 3 values"), "{err}");

        let sci = import_csv_reader("p,s,0,1e2\n".as_bytes(), 1).unwrap();
        let dec = import_csv_reader("p,s,0,100.0\n".as_bytes(), 1).unwrap();
        assert_eq!(sci.vectors(), dec.vectors());
    }

    #[test]
    fn select_and_concat() {
        let set = EmbeddingSet::new(1, vec![0.0, 1.0, 2.0], recs(3)).unwrap();
        let sub = set.select(&[2, 0]);
        assert_eq!(sub.vectors(), &[2.0, 0.0]);
        let joined = sub.concat(&set).unwrap();
        assert_eq!(joined.count(), 5);
        let other = EmbeddingSet::new(2, vec![0.0; 2], recs(1)).unwrap();
        assert!(set.concat(&other).is_err());
    }
}
