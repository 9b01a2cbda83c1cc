//! Embedding files and plain-text matrices.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! "EMB1" | n: u32 | d: u32 | has_labels: u32 | n·d f32 row-major | n u32 labels if has_labels
//! ```
//!
//! The CSV form has a header `label,e0,...,e{d-1}`; the label field is empty
//! for unlabelled rows.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::episode::LabeledEmbeddingSet;
use crate::{Embeddings, Error, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub embeddings: Embeddings,
    pub labels: Option<Vec<u32>>,
}

impl EmbeddingFile {
    pub fn into_labeled(self) -> Result<LabeledEmbeddingSet> {
        let labels = self
            .labels
            .ok_or_else(|| Error::InvalidArgument("embedding file carries no labels".into()))?;
        LabeledEmbeddingSet::new(self.embeddings, labels)
    }
}

impl From<&LabeledEmbeddingSet> for EmbeddingFile {
    fn from(set: &LabeledEmbeddingSet) -> Self {
        Self { embeddings: set.embeddings.clone(), labels: Some(set.labels.clone()) }
    }
}

pub fn encode_binary(file: &EmbeddingFile) -> Result<Vec<u8>> {
    let (n, d) = file.embeddings.dim();
    let (n32, d32) = match (u32::try_from(n), u32::try_from(d)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Err(Error::InvalidArgument(format!("{n}x{d} does not fit the header"))),
    };
    if let Some(l) = &file.labels {
        if l.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} rows", l.len())));
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * (d + 1));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    out.extend_from_slice(&u32::from(file.labels.is_some()).to_le_bytes());
    for v in file.embeddings.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(l) = &file.labels {
        for v in l {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(offset as u64, "truncated header"))
}

pub fn decode_binary(bytes: &[u8]) -> Result<EmbeddingFile> {
    match bytes.get(..4) {
        Some(m) if m == MAGIC => {}
        Some(_) => return Err(Error::format(0, "bad magic")),
        None => return Err(Error::format(bytes.len() as u64, "truncated magic")),
    }
    let n = read_u32(bytes, 4)? as usize;
    let d = read_u32(bytes, 8)? as usize;
    let has_labels = match read_u32(bytes, 12)? {
        0 => false,
        1 => true,
        other => return Err(Error::format(12, format!("label flag must be 0 or 1, got {other}"))),
    };
    let cells = n
        .checked_mul(d)
        .ok_or_else(|| Error::format(4, "row count times dimension overflows"))?;
    let expected = cells
        .checked_add(if has_labels { n } else { 0 })
        .and_then(|w| w.checked_mul(4))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(4, "declared payload overflows"))?;
    if bytes.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: header declares {expected} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(expected as u64, "trailing bytes after payload"));
    }

    let mut values = Vec::with_capacity(cells);
    for (i, chunk) in bytes[HEADER_LEN..HEADER_LEN + 4 * cells].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::format((HEADER_LEN + 4 * i) as u64, "non-finite value"));
        }
        values.push(f64::from(v));
    }
    let labels = has_labels.then(|| {
        bytes[HEADER_LEN + 4 * cells..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    });
    let embeddings = Array2::from_shape_vec((n, d), values).expect("length checked");
    Ok(EmbeddingFile { embeddings, labels })
}

pub fn encode_csv(file: &EmbeddingFile) -> Result<Vec<u8>> {
    let d = file.embeddings.ncols();
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = std::iter::once("label".to_string()).chain((0..d).map(|j| format!("e{j}"))).collect();
    w.write_record(&header).map_err(csv_error)?;
    for (i, row) in file.embeddings.rows().into_iter().enumerate() {
        let label = file.labels.as_ref().map(|l| l[i].to_string()).unwrap_or_default();
        let fields = std::iter::once(label).chain(row.iter().map(|v| (*v as f32).to_string()));
        w.write_record(fields).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn csv_error(e: csv::Error) -> Error {
    let offset = e.position().map(|p| p.byte()).unwrap_or(0);
    Error::format(offset, e.to_string())
}

pub fn decode_csv(bytes: &[u8]) -> Result<EmbeddingFile> {
    let mut r = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(bytes);
    let header = r.headers().map_err(csv_error)?.clone();
    if header.get(0) != Some("label") {
        return Err(Error::format(0, "header must start with `label`"));
    }
    let d = header.len() - 1;
    for (j, h) in header.iter().skip(1).enumerate() {
        if h != format!("e{j}") {
            return Err(Error::format(0, format!("column {} should be e{j}, found `{h}`", j + 1)));
        }
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut labelled: Option<bool> = None;
    let mut n = 0;
    for record in r.records() {
        let record = record.map_err(csv_error)?;
        let offset = record.position().map(|p| p.byte()).unwrap_or(0);
        if record.len() != d + 1 {
            return Err(Error::format(
                offset,
                format!("row has {} fields, header implies {}", record.len(), d + 1),
            ));
        }
        let label = &record[0];
        let has = !label.is_empty();
        if *labelled.get_or_insert(has) != has {
            return Err(Error::format(offset, "rows mix labelled and unlabelled entries"));
        }
        if has {
            labels.push(
                label
                    .parse::<u32>()
                    .map_err(|_| Error::format(offset, format!("bad label `{label}`")))?,
            );
        }
        for field in record.iter().skip(1) {
            // values are stored at single precision, matching the binary form
            let v = f64::from(
                field
                    .parse::<f32>()
                    .map_err(|_| Error::format(offset, format!("bad number `{field}`")))?,
            );
            if !v.is_finite() {
                return Err(Error::format(offset, "non-finite value"));
            }
            values.push(v);
        }
        n += 1;
    }
    Ok(EmbeddingFile {
        embeddings: Array2::from_shape_vec((n, d), values).expect("row lengths checked"),
        labels: labelled.unwrap_or(false).then_some(labels),
    })
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads an embedding file; `.csv` paths are CSV, anything else binary.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if is_csv(path) {
        decode_csv(&bytes)
    } else {
        decode_binary(&bytes)
    }
}

pub fn write_embeddings(file: &EmbeddingFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_csv(path) { encode_csv(file)? } else { encode_binary(file)? };
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Whitespace- or comma-separated numbers, one matrix row per line. Blank
/// lines and lines starting with `#` are skipped.
pub fn parse_text_matrix(text: &str) -> Result<Array2<f64>> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len() as u64;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let mut count = 0;
        for tok in body.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
            let v: f64 = tok.parse().map_err(|_| Error::format(start, format!("bad number `{tok}`")))?;
            values.push(v);
            count += 1;
        }
        if *cols.get_or_insert(count) != count {
            return Err(Error::format(start, format!("row has {count} values, expected {}", cols.unwrap())));
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::format(0, "empty matrix"))?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("row lengths checked"))
}

/// A matrix from a text file, or from the rows of an embedding file when the
/// path ends in `.emb`/`.bin`.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if matches!(ext, "emb" | "bin") || is_csv(path) {
        return Ok(read_embeddings(path)?.embeddings);
    }
    parse_text_matrix(&fs::read_to_string(path)?)
}

/// A vector stored as a single row or a single column.
pub fn read_vector(path: impl AsRef<Path>) -> Result<Array1<f64>> {
    let m = read_matrix(path)?;
    match m.dim() {
        (1, _) | (_, 1) => Ok(Array1::from_iter(m.iter().copied())),
        (r, c) => Err(Error::Shape(format!("expected a vector, got {r}x{c}"))),
    }
}
