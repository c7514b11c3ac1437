//! File formats: prediction logs and membership manifests from real
//! pipelines, embedding files, and JSON/CSV reports.
//!
//! Input CSV files use a fixed dialect: UTF-8, LF line endings, comma
//! separator, no quoting. Sample ids match `[A-Za-z0-9_.-]+`.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attack::{FrequencyTable, OutOfRangePolicy};
use crate::error::{io_err, Error, Result};
use crate::eval::{EvalReport, HistogramExport, HistogramRow, PrCurve, PrPoint};
use crate::identity::{DatasetSpec, EvalMode, IdentityId};
use crate::nn::{ContactSheet, Embedding, EmbeddingSet};

pub const PREDICTION_HEADER: &str = "sample_id,predicted_identity";
pub const PREDICTION_HEADER_WITH_CONFIDENCE: &str = "sample_id,predicted_identity,confidence";
pub const MANIFEST_HEADER: &str = "identity_id,in_train,in_biased_subset,samples";
pub const CONTACT_SHEET_HEADER: &str = "query_id,rank,neighbor_id,distance_sq";
pub const EMBEDDING_MAGIC: &[u8; 4] = b"GLKE";
pub const EMBEDDING_VERSION: u32 = 1;

fn is_valid_sample_id(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

/// Strict line splitter: yields `(line_number, fields)` for every data line
/// after validating the header.
struct CsvLines<'a> {
    path: &'a Path,
    lines: std::iter::Enumerate<std::str::Split<'a, char>>,
}

impl<'a> CsvLines<'a> {
    fn open(path: &'a Path, text: &'a str, accept: &[&str]) -> Result<(Self, &'a str)> {
        let mut lines = text.split('\n').enumerate();
        let header = match lines.next() {
            Some((_, h)) if !h.is_empty() => h,
            _ => {
                return Err(Error::Header {
                    path: path.to_path_buf(),
                    expected: accept.join("` or `"),
                    found: String::new(),
                })
            }
        };
        if header.ends_with('\r') {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "CRLF line endings are not supported; use LF".into(),
            });
        }
        if !accept.contains(&header) {
            return Err(Error::Header {
                path: path.to_path_buf(),
                expected: accept.join("` or `"),
                found: header.to_string(),
            });
        }
        Ok((CsvLines { path, lines }, header))
    }

    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: line as u64 + 1,
            message: message.into(),
        }
    }
}

impl<'a> Iterator for CsvLines<'a> {
    type Item = Result<(usize, Vec<&'a str>)>;

    fn next(&mut self) -> Option<Self::Item> {
        let (i, line) = self.lines.next()?;
        if line.is_empty() {
            // Only a trailing newline may produce an empty line.
            if self.lines.clone().all(|(_, l)| l.is_empty()) {
                return None;
            }
            return Some(Err(self.err(i, "empty line")));
        }
        if line.ends_with('\r') {
            return Some(Err(self.err(i, "CRLF line endings are not supported")));
        }
        Some(Ok((i, line.split(',').collect())))
    }
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    String::from_utf8(bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: format!("not valid UTF-8: {e}"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: String,
    /// Raw predicted id; may lie outside the identity space of the attack.
    pub predicted_identity: u64,
    /// Parsed for forward compatibility; the attack only counts.
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionLog {
    pub source: PathBuf,
    pub rows: Vec<PredictionRow>,
}

impl PredictionLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Frequency table with `K` equal to the log length.
    pub fn to_table(&self, yf_size: usize, policy: OutOfRangePolicy) -> Result<FrequencyTable> {
        let mut table = FrequencyTable::zeros(yf_size);
        for row in &self.rows {
            let id = u32::try_from(row.predicted_identity).unwrap_or(u32::MAX);
            if row.predicted_identity >= yf_size as u64 && policy == OutOfRangePolicy::Strict {
                return Err(Error::Format {
                    path: self.source.clone(),
                    message: format!(
                        "sample `{}` predicts identity {} outside [0, {yf_size})",
                        row.sample_id, row.predicted_identity
                    ),
                });
            }
            table.record(IdentityId(id), OutOfRangePolicy::Discard)?;
        }
        Ok(table)
    }

    /// `(sample_id, predicted identity)` pairs, e.g. as nearest-neighbour
    /// queries.
    pub fn queries(&self) -> Result<Vec<(String, IdentityId)>> {
        self.rows
            .iter()
            .map(|r| {
                u32::try_from(r.predicted_identity)
                    .map(|id| (r.sample_id.clone(), IdentityId(id)))
                    .map_err(|_| Error::UnknownIdentity(IdentityId(u32::MAX)))
            })
            .collect()
    }
}

/// Reads `sample_id,predicted_identity[,confidence]` rows in file order.
pub fn load_prediction_log(path: impl AsRef<Path>) -> Result<PredictionLog> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let (lines, header) = CsvLines::open(
        path,
        &text,
        &[PREDICTION_HEADER, PREDICTION_HEADER_WITH_CONFIDENCE],
    )?;
    let width = if header == PREDICTION_HEADER { 2 } else { 3 };
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let path_buf = path.to_path_buf();
    let err = |line: usize, message: String| Error::Parse {
        path: path_buf.clone(),
        line: line as u64 + 1,
        message,
    };
    for item in lines {
        let (i, fields) = item?;
        if fields.len() != width {
            return Err(err(
                i,
                format!("expected {width} fields, found {}", fields.len()),
            ));
        }
        let sample_id = fields[0];
        if !is_valid_sample_id(sample_id) {
            return Err(err(i, format!("invalid sample id `{sample_id}`")));
        }
        if !seen.insert(sample_id) {
            return Err(err(i, format!("duplicate sample id `{sample_id}`")));
        }
        let predicted_identity = fields[1].parse::<u64>().map_err(|_| {
            err(
                i,
                format!("identity `{}` is not a non-negative integer", fields[1]),
            )
        })?;
        let confidence = match fields.get(2) {
            None => None,
            Some(&"") => None,
            Some(c) => {
                let v = c
                    .parse::<f64>()
                    .map_err(|_| err(i, format!("confidence `{c}` is not a number")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(err(i, format!("confidence {v} is outside [0, 1]")));
                }
                Some(v)
            }
        };
        rows.push(PredictionRow {
            sample_id: sample_id.to_string(),
            predicted_identity,
            confidence,
        });
    }
    Ok(PredictionLog {
        source: path.to_path_buf(),
        rows,
    })
}

/// Ground truth from `identity_id,in_train,in_biased_subset,samples` rows.
///
/// Ids must cover `[0, n)` exactly once. `samples` is only checked for
/// training identities; biased identities must be training identities.
pub fn load_membership_manifest(path: impl AsRef<Path>) -> Result<DatasetSpec> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let (lines, _) = CsvLines::open(path, &text, &[MANIFEST_HEADER])?;
    let path_buf = path.to_path_buf();
    let err = |line: usize, message: String| Error::Parse {
        path: path_buf.clone(),
        line: line as u64 + 1,
        message,
    };
    let flag = |i: usize, name: &str, v: &str| match v {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(err(i, format!("{name} flag must be 0 or 1, found `{v}`"))),
    };

    let mut seen: Vec<bool> = Vec::new();
    let mut members = Vec::new();
    let mut biased = Vec::new();
    for item in lines {
        let (i, fields) = item?;
        if fields.len() != 4 {
            return Err(err(i, format!("expected 4 fields, found {}", fields.len())));
        }
        let id: u32 = fields[0].parse().map_err(|_| {
            err(
                i,
                format!("identity `{}` is not a non-negative integer", fields[0]),
            )
        })?;
        let in_train = flag(i, "in_train", fields[1])?;
        let in_biased = flag(i, "in_biased_subset", fields[2])?;
        let samples: u64 = fields[3]
            .parse()
            .map_err(|_| err(i, format!("sample count `{}` is not an integer", fields[3])))?;
        let idx = id as usize;
        if idx >= seen.len() {
            seen.resize(idx + 1, false);
        }
        if seen[idx] {
            return Err(err(i, format!("duplicate identity {id}")));
        }
        seen[idx] = true;
        if in_biased && !in_train {
            return Err(err(
                i,
                format!("identity {id} is in the biased subset but not in the training set"),
            ));
        }
        if in_train {
            if samples == 0 {
                return Err(err(i, format!("training identity {id} has 0 samples")));
            }
            members.push((IdentityId(id), samples));
        }
        if in_biased {
            biased.push(IdentityId(id));
        }
    }
    if let Some(gap) = seen.iter().position(|s| !s) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("identity ids must be dense; {gap} is missing"),
        });
    }
    let biased = (!biased.is_empty()).then_some(biased);
    DatasetSpec::new(seen.len(), members, biased).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes a manifest for `spec`; non-members get a sample count of 0.
pub fn write_membership_manifest(spec: &DatasetSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for i in 0..spec.yf_size() as u32 {
        let id = IdentityId(i);
        out.push_str(&format!(
            "{i},{},{},{}\n",
            u8::from(spec.is_member(id)),
            u8::from(spec.is_biased(id)),
            spec.samples_of(id).unwrap_or(0)
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Loads an embedding file, choosing the binary or CSV reader from the
/// leading magic bytes.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let mut head = [0u8; 4];
    let n = File::open(path)
        .and_then(|mut f| f.read(&mut head))
        .map_err(io_err(path))?;
    if n == 4 && &head == EMBEDDING_MAGIC {
        load_embeddings_bin(path)
    } else {
        load_embeddings_csv(path)
    }
}

/// `sample_id,identity_id,v0,...,v{dim-1}`.
pub fn load_embeddings_csv(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let header = text.split('\n').next().unwrap_or_default();
    let cols: Vec<&str> = header.split(',').collect();
    let dim = cols.len().saturating_sub(2);
    let expected = std::iter::once("sample_id".to_string())
        .chain(std::iter::once("identity_id".to_string()))
        .chain((0..dim).map(|i| format!("v{i}")))
        .collect::<Vec<_>>()
        .join(",");
    if dim == 0 || header != expected {
        return Err(Error::Header {
            path: path.to_path_buf(),
            expected: "sample_id,identity_id,v0,v1,...".into(),
            found: header.to_string(),
        });
    }
    let (lines, _) = CsvLines::open(path, &text, &[expected.as_str()])?;
    let mut entries = Vec::new();
    for item in lines {
        let (i, fields) = item?;
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message,
        };
        if fields.len() != dim + 2 {
            return Err(err(format!(
                "expected {} fields, found {}",
                dim + 2,
                fields.len()
            )));
        }
        if !is_valid_sample_id(fields[0]) {
            return Err(err(format!("invalid sample id `{}`", fields[0])));
        }
        let identity: u32 = fields[1].parse().map_err(|_| {
            err(format!(
                "identity `{}` is not a non-negative integer",
                fields[1]
            ))
        })?;
        let vector = fields[2..]
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(format!("component `{v}` is not a finite number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        entries.push(Embedding {
            sample_id: fields[0].to_string(),
            identity: IdentityId(identity),
            vector,
        });
    }
    EmbeddingSet::new(dim, entries).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_embeddings_csv(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("sample_id,identity_id");
    for i in 0..set.dim() {
        out.push_str(&format!(",v{i}"));
    }
    out.push('\n');
    for e in set.entries() {
        out.push_str(&e.sample_id);
        out.push_str(&format!(",{}", e.identity));
        for v in &e.vector {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Binary layout (little-endian): `GLKE`, u32 version, u32 dim, u32 count,
/// then per entry u32 id length, id bytes, u32 identity, `dim` f32 values.
pub fn load_embeddings_bin(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let fmt = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let truncated = |e: io::Error| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            fmt("truncated embedding file".into())
        } else {
            Error::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(fmt(format!("bad magic bytes {magic:?}")));
    }
    let version = read_u32(&mut r).map_err(truncated)?;
    if version != EMBEDDING_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let dim = read_u32(&mut r).map_err(truncated)? as usize;
    let count = read_u32(&mut r).map_err(truncated)? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    let mut buf = vec![0u8; dim * 4];
    for n in 0..count {
        let len = read_u32(&mut r).map_err(truncated)? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(truncated)?;
        let sample_id =
            String::from_utf8(id).map_err(|_| fmt(format!("entry {n}: sample id is not UTF-8")))?;
        if !is_valid_sample_id(&sample_id) {
            return Err(fmt(format!("entry {n}: invalid sample id `{sample_id}`")));
        }
        let identity = IdentityId(read_u32(&mut r).map_err(truncated)?);
        r.read_exact(&mut buf).map_err(truncated)?;
        let vector = buf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        entries.push(Embedding {
            sample_id,
            identity,
            vector,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io_err(path))? != 0 {
        return Err(fmt("trailing bytes after the last entry".into()));
    }
    EmbeddingSet::new(dim, entries).map_err(|e| fmt(e.to_string()))
}

/// Components are stored as f32.
pub fn write_embeddings_bin(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let dim = u32::try_from(set.dim()).expect("dimension fits in u32");
    let count = u32::try_from(set.len()).expect("entry count fits in u32");
    let mut write = || -> io::Result<()> {
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        for e in set.entries() {
            w.write_all(&(e.sample_id.len() as u32).to_le_bytes())?;
            w.write_all(e.sample_id.as_bytes())?;
            w.write_all(&e.identity.0.to_le_bytes())?;
            for &v in &e.vector {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()
    };
    write().map_err(io_err(path))
}

pub fn write_contact_sheet_csv(sheet: &ContactSheet, out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(out);
    for row in &sheet.rows {
        w.serialize(row)?;
    }
    if sheet.rows.is_empty() {
        w.write_record(CONTACT_SHEET_HEADER.split(','))?;
    }
    w.flush().map_err(io_err("<contact sheet>"))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown format `{other}` (expected json or csv)")),
        }
    }
}

/// A report that can be written and re-read as JSON or CSV without loss.
pub trait Report: Serialize + DeserializeOwned {
    fn write_csv<W: Write>(&self, out: W) -> Result<()>;
    fn read_csv<R: Read>(input: R) -> Result<Self>;

    fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n").map_err(io_err("<json>"))?;
        Ok(())
    }

    fn read_json<R: Read>(input: R) -> Result<Self> {
        Ok(serde_json::from_reader(input)?)
    }
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err("<csv>"))?;
    Ok(())
}

fn read_rows<R: Read, T: DeserializeOwned>(input: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(Error::from)
}

impl Report for Vec<EvalReport> {
    fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, self)
    }

    fn read_csv<R: Read>(input: R) -> Result<Self> {
        read_rows(input)
    }
}

impl Report for EvalReport {
    fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, [self])
    }

    fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rows: Vec<EvalReport> = read_rows(input)?;
        if rows.len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "expected exactly one report row, found {}",
                rows.len()
            )));
        }
        Ok(rows.remove(0))
    }
}

#[derive(Serialize, Deserialize)]
struct PrCsvRow {
    threshold: u64,
    precision: Option<f64>,
    recall: f64,
    f1: f64,
    positives_count: usize,
    true_positives: usize,
    baseline: f64,
    truth_size: usize,
    yf_size: usize,
    mode: EvalMode,
}

impl Report for PrCurve {
    fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(
            out,
            self.points.iter().map(|p| PrCsvRow {
                threshold: p.threshold,
                precision: p.precision,
                recall: p.recall,
                f1: p.f1,
                positives_count: p.positives_count,
                true_positives: p.true_positives,
                baseline: self.baseline,
                truth_size: self.truth_size,
                yf_size: self.yf_size,
                mode: self.mode,
            }),
        )
    }

    fn read_csv<R: Read>(input: R) -> Result<Self> {
        let rows: Vec<PrCsvRow> = read_rows(input)?;
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidConfig("precision-recall CSV has no rows".into()))?;
        Ok(PrCurve {
            mode: first.mode,
            baseline: first.baseline,
            truth_size: first.truth_size,
            yf_size: first.yf_size,
            points: rows
                .iter()
                .map(|r| PrPoint {
                    threshold: r.threshold,
                    precision: r.precision,
                    recall: r.recall,
                    f1: r.f1,
                    positives_count: r.positives_count,
                    true_positives: r.true_positives,
                })
                .collect(),
        })
    }
}

impl Report for HistogramExport {
    fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        if self.rows.is_empty() {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["identity_id", "count", "is_member", "is_biased"])?;
            w.flush().map_err(io_err("<csv>"))?;
            return Ok(());
        }
        write_rows(out, &self.rows)
    }

    fn read_csv<R: Read>(input: R) -> Result<Self> {
        Ok(HistogramExport {
            rows: read_rows::<_, HistogramRow>(input)?,
        })
    }
}

pub fn write_report<T: Report>(
    report: &T,
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    match format {
        ReportFormat::Json => report.write_json(&mut w)?,
        ReportFormat::Csv => report.write_csv(&mut w)?,
    }
    w.flush().map_err(io_err(path))
}

pub fn read_report<T: Report>(path: impl AsRef<Path>, format: ReportFormat) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let r = BufReader::new(file);
    match format {
        ReportFormat::Json => T::read_json(r),
        ReportFormat::Csv => T::read_csv(r),
    }
}
