//! File outputs: 16-bit binary PGM images, CSV tables and provenance sidecars.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifies the run that produced an artifact. Replaying the same triple
/// reproduces the artifact bitwise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// `git describe` of the source tree, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            source: None,
        }
    }

    pub fn with_source(mut self, source: Option<String>) -> Self {
        self.source = source;
        self
    }

    fn comment(&self) -> String {
        let mut s = format!(
            "freqlens config_hash={} seed={} version={}",
            self.config_hash, self.seed, self.version
        );
        if let Some(src) = &self.source {
            s.push_str(&format!(" source={src}"));
        }
        s
    }
}

/// Min-max scales `values` into `[0, 1]`; a constant input maps to zeros.
pub fn minmax(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Written negated so NaN bounds also take this branch.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

pub const PGM_MAX: u16 = u16::MAX;

/// Encodes a `height x width` map with values in `[0, 1]` as a P5 graymap
/// with 16-bit big-endian samples. Out-of-range values are clamped.
pub fn encode_pgm(width: usize, height: usize, values: &[f64], prov: &Provenance) -> Result<Vec<u8>> {
    if values.len() != width * height || width == 0 || height == 0 {
        return Err(Error::shape("pgm image", &[height, width], &[values.len()]));
    }
    let mut out = format!("P5\n# {}\n{width} {height}\n{PGM_MAX}\n", prov.comment()).into_bytes();
    out.reserve(values.len() * 2);
    for &v in values {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        let s = (v * PGM_MAX as f64).round() as u16;
        out.extend_from_slice(&s.to_be_bytes());
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64], prov: &Provenance) -> Result<()> {
    write_file(path, &encode_pgm(width, height, values, prov)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub max: u16,
    pub comments: Vec<String>,
    pub samples: Vec<u16>,
}

/// Parses the graymaps written by [`encode_pgm`] (any P5 file with maxval
/// above 255).
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let bad = |message: &str| Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut pos = 0;
    let mut comments = vec![];
    let mut tokens = vec![];
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(bad("truncated header"));
        }
        if bytes[pos] == b'#' {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map_or(bytes.len(), |e| pos + e);
            comments.push(String::from_utf8_lossy(&bytes[pos + 1..end]).trim().to_string());
            pos = end;
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;
    if tokens[0] != "P5" {
        return Err(bad("not a binary graymap (magic P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, max) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if max <= 255 || max > 65535 {
        return Err(bad("expected a 16-bit maxval"));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != width * height * 2 {
        return Err(bad(&format!(
            "expected {} sample bytes, found {}",
            width * height * 2,
            body.len()
        )));
    }
    Ok(Pgm {
        width,
        height,
        max: max as u16,
        comments,
        samples: body.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
    })
}

/// A CSV table with a header row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: vec![],
        }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(Into::into).collect();
        debug_assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    /// `rows x cols` numeric matrix with optional row and column labels.
    pub fn from_matrix(labels: &[String], values: &[f64]) -> Self {
        let n = labels.len();
        let mut t = Table::new(std::iter::once("layer".to_string()).chain(labels.iter().cloned()));
        for (i, label) in labels.iter().enumerate() {
            t.push(std::iter::once(label.clone()).chain(values[i * n..(i + 1) * n].iter().map(|&v| fmt_f64(v))));
        }
        t
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(vec![]);
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
        let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        let mut rows = vec![];
        for rec in r.records() {
            rows.push(rec.map_err(csv_err)?.iter().map(String::from).collect());
        }
        Ok(Table { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v}")
    }
}

/// Path of the provenance sidecar of `path` (`report.csv` -> `report.csv.meta`).
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes `table` to `path` and its provenance to the `.meta` sidecar.
pub fn write_csv(path: &Path, table: &Table, prov: &Provenance) -> Result<()> {
    write_file(path, &table.to_csv()?)?;
    write_meta(path, prov)
}

pub fn write_meta(path: &Path, prov: &Provenance) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(prov).map_err(|e| Error::Io(e.into()))?;
    json.push(b'\n');
    write_file(&sidecar_path(path), &json)
}

pub fn read_meta(path: &Path) -> Result<Provenance> {
    let bytes = fs::read(sidecar_path(path))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: sidecar_path(path),
        message: e.to_string(),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}
