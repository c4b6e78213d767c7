use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    /// Header `label,f0,f1,...`, one sample per line. Values are read verbatim.
    Csv,
    /// IDX images file; the labels file is found by replacing `images` with
    /// `labels` in the file name. Unsigned-byte pixels are divided by 255.
    Idx,
}

impl FromStr for DataFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "idx" => Ok(DataFormat::Idx),
            _ => Err(Error::Parameter(format!(
                "unknown data format `{s}` (csv, idx)"
            ))),
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::Csv => "csv",
            DataFormat::Idx => "idx",
        })
    }
}

/// Loads a labelled dataset. With `classes = None` the class count is
/// `max label + 1`; otherwise labels at or above `classes` are a data error.
pub fn load_dataset(path: &Path, format: DataFormat, classes: Option<usize>) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (inputs, labels) = match format {
        DataFormat::Csv => parse_csv(&bytes)?,
        DataFormat::Idx => {
            let img = parse_idx(&bytes)?;
            let label_path = idx_labels_path(path)?;
            let label_bytes = fs::read(&label_path).map_err(|e| Error::io(&label_path, e))?;
            parse_idx_pair(img, &label_bytes)?
        }
    };
    let max = labels.iter().copied().max().unwrap_or(0);
    let num_classes = match classes {
        Some(c) => {
            if max >= c {
                return Err(Error::Data(format!("label {max} >= {c} classes")));
            }
            c
        }
        None => max + 1,
    };
    if labels.len() < num_classes {
        return Err(Error::Data(format!(
            "{} samples cannot cover {num_classes} classes",
            labels.len()
        )));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(inputs, labels, num_classes, name)
}

fn parse_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

fn parse_csv(bytes: &[u8]) -> Result<(Array2<f64>, Vec<usize>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let header = reader
        .headers()
        .map_err(|e| parse_err(0, e.to_string()))?
        .clone();
    if header.get(0).map(str::trim) != Some("label") || header.len() < 2 {
        return Err(parse_err(0, "header must be `label,f0,f1,...`"));
    }
    let dim = header.len() - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let offset = e.position().map_or(0, |p| p.byte());
            parse_err(offset, e.to_string())
        })?;
        let offset = record.position().map_or(0, |p| p.byte());
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(offset, format!("bad label `{}`", &record[0])))?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(offset, format!("bad value `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(offset, format!("non-finite value `{field}`")));
            }
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(parse_err(bytes.len() as u64, "no data rows"));
    }
    let inputs = Array2::from_shape_vec((labels.len(), dim), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((inputs, labels))
}

fn idx_labels_path(path: &Path) -> Result<PathBuf> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    if !name.contains("images") {
        return Err(Error::Data(format!(
            "cannot locate labels for `{}`: file name has no `images` part",
            path.display()
        )));
    }
    Ok(path.with_file_name(name.replacen("images", "labels", 1)))
}

struct Idx {
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, "bad IDX magic"));
    }
    let (width, scale) = match bytes[2] {
        0x08 => (1usize, 255.0),
        0x0D => (4, 1.0),
        0x0E => (8, 1.0),
        t => return Err(parse_err(2, format!("unsupported IDX type code 0x{t:02X}"))),
    };
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(parse_err(3, "IDX with zero dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(parse_err(bytes.len() as u64, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + count * width;
    if bytes.len() != expected {
        return Err(parse_err(
            bytes.len().min(expected) as u64,
            format!(
                "IDX body has {} bytes, expected {}",
                bytes.len() - header,
                count * width
            ),
        ));
    }
    let body = &bytes[header..];
    let values = match width {
        1 => body.iter().map(|&b| f64::from(b) / scale).collect(),
        4 => body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_be_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        _ => body
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    Ok(Idx { dims, values })
}

fn parse_idx_pair(img: Idx, labels: &[u8]) -> Result<(Array2<f64>, Vec<usize>)> {
    if labels.len() < 8 || labels[0] != 0 || labels[1] != 0 || labels[2] != 0x08 || labels[3] != 1 {
        return Err(parse_err(0, "bad IDX labels magic"));
    }
    let n_labels = u32::from_be_bytes([labels[4], labels[5], labels[6], labels[7]]) as usize;
    if labels.len() != 8 + n_labels {
        return Err(parse_err(labels.len() as u64, "truncated IDX labels"));
    }
    let n = img.dims[0];
    if n != n_labels {
        return Err(Error::Data(format!("{n} images but {n_labels} labels")));
    }
    let dim = img.dims[1..].iter().product::<usize>().max(1);
    let inputs =
        Array2::from_shape_vec((n, dim), img.values).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((inputs, labels[8..].iter().map(|&b| b as usize).collect()))
}

/// Writes `ds` as `label,f0,f1,...` with shortest round-trip float formatting.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("label");
    for j in 0..ds.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (row, y) in ds.inputs.rows().into_iter().zip(&ds.labels) {
        out.push_str(&y.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
