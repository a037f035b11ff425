//! Dataset files: one JSON record per line (`x`, `y`, optional
//! `outlier_mask`), plus a sidecar `<file>.header.json` describing the set.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CorruptionSpec, Dataset, ImageBox};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const FORMAT: &str = "robust-gum-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub samples: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Landmark groups as half-open `[start, end)` coordinate ranges.
    pub groups: Vec<[usize; 2]>,
    #[serde(rename = "box")]
    pub bounds: Option<ImageBox>,
    pub has_outlier_mask: bool,
    pub seed: Option<u64>,
    pub corruption: Option<CorruptionSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    x: Vec<f64>,
    y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    outlier_mask: Option<Vec<bool>>,
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".header.json");
    PathBuf::from(s)
}

pub fn save_dataset(
    data: &Dataset,
    path: impl AsRef<Path>,
    seed: Option<u64>,
    corruption: Option<&CorruptionSpec>,
) -> Result<()> {
    let path = path.as_ref();
    let header = DatasetHeader {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        samples: data.len(),
        input_dim: data.input_dim(),
        output_dim: data.output_dim(),
        groups: data.groups.iter().map(|r| [r.start, r.end]).collect(),
        bounds: data.bounds,
        has_outlier_mask: data.outlier_mask.is_some(),
        seed,
        corruption: corruption.cloned(),
    };
    let mut h = BufWriter::new(File::create(header_path(path))?);
    serde_json::to_writer_pretty(&mut h, &header)?;
    h.write_all(b"\n")?;
    h.flush()?;

    let mut out = BufWriter::new(File::create(path)?);
    let g = data.groups.len();
    for n in 0..data.len() {
        let rec = Record {
            x: data.inputs.row(n).to_vec(),
            y: data.targets.row(n).to_vec(),
            outlier_mask: data.outlier_mask.as_ref().map(|m| m[n * g..(n + 1) * g].to_vec()),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Dataset, DatasetHeader)> {
    let path = path.as_ref();
    let header: DatasetHeader = serde_json::from_reader(BufReader::new(File::open(header_path(path))?))
        .map_err(|e| Error::Format(format!("{}: {e}", header_path(path).display())))?;
    if header.format != FORMAT || header.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset format {} v{}", header.format, header.version)));
    }
    let mut xs = Vec::with_capacity(header.samples * header.input_dim);
    let mut ys = Vec::with_capacity(header.samples * header.output_dim);
    let mut mask = header.has_outlier_mask.then(Vec::new);
    let mut count = 0;
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if rec.x.len() != header.input_dim || rec.y.len() != header.output_dim {
            return Err(Error::Format(format!("{} line {}: wrong vector length", path.display(), i + 1)));
        }
        xs.extend(rec.x);
        ys.extend(rec.y);
        match (&mut mask, rec.outlier_mask) {
            (Some(m), Some(rm)) if rm.len() == header.groups.len() => m.extend(rm),
            (None, None) => {}
            _ => return Err(Error::Format(format!("{} line {}: outlier mask mismatch", path.display(), i + 1))),
        }
        count += 1;
    }
    if count != header.samples {
        return Err(Error::Format(format!("header announces {} samples, file holds {count}", header.samples)));
    }
    let groups: Vec<Range<usize>> = header.groups.iter().map(|g| g[0]..g[1]).collect();
    let mut ds = Dataset {
        inputs: Matrix::from_vec(count, header.input_dim, xs)?,
        targets: Matrix::from_vec(count, header.output_dim, ys)?,
        groups,
        outlier_mask: mask,
        bounds: header.bounds,
    };
    ds.bounds = header.bounds;
    ds.validate()?;
    Ok((ds, header))
}
