//! On-disk dataset format.
//!
//! ```text
//! line 1 : JSON header {format, format_version, kind, grid, prior,
//!          shift_prior, sigma, n, seed, ssl_pairs}
//! then   : n records of little-endian f64
//!          [param0, param1, shift, values[n_samples], aug[n_samples]?]
//! ```
//! `aug` is present exactly when `ssl_pairs` is true.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Dataset, DatasetSpec, Record, SignalParams, TimeSeries};

pub const DATASET_FORMAT: &str = "symflow-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    format_version: u32,
    #[serde(flatten)]
    spec: DatasetSpec,
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated float block".into()))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn write_dataset<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        format_version: DATASET_VERSION,
        spec: DatasetSpec {
            n: ds.records.len(),
            ..ds.spec.clone()
        },
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for r in &ds.records {
        if r.data_aug.is_some() != ds.spec.ssl_pairs {
            return Err(Error::Format("augmented view presence differs from header".into()));
        }
        let p = r.params.values();
        write_f64s(w, &[p[0], p[1], r.shift])?;
        write_f64s(w, &r.data.values)?;
        if let Some(aug) = &r.data_aug {
            write_f64s(w, &aug.values)?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: &mut R) -> Result<Dataset> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: DatasetHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Format(format!("dataset header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Format(format!("not a dataset file: `{}`", header.format)));
    }
    if header.format_version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {}",
            header.format_version
        )));
    }
    let spec = header.spec;
    spec.grid.validate()?;
    let n_samples = spec.grid.n_samples;
    let mut records = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let head = read_f64s(r, 3)?;
        let params = SignalParams::new(spec.kind, [head[0], head[1]])?;
        let data = TimeSeries::new(spec.grid, read_f64s(r, n_samples)?, spec.sigma)?;
        let data_aug = if spec.ssl_pairs {
            Some(TimeSeries::new(spec.grid, read_f64s(r, n_samples)?, spec.sigma)?)
        } else {
            None
        };
        records.push(Record {
            params,
            shift: head[2],
            data,
            data_aug,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(Dataset { spec, records })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{generate_dataset, SignalKind};

    #[test]
    fn single_clean_record_round_trips_bit_exactly() {
        let mut spec = DatasetSpec::defaults(SignalKind::Sho, 1, 3, true);
        spec.sigma = 0.0;
        let ds = generate_dataset(&spec).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &ds).unwrap();
        let back = read_dataset(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ds);
        let expected_len = 3 + 2 * spec.grid.n_samples;
        let header_len = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        assert_eq!(bytes.len() - header_len, expected_len * 8);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let spec = DatasetSpec::defaults(SignalKind::Sg, 2, 3, false);
        let ds = generate_dataset(&spec).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &ds).unwrap();
        bytes.pop();
        assert!(matches!(read_dataset(&mut bytes.as_slice()), Err(Error::Format(_))));
    }
}
