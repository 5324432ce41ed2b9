//! CSV interchange.
//!
//! Probabilities: header `p0,...,p{M-1}`, one softmax vector per row.
//! Labeled features: header `f0,...,f{d-1},label`.
//! Unlabeled features (OOD pools): header `f0,...,f{d-1}`.
//! Scores: header `score`.
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! `load(save(x)) == x` bit for bit.

use std::fs::File;
use std::path::Path;

use crate::data::{FeatureVector, LabeledSample, ProbVector};
use crate::error::{Error, Result};

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

fn csv_err(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::parse(
            path,
            line,
            format!("ragged row: expected {expected_len} fields, found {len}"),
        ),
        other => Error::parse(path, line, format!("{other:?}")),
    }
}

fn headers(path: &Path, rdr: &mut csv::Reader<File>) -> Result<Vec<String>> {
    let h = rdr.headers().map_err(|e| csv_err(path, e))?;
    if h.is_empty() || (h.len() == 1 && h[0].is_empty()) {
        return Err(Error::parse(path, 1, "missing header row"));
    }
    Ok(h.iter().map(|s| s.trim().to_string()).collect())
}

fn expect_indexed(path: &Path, names: &[String], prefix: char) -> Result<()> {
    for (i, name) in names.iter().enumerate() {
        if *name != format!("{prefix}{i}") {
            return Err(Error::parse(
                path,
                1,
                format!("header column {i} is `{name}`, expected `{prefix}{i}`"),
            ));
        }
    }
    Ok(())
}

fn parse_f64(path: &Path, line: u64, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::parse(path, line, format!("`{field}`: {e}")))
}

/// Parses every data row into floats, reporting 1-based line numbers.
fn rows(path: &Path, rdr: &mut csv::Reader<File>) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let values = record
            .iter()
            .map(|f| parse_f64(path, line, f))
            .collect::<Result<Vec<_>>>()?;
        out.push((line, values));
    }
    Ok(out)
}

fn write_rows<I, R>(path: &Path, header: Vec<String>, rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut wtr = writer(path)?;
    wtr.write_record(&header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        let row: Vec<String> = row.into_iter().collect();
        wtr.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

fn indexed_header(prefix: char, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn load_probs(path: impl AsRef<Path>) -> Result<Vec<ProbVector>> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let names = headers(path, &mut rdr)?;
    expect_indexed(path, &names, 'p')?;
    rows(path, &mut rdr)?
        .into_iter()
        .map(|(line, values)| {
            ProbVector::new(values).map_err(|e| Error::parse(path, line, e.to_string()))
        })
        .collect()
}

pub fn save_probs(path: impl AsRef<Path>, items: &[ProbVector]) -> Result<()> {
    let path = path.as_ref();
    let m = items.first().map_or(2, ProbVector::n_classes);
    if let Some(p) = items.iter().find(|p| p.n_classes() != m) {
        return Err(Error::Dimension {
            expected: m,
            found: p.n_classes(),
        });
    }
    write_rows(
        path,
        indexed_header('p', m),
        items.iter().map(|p| p.as_slice().iter().map(f64::to_string)),
    )
}

pub fn load_labeled(path: impl AsRef<Path>) -> Result<Vec<LabeledSample>> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let names = headers(path, &mut rdr)?;
    let (label, features) = names
        .split_last()
        .ok_or_else(|| Error::parse(path, 1, "missing header row"))?;
    if label != "label" {
        return Err(Error::parse(path, 1, "last header column must be `label`"));
    }
    expect_indexed(path, features, 'f')?;
    rows(path, &mut rdr)?
        .into_iter()
        .map(|(line, mut values)| {
            let raw = values.pop().unwrap_or(f64::NAN);
            if !(raw >= 0.0 && raw.fract() == 0.0 && raw < u32::MAX as f64) {
                return Err(Error::parse(path, line, format!("invalid label `{raw}`")));
            }
            let features =
                FeatureVector::new(values).map_err(|e| Error::parse(path, line, e.to_string()))?;
            Ok(LabeledSample {
                features,
                label: raw as usize,
            })
        })
        .collect()
}

pub fn save_labeled(path: impl AsRef<Path>, items: &[LabeledSample]) -> Result<()> {
    let path = path.as_ref();
    let d = items.first().map_or(0, |s| s.features.dim());
    let mut header = indexed_header('f', d);
    header.push("label".into());
    write_rows(
        path,
        header,
        items.iter().map(|s| {
            s.features
                .as_slice()
                .iter()
                .map(f64::to_string)
                .chain(std::iter::once(s.label.to_string()))
        }),
    )
}

/// Loads feature rows. A trailing `label` column, if present, is dropped.
pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<FeatureVector>> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let mut names = headers(path, &mut rdr)?;
    let labeled = names.last().is_some_and(|n| n == "label");
    if labeled {
        names.pop();
    }
    expect_indexed(path, &names, 'f')?;
    rows(path, &mut rdr)?
        .into_iter()
        .map(|(line, mut values)| {
            if labeled {
                values.pop();
            }
            FeatureVector::new(values).map_err(|e| Error::parse(path, line, e.to_string()))
        })
        .collect()
}

pub fn save_features(path: impl AsRef<Path>, items: &[FeatureVector]) -> Result<()> {
    let d = items.first().map_or(0, FeatureVector::dim);
    write_rows(
        path.as_ref(),
        indexed_header('f', d),
        items.iter().map(|f| f.as_slice().iter().map(f64::to_string)),
    )
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let names = headers(path, &mut rdr)?;
    if names != ["score"] {
        return Err(Error::parse(path, 1, "expected a single `score` column"));
    }
    rows(path, &mut rdr)?
        .into_iter()
        .map(|(line, v)| {
            let s = v[0];
            if s.is_finite() {
                Ok(s)
            } else {
                Err(Error::parse(path, line, format!("non-finite score {s}")))
            }
        })
        .collect()
}

pub fn save_scores(path: impl AsRef<Path>, scores: &[f64]) -> Result<()> {
    write_rows(
        path.as_ref(),
        vec!["score".into()],
        scores.iter().map(|s| std::iter::once(s.to_string())),
    )
}

/// First header cell of a CSV file, used to tell the schemas apart.
pub fn sniff_header(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    Ok(headers(path, &mut rdr)?.remove(0))
}
