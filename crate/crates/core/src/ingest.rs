//! Dataset ingestion: labeled image directories and prediction CSVs.
//!
//! Image layout: `<root>/<pos|neg>/<subject>_<slice>.{pgm,png}`.
//! Prediction CSV: header `id,p1,...,pK,label`, one row per sample.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Label, LabeledSample, Payload, SampleKey};
use crate::error::{Error, Result};
use crate::image::{read_pgm, read_png};
use crate::scalar::Scalar;
use crate::weighted_avg::PredictionMatrix;

/// Splits `s01_07` into `("s01", 7)`. The subject part may contain underscores.
pub fn parse_stem(stem: &str) -> Option<(&str, u32)> {
    let (subject, slice) = stem.rsplit_once('_')?;
    if subject.is_empty() {
        return None;
    }
    Some((subject, slice.parse().ok()?))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

/// Loads every slice under `root`, scaled to `[0, 1]` and resized to
/// `side` x `side`. Samples are ordered by label directory then file name.
pub fn load_image_dir<T: Scalar>(root: &Path, side: usize) -> Result<Vec<LabeledSample<T>>> {
    if side == 0 {
        return Err(Error::invalid("input side must be positive"));
    }
    let mut samples = Vec::new();
    let mut seen = BTreeSet::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let label = match dir.file_name().and_then(|n| n.to_str()) {
            Some("pos") => Label::Positive,
            Some("neg") => Label::Negative,
            _ => return Err(Error::data(&dir, None, "unknown label directory (expected pos or neg)")),
        };
        for file in sorted_entries(&dir)? {
            let ext = file.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            let img = match ext.as_deref() {
                Some("pgm") => read_pgm::<T>(&file)?,
                Some("png") => read_png::<T>(&file)?,
                _ => return Err(Error::data(&file, None, "unsupported file (expected .pgm or .png)")),
            };
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let (subject, slice) = parse_stem(stem)
                .ok_or_else(|| Error::data(&file, None, "file name must be <subject>_<slice>"))?;
            if !seen.insert((subject.to_owned(), slice)) {
                return Err(Error::data(&file, None, format!("duplicate slice {slice} for subject {subject}")));
            }
            let img = img.resize_bilinear(side, side)?;
            samples.push(LabeledSample {
                subject_id: subject.to_owned(),
                slice_index: slice,
                payload: Payload::Image(img),
                label,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::data(root, None, "no samples found"));
    }
    Ok(samples)
}

/// Rows of a prediction CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable<T> {
    pub ids: Vec<String>,
    pub preds: PredictionMatrix<T>,
    pub labels: Vec<Label>,
}

impl<T: Scalar> PredictionTable<T> {
    /// One grouping key per row, treating each id as its own subject.
    pub fn keys(&self) -> Vec<SampleKey> {
        self.ids
            .iter()
            .zip(&self.labels)
            .map(|(id, &label)| SampleKey {
                subject_id: id.clone(),
                label,
            })
            .collect()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            preds: self.preds.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

pub fn load_predictions_csv<T: Scalar>(path: &Path) -> Result<PredictionTable<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_predictions_csv(file, path)
}

pub fn read_predictions_csv<T: Scalar, R: std::io::Read>(reader: R, path: &Path) -> Result<PredictionTable<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::data(path, Some(1), e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "id" || cols[cols.len() - 1] != "label" {
        return Err(Error::data(path, Some(1), "header must be id,p1,...,pK,label"));
    }
    let k = cols.len() - 2;
    for (j, name) in cols[1..=k].iter().enumerate() {
        if *name != format!("p{}", j + 1) {
            return Err(Error::data(path, Some(1), format!("expected column p{}, found {name:?}", j + 1)));
        }
    }

    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize);
            Error::data(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize);
        if rec.len() != k + 2 {
            return Err(Error::data(path, line, format!("expected {} fields, found {}", k + 2, rec.len())));
        }
        ids.push(rec[0].trim().to_owned());
        for field in rec.iter().skip(1).take(k) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::data(path, line, format!("not a number: {field:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::data(path, line, format!("probability {v} outside [0, 1]")));
            }
            rows.push(T::lit(v));
        }
        let label = match rec[k + 1].trim() {
            "0" => Label::Negative,
            "1" => Label::Positive,
            other => return Err(Error::data(path, line, format!("label must be 0 or 1, found {other:?}"))),
        };
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::data(path, None, "no rows"));
    }
    let preds = PredictionMatrix::new(labels.len(), k, rows)?;
    Ok(PredictionTable { ids, preds, labels })
}

/// Writes the `id,p1..pK,label` schema.
pub fn write_predictions_csv<T: Scalar>(path: &Path, table: &PredictionTable<T>) -> Result<()> {
    let mut out = String::from("id");
    for j in 1..=table.preds.k() {
        out.push_str(&format!(",p{j}"));
    }
    out.push_str(",label\n");
    for (i, id) in table.ids.iter().enumerate() {
        out.push_str(id);
        for &p in table.preds.row(i) {
            out.push_str(&format!(",{}", p.as_f64()));
        }
        out.push_str(&format!(",{}\n", table.labels[i].value()));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
