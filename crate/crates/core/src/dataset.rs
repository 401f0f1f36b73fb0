//! Windowed sensor datasets: CSV ingestion/emission, a seeded Gaussian-mixture
//! generator, and train/test splitting.
//!
//! CSV schema: header `label,s0,...,s{p-1}`; labels are written 1-based
//! (`1..=k`) and held 0-based in memory.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Row-major `n x p` feature matrix.
    features: Vec<f64>,
    /// 0-based class indices.
    labels: Vec<usize>,
    width: usize,
    class_count: usize,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut features = Vec::with_capacity(rows.len() * width);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Dataset(format!(
                    "row {i} has {} values, expected {width}",
                    row.len()
                )));
            }
            features.extend_from_slice(row);
        }
        Self::from_flat(features, labels, width, class_count)
    }

    pub fn from_flat(features: Vec<f64>, labels: Vec<usize>, width: usize, class_count: usize) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::Dataset(format!("class count must be >= 2, got {class_count}")));
        }
        if features.len() != labels.len() * width {
            return Err(Error::Dataset(format!(
                "{} feature values do not form {} rows of width {width}",
                features.len(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::Dataset(format!(
                "label {} at row {i} outside 1..={class_count}",
                l + 1
            )));
        }
        if let Some(v) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!("non-finite feature value {v}")));
        }
        Ok(Dataset {
            features,
            labels,
            width,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sensor count `p`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    /// Borrowed rows, in order.
    pub fn rows(&self) -> Vec<&[f64]> {
        (0..self.len()).map(|i| self.row(i)).collect()
    }

    pub fn rows_at(&self, indices: &[usize]) -> Vec<&[f64]> {
        indices.iter().map(|&i| self.row(i)).collect()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            width: self.width,
            class_count: self.class_count,
        }
    }

    /// First `n` rows (or all rows if shorter).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Seeded shuffle split; the first part holds `round(fraction·n)` rows.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("split fraction {fraction} outside [0, 1]")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = (fraction * self.len() as f64).round() as usize;
        Ok((self.subset(&idx[..cut]), self.subset(&idx[cut..])))
    }

    /// All rows except those of class `class` (0-based). Class count is kept.
    pub fn without_class(&self, class: usize) -> Result<Dataset> {
        if class >= self.class_count {
            return Err(Error::Dataset(format!(
                "class {} outside 1..={}",
                class + 1,
                self.class_count
            )));
        }
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] != class).collect();
        Ok(self.subset(&idx))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.width).map(|j| format!("s{j}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut record = Vec::with_capacity(self.width + 1);
            record.push((self.labels[i] + 1).to_string());
            record.extend(self.row(i).iter().map(|v| format!("{v}")));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Reads the CSV schema. When `class_count` is `None` it is taken to be
    /// the largest label seen.
    pub fn read_csv<R: Read>(reader: R, class_count: Option<usize>) -> Result<Dataset> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = r.headers()?.clone();
        if header.get(0) != Some("label") {
            return Err(Error::Dataset("first CSV column must be `label`".into()));
        }
        for (j, name) in header.iter().skip(1).enumerate() {
            if name != format!("s{j}") {
                return Err(Error::Dataset(format!("column {} must be named s{j}, found `{name}`", j + 1)));
            }
        }
        let width = header.len() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record?;
            let row = line + 2;
            let label: usize = record[0]
                .trim()
                .parse()
                .map_err(|_| Error::Dataset(format!("line {row}: bad label `{}`", &record[0])))?;
            if label == 0 {
                return Err(Error::Dataset(format!("line {row}: labels are 1-based")));
            }
            labels.push(label - 1);
            for (j, field) in record.iter().skip(1).enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Dataset(format!("line {row}, column s{j}: bad value `{field}`")))?;
                features.push(v);
            }
        }
        let k = class_count.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
        Self::from_flat(features, labels, width, k)
    }

    pub fn load_csv(path: impl AsRef<Path>, class_count: Option<usize>) -> Result<Dataset> {
        Self::read_csv(std::fs::File::open(path)?, class_count)
    }
}

/// Parameters for the synthetic sensor-window generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub sensors: usize,
    pub instances: usize,
    pub seed: u64,
    /// Standard deviation of the component centres; larger is easier.
    pub separation: f64,
    /// Gaussian components per class.
    pub components: usize,
    /// Per-sample noise standard deviation.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            sensors: 16,
            instances: 2000,
            seed: 7,
            separation: 1.5,
            components: 2,
            noise: 1.0,
        }
    }
}

/// Per-class Gaussian mixture. Labels cycle through the classes so every class
/// gets `n/k` (±1) rows; row order is then shuffled.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::InvalidArgument("synthetic data needs at least 2 classes".into()));
    }
    if spec.sensors == 0 || spec.components == 0 {
        return Err(Error::InvalidArgument("sensors and components must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centre = Normal::new(0.0, spec.separation.max(0.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let centres: Vec<Vec<Vec<f64>>> = (0..spec.classes)
        .map(|_| {
            (0..spec.components)
                .map(|_| (0..spec.sensors).map(|_| centre.sample(&mut rng)).collect())
                .collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..spec.instances).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(spec.instances * spec.sensors);
    for &label in &labels {
        let component = rng.random_range(0..spec.components);
        for &c in &centres[label][component] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(c + spec.noise * z);
        }
    }
    Dataset::from_flat(features, labels, spec.sensors, spec.classes)
}
