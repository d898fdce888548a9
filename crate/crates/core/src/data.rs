//! Benchmark CSV loading, chronological splits, standardization and windowing.
//!
//! Files follow the ETT layout: a header row, a `date` column first (kept as
//! text, never parsed numerically) and one numeric column per variable.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviations below this are replaced by 1 and the column is flagged.
pub const MIN_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_end: usize,
    pub val_end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns whose train-split std was clamped.
    pub clamped: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const ETT: SplitRatios = SplitRatios {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    pub const DEFAULT: SplitRatios = SplitRatios {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };

    /// ETT-family names (`ETTh1`, `ETTm2`, ...) get 0.6/0.2/0.2, everything else 0.7/0.1/0.2.
    pub fn for_dataset(name: &str) -> SplitRatios {
        if name.to_ascii_uppercase().starts_with("ETT") {
            Self::ETT
        } else {
            Self::DEFAULT
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    columns: Vec<String>,
    timestamps: Vec<String>,
    /// Row-major `[rows, vars]`.
    values: Vec<f64>,
    vars: usize,
    split: Option<Split>,
    norm: Option<NormStats>,
}

impl Dataset {
    pub fn from_values(name: &str, columns: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let vars = columns.len();
        if vars == 0 || !values.len().is_multiple_of(vars) {
            return Err(Error::invalid(format!(
                "{} values do not fill rows of {vars} variables",
                values.len()
            )));
        }
        Ok(Dataset {
            name: name.to_string(),
            columns,
            timestamps: Vec::new(),
            values,
            vars,
            split: None,
            norm: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.vars
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.vars..(t + 1) * self.vars]
    }

    /// Rows `[start, end)` as one contiguous row-major slice.
    pub fn rows_slice(&self, start: usize, end: usize) -> &[f64] {
        &self.values[start * self.vars..end * self.vars]
    }

    pub fn split(&self) -> Option<Split> {
        self.split
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    /// Sets split boundaries and standardizes every column with train-split statistics.
    pub fn split_and_normalize(mut self, ratios: SplitRatios) -> Result<Self> {
        let sum = ratios.train + ratios.val + ratios.test;
        if (sum - 1.0).abs() > 1e-9 || ratios.train <= 0.0 || ratios.val <= 0.0 || ratios.test <= 0.0
        {
            return Err(Error::invalid(format!("split ratios {ratios:?} must be positive and sum to 1")));
        }
        let n = self.rows();
        let train_end = (n as f64 * ratios.train).floor() as usize;
        let test_len = (n as f64 * ratios.test).floor() as usize;
        let val_end = n - test_len;
        if !(0 < train_end && train_end < val_end && val_end < n) {
            return Err(Error::invalid(format!(
                "{n} rows give an empty split (train_end={train_end}, val_end={val_end})"
            )));
        }
        let v = self.vars;
        let mut mean = vec![0.0; v];
        let mut std = vec![0.0; v];
        let mut clamped = vec![false; v];
        for c in 0..v {
            let col = (0..train_end).map(|t| self.values[t * v + c]);
            let m = col.clone().sum::<f64>() / train_end as f64;
            let var = col.map(|x| (x - m) * (x - m)).sum::<f64>() / train_end as f64;
            mean[c] = m;
            std[c] = var.sqrt();
            if std[c] < MIN_STD {
                warn!(
                    "{}: column '{}' is constant on the train split; std clamped to 1",
                    self.name, self.columns[c]
                );
                std[c] = 1.0;
                clamped[c] = true;
            }
        }
        for row in self.values.chunks_exact_mut(v) {
            for c in 0..v {
                row[c] = (row[c] - mean[c]) / std[c];
            }
        }
        self.split = Some(Split { train_end, val_end });
        self.norm = Some(NormStats { mean, std, clamped });
        Ok(self)
    }

    /// Maps standardized values of row-major `[.., vars]` data back to raw units.
    pub fn denormalize(&self, normalized: &[f64]) -> Vec<f64> {
        match &self.norm {
            None => normalized.to_vec(),
            Some(ns) => normalized
                .iter()
                .enumerate()
                .map(|(i, &x)| x * ns.std[i % self.vars] + ns.mean[i % self.vars])
                .collect(),
        }
    }

    /// Row range a part may read. Validation and test spans start `seq_len`
    /// rows early so their first lookback reaches into the previous part.
    pub fn part_span(&self, part: Part, seq_len: usize) -> Result<(usize, usize)> {
        let split = self
            .split
            .ok_or_else(|| Error::invalid("dataset has not been split"))?;
        Ok(match part {
            Part::Train => (0, split.train_end),
            Part::Val => (split.train_end.saturating_sub(seq_len), split.val_end),
            Part::Test => (split.val_end.saturating_sub(seq_len), self.rows()),
        })
    }

    pub fn part_rows(&self, part: Part) -> Result<&[f64]> {
        let (start, end) = self.part_span(part, 0)?;
        Ok(self.rows_slice(start, end))
    }

    /// Lookback/target windows fully contained in `part`, in chronological order.
    pub fn windows(&self, part: Part, seq_len: usize, horizon: usize, stride: usize) -> Result<Windows<'_>> {
        if seq_len == 0 || horizon == 0 || stride == 0 {
            return Err(Error::invalid("seq_len, horizon and stride must be >= 1"));
        }
        let (start, end) = self.part_span(part, seq_len)?;
        let mut t_stars = Vec::new();
        if end - start < seq_len + horizon {
            warn!(
                "{}: {part:?} part spans {} rows, fewer than {seq_len}+{horizon}; no windows",
                self.name,
                end - start
            );
        } else {
            t_stars.extend((start + seq_len..=end - horizon).step_by(stride));
        }
        Ok(Windows {
            ds: self,
            t_stars,
            seq_len,
            horizon,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["date".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for t in 0..self.rows() {
            let mut rec = vec![self.timestamps.get(t).cloned().unwrap_or_else(|| t.to_string())];
            rec.extend(self.row(t).iter().map(|x| format!("{x:?}")));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads an ETT-layout CSV. Rejects missing, non-numeric and non-finite cells
/// and files with fewer than `min_rows` data rows.
pub fn load_csv(path: &Path, min_rows: usize) -> Result<Dataset> {
    let data_err = |message: String| Error::Data {
        path: path.to_path_buf(),
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 2 {
        return Err(data_err("expected a date column and at least one variable".into()));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != header.len() {
            return Err(data_err(format!(
                "row {row}: {} fields, expected {}",
                rec.len(),
                header.len()
            )));
        }
        timestamps.push(rec[0].to_string());
        for (c, cell) in rec.iter().skip(1).enumerate() {
            let cell = cell.trim();
            let col = &columns[c];
            if cell.is_empty() {
                return Err(data_err(format!("row {row}, column '{col}': missing value")));
            }
            let x: f64 = cell
                .parse()
                .map_err(|_| data_err(format!("row {row}, column '{col}': non-numeric cell '{cell}'")))?;
            if !x.is_finite() {
                return Err(data_err(format!("row {row}, column '{col}': non-finite cell '{cell}'")));
            }
            values.push(x);
        }
    }
    let rows = timestamps.len();
    if rows < min_rows {
        return Err(data_err(format!("{rows} rows, need at least {min_rows}")));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut ds = Dataset::from_values(&name, columns, values)?;
    ds.timestamps = timestamps;
    Ok(ds)
}

/// A single lookback/target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    /// `[L, V]`
    pub x: Tensor,
    /// `[H, V]`
    pub y: Tensor,
    /// Absolute row of the first forecast step.
    pub t_star: usize,
}

/// Index view over the windows of one part; values are borrowed from the dataset.
#[derive(Debug, Clone)]
pub struct Windows<'a> {
    ds: &'a Dataset,
    t_stars: Vec<usize>,
    seq_len: usize,
    horizon: usize,
}

impl<'a> Windows<'a> {
    pub fn len(&self) -> usize {
        self.t_stars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_stars.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn vars(&self) -> usize {
        self.ds.vars()
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.ds
    }

    pub fn t_stars(&self) -> &[usize] {
        &self.t_stars
    }

    /// `[L, V]` row-major lookback of window `i`.
    pub fn lookback(&self, i: usize) -> &'a [f64] {
        let t = self.t_stars[i];
        self.ds.rows_slice(t - self.seq_len, t)
    }

    /// `[H, V]` row-major target of window `i`.
    pub fn target(&self, i: usize) -> &'a [f64] {
        let t = self.t_stars[i];
        self.ds.rows_slice(t, t + self.horizon)
    }

    pub fn pair(&self, i: usize) -> WindowPair {
        let v = self.vars();
        WindowPair {
            x: Tensor::new(&[self.seq_len, v], self.lookback(i).to_vec()).expect("lookback shape"),
            y: Tensor::new(&[self.horizon, v], self.target(i).to_vec()).expect("target shape"),
            t_star: self.t_stars[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowPair> + '_ {
        (0..self.len()).map(|i| self.pair(i))
    }

    /// Stacks windows `idx` into `[B, L, V]` inputs and `[B, H, V]` targets.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let v = self.vars();
        let mut x = Vec::with_capacity(idx.len() * self.seq_len * v);
        let mut y = Vec::with_capacity(idx.len() * self.horizon * v);
        for &i in idx {
            x.extend_from_slice(self.lookback(i));
            y.extend_from_slice(self.target(i));
        }
        (
            Tensor::new(&[idx.len(), self.seq_len, v], x).expect("batch shape"),
            Tensor::new(&[idx.len(), self.horizon, v], y).expect("batch shape"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn toy(rows: usize, vars: usize) -> Dataset {
        let cols = (0..vars).map(|c| format!("v{c}")).collect();
        let values = (0..rows * vars)
            .map(|i| ((i * 37 % 101) as f64).sin() * 3.0 + (i / vars) as f64 * 0.01)
            .collect();
        Dataset::from_values("toy", cols, values).unwrap()
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_toy_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("date,a,b\n");
        for t in 0..10 {
            body += &format!("2016-07-01 {t:02}:00:00,{},{}\n", t as f64 * 0.5, -(t as f64));
        }
        let ds = load_csv(&write(&dir, "toy.csv", &body), 4).unwrap();
        assert_eq!((ds.rows(), ds.vars()), (10, 2));
        assert_eq!(ds.row(3), &[1.5, -3.0]);
        assert_eq!(ds.name(), "toy");
        assert!(load_csv(&write(&dir, "short.csv", &body), 11).is_err());
    }

    #[test]
    fn rejects_bad_cells() {
        let dir = tempfile::tempdir().unwrap();
        let nan = write(&dir, "nan.csv", "date,a,b\nx,1,2\ny,NaN,3\n");
        let msg = load_csv(&nan, 1).unwrap_err().to_string();
        assert!(msg.contains("row 1") && msg.contains("'a'"), "{msg}");
        let missing = write(&dir, "miss.csv", "date,a,b\nx,1,\n");
        assert!(load_csv(&missing, 1).unwrap_err().to_string().contains("missing"));
        let text = write(&dir, "text.csv", "date,a\nx,abc\n");
        assert!(load_csv(&text, 1).unwrap_err().to_string().contains("non-numeric"));
    }

    #[test]
    fn standardizes_on_train_rows() {
        let ds = toy(200, 3).split_and_normalize(SplitRatios::ETT).unwrap();
        let split = ds.split().unwrap();
        assert_eq!(split, Split { train_end: 120, val_end: 160 });
        for c in 0..3 {
            let col: Vec<f64> = (0..split.train_end).map(|t| ds.row(t)[c]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let s = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() < 1e-9);
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_column_is_clamped_and_flagged() {
        let values = (0..50).flat_map(|t| [t as f64, 4.0]).collect();
        let ds = Dataset::from_values("c", vec!["a".into(), "k".into()], values)
            .unwrap()
            .split_and_normalize(SplitRatios::DEFAULT)
            .unwrap();
        let ns = ds.norm().unwrap();
        assert_eq!(ns.clamped, vec![false, true]);
        assert_eq!(ns.std[1], 1.0);
    }

    #[test]
    fn split_errors() {
        assert!(toy(3, 1).split_and_normalize(SplitRatios::ETT).is_err());
        let bad = SplitRatios { train: 0.5, val: 0.2, test: 0.2 };
        assert!(toy(100, 1).split_and_normalize(bad).is_err());
    }

    #[test]
    fn window_counts_and_boundaries() {
        let ds = toy(100, 2).split_and_normalize(SplitRatios::DEFAULT).unwrap();
        // train spans [0, 70)
        let (l, h) = (30, 40);
        assert_eq!(ds.windows(Part::Train, l, h, 1).unwrap().len(), 1);
        assert_eq!(ds.windows(Part::Train, 30, 35, 1).unwrap().len(), 6);
        assert!(ds.windows(Part::Train, 40, 40, 1).unwrap().is_empty());

        let test = ds.windows(Part::Test, 8, 4, 1).unwrap();
        let split = ds.split().unwrap();
        assert_eq!(test.t_stars()[0], split.val_end);
        let first = test.pair(0);
        assert_eq!(first.x.data(), ds.rows_slice(split.val_end - 8, split.val_end));
        assert_eq!(*test.t_stars().last().unwrap(), ds.rows() - 4);
    }

    #[test]
    fn denormalize_round_trip() {
        let raw = toy(80, 3);
        let ds = raw.clone().split_and_normalize(SplitRatios::ETT).unwrap();
        let back = ds.denormalize(ds.values());
        for (a, b) in back.iter().zip(raw.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn windows_stay_in_bounds(l in 1usize..40, h in 1usize..40, stride in 1usize..7, part in 0usize..3) {
            let ds = toy(150, 2).split_and_normalize(SplitRatios::DEFAULT).unwrap();
            let part = [Part::Train, Part::Val, Part::Test][part];
            let (start, end) = ds.part_span(part, l).unwrap();
            let w = ds.windows(part, l, h, stride).unwrap();
            let mut prev = None;
            for &t in w.t_stars() {
                prop_assert!(t >= start + l && t + h <= end && end <= ds.rows());
                if let Some(p) = prev { prop_assert!(t > p); }
                prev = Some(t);
            }
        }
    }
}
