//! Result files and the tables derived from them.
//!
//! Every table is rebuilt from the result files on disk, so any number in a
//! table can be traced back to one file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gatecal::container::write_atomic;
use gatecal::tta::{Method, RunReport};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

pub const FORMAT_VERSION: u32 = 1;

/// Bytes per parameter in the memory column (f64).
const BYTES_PER_PARAM: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: String,
    pub value: f64,
}

/// Wall-clock figures, kept apart so that reruns differ only here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub adapt_seconds: f64,
    pub total_seconds: f64,
    pub finished_unix_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub format_version: u32,
    pub sweep: Option<SweepPoint>,
    pub report: RunReport,
    pub timing: TimingRecord,
}

impl ResultFile {
    pub fn new(report: RunReport, sweep: Option<SweepPoint>) -> Self {
        let timing = TimingRecord {
            adapt_seconds: report.timing.adapt_seconds,
            total_seconds: report.timing.total_seconds,
            finished_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
        };
        ResultFile {
            format_version: FORMAT_VERSION,
            sweep,
            report,
            timing,
        }
    }

    pub fn file_name(&self) -> String {
        let r = &self.report;
        let stem = format!("{}_{}_L{}_H{}", r.dataset, r.backbone, r.seq_len, r.horizon);
        match &self.sweep {
            Some(p) => format!("{stem}_{}{}.json", p.axis, p.value),
            None => format!("{stem}_{}.json", r.method),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, Failure> {
        let path = dir.join(self.file_name());
        let mut bytes = serde_json::to_vec(self).map_err(|e| Failure::Data(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes).map_err(|e| Failure::from(e).context(path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, Failure> {
        let bytes = std::fs::read(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        let file: ResultFile =
            serde_json::from_slice(&bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        if file.format_version != FORMAT_VERSION {
            return Err(Failure::Data(format!(
                "{}: format version {} (expected {FORMAT_VERSION})",
                path.display(),
                file.format_version
            )));
        }
        Ok(file)
    }
}

pub fn results_dir(output: &Path) -> PathBuf {
    output.join("results")
}

pub fn sweep_dir(output: &Path, axis: &str) -> PathBuf {
    output.join("sweeps").join(axis)
}

/// All result files in `dir`, sorted by file name. A missing directory is empty.
pub fn read_dir(dir: &Path) -> Result<Vec<ResultFile>, Failure> {
    let mut paths = Vec::new();
    match std::fs::read_dir(dir) {
        Ok(entries) => {
            for e in entries {
                let p = e?.path();
                if p.extension().is_some_and(|x| x == "json") {
                    paths.push(p);
                }
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(Failure::Data(format!("{}: {e}", dir.display()))),
    }
    paths.sort();
    paths.iter().map(|p| ResultFile::read(p)).collect()
}

pub fn memory_mb(params: usize) -> f64 {
    params as f64 * BYTES_PER_PARAM / (1024.0 * 1024.0)
}

type Group = (String, String, usize);

fn group_key(r: &RunReport) -> Group {
    (r.dataset.clone(), r.backbone.clone(), r.seq_len)
}

/// Horizons down, methods across, one block per (dataset, backbone, L).
pub fn summary_table(results: &[ResultFile], metric: fn(&RunReport) -> f64) -> String {
    let methods: Vec<Method> = Method::ALL
        .into_iter()
        .filter(|m| results.iter().any(|f| f.report.method == *m))
        .collect();
    let mut cells: BTreeMap<(Group, usize), BTreeMap<Method, f64>> = BTreeMap::new();
    for f in results {
        let r = &f.report;
        cells
            .entry((group_key(r), r.horizon))
            .or_default()
            .insert(r.method, metric(r));
    }
    let mut out = String::from("dataset\tbackbone\tseq_len\thorizon");
    for m in &methods {
        let _ = write!(out, "\t{m}");
    }
    out.push('\n');
    for (((ds, bb, l), h), row) in &cells {
        let _ = write!(out, "{ds}\t{bb}\t{l}\t{h}");
        for m in &methods {
            match row.get(m) {
                Some(v) => {
                    let _ = write!(out, "\t{v}");
                }
                None => out.push_str("\tNA"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn params_table(results: &[ResultFile]) -> String {
    let mut rows: Vec<&RunReport> = results.iter().map(|f| &f.report).collect();
    rows.sort_by_key(|r| (group_key(r), r.horizon, r.method as u8));
    let mut out = String::from("dataset\tbackbone\tseq_len\thorizon\tmethod\ttrainable_params\tmemory_mb\tbackbone_params\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.dataset,
            r.backbone,
            r.seq_len,
            r.horizon,
            r.method,
            r.trainable_params,
            memory_mb(r.trainable_params),
            r.backbone_params
        );
    }
    out
}

/// Long format: one row per (axis value, horizon).
pub fn sweep_table(results: &[ResultFile]) -> String {
    let mut rows: Vec<(&SweepPoint, &RunReport)> = results
        .iter()
        .filter_map(|f| f.sweep.as_ref().map(|p| (p, &f.report)))
        .collect();
    rows.sort_by(|a, b| {
        (group_key(a.1), a.1.horizon)
            .cmp(&(group_key(b.1), b.1.horizon))
            .then(a.0.value.total_cmp(&b.0.value))
    });
    let mut out = String::from("axis\tvalue\tdataset\tbackbone\tseq_len\thorizon\tmse\tmae\tfrozen_mse\ttrainable_params\n");
    for (p, r) in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            p.axis, p.value, r.dataset, r.backbone, r.seq_len, r.horizon, r.mse, r.mae, r.backbone_mse, r.trainable_params
        );
    }
    out
}

/// Rewrites every table under `output` from the result files found there.
pub fn write_tables(output: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<(), Failure> {
        let path = output.join(name);
        write_atomic(&path, text.as_bytes()).map_err(|e| Failure::from(e).context(path.display()))?;
        written.push(path);
        Ok(())
    };
    let results = read_dir(&results_dir(output))?;
    if !results.is_empty() {
        put("summary_mse.tsv".into(), summary_table(&results, |r| r.mse))?;
        put("summary_mae.tsv".into(), summary_table(&results, |r| r.mae))?;
        put("params_memory.tsv".into(), params_table(&results))?;
    }
    let sweeps = output.join("sweeps");
    if sweeps.is_dir() {
        let mut axes: Vec<String> = std::fs::read_dir(&sweeps)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        axes.sort();
        for axis in axes {
            let files = read_dir(&sweep_dir(output, &axis))?;
            put(format!("sweep_{axis}.tsv"), sweep_table(&files))?;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_is_eight_bytes_per_parameter() {
        assert_eq!(memory_mb(1024 * 1024), 8.0);
        assert_eq!(memory_mb(0), 0.0);
        assert!((memory_mb(31_838) - 31_838.0 * 8.0 / 1_048_576.0).abs() < 1e-15);
    }
}
