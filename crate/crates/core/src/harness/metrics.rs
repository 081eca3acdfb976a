//! Metrics CSV with a fixed column order:
//!
//! `env_step, episode_return, success_all, success_<cam>..., return_all,
//! return_<cam>..., loss_critic, loss_actor, loss_alpha, loss_shared,
//! loss_private, loss_mvd, loss_recon, loss_total, alpha_value`
//!
//! Camera columns follow the order of `env.cameras`. Empty cells mark values
//! that were not measured for that row (no evaluation, term not computed).

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rl::UpdateStats;

pub const LOSS_COLUMNS: [&str; 9] = [
    "loss_critic",
    "loss_actor",
    "loss_alpha",
    "loss_shared",
    "loss_private",
    "loss_mvd",
    "loss_recon",
    "loss_total",
    "alpha_value",
];

pub fn header(cameras: &[String]) -> Vec<String> {
    let mut h = vec!["env_step".to_string(), "episode_return".to_string(), "success_all".to_string()];
    h.extend(cameras.iter().map(|c| format!("success_{c}")));
    h.push("return_all".into());
    h.extend(cameras.iter().map(|c| format!("return_{c}")));
    h.extend(LOSS_COLUMNS.iter().map(|s| s.to_string()));
    h
}

/// Success rate and mean return under one evaluation condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalScore {
    pub success_rate: f64,
    pub mean_return: f64,
}

/// Evaluation results for `all` followed by each camera.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub all: EvalScore,
    pub per_camera: Vec<EvalScore>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub env_step: u64,
    pub episode_return: Option<f64>,
    pub eval: Option<EvalRecord>,
    /// Values for [`LOSS_COLUMNS`] in order.
    pub losses: [Option<f64>; 9],
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_line(&self, cameras: usize) -> String {
        let mut cells = vec![self.env_step.to_string(), cell(self.episode_return)];
        let ev = self.eval.as_ref();
        cells.push(cell(ev.map(|e| e.all.success_rate)));
        cells.extend((0..cameras).map(|c| cell(ev.map(|e| e.per_camera[c].success_rate))));
        cells.push(cell(ev.map(|e| e.all.mean_return)));
        cells.extend((0..cameras).map(|c| cell(ev.map(|e| e.per_camera[c].mean_return))));
        cells.extend(self.losses.iter().map(|&v| cell(v)));
        cells.join(",")
    }
}

/// Running means of update statistics between two metrics rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossAccumulator {
    sums: [f64; 9],
    counts: [u64; 9],
}

impl LossAccumulator {
    pub fn add(&mut self, s: &UpdateStats) {
        let vals = [
            Some(s.loss_critic),
            s.loss_actor,
            s.loss_alpha,
            s.loss_shared,
            s.loss_private,
            s.loss_mvd,
            s.loss_recon,
            Some(s.loss_total),
            Some(s.alpha_value),
        ];
        for (i, v) in vals.into_iter().enumerate() {
            if let Some(v) = v {
                self.sums[i] += v;
                self.counts[i] += 1;
            }
        }
    }

    /// Means since the last call, then reset.
    pub fn take(&mut self) -> [Option<f64>; 9] {
        let out = std::array::from_fn(|i| (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64));
        *self = Self::default();
        out
    }
}

/// Append-only CSV writer. Each row is written with one `write_all` and
/// flushed, so the file is parseable while a run is in progress.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
    cameras: usize,
    text: String,
}

impl MetricsWriter {
    pub fn create(path: &Path, cameras: &[String]) -> Result<Self> {
        let text = format!("{}\n", header(cameras).join(","));
        Self::with_contents(path, cameras.len(), text)
    }

    /// Start from previously written contents (header included), e.g. when
    /// resuming from a checkpoint.
    pub fn with_contents(path: &Path, cameras: usize, text: String) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
            cameras,
            text,
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        let line = format!("{}\n", row.to_line(self.cameras));
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        self.text.push_str(&line);
        Ok(())
    }

    /// Everything written so far.
    pub fn contents(&self) -> &str {
        &self.text
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// A parsed metrics file: header plus rows of optional cells.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl MetricsTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let bad = |m: String| Error::InvalidArgument(format!("metrics csv: {m}"));
        let columns: Vec<String> = rdr.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let row = rec
                .iter()
                .map(|c| if c.is_empty() { Ok(None) } else { c.parse::<f64>().map(Some).map_err(|e| bad(format!("`{c}`: {e}"))) })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(MetricsTable { columns, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// `(env_step, value)` for every row where `name` is present.
    pub fn series(&self, name: &str) -> Vec<(f64, f64)> {
        let (Some(step), Some(col)) = (self.column("env_step"), self.column(name)) else {
            return Vec::new();
        };
        self.rows.iter().filter_map(|r| Some((r[step]?, r[col]?))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_order() {
        let h = header(&["ego".into(), "static".into()]).join(",");
        assert_eq!(
            h,
            "env_step,episode_return,success_all,success_ego,success_static,return_all,return_ego,return_static,\
             loss_critic,loss_actor,loss_alpha,loss_shared,loss_private,loss_mvd,loss_recon,loss_total,alpha_value"
        );
    }

    #[test]
    fn rows_round_trip_through_the_parser() {
        let dir = tempfile::tempdir().unwrap();
        let cams = vec!["ego".to_string()];
        let mut w = MetricsWriter::create(&dir.path().join("m.csv"), &cams).unwrap();
        let mut acc = LossAccumulator::default();
        acc.add(&UpdateStats {
            loss_critic: 1.0,
            loss_actor: Some(-2.0),
            loss_total: 3.0,
            alpha_value: 0.1,
            ..UpdateStats::default()
        });
        acc.add(&UpdateStats {
            loss_critic: 2.0,
            loss_total: 4.0,
            alpha_value: 0.1,
            ..UpdateStats::default()
        });
        let losses = acc.take();
        assert_eq!(losses[0], Some(1.5));
        assert_eq!(losses[1], Some(-2.0));
        assert_eq!(losses[3], None);
        assert_eq!(acc.take(), [None; 9]);
        w.append(&MetricsRow {
            env_step: 50,
            episode_return: Some(-12.25),
            eval: Some(EvalRecord {
                all: EvalScore { success_rate: 0.5, mean_return: -3.0 },
                per_camera: vec![EvalScore { success_rate: 0.25, mean_return: -4.0 }],
            }),
            losses,
        })
        .unwrap();
        let t = MetricsTable::read(w.path()).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.series("success_ego"), vec![(50.0, 0.25)]);
        assert_eq!(t.series("loss_shared"), vec![]);
        assert_eq!(std::fs::read_to_string(w.path()).unwrap(), w.contents());
    }
}
