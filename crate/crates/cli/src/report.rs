//! Experiment reports: per-setting metrics aggregated over seeds, written
//! as CSV and JSON. Wall times go to a separate file so that reports of
//! identical runs are byte-identical.

use std::fs;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use upcc_core::trainer::{mean_std, Metrics};

/// Result of one (setting, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub dev: Metrics,
    pub test: Option<Metrics>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    /// Heuristic scale factors of the user and product matrices.
    pub scale: Option<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: String,
    pub variant: String,
    /// Swept value (scale factor, fraction or max_len).
    pub value: Option<f64>,
    /// Marks the heuristic-factor row of a scale sweep.
    pub heuristic: bool,
    pub dev_accuracy: MeanStd,
    pub dev_rmse: MeanStd,
    pub test_accuracy: Option<MeanStd>,
    pub test_rmse: Option<MeanStd>,
    /// Percentage of dev documents that lost words to truncation.
    pub truncated_pct: Option<f64>,
    /// Dev accuracy of full minus vanilla at the same fraction.
    pub gap: Option<f64>,
    pub runs: Vec<SeedResult>,
}

impl ReportRow {
    pub fn new(setting: impl Into<String>, variant: impl Into<String>, runs: Vec<SeedResult>) -> Self {
        let col = |f: &dyn Fn(&SeedResult) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        let tests: Option<Vec<Metrics>> = runs.iter().map(|r| r.test).collect();
        let test_stat = |f: fn(&Metrics) -> f64| {
            tests
                .as_ref()
                .filter(|t| !t.is_empty())
                .map(|t| MeanStd::of(&t.iter().map(f).collect::<Vec<_>>()))
        };
        Self {
            setting: setting.into(),
            variant: variant.into(),
            value: None,
            heuristic: false,
            dev_accuracy: MeanStd::of(&col(&|r| r.dev.accuracy)),
            dev_rmse: MeanStd::of(&col(&|r| r.dev.rmse)),
            test_accuracy: test_stat(|m| m.accuracy),
            test_rmse: test_stat(|m| m.rmse),
            truncated_pct: None,
            gap: None,
            runs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn row(&self, setting: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)? + "\n")?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        w.write_record([
            "setting",
            "variant",
            "value",
            "heuristic",
            "seeds",
            "dev_acc_mean",
            "dev_acc_std",
            "dev_rmse_mean",
            "dev_rmse_std",
            "test_acc_mean",
            "test_acc_std",
            "test_rmse_mean",
            "test_rmse_std",
            "truncated_pct",
            "gap",
            "config_hash",
        ])?;
        let num = |v: f64| format!("{v:.6}");
        let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        for r in &self.rows {
            let seeds: Vec<String> = r.runs.iter().map(|s| s.seed.to_string()).collect();
            w.write_record([
                r.setting.clone(),
                r.variant.clone(),
                opt(r.value),
                r.heuristic.to_string(),
                seeds.join(" "),
                num(r.dev_accuracy.mean),
                num(r.dev_accuracy.std),
                num(r.dev_rmse.mean),
                num(r.dev_rmse.std),
                opt(r.test_accuracy.map(|m| m.mean)),
                opt(r.test_accuracy.map(|m| m.std)),
                opt(r.test_rmse.map(|m| m.mean)),
                opt(r.test_rmse.map(|m| m.std)),
                opt(r.truncated_pct),
                opt(r.gap),
                self.config_hash.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
