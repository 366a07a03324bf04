//! Per-run learning-curve log, one CSV row per evaluation point.
//!
//! Wall-clock time goes to a `.timing.csv` sidecar so the main file depends
//! only on the configuration and seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub env_step: u64,
    /// Return of the latest finished training episode, if any.
    pub episode_return: Option<f64>,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    /// Mean losses over the updates since the previous record.
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    /// SAC temperature, or the exploration rate for DQN.
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TimingRecord {
    env_step: u64,
    wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    /// Seconds since the run started, aligned with `records`.
    pub wall_time: Vec<f64>,
}

pub fn timing_path(path: &Path) -> PathBuf {
    path.with_extension("timing.csv")
}

impl RunLog {
    pub fn push(&mut self, record: LogRecord, wall_time: f64) -> Result<(), HarnessError> {
        if let Some(last) = self.records.last() {
            if record.env_step <= last.env_step {
                return Err(HarnessError::Log(format!(
                    "env_step {} does not follow {}",
                    record.env_step, last.env_step
                )));
            }
        }
        self.records.push(record);
        self.wall_time.push(wall_time);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.records.is_empty() {
            w.write_record([
                "env_step",
                "episode_return",
                "eval_return_mean",
                "eval_return_std",
                "critic_loss",
                "actor_loss",
                "alpha",
            ])?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        String::from_utf8(
            w.into_inner()
                .map_err(|e| HarnessError::Log(e.to_string()))?,
        )
        .map_err(|e| HarnessError::Log(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let mut log = Self::default();
        for r in csv::Reader::from_reader(text.as_bytes()).deserialize() {
            log.push(r?, f64::NAN)?;
        }
        Ok(log)
    }

    /// Writes the log and its timing sidecar.
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_csv()?)?;
        let mut w = csv::Writer::from_path(timing_path(path))?;
        for (r, &t) in self.records.iter().zip(&self.wall_time) {
            w.serialize(TimingRecord {
                env_step: r.env_step,
                wall_time: t,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a log; wall times are filled in when the sidecar exists.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut log = Self::from_csv(&std::fs::read_to_string(path)?)?;
        if let Ok(mut rdr) = csv::Reader::from_path(timing_path(path)) {
            let times: Vec<TimingRecord> = rdr.deserialize().collect::<Result<_, _>>()?;
            if times.len() == log.records.len() {
                log.wall_time = times.into_iter().map(|t| t.wall_time).collect();
            }
        }
        Ok(log)
    }

    pub fn steps(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.env_step).collect()
    }

    pub fn eval_means(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.eval_return_mean).collect()
    }
}
