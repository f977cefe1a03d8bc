//! Append-only training log written as JSON lines.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    /// Only recorded when wall-clock logging is switched on; it would
    /// otherwise break byte-identical logs across runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

impl LogRecord {
    pub fn new(stage: &str, step: u64, loss: Option<f64>) -> Self {
        Self {
            stage: stage.to_string(),
            step,
            loss,
            reward_mean: None,
            reward_std: None,
            kl: None,
            bleu4: None,
            rouge_l: None,
            wall_ms: None,
        }
    }

    fn finite(&self) -> bool {
        [self.loss, self.reward_mean, self.reward_std, self.kl, self.bleu4, self.rouge_l]
                .iter()
                .flatten()
                .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects a record whose step does not exceed the last step logged for
    /// the same stage, or that carries a non-finite metric.
    pub fn push(&mut self, rec: LogRecord) -> Result<(), String> {
        if !rec.finite() {
            return Err(format!("non-finite metric in {} step {}", rec.stage, rec.step));
        }
        if let Some(prev) = self.records.iter().rev().find(|r| r.stage == rec.stage) {
            if rec.step <= prev.step {
                return Err(format!("{} step {} after {}", rec.stage, rec.step, prev.step));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn extend(&mut self, other: RunLog) -> Result<(), String> {
        other.records.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn stage<'a>(&'a self, stage: &'a str) -> impl Iterator<Item = &'a LogRecord> + 'a {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, String> {
        let mut log = RunLog::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: LogRecord = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            log.push(rec)?;
        }
        Ok(log)
    }
}
