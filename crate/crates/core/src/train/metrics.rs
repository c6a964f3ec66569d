//! Per-epoch metrics records, written as JSON lines.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub zero_delta_updates: u64,
}

pub fn to_jsonl(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let records = vec![MetricsRecord {
            schema_version: 1,
            config_hash: "abc".into(),
            seed: 7,
            epoch: 0,
            split: "train".into(),
            loss: 1.25,
            accuracy: 0.5,
            lr: 0.01,
            zero_delta_updates: 3,
        }];
        let text = to_jsonl(&records).unwrap();
        assert_eq!(from_jsonl(&text).unwrap(), records);
    }
}
