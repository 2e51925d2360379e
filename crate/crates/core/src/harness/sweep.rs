use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use super::oracle::OracleError;
use super::scenario::{run_scenario, Scenario, ScenarioOutcome};

/// A parameter axis: `key` is a field of the scenario, its `config` or its
/// `workload`, looked up in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<Value>,
}

impl Sweep {
    /// Parses `key=a,b,c`. Values are read as JSON, falling back to strings.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let (key, vals) = spec.split_once('=').ok_or_else(|| format!("sweep {spec:?} is not key=a,b,c"))?;
        let key = key.trim();
        if key.is_empty() {
            return Err("sweep key is empty".into());
        }
        let values: Vec<Value> = vals
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
            .collect();
        if values.is_empty() {
            return Err(format!("sweep {key} has no values"));
        }
        Ok(Self { key: key.to_string(), values })
    }
}

/// The scenario with `key` set to `value`.
pub fn apply(base: &Scenario, key: &str, value: &Value) -> Result<Scenario, String> {
    let mut doc = serde_json::to_value(base).map_err(|e| e.to_string())?;
    let obj = doc.as_object_mut().unwrap();
    let slot = if obj.contains_key(key) && !matches!(key, "config" | "workload") {
        obj.get_mut(key)
    } else if obj["config"].get(key).is_some() {
        obj.get_mut("config").and_then(|c| c.get_mut(key))
    } else {
        obj.get_mut("workload").and_then(|c| c.get_mut(key))
    };
    *slot.ok_or_else(|| format!("unknown sweep key {key:?}"))? = value.clone();
    let s: Scenario = serde_json::from_value(doc).map_err(|e| format!("{key} = {value}: {e}"))?;
    s.config.validate().map_err(|e| e.to_string())?;
    s.workload.validate()?;
    Ok(s)
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub cell: usize,
    pub scenario: String,
    pub key: String,
    pub value: String,
    pub mode: String,
    pub sessions: usize,
    pub stall_ns: u64,
    pub stop_ns: u64,
    pub downtime_ns: u64,
    pub bytes_precopy: u64,
    pub bytes_dirty: u64,
    pub bytes_dedup_saved: u64,
    pub cow_copies: u64,
    pub validation_failures: u64,
    pub image_bytes: u64,
    pub restore_first_kernel_ns: Option<u64>,
    pub end_ns: u64,
    pub base_stop_ns: Option<u64>,
    pub base_downtime_ns: Option<u64>,
    pub base_image_bytes: Option<u64>,
    pub base_restore_first_kernel_ns: Option<u64>,
}

impl Row {
    pub fn new(cell: usize, key: &str, value: &Value, o: &ScenarioOutcome) -> Self {
        let m = &o.candidate.metrics;
        let b = o.base.as_ref().map(|b| &b.metrics);
        Self {
            cell,
            scenario: o.name.clone(),
            key: key.to_string(),
            value: match value {
                Value::String(s) => s.clone(),
                v => v.to_string(),
            },
            mode: m.mode.clone(),
            sessions: o.candidate.sessions.len(),
            stall_ns: o.candidate.run.stall_ns,
            stop_ns: m.stop_ns,
            downtime_ns: m.downtime_ns,
            bytes_precopy: m.bytes_precopy,
            bytes_dirty: m.bytes_dirty,
            bytes_dedup_saved: m.bytes_dedup_saved,
            cow_copies: m.cow_copies,
            validation_failures: m.validation_failures,
            image_bytes: m.image_bytes,
            restore_first_kernel_ns: m.restore_first_kernel_ns,
            end_ns: o.candidate.run.end_ns,
            base_stop_ns: b.map(|b| b.stop_ns),
            base_downtime_ns: b.map(|b| b.downtime_ns),
            base_image_bytes: b.map(|b| b.image_bytes),
            base_restore_first_kernel_ns: b.and_then(|b| b.restore_first_kernel_ns),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error("cell {cell}: {msg}")]
    Cell { cell: usize, msg: String },
    #[error("cell {cell}: {source}")]
    Run { cell: usize, source: OracleError },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Runs one cell per sweep value (or the scenario alone) in parallel.
pub fn run_sweep(base: &Scenario, sweep: Option<&Sweep>) -> Result<Vec<Row>, SweepError> {
    let cells: Vec<(String, Value)> = match sweep {
        Some(s) => s.values.iter().map(|v| (s.key.clone(), v.clone())).collect(),
        None => vec![(String::new(), Value::Null)],
    };
    let scenarios: Vec<Scenario> = cells
        .iter()
        .enumerate()
        .map(|(i, (k, v))| if k.is_empty() { Ok(base.clone()) } else { apply(base, k, v).map_err(|msg| SweepError::Cell { cell: i, msg }) })
        .collect::<Result<_, _>>()?;
    scenarios
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let out = run_scenario(s).map_err(|source| SweepError::Run { cell: i, source })?;
            Ok(Row::new(i, &cells[i].0, &cells[i].1, &out))
        })
        .collect()
}

pub fn write_csv<W: Write>(out: W, rows: &[Row]) -> Result<(), SweepError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_sweep_values() {
        let s = Sweep::parse("dirty_threshold=0.1, 0.25,0.5").unwrap();
        assert_eq!(s.key, "dirty_threshold");
        assert_eq!(s.values, vec![Value::from(0.1), Value::from(0.25), Value::from(0.5)]);
        assert!(Sweep::parse("nokey").is_err());
        assert!(Sweep::parse("k=").is_err());
    }

    #[test]
    fn apply_finds_nested_keys() {
        let base = Scenario::default();
        let s = apply(&base, "dirty_threshold", &Value::from(0.5)).unwrap();
        assert_eq!(s.config.dirty_threshold, 0.5);
        let s = apply(&base, "write_locality", &Value::from(0.9)).unwrap();
        assert_eq!(s.workload.write_locality, 0.9);
        let s = apply(&base, "mode", &Value::from("cow")).unwrap();
        assert_eq!(s.mode, crate::cr::CkptMode::Cow);
        assert!(apply(&base, "no_such_key", &Value::from(1)).is_err());
        assert!(apply(&base, "write_locality", &Value::from(2.0)).is_err());
    }
}
