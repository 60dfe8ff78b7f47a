use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::probe::EpisodeTrace;
use crate::rl::MetricsRecord;

/// Append-only JSON Lines file. Each record goes out in one write under a
/// lock and is flushed, so concurrent writers never interleave and a killed
/// process leaves only whole lines.
#[derive(Debug)]
pub struct JsonlWriter {
    path: PathBuf,
    file: Mutex<File>,
}

impl JsonlWriter {
    /// Opens `path` for appending, creating it if needed.
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlWriter { path: path.to_path_buf(), file: Mutex::new(file) })
    }

    /// Truncates `path`.
    pub fn create(path: &Path) -> Result<Self> {
        File::create(path).map_err(|e| Error::io(path, e))?;
        Self::append_to(path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write_value(&self, value: &Value) -> Result<()> {
        let mut line = serde_json::to_string(value).map_err(|e| Error::Usage(format!("json: {e}")))?;
        line.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(line.as_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(&self.path, e))
    }

    /// Serializes `record`. Non-finite floats are not representable here; use
    /// [`JsonlWriter::write_value`] with [`metrics_json`] for those.
    pub fn write<T: Serialize>(&self, record: &T) -> Result<()> {
        let v = serde_json::to_value(record).map_err(|e| Error::Usage(format!("json: {e}")))?;
        self.write_value(&v)
    }

    pub fn write_metrics(&self, record: &MetricsRecord) -> Result<()> {
        self.write_value(&metrics_json(record))
    }
}

/// JSON form of a metrics record. Non-finite numbers become the strings
/// `"NaN"`, `"inf"` or `"-inf"` and their field names are listed under
/// `non_finite`.
pub fn metrics_json(r: &MetricsRecord) -> Value {
    let mut m = Map::new();
    let mut bad = Vec::new();
    m.insert("step".into(), json!(r.step));
    m.insert("episodes".into(), json!(r.episodes));
    let mut num = |m: &mut Map<String, Value>, k: &str, v: Option<f64>| {
        let value = match v {
            None => Value::Null,
            Some(x) if x.is_finite() => json!(x),
            Some(x) => {
                bad.push(k.to_string());
                Value::String(non_finite_token(x).into())
            }
        };
        m.insert(k.into(), value);
    };
    num(&mut m, "mean_return", Some(r.mean_return));
    num(&mut m, "std_return", Some(r.std_return));
    num(&mut m, "stderr_return", Some(r.stderr_return));
    num(&mut m, "ed_loss", r.ed_loss);
    num(&mut m, "action_recon_acc", r.action_recon_acc);
    m.insert("seed".into(), json!(r.seed));
    m.insert("variant".into(), json!(r.variant));
    if !bad.is_empty() {
        m.insert("non_finite".into(), json!(bad));
    }
    Value::Object(m)
}

fn non_finite_token(x: f64) -> &'static str {
    if x.is_nan() {
        "NaN"
    } else if x > 0.0 {
        "inf"
    } else {
        "-inf"
    }
}

/// Parses every complete line of a JSON Lines file. A trailing line without
/// its newline (an interrupted write) is skipped.
pub fn read_jsonl(path: &Path) -> Result<Vec<Value>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        let v = serde_json::from_str(line.trim_end()).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
        out.push(v);
    }
    Ok(out)
}

/// One line per step: `{episode, t, obs, actions, rewards, done}` with
/// per-agent arrays. Traces must have been recorded with `record_steps`.
pub fn write_trajectories(path: &Path, traces: &[EpisodeTrace]) -> Result<()> {
    let w = JsonlWriter::create(path)?;
    for tr in traces {
        if tr.steps.is_empty() && !tr.is_empty() {
            return Err(Error::Usage("traces were recorded without steps".into()));
        }
        for (t, s) in tr.steps.iter().enumerate() {
            w.write_value(&json!({
                "episode": tr.episode,
                "t": t,
                "obs": s.obs,
                "actions": s.actions,
                "rewards": s.rewards,
                "done": s.done,
            }))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn record(step: u64, mean: f64) -> MetricsRecord {
        MetricsRecord {
            step,
            episodes: step / 25,
            mean_return: mean,
            std_return: 1.0,
            stderr_return: 0.5,
            ed_loss: Some(0.25),
            action_recon_acc: None,
            seed: 3,
            variant: "liam".into(),
        }
    }

    #[test]
    fn three_appends_three_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let w = JsonlWriter::create(&p).unwrap();
        for i in 0..3 {
            w.write_metrics(&record(i * 100, -1.0)).unwrap();
        }
        let lines = read_jsonl(&p).unwrap();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2]["step"], 200);
        assert_eq!(lines[0]["action_recon_acc"], Value::Null);
        assert!(lines[0].get("non_finite").is_none());
    }

    #[test]
    fn non_finite_values_are_tokens_and_flagged() {
        let mut r = record(5, f64::NAN);
        r.ed_loss = Some(f64::NEG_INFINITY);
        let v = metrics_json(&r);
        assert_eq!(v["mean_return"], "NaN");
        assert_eq!(v["ed_loss"], "-inf");
        assert_eq!(v["non_finite"], json!(["mean_return", "ed_loss"]));
    }

    #[test]
    fn partial_last_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "{\"a\":1}\n{\"a\":2}\n{\"a\":").unwrap();
        assert_eq!(read_jsonl(&p).unwrap().len(), 2);
    }

    #[test]
    fn concurrent_writers_do_not_interleave() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let w = Arc::new(JsonlWriter::create(&p).unwrap());
        let payload = "x".repeat(5000);
        let handles: Vec<_> = (0..8)
            .map(|k| {
                let w = Arc::clone(&w);
                let payload = payload.clone();
                std::thread::spawn(move || {
                    for i in 0..50 {
                        w.write_value(&json!({"writer": k, "i": i, "pad": payload})).unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let lines = read_jsonl(&p).unwrap();
        assert_eq!(lines.len(), 400);
        for k in 0..8 {
            let is: Vec<i64> = lines.iter().filter(|l| l["writer"] == k).map(|l| l["i"].as_i64().unwrap()).collect();
            assert_eq!(is, (0..50).collect::<Vec<_>>());
        }
    }
}
