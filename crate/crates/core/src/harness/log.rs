//! Per-run CSV log: `# key=value` metadata lines, then `step,metric,value`.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const METRICS: [&str; 15] = [
    "eval_return",
    "critic_loss",
    "actor_loss",
    "alpha",
    "srank",
    "dormant_ratio_actor",
    "dormant_ratio_critic",
    "fau",
    "grad_norm_actor",
    "grad_norm_critic",
    "param_norm_actor",
    "param_norm_critic",
    "cov_offdiag_mean",
    "measured_sparsity",
    "reset_event",
];

const COLUMNS: &str = "step,metric,value";

/// Run metadata repeated on every row of a merged table.
pub const MERGED_KEYS: [&str; 7] = [
    "algo",
    "env",
    "sparsity_method",
    "sparsity",
    "width_scale",
    "depth_scale",
    "seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub meta: Vec<(String, String)>,
    pub rows: Vec<Row>,
}

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {message}")]
pub struct SchemaError {
    pub line: usize,
    pub message: String,
}

impl RunLog {
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Appends a row. Panics on a metric outside the schema or a step that
    /// goes backwards; both are programming errors.
    pub fn push(&mut self, step: u64, metric: &str, value: f64) {
        assert!(METRICS.contains(&metric), "unknown metric `{metric}`");
        if let Some(last) = self.rows.last() {
            assert!(step >= last.step, "log steps must not decrease");
        }
        self.rows.push(Row {
            step,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn series(&self, metric: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn last(&self, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            writeln!(out, "# {k}={v}").unwrap();
        }
        writeln!(out, "{COLUMNS}").unwrap();
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.step, r.metric, r.value).unwrap();
        }
        out
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    /// Parses and validates a log. Line numbers in errors are 1-based.
    pub fn parse(text: &str) -> Result<Self, SchemaError> {
        let mut log = RunLog::default();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| SchemaError {
                line: line_no,
                message,
            };
            if let Some(meta) = line.strip_prefix('#') {
                if header_seen {
                    return Err(err("metadata after the column header".into()));
                }
                let (k, v) = meta
                    .trim_start()
                    .split_once('=')
                    .ok_or_else(|| err("metadata line is not `# key=value`".into()))?;
                log.meta.push((k.to_string(), v.to_string()));
                continue;
            }
            if !header_seen {
                if line != COLUMNS {
                    return Err(err(format!("expected column header `{COLUMNS}`")));
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            }
            let step: u64 = fields[0].parse().map_err(|_| {
                err(format!(
                    "step `{}` is not a non-negative integer",
                    fields[0]
                ))
            })?;
            if !METRICS.contains(&fields[1]) {
                return Err(err(format!("unknown metric `{}`", fields[1])));
            }
            let value: f64 = fields[2]
                .parse()
                .map_err(|_| err(format!("value `{}` is not numeric", fields[2])))?;
            if log.rows.last().is_some_and(|r| step < r.step) {
                return Err(err("step decreases".into()));
            }
            log.rows.push(Row {
                step,
                metric: fields[1].to_string(),
                value,
            });
        }
        if !header_seen {
            return Err(SchemaError {
                line: text.lines().count() + 1,
                message: "missing column header".into(),
            });
        }
        Ok(log)
    }
}

/// Long-format table over many runs: `run`, the [`MERGED_KEYS`] metadata,
/// then `step,metric,value`. One row per input row, in input order.
pub fn merge_logs(runs: &[(String, RunLog)]) -> String {
    let mut out = format!("run,{},{COLUMNS}\n", MERGED_KEYS.join(","));
    for (name, log) in runs {
        let meta: Vec<&str> = MERGED_KEYS
            .iter()
            .map(|k| log.meta(k).unwrap_or(""))
            .collect();
        let prefix = format!("{name},{}", meta.join(","));
        for r in &log.rows {
            writeln!(out, "{prefix},{},{},{}", r.step, r.metric, r.value).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut log = RunLog::default();
        log.set_meta("algo", "sac");
        log.push(0, "measured_sparsity", 0.8);
        log.push(10, "eval_return", -123.25);
        let text = log.to_csv();
        assert!(text.starts_with("# algo=sac\nstep,metric,value\n"));
        assert_eq!(RunLog::parse(&text).unwrap(), log);
    }

    #[test]
    fn schema_errors_name_the_line() {
        let text = "# a=b\nstep,metric,value\n1,eval_return,2\n2,eval_return,abc\n";
        let e = RunLog::parse(text).unwrap_err();
        assert_eq!(e.line, 4);
        assert!(e.message.contains("abc"));
        assert_eq!(
            RunLog::parse("step,metric,value\n1,bogus,1\n")
                .unwrap_err()
                .line,
            2
        );
        assert_eq!(
            RunLog::parse("step,metric,value\n5,fau,1\n4,fau,1\n")
                .unwrap_err()
                .line,
            3
        );
        assert!(RunLog::parse("# only=meta\n").is_err());
    }

    #[test]
    fn merged_table_keeps_every_row() {
        let mut a = RunLog::default();
        a.set_meta("algo", "sac");
        a.set_meta("seed", 3);
        a.push(0, "fau", 0.5);
        a.push(1, "fau", 0.25);
        let mut b = RunLog::default();
        b.push(7, "srank", 12.0);
        let merged = merge_logs(&[("a".into(), a), ("b".into(), b)]);
        let lines: Vec<&str> = merged.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[0],
            "run,algo,env,sparsity_method,sparsity,width_scale,depth_scale,seed,step,metric,value"
        );
        assert_eq!(lines[1], "a,sac,,,,,,3,0,fau,0.5");
        assert_eq!(lines[3], "b,,,,,,,,7,srank,12");
    }
}
