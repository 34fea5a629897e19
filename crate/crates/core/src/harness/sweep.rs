use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{train, ExperimentConfig, HarnessError, RunLog};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub sparsity: Vec<f64>,
    pub width: Vec<usize>,
    pub depth: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    /// Every configuration in the Cartesian product, seeds innermost.
    pub fn configs(&self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &sparsity in &self.sparsity {
            for &width_scale in &self.width {
                for &depth_scale in &self.depth {
                    for &seed in &self.seeds {
                        out.push(ExperimentConfig {
                            sparsity,
                            width_scale,
                            depth_scale,
                            seed,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }

    pub fn settings(&self) -> usize {
        self.sparsity.len() * self.width.len() * self.depth.len()
    }
}

/// Identity of one grid setting (seeds aggregated).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SettingKey {
    pub sparsity: f64,
    pub width_scale: usize,
    pub depth_scale: usize,
}

impl SettingKey {
    fn of(c: &ExperimentConfig) -> Self {
        Self {
            sparsity: c.sparsity,
            width_scale: c.width_scale,
            depth_scale: c.depth_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub key: SettingKey,
    /// Runs contributing to the statistics.
    pub runs: usize,
    /// Runs that failed or diverged.
    pub excluded: usize,
    pub final_eval_mean: f64,
    pub final_eval_sd: f64,
}

#[derive(Debug)]
pub struct SweepResult {
    pub configs: Vec<ExperimentConfig>,
    pub runs: Vec<Result<RunLog, String>>,
    pub summary: Vec<SummaryRow>,
}

impl SweepResult {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "sparsity,width_scale,depth_scale,runs,excluded,final_eval_mean,final_eval_sd\n",
        );
        for r in &self.summary {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.key.sparsity,
                r.key.width_scale,
                r.key.depth_scale,
                r.runs,
                r.excluded,
                r.final_eval_mean,
                r.final_eval_sd
            )
            .unwrap();
        }
        out
    }
}

/// File stem for one run inside a sweep directory.
pub fn run_name(c: &ExperimentConfig) -> String {
    format!(
        "{}_{}_{}_s{}_w{}_d{}_seed{}",
        c.algo.as_str(),
        c.env,
        c.sparsity_method.as_str(),
        c.sparsity,
        c.width_scale,
        c.depth_scale,
        c.seed
    )
}

/// Mean and sample standard deviation of the last `eval_return` of every
/// healthy run, per setting, in grid order.
pub fn summarize(configs: &[ExperimentConfig], runs: &[Result<RunLog, String>]) -> Vec<SummaryRow> {
    let mut rows: Vec<(SettingKey, Vec<f64>, usize)> = Vec::new();
    for (c, run) in configs.iter().zip(runs) {
        let key = SettingKey::of(c);
        let idx = match rows.iter().position(|(k, _, _)| *k == key) {
            Some(i) => i,
            None => {
                rows.push((key, Vec::new(), 0));
                rows.len() - 1
            }
        };
        let healthy = run
            .as_ref()
            .ok()
            .filter(|log| log.meta("status") == Some("ok"))
            .and_then(|log| log.last("eval_return"));
        match healthy {
            Some(v) => rows[idx].1.push(v),
            None => rows[idx].2 += 1,
        }
    }
    rows.into_iter()
        .map(|(key, vals, excluded)| {
            let n = vals.len();
            let mean = if n == 0 {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / n as f64
            };
            let sd = if n < 2 {
                0.0
            } else {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            SummaryRow {
                key,
                runs: n,
                excluded,
                final_eval_mean: mean,
                final_eval_sd: sd,
            }
        })
        .collect()
}

/// Runs every grid point on `jobs` worker threads. Failed runs are kept as
/// errors and excluded from the summary. With `out_dir`, each log is written
/// as it finishes and `summary.csv` at the end.
pub fn run_sweep(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<SweepResult, HarnessError> {
    if grid.settings() == 0 || grid.seeds.is_empty() {
        return Err(HarnessError::Config("sweep grids must be non-empty".into()));
    }
    let configs = grid.configs(base);
    for c in &configs {
        c.validate()?;
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunLog, String>>>> = Mutex::new(vec![None; configs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(configs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(config) = configs.get(i) else { break };
                let outcome = train(config).map_err(|e| e.to_string()).and_then(|run| {
                    if let Some(dir) = out_dir {
                        let path = dir.join(format!("{}.csv", run_name(config)));
                        run.log.write(&path).map_err(|e| e.to_string())?;
                    }
                    Ok(run.log)
                });
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });
    let runs: Vec<Result<RunLog, String>> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every run finished"))
        .collect();
    let summary = summarize(&configs, &runs);
    let result = SweepResult {
        configs,
        runs,
        summary,
    };
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("summary.csv"), result.summary_csv())?;
    }
    Ok(result)
}
