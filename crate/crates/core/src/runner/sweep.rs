//! Parameter sweeps over one axis of a base config, run on a worker pool.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::descent::StepSizePolicy;
use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::loss::LossFunction;

use super::config::{DatasetSpec, RunConfig};
use super::io::{fmt_f64, write_atomic};
use super::run::{execute, RunResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum SweepAxis {
    N(Vec<usize>),
    #[serde(rename = "T", alias = "t")]
    T(Vec<usize>),
    Policy(Vec<StepSizePolicy>),
    Loss(Vec<LossFunction>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::N(_) => "n",
            SweepAxis::T(_) => "T",
            SweepAxis::Policy(_) => "policy",
            SweepAxis::Loss(_) => "loss",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::N(v) | SweepAxis::T(v) => v.len(),
            SweepAxis::Policy(v) => v.len(),
            SweepAxis::Loss(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, i: usize) -> String {
        match self {
            SweepAxis::N(v) | SweepAxis::T(v) => v[i].to_string(),
            SweepAxis::Policy(v) => v[i].label(),
            SweepAxis::Loss(v) => v[i].label(),
        }
    }

    /// The base config with axis value `i` substituted.
    fn apply(&self, base: &RunConfig, i: usize) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::N(v) => match &mut cfg.dataset {
                DatasetSpec::Generated { n, .. } | DatasetSpec::LowerBound { n } => *n = v[i],
                DatasetSpec::Path { .. } => {
                    return Err(Error::usage("an n sweep needs generated or lower-bound data"))
                }
            },
            SweepAxis::T(v) => cfg.steps = v[i],
            SweepAxis::Policy(v) => cfg.policy = v[i],
            SweepAxis::Loss(v) => cfg.loss = v[i],
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: RunConfig,
    pub sweep: SweepAxis,
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }
}

/// One row of the aggregated table. Failed runs produce a single row with `error` set.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis_value: String,
    pub t: Option<usize>,
    pub gamma: f64,
    /// `gamma - raw_margin / ||w_t||`
    pub margin_gap: f64,
    /// `|| w_t / ||w_t|| - u_bar ||`
    pub bias_gap: f64,
    /// `(ln n + 1) / (gamma * sum eta_hat)`
    pub margin_bound: f64,
    pub risk: f64,
    pub reports_passed: bool,
    pub error: Option<String>,
}

fn rows_for(label: &str, res: &RunResult) -> Vec<SweepRow> {
    let cert = &res.certificate;
    let ln_n = (res.dataset.n() as f64).ln();
    let passed = res.passed();
    res.trajectory
        .steps
        .iter()
        .filter(|s| s.t > 0 && s.w_norm > 0.0)
        .map(|s| {
            let dir: Vec<f64> = s.w.iter().zip(&cert.u_bar).map(|(w, u)| w / s.w_norm - u).collect();
            SweepRow {
                axis_value: label.to_string(),
                t: Some(s.t),
                gamma: cert.gamma,
                margin_gap: cert.gamma - s.raw_margin / s.w_norm,
                bias_gap: norm(&dir),
                margin_bound: (ln_n + 1.0) / (cert.gamma * s.sums.hat_eta),
                risk: s.risk,
                reports_passed: passed,
                error: None,
            }
        })
        .collect()
}

/// Worker count from the flag, then `MARGINLAB_WORKERS`, then available parallelism.
pub fn resolve_workers(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("MARGINLAB_WORKERS") {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("MARGINLAB_WORKERS must be a positive integer, got {s:?}")))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(Error::config("worker count must be at least 1"));
    }
    Ok(n)
}

/// Runs every axis value; failures become error rows and the sweep continues.
pub fn run_sweep(cfg: &SweepConfig, workers: usize) -> Result<Vec<SweepRow>> {
    if cfg.sweep.is_empty() {
        return Err(Error::usage(format!("sweep axis {} has no values", cfg.sweep.name())));
    }
    let k = cfg.sweep.len();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Vec<SweepRow>>>> = Mutex::new(vec![None; k]);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, k) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= k {
                    break;
                }
                let label = cfg.sweep.label(i);
                let rows = match cfg.sweep.apply(&cfg.base, i).and_then(|c| execute(&c)) {
                    Ok(res) => rows_for(&label, &res),
                    Err(e) => vec![SweepRow {
                        axis_value: label,
                        t: None,
                        gamma: f64::NAN,
                        margin_gap: f64::NAN,
                        bias_gap: f64::NAN,
                        margin_bound: f64::NAN,
                        risk: f64::NAN,
                        reports_passed: false,
                        error: Some(format!("[{}] {e}", e.module())),
                    }],
                };
                slots.lock().unwrap()[i] = Some(rows);
            });
        }
    });
    Ok(slots.into_inner().unwrap().into_iter().flatten().flatten().collect())
}

pub fn sweep_csv(axis: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{axis},t,gamma,margin_gap,bias_gap,margin_bound,risk,reports_passed,error\n");
    for r in rows {
        let t = r.t.map(|t| t.to_string()).unwrap_or_default();
        let err = r.error.as_deref().unwrap_or("").replace('"', "'");
        writeln!(
            out,
            "{},{t},{},{},{},{},{},{},\"{err}\"",
            r.axis_value,
            fmt_f64(r.gamma),
            fmt_f64(r.margin_gap),
            fmt_f64(r.bias_gap),
            fmt_f64(r.margin_bound),
            fmt_f64(r.risk),
            u8::from(r.reports_passed),
        )
        .unwrap();
    }
    out
}

/// Runs the sweep and writes `out/sweep.csv`.
pub fn cmd_sweep(cfg: &SweepConfig, out: &Path, workers: usize) -> Result<Vec<SweepRow>> {
    let rows = run_sweep(cfg, workers)?;
    write_atomic(&out.join("sweep.csv"), sweep_csv(cfg.sweep.name(), &rows).as_bytes())?;
    Ok(rows)
}
