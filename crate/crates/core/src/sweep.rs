//! One-axis ablation sweeps: a full train and evaluation per value, collated into one report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::Corpus;
use crate::encoders::{TextEncoder, TextTower};
use crate::error::{ensure, Error, Result};
use crate::losses::Stage2Method;
use crate::stage1::{eval_caption2caption, train_stage1, Stage1Config, Stage1Method};
use crate::stage2::{evaluate_all_heads, train_stage2, HeadReport, Stage2Config, TextFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    DenseRatio,
    Method,
    AdaptorDepth,
    Stage1Method,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::DenseRatio => "dense_ratio",
            SweepAxis::Method => "method",
            SweepAxis::AdaptorDepth => "adaptor_depth",
            SweepAxis::Stage1Method => "stage1_method",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown sweep axis {s:?}; expected dense_ratio, method, adaptor_depth or stage1_method")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub ok: bool,
    pub error: Option<String>,
    /// Caption-to-caption top-1 of the Stage-1 leg (stage1_method axis only).
    pub stage1_top1: Option<f64>,
    pub heads: Vec<HeadReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:<6} {:<7} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            self.axis.as_str(),
            "status",
            "head",
            "short_i2t",
            "short_t2i",
            "long_i2t",
            "long_t2i",
            "mean_i2t",
            "mean_t2i"
        );
        for r in &self.rows {
            if !r.ok {
                let _ = writeln!(
                    s,
                    "{:<24} {:<6} {}",
                    r.value,
                    "failed",
                    r.error.as_deref().unwrap_or("")
                );
                continue;
            }
            for h in &r.heads {
                let top1 = |task: &str| {
                    h.report
                        .task(task)
                        .map(|t| (t.top1_i2t(), t.top1_t2i()))
                        .unwrap_or((f64::NAN, f64::NAN))
                };
                let (si, st) = top1("short");
                let (li, lt) = top1("long");
                let _ = writeln!(
                    s,
                    "{:<24} {:<6} {:<7} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                    r.value, "ok", h.head, si, st, li, lt, h.report.mean_i2t, h.report.mean_t2i
                );
            }
        }
        s
    }
}

/// Inputs shared by every leg.
pub struct SweepInputs<'a> {
    pub train: &'a Corpus,
    pub eval: &'a Corpus,
    /// CC-tuned tower used by Stage-2-only axes.
    pub text: &'a TextTower,
    /// Untuned encoder, the starting point of stage1_method legs.
    pub raw: &'a TextEncoder,
    pub stage1: &'a Stage1Config,
    pub stage2: &'a Stage2Config,
    pub seed: u64,
}

/// Parses a `stage1_method` value such as `mntp+simcse_supervised`.
pub fn parse_stage1_methods(value: &str) -> Result<Vec<Stage1Method>> {
    value.split('+').map(|m| m.trim().parse()).collect()
}

/// Runs every leg in the order given; a failing leg is recorded and the rest still run.
pub fn sweep(axis: SweepAxis, values: &[String], inputs: &SweepInputs<'_>) -> Result<SweepReport> {
    ensure!(!values.is_empty(), Config, "sweep needs at least one value");
    let rows = values
        .iter()
        .map(|v| match leg(axis, v, inputs) {
            Ok((stage1_top1, heads)) => SweepRow {
                value: v.clone(),
                ok: true,
                error: None,
                stage1_top1,
                heads,
            },
            Err(e) => SweepRow {
                value: v.clone(),
                ok: false,
                error: Some(e.to_string()),
                stage1_top1: None,
                heads: Vec::new(),
            },
        })
        .collect();
    Ok(SweepReport { axis, rows })
}

fn leg(
    axis: SweepAxis,
    value: &str,
    inputs: &SweepInputs<'_>,
) -> Result<(Option<f64>, Vec<HeadReport>)> {
    let mut cfg = Stage2Config {
        eval_every_epoch: false,
        ..inputs.stage2.clone()
    };
    let bad = |what: &str| Error::Config(format!("bad {what} value {value:?}"));
    let mut tuned = None;
    let mut stage1_top1 = None;
    match axis {
        SweepAxis::DenseRatio => {
            cfg.dense_ratio = value.trim().parse().map_err(|_| bad("dense_ratio"))?
        }
        SweepAxis::Method => cfg.method = value.trim().parse::<Stage2Method>()?,
        SweepAxis::AdaptorDepth => {
            cfg.adaptor.depth = value.trim().parse().map_err(|_| bad("adaptor_depth"))?
        }
        SweepAxis::Stage1Method => {
            let s1 = Stage1Config {
                methods: parse_stage1_methods(value)?,
                eval_every_epoch: false,
                ..inputs.stage1.clone()
            };
            let out = train_stage1(&s1, inputs.train, None, inputs.raw.clone(), inputs.seed)?;
            stage1_top1 = Some(eval_caption2caption(&out.tower, inputs.eval)?);
            tuned = Some(out.tower);
        }
    }
    cfg.offline_cache = false;
    let text = tuned.as_ref().unwrap_or(inputs.text);
    let out = train_stage2(
        &cfg,
        inputs.train,
        None,
        text,
        TextFeatures::Online,
        inputs.seed,
    )?;
    let tower = out.text.as_ref().unwrap_or(text);
    Ok((
        stage1_top1,
        evaluate_all_heads(&out.model, Some(tower), inputs.eval)?,
    ))
}
