//! Run reports: metrics.csv, summary.txt, prediction lists, per-sample
//! policies, the sweep CSV/SVG, and the self-consistency audit that
//! recomputes every metric from the stored prediction lists.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::info_region::Region;
use crate::metrics::{self, PredictionRecord, Swise};
use crate::pipeline::svg::{bar_line_chart, LineSeries};
use crate::pipeline::{PolicyRow, RunConfig, SweepOutcome};
use crate::regulation::RegulationState;

/// Shortest round-trip decimal text for every float in the reports.
fn fmt(v: f64) -> String {
    format!("{v}")
}

fn opt_fmt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Inputs for one paired run report.
pub struct RunReport<'a> {
    pub config: &'a RunConfig,
    pub dataset_name: &'a str,
    pub num_classes: usize,
    pub epoch_losses: &'a [f64],
    pub noaug_epoch_losses: &'a [f64],
    pub preds_aug: &'a [PredictionRecord],
    pub preds_noaug: &'a [PredictionRecord],
    pub regulation: Option<&'a RegulationState>,
    pub policies: &'a [PolicyRow],
    pub transform_names: &'a [&'static str],
}

/// Headline numbers returned to the caller after writing.
#[derive(Clone, Copy, Debug)]
pub struct RunSummaryValues {
    pub accuracy: f64,
    pub macro_recall: f64,
    pub swise: Swise,
    pub noaug_accuracy: f64,
}

pub fn write_run_report(dir: &Path, report: &RunReport) -> Result<RunSummaryValues> {
    std::fs::create_dir_all(dir)?;
    let cfg_text = toml::to_string_pretty(report.config).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join("config.toml"), cfg_text)?;

    write_predictions(&dir.join("preds_aug.csv"), report.preds_aug)?;
    write_predictions(&dir.join("preds_noaug.csv"), report.preds_noaug)?;

    let mut losses = String::from("epoch,train_loss,noaug_train_loss\n");
    for (e, loss) in report.epoch_losses.iter().enumerate() {
        let noaug = report.noaug_epoch_losses.get(e).copied();
        let _ = writeln!(losses, "{e},{},{}", fmt(*loss), opt_fmt(noaug));
    }
    std::fs::write(dir.join("losses.csv"), losses)?;

    let metrics_text = metrics_csv_text(
        report.preds_noaug,
        report.preds_aug,
        report.num_classes,
        report.regulation,
    )?;
    std::fs::write(dir.join("metrics.csv"), metrics_text)?;

    if !report.policies.is_empty() {
        let mut text = String::from("id,class");
        for n in report.transform_names {
            let _ = write!(text, ",p_{n}");
        }
        for n in report.transform_names {
            let _ = write!(text, ",m_{n}");
        }
        text.push('\n');
        for row in report.policies {
            let _ = write!(text, "{},{}", row.id, row.class);
            for v in &row.policy.p {
                let _ = write!(text, ",{}", fmt(*v));
            }
            for v in &row.policy.m {
                let _ = write!(text, ",{}", fmt(*v));
            }
            text.push('\n');
        }
        std::fs::write(dir.join("policies.csv"), text)?;
    }

    let accuracy = metrics::accuracy(report.preds_aug)?;
    let macro_recall = metrics::macro_recall(report.preds_aug, report.num_classes);
    let bc = metrics::bias_confusion(report.preds_noaug, report.preds_aug, report.num_classes)?;
    let swise = metrics::swise_macro(&bc);
    let noaug_accuracy = metrics::accuracy(report.preds_noaug)?;
    let noaug_macro_recall = metrics::macro_recall(report.preds_noaug, report.num_classes);

    let mut summary = String::new();
    let _ = writeln!(summary, "dataset={}", report.dataset_name);
    let _ = writeln!(summary, "seed={}", report.config.seed);
    let _ = writeln!(summary, "arch={}", report.config.arch);
    let _ = writeln!(summary, "epochs={}", report.config.epochs);
    let _ = writeln!(summary, "batch_size={}", report.config.batch_size);
    let _ = writeln!(summary, "accuracy={}", fmt(accuracy));
    let _ = writeln!(summary, "macro_recall={}", fmt(macro_recall));
    let _ = writeln!(summary, "macro_swise_improve={}", fmt(swise.improve));
    let _ = writeln!(summary, "macro_swise_bias={}", fmt(swise.bias));
    let _ = writeln!(summary, "macro_swise_gain={}", fmt(swise.gain));
    let _ = writeln!(summary, "noaug_accuracy={}", fmt(noaug_accuracy));
    let _ = writeln!(summary, "noaug_macro_recall={}", fmt(noaug_macro_recall));
    std::fs::write(dir.join("summary.txt"), summary)?;

    Ok(RunSummaryValues {
        accuracy,
        macro_recall,
        swise,
        noaug_accuracy,
    })
}

fn metrics_csv_text(
    preds_noaug: &[PredictionRecord],
    preds_aug: &[PredictionRecord],
    num_classes: usize,
    regulation: Option<&RegulationState>,
) -> Result<String> {
    let bc = metrics::bias_confusion(preds_noaug, preds_aug, num_classes)?;
    let swise = metrics::swise_per_class(&bc);
    let recall = metrics::class_recall(preds_aug, num_classes);
    let mut text =
        String::from("class,recall,stp,sfp,sfn,stn,improve,bias,gain,search_recall,w_noaug\n");
    for c in 0..num_classes {
        let counts = &bc.per_class[c];
        let s = swise[c];
        let _ = writeln!(
            text,
            "{c},{},{},{},{},{},{},{},{},{},{}",
            opt_fmt(recall[c]),
            counts.stp,
            counts.sfp,
            counts.sfn,
            counts.stn,
            opt_fmt(s.map(|v| v.improve)),
            opt_fmt(s.map(|v| v.bias)),
            opt_fmt(s.map(|v| v.gain)),
            opt_fmt(regulation.map(|r| r.class_recall[c])),
            opt_fmt(regulation.map(|r| r.w_noaug[c])),
        );
    }
    Ok(text)
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let mut sorted = preds.to_vec();
    sorted.sort_by_key(|r| r.id);
    let mut text = String::from("id,true,pred\n");
    for r in &sorted {
        let _ = writeln!(text, "{},{},{}", r.id, r.true_class, r.predicted);
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "id,true,pred" {
                return Err(Error::Format(format!("bad predictions header: {line}")));
            }
            continue;
        }
        let mut parts = line.split(',');
        let parse = |s: Option<&str>| -> Result<u64> {
            s.and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Ingest {
                    row: i,
                    msg: format!("bad prediction row '{line}'"),
                })
        };
        let id = parse(parts.next())?;
        let true_class = parse(parts.next())? as usize;
        let predicted = parse(parts.next())? as usize;
        out.push(PredictionRecord {
            id,
            true_class,
            predicted,
        });
    }
    Ok(out)
}

/// Recomputes metrics.csv from the stored prediction lists and verifies the
/// stored file matches byte-for-byte (regulation columns are carried over).
pub fn audit_run_dir(dir: &Path) -> Result<()> {
    let preds_aug = read_predictions(&dir.join("preds_aug.csv"))?;
    let preds_noaug = read_predictions(&dir.join("preds_noaug.csv"))?;
    let stored = std::fs::read_to_string(dir.join("metrics.csv"))?;
    let num_classes = stored.lines().count().saturating_sub(1);
    if num_classes == 0 {
        return Err(Error::Format("metrics.csv has no class rows".into()));
    }
    // carry the regulation columns through the recomputation
    let mut recall = Vec::with_capacity(num_classes);
    let mut w_noaug = Vec::with_capacity(num_classes);
    let mut any_regulation = false;
    for line in stored.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 11 {
            return Err(Error::Format(format!("bad metrics row '{line}'")));
        }
        if !cols[9].is_empty() {
            any_regulation = true;
            recall.push(cols[9].parse::<f64>().map_err(|_| {
                Error::Format(format!("bad search_recall '{}'", cols[9]))
            })?);
            w_noaug.push(cols[10].parse::<f64>().map_err(|_| {
                Error::Format(format!("bad w_noaug '{}'", cols[10]))
            })?);
        }
    }
    let regulation = if any_regulation {
        if recall.len() != num_classes {
            return Err(Error::Format("partial regulation columns".into()));
        }
        Some(RegulationState {
            alpha: f64::NAN, // not stored; unused by the csv text
            class_recall: recall,
            w_noaug,
        })
    } else {
        None
    };
    let recomputed = metrics_csv_text(&preds_noaug, &preds_aug, num_classes, regulation.as_ref())?;
    if recomputed != stored {
        return Err(Error::Contract(
            "metrics.csv does not match its prediction lists".into(),
        ));
    }
    Ok(())
}

/// Writes sweep.csv, sweep_summary.txt and the Fig.-3-style chart.
pub fn write_sweep_report(dir: &Path, sweep: &SweepOutcome, num_classes: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = String::from("q_percent,accuracy,macro_recall,improve,bias,gain");
    for c in 0..num_classes {
        let _ = write!(text, ",recall_c{c}");
    }
    text.push('\n');
    for p in &sweep.points {
        let _ = write!(
            text,
            "{},{},{},{},{},{}",
            fmt(p.q_percent),
            fmt(p.accuracy),
            fmt(p.macro_recall),
            fmt(p.swise.improve),
            fmt(p.swise.bias),
            fmt(p.swise.gain)
        );
        for c in 0..num_classes {
            let _ = write!(text, ",{}", opt_fmt(p.class_recall[c]));
        }
        text.push('\n');
    }
    std::fs::write(dir.join("sweep.csv"), text)?;

    let mut summary = String::new();
    let _ = writeln!(summary, "argmax_q_accuracy={}", fmt(sweep.argmax_q_accuracy));
    let _ = writeln!(summary, "argmax_q_gain={}", fmt(sweep.argmax_q_gain));
    std::fs::write(dir.join("sweep_summary.txt"), summary)?;

    let labels: Vec<String> = sweep.points.iter().map(|p| fmt(p.q_percent)).collect();
    let accuracy: Vec<f64> = sweep.points.iter().map(|p| p.accuracy).collect();
    let lines = vec![
        LineSeries {
            name: "swise_improve".into(),
            color: "#e08214".into(),
            values: sweep.points.iter().map(|p| p.swise.improve).collect(),
        },
        LineSeries {
            name: "swise_bias".into(),
            color: "#252525".into(),
            values: sweep.points.iter().map(|p| p.swise.bias).collect(),
        },
        LineSeries {
            name: "swise_gain".into(),
            color: "#1a9641".into(),
            values: sweep.points.iter().map(|p| p.swise.gain).collect(),
        },
    ];
    bar_line_chart(
        &dir.join("sweep.svg"),
        "Performance vs NoAug percentage",
        &labels,
        ("accuracy", &accuracy),
        &lines,
        "accuracy",
        "sample-wise metric",
    )
}

/// Debug dump for one sample: per-timestep saliency and the selected region.
pub fn write_saliency_dump(path: &Path, slc: &[f64], region: &Region) -> Result<()> {
    let mut text = String::from("t,saliency,in_region\n");
    for (t, v) in slc.iter().enumerate() {
        let inside = t >= region.start && t < region.start + region.len;
        let _ = writeln!(text, "{t},{},{}", fmt(*v), u8::from(inside));
    }
    std::fs::write(path, text)?;
    Ok(())
}
