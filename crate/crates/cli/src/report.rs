//! Plot-ready tables from one or more pipeline output directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use connectome_gnn::explain::SaliencyReport;
use connectome_gnn::io::{read_json, write_atomic};
use connectome_gnn::trainer::MetricsReport;

use crate::pipeline::{RunMetrics, EXPLAIN_DIR, HISTORY_DIR, METRICS_FILE};

pub const PHASES_TABLE: &str = "phases.csv";
pub const CURVES_TABLE: &str = "training_curves.csv";
pub const ROI_TABLE: &str = "roi_importance.csv";

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn metrics_row(s: &mut String, run: &str, m: &RunMetrics, set: &str, r: &MetricsReport) {
    let auc = r.auc.map(|a| a.to_string()).unwrap_or_default();
    let _ = writeln!(
        s,
        "{run},{},{},{set},{},{},{},{auc},{}",
        m.architecture, m.members, r.accuracy, r.precision, r.recall, r.n
    );
}

/// Writes the tables into `out` and returns their paths.
pub fn write_report(runs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        bail!("no run directories given");
    }
    let mut phases = String::from("run,architecture,members,set,accuracy,precision,recall,auc,n\n");
    let mut curves = String::from("run,member,epoch,train_loss,train_acc,val_acc\n");
    let mut rois = String::from("run,rank,roi_index,percentage\n");
    let mut any_saliency = false;

    for dir in runs {
        let run = run_name(dir);
        let m: RunMetrics = read_json(&dir.join(METRICS_FILE)).with_context(|| format!("run {}", dir.display()))?;
        if let Some(v) = &m.val {
            metrics_row(&mut phases, &run, &m, "val", v);
        }
        metrics_row(&mut phases, &run, &m, "test", &m.test);
        for (i, r) in m.member_test.iter().enumerate() {
            metrics_row(&mut phases, &run, &m, &format!("test_member_{i}"), r);
        }

        for i in 0..m.members {
            let path = dir.join(HISTORY_DIR).join(format!("member_{i}.csv"));
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
                let _ = writeln!(curves, "{run},{i},{line}");
            }
        }

        let sal = dir.join(EXPLAIN_DIR).join("saliency_cohort.json");
        if sal.exists() {
            any_saliency = true;
            let r: SaliencyReport = read_json(&sal)?;
            for (rank, e) in r.entries.iter().enumerate() {
                let _ = writeln!(rois, "{run},{},{},{}", rank + 1, e.roi_index, e.percentage);
            }
        }
    }

    let mut written = vec![out.join(PHASES_TABLE), out.join(CURVES_TABLE)];
    write_atomic(&written[0], phases.as_bytes())?;
    write_atomic(&written[1], curves.as_bytes())?;
    if any_saliency {
        written.push(out.join(ROI_TABLE));
        write_atomic(&written[2], rois.as_bytes())?;
    }
    Ok(written)
}
