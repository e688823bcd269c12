//! Report export: one CSV row per run, a JSON summary carrying the full
//! report structs, and confusion matrices as their own CSV files. All
//! output is byte-deterministic for a given input.

use std::fs;
use std::path::Path;

use acat_core::eval::{ClassificationMetrics, EvalReport};
use anyhow::{bail, Result};

pub fn report_csv(reports: &[EvalReport]) -> Result<String> {
    let mut out = String::from("metric,config_hash,seed,run,value\n");
    for r in reports {
        if r.metric.contains(',') || r.metric.contains('\n') {
            bail!("metric name {:?} would break the CSV", r.metric);
        }
        for (i, v) in r.runs.iter().enumerate() {
            let seed = r.seeds.get(i).or_else(|| r.seeds.first());
            let Some(seed) = seed else {
                bail!("report {:?} has no seeds", r.metric);
            };
            out.push_str(&format!(
                "{},{:016x},{},{},{:.6}\n",
                r.metric, r.config_hash, seed, i, v
            ));
        }
    }
    Ok(out)
}

pub fn confusion_csv(m: &ClassificationMetrics) -> String {
    let k = m.confusion.len();
    let mut out = String::from("truth\\pred");
    for p in 0..k {
        out.push_str(&format!(",{p}"));
    }
    out.push('\n');
    for (truth, row) in m.confusion.iter().enumerate() {
        out.push_str(&truth.to_string());
        for count in row {
            out.push_str(&format!(",{count}"));
        }
        out.push('\n');
    }
    out
}

/// Writes report.csv and summary.json into `dir`.
pub fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), report_csv(reports)?)?;
    let json = serde_json::to_string_pretty(reports)?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(())
}

pub fn write_confusion(dir: &Path, name: &str, m: &ClassificationMetrics) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("confusion_{name}.csv")), confusion_csv(m))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(metric: &str, seeds: Vec<u64>, runs: Vec<f32>) -> EvalReport {
        EvalReport::from_runs(metric, 0xabcd, seeds, runs).unwrap()
    }

    #[test]
    fn csv_layout_is_one_row_per_run() {
        let reports = vec![
            report("accuracy[acat]", vec![1, 2], vec![0.75, 0.5]),
            report("accuracy[baseline]", vec![1, 2], vec![0.25, 1.0 / 3.0]),
        ];
        let csv = report_csv(&reports).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "metric,config_hash,seed,run,value");
        assert_eq!(lines[1], "accuracy[acat],000000000000abcd,1,0,0.750000");
        assert_eq!(lines[2], "accuracy[acat],000000000000abcd,2,1,0.500000");
        assert_eq!(lines[4], "accuracy[baseline],000000000000abcd,2,1,0.333333");
    }

    #[test]
    fn csv_bytes_are_stable_across_calls() {
        let reports = vec![report("m", vec![3], vec![0.1234567])];
        assert_eq!(report_csv(&reports).unwrap(), report_csv(&reports).unwrap());
        let bad = report("with,comma", vec![1], vec![0.0]);
        assert!(report_csv(&[bad]).is_err());
    }

    #[test]
    fn confusion_matrix_renders_counts() {
        let m = ClassificationMetrics {
            accuracy: 0.5,
            per_class: vec![],
            sensitivity: None,
            specificity: None,
            per_tier: vec![],
            confusion: vec![vec![2, 1], vec![0, 3]],
        };
        let csv = confusion_csv(&m);
        assert_eq!(csv, "truth\\pred,0,1\n0,2,1\n1,0,3\n");
    }

    #[test]
    fn files_land_in_the_directory() {
        let dir = tempfile::tempdir().unwrap();
        write_reports(dir.path(), &[report("m", vec![1], vec![0.5])]).unwrap();
        assert!(dir.path().join("report.csv").exists());
        let summary = fs::read_to_string(dir.path().join("summary.json")).unwrap();
        let parsed: Vec<EvalReport> = serde_json::from_str(&summary).unwrap();
        assert_eq!(parsed[0].metric, "m");
        assert_eq!(parsed[0].runs, vec![0.5]);
    }
}
