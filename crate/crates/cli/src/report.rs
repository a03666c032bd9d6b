use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use gelflex::experiments::{MetricsReport, REPORT_SCHEMA};

use crate::CliError;

#[derive(Debug, Serialize, PartialEq)]
pub struct Aggregate {
    pub task: String,
    pub model: String,
    pub split: String,
    pub seeds: Vec<u64>,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

fn metrics(r: &MetricsReport) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    if let Some(p) = &r.proprio {
        out.push(("within_1deg", p.within_1deg));
        out.push(("mean_accumulative_mm", p.mean_accumulative_mm));
        out.push(("mean_sum_abs_err_deg", p.mean_sum_abs_err_deg));
        out.push(("mean_max_abs_err_deg", p.mean_max_abs_err_deg));
    }
    if let Some(c) = &r.classifier {
        out.push(("accuracy", c.accuracy));
    }
    if let Some(l) = r.train.as_ref().and_then(|t| t.epoch_losses.last()) {
        out.push(("final_train_loss", *l));
    }
    out
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Reads every `report.json` below `dir`, refusing mixed schema versions.
pub fn collect(dir: &Path) -> Result<Vec<MetricsReport>, CliError> {
    let mut paths: Vec<_> = walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.file_name() == "report.json")
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
        let version = v.get("schema_version").and_then(serde_json::Value::as_u64);
        if version != Some(REPORT_SCHEMA as u64) {
            return Err(CliError::schema(format!(
                "{} has schema version {version:?}, expected {REPORT_SCHEMA}",
                p.display()
            )));
        }
        out.push(serde_json::from_value(v).map_err(|e| CliError::schema(format!("{}: {e}", p.display())))?);
    }
    Ok(out)
}

pub fn aggregate(reports: &[MetricsReport]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, String, String, &'static str), (Vec<u64>, Vec<f64>)> = BTreeMap::new();
    for r in reports {
        let split = serde_json::to_value(r.split).unwrap().as_str().unwrap_or("?").to_string();
        for (name, v) in metrics(r) {
            let g = groups.entry((r.task.clone(), r.model.clone(), split.clone(), name)).or_default();
            g.0.push(r.seed);
            g.1.push(v);
        }
    }
    groups
        .into_iter()
        .map(|((task, model, split, metric), (seeds, vals))| {
            let (mean, std) = mean_std(&vals);
            Aggregate { task, model, split, seeds, metric: metric.into(), mean, std }
        })
        .collect()
}

pub fn cmd_report(dir: &Path, out: &Path) -> Result<(), CliError> {
    let reports = collect(dir)?;
    if reports.is_empty() {
        return Err(CliError::io(format!("no report.json under {}", dir.display())));
    }
    let rows = aggregate(&reports);
    let mut csv = String::from("task,model,split,runs,metric,mean,std\n");
    for a in &rows {
        csv.push_str(&format!("{},{},{},{},{},{},{}\n", a.task, a.model, a.split, a.seeds.len(), a.metric, a.mean, a.std));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(e.to_string()))?;
    std::fs::write(out.join("summary.csv"), &csv).map_err(|e| CliError::io(e.to_string()))?;
    let json = serde_json::json!({ "schema_version": REPORT_SCHEMA, "runs": reports.len(), "rows": rows });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&json).unwrap())
        .map_err(|e| CliError::io(e.to_string()))?;
    print!("{csv}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_seed_mean_and_std() {
        let (m, s) = mean_std(&[0.9, 0.95, 1.0]);
        assert!((m - 0.95).abs() < 1e-12);
        assert!((s - 0.05).abs() < 1e-12);
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
    }
}
