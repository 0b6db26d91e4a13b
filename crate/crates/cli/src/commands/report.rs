//! Aggregate benchmark/metric records from previous runs into a CSV summary
//! (mean ± sd over seeds, grouped by task/dataset/scarcity/split/metric).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use vox4d::error::{Error, Result};
use vox4d::harness::BenchmarkRecord;

use crate::common::{info, load_config, make_run_dir, write_resolved};
use crate::CommonArgs;

const KEYS: &[&str] = &["inputs", "seed"];

fn collect_record_files(input: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if input.is_file() {
        out.push(input.to_path_buf());
        return Ok(());
    }
    if input.is_dir() {
        for name in ["records.jsonl", "metrics.jsonl"] {
            let p = input.join(name);
            if p.is_file() {
                out.push(p);
            }
        }
        // one level of run-dir nesting
        for entry in std::fs::read_dir(input)? {
            let p = entry?.path();
            if p.is_dir() {
                for name in ["records.jsonl", "metrics.jsonl"] {
                    let f = p.join(name);
                    if f.is_file() {
                        out.push(f);
                    }
                }
            }
        }
        return Ok(());
    }
    Err(Error::Data(format!("no such input {}", input.display())))
}

pub fn run(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args, KEYS)?;
    let inputs: Vec<String> = cfg
        .get_list("inputs")?
        .ok_or_else(|| Error::Config("missing required config key `inputs`".into()))?;
    let seed: u64 = cfg.get_or("seed", 0)?;

    let dir = make_run_dir(args, seed)?;
    write_resolved(&dir, &cfg)?;

    let mut files = Vec::new();
    for i in &inputs {
        collect_record_files(Path::new(i), &mut files)?;
    }
    if files.is_empty() {
        return Err(Error::Data("no record files found under inputs".into()));
    }

    let mut records: Vec<BenchmarkRecord> = Vec::new();
    for f in &files {
        let text = std::fs::read_to_string(f)?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: BenchmarkRecord = serde_json::from_str(line).map_err(|e| {
                Error::Format(format!("{} line {}: {e}", f.display(), i + 1))
            })?;
            records.push(rec);
        }
    }

    // group over seeds
    let mut groups: BTreeMap<(String, String, String, String, String), Vec<f64>> = BTreeMap::new();
    for r in &records {
        groups
            .entry((
                r.task.clone(),
                r.dataset_id.clone(),
                format!("{}", r.scarcity),
                r.split.clone(),
                r.metric.clone(),
            ))
            .or_default()
            .push(r.value);
    }
    let mut csv = String::from("task,dataset_id,scarcity,split,metric,mean,sd,n\n");
    for ((task, ds, scarcity, split, metric), vals) in &groups {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        csv.push_str(&format!(
            "{task},{ds},{scarcity},{split},{metric},{mean},{sd},{}\n",
            vals.len()
        ));
    }
    std::fs::write(dir.join("summary.csv"), &csv)?;
    info(&format!(
        "aggregated {} records from {} files into {}/summary.csv",
        records.len(),
        files.len(),
        dir.display()
    ));
    Ok(())
}
