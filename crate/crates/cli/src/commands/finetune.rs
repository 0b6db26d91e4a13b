//! Prompt tuning (or full fine-tuning) against a frozen pretrained
//! checkpoint, with data-scarcity and seed sweeps. Emits one record per
//! (scarcity, seed, split, metric) plus a prompt-state checkpoint per combo.

use std::collections::BTreeMap;

use vox4d::backbone::EncoderConfig;
use vox4d::checkpoint::load_checkpoint;
use vox4d::error::{Error, Result};
use vox4d::harness::{
    records_to_csv, run_benchmark, BenchmarkConfig, FrameMode, LabelCodec, LabeledDataset,
    TaskKind,
};
use vox4d::harness::frame_window_extract;
use vox4d::prompt::{save_prompt_state, HeadSpec, TuneConfig, TuneMode};
use vox4d::rng::Rng;
use vox4d::tensor::optim::ParamStore;
use vox4d::volume::synth::SynthManifestRecord;
use vox4d::volume::Volume4D;

use crate::common::{info, load_config, load_volumes, make_run_dir, read_manifest, write_jsonl, write_resolved};
use crate::CommonArgs;

const KEYS: &[&str] = &[
    "manifest", "checkpoint", "task", "k", "steps", "batch_size", "lr", "seeds", "scarcity",
    "mode", "frame_k", "seed",
];

pub fn load_backbone(path: &str) -> Result<(EncoderConfig, ParamStore<f32>, String)> {
    let ck = load_checkpoint(std::path::Path::new(path))?;
    let enc_cfg = EncoderConfig::from_arch_string(&ck.manifest.arch)?;
    let enc = vox4d::backbone::Encoder::new(enc_cfg.clone());
    let store = ck.to_param_store::<f32>(&enc.param_shapes())?;
    Ok((enc_cfg, store, ck.content_hash))
}

pub fn build_dataset(
    records: &[SynthManifestRecord],
    volumes: Vec<Volume4D>,
    task: TaskKind,
    frame_k: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let mut labels = Vec::new();
    let mut targets = Vec::new();
    for r in records {
        if task.is_classification() {
            labels.push(r.class_label.clone().ok_or_else(|| {
                Error::Data(format!("manifest entry {} lacks class_label", r.path))
            })?);
        } else {
            targets.push(vec![r.target.ok_or_else(|| {
                Error::Data(format!("manifest entry {} lacks target", r.path))
            })?]);
        }
    }
    let (volumes, eval_volumes) = if task == TaskKind::StateClassification {
        // random clips for training, first-k clips for evaluation
        let mut train_clips = Vec::with_capacity(volumes.len());
        let mut eval_clips = Vec::with_capacity(volumes.len());
        for (i, v) in volumes.iter().enumerate() {
            let mut rng = Rng::new(seed, 0xc11b_0000 + i as u64);
            train_clips.push(frame_window_extract(v, frame_k, FrameMode::RandomTrain, &mut rng)?);
            eval_clips.push(frame_window_extract(v, frame_k, FrameMode::FirstKEval, &mut rng)?);
        }
        (train_clips, Some(eval_clips))
    } else {
        (volumes, None)
    };
    Ok(LabeledDataset {
        id: "synthetic".to_string(),
        volumes,
        labels,
        targets,
        eval_volumes,
    })
}

pub fn codec_meta(codec: &LabelCodec) -> (String, String) {
    match codec {
        LabelCodec::Classification { classes } => (
            "classification".to_string(),
            serde_json::to_string(classes).unwrap(),
        ),
        LabelCodec::Regression { stats } => (
            "regression".to_string(),
            serde_json::to_string(stats).unwrap(),
        ),
    }
}

pub fn run(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args, KEYS)?;
    let manifest_path = std::path::PathBuf::from(cfg.require_str("manifest")?);
    let ckpt = cfg.require_str("checkpoint")?.to_string();
    let task = TaskKind::parse(cfg.get_str("task").unwrap_or("gender-classification"))?;
    let k: usize = cfg.get_or("k", 8)?;
    let steps: usize = cfg.get_or("steps", 300)?;
    let batch_size: usize = cfg.get_or("batch_size", 4)?;
    let lr: f64 = cfg.get_or("lr", 3e-3)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let seeds: Vec<u64> = cfg.get_list("seeds")?.unwrap_or_else(|| vec![seed]);
    let scarcity: Vec<f64> = cfg.get_list("scarcity")?.unwrap_or_else(|| vec![1.0]);
    let mode = match cfg.get_str("mode").unwrap_or("prompt") {
        "prompt" => TuneMode::PromptOnly,
        "full" => TuneMode::Full,
        other => {
            return Err(Error::Config(format!(
                "mode must be prompt or full, got `{other}`"
            )))
        }
    };
    let frame_k: usize = cfg.get_or("frame_k", 40)?;

    let dir = make_run_dir(args, seeds[0])?;
    write_resolved(&dir, &cfg)?;

    let (enc_cfg, backbone, _hash) = load_backbone(&ckpt)?;
    let (records, base) = read_manifest(&manifest_path)?;
    let volumes = load_volumes(&records, &base)?;
    let data = build_dataset(&records, volumes, task, frame_k, seeds[0])?;

    let head = if task.is_classification() {
        let mut classes: Vec<String> = data.labels.clone();
        classes.sort();
        classes.dedup();
        HeadSpec::Classification {
            classes: classes.len(),
        }
    } else {
        HeadSpec::Regression {
            targets: data.targets.first().map(|t| t.len()).unwrap_or(1),
        }
    };

    let mut tune_cfg = TuneConfig::new(head);
    tune_cfg.k = k;
    tune_cfg.mode = mode;
    tune_cfg.steps = steps;
    tune_cfg.batch_size = batch_size;
    tune_cfg.lr = lr;

    let bench = BenchmarkConfig {
        task,
        scarcity_levels: scarcity,
        seeds,
        tune: tune_cfg,
    };
    info(&format!(
        "tuning {} on {} items: {} scarcity levels x {} seeds",
        task.name(),
        data.len(),
        bench.scarcity_levels.len(),
        bench.seeds.len()
    ));
    let run = run_benchmark::<f32>(&bench, &enc_cfg, &backbone, &data)?;

    write_jsonl(&dir.join("records.jsonl"), &run.records)?;
    std::fs::write(dir.join("summary.csv"), records_to_csv(&run.records))?;

    for (scarcity, seed, codec, out) in &run.outcomes {
        if let Some(w) = &out.fraction_warning {
            info(&format!("(scarcity {scarcity}, seed {seed}) {w}"));
        }
        let (ckind, cdata) = codec_meta(codec);
        let mut meta = BTreeMap::new();
        meta.insert("codec_kind".to_string(), ckind);
        meta.insert("codec_data".to_string(), cdata);
        meta.insert("task".to_string(), task.name().to_string());
        meta.insert("frame_k".to_string(), frame_k.to_string());
        meta.insert(
            "trainable_fraction".to_string(),
            format!("{:.6}", out.trainable_fraction),
        );
        let name = format!("prompt_sc{scarcity}_s{seed}.ckpt");
        save_prompt_state(&dir.join(&name), &out.state, &enc_cfg, &meta)?;
        // stable alias for single-combination runs / pipeline chaining
        save_prompt_state(&dir.join("prompt_state.ckpt"), &out.state, &enc_cfg, &meta)?;
    }
    info(&format!(
        "wrote records.jsonl, summary.csv and {} prompt states to {}",
        run.outcomes.len(),
        dir.display()
    ));
    Ok(())
}
