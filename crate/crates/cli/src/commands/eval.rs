//! Evaluate a saved prompt state against a labeled manifest. The prompt
//! state must reference the provided backbone checkpoint by content hash of
//! its parameters; mismatches are config errors.

use vox4d::error::{Error, Result};
use vox4d::harness::{evaluate, BenchmarkRecord, LabelCodec, TaskKind};
use vox4d::prompt::{load_prompt_state, TuneModel};

use crate::commands::finetune::{build_dataset, load_backbone};
use crate::common::{info, load_config, load_volumes, make_run_dir, read_manifest, write_jsonl, write_resolved};
use crate::CommonArgs;

const KEYS: &[&str] = &["manifest", "checkpoint", "prompt_state", "task", "frame_k", "seed"];

pub fn run(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args, KEYS)?;
    let manifest_path = std::path::PathBuf::from(cfg.require_str("manifest")?);
    let ckpt = cfg.require_str("checkpoint")?.to_string();
    let prompt_path = cfg.require_str("prompt_state")?.to_string();
    let seed: u64 = cfg.get_or("seed", 0)?;

    let dir = make_run_dir(args, seed)?;
    write_resolved(&dir, &cfg)?;

    let (enc_cfg, backbone, _file_hash) = load_backbone(&ckpt)?;
    let (state, meta) = load_prompt_state::<f32>(std::path::Path::new(&prompt_path), &enc_cfg)?;

    // the prompt state pins its backbone by parameter content hash
    let backbone_hash = backbone.content_hash();
    if state.backbone_hash != backbone_hash {
        return Err(Error::Config(format!(
            "prompt state was tuned against backbone {} but checkpoint {} has parameter hash {}",
            &state.backbone_hash[..16.min(state.backbone_hash.len())],
            ckpt,
            &backbone_hash[..16]
        )));
    }

    let task = TaskKind::parse(
        cfg.get_str("task")
            .or(meta.get("task").map(|s| s.as_str()))
            .ok_or_else(|| Error::Config("missing task".into()))?,
    )?;
    let frame_k: usize = match cfg.get::<usize>("frame_k")? {
        Some(v) => v,
        None => meta
            .get("frame_k")
            .and_then(|v| v.parse().ok())
            .unwrap_or(40),
    };

    let codec = match (meta.get("codec_kind").map(|s| s.as_str()), meta.get("codec_data")) {
        (Some("classification"), Some(d)) => LabelCodec::Classification {
            classes: serde_json::from_str(d)
                .map_err(|e| Error::Format(format!("bad codec metadata: {e}")))?,
        },
        (Some("regression"), Some(d)) => LabelCodec::Regression {
            stats: serde_json::from_str(d)
                .map_err(|e| Error::Format(format!("bad codec metadata: {e}")))?,
        },
        _ => return Err(Error::Format("prompt state lacks codec metadata".into())),
    };

    let (records, base) = read_manifest(&manifest_path)?;
    let volumes = load_volumes(&records, &base)?;
    let data = build_dataset(&records, volumes, task, frame_k, seed)?;

    // merge backbone + tuned parameters into one frozen store
    let model = TuneModel::new(enc_cfg.clone(), state.k, state.head);
    let mut store = backbone;
    for (name, p) in state.params.iter() {
        store.insert(name, p.data.clone(), &p.shape);
    }

    let idx: Vec<usize> = (0..data.len()).collect();
    let metrics = evaluate(&model, &store, &data, &idx, &codec, task)?;
    let out: Vec<BenchmarkRecord> = metrics
        .iter()
        .map(|m| BenchmarkRecord {
            task: task.name().to_string(),
            dataset_id: data.id.clone(),
            scarcity: 1.0,
            seed,
            split: "eval".to_string(),
            metric: m.name.clone(),
            value: m.value,
            degenerate: m.degenerate,
        })
        .collect();
    write_jsonl(&dir.join("metrics.jsonl"), &out)?;
    for m in &metrics {
        info(&format!("{} = {:.4}", m.name, m.value));
    }
    Ok(())
}
