//! Masked-autoencoder pretraining: emits a loss curve (JSONL) and an
//! encoder-only checkpoint (the decoder is discarded).

use std::collections::BTreeMap;

use vox4d::backbone::EncoderConfig;
use vox4d::checkpoint::{save_params, Manifest};
use vox4d::error::Result;
use vox4d::pretrain::{pretrain, MaeModel, PretrainConfig};

use crate::common::{info, load_config, load_volumes, make_run_dir, read_manifest, write_jsonl, write_resolved};
use crate::CommonArgs;

const KEYS: &[&str] = &[
    "manifest",
    "variant",
    "mask_ratio",
    "redundancy_dropout",
    "epochs",
    "batch_size",
    "max_steps",
    "lr",
    "seed",
    "decoder_depth",
    "decoder_dim",
];

pub fn run(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args, KEYS)?;
    let manifest_path = std::path::PathBuf::from(cfg.require_str("manifest")?);
    let variant = cfg.get_str("variant").unwrap_or("lowres");
    let seed: u64 = cfg.get_or("seed", 0)?;

    let enc_cfg = EncoderConfig::by_name(variant)?;
    let mut pcfg = PretrainConfig::new(enc_cfg);
    pcfg.mask_ratio = cfg.get_or("mask_ratio", pcfg.mask_ratio)?;
    pcfg.redundancy_dropout = cfg.get_bool_or("redundancy_dropout", true)?;
    pcfg.epochs = cfg.get_or("epochs", 1)?;
    pcfg.batch_size = cfg.get_or("batch_size", 1)?;
    pcfg.max_steps = cfg.get_or("max_steps", 0)?;
    pcfg.lr = cfg.get_or("lr", 1e-3)?;
    pcfg.seed = seed;
    pcfg.mae.decoder_depth = cfg.get_or("decoder_depth", pcfg.mae.decoder_depth)?;
    pcfg.mae.decoder_dim = cfg.get_or("decoder_dim", pcfg.mae.decoder_dim)?;

    let dir = make_run_dir(args, seed)?;
    write_resolved(&dir, &cfg)?;

    let (records, base) = read_manifest(&manifest_path)?;
    let volumes = load_volumes(&records, &base)?;
    info(&format!(
        "pretraining on {} volumes ({variant}, dropout {})",
        volumes.len(),
        pcfg.redundancy_dropout
    ));

    let outcome = pretrain::<f32>(&pcfg, &volumes)?;
    write_jsonl(&dir.join("loss.jsonl"), &outcome.records)?;

    let encoder_store = MaeModel::encoder_only(&outcome.store);
    let mut meta = BTreeMap::new();
    meta.insert("variant".to_string(), variant.to_string());
    meta.insert("mask_ratio".to_string(), pcfg.mask_ratio.to_string());
    meta.insert(
        "redundancy_dropout".to_string(),
        pcfg.redundancy_dropout.to_string(),
    );
    meta.insert("seed".to_string(), seed.to_string());
    let manifest = Manifest {
        format_version: 1,
        arch: outcome.model.encoder.cfg.arch_string(),
        meta,
    };
    let hash = save_params(&dir.join("checkpoint.ckpt"), &manifest, &encoder_store)?;
    info(&format!(
        "checkpoint.ckpt ({} params, hash {})",
        encoder_store.total_params(),
        &hash[..16]
    ));
    let last = outcome.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    info(&format!(
        "{} steps, final loss {last:.4}",
        outcome.records.len()
    ));
    Ok(())
}
