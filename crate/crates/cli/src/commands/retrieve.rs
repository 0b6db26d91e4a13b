//! Paired-encoder retrieval: align volume embeddings to a per-item target
//! table with a cosine loss, then run the top-1/3/5 protocol over repeated
//! query subsets of the held-out items, in both directions.
//!
//! Target embeddings derive from each item's generating latents (amplitudes
//! and blob centers pushed through a fixed random projection), so retrieval
//! on held-out items is learnable rather than memorized.

use vox4d::error::{Error, Result};
use vox4d::harness::make_split;
use vox4d::harness::retrieval::{
    embed_volumes, paired_encoder_train, retrieval_eval, Direction, PairedTrainConfig,
    RetrievalPool,
};
use vox4d::rng::Rng;
use vox4d::volume::synth::{synth_fmri, SynthConfig, SynthManifestRecord};

use crate::commands::finetune::load_backbone;
use crate::common::{info, load_config, load_volumes, make_run_dir, read_manifest, write_jsonl, write_resolved};
use crate::CommonArgs;

const KEYS: &[&str] = &[
    "manifest", "checkpoint", "emb_dim", "k", "steps", "batch_size", "lr", "seed", "queries",
    "repeats",
];

/// Latent signature of a synthetic item -> unit target embedding through a
/// fixed seeded projection.
fn latent_targets(records: &[SynthManifestRecord], emb_dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if r.networks == 0 {
            return Err(Error::Data(format!(
                "manifest entry {} lacks the generator network count",
                r.path
            )));
        }
        let cfg = SynthConfig {
            dims: r.dims,
            n_networks: r.networks,
            noise_sd: r.noise_sd,
            sigma_range: r.sigma_range,
            ..Default::default()
        };
        let (_, latents) = synth_fmri(r.seed, &cfg)?;
        // signature: per network [amplitude, argmax voxel coords / dim]
        let (x, y, z) = (r.dims.1, r.dims.2, r.dims.3);
        let mut phi = Vec::with_capacity(4 * r.networks);
        for k in 0..r.networks {
            let (mut best, mut best_v) = (0usize, f32::MIN);
            for (i, &m) in latents.maps[k].iter().enumerate() {
                if m > best_v {
                    best_v = m;
                    best = i;
                }
            }
            phi.push(latents.amplitudes[k] as f64);
            phi.push((best % x) as f64 / x as f64);
            phi.push(((best / x) % y) as f64 / y as f64);
            phi.push((best / (x * y)) as f64 / z as f64);
        }
        // fixed random projection, independent of the item
        let mut proj_rng = Rng::new(0x7a96_55aa, 0);
        let mut e = vec![0f64; emb_dim];
        for &p in &phi {
            for v in e.iter_mut() {
                *v += p * proj_rng.normal();
            }
        }
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out.push(e.into_iter().map(|v| v / norm).collect());
    }
    Ok(out)
}

pub fn run(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args, KEYS)?;
    let manifest_path = std::path::PathBuf::from(cfg.require_str("manifest")?);
    let ckpt = cfg.require_str("checkpoint")?.to_string();
    let emb_dim: usize = cfg.get_or("emb_dim", 32)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let queries: usize = cfg.get_or("queries", 300)?;
    let repeats: usize = cfg.get_or("repeats", 30)?;

    let mut pcfg = PairedTrainConfig {
        emb_dim,
        seed,
        ..Default::default()
    };
    pcfg.k_prompts = cfg.get_or("k", pcfg.k_prompts)?;
    pcfg.steps = cfg.get_or("steps", pcfg.steps)?;
    pcfg.batch_size = cfg.get_or("batch_size", pcfg.batch_size)?;
    pcfg.lr = cfg.get_or("lr", pcfg.lr)?;

    let dir = make_run_dir(args, seed)?;
    write_resolved(&dir, &cfg)?;

    let (enc_cfg, backbone, _) = load_backbone(&ckpt)?;
    let (records, base) = read_manifest(&manifest_path)?;
    let volumes = load_volumes(&records, &base)?;
    let targets = latent_targets(&records, emb_dim)?;

    let split = make_split(volumes.len(), seed, 1.0)?;
    let held_out: Vec<usize> = split.val.iter().chain(&split.test).copied().collect();
    info(&format!(
        "paired-encoder training on {} items, {} held out",
        split.train.len(),
        held_out.len()
    ));
    let out = paired_encoder_train::<f32>(
        &pcfg, &enc_cfg, &backbone, &volumes, &targets, &split.train,
    )?;

    // held-out embedding pairs: encoder side vs latent-derived target side
    let query_emb = embed_volumes(&out.model, &out.store, &volumes, &held_out)?;
    let cand_emb: Vec<Vec<f64>> = held_out.iter().map(|&i| targets[i].clone()).collect();

    let n_queries = queries.min(held_out.len());
    let make_pool = |rep: u64| -> Result<RetrievalPool> {
        let mut rng = Rng::new(seed ^ 0x5e7A, 0xbead_0000 + rep);
        let pick = rng.sample_without_replacement(held_out.len(), n_queries);
        Ok(RetrievalPool {
            queries: pick.iter().map(|&i| query_emb[i].clone()).collect(),
            candidates: cand_emb.clone(),
            ground_truth: pick,
        })
    };
    let forward = retrieval_eval(&make_pool, Direction::Forward, repeats)?;
    let backward = retrieval_eval(&make_pool, Direction::Backward, repeats)?;
    write_jsonl(&dir.join("report.jsonl"), &[forward.clone(), backward.clone()])?;
    info(&format!(
        "forward top1 {:.3} +- {:.3}, top3 {:.3}, top5 {:.3} ({} repeats, {} queries)",
        forward.top1_mean, forward.top1_sd, forward.top3_mean, forward.top5_mean, repeats, n_queries
    ));
    info(&format!(
        "backward top1 {:.3} +- {:.3}",
        backward.top1_mean, backward.top1_sd
    ));
    let final_loss = out.loss_curve.last().copied().unwrap_or(f64::NAN);
    std::fs::write(
        dir.join("alignment_loss.txt"),
        format!("{final_loss:.6}\n"),
    )?;
    Ok(())
}
