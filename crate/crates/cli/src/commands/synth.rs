//! Generate synthetic volumes plus a line-delimited manifest. Labels derive
//! from the first latent network: class = sign of its amplitude, regression
//! target = its amplitude value.

use vox4d::error::Result;
use vox4d::volume::nifti::write_nifti1;
use vox4d::volume::synth::{synth_fmri, SynthConfig, SynthManifestRecord};

use crate::common::{info, load_config, make_run_dir, write_jsonl, write_resolved};
use crate::CommonArgs;

const KEYS: &[&str] = &[
    "seed", "count", "t", "x", "y", "z", "networks", "noise_sd", "sigma", "spacing", "tr",
    "labels",
];

pub fn run(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args, KEYS)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let count: usize = cfg.get_or("count", 8)?;
    let dims = (
        cfg.get_or("t", 32usize)?,
        cfg.get_or("x", 16usize)?,
        cfg.get_or("y", 16usize)?,
        cfg.get_or("z", 16usize)?,
    );
    let networks: usize = cfg.get_or("networks", 3)?;
    let noise_sd: f64 = cfg.get_or("noise_sd", 0.1)?;
    let sigma: Vec<f64> = cfg
        .get_list("sigma")?
        .unwrap_or_else(|| vec![0.12, 0.22]);
    if sigma.len() != 2 {
        return Err(vox4d::Error::Config(format!(
            "sigma needs 2 values (lo,hi), got {}",
            sigma.len()
        )));
    }
    let spacing: f64 = cfg.get_or("spacing", 2.0)?;
    let tr: f64 = cfg.get_or("tr", 0.8)?;
    let labels: bool = cfg.get_bool_or("labels", true)?;

    let dir = make_run_dir(args, seed)?;
    write_resolved(&dir, &cfg)?;

    let synth_cfg = SynthConfig {
        dims,
        n_networks: networks,
        noise_sd,
        sigma_range: (sigma[0], sigma[1]),
        spacing_mm: (spacing, spacing, spacing),
        tr_seconds: tr,
    };
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let item_seed = seed.wrapping_add(i as u64);
        let (vol, latents) = synth_fmri(item_seed, &synth_cfg)?;
        let name = format!("vol_{i:04}.nii");
        std::fs::write(dir.join(&name), write_nifti1(&vol))?;
        let amp0 = latents.amplitudes[0] as f64;
        records.push(SynthManifestRecord {
            seed: item_seed,
            dims,
            noise_sd,
            networks,
            sigma_range: (sigma[0], sigma[1]),
            path: name,
            class_label: labels.then(|| if amp0 >= 0.0 { "pos" } else { "neg" }.to_string()),
            target: labels.then_some(amp0),
        });
    }
    write_jsonl(&dir.join("manifest.jsonl"), &records)?;
    info(&format!(
        "wrote {count} volumes and manifest.jsonl to {}",
        dir.display()
    ));
    Ok(())
}
