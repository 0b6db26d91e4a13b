//! Geometric/statistical preprocessing of a volume manifest: resample to a
//! target spacing/TR, crop or pad to target spatial dims, z-score, and
//! (optionally) emit atlas connectivity matrices.

use vox4d::error::{Error, Result};
use vox4d::volume::nifti::{parse_nifti1, write_nifti1};
use vox4d::volume::preprocess::{
    connectivity, crop_or_pad, normalize_intensity, resample_trilinear, roi_timeseries,
    NormalizeMode,
};
use vox4d::volume::{LabelVolume, Volume4D};

use crate::common::{info, load_config, load_volumes, make_run_dir, read_manifest, write_jsonl, write_resolved};
use crate::CommonArgs;

const KEYS: &[&str] = &[
    "manifest", "spacing", "tr", "dims", "normalize", "atlas", "seed",
];

fn atlas_from_volume(v: &Volume4D) -> Result<LabelVolume> {
    if v.dims.0 != 1 {
        return Err(Error::Data(format!(
            "atlas must be a 3-d volume, got T={}",
            v.dims.0
        )));
    }
    let labels: Vec<u32> = v
        .data
        .iter()
        .map(|&x| {
            let r = x.round();
            if r < 0.0 {
                0
            } else {
                r as u32
            }
        })
        .collect();
    let n_rois = labels.iter().copied().max().unwrap_or(0) as usize;
    if n_rois == 0 {
        return Err(Error::Data("atlas has no nonzero labels".into()));
    }
    LabelVolume::new((v.dims.1, v.dims.2, v.dims.3), labels, n_rois)
}

pub fn run(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args, KEYS)?;
    let manifest_path = std::path::PathBuf::from(cfg.require_str("manifest")?);
    let spacing: Option<Vec<f64>> = cfg.get_list("spacing")?;
    let tr: Option<f64> = cfg.get("tr")?;
    let dims: Option<Vec<usize>> = cfg.get_list("dims")?;
    let normalize = cfg.get_str("normalize").unwrap_or("global");
    let atlas_path = cfg.get_str("atlas").map(str::to_string);
    let seed: u64 = cfg.get_or("seed", 0)?;

    let dir = make_run_dir(args, seed)?;
    write_resolved(&dir, &cfg)?;

    let (mut records, base) = read_manifest(&manifest_path)?;
    let volumes = load_volumes(&records, &base)?;

    let atlas = match &atlas_path {
        Some(p) => {
            let bytes = std::fs::read(base.join(p))
                .or_else(|_| std::fs::read(p))
                .map_err(|e| Error::Data(format!("cannot read atlas {p}: {e}")))?;
            Some(atlas_from_volume(&parse_nifti1(&bytes)?)?)
        }
        None => None,
    };

    for (i, vol) in volumes.iter().enumerate() {
        let mut v = vol.clone();
        if spacing.is_some() || tr.is_some() {
            let sp = match &spacing {
                Some(s) if s.len() == 3 => (s[0], s[1], s[2]),
                Some(s) if s.len() == 1 => (s[0], s[0], s[0]),
                Some(s) => {
                    return Err(Error::Config(format!(
                        "spacing needs 1 or 3 values, got {}",
                        s.len()
                    )))
                }
                None => v.spacing_mm,
            };
            v = resample_trilinear(&v, sp, tr.unwrap_or(v.tr_seconds))?;
        }
        if let Some(d) = &dims {
            if d.len() != 3 {
                return Err(Error::Config(format!(
                    "dims needs 3 values, got {}",
                    d.len()
                )));
            }
            v = crop_or_pad(&v, (d[0], d[1], d[2]))?;
        }
        match normalize {
            "global" => v = normalize_intensity(&v, NormalizeMode::GlobalZscore)?.0,
            "per-voxel" => v = normalize_intensity(&v, NormalizeMode::PerVoxelZscore)?.0,
            "none" => {}
            other => {
                return Err(Error::Config(format!(
                    "normalize must be global, per-voxel or none, got `{other}`"
                )))
            }
        }
        let name = format!("proc_{i:04}.nii");
        std::fs::write(dir.join(&name), write_nifti1(&v))?;
        records[i].path = name;
        records[i].dims = v.dims;

        if let Some(atlas) = &atlas {
            let ts = roi_timeseries(&v, atlas)?;
            let conn = connectivity(&ts)?;
            let mut csv = String::new();
            for r in 0..conn.n {
                let row: Vec<String> = (0..conn.n)
                    .map(|c| format!("{:.9}", conn.z_at(r, c)))
                    .collect();
                csv.push_str(&row.join(","));
                csv.push('\n');
            }
            std::fs::write(dir.join(format!("connectivity_{i:04}.csv")), csv)?;
        }
    }
    write_jsonl(&dir.join("manifest.jsonl"), &records)?;
    info(&format!(
        "preprocessed {} volumes into {}",
        volumes.len(),
        dir.display()
    ));
    Ok(())
}
