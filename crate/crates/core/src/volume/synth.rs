//! Synthetic 4D data: smooth low-rank spatial networks with band-limited
//! timecourses plus Gaussian noise. Stands in for real acquisitions at desk
//! scale; the generating latents are returned so tests can use them as
//! ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::Volume4D;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub dims: (usize, usize, usize, usize),
    pub n_networks: usize,
    pub noise_sd: f64,
    /// Blob width range as a fraction of the smallest spatial dim.
    pub sigma_range: (f64, f64),
    pub spacing_mm: (f64, f64, f64),
    pub tr_seconds: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dims: (32, 16, 16, 16),
            n_networks: 3,
            noise_sd: 0.1,
            sigma_range: (0.12, 0.22),
            spacing_mm: (2.0, 2.0, 2.0),
            tr_seconds: 0.8,
        }
    }
}

/// Ground-truth latents behind a synthetic volume.
#[derive(Clone, Debug)]
pub struct SynthLatents {
    /// Per network: spatial map over (z, y, x), x fastest; length X·Y·Z.
    pub maps: Vec<Vec<f32>>,
    /// Per network: timecourse of length T, zero mean, unit RMS.
    pub timecourses: Vec<Vec<f32>>,
    /// Per network: scalar amplitude multiplying the separable term.
    pub amplitudes: Vec<f32>,
}

/// volume = sum_k amplitude_k * map_k ⊗ timecourse_k + noise. Deterministic
/// per seed. Amplitudes are drawn in ±[0.8, 1.2]; their signs are usable as
/// synthetic class labels downstream.
pub fn synth_fmri(seed: u64, cfg: &SynthConfig) -> Result<(Volume4D, SynthLatents)> {
    let (t, x, y, z) = cfg.dims;
    if t == 0 || x == 0 || y == 0 || z == 0 || cfg.n_networks == 0 {
        return Err(Error::Config(format!(
            "synth_fmri needs positive dims and networks, got {:?} x {}",
            cfg.dims, cfg.n_networks
        )));
    }
    let mut rng_maps = Rng::new(seed, 1);
    let mut rng_tc = Rng::new(seed, 2);
    let mut rng_noise = Rng::new(seed, 3);
    let mut rng_amp = Rng::new(seed, 4);

    let spatial = x * y * z;
    let mut maps = Vec::with_capacity(cfg.n_networks);
    for k in 0..cfg.n_networks {
        // One Gaussian blob per network. Network 0 is the anchor: fixed
        // center, so its amplitude sign is an identifiable class signal;
        // the rest land at random positions away from the border.
        let (cx, cy, cz, sig) = if k == 0 {
            (
                x as f64 / 2.0,
                y as f64 / 2.0,
                z as f64 / 2.0,
                0.5 * (cfg.sigma_range.0 + cfg.sigma_range.1) * x.min(y).min(z) as f64,
            )
        } else {
            (
                rng_maps.uniform_in(0.25 * x as f64, 0.75 * x as f64),
                rng_maps.uniform_in(0.25 * y as f64, 0.75 * y as f64),
                rng_maps.uniform_in(0.25 * z as f64, 0.75 * z as f64),
                rng_maps.uniform_in(cfg.sigma_range.0, cfg.sigma_range.1)
                    * x.min(y).min(z) as f64,
            )
        };
        let mut map = vec![0f32; spatial];
        for zi in 0..z {
            for yi in 0..y {
                for xi in 0..x {
                    let d2 = ((xi as f64 - cx) / sig).powi(2)
                        + ((yi as f64 - cy) / sig).powi(2)
                        + ((zi as f64 - cz) / sig).powi(2);
                    map[(zi * y + yi) * x + xi] = (-0.5 * d2).exp() as f32;
                }
            }
        }
        maps.push(map);
    }

    // Distinct integer frequencies keep the timecourses near-orthogonal.
    let max_freq = (t / 4).max(2);
    let freqs = rng_tc.sample_without_replacement(max_freq - 1, cfg.n_networks.min(max_freq - 1));
    let mut timecourses = Vec::with_capacity(cfg.n_networks);
    for k in 0..cfg.n_networks {
        let f1 = (freqs.get(k).copied().unwrap_or(k % max_freq) + 1) as f64;
        let phase = rng_tc.uniform_in(0.0, std::f64::consts::TAU);
        // the anchor timecourse rides on a positive baseline; without one,
        // (amp, phase) and (-amp, phase+pi) generate identical volumes and
        // the amplitude sign would be unlearnable
        let dc = if k == 0 { 0.6 } else { 0.0 };
        let mut tc: Vec<f64> = (0..t)
            .map(|ti| dc + (std::f64::consts::TAU * f1 * ti as f64 / t as f64 + phase).sin())
            .collect();
        if k > 0 {
            // exact zero mean for non-anchor networks
            let mean = tc.iter().sum::<f64>() / t as f64;
            for v in &mut tc {
                *v -= mean;
            }
        }
        let rms = (tc.iter().map(|v| v * v).sum::<f64>() / t as f64).sqrt().max(1e-12);
        timecourses.push(tc.iter().map(|v| (v / rms) as f32).collect::<Vec<f32>>());
    }

    let amplitudes: Vec<f32> = (0..cfg.n_networks)
        .map(|_| {
            let mag = rng_amp.uniform_in(0.8, 1.2) as f32;
            if rng_amp.bernoulli(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();

    let mut data = vec![0f32; t * spatial];
    for k in 0..cfg.n_networks {
        let amp = amplitudes[k];
        for ti in 0..t {
            let w = amp * timecourses[k][ti];
            let frame = &mut data[ti * spatial..(ti + 1) * spatial];
            for (d, &m) in frame.iter_mut().zip(&maps[k]) {
                *d += w * m;
            }
        }
    }
    if cfg.noise_sd > 0.0 {
        for d in &mut data {
            *d += (rng_noise.normal() * cfg.noise_sd) as f32;
        }
    }

    let vol = Volume4D::new(cfg.dims, cfg.spacing_mm, cfg.tr_seconds, data)?;
    Ok((
        vol,
        SynthLatents {
            maps,
            timecourses,
            amplitudes,
        },
    ))
}

fn default_sigma() -> (f64, f64) {
    (0.12, 0.22)
}

/// Manifest record for one generated volume (line-delimited JSON).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthManifestRecord {
    pub seed: u64,
    pub dims: (usize, usize, usize, usize),
    pub noise_sd: f64,
    #[serde(default)]
    pub networks: usize,
    #[serde(default = "default_sigma")]
    pub sigma_range: (f64, f64),
    pub path: String,
    /// Synthetic labels derived from latent amplitudes, for downstream tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
}
