//! Geometric and statistical preprocessing: resampling, crop/pad,
//! intensity normalization, ROI timeseries, connectivity.

use crate::error::{Error, Result};
use crate::volume::{ConnectivityMatrix, LabelVolume, Volume4D};

/// Output length preserving physical extent (n-1)*spacing.
fn resampled_len(n: usize, s_in: f64, s_out: f64) -> usize {
    (((n - 1) as f64 * s_in / s_out).round() as usize + 1).max(1)
}

/// Linear interpolation of `src` sampled at coordinate `c` (in source index
/// units), clamped at the borders.
#[inline]
fn lerp_at(src: &[f32], c: f64) -> f32 {
    let last = src.len() - 1;
    if c <= 0.0 {
        return src[0];
    }
    if c >= last as f64 {
        return src[last];
    }
    let i = c.floor() as usize;
    let frac = (c - i as f64) as f32;
    src[i] * (1.0 - frac) + src[i + 1] * frac
}

/// Spatial trilinear interpolation per frame, then linear interpolation of
/// each voxel series to the target TR. Constant fields map to constant
/// fields; single-voxel axes extend by nearest value.
pub fn resample_trilinear(
    v: &Volume4D,
    target_spacing: (f64, f64, f64),
    target_tr: f64,
) -> Result<Volume4D> {
    if target_spacing.0 <= 0.0 || target_spacing.1 <= 0.0 || target_spacing.2 <= 0.0 || target_tr <= 0.0
    {
        return Err(Error::Config(format!(
            "resample targets must be positive: spacing {target_spacing:?}, tr {target_tr}"
        )));
    }
    let (t, x, y, z) = v.dims;
    let (sx, sy, sz) = v.spacing_mm;
    let nx = resampled_len(x, sx, target_spacing.0);
    let ny = resampled_len(y, sy, target_spacing.1);
    let nz = resampled_len(z, sz, target_spacing.2);

    // spatial pass
    let ratio = (
        target_spacing.0 / sx,
        target_spacing.1 / sy,
        target_spacing.2 / sz,
    );
    let mut spatial = vec![0f32; t * nx * ny * nz];
    for ti in 0..t {
        let frame = v.frame(ti);
        for zi in 0..nz {
            let cz = zi as f64 * ratio.2;
            let (z0, fz) = clamp_floor(cz, z);
            for yi in 0..ny {
                let cy = yi as f64 * ratio.1;
                let (y0, fy) = clamp_floor(cy, y);
                for xi in 0..nx {
                    let cx = xi as f64 * ratio.0;
                    let (x0, fx) = clamp_floor(cx, x);
                    let mut acc = 0f64;
                    for (dz, wz) in [(0usize, 1.0 - fz), (1, fz)] {
                        if wz == 0.0 {
                            continue;
                        }
                        let zc = (z0 + dz).min(z - 1);
                        for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
                            if wy == 0.0 {
                                continue;
                            }
                            let yc = (y0 + dy).min(y - 1);
                            for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                                if wx == 0.0 {
                                    continue;
                                }
                                let xc = (x0 + dx).min(x - 1);
                                acc += wz * wy * wx * frame[(zc * y + yc) * x + xc] as f64;
                            }
                        }
                    }
                    spatial[((ti * nz + zi) * ny + yi) * nx + xi] = acc as f32;
                }
            }
        }
    }

    // temporal pass
    let nt = resampled_len(t, v.tr_seconds, target_tr);
    let frame_len = nx * ny * nz;
    let tratio = target_tr / v.tr_seconds;
    let mut data = vec![0f32; nt * frame_len];
    let mut series = vec![0f32; t];
    for vi in 0..frame_len {
        for ti in 0..t {
            series[ti] = spatial[ti * frame_len + vi];
        }
        for (oi, out_frame) in data.chunks_mut(frame_len).enumerate() {
            out_frame[vi] = lerp_at(&series, oi as f64 * tratio);
        }
    }
    Volume4D::new((nt, nx, ny, nz), target_spacing, target_tr, data)
}

fn clamp_floor(c: f64, n: usize) -> (usize, f64) {
    if c <= 0.0 {
        (0, 0.0)
    } else if c >= (n - 1) as f64 {
        (n - 1, 0.0)
    } else {
        let i = c.floor() as usize;
        (i, c - i as f64)
    }
}

/// Centered crop/zero-pad of the spatial axes to exactly `target_xyz`.
/// When the size change is odd the extra voxel goes to the high-index side.
pub fn crop_or_pad(v: &Volume4D, target_xyz: (usize, usize, usize)) -> Result<Volume4D> {
    let (tx, ty, tz) = target_xyz;
    if tx == 0 || ty == 0 || tz == 0 {
        return Err(Error::Config(format!(
            "crop_or_pad target must be positive, got {target_xyz:?}"
        )));
    }
    let (t, x, y, z) = v.dims;
    // src = out + shift; truncating division yields the centering rule
    let shift_x = (x as isize - tx as isize) / 2;
    let shift_y = (y as isize - ty as isize) / 2;
    let shift_z = (z as isize - tz as isize) / 2;
    let mut data = vec![0f32; t * tx * ty * tz];
    for ti in 0..t {
        for zo in 0..tz {
            let zs = zo as isize + shift_z;
            if zs < 0 || zs >= z as isize {
                continue;
            }
            for yo in 0..ty {
                let ys = yo as isize + shift_y;
                if ys < 0 || ys >= y as isize {
                    continue;
                }
                for xo in 0..tx {
                    let xs = xo as isize + shift_x;
                    if xs < 0 || xs >= x as isize {
                        continue;
                    }
                    data[((ti * tz + zo) * ty + yo) * tx + xo] =
                        v.at(ti, xs as usize, ys as usize, zs as usize);
                }
            }
        }
    }
    Volume4D::new((t, tx, ty, tz), v.spacing_mm, v.tr_seconds, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalizeMode {
    GlobalZscore,
    PerVoxelZscore,
}

#[derive(Clone, Debug)]
pub enum NormStats {
    Global { mean: f64, sd: f64 },
    /// Per spatial voxel (mean, sd) across time.
    PerVoxel(Vec<(f64, f64)>),
}

const SD_GUARD: f64 = 1e-12;

/// Z-score the volume; zero-variance voxels map to 0. Returns the recorded
/// statistics so predictions can be mapped back.
pub fn normalize_intensity(v: &Volume4D, mode: NormalizeMode) -> Result<(Volume4D, NormStats)> {
    match mode {
        NormalizeMode::GlobalZscore => {
            let n = v.data.len() as f64;
            let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = v
                .data
                .iter()
                .map(|&x| (x as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            let sd = var.sqrt();
            let data = if sd < SD_GUARD {
                vec![0f32; v.data.len()]
            } else {
                v.data
                    .iter()
                    .map(|&x| ((x as f64 - mean) / sd) as f32)
                    .collect()
            };
            let out = Volume4D::new(v.dims, v.spacing_mm, v.tr_seconds, data)?;
            Ok((out, NormStats::Global { mean, sd }))
        }
        NormalizeMode::PerVoxelZscore => {
            let (t, ..) = v.dims;
            let fl = v.frame_len();
            let mut stats = Vec::with_capacity(fl);
            let mut data = vec![0f32; v.data.len()];
            for vi in 0..fl {
                let mut mean = 0f64;
                for ti in 0..t {
                    mean += v.data[ti * fl + vi] as f64;
                }
                mean /= t as f64;
                let mut var = 0f64;
                for ti in 0..t {
                    var += (v.data[ti * fl + vi] as f64 - mean).powi(2);
                }
                var /= t as f64;
                let sd = var.sqrt();
                stats.push((mean, sd));
                if sd >= SD_GUARD {
                    for ti in 0..t {
                        data[ti * fl + vi] = ((v.data[ti * fl + vi] as f64 - mean) / sd) as f32;
                    }
                }
            }
            let out = Volume4D::new(v.dims, v.spacing_mm, v.tr_seconds, data)?;
            Ok((out, NormStats::PerVoxel(stats)))
        }
    }
}

/// Row r-1 is the per-frame mean over voxels labeled r. Returns a row-major
/// R×T matrix.
pub fn roi_timeseries(v: &Volume4D, atlas: &LabelVolume) -> Result<Vec<Vec<f64>>> {
    let (t, x, y, z) = v.dims;
    if atlas.dims != (x, y, z) {
        return Err(Error::Data(format!(
            "atlas dims {:?} do not match volume spatial dims {:?}",
            atlas.dims,
            (x, y, z)
        )));
    }
    let r = atlas.n_rois;
    let mut counts = vec![0usize; r + 1];
    for &l in &atlas.labels {
        counts[l as usize] += 1;
    }
    for roi in 1..=r {
        if counts[roi] == 0 {
            return Err(Error::Data(format!("ROI {roi} has no voxels")));
        }
    }
    let fl = v.frame_len();
    let mut out = vec![vec![0f64; t]; r];
    for ti in 0..t {
        let frame = &v.data[ti * fl..(ti + 1) * fl];
        let mut sums = vec![0f64; r + 1];
        for (vi, &l) in atlas.labels.iter().enumerate() {
            if l > 0 {
                sums[l as usize] += frame[vi] as f64;
            }
        }
        for roi in 1..=r {
            out[roi - 1][ti] = sums[roi] / counts[roi] as f64;
        }
    }
    Ok(out)
}

pub const FISHER_CLAMP: f64 = 1.0 - 1e-7;

/// Pearson correlations per ROI pair with the Fisher transform
/// z = atanh(clamp(r)). Unit diagonal exactly; zero-variance rows are a
/// data error naming the ROI.
pub fn connectivity(ts: &[Vec<f64>]) -> Result<ConnectivityMatrix> {
    let r = ts.len();
    if r == 0 {
        return Err(Error::Data("connectivity of zero ROIs".into()));
    }
    let t = ts[0].len();
    if t < 3 {
        return Err(Error::Data(format!(
            "connectivity needs at least 3 frames, got {t}"
        )));
    }
    let mut centered = Vec::with_capacity(r);
    let mut norms = Vec::with_capacity(r);
    for (i, row) in ts.iter().enumerate() {
        if row.len() != t {
            return Err(Error::Data("ragged timeseries matrix".into()));
        }
        let mean = row.iter().sum::<f64>() / t as f64;
        let c: Vec<f64> = row.iter().map(|v| v - mean).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < SD_GUARD {
            return Err(Error::Data(format!("ROI {} has zero variance", i + 1)));
        }
        centered.push(c);
        norms.push(norm);
    }
    let mut rmat = vec![0f64; r * r];
    let mut zmat = vec![0f64; r * r];
    for i in 0..r {
        rmat[i * r + i] = 1.0;
        zmat[i * r + i] = FISHER_CLAMP.atanh();
        for j in (i + 1)..r {
            let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            let c = dot / (norms[i] * norms[j]);
            let z = c.clamp(-FISHER_CLAMP, FISHER_CLAMP).atanh();
            rmat[i * r + j] = c;
            rmat[j * r + i] = c;
            zmat[i * r + j] = z;
            zmat[j * r + i] = z;
        }
    }
    Ok(ConnectivityMatrix {
        n: r,
        r: rmat,
        z: zmat,
    })
}
