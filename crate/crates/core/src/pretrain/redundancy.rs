//! Spatiotemporal redundancy dropout on window attention.
//!
//! For each attention row i inside a window, the spatial index set Omega_s(i)
//! holds same-frame tokens and the temporal set Omega_t(i) holds same-location
//! tokens at other frames. With Ahat the row-softmax of the logits,
//!
//! ```text
//!   f_spat(i) = max_{j in Omega_s(i)} Ahat[i,j]
//!   f_temp(i) = max_{j in Omega_t(i)} Ahat[i,j]
//!   W[i,j] = 1/2 ( f_temp(i)*Ahat[i,j] / sum_{Omega_s(i)} Ahat[i,.]
//!                + f_spat(i)*Ahat[i,j] / sum_{Omega_t(i)} Ahat[i,.] )
//! ```
//!
//! evaluated for j in Omega_s(i) ∪ Omega_t(i), zero elsewhere and at j = i.
//! Both terms are evaluated at every eligible j; the raw value can then
//! exceed 1 in near-one-hot rows, so sampling clamps to [0,1]. Entries are
//! dropped by independent Bernoulli draws and set to -inf before re-softmax;
//! pretraining only. Rows whose temporal (or spatial) set is empty are
//! skipped entirely.

use std::cell::RefCell;

use crate::backbone::layout::WindowLayout;
use crate::backbone::{AttentionHook, NEG_MASK};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::ops::softmax_rows_data;
use crate::tensor::{sc, Scalar, Tensor};

/// Spatial/temporal neighbor slots per in-window slot. Pad slots get empty
/// sets and never participate.
#[derive(Clone, Debug, Default)]
pub struct OmegaSets {
    pub omega_s: Vec<Vec<usize>>,
    pub omega_t: Vec<Vec<usize>>,
}

impl OmegaSets {
    /// Build from explicit per-slot (frame, location) ids; `None` marks pads.
    /// Slots share a frame id -> spatial neighbors; share a location id at a
    /// different frame -> temporal neighbors.
    pub fn from_ids(ids: &[Option<(usize, usize)>]) -> OmegaSets {
        let n = ids.len();
        let mut omega_s = vec![Vec::new(); n];
        let mut omega_t = vec![Vec::new(); n];
        for i in 0..n {
            let Some((fi, li)) = ids[i] else { continue };
            for (j, id) in ids.iter().enumerate() {
                if i == j {
                    continue;
                }
                let Some((fj, lj)) = *id else { continue };
                if fj == fi {
                    omega_s[i].push(j);
                } else if lj == li {
                    omega_t[i].push(j);
                }
            }
        }
        OmegaSets { omega_s, omega_t }
    }

    /// Sets for one window of a layout: frame id = global t, location id =
    /// global (x,y,z) collapsed to the spatial token index.
    pub fn for_window(layout: &WindowLayout, w: usize) -> OmegaSets {
        let [_, gx, gy, _] = layout.grid;
        let ids: Vec<Option<(usize, usize)>> = layout
            .slot_coords(w)
            .into_iter()
            .map(|c| c.map(|[t, x, y, z]| (t, (z * gy + y) * gx + x)))
            .collect();
        Self::from_ids(&ids)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.omega_s.len();
        for i in 0..n {
            if self.omega_s[i].contains(&i) || self.omega_t[i].contains(&i) {
                return Err(Error::Contract(format!("slot {i} is its own neighbor")));
            }
            for j in &self.omega_s[i] {
                if self.omega_t[i].contains(j) {
                    return Err(Error::Contract(format!(
                        "slot {j} in both index sets of {i}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One window's attention row context: row-softmax probabilities plus the
/// index sets, everything evaluated in f64.
#[derive(Clone, Debug)]
pub struct RedundancyContext {
    pub n: usize,
    /// Row-softmax of the logits, [n*n].
    pub ahat: Vec<f64>,
    pub sets: OmegaSets,
}

impl RedundancyContext {
    pub fn from_logits(logits: &[f64], n: usize, sets: OmegaSets) -> RedundancyContext {
        debug_assert_eq!(logits.len(), n * n);
        let ahat = softmax_rows_data(logits, n);
        RedundancyContext { n, ahat, sets }
    }

    /// (f_spat, f_temp) for row i: maxima of Ahat over the index sets.
    /// Empty sets are a degenerate-token error; the dropout builder skips
    /// such rows instead of calling this.
    pub fn matching_probabilities(&self, i: usize) -> Result<(f64, f64)> {
        let row = &self.ahat[i * self.n..(i + 1) * self.n];
        let max_over = |set: &[usize], name: &str| -> Result<f64> {
            set.iter()
                .map(|&j| row[j])
                .fold(None, |acc: Option<f64>, v| {
                    Some(acc.map_or(v, |a| a.max(v)))
                })
                .ok_or_else(|| {
                    Error::Contract(format!("row {i}: empty {name} index set (degenerate token)"))
                })
        };
        let f_spat = max_over(&self.sets.omega_s[i], "spatial")?;
        let f_temp = max_over(&self.sets.omega_t[i], "temporal")?;
        Ok((f_spat, f_temp))
    }

    /// Per-entry dropout probabilities: the literal formula, evaluated for
    /// j in Omega_s(i) ∪ Omega_t(i), zero elsewhere and at j = i. Values can
    /// exceed 1 whenever an index set carries little attention mass; sampling
    /// clamps (see [`clamp01`] / [`sample_dropout`]).
    pub fn dropout_probabilities(&self) -> Vec<f64> {
        let n = self.n;
        let mut w = vec![0f64; n * n];
        for i in 0..n {
            let os = &self.sets.omega_s[i];
            let ot = &self.sets.omega_t[i];
            if os.is_empty() || ot.is_empty() {
                continue; // skipped row: W stays zero
            }
            let row = &self.ahat[i * n..(i + 1) * n];
            let f_spat = os.iter().map(|&j| row[j]).fold(f64::MIN, f64::max);
            let f_temp = ot.iter().map(|&j| row[j]).fold(f64::MIN, f64::max);
            let sum_s: f64 = os.iter().map(|&j| row[j]).sum();
            let sum_t: f64 = ot.iter().map(|&j| row[j]).sum();
            for &j in os.iter().chain(ot.iter()) {
                w[i * n + j] = 0.5 * (f_temp * row[j] / sum_s + f_spat * row[j] / sum_t);
            }
        }
        w
    }

    /// Type invariants on a sampling-ready (clamped) W matrix.
    pub fn validate(&self, w: &[f64]) -> Result<()> {
        let n = self.n;
        self.sets.validate()?;
        for i in 0..n {
            for j in 0..n {
                let v = w[i * n + j];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Contract(format!("W[{i},{j}] = {v} outside [0,1]")));
                }
                let eligible =
                    self.sets.omega_s[i].contains(&j) || self.sets.omega_t[i].contains(&j);
                if !eligible && v != 0.0 {
                    return Err(Error::Contract(format!(
                        "W[{i},{j}] = {v} outside Omega_s ∪ Omega_t"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Probabilities clamped into [0,1] for Bernoulli sampling.
pub fn clamp01(w: &[f64]) -> Vec<f64> {
    w.iter().map(|&v| v.clamp(0.0, 1.0)).collect()
}

/// Independent Bernoulli(clamp(W)) draws; true = dropped.
pub fn sample_dropout(w: &[f64], rng: &mut Rng) -> Vec<bool> {
    w.iter()
        .map(|&p| p > 0.0 && rng.bernoulli(p.min(1.0)))
        .collect()
}

/// Running statistics over one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct DropStats {
    pub eligible: usize,
    pub dropped: usize,
    pub sum_w: f64,
}

impl DropStats {
    pub fn drop_rate(&self) -> f64 {
        if self.eligible == 0 {
            0.0
        } else {
            self.dropped as f64 / self.eligible as f64
        }
    }
    pub fn mean_w(&self) -> f64 {
        if self.eligible == 0 {
            0.0
        } else {
            self.sum_w / self.eligible as f64
        }
    }
}

/// Attention hook applying redundancy dropout to encoder attention blocks
/// during pretraining. Dropout PRNG streams are keyed per
/// (seed, step, item, stage, block, window) so batch order cannot change
/// results.
pub struct RedundancyDropout {
    pub seed: u64,
    pub step: u64,
    pub item: u64,
    pub stats: RefCell<DropStats>,
}

impl RedundancyDropout {
    pub fn new(seed: u64, step: u64, item: u64) -> Self {
        RedundancyDropout {
            seed,
            step,
            item,
            stats: RefCell::new(DropStats::default()),
        }
    }

    fn stream(&self, stage: usize, block: usize, window: usize) -> u64 {
        // mix the coordinates into one stream id
        let mut h = self.step;
        for v in [self.item, stage as u64, block as u64, window as u64] {
            h = h
                .rotate_left(17)
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(v.wrapping_add(1));
        }
        h
    }
}

impl<F: Scalar> AttentionHook<F> for RedundancyDropout {
    fn mask(
        &self,
        stage: usize,
        block: usize,
        layout: &WindowLayout,
        extra_cols: usize,
        logits: &Tensor<F>,
    ) -> Option<Vec<F>> {
        let wl = layout.window_len;
        let cols = wl + extra_cols;
        let nw = layout.n_windows;
        debug_assert_eq!(logits.shape(), &[nw, wl, cols]);
        let data = logits.data();
        let mut mask = vec![F::zero(); data.len()];
        let mut stats = self.stats.borrow_mut();
        for w in 0..nw {
            let sets = OmegaSets::for_window(layout, w);
            // window-local logits restricted to window columns (prompt
            // columns are outside the index sets and never dropped)
            let mut local = vec![0f64; wl * wl];
            for i in 0..wl {
                for j in 0..wl {
                    local[i * wl + j] =
                        data[(w * wl + i) * cols + j].to_f64().unwrap();
                }
            }
            let ctx = RedundancyContext::from_logits(&local, wl, sets);
            let probs = clamp01(&ctx.dropout_probabilities());
            let mut rng = Rng::new(self.seed, self.stream(stage, block, w));
            for i in 0..wl {
                for j in 0..wl {
                    let p = probs[i * wl + j];
                    if p > 0.0 {
                        stats.eligible += 1;
                        stats.sum_w += p;
                        if rng.bernoulli(p) {
                            stats.dropped += 1;
                            mask[(w * wl + i) * cols + j] = sc::<F>(NEG_MASK);
                        }
                    }
                }
            }
        }
        Some(mask)
    }
}

/// Read-only probe: accumulates the mean attention mass that each hidden
/// (masked) query row places on its spatial+temporal neighbors. Used to
/// compare redundancy-dropout runs against plain runs.
pub struct NeighborMassProbe {
    /// Per-token hidden flags on the stage-1 grid.
    pub hidden: Vec<bool>,
    pub sum_mass: RefCell<f64>,
    pub rows: RefCell<usize>,
}

impl NeighborMassProbe {
    pub fn new(hidden: Vec<bool>) -> Self {
        NeighborMassProbe {
            hidden,
            sum_mass: RefCell::new(0.0),
            rows: RefCell::new(0),
        }
    }

    pub fn mean_mass(&self) -> f64 {
        let rows = *self.rows.borrow();
        if rows == 0 {
            0.0
        } else {
            *self.sum_mass.borrow() / rows as f64
        }
    }
}

impl<F: Scalar> AttentionHook<F> for NeighborMassProbe {
    fn mask(
        &self,
        stage: usize,
        _block: usize,
        layout: &WindowLayout,
        extra_cols: usize,
        logits: &Tensor<F>,
    ) -> Option<Vec<F>> {
        if stage != 0 {
            return None;
        }
        let wl = layout.window_len;
        let cols = wl + extra_cols;
        let data = logits.data();
        for w in 0..layout.n_windows {
            let sets = OmegaSets::for_window(layout, w);
            let mut local = vec![0f64; wl * wl];
            for i in 0..wl {
                for j in 0..wl {
                    local[i * wl + j] = data[(w * wl + i) * cols + j].to_f64().unwrap();
                }
            }
            let ahat = softmax_rows_data(&local, wl);
            for i in 0..wl {
                let Some(tok) = layout.slot_token(w, i) else { continue };
                if !self.hidden[tok] {
                    continue;
                }
                if sets.omega_s[i].is_empty() && sets.omega_t[i].is_empty() {
                    continue;
                }
                let mass: f64 = sets.omega_s[i]
                    .iter()
                    .chain(sets.omega_t[i].iter())
                    .map(|&j| ahat[i * wl + j])
                    .sum();
                *self.sum_mass.borrow_mut() += mass;
                *self.rows.borrow_mut() += 1;
            }
        }
        None
    }
}
