//! Masked-autoencoder pretraining with redundancy dropout on encoder
//! attention.
//!
//! The encoder runs with stage-1 attention so dropout has a matrix to act on;
//! masked tokens have their patch content zeroed and are excluded as
//! attention keys / scan inputs. The decoder works at the patch grid: final
//! stage features are upsampled by ancestor, masked slots receive a learned
//! mask token, two windowed-attention blocks refine, and a linear head
//! reconstructs voxel patches. Loss is MSE on masked patches only, each
//! target patch z-scored by its own mean/sd.

pub mod redundancy;

use serde::{Deserialize, Serialize};

use crate::backbone::layout::{token_coords, token_index, WindowLayout};
use crate::backbone::{
    linear, ln_affine, sincos_4d, AttentionHook, BlockCtx, Encoder, EncoderConfig, MixerKind,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::optim::{Adam, AdamConfig, Binding, ParamStore};
use crate::tensor::{sc, Scalar, Tape, Tensor};
use crate::volume::Volume4D;
use redundancy::{DropStats, RedundancyDropout};

// ── mask plan ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct MaskPlan {
    pub ratio: f64,
    pub masked: Vec<usize>,
    pub n_tokens: usize,
}

/// Uniform random subset without replacement; |masked| = round(ratio * n).
pub fn make_mask(n_tokens: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) || ratio <= 0.0 {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0,1)")));
    }
    let n_masked = (ratio * n_tokens as f64).round() as usize;
    if n_masked == 0 || n_masked == n_tokens {
        return Err(Error::Config(format!(
            "mask ratio {ratio} leaves {} masked / {} visible tokens",
            n_masked,
            n_tokens - n_masked
        )));
    }
    let mut masked = rng.sample_without_replacement(n_tokens, n_masked);
    masked.sort_unstable();
    Ok(MaskPlan {
        ratio,
        masked,
        n_tokens,
    })
}

// ── model ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct MaeConfig {
    pub encoder: EncoderConfig,
    pub decoder_depth: usize,
    pub decoder_dim: usize,
}

impl MaeConfig {
    /// Decoder defaults: 2 blocks at C2 width, discarded after pretraining.
    pub fn new(mut encoder: EncoderConfig) -> Self {
        encoder.stage1_attention = true;
        let decoder_dim = encoder.stage_dim(1);
        MaeConfig {
            encoder,
            decoder_depth: 2,
            decoder_dim,
        }
    }
}

pub struct MaeModel {
    pub encoder: Encoder,
    pub cfg: MaeConfig,
}

impl MaeModel {
    pub fn new(cfg: MaeConfig) -> Result<Self> {
        if !cfg.encoder.stage1_attention {
            return Err(Error::Config(
                "pretraining requires stage-1 attention (redundancy dropout acts on attention)"
                    .into(),
            ));
        }
        let model = MaeModel {
            encoder: Encoder::new(cfg.encoder.clone()),
            cfg,
        };
        let dec: usize = model
            .decoder_param_shapes()
            .values()
            .map(|s| s.iter().product::<usize>())
            .sum();
        let enc = model.encoder.count_params();
        if dec >= enc {
            return Err(Error::Config(format!(
                "decoder ({dec} params) must be strictly smaller than the encoder ({enc})"
            )));
        }
        Ok(model)
    }

    fn decoder_param_shapes(&self) -> std::collections::BTreeMap<String, Vec<usize>> {
        let d = self.cfg.decoder_dim;
        let c4 = self.cfg.encoder.stage_dim(3);
        let pv = self.cfg.encoder.patch_vol();
        let r = self.cfg.encoder.mlp_ratio;
        let mut shapes = std::collections::BTreeMap::new();
        let mut put = |n: String, s: Vec<usize>| {
            shapes.insert(n, s);
        };
        let c1 = self.cfg.encoder.embed_dim;
        put("dec.in1.w".into(), vec![c1, d]);
        put("dec.in2.w".into(), vec![c4, d]);
        put("dec.in.b".into(), vec![d]);
        put("dec.mask_token".into(), vec![1, d]);
        for b in 0..self.cfg.decoder_depth {
            let p = format!("dec.b{b}.");
            put(format!("{p}ln1.g"), vec![d]);
            put(format!("{p}ln1.b"), vec![d]);
            for w in ["wq", "wk", "wv", "wo"] {
                put(format!("{p}attn.{w}"), vec![d, d]);
            }
            for bi in ["bq", "bk", "bv", "bo"] {
                put(format!("{p}attn.{bi}"), vec![d]);
            }
            put(format!("{p}ln2.g"), vec![d]);
            put(format!("{p}ln2.b"), vec![d]);
            put(format!("{p}mlp.w1"), vec![d, r * d]);
            put(format!("{p}mlp.b1"), vec![r * d]);
            put(format!("{p}mlp.w2"), vec![r * d, d]);
            put(format!("{p}mlp.b2"), vec![d]);
        }
        put("dec.out_ln.g".into(), vec![d]);
        put("dec.out_ln.b".into(), vec![d]);
        put("dec.head.w".into(), vec![d, pv]);
        put("dec.head.b".into(), vec![pv]);
        shapes
    }

    pub fn param_shapes(&self) -> std::collections::BTreeMap<String, Vec<usize>> {
        let mut shapes = self.encoder.param_shapes();
        shapes.extend(self.decoder_param_shapes());
        shapes
    }

    pub fn init_params<F: Scalar>(&self, seed: u64) -> ParamStore<F> {
        let mut store = self.encoder.init_params(seed);
        let d = self.cfg.decoder_dim;
        for (name, shape) in self.decoder_param_shapes() {
            if name.ends_with(".g") {
                let n: usize = shape.iter().product();
                store.insert(&name, vec![F::one(); n], &shape);
            } else if name.ends_with(".b")
                || name.ends_with("bq")
                || name.ends_with("bk")
                || name.ends_with("bv")
                || name.ends_with("bo")
                || name.ends_with("b1")
                || name.ends_with("b2")
            {
                store.init_zeros(&name, &shape);
            } else if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                let fan_in = shape[0] as f64;
                store.init_normal(&name, &shape, 0.2 / fan_in.sqrt(), seed);
            } else if name == "dec.head.w" {
                // small but nonzero so gradient reaches the decoder from step 0
                store.init_normal(&name, &shape, 0.02, seed);
            } else if name == "dec.mask_token" {
                store.init_normal(&name, &shape, 0.02, seed);
            } else {
                store.init_normal(&name, &shape, 1.0 / (d as f64).sqrt(), seed);
            }
        }
        store
    }

    /// Whether a parameter survives into fine-tuning checkpoints.
    pub fn is_encoder_param(name: &str) -> bool {
        !name.starts_with("dec.")
    }

    pub fn encoder_only<F: Scalar>(store: &ParamStore<F>) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (name, p) in store.iter() {
            if Self::is_encoder_param(name) {
                out.insert(name, p.data.clone(), &p.shape);
            }
        }
        out
    }

    /// Forward pass returning the scalar loss tensor. The dropout pattern is
    /// supplied through `hook`, so a fixed hook makes this a deterministic
    /// pure function (as the gradient checks require).
    pub fn forward<F: Scalar>(
        &self,
        tape: &Tape<F>,
        bind: &Binding<F>,
        vol: &Volume4D,
        mask: &MaskPlan,
        hook: Option<&dyn AttentionHook<F>>,
    ) -> Result<Tensor<F>> {
        let enc = &self.encoder;
        let input = enc.prepare_input::<F>(vol, Some(&mask.masked))?;
        let grid1 = input.grid;
        let n1: usize = grid1.iter().product();
        if mask.n_tokens != n1 {
            return Err(Error::Config(format!(
                "mask plan covers {} tokens but the volume embeds to {}",
                mask.n_tokens, n1
            )));
        }
        let opts = crate::backbone::ForwardOpts {
            prompts: None,
            hook,
        };
        let out = enc.forward(tape, bind, &input, &opts)?;

        // upsample final-stage features to the patch grid by ancestor index
        let grid4 = out.stage_grids[3];
        let up_idx: Vec<isize> = (0..n1)
            .map(|i| {
                let c = token_coords(grid1, i);
                token_index(grid4, [c[0], c[1] / 8, c[2] / 8, c[3] / 8]) as isize
            })
            .collect();
        let up = tape.gather_rows(&out.final_tokens, &up_idx)?;
        // visible-slot decoder input: per-position stage-1 content plus the
        // upsampled global feature (an implicit concat + linear)
        let from_s1 = linear(tape, &out.stage1_tokens, bind.get("dec.in1.w"), None)?;
        let from_s4 = linear(tape, &up, bind.get("dec.in2.w"), None)?;
        let mut dec = tape.add_bias(&tape.add(&from_s1, &from_s4)?, bind.get("dec.in.b"))?;

        // masked slots: learned mask token replaces content
        let d = self.cfg.decoder_dim;
        let mut vis01 = vec![F::one(); n1];
        let mut mask_idx = vec![-1isize; n1];
        for &m in &mask.masked {
            vis01[m] = F::zero();
            mask_idx[m] = 0;
        }
        let vis = Tensor::from_vec(vis01, &[n1])?;
        dec = tape.mul_rows(&dec, &vis)?;
        let mask_rows = tape.gather_rows(bind.get("dec.mask_token"), &mask_idx)?;
        dec = tape.add(&dec, &mask_rows)?;

        // decoder positional encoding
        let e: Vec<F> = sincos_4d(grid1, d).into_iter().map(sc::<F>).collect();
        dec = tape.add(&dec, &Tensor::from_vec(e, &[n1, d])?)?;

        for b in 0..self.cfg.decoder_depth {
            let layout = WindowLayout::new(grid1, self.cfg.encoder.window, b % 2 == 1);
            let ctx = BlockCtx {
                tape,
                bind,
                prefix: format!("dec.b{b}."),
                layout: &layout,
                mixer: MixerKind::Attention,
                active: None,
                stage: 100 + b, // outside encoder stages; hooks ignore it
                block: b,
                hook: None,
                reversed_scan: false,
                prompt_gate: None,
            };
            let (nd, _) = ctx.forward(&dec, None)?;
            dec = nd;
        }

        let normed = ln_affine(tape, &dec, bind.get("dec.out_ln.g"), bind.get("dec.out_ln.b"))?;
        let pred = linear(tape, &normed, bind.get("dec.head.w"), Some(bind.get("dec.head.b")))?;

        // per-patch normalized targets from the raw volume
        let (targets, _) = normalized_patch_targets::<F>(vol, self.cfg.encoder.patch);
        masked_patch_loss(tape, &pred, &targets, &mask.masked, n1)
    }
}

const PATCH_SD_GUARD: f64 = 1e-6;

/// Raw patch rows z-scored per patch (mean/sd of each target patch).
pub fn normalized_patch_targets<F: Scalar>(
    vol: &Volume4D,
    patch: [usize; 4],
) -> (Tensor<F>, [usize; 4]) {
    let (rows, grid) = crate::backbone::patch_rows_from_volume(vol, patch);
    let pv: usize = patch.iter().product();
    let n = rows.len() / pv;
    let mut data = vec![F::zero(); rows.len()];
    for i in 0..n {
        let r = &rows[i * pv..(i + 1) * pv];
        let mean = r.iter().map(|&v| v as f64).sum::<f64>() / pv as f64;
        let var = r.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / pv as f64;
        let sd = var.sqrt().max(PATCH_SD_GUARD);
        for (k, &v) in r.iter().enumerate() {
            data[i * pv + k] = sc::<F>((v as f64 - mean) / sd);
        }
    }
    (
        Tensor::from_vec(data, &[n, pv]).expect("target shape"),
        grid,
    )
}

/// Mean squared error over masked patch rows only.
pub fn masked_patch_loss<F: Scalar>(
    tape: &Tape<F>,
    pred: &Tensor<F>,
    targets: &Tensor<F>,
    masked: &[usize],
    n_tokens: usize,
) -> Result<Tensor<F>> {
    let pv = pred.shape()[1];
    let diff = tape.sub(pred, targets)?;
    let sq = tape.mul(&diff, &diff)?;
    let mut m01 = vec![F::zero(); n_tokens];
    for &m in masked {
        m01[m] = F::one();
    }
    let m = Tensor::from_vec(m01, &[n_tokens])?;
    let sel = tape.mul_rows(&sq, &m)?;
    let total = tape.sum_all(&sel)?;
    tape.scale(&total, 1.0 / (masked.len().max(1) * pv) as f64)
}

// ── training loop ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub mae: MaeConfig,
    pub mask_ratio: f64,
    pub redundancy_dropout: bool,
    pub epochs: usize,
    pub batch_size: usize,
    /// When nonzero, caps/overrides the epoch-derived step count.
    pub max_steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        PretrainConfig {
            mae: MaeConfig::new(encoder),
            mask_ratio: 0.75,
            redundancy_dropout: true,
            epochs: 1,
            batch_size: 1,
            max_steps: 0,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// One line of the loss curve (line-delimited JSON on disk).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub mean_drop_rate: f64,
}

pub struct PretrainOutcome<F: Scalar> {
    pub model: MaeModel,
    pub store: ParamStore<F>,
    pub records: Vec<LossRecord>,
}

/// Run masked-autoencoder pretraining over a set of volumes. Deterministic
/// per seed: item order, masks and dropout patterns are all derived from
/// counter-based streams.
pub fn pretrain<F: Scalar>(
    cfg: &PretrainConfig,
    volumes: &[Volume4D],
) -> Result<PretrainOutcome<F>> {
    if volumes.is_empty() {
        return Err(Error::Config("pretraining needs at least one volume".into()));
    }
    let model = MaeModel::new(cfg.mae.clone())?;
    let mut store: ParamStore<F> = model.init_params(cfg.seed);
    let mut opt: Adam<F> = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });

    let n = volumes.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut total_steps = cfg.epochs.max(1) * steps_per_epoch;
    if cfg.max_steps > 0 {
        total_steps = cfg.max_steps;
    }

    let mut records = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch = usize::MAX;

    for step in 0..total_steps {
        let e = step / steps_per_epoch;
        if e != epoch {
            epoch = e;
            let mut r = Rng::new(cfg.seed, 0x0e0c_0000 + epoch as u64);
            r.shuffle(&mut order);
        }

        let mut grad_sum: std::collections::BTreeMap<String, Vec<F>> = Default::default();
        let mut loss_sum = 0f64;
        let mut drop = DropStats::default();
        let in_epoch = step % steps_per_epoch;
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|b| order[(in_epoch * cfg.batch_size + b) % n])
            .collect();

        for (bi, &item) in batch.iter().enumerate() {
            let vol = &volumes[item];
            let tape: Tape<F> = Tape::new();
            let bind = Binding::all_trainable(&store, &tape)?;
            let grid = model.encoder.token_grid(vol.dims);
            let n_tokens: usize = grid.iter().product();
            let mut mask_rng = Rng::new(
                cfg.seed,
                0x3a5c_0000 ^ ((step as u64) << 20) ^ (bi as u64),
            );
            let mask = make_mask(n_tokens, cfg.mask_ratio, &mut mask_rng)?;

            let dropout = cfg
                .redundancy_dropout
                .then(|| RedundancyDropout::new(cfg.seed, step as u64, bi as u64));
            let hook: Option<&dyn AttentionHook<F>> =
                dropout.as_ref().map(|d| d as &dyn AttentionHook<F>);
            let loss = model.forward(&tape, &bind, vol, &mask, hook)?;
            let lv = loss.item().to_f64().unwrap();
            if !lv.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {lv} at step {step}"
                )));
            }
            loss_sum += lv;
            if let Some(d) = &dropout {
                let s = d.stats.borrow();
                drop.eligible += s.eligible;
                drop.dropped += s.dropped;
                drop.sum_w += s.sum_w;
            }
            let grads = tape.backward(&loss)?;
            let g = bind.collect_grads(&grads)?;
            for (k, v) in g {
                match grad_sum.get_mut(&k) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&v) {
                            *a += *b;
                        }
                    }
                    None => {
                        grad_sum.insert(k, v);
                    }
                }
            }
        }

        let scale = sc::<F>(1.0 / batch.len() as f64);
        for g in grad_sum.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        opt.step(&mut store, &grad_sum)?;
        records.push(LossRecord {
            step,
            epoch,
            loss: loss_sum / batch.len() as f64,
            mean_drop_rate: drop.drop_rate(),
        });
    }

    Ok(PretrainOutcome {
        model,
        store,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Variant;
    use crate::volume::synth::{synth_fmri, SynthConfig};

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            patch: [1, 2, 2, 2],
            embed_dim: 4,
            depths: [1, 1, 1, 1],
            window: [2, 2, 2, 2],
            state_dim: 2,
            mlp_ratio: 2,
            stage1_attention: true,
            variant: Variant::Base,
        }
    }

    fn tiny_vol(seed: u64) -> Volume4D {
        let cfg = SynthConfig {
            dims: (4, 8, 8, 8),
            n_networks: 2,
            noise_sd: 0.05,
            ..Default::default()
        };
        synth_fmri(seed, &cfg).unwrap().0
    }

    #[test]
    fn mask_counts_and_determinism() {
        let mut rng = Rng::new(1, 0);
        let plan = make_mask(8, 0.75, &mut rng).unwrap();
        assert_eq!(plan.masked.len(), 6);
        let mut rng2 = Rng::new(1, 0);
        let plan2 = make_mask(8, 0.75, &mut rng2).unwrap();
        assert_eq!(plan.masked, plan2.masked);
    }

    #[test]
    fn mask_degenerate_ratios_are_config_errors() {
        let mut rng = Rng::new(1, 0);
        assert!(make_mask(4, 0.05, &mut rng).is_err()); // 0 masked
        assert!(make_mask(4, 0.99, &mut rng).is_err()); // 0 visible
        assert!(make_mask(8, 1.2, &mut rng).is_err());
    }

    #[test]
    fn mask_frequency_is_calibrated() {
        let n = 16;
        let mut hits = vec![0usize; n];
        let draws = 10_000;
        for s in 0..draws {
            let mut rng = Rng::new(s as u64, 7);
            let plan = make_mask(n, 0.75, &mut rng).unwrap();
            for &m in &plan.masked {
                hits[m] += 1;
            }
        }
        for (i, &h) in hits.iter().enumerate() {
            let f = h as f64 / draws as f64;
            assert!((f - 0.75).abs() < 0.02, "token {i}: {f}");
        }
    }

    #[test]
    fn loss_zero_when_predicting_exact_targets() {
        let tape: Tape<f64> = Tape::new();
        let t = Tensor::from_f64s(&[0.5, -0.5, 1.0, 0.0, 0.25, -0.25], &[3, 2]).unwrap();
        let loss = masked_patch_loss(&tape, &t, &t, &[0, 2], 3).unwrap();
        assert_eq!(loss.item(), 0.0);
        // and strictly positive otherwise
        let off = tape.affine(&t, 1.0, 0.1).unwrap();
        let l2 = masked_patch_loss(&tape, &off, &t, &[0, 2], 3).unwrap();
        assert!(l2.item() > 0.0);
    }

    #[test]
    fn untrained_loss_is_about_one() {
        let model = MaeModel::new(MaeConfig::new(tiny_encoder())).unwrap();
        let store: ParamStore<f64> = model.init_params(3);
        let vol = tiny_vol(4);
        let tape: Tape<f64> = Tape::new();
        let bind = Binding::all_frozen(&store).unwrap();
        let grid = model.encoder.token_grid(vol.dims);
        let n: usize = grid.iter().product();
        let mut rng = Rng::new(5, 0);
        let mask = make_mask(n, 0.75, &mut rng).unwrap();
        let loss = model.forward(&tape, &bind, &vol, &mask, None).unwrap();
        let lv = loss.item();
        assert!((lv - 1.0).abs() < 0.1, "untrained loss {lv}");
    }

    #[test]
    fn decoder_smaller_than_encoder_enforced() {
        let mut cfg = MaeConfig::new(tiny_encoder());
        cfg.decoder_dim = 256;
        cfg.decoder_depth = 8;
        assert!(matches!(MaeModel::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn mae_gradient_check_with_fixed_mask() {
        use crate::tensor::gradcheck::check_gradient_multi;
        // 4-channel widths keep layernorm rows away from the zero-variance
        // kink that finite differences cannot straddle
        let enc = EncoderConfig {
            patch: [1, 2, 2, 2],
            embed_dim: 4,
            depths: [1, 1, 1, 1],
            window: [2, 2, 2, 2],
            state_dim: 2,
            mlp_ratio: 1,
            stage1_attention: true,
            variant: Variant::Base,
        };
        let mut cfg = MaeConfig::new(enc);
        cfg.decoder_depth = 1;
        cfg.decoder_dim = 4;
        let model = MaeModel::new(cfg).unwrap();
        let mut store: ParamStore<f64> = model.init_params(7);
        // jitter every parameter: finite differences need a generic point
        // (zero biases put near-constant rows on the layernorm kink), and
        // zero-init projections would leave paths without gradient signal
        let mut rng = Rng::new(9, 0);
        let names: Vec<String> = store.names().cloned().collect();
        for n in &names {
            for v in &mut store.get_mut(n).data {
                *v += rng.normal() * 0.25;
            }
        }
        let vol = tiny_vol(6);
        let grid = model.encoder.token_grid(vol.dims);
        let n_tokens: usize = grid.iter().product();
        let mut mrng = Rng::new(11, 0);
        let mask = make_mask(n_tokens, 0.5, &mut mrng).unwrap();

        let inputs: Vec<(Vec<f64>, Vec<usize>)> = names
            .iter()
            .map(|n| {
                let p = store.get(n);
                (p.data.clone(), p.shape.clone())
            })
            .collect();
        let err = check_gradient_multi(
            &|tape, xs: &[Tensor<f64>]| {
                let bind =
                    Binding::from_tensors(names.iter().cloned().zip(xs.iter().cloned()));
                model.forward(tape, &bind, &vol, &mask, None)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "MAE gradient err {err}");
    }

    #[test]
    fn pretrain_empty_stream_is_config_error() {
        let cfg = PretrainConfig::new(tiny_encoder());
        assert!(matches!(
            pretrain::<f32>(&cfg, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pretrain_few_steps_runs_and_is_deterministic() {
        let mut cfg = PretrainConfig::new(tiny_encoder());
        cfg.max_steps = 3;
        cfg.redundancy_dropout = true;
        cfg.seed = 21;
        let vols = vec![tiny_vol(1), tiny_vol(2)];
        let a = pretrain::<f32>(&cfg, &vols).unwrap();
        let b = pretrain::<f32>(&cfg, &vols).unwrap();
        assert_eq!(a.records.len(), 3);
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
        assert_eq!(a.store.content_hash(), b.store.content_hash());
        assert!(a.records.iter().all(|r| r.loss.is_finite()));
        assert!(a.records[0].mean_drop_rate > 0.0);
    }
}

