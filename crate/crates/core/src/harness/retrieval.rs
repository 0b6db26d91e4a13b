//! Retrieval protocol: rank candidates by cosine similarity, report
//! top-1/3/5 rates over repeated resampled pools (mean ± sd).

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A query set, a candidate set, and the ground-truth candidate per query.
#[derive(Clone, Debug)]
pub struct RetrievalPool {
    pub queries: Vec<Vec<f64>>,
    pub candidates: Vec<Vec<f64>>,
    pub ground_truth: Vec<usize>,
}

impl RetrievalPool {
    pub fn validate(&self) -> Result<()> {
        if self.queries.len() != self.ground_truth.len() {
            return Err(Error::Data("one ground-truth candidate per query".into()));
        }
        if self.queries.is_empty() || self.candidates.is_empty() {
            return Err(Error::Data("empty retrieval pool".into()));
        }
        for (i, g) in self.ground_truth.iter().enumerate() {
            if *g >= self.candidates.len() {
                return Err(Error::Data(format!(
                    "query {i}: ground truth {g} out of range"
                )));
            }
        }
        for (label, set) in [("query", &self.queries), ("candidate", &self.candidates)] {
            for (i, e) in set.iter().enumerate() {
                let norm2: f64 = e.iter().map(|v| v * v).sum();
                if norm2 <= 0.0 {
                    return Err(Error::Data(format!("zero-norm {label} embedding {i}")));
                }
            }
        }
        Ok(())
    }

    /// Swapped direction: the ground-truth candidates become the queries and
    /// the old queries become the candidate set (their own query being the
    /// ground truth).
    pub fn swapped(&self) -> RetrievalPool {
        RetrievalPool {
            queries: self
                .ground_truth
                .iter()
                .map(|&g| self.candidates[g].clone())
                .collect(),
            candidates: self.queries.clone(),
            ground_truth: (0..self.queries.len()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Queries rank candidates (e.g. volume embedding -> target pool).
    Forward,
    /// Ground-truth candidates rank the queries.
    Backward,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0f64;
    let mut na = 0f64;
    let mut nb = 0f64;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Top-m hit rates for a single pool: rate[m] = fraction of queries whose
/// ground truth ranks within the top m by cosine similarity.
pub fn topk_rates(pool: &RetrievalPool, ks: &[usize]) -> Result<Vec<f64>> {
    pool.validate()?;
    let mut hits = vec![0usize; ks.len()];
    for (q, gt) in pool.queries.iter().zip(&pool.ground_truth) {
        let gt_sim = cosine(q, &pool.candidates[*gt]);
        // rank of ground truth = 1 + number of strictly better candidates
        let better = pool
            .candidates
            .iter()
            .enumerate()
            .filter(|(j, c)| *j != *gt && cosine(q, c) > gt_sim)
            .count();
        let rank = better + 1;
        for (i, &k) in ks.iter().enumerate() {
            if rank <= k {
                hits[i] += 1;
            }
        }
    }
    Ok(hits
        .iter()
        .map(|&h| h as f64 / pool.queries.len() as f64)
        .collect())
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RetrievalReport {
    pub direction: String,
    pub repeats: usize,
    pub top1_mean: f64,
    pub top1_sd: f64,
    pub top3_mean: f64,
    pub top3_sd: f64,
    pub top5_mean: f64,
    pub top5_sd: f64,
}

impl RetrievalReport {
    /// Monotonicity holds on every report: top1 <= top3 <= top5.
    pub fn validate(&self) -> Result<()> {
        if self.top1_mean > self.top3_mean + 1e-12 || self.top3_mean > self.top5_mean + 1e-12 {
            return Err(Error::Contract(format!(
                "top-m rates must be nondecreasing: {} / {} / {}",
                self.top1_mean, self.top3_mean, self.top5_mean
            )));
        }
        Ok(())
    }
}

/// Evaluate top-1/3/5 over `repeats` pools produced by `make_pool(repeat)`,
/// reporting mean ± sd. Each repeat sees a fresh pool (resampling is the
/// caller's policy).
pub fn retrieval_eval(
    make_pool: &dyn Fn(u64) -> Result<RetrievalPool>,
    direction: Direction,
    repeats: usize,
) -> Result<RetrievalReport> {
    if repeats == 0 {
        return Err(Error::Config("retrieval needs at least one repeat".into()));
    }
    let ks = [1usize, 3, 5];
    let mut rates = vec![Vec::with_capacity(repeats); ks.len()];
    for rep in 0..repeats {
        let pool = make_pool(rep as u64)?;
        let pool = match direction {
            Direction::Forward => pool,
            Direction::Backward => pool.swapped(),
        };
        for (i, r) in topk_rates(&pool, &ks)?.into_iter().enumerate() {
            rates[i].push(r);
        }
    }
    let stat = |xs: &[f64]| -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (m1, s1) = stat(&rates[0]);
    let (m3, s3) = stat(&rates[1]);
    let (m5, s5) = stat(&rates[2]);
    let report = RetrievalReport {
        direction: match direction {
            Direction::Forward => "forward".into(),
            Direction::Backward => "backward".into(),
        },
        repeats,
        top1_mean: m1,
        top1_sd: s1,
        top3_mean: m3,
        top3_sd: s3,
        top5_mean: m5,
        top5_sd: s5,
    };
    report.validate()?;
    Ok(report)
}

// ── paired-encoder training mode ───────────────────────────────────────
//
// Builds the embedding pairs the retrieval protocol needs: a volume encoder
// (prompt + embedding head over a frozen backbone) aligned to a per-item
// target-embedding table with a cosine loss. Table rows of training items
// are trainable; held-out items keep their initial latent-derived targets
// and serve as ground-truth candidates.

use crate::backbone::EncoderConfig;
use crate::prompt::{HeadSpec, TuneModel};
use crate::tensor::optim::{Adam, AdamConfig, Binding, ParamStore};
use crate::tensor::{sc, Scalar, Tape};
use crate::volume::Volume4D;

#[derive(Clone, Debug)]
pub struct PairedTrainConfig {
    pub emb_dim: usize,
    pub k_prompts: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PairedTrainConfig {
    fn default() -> Self {
        PairedTrainConfig {
            emb_dim: 32,
            k_prompts: 8,
            steps: 200,
            batch_size: 4,
            lr: 3e-3,
            seed: 0,
        }
    }
}

pub struct PairedOutcome<F: Scalar> {
    pub model: TuneModel,
    pub store: ParamStore<F>,
    pub loss_curve: Vec<f64>,
}

/// Train encoder-side embeddings against a per-item target table with a
/// cosine alignment loss. `init_targets` seeds the table (one unit row per
/// item); only rows of `train_idx` items receive gradient.
pub fn paired_encoder_train<F: Scalar>(
    cfg: &PairedTrainConfig,
    enc_cfg: &EncoderConfig,
    backbone: &ParamStore<F>,
    volumes: &[Volume4D],
    init_targets: &[Vec<f64>],
    train_idx: &[usize],
) -> Result<PairedOutcome<F>> {
    if volumes.len() != init_targets.len() {
        return Err(Error::Data(format!(
            "{} volumes vs {} targets",
            volumes.len(),
            init_targets.len()
        )));
    }
    if train_idx.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let model = TuneModel::new(
        enc_cfg.clone(),
        cfg.k_prompts,
        HeadSpec::Embedding { dim: cfg.emb_dim },
    );
    let mut store = backbone.clone();
    model.attach_tunable(&mut store, cfg.seed);
    let n = volumes.len();
    let mut table = Vec::with_capacity(n * cfg.emb_dim);
    for t in init_targets {
        if t.len() != cfg.emb_dim {
            return Err(Error::Data(format!(
                "target dim {} vs emb_dim {}",
                t.len(),
                cfg.emb_dim
            )));
        }
        table.extend(t.iter().map(|&v| sc::<F>(v)));
    }
    store.insert("head.table", table, &[n, cfg.emb_dim]);

    let mut opt: Adam<F> = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = train_idx.to_vec();
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size).max(1);
    let mut epoch = usize::MAX;

    for step in 0..cfg.steps {
        let e = step / steps_per_epoch;
        if e != epoch {
            epoch = e;
            let mut r = Rng::new(cfg.seed, 0x9a1e_0000 + epoch as u64);
            order.copy_from_slice(train_idx);
            r.shuffle(&mut order);
        }
        let in_epoch = step % steps_per_epoch;
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|b| order[(in_epoch * cfg.batch_size + b) % order.len()])
            .collect();

        let mut grad_sum: std::collections::BTreeMap<String, Vec<F>> = Default::default();
        let mut loss_sum = 0f64;
        for &item in &batch {
            let tape: Tape<F> = Tape::new();
            let bind = Binding::bind(&store, &tape, TuneModel::is_tunable)?;
            let pred = model.forward(&tape, &bind, &volumes[item])?;
            // cosine alignment to this item's (trainable) table row
            let row = tape.narrow_rows(bind.get("head.table"), item, 1)?;
            let pn = tape.l2_normalize_rows(&tape.reshape(&pred, &[1, cfg.emb_dim])?, 1e-12)?;
            let tn = tape.l2_normalize_rows(&row, 1e-12)?;
            let dot = tape.sum_all(&tape.mul(&pn, &tn)?)?;
            let loss = tape.affine(&dot, -1.0, 1.0)?;
            let lv = loss.item().to_f64().unwrap();
            if !lv.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite alignment loss at step {step}"
                )));
            }
            loss_sum += lv;
            let grads = tape.backward(&loss)?;
            for (k, v) in bind.collect_grads(&grads)? {
                match grad_sum.get_mut(&k) {
                    Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a += *b),
                    None => {
                        grad_sum.insert(k, v);
                    }
                }
            }
        }
        let scale = sc::<F>(1.0 / batch.len() as f64);
        for g in grad_sum.values_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
        opt.step(&mut store, &grad_sum)?;
        loss_curve.push(loss_sum / batch.len() as f64);
    }

    Ok(PairedOutcome {
        model,
        store,
        loss_curve,
    })
}

/// Encoder-side embeddings for a set of items.
pub fn embed_volumes<F: Scalar>(
    model: &TuneModel,
    store: &ParamStore<F>,
    volumes: &[Volume4D],
    idx: &[usize],
) -> Result<Vec<Vec<f64>>> {
    idx.iter()
        .map(|&i| crate::prompt::predict(model, store, &volumes[i]))
        .collect()
}

/// Random unit vector.
pub fn random_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_pool_gives_perfect_top1() {
        let mut rng = Rng::new(1, 0);
        let emb: Vec<Vec<f64>> = (0..50).map(|_| random_unit(&mut rng, 16)).collect();
        let pool = RetrievalPool {
            queries: emb.clone(),
            candidates: emb,
            ground_truth: (0..50).collect(),
        };
        let rates = topk_rates(&pool, &[1, 3, 5]).unwrap();
        assert_eq!(rates, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_norm_embedding_is_data_error() {
        let pool = RetrievalPool {
            queries: vec![vec![0.0, 0.0]],
            candidates: vec![vec![1.0, 0.0]],
            ground_truth: vec![0],
        };
        assert!(matches!(pool.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn controlled_noise_geometry_gives_high_top1() {
        // queries at cosine ~0.8 to their ground truth, ~0 to others
        let dim = 64;
        let n = 100;
        let mut rng = Rng::new(7, 0);
        let gts: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, dim)).collect();
        let mut queries = Vec::with_capacity(n);
        for gt in &gts {
            let noise = random_unit(&mut rng, dim);
            let q: Vec<f64> = gt
                .iter()
                .zip(&noise)
                .map(|(g, e)| 0.8 * g + 0.6 * e)
                .collect();
            queries.push(q);
        }
        let pool = RetrievalPool {
            queries,
            candidates: gts,
            ground_truth: (0..n).collect(),
        };
        let rates = topk_rates(&pool, &[1, 3, 5]).unwrap();
        assert!(rates[0] > 0.95, "top1 {}", rates[0]);
        assert!(rates[0] <= rates[1] && rates[1] <= rates[2]);
    }

    #[test]
    fn swapped_direction_preserves_pairing() {
        let mut rng = Rng::new(9, 0);
        let gts: Vec<Vec<f64>> = (0..20).map(|_| random_unit(&mut rng, 8)).collect();
        let pool = RetrievalPool {
            queries: gts.clone(),
            candidates: gts,
            ground_truth: (0..20).collect(),
        };
        let sw = pool.swapped();
        let rates = topk_rates(&sw, &[1, 3, 5]).unwrap();
        assert_eq!(rates[0], 1.0);
    }

    #[test]
    fn chance_baseline_matches_one_over_candidates() {
        // independent random embeddings: top1 ~ 1/n_candidates
        let report = retrieval_eval(
            &|rep| {
                let mut rng = Rng::new(1000 + rep, 3);
                let queries: Vec<Vec<f64>> = (0..300).map(|_| random_unit(&mut rng, 24)).collect();
                let candidates: Vec<Vec<f64>> =
                    (0..300).map(|_| random_unit(&mut rng, 24)).collect();
                Ok(RetrievalPool {
                    queries,
                    candidates,
                    ground_truth: (0..300).collect(),
                })
            },
            Direction::Forward,
            30,
        )
        .unwrap();
        let chance = 1.0 / 300.0;
        assert!(
            (report.top1_mean - chance).abs() < 0.005,
            "top1 {} vs chance {chance}",
            report.top1_mean
        );
        report.validate().unwrap();
    }
}
