//! Benchmark surface: splits, label codecs, metrics, tfMRI-style frame
//! windows, and the scarcity-sweep benchmark driver.

pub mod retrieval;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{tune, HeadSpec, TuneConfig, TuneModel, TuneOutcome};
use crate::rng::Rng;
use crate::tensor::optim::ParamStore;
use crate::tensor::Scalar;
use crate::volume::Volume4D;

// ── task kinds ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    GenderClassification,
    AgeRegression,
    PhenotypeRegression,
    DiseaseClassification,
    Retrieval,
    StateClassification,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "gender-classification" => Ok(TaskKind::GenderClassification),
            "age-regression" => Ok(TaskKind::AgeRegression),
            "phenotype-regression" => Ok(TaskKind::PhenotypeRegression),
            "disease-classification" => Ok(TaskKind::DiseaseClassification),
            "retrieval" => Ok(TaskKind::Retrieval),
            "state-classification" => Ok(TaskKind::StateClassification),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::GenderClassification => "gender-classification",
            TaskKind::AgeRegression => "age-regression",
            TaskKind::PhenotypeRegression => "phenotype-regression",
            TaskKind::DiseaseClassification => "disease-classification",
            TaskKind::Retrieval => "retrieval",
            TaskKind::StateClassification => "state-classification",
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(
            self,
            TaskKind::GenderClassification
                | TaskKind::DiseaseClassification
                | TaskKind::StateClassification
        )
    }

    /// Metric names this task reports.
    pub fn metric_set(&self) -> &'static [&'static str] {
        match self {
            k if k.is_classification() => &["accuracy", "auc"],
            TaskKind::Retrieval => &["top1", "top3", "top5"],
            _ => &["mse", "mae", "pcc"],
        }
    }
}

// ── splits ─────────────────────────────────────────────────────────────

/// 8:1:1 split with remainders to train; scarcity subsamples train only.
#[derive(Clone, Debug)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub scarcity: f64,
    pub seed: u64,
}

pub fn make_split(n: usize, seed: u64, scarcity: f64) -> Result<SplitPlan> {
    if n < 10 {
        return Err(Error::Config(format!(
            "need at least 10 items for an 8:1:1 split, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&scarcity) || scarcity <= 0.0 {
        return Err(Error::Config(format!("scarcity {scarcity} outside (0,1]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(seed, 0x5917);
    rng.shuffle(&mut idx);
    let tenth = n / 10;
    let val = idx[0..tenth].to_vec();
    let test = idx[tenth..2 * tenth].to_vec();
    let mut train = idx[2 * tenth..].to_vec();
    let keep = ((train.len() as f64) * scarcity).round() as usize;
    train.truncate(keep.max(1));
    Ok(SplitPlan {
        train,
        val,
        test,
        scarcity,
        seed,
    })
}

// ── label codec ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum LabelCodec {
    /// Sorted class list with one-hot encoding.
    Classification { classes: Vec<String> },
    /// Per-target (mean, population sd) fitted on the train split.
    Regression { stats: Vec<(f64, f64)> },
}

impl LabelCodec {
    pub fn fit_classification(labels: &[&str]) -> Result<LabelCodec> {
        let mut classes: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        classes.sort();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Data(format!(
                "classification needs at least 2 classes, got {classes:?}"
            )));
        }
        Ok(LabelCodec::Classification { classes })
    }

    pub fn fit_regression(targets: &[Vec<f64>]) -> Result<LabelCodec> {
        let first = targets
            .first()
            .ok_or_else(|| Error::Data("no regression targets".into()))?;
        let dim = first.len();
        let n = targets.len() as f64;
        let mut stats = Vec::with_capacity(dim);
        for d in 0..dim {
            let mean = targets.iter().map(|t| t[d]).sum::<f64>() / n;
            let var = targets.iter().map(|t| (t[d] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            stats.push((mean, if sd < 1e-12 { 1.0 } else { sd }));
        }
        Ok(LabelCodec::Regression { stats })
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self {
            LabelCodec::Classification { classes } => Some(classes.len()),
            _ => None,
        }
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        match self {
            LabelCodec::Classification { classes } => classes
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| Error::Data(format!("unseen class `{label}`"))),
            _ => Err(Error::Contract("class_index on a regression codec".into())),
        }
    }

    /// One-hot row for a class, or z-scored values for regression targets.
    pub fn encode(&self, label: Option<&str>, target: Option<&[f64]>) -> Result<Vec<f64>> {
        match self {
            LabelCodec::Classification { classes } => {
                let label =
                    label.ok_or_else(|| Error::Data("missing class label".into()))?;
                let idx = self.class_index(label)?;
                let mut row = vec![0.0; classes.len()];
                row[idx] = 1.0;
                Ok(row)
            }
            LabelCodec::Regression { stats } => {
                let t = target.ok_or_else(|| Error::Data("missing target".into()))?;
                if t.len() != stats.len() {
                    return Err(Error::Data(format!(
                        "target dim {} vs fitted {}",
                        t.len(),
                        stats.len()
                    )));
                }
                Ok(t.iter()
                    .zip(stats)
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect())
            }
        }
    }

    /// Inverse transform: argmax class name, or original-scale values.
    pub fn decode(&self, encoded: &[f64]) -> DecodedPrediction {
        match self {
            LabelCodec::Classification { classes } => {
                let (mut best, mut best_v) = (0usize, f64::NEG_INFINITY);
                for (i, &v) in encoded.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = i;
                    }
                }
                DecodedPrediction::Class {
                    index: best,
                    name: classes[best].clone(),
                }
            }
            LabelCodec::Regression { stats } => DecodedPrediction::Values(
                encoded
                    .iter()
                    .zip(stats)
                    .map(|(v, (m, s))| v * s + m)
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecodedPrediction {
    Class { index: usize, name: String },
    Values(Vec<f64>),
}

// ── metrics ────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub value: f64,
    /// True when a convention stood in for an undefined value
    /// (e.g. PCC on zero-variance predictions reported as 0).
    #[serde(default)]
    pub degenerate: bool,
}

/// Rank-based binary AUC with midrank tie handling.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Data("AUC length mismatch".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // midranks over tied score groups
    let mut ranks = vec![0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = positive
        .iter()
        .zip(&ranks)
        .filter(|(&p, _)| p)
        .map(|(_, &r)| r)
        .sum();
    Ok((rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUC for multiclass scores; classes missing a positive
/// or negative example are skipped, and wholly single-class targets error.
pub fn auc_macro_ovr(scores: &[Vec<f64>], true_idx: &[usize], n_classes: usize) -> Result<f64> {
    let mut sum = 0f64;
    let mut counted = 0usize;
    for c in 0..n_classes {
        let positive: Vec<bool> = true_idx.iter().map(|&t| t == c).collect();
        let class_scores: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        match auc_binary(&class_scores, &positive) {
            Ok(a) => {
                sum += a;
                counted += 1;
            }
            Err(Error::UndefinedMetric(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric(
            "AUC undefined: targets contain a single class".into(),
        ));
    }
    Ok(sum / counted as f64)
}

/// Pearson correlation; zero-variance inputs report 0 with a degenerate flag.
pub fn pcc(a: &[f64], b: &[f64]) -> (f64, bool) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0f64;
    let mut da = 0f64;
    let mut db = 0f64;
    for i in 0..a.len() {
        let xa = a[i] - ma;
        let xb = b[i] - mb;
        num += xa * xb;
        da += xa * xa;
        db += xb * xb;
    }
    if da < 1e-24 || db < 1e-24 {
        (0.0, true)
    } else {
        (num / (da.sqrt() * db.sqrt()), false)
    }
}

/// Classification metrics from per-item score vectors.
pub fn classification_metrics(
    scores: &[Vec<f64>],
    true_idx: &[usize],
    n_classes: usize,
) -> Result<Vec<MetricValue>> {
    if scores.len() != true_idx.len() || scores.is_empty() {
        return Err(Error::Data("metrics need aligned, nonempty inputs".into()));
    }
    let correct = scores
        .iter()
        .zip(true_idx)
        .filter(|(s, &t)| {
            let arg = s
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            arg == t
        })
        .count();
    let auc = if n_classes == 2 {
        let positive: Vec<bool> = true_idx.iter().map(|&t| t == 1).collect();
        let s1: Vec<f64> = scores.iter().map(|s| s[1]).collect();
        auc_binary(&s1, &positive)
    } else {
        auc_macro_ovr(scores, true_idx, n_classes)
    };
    // sweep tables must not be poisoned by tiny single-class splits: report
    // an undefined AUC as 0 with the degenerate flag (same convention as PCC)
    let (auc, auc_degen) = match auc {
        Ok(a) => (a, false),
        Err(Error::UndefinedMetric(_)) => (0.0, true),
        Err(e) => return Err(e),
    };
    Ok(vec![
        MetricValue {
            name: "accuracy".into(),
            value: correct as f64 / scores.len() as f64,
            degenerate: false,
        },
        MetricValue {
            name: "auc".into(),
            value: auc,
            degenerate: auc_degen,
        },
    ])
}

/// Regression metrics on the decoded (original) scale, averaged over targets.
pub fn regression_metrics(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<Vec<MetricValue>> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Data("metrics need aligned, nonempty inputs".into()));
    }
    let dim = pred[0].len();
    let mut mse = 0f64;
    let mut mae = 0f64;
    let mut pcc_sum = 0f64;
    let mut degenerate = false;
    for d in 0..dim {
        let p: Vec<f64> = pred.iter().map(|v| v[d]).collect();
        let t: Vec<f64> = target.iter().map(|v| v[d]).collect();
        mse += p
            .iter()
            .zip(&t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.len() as f64;
        mae += p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        let (r, degen) = pcc(&p, &t);
        pcc_sum += r;
        degenerate |= degen;
    }
    Ok(vec![
        MetricValue {
            name: "mse".into(),
            value: mse / dim as f64,
            degenerate: false,
        },
        MetricValue {
            name: "mae".into(),
            value: mae / dim as f64,
            degenerate: false,
        },
        MetricValue {
            name: "pcc".into(),
            value: pcc_sum / dim as f64,
            degenerate,
        },
    ])
}

// ── frame windows ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameMode {
    /// Uniform random start over the valid range (training).
    RandomTrain,
    /// First k frames (validation and testing).
    FirstKEval,
}

/// Frame indices of a k-long contiguous clip; sequences shorter than k loop
/// (wrap-around). Output length is exactly k for any input length >= 1.
pub fn frame_window_indices(
    t_len: usize,
    k: usize,
    mode: FrameMode,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if t_len == 0 {
        return Err(Error::Data("empty sequence".into()));
    }
    if k == 0 {
        return Err(Error::Config("frame window k must be >= 1".into()));
    }
    let start = match mode {
        FrameMode::FirstKEval => 0,
        FrameMode::RandomTrain => {
            if t_len >= k {
                rng.below(t_len - k + 1)
            } else {
                rng.below(t_len)
            }
        }
    };
    Ok((0..k).map(|i| (start + i) % t_len).collect())
}

/// Materialize a k-frame clip from a volume.
pub fn frame_window_extract(
    vol: &Volume4D,
    k: usize,
    mode: FrameMode,
    rng: &mut Rng,
) -> Result<Volume4D> {
    let idx = frame_window_indices(vol.dims.0, k, mode, rng)?;
    let fl = vol.frame_len();
    let mut data = Vec::with_capacity(k * fl);
    for &t in &idx {
        data.extend_from_slice(vol.frame(t));
    }
    Volume4D::new(
        (k, vol.dims.1, vol.dims.2, vol.dims.3),
        vol.spacing_mm,
        vol.tr_seconds,
        data,
    )
}

// ── benchmark driver ───────────────────────────────────────────────────

/// One benchmark result line (line-delimited JSON on disk).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub task: String,
    pub dataset_id: String,
    pub scarcity: f64,
    pub seed: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
    #[serde(default)]
    pub degenerate: bool,
}

/// Labeled synthetic dataset: volumes plus class labels and/or targets.
/// `eval_volumes`, when present, replaces `volumes` at evaluation time
/// (state-classification trains on random clips but evaluates on first-k).
#[derive(Clone, Debug, Default)]
pub struct LabeledDataset {
    pub id: String,
    pub volumes: Vec<Volume4D>,
    pub labels: Vec<String>,
    pub targets: Vec<Vec<f64>>,
    pub eval_volumes: Option<Vec<Volume4D>>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.volumes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }
}

/// Evaluate a tuned model on a subset; returns metric values by task kind.
pub fn evaluate<F: Scalar>(
    model: &TuneModel,
    store: &ParamStore<F>,
    data: &LabeledDataset,
    idx: &[usize],
    codec: &LabelCodec,
    task: TaskKind,
) -> Result<Vec<MetricValue>> {
    if idx.is_empty() {
        return Err(Error::Data("empty evaluation split".into()));
    }
    let vols = data.eval_volumes.as_ref().unwrap_or(&data.volumes);
    let mut raw = Vec::with_capacity(idx.len());
    for &i in idx {
        raw.push(crate::prompt::predict(model, store, &vols[i])?);
    }
    if task.is_classification() {
        let n_classes = codec.n_classes().expect("classification codec");
        let true_idx: Vec<usize> = idx
            .iter()
            .map(|&i| codec.class_index(&data.labels[i]))
            .collect::<Result<_>>()?;
        classification_metrics(&raw, &true_idx, n_classes)
    } else {
        let decoded: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| match codec.decode(r) {
                DecodedPrediction::Values(v) => v,
                _ => unreachable!("regression codec"),
            })
            .collect();
        let targets: Vec<Vec<f64>> = idx.iter().map(|&i| data.targets[i].clone()).collect();
        regression_metrics(&decoded, &targets)
    }
}

pub struct BenchmarkConfig {
    pub task: TaskKind,
    pub scarcity_levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub tune: TuneConfig,
}

impl BenchmarkConfig {
    pub fn new(task: TaskKind, head: HeadSpec) -> Self {
        BenchmarkConfig {
            task,
            scarcity_levels: vec![0.1, 0.3, 0.5, 1.0],
            seeds: vec![0, 1, 2],
            tune: TuneConfig::new(head),
        }
    }
}

/// Scarcity-sweep benchmark: one tuning run per (scarcity, seed), identical
/// val/test across scarcity levels; emits one record per metric per split.
pub struct BenchmarkRun<F: Scalar> {
    pub records: Vec<BenchmarkRecord>,
    /// One tuned artifact per (scarcity, seed) combination, with the codec
    /// that encoded its targets.
    pub outcomes: Vec<(f64, u64, LabelCodec, TuneOutcome<F>)>,
}

pub fn run_benchmark<F: Scalar>(
    cfg: &BenchmarkConfig,
    enc_cfg: &crate::backbone::EncoderConfig,
    backbone: &ParamStore<F>,
    data: &LabeledDataset,
) -> Result<BenchmarkRun<F>> {
    let mut records = Vec::new();
    let mut outcomes = Vec::new();
    for &seed in &cfg.seeds {
        for &scarcity in &cfg.scarcity_levels {
            let split = make_split(data.len(), seed, scarcity)?;
            // the codec (label vocabulary / target statistics) is fitted on
            // the full train split; scarcity subsamples training examples,
            // not the label space, and tiny scarce subsets can otherwise be
            // single-class
            let full_train = make_split(data.len(), seed, 1.0)?.train;
            let codec = if cfg.task.is_classification() {
                let train_labels: Vec<&str> =
                    full_train.iter().map(|&i| data.labels[i].as_str()).collect();
                LabelCodec::fit_classification(&train_labels)?
            } else {
                let train_targets: Vec<Vec<f64>> =
                    full_train.iter().map(|&i| data.targets[i].clone()).collect();
                LabelCodec::fit_regression(&train_targets)?
            };
            let targets: Vec<Vec<f64>> = (0..data.len())
                .map(|i| {
                    if cfg.task.is_classification() {
                        codec.encode(Some(&data.labels[i]), None)
                    } else {
                        codec.encode(None, Some(&data.targets[i]))
                    }
                })
                .collect::<Result<_>>()?;
            let mut tune_cfg = cfg.tune.clone();
            tune_cfg.seed = seed;
            let out: TuneOutcome<F> = tune(
                &tune_cfg,
                enc_cfg,
                backbone,
                &data.volumes,
                &targets,
                &split.train,
            )?;
            for (split_name, idx) in [("val", &split.val), ("test", &split.test)] {
                let metrics = evaluate(&out.model, &out.store, data, idx, &codec, cfg.task)?;
                for m in metrics {
                    records.push(BenchmarkRecord {
                        task: cfg.task.name().to_string(),
                        dataset_id: data.id.clone(),
                        scarcity,
                        seed,
                        split: split_name.to_string(),
                        metric: m.name,
                        value: m.value,
                        degenerate: m.degenerate,
                    });
                }
            }
            outcomes.push((scarcity, seed, codec, out));
        }
    }
    Ok(BenchmarkRun { records, outcomes })
}

/// Comma-separated summary mirroring the records (one row per record).
pub fn records_to_csv(records: &[BenchmarkRecord]) -> String {
    let mut s = String::from("task,dataset_id,scarcity,seed,split,metric,value,degenerate\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.task, r.dataset_id, r.scarcity, r.seed, r.split, r.metric, r.value, r.degenerate
        ));
    }
    s
}
