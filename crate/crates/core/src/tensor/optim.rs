//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{sc, Gradients, Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::{stream_of, Rng};

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub data: Vec<F>,
    pub shape: Vec<usize>,
}

/// Ordered map of named parameters. BTreeMap keeps iteration deterministic,
/// which the reproducibility contracts rely on.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: BTreeMap<String, Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, data: Vec<F>, shape: &[usize]) {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.entries.insert(
            name.to_string(),
            Param {
                data,
                shape: shape.to_vec(),
            },
        );
    }

    /// Gaussian init scaled by `std`; the stream is keyed by the parameter
    /// name so init is independent of declaration order.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, seed: u64) {
        let n: usize = shape.iter().product();
        let mut rng = Rng::new(seed, stream_of(name));
        let data = (0..n).map(|_| sc::<F>(rng.normal() * std)).collect();
        self.insert(name, data, shape);
    }

    pub fn init_uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64, seed: u64) {
        let n: usize = shape.iter().product();
        let mut rng = Rng::new(seed, stream_of(name));
        let data = (0..n).map(|_| sc::<F>(rng.uniform_in(lo, hi))).collect();
        self.insert(name, data, shape);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        let n: usize = shape.iter().product();
        self.insert(name, vec![F::zero(); n], shape);
    }

    pub fn get(&self, name: &str) -> &Param<F> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<F> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    /// SHA-256 over (name, shape, little-endian f64 bytes) in name order.
    /// Used to assert bitwise frozen-backbone invariance.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in &self.entries {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &d in &p.shape {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in &p.data {
                hasher.update(v.to_f64().unwrap().to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Tensors bound to one tape for a forward pass: trainable entries are
/// tracked leaves, frozen entries untracked constants.
pub struct Binding<F> {
    map: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Binding<F> {
    /// Bind every parameter; `trainable(name)` decides leaf vs constant.
    pub fn bind(
        store: &ParamStore<F>,
        tape: &Tape<F>,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<Binding<F>> {
        let mut map = BTreeMap::new();
        for (name, p) in store.iter() {
            let t = if trainable(name) {
                tape.leaf(p.data.clone(), &p.shape)?
            } else {
                Tensor::from_vec(p.data.clone(), &p.shape)?
            };
            map.insert(name.clone(), t);
        }
        Ok(Binding { map })
    }

    pub fn all_trainable(store: &ParamStore<F>, tape: &Tape<F>) -> Result<Binding<F>> {
        Self::bind(store, tape, |_| true)
    }

    pub fn all_frozen(store: &ParamStore<F>) -> Result<Binding<F>> {
        let tape: Tape<F> = Tape::new(); // unused; constants carry no node
        Self::bind(store, &tape, |_| false)
    }

    /// Build a binding from existing tensors (e.g. leaves created by a
    /// gradient-check harness).
    pub fn from_tensors(items: impl IntoIterator<Item = (String, Tensor<F>)>) -> Binding<F> {
        Binding {
            map: items.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    /// Collect per-name gradients after backward; non-finite values are a
    /// training error naming the parameter.
    pub fn collect_grads(&self, grads: &Gradients<F>) -> Result<BTreeMap<String, Vec<F>>> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.map {
            if !t.is_tracked() {
                continue;
            }
            let g = grads
                .wrt(t)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![F::zero(); t.numel()]);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter `{name}`"
                )));
            }
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. State is keyed by parameter name; updates are
/// elementwise, so results are independent of map iteration order.
pub struct Adam<F> {
    pub cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<F>>,
    v: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &BTreeMap<String, Vec<F>>,
    ) -> Result<()> {
        self.t += 1;
        let b1 = sc::<F>(self.cfg.beta1);
        let b2 = sc::<F>(self.cfg.beta2);
        let lr = sc::<F>(self.cfg.lr);
        let eps = sc::<F>(self.cfg.eps);
        let bc1 = F::one() - sc::<F>(self.cfg.beta1.powi(self.t as i32));
        let bc2 = F::one() - sc::<F>(self.cfg.beta2.powi(self.t as i32));
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter `{name}`"
                )));
            }
            let p = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] = p.data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
