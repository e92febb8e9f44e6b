//! Parameter storage, initialization and first-order optimization shared by
//! every trainable module.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Ax, Grads, NodeId, ParamSlot, Tape};

/// Named, ordered parameter dictionary. Slot indices are stable for the life
/// of the store, and names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Ax>,
    index: BTreeMap<String, ParamSlot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Ax) -> ParamSlot {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let slot = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), slot);
        slot
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, slot: ParamSlot) -> &Ax {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: ParamSlot) -> &mut Ax {
        &mut self.values[slot]
    }

    pub fn name(&self, slot: ParamSlot) -> &str {
        &self.names[slot]
    }

    pub fn slot_by_name(&self, name: &str) -> Option<ParamSlot> {
        self.index.get(name).copied()
    }

    /// Slots whose name starts with `prefix`; used to split players.
    pub fn slots_with_prefix(&self, prefix: &str) -> Vec<ParamSlot> {
        (0..self.values.len())
            .filter(|&s| self.names[s].starts_with(prefix))
            .collect()
    }

    /// Deterministic name-sorted iteration, used by the checkpoint writer.
    pub fn iter_sorted(&self) -> impl Iterator<Item = (&str, &Ax)> {
        self.index.iter().map(move |(n, &s)| (n.as_str(), &self.values[s]))
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Injects a parameter into a tape as a gradient-tracked leaf.
    pub fn leaf(&self, tape: &mut Tape, slot: ParamSlot) -> NodeId {
        tape.param(slot, self.values[slot].clone())
    }
}

/// Standard-normal sample via Box-Muller, keeping the crate off extra
/// distribution dependencies.
pub fn normal(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen::<f32>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

/// He-normal initialization for convolution / dense weights.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Ax {
    let std = (2.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| normal(rng) * std).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> Ax {
    ArrayD::zeros(IxDyn(shape))
}

/// Derives an independent RNG stream from a base seed and a label so that
/// optional modules do not disturb each other's draws.
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// 2-D convolution layer handle: weight + bias slots plus geometry.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamSlot,
    pub b: ParamSlot,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(
            &format!("{name}.weight"),
            he_normal(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
        );
        let b = store.add(&format!("{name}.bias"), zeros(&[out_ch]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = store.leaf(tape, self.w);
        let b = store.leaf(tape, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Dense layer handle (optional bias).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamSlot,
    pub b: Option<ParamSlot>,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            &format!("{name}.weight"),
            he_normal(rng, &[in_dim, out_dim], in_dim),
        );
        let b = bias.then(|| store.add(&format!("{name}.bias"), zeros(&[out_dim])));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = store.leaf(tape, self.w);
        let b = self.b.map(|slot| store.leaf(tape, slot));
        tape.linear(x, w, b)
    }
}

/// Adam with bias correction, one instance per optimization player.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    slots: Vec<ParamSlot>,
    m: BTreeMap<ParamSlot, Ax>,
    v: BTreeMap<ParamSlot, Ax>,
}

impl Adam {
    pub fn new(lr: f32, slots: Vec<ParamSlot>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for &slot in &self.slots {
            let Some(g) = grads.get(slot) else { continue };
            let m = self
                .m
                .entry(slot)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(slot)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let (b1, b2) = (self.beta1, self.beta2);
            m.zip_mut_with(g, |mv, &gv| *mv = b1 * *mv + (1.0 - b1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = b2 * *vv + (1.0 - b2) * gv * gv);
            let lr = self.lr;
            let eps = self.eps;
            let value = store.value_mut(slot);
            ndarray::Zip::from(&mut *value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let mhat = mv / b1t;
                    let vhat = vv / b2t;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Optimizer state flattened for checkpointing: (name suffix, slot, array).
    pub fn state_arrays(&self) -> Vec<(String, Ax)> {
        let mut out = Vec::new();
        for (&slot, m) in &self.m {
            out.push((format!("m.{slot}"), m.clone()));
        }
        for (&slot, v) in &self.v {
            out.push((format!("v.{slot}"), v.clone()));
        }
        out
    }

    pub fn restore_state(&mut self, t: u64, arrays: Vec<(String, Ax)>) {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (key, arr) in arrays {
            if let Some(rest) = key.strip_prefix("m.") {
                if let Ok(slot) = rest.parse::<usize>() {
                    self.m.insert(slot, arr);
                }
            } else if let Some(rest) = key.strip_prefix("v.") {
                if let Ok(slot) = rest.parse::<usize>() {
                    self.v.insert(slot, arr);
                }
            }
        }
    }
}
