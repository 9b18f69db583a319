//! Minimal CPU tensor-network stack with explicit backward passes.
//!
//! Feature maps are per-sample `Array3<F>` in channel-height-width layout;
//! batches are loops over samples. Layers are plain structs holding
//! [`ParamRef`] indices into an external [`Params`] registry, forward passes
//! return `(output, cache)`, and backward passes consume the cache, push
//! parameter gradients into a [`Gradients`] accumulator, and return the input
//! gradient. Everything is generic over `f32`/`f64`; the double-precision
//! instantiation exists for finite-difference validation.

pub mod check;
pub mod layers;
pub mod resize;

use ndarray::{ArrayD, NdFloat};

/// Element type of all tensors: `f32` for training, `f64` for validation.
pub trait Scalar: NdFloat {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to one parameter tensor inside a [`Params`] registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(usize);

impl ParamRef {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: ArrayD<F>,
}

/// Registry of all parameters of one network, in construction order.
///
/// Construction order is deterministic for a fixed architecture, which makes
/// slot indices stable across runs; checkpoints address entries by name.
#[derive(Debug, Clone, Default)]
pub struct Params<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> Params<F> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
        }
    }

    /// Registers a tensor and returns its handle. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamRef {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value });
        ParamRef(self.entries.len() - 1)
    }

    pub fn get(&self, r: ParamRef) -> &ArrayD<F> {
        &self.entries[r.0].value
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut ArrayD<F> {
        &mut self.entries[r.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count, for the parameter report.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Zero gradient accumulator with one slot per parameter.
    pub fn grads(&self) -> Gradients<F> {
        Gradients {
            slots: self
                .entries
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect(),
        }
    }
}

/// Gradient accumulator parallel to a [`Params`] registry.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    slots: Vec<ArrayD<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zero(&mut self) {
        for s in &mut self.slots {
            s.fill(F::zero());
        }
    }

    /// Accumulates `g` into the slot for `r`.
    pub fn accumulate(&mut self, r: ParamRef, g: &ArrayD<F>) {
        self.slots[r.0] += g;
    }

    pub fn get(&self, r: ParamRef) -> &ArrayD<F> {
        &self.slots[r.0]
    }

    pub fn slots(&self) -> &[ArrayD<F>] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [ArrayD<F>] {
        &mut self.slots
    }

    pub fn scale(&mut self, c: F) {
        for s in &mut self.slots {
            s.mapv_inplace(|v| v * c);
        }
    }

    /// Largest absolute entry over all slots; the divergence guard watches it.
    pub fn max_abs(&self) -> F {
        let mut m = F::zero();
        for s in &self.slots {
            for &v in s.iter() {
                if v.abs() > m {
                    m = v.abs();
                }
            }
        }
        m
    }
}

/// Adam optimizer over one [`Params`] registry.
///
/// Moment buffers are kept in slot order; the checkpoint stores them next to
/// the step counter so resumed runs continue bit-identically.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub step_count: u64,
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &Params<F>, lr: f64) -> Self {
        Adam {
            lr: F::from_f64(lr),
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            step_count: 0,
            m: params
                .entries()
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect(),
            v: params
                .entries()
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect(),
        }
    }

    /// One update with bias-corrected first and second moments.
    pub fn step(&mut self, params: &mut Params<F>, grads: &Gradients<F>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let one = F::one();
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            let g = &grads.slots[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut entry.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}
