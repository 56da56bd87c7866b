//! Neural-network plumbing on top of the tape: named parameter storage,
//! parameterized layers, weight initialization, and the Adam optimizer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Val};

/// Standard deviation used for all weight initialization.
pub const INIT_STD: f64 = 0.02;

static STORE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to one named tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId {
    store: u64,
    idx: usize,
}

/// Ordered, named collection of learnable tensors.
///
/// Entry order is insertion order and defines the layout of optimizer
/// moment buffers and checkpoint tensor tables.
#[derive(Clone)]
pub struct ParamStore<S: Scalar> {
    tag: u64,
    entries: Vec<(String, Tensor<S>)>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            tag: STORE_COUNTER.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push((name, t));
        Ok(ParamId {
            store: self.tag,
            idx,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        assert_eq!(id.store, self.tag, "parameter id from a different store");
        &self.entries[id.idx].1
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<S>) {
        assert_eq!(id.store, self.tag, "parameter id from a different store");
        self.entries[id.idx].1 = t;
    }

    pub fn name(&self, id: ParamId) -> &str {
        assert_eq!(id.store, self.tag, "parameter id from a different store");
        &self.entries[id.idx].0
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&idx| ParamId {
            store: self.tag,
            idx,
        })
    }

    pub fn tensor_by_index(&self, idx: usize) -> &Tensor<S> {
        &self.entries[idx].1
    }

    pub fn set_by_index(&mut self, idx: usize, t: Tensor<S>) {
        self.entries[idx].1 = t;
    }

    pub(crate) fn tag(&self) -> u64 {
        self.tag
    }
}

/// One forward/backward pass: a tape plus the leaf bindings of the parameter
/// stores participating in it. Single writer, per the tape contract.
pub struct Ctx<S: Scalar> {
    pub tape: Tape<S>,
    bound: HashMap<u64, Vec<Val>>,
}

impl<S: Scalar> Default for Ctx<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Ctx<S> {
    pub fn new() -> Self {
        Ctx {
            tape: Tape::new(),
            bound: HashMap::new(),
        }
    }

    /// Wrap an existing tape (e.g. inside a gradient-check closure).
    pub fn with_tape(tape: Tape<S>) -> Self {
        Ctx {
            tape,
            bound: HashMap::new(),
        }
    }

    pub fn into_tape(self) -> Tape<S> {
        self.tape
    }

    /// Register every entry of `store` as a leaf. `trainable` controls
    /// whether gradients flow into the bound leaves.
    pub fn bind(&mut self, store: &ParamStore<S>, trainable: bool) {
        assert!(
            !self.bound.contains_key(&store.tag()),
            "store already bound to this pass"
        );
        let vals = store
            .entries
            .iter()
            .map(|(_, t)| self.tape.leaf(t.clone(), trainable))
            .collect();
        self.bound.insert(store.tag(), vals);
    }

    /// Tape handle of a bound parameter.
    pub fn p(&self, id: ParamId) -> Val {
        self.bound
            .get(&id.store)
            .unwrap_or_else(|| panic!("parameter store {} not bound to this pass", id.store))[id.idx]
    }

    /// Gradients for every entry of `store`, aligned with its entry order.
    pub fn grads_for(
        &self,
        store: &ParamStore<S>,
        grads: &crate::tensor::Grads<S>,
    ) -> Vec<Option<Tensor<S>>> {
        let vals = self
            .bound
            .get(&store.tag())
            .expect("store not bound to this pass");
        vals.iter().map(|&v| grads.get(v).cloned()).collect()
    }
}

/// 2-D convolution layer (cross-correlation), kernel `[c_out,c_in,k,k]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kernel from a seeded normal with [`INIT_STD`], bias zeroed.
    #[allow(clippy::too_many_arguments)]
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let kernel = store.add(
            format!("{name}.kernel"),
            Tensor::randn(&[c_out, c_in, k, k], 0.0, INIT_STD, rng)?,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])?)?;
        Ok(Conv2d {
            kernel,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Val) -> Result<Val> {
        let k = cx.p(self.kernel);
        let b = cx.p(self.bias);
        let y = cx.tape.conv2d(x, k, self.stride, self.pad)?;
        cx.tape.bias_add(y, b)
    }
}

/// Transposed convolution layer; kernel `[c_in,c_out,k,k]` where `c_in` is
/// the layer's input channel count.
#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let kernel = store.add(
            format!("{name}.kernel"),
            Tensor::randn(&[c_in, c_out, k, k], 0.0, INIT_STD, rng)?,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])?)?;
        Ok(ConvTranspose2d {
            kernel,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Val) -> Result<Val> {
        let k = cx.p(self.kernel);
        let b = cx.p(self.bias);
        let y = cx.tape.conv_transpose2d(x, k, self.stride, self.pad)?;
        cx.tape.bias_add(y, b)
    }
}

/// Per-channel instance normalization with learnable affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct InstanceNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl InstanceNorm2d {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], S::one())?)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels])?)?;
        Ok(InstanceNorm2d {
            gamma,
            beta,
            eps: 1e-5,
        })
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Val) -> Result<Val> {
        let g = cx.p(self.gamma);
        let b = cx.p(self.beta);
        cx.tape.instance_norm(x, g, b, self.eps)
    }
}

/// Adam optimizer state for one parameter store: per-parameter first and
/// second moments plus the shared step counter.
#[derive(Clone)]
pub struct AdamState<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = |t: &Tensor<S>| Tensor::zeros(t.shape()).expect("param shapes are valid");
        AdamState {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: store.entries.iter().map(|(_, t)| zeros(t)).collect(),
            v: store.entries.iter().map(|(_, t)| zeros(t)).collect(),
        }
    }

    /// One bias-corrected Adam update over the whole store. `grads` aligns
    /// with the store's entry order; `None` entries are treated as zero
    /// gradients (moments still decay).
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<Tensor<S>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::contract(format!(
                "gradient list length {} does not match {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.t += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let corr1 = S::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = S::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = S::from_f64(self.lr);
        let eps = S::from_f64(self.eps);

        for i in 0..store.len() {
            let name = store.entries[i].0.clone();
            let p = &store.entries[i].1;
            if let Some(g) = &grads[i] {
                if g.shape() != p.shape() {
                    return Err(Error::shape(format!(
                        "gradient shape {:?} does not match parameter {name} {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        what: format!("gradient of {name}"),
                        step: Some(self.t),
                    });
                }
            }
            let n = p.len();
            let gz = Tensor::zeros(p.shape())?;
            let g = grads[i].as_ref().unwrap_or(&gz);
            let mut md = self.m[i].data().to_vec();
            let mut vd = self.v[i].data().to_vec();
            let mut pd = p.data().to_vec();
            let gd = g.data();
            for j in 0..n {
                md[j] = b1 * md[j] + (one - b1) * gd[j];
                vd[j] = b2 * vd[j] + (one - b2) * gd[j] * gd[j];
                let mhat = md[j] / corr1;
                let vhat = vd[j] / corr2;
                pd[j] = pd[j] - lr * mhat / (vhat.sqrt() + eps);
            }
            self.m[i] = Tensor::from_vec(p.shape().to_vec(), md)?;
            self.v[i] = Tensor::from_vec(p.shape().to_vec(), vd)?;
            store.entries[i].1 = Tensor::from_vec(store.entries[i].1.shape().to_vec(), pd)?;
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Tensor<S>], &[Tensor<S>]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, m: Vec<Tensor<S>>, v: Vec<Tensor<S>>, t: u64) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}
