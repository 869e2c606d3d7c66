//! Reverse-mode differentiation over a replayable tape.
//!
//! A [`Tape`] is an ordered record of primitive applications. Ops execute
//! eagerly through the kernels in [`crate::ops`], so a forward value built
//! on the tape is bit-identical to one computed by calling the primitives
//! directly; the tape only adds the bookkeeping needed to walk the record
//! backwards. Insertion order is a topological order by construction,
//! which means the reverse sweep visits every node after all of its
//! consumers.
//!
//! Trainable parameters live in a [`ParamStore`] shared by tapes; their
//! gradients accumulate into a [`Grads`] arena parallel to the store.
//! Parameter values must not change between a forward pass and its
//! `backward` call.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::Tensor;
use crate::train;

/// Index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) u32);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies. Convolution and fully-connected
    /// weights decay; batch-norm affine parameters and biases do not.
    pub decay: bool,
}

/// Ordered registry of named parameter tensors. Iteration order is
/// insertion order, which fixes gradient and checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.entries.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, decay });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0 as usize].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0 as usize].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0 as usize]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len() as u32).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i as u32), e))
    }

    /// Total number of scalar values across all parameters.
    pub fn total_values(&self) -> u64 {
        self.entries.iter().map(|e| e.value.len() as u64).sum()
    }
}

/// One gradient tensor per parameter, in store order.
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_of(params: &ParamStore) -> Self {
        Self { slots: params.entries.iter().map(|e| Tensor::zeros(e.value.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0 as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0 as usize]
    }

    /// `self += other`, slot by slot.
    pub fn accumulate(&mut self, other: &Grads) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.slots {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().all(|t| t.all_finite())
    }
}

/// Running batch-norm statistics owned by a network (the affine pair
/// lives in the [`ParamStore`]).
#[derive(Clone, Debug)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels], momentum: 0.1, epsilon: 1e-5 }
    }
}

/// Index into a [`BnStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(pub(crate) u32);

/// Named registry of running batch-norm statistics, parallel to the
/// [`ParamStore`] and checkpointed alongside it.
#[derive(Clone, Debug, Default)]
pub struct BnStore {
    entries: Vec<(String, BnRunning)>,
    by_name: HashMap<String, BnId>,
}

impl BnStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, channels: usize) -> Result<BnId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate batch norm name {name:?}")));
        }
        let id = BnId(self.entries.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.entries.push((name, BnRunning::new(channels)));
        Ok(id)
    }

    pub fn get(&self, id: BnId) -> &BnRunning {
        &self.entries[id.0 as usize].1
    }

    pub fn get_mut(&mut self, id: BnId) -> &mut BnRunning {
        &mut self.entries[id.0 as usize].1
    }

    pub fn id_of(&self, name: &str) -> Option<BnId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BnRunning)> {
        self.entries.iter().map(|(n, r)| (n.as_str(), r))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut BnRunning)> {
        self.entries.iter_mut().map(|(n, r)| (n.as_str(), r))
    }
}

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(u32);

enum Payload {
    /// External input; `param` ties the leaf to a store slot so that
    /// input gradients can be checked like any parameter.
    Leaf { param: Option<ParamId> },
    Conv2d { x: NodeId, w: ParamId, geom: ConvGeometry },
    BatchNorm { x: NodeId, gamma: ParamId, beta: ParamId, mean: Vec<f64>, inv_std: Vec<f64>, training: bool },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    MaxPool { x: NodeId, argmax: Vec<u32> },
    GlobalAvgPool { x: NodeId },
    Linear { x: NodeId, w: ParamId, b: Option<ParamId> },
    PathSoftmax { x: NodeId, paths: usize },
    AddN { xs: Vec<NodeId> },
    ScaleChannels { x: NodeId, gate: NodeId },
    NarrowChannels { x: NodeId, start: usize },
    ConcatChannels { xs: Vec<NodeId> },
    Scale { x: NodeId, factor: f64 },
    CrossEntropy { logits: NodeId, labels: Vec<u32>, smoothing: f64, probs: Tensor },
    DotConst { x: NodeId, coeffs: Tensor },
}

struct Node {
    payload: Payload,
    value: Tensor,
}

/// Replayable record of executed primitives.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    replayed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0 as usize].value
    }

    /// Gradient of the replayed scalar with respect to a node, if the
    /// node received one during the last `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0 as usize).and_then(|g| g.as_ref())
    }

    /// Clears replay state so the tape can be walked backward again.
    pub fn reset(&mut self) {
        self.replayed = false;
        self.grads.clear();
    }

    /// Smallest |v| over every value feeding a ReLU, i.e. the distance
    /// to the nearest activation kink. A finite-difference probe whose
    /// step crosses a kink measures a one-sided slope and reports a
    /// spurious mismatch, so checks should only run where this margin
    /// comfortably exceeds step * local gain. Infinite on tapes without
    /// ReLU nodes.
    pub fn relu_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Payload::Relu { x } = node.payload {
                for &v in self.value(x).data() {
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }

    fn push(&mut self, payload: Payload, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { payload, value });
        id
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Payload::Leaf { param: None }, value)
    }

    /// Leaf whose value is read from the parameter store; gradients flow
    /// back into the corresponding slot.
    pub fn param(&mut self, params: &ParamStore, p: ParamId) -> NodeId {
        self.push(Payload::Leaf { param: Some(p) }, params.get(p).clone())
    }

    pub fn conv2d(&mut self, params: &ParamStore, x: NodeId, w: ParamId, geom: ConvGeometry) -> Result<NodeId> {
        let value = ops::conv2d(self.value(x), params.get(w), &geom)?;
        Ok(self.push(Payload::Conv2d { x, w, geom }, value))
    }

    /// Batch norm with affine parameters from the store and running
    /// statistics in `running`. Training mode normalizes with batch
    /// statistics and folds them into `running`; inference mode reads
    /// `running` and leaves it untouched.
    pub fn batch_norm(
        &mut self,
        params: &ParamStore,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        running: &mut BnRunning,
        training: bool,
    ) -> Result<NodeId> {
        let input = self.value(x);
        let c = input.c();
        let g = params.get(gamma);
        let b = params.get(beta);
        if g.len() != c || b.len() != c || running.mean.len() != c {
            return Err(Error::Shape(format!(
                "batch norm: input has {c} channels, gamma {} beta {} running {}",
                g.len(),
                b.len(),
                running.mean.len()
            )));
        }
        let (mean, var) = if training {
            let (bm, bv) = ops::bn_batch_stats(input);
            let m = running.momentum;
            for ch in 0..c {
                running.mean[ch] = (1.0 - m) * running.mean[ch] + m * bm[ch];
                running.var[ch] = (1.0 - m) * running.var[ch] + m * bv[ch];
            }
            (bm, bv)
        } else {
            (running.mean.clone(), running.var.clone())
        };
        let value = ops::bn_normalize(input, &mean, &var, g.data(), b.data(), running.epsilon);
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + running.epsilon).sqrt()).collect();
        Ok(self.push(Payload::BatchNorm { x, gamma, beta, mean, inv_std, training }, value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = ops::relu(self.value(x));
        self.push(Payload::Relu { x }, value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = ops::sigmoid(self.value(x));
        self.push(Payload::Sigmoid { x }, value)
    }

    pub fn max_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize, padding: usize) -> Result<NodeId> {
        let (value, argmax) = ops::max_pool2d_indexed(self.value(x), kernel, stride, padding)?;
        Ok(self.push(Payload::MaxPool { x, argmax }, value))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let value = ops::global_avg_pool(self.value(x));
        self.push(Payload::GlobalAvgPool { x }, value)
    }

    pub fn linear(&mut self, params: &ParamStore, x: NodeId, w: ParamId, b: Option<ParamId>) -> Result<NodeId> {
        let bias = b.map(|id| params.get(id).data().to_vec());
        let value = ops::linear_batch(self.value(x), params.get(w), bias.as_deref())?;
        Ok(self.push(Payload::Linear { x, w, b }, value))
    }

    pub fn path_softmax(&mut self, x: NodeId, paths: usize) -> Result<NodeId> {
        let value = ops::path_softmax_batch(self.value(x), paths)?;
        Ok(self.push(Payload::PathSoftmax { x, paths }, value))
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = xs.iter().map(|&id| self.value(id)).collect();
        let value = ops::add_n(&tensors)?;
        Ok(self.push(Payload::AddN { xs: xs.to_vec() }, value))
    }

    pub fn scale_channels(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let value = ops::scale_channels(self.value(x), self.value(gate))?;
        Ok(self.push(Payload::ScaleChannels { x, gate }, value))
    }

    pub fn narrow_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let value = ops::narrow_channels(self.value(x), start, len)?;
        Ok(self.push(Payload::NarrowChannels { x, start }, value))
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = xs.iter().map(|&id| self.value(id)).collect();
        let value = ops::concat_channels(&tensors)?;
        Ok(self.push(Payload::ConcatChannels { xs: xs.to_vec() }, value))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = ops::scale(self.value(x), factor);
        self.push(Payload::Scale { x, factor }, value)
    }

    /// Label-smoothed cross entropy, averaged over the batch; the node
    /// value is a scalar.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[u32], smoothing: f64) -> Result<NodeId> {
        let (loss, probs) = train::ce_forward(self.value(logits), labels, smoothing)?;
        Ok(self.push(
            Payload::CrossEntropy { logits, labels: labels.to_vec(), smoothing, probs },
            Tensor::scalar(loss),
        ))
    }

    /// Scalar projection `sum(x * coeffs)`; the standard way to drive a
    /// finite-difference check with a fixed random upstream gradient.
    pub fn dot_const(&mut self, x: NodeId, coeffs: Tensor) -> Result<NodeId> {
        let v = self.value(x);
        v.check_same_shape(&coeffs, "dot_const")?;
        let mut acc = 0.0;
        for (a, b) in v.data().iter().zip(coeffs.data()) {
            acc += a * b;
        }
        Ok(self.push(Payload::DotConst { x, coeffs }, Tensor::scalar(acc)))
    }

    fn add_grad(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        match &mut grads[id.0 as usize] {
            Some(existing) => {
                for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Walks the tape backward from its terminal node, accumulating
    /// parameter gradients. `seed` is the upstream gradient of the
    /// terminal; `None` requires a scalar terminal and seeds with 1.
    ///
    /// Replaying an already-replayed tape is an error until [`reset`] is
    /// called; parameter values must be unchanged since the forward pass.
    ///
    /// [`reset`]: Tape::reset
    pub fn backward(&mut self, params: &ParamStore, seed: Option<Tensor>) -> Result<Grads> {
        if self.replayed {
            return Err(Error::TapeReplayed);
        }
        let terminal = self
            .nodes
            .len()
            .checked_sub(1)
            .map(|i| NodeId(i as u32))
            .ok_or_else(|| Error::Config("backward on an empty tape".into()))?;
        let seed = match seed {
            Some(s) => {
                self.value(terminal).check_same_shape(&s, "backward seed")?;
                s
            }
            None => {
                if self.value(terminal).shape() != [1, 1, 1, 1] {
                    return Err(Error::Shape(
                        "backward without a seed requires a scalar terminal node".into(),
                    ));
                }
                Tensor::scalar(1.0)
            }
        };
        self.replayed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[terminal.0 as usize] = Some(seed);
        let mut pgrads = Grads::zeros_of(params);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].payload {
                Payload::Leaf { param } => {
                    if let Some(p) = param {
                        let slot = pgrads.get_mut(*p);
                        for (a, &b) in slot.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                }
                Payload::Conv2d { x, w, geom } => {
                    let input = self.value(*x);
                    let gw = ops::conv2d_grad_weight(input, &g, geom)?;
                    let gx = ops::conv2d_grad_input(params.get(*w), &g, geom, input.h(), input.w())?;
                    let slot = pgrads.get_mut(*w);
                    for (a, &b) in slot.data_mut().iter_mut().zip(gw.data()) {
                        *a += b;
                    }
                    Self::add_grad(&mut grads, *x, gx);
                }
                Payload::BatchNorm { x, gamma, beta, mean, inv_std, training } => {
                    let input = self.value(*x);
                    let [n, c, h, w] = input.shape();
                    let m = (n * h * w) as f64;
                    let gvec = params.get(*gamma).data();
                    // Reductions first: dgamma = sum g*xhat, dbeta = sum g.
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let xs = input.plane(b, ch);
                            let gs = g.plane(b, ch);
                            let (mu, istd) = (mean[ch], inv_std[ch]);
                            let mut s_gx = 0.0;
                            let mut s_g = 0.0;
                            for (&xv, &gv) in xs.iter().zip(gs) {
                                s_gx += gv * (xv - mu) * istd;
                                s_g += gv;
                            }
                            dgamma[ch] += s_gx;
                            dbeta[ch] += s_g;
                        }
                    }
                    let mut gx = Tensor::zeros(input.shape());
                    for b in 0..n {
                        for ch in 0..c {
                            let xs = input.plane(b, ch);
                            let gs = g.plane(b, ch);
                            let dst = gx.plane_mut(b, ch);
                            let (mu, istd, gm) = (mean[ch], inv_std[ch], gvec[ch]);
                            if *training {
                                // Batch statistics couple every element of
                                // the channel into each gradient.
                                let k1 = dbeta[ch] / m;
                                let k2 = dgamma[ch] / m;
                                for ((&xv, &gv), o) in xs.iter().zip(gs).zip(dst.iter_mut()) {
                                    let xhat = (xv - mu) * istd;
                                    *o = gm * istd * (gv - k1 - xhat * k2);
                                }
                            } else {
                                for (&gv, o) in gs.iter().zip(dst.iter_mut()) {
                                    *o = gm * istd * gv;
                                }
                            }
                        }
                    }
                    {
                        let slot = pgrads.get_mut(*gamma);
                        for (a, &b) in slot.data_mut().iter_mut().zip(&dgamma) {
                            *a += b;
                        }
                    }
                    {
                        let slot = pgrads.get_mut(*beta);
                        for (a, &b) in slot.data_mut().iter_mut().zip(&dbeta) {
                            *a += b;
                        }
                    }
                    Self::add_grad(&mut grads, *x, gx);
                }
                Payload::Relu { x } => {
                    let input = self.value(*x);
                    let mut gx = g.clone();
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(input.data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    Self::add_grad(&mut grads, *x, gx);
                }
                Payload::Sigmoid { x } => {
                    let out = &self.nodes[i].value;
                    let mut gx = g.clone();
                    for (gv, &yv) in gx.data_mut().iter_mut().zip(out.data()) {
                        *gv *= yv * (1.0 - yv);
                    }
                    Self::add_grad(&mut grads, *x, gx);
                }
                Payload::MaxPool { x, argmax } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let gd = gx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        gd[src as usize] += gv;
                    }
                    Self::add_grad(&mut grads, *x, gx);
                }
                Payload::GlobalAvgPool { x } => {
                    let input = self.value(*x);
                    let [n, c, h, w] = input.shape();
                    let inv = 1.0 / (h * w) as f64;
                    let mut gx = Tensor::zeros(input.shape());
                    for b in 0..n {
                        for ch in 0..c {
                            let gv = g.data()[b * c + ch] * inv;
                            for o in gx.plane_mut(b, ch) {
                                *o = gv;
                            }
                        }
                    }
                    Self::add_grad(&mut grads, *x, gx);
                }
                Payload::Linear { x, w, b } => {
                    let input = self.value(*x);
                    let weight = params.get(*w);
                    let [n, cin, _, _] = input.shape();
                    let cout = weight.n();
                    let mut gw = Tensor::zeros(weight.shape());
                    let mut gx = Tensor::zeros(input.shape());
                    for s in 0..n {
                        let xrow = &input.data()[s * cin..(s + 1) * cin];
                        let grow = &g.data()[s * cout..(s + 1) * cout];
                        for o in 0..cout {
                            let gv = grow[o];
                            let wrow = &weight.data()[o * cin..(o + 1) * cin];
                            let gwrow = &mut gw.data_mut()[o * cin..(o + 1) * cin];
                            let gxrow = &mut gx.data_mut()[s * cin..(s + 1) * cin];
                            for ((gwv, gxv), (&xv, &wv)) in
                                gwrow.iter_mut().zip(gxrow.iter_mut()).zip(xrow.iter().zip(wrow))
                            {
                                *gwv += gv * xv;
                                *gxv += gv * wv;
                            }
                        }
                    }
                    {
                        let slot = pgrads.get_mut(*w);
                        for (a, &v) in slot.data_mut().iter_mut().zip(gw.data()) {
                            *a += v;
                        }
                    }
                    if let Some(bid) = b {
                        let slot = pgrads.get_mut(*bid);
                        for s in 0..n {
                            let grow = &g.data()[s * cout..(s + 1) * cout];
                            for (a, &v) in slot.data_mut().iter_mut().zip(grow) {
                                *a += v;
                            }
                        }
                    }
                    Self::add_grad(&mut grads, *x, gx);
                }
                Payload::PathSoftmax { x, paths } => {
                    // d l_m = a_m * (g_m - sum_k g_k a_k), per channel.
                    let out = &self.nodes[i].value;
                    let [n, pc, _, _] = out.shape();
                    let c = pc / paths;
                    let mut gx = Tensor::zeros(out.shape());
                    for b in 0..n {
                        let a = &out.data()[b * pc..(b + 1) * pc];
                        let gr = &g.data()[b * pc..(b + 1) * pc];
                        let dst = &mut gx.data_mut()[b * pc..(b + 1) * pc];
                        for ch in 0..c {
                            let mut dot = 0.0;
                            for m in 0..*paths {
                                dot += gr[m * c + ch] * a[m * c + ch];
                            }
                            for m in 0..*paths {
                                dst[m * c + ch] = a[m * c + ch] * (gr[m * c + ch] - dot);
                            }
                        }
                    }
                    Self::add_grad(&mut grads, *x, gx);
                }
                Payload::AddN { xs } => {
                    let xs = xs.clone();
                    for x in &xs {
                        Self::add_grad(&mut grads, *x, g.clone());
                    }
                }
                Payload::ScaleChannels { x, gate } => {
                    let input = self.value(*x);
                    let gatev = self.value(*gate);
                    let [n, c, _, _] = input.shape();
                    let mut gx = Tensor::zeros(input.shape());
                    let mut gg = Tensor::zeros(gatev.shape());
                    for b in 0..n {
                        for ch in 0..c {
                            let gateval = gatev.data()[b * c + ch];
                            let xs = input.plane(b, ch);
                            let gs = g.plane(b, ch);
                            let dst = gx.plane_mut(b, ch);
                            let mut dot = 0.0;
                            for ((o, &gv), &xv) in dst.iter_mut().zip(gs).zip(xs) {
                                *o = gv * gateval;
                                dot += gv * xv;
                            }
                            gg.data_mut()[b * c + ch] = dot;
                        }
                    }
                    Self::add_grad(&mut grads, *x, gx);
                    Self::add_grad(&mut grads, *gate, gg);
                }
                Payload::NarrowChannels { x, start } => {
                    let input = self.value(*x);
                    let [n, _, _, _] = input.shape();
                    let len = g.c();
                    let start = *start;
                    let mut gx = Tensor::zeros(input.shape());
                    for b in 0..n {
                        for ch in 0..len {
                            gx.plane_mut(b, start + ch).copy_from_slice(g.plane(b, ch));
                        }
                    }
                    Self::add_grad(&mut grads, *x, gx);
                }
                Payload::ConcatChannels { xs } => {
                    let xs = xs.clone();
                    let mut at = 0;
                    for x in &xs {
                        let c = self.value(*x).c();
                        let part = ops::narrow_channels(&g, at, c)?;
                        at += c;
                        Self::add_grad(&mut grads, *x, part);
                    }
                }
                Payload::Scale { x, factor } => {
                    let f = *factor;
                    let gx = g.map(|v| v * f);
                    Self::add_grad(&mut grads, *x, gx);
                }
                Payload::CrossEntropy { logits, labels, smoothing, probs } => {
                    let upstream = g.data()[0];
                    let gx = train::ce_backward(probs, labels, *smoothing, upstream);
                    Self::add_grad(&mut grads, *logits, gx);
                }
                Payload::DotConst { x, coeffs } => {
                    let upstream = g.data()[0];
                    let gx = coeffs.map(|v| v * upstream);
                    Self::add_grad(&mut grads, *x, gx);
                }
            }
            // Re-store so `grad(id)` can report it after the sweep.
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(pgrads)
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    /// Worst relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
    pub worst_name: String,
    pub max_rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks analytic gradients against central finite differences.
///
/// `eval` computes the scalar objective for the current parameter values;
/// when its second argument is true it must also return analytic
/// gradients. Every parameter element is perturbed by `+-step` (1e-5 is a
/// good default for f64). The evaluation must be a pure function of the
/// parameter values; running-statistic side effects are fine because they
/// never feed back into a training-mode loss.
pub fn grad_check<F>(params: &mut ParamStore, mut eval: F, step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Option<Grads>)>,
{
    let (base, grads) = eval(params, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = grads.ok_or_else(|| Error::Config("eval returned no gradients".into()))?;
    if !grads.all_finite() {
        return Err(Error::NonFinite("grad_check analytic gradients".into()));
    }

    // Central differences cannot resolve gradient components far below
    // the dominant gradient magnitude: the objective's f64 rounding
    // error, divided by the step, leaves absolute noise on every
    // numeric slope. Flooring the relative-error denominator at a small
    // fraction of the global gradient scale ignores exactly the
    // components that are pure noise, while a real backward bug, which
    // perturbs whole tensors at their own scale, stays visible.
    let g_scale = params
        .ids()
        .map(|id| grads.get(id).data().iter().fold(0.0f64, |m, &v| m.max(v.abs())))
        .fold(0.0f64, f64::max);
    let floor = 1e-8 + 2e-3 * g_scale;

    let mut per_param = Vec::new();
    let mut worst_name = String::new();
    let mut max_rel = 0.0f64;
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.entry(id).name.clone();
        let len = params.get(id).len();
        let mut worst = 0.0f64;
        for i in 0..len {
            let saved = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = saved + step;
            let (lp, _) = eval(params, false)?;
            params.get_mut(id).data_mut()[i] = saved - step;
            let (lm, _) = eval(params, false)?;
            params.get_mut(id).data_mut()[i] = saved;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::NonFinite(format!("perturbed objective for {name}[{i}]")));
            }
            let numeric = (lp - lm) / (2.0 * step);
            let analytic = grads.get(id).data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            if rel > worst {
                worst = rel;
            }
        }
        if worst > max_rel {
            max_rel = worst;
            worst_name = name.clone();
        }
        per_param.push((name, worst));
    }
    Ok(GradCheckReport { step, per_param, worst_name, max_rel_err: max_rel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Random values bounded away from zero, for inputs that feed a relu
    /// or max pool where finite differences would straddle the kink.
    fn random_tensor_off_kink(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| {
                let v: f64 = rng.gen_range(0.2..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn relu_backward_masks_non_positive_inputs() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        let loss = tape.dot_const(y, Tensor::new([1, 1, 1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        let _ = loss;
        let store = ParamStore::new();
        tape.backward(&store, None).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn gap_backward_spreads_upstream_evenly() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.global_avg_pool(x);
        let _ = tape.dot_const(y, Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap()).unwrap();
        let store = ParamStore::new();
        tape.backward(&store, None).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn tape_forward_matches_direct_op_composition_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let geom = ConvGeometry::same(4, 6, 3, 2, 2, 1).unwrap();
        let x = random_tensor(&mut rng, [2, 4, 6, 6]);
        let w = random_tensor(&mut rng, geom.weight_shape());

        let mut params = ParamStore::new();
        let wid = params.add("w", w.clone(), true).unwrap();
        let mut running = BnRunning::new(6);
        let gid = params.add("g", Tensor::new([1, 6, 1, 1], vec![1.0; 6]).unwrap(), false).unwrap();
        let bid = params.add("b", Tensor::zeros([1, 6, 1, 1]), false).unwrap();

        let mut tape = Tape::new();
        let xid = tape.input(x.clone());
        let c = tape.conv2d(&params, xid, wid, geom).unwrap();
        let n = tape.batch_norm(&params, c, gid, bid, &mut running, true).unwrap();
        let r = tape.relu(n);

        let direct_conv = ops::conv2d(&x, &w, &geom).unwrap();
        let mut st = ops::BatchNormState::new(6);
        let direct_bn = ops::batch_norm(&direct_conv, &mut st, true).unwrap();
        let direct = ops::relu(&direct_bn);
        assert_eq!(tape.value(r), &direct);
        assert_eq!(running.mean, st.running_mean);
        assert_eq!(running.var, st.running_var);
    }

    #[test]
    fn zero_upstream_gradient_zeroes_every_parameter_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let geom = ConvGeometry::same(2, 4, 3, 1, 1, 1).unwrap();
        let mut params = ParamStore::new();
        let wid = params.add("w", random_tensor(&mut rng, geom.weight_shape()), true).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(random_tensor(&mut rng, [1, 2, 5, 5]));
        let c = tape.conv2d(&params, x, wid, geom).unwrap();
        let y = tape.global_avg_pool(c);
        let grads = tape.backward(&params, Some(Tensor::zeros(tape.value(y).shape()))).unwrap();
        assert!(grads.get(wid).data().iter().all(|&v| v == 0.0));
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn replaying_twice_errors_until_reset() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(2.0));
        let _ = tape.scale(x, 3.0);
        let store = ParamStore::new();
        tape.backward(&store, None).unwrap();
        assert!(matches!(tape.backward(&store, None), Err(Error::TapeReplayed)));
        tape.reset();
        tape.backward(&store, None).unwrap();
    }

    #[test]
    fn gate_gradient_is_inner_product_of_upstream_and_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_tensor(&mut rng, [2, 3, 4, 4]);
        let gate = random_tensor(&mut rng, [2, 3, 1, 1]);
        let upstream = random_tensor(&mut rng, [2, 3, 4, 4]);

        let mut tape = Tape::new();
        let xid = tape.input(x.clone());
        let gid = tape.input(gate);
        let y = tape.scale_channels(xid, gid).unwrap();
        let store = ParamStore::new();
        let _ = y;
        tape.backward(&store, Some(upstream.clone())).unwrap();
        let gg = tape.grad(gid).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let expect: f64 =
                    upstream.plane(b, c).iter().zip(x.plane(b, c)).map(|(&g, &v)| g * v).sum();
                assert!((gg.at(b, c, 0, 0) - expect).abs() < 1e-12);
            }
        }
    }

    /// Builds a closure for `grad_check` over a tape-building function.
    fn checker<F>(build: F) -> impl FnMut(&ParamStore, bool) -> Result<(f64, Option<Grads>)>
    where
        F: Fn(&ParamStore, &mut Tape) -> Result<NodeId>,
    {
        move |params, with_grad| {
            let mut tape = Tape::new();
            let out = build(params, &mut tape)?;
            let loss = tape.value(out).data()[0];
            if with_grad {
                let grads = tape.backward(params, None)?;
                Ok((loss, Some(grads)))
            } else {
                Ok((loss, None))
            }
        }
    }

    #[test]
    fn linear_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut params = ParamStore::new();
        let x = params.add("x", random_tensor(&mut rng, [3, 5, 1, 1]), false).unwrap();
        let w = params.add("w", random_tensor(&mut rng, [4, 5, 1, 1]), true).unwrap();
        let b = params.add("b", random_tensor(&mut rng, [1, 4, 1, 1]), false).unwrap();
        let coeffs = random_tensor(&mut rng, [3, 4, 1, 1]);
        let report = grad_check(
            &mut params,
            checker(move |p, tape| {
                let xid = tape.param(p, x);
                let y = tape.linear(p, xid, w, Some(b))?;
                tape.dot_const(y, coeffs.clone())
            }),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for (k, d, g, s) in [(3, 1, 1, 1), (3, 2, 2, 1), (1, 1, 1, 1), (3, 1, 2, 2), (5, 1, 1, 2)] {
            let geom = ConvGeometry::same(4, 4, k, d, g, s).unwrap();
            let mut params = ParamStore::new();
            let x = params.add("x", random_tensor(&mut rng, [2, 4, 7, 7]), false).unwrap();
            let w = params.add("w", random_tensor(&mut rng, geom.weight_shape()), true).unwrap();
            let (oh, ow) = geom.out_size(7, 7).unwrap();
            let coeffs = random_tensor(&mut rng, [2, 4, oh, ow]);
            let report = grad_check(
                &mut params,
                checker(move |p, tape| {
                    let xid = tape.param(p, x);
                    let y = tape.conv2d(p, xid, w, geom)?;
                    tape.dot_const(y, coeffs.clone())
                }),
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-6, "k={k} d={d} g={g} s={s}: {report:?}");
        }
    }

    #[test]
    fn batch_norm_training_gradients_include_statistic_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut params = ParamStore::new();
        let x = params.add("x", random_tensor(&mut rng, [3, 2, 4, 4]), false).unwrap();
        let g = params.add("g", random_tensor(&mut rng, [1, 2, 1, 1]), false).unwrap();
        let b = params.add("b", random_tensor(&mut rng, [1, 2, 1, 1]), false).unwrap();
        let coeffs = random_tensor(&mut rng, [3, 2, 4, 4]);
        let report = grad_check(
            &mut params,
            checker(move |p, tape| {
                let xid = tape.param(p, x);
                let mut running = BnRunning::new(2);
                let y = tape.batch_norm(p, xid, g, b, &mut running, true)?;
                tape.dot_const(y, coeffs.clone())
            }),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn batch_norm_inference_gradients_are_plain_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = ParamStore::new();
        let x = params.add("x", random_tensor(&mut rng, [2, 2, 3, 3]), false).unwrap();
        let g = params.add("g", random_tensor(&mut rng, [1, 2, 1, 1]), false).unwrap();
        let b = params.add("b", random_tensor(&mut rng, [1, 2, 1, 1]), false).unwrap();
        let coeffs = random_tensor(&mut rng, [2, 2, 3, 3]);
        let mut running = BnRunning::new(2);
        running.mean = vec![0.3, -0.2];
        running.var = vec![1.5, 0.7];
        let report = grad_check(
            &mut params,
            checker(move |p, tape| {
                let xid = tape.param(p, x);
                let mut r = running.clone();
                let y = tape.batch_norm(p, xid, g, b, &mut r, false)?;
                tape.dot_const(y, coeffs.clone())
            }),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn path_softmax_weighted_sum_gradients_match_finite_differences() {
        // The select stage in miniature: softmax over two paths, then a
        // convex combination of two feature maps.
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut params = ParamStore::new();
        let logits = params.add("logits", random_tensor(&mut rng, [2, 6, 1, 1]), false).unwrap();
        let p1 = params.add("p1", random_tensor(&mut rng, [2, 3, 4, 4]), false).unwrap();
        let p2 = params.add("p2", random_tensor(&mut rng, [2, 3, 4, 4]), false).unwrap();
        let coeffs = random_tensor(&mut rng, [2, 3, 4, 4]);
        let report = grad_check(
            &mut params,
            checker(move |p, tape| {
                let l = tape.param(p, logits);
                let a = tape.path_softmax(l, 2)?;
                let a1 = tape.narrow_channels(a, 0, 3)?;
                let a2 = tape.narrow_channels(a, 3, 3)?;
                let x1 = tape.param(p, p1);
                let x2 = tape.param(p, p2);
                let s1 = tape.scale_channels(x1, a1)?;
                let s2 = tape.scale_channels(x2, a2)?;
                let v = tape.add_n(&[s1, s2])?;
                tape.dot_const(v, coeffs.clone())
            }),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn relu_maxpool_sigmoid_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut params = ParamStore::new();
        let x = params.add("x", random_tensor_off_kink(&mut rng, [2, 2, 6, 6]), false).unwrap();
        let coeffs = random_tensor(&mut rng, [2, 2, 3, 3]);
        let report = grad_check(
            &mut params,
            checker(move |p, tape| {
                let xid = tape.param(p, x);
                let r = tape.relu(xid);
                let m = tape.max_pool2d(r, 3, 2, 1)?;
                let s = tape.sigmoid(m);
                tape.dot_const(s, coeffs.clone())
            }),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut params = ParamStore::new();
        let logits = params.add("logits", random_tensor(&mut rng, [4, 5, 1, 1]), false).unwrap();
        let labels = vec![0u32, 3, 2, 4];
        for smoothing in [0.0, 0.1] {
            let labels = labels.clone();
            let report = grad_check(
                &mut params,
                checker(move |p, tape| {
                    let l = tape.param(p, logits);
                    tape.cross_entropy(l, &labels, smoothing)
                }),
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-8, "smoothing {smoothing}: {report:?}");
        }
    }

    #[test]
    fn concat_and_scale_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = ParamStore::new();
        let a = params.add("a", random_tensor(&mut rng, [1, 2, 3, 3]), false).unwrap();
        let b = params.add("b", random_tensor(&mut rng, [1, 3, 3, 3]), false).unwrap();
        let coeffs = random_tensor(&mut rng, [1, 5, 3, 3]);
        let report = grad_check(
            &mut params,
            checker(move |p, tape| {
                let aid = tape.param(p, a);
                let bid = tape.param(p, b);
                let cat = tape.concat_channels(&[aid, bid])?;
                let sc = tape.scale(cat, -1.75);
                tape.dot_const(sc, coeffs.clone())
            }),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }
}
