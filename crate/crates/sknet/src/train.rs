//! Loss, optimizer, schedule, and the training loop.

use rand::{seq::SliceRandom as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::Network;
use crate::autograd::{Grads, ParamStore, Tape};
use crate::data::{augment, to_batch, AugmentMode, ChannelStats, LabeledImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Softmax cross entropy with label smoothing, averaged over the batch.
///
/// `logits` is `(n, k, 1, 1)`. The target distribution puts `1 - smoothing`
/// on the label and spreads `smoothing` uniformly over all `k` classes.
/// Returns the scalar loss and the softmax probabilities, which the
/// backward pass reuses.
pub fn ce_forward(logits: &Tensor, labels: &[u32], smoothing: f64) -> Result<(f64, Tensor)> {
    let [n, k, h, w] = logits.shape();
    if h != 1 || w != 1 {
        return Err(Error::Shape(format!("cross entropy expects (n,k,1,1) logits, got {:?}", logits.shape())));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for batch of {n}", labels.len())));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let mut probs = Tensor::zeros(logits.shape());
    let uniform = smoothing / k as f64;
    let mut total = 0.0;
    for s in 0..n {
        let label = labels[s] as usize;
        if label >= k {
            return Err(Error::Config(format!("label {label} out of range for {k} classes")));
        }
        let row = &logits.data()[s * k..(s + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite("cross entropy logits".into()));
        }
        let mut denom = 0.0;
        for &l in row {
            denom += (l - max).exp();
        }
        let lse = max + denom.ln();
        let prow = &mut probs.data_mut()[s * k..(s + 1) * k];
        let mut loss = 0.0;
        for (c, (&l, p)) in row.iter().zip(prow.iter_mut()).enumerate() {
            let logp = l - lse;
            *p = logp.exp();
            let q = uniform + if c == label { 1.0 - smoothing } else { 0.0 };
            loss -= q * logp;
        }
        total += loss;
    }
    Ok((total / n as f64, probs))
}

/// Gradient of [`ce_forward`] with respect to the logits:
/// `(p - q) * upstream / n` per element.
pub fn ce_backward(probs: &Tensor, labels: &[u32], smoothing: f64, upstream: f64) -> Tensor {
    let [n, k, _, _] = probs.shape();
    let uniform = smoothing / k as f64;
    let scale = upstream / n as f64;
    let mut grad = Tensor::zeros(probs.shape());
    for s in 0..n {
        let label = labels[s] as usize;
        let prow = &probs.data()[s * k..(s + 1) * k];
        let grow = &mut grad.data_mut()[s * k..(s + 1) * k];
        for (c, (&p, g)) in prow.iter().zip(grow.iter_mut()).enumerate() {
            let q = uniform + if c == label { 1.0 - smoothing } else { 0.0 };
            *g = (p - q) * scale;
        }
    }
    grad
}

/// SGD with momentum and classic coupled weight decay: decay joins the
/// gradient before the momentum update, and only for parameters flagged
/// for decay (convolution and fc weights; never batch-norm affine pairs
/// or biases).
///
/// v <- mu * v + g (+ wd * p), then p <- p - lr * v.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = params.iter().map(|(_, e)| Tensor::zeros(e.value.shape())).collect();
        Self { momentum, weight_decay, velocity }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let decay = params.entry(id).decay;
            let wd = if decay { self.weight_decay } else { 0.0 };
            let v = &mut self.velocity[id.0 as usize];
            let g = grads.get(id);
            let p = params.get_mut(id);
            for ((vv, &gv), pv) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut().iter_mut()) {
                *vv = self.momentum * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Training recipe. Schedule entries are `(threshold, multiplier)`:
/// thresholds below 1.0 are fractions of the total epochs, 1.0 and above
/// are absolute epoch indices. From the threshold epoch onward the rate
/// is multiplied in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Vec<(f64, f64)>,
    pub label_smoothing: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Micro-batches averaged per optimizer step, to emulate larger
    /// batches.
    pub accum: usize,
    pub seed: u64,
    /// Stop after any epoch whose mean training loss falls below this.
    #[serde(default)]
    pub stop_loss: Option<f64>,
}

impl OptimConfig {
    /// Large-image recipe: momentum 0.9, decay 1e-4, lr 0.1 divided by
    /// 10 every 30 epochs, label smoothing 0.1.
    pub fn large_image(epochs: usize) -> Self {
        let schedule = (1..).map(|i| (30.0 * i as f64, 0.1)).take_while(|(t, _)| *t < epochs as f64).collect();
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule,
            label_smoothing: 0.1,
            batch: 256,
            epochs,
            accum: 1,
            stop_loss: None,
            seed: 0,
        }
    }

    /// 32x32 recipe: momentum 0.9, decay 5e-4, drops at 50% and 75%,
    /// lr0 0.1 for ten classes and 0.05 for a hundred, no smoothing.
    pub fn cifar(epochs: usize, classes: usize) -> Self {
        Self {
            lr0: if classes >= 100 { 0.05 } else { 0.1 },
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: vec![(0.5, 0.1), (0.75, 0.1)],
            label_smoothing: 0.0,
            batch: 128,
            epochs,
            accum: 1,
            stop_loss: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr0.is_nan() || self.lr0 < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr0 must be >= 0 and momentum in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing outside [0, 1)".into()));
        }
        if self.batch == 0 || self.epochs == 0 || self.accum == 0 {
            return Err(Error::Config("batch, epochs and accum must be positive".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate at a given epoch.
pub fn lr_at(cfg: &OptimConfig, epoch: usize) -> f64 {
    let mut lr = cfg.lr0;
    for &(threshold, mult) in &cfg.schedule {
        let at = if threshold < 1.0 {
            (threshold * cfg.epochs as f64).round() as usize
        } else {
            threshold as usize
        };
        if epoch >= at {
            lr *= mult;
        }
    }
    lr
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    /// Absent when no evaluation split was supplied.
    pub eval_top1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,train_top1,eval_top1\n");
        for e in &self.epochs {
            let eval = e.eval_top1.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{eval}\n",
                e.epoch, e.lr, e.train_loss, e.train_top1
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serializes")
    }
}

/// Fraction of rows whose argmax (lowest index on ties) misses the
/// label.
pub fn top1_error(logits: &Tensor, labels: &[u32]) -> f64 {
    let [n, k, _, _] = logits.shape();
    let mut wrong = 0usize;
    for s in 0..n {
        let row = &logits.data()[s * k..(s + 1) * k];
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best != labels[s] as usize {
            wrong += 1;
        }
    }
    wrong as f64 / n as f64
}

/// Inference-mode top-1 error over a dataset.
pub fn evaluate(
    net: &mut Network,
    images: &[LabeledImage],
    stats: &ChannelStats,
    batch: usize,
) -> Result<f64> {
    if images.is_empty() || batch == 0 {
        return Err(Error::Config("evaluation needs images and a positive batch size".into()));
    }
    let mut wrong = 0.0;
    for chunk in images.chunks(batch) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let (x, labels) = to_batch(&refs, stats)?;
        let logits = net.infer(&x, None)?;
        wrong += top1_error(&logits, &labels) * chunk.len() as f64;
    }
    Ok(wrong / images.len() as f64)
}

/// Runs the full recipe: shuffled mini-batches, optional augmentation,
/// cross entropy, SGD with the stepped schedule. Deterministic for a
/// fixed config in this single-threaded implementation.
pub fn train(
    net: &mut Network,
    train_set: &[LabeledImage],
    eval_set: Option<&[LabeledImage]>,
    cfg: &OptimConfig,
    mode: AugmentMode,
    stats: &ChannelStats,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(&net.params, cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_wrong = 0.0;
        let mut seen = 0usize;

        let mut pending: Option<Grads> = None;
        let mut pending_count = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let augmented: Vec<LabeledImage> =
                chunk.iter().map(|&i| augment(&train_set[i], mode, &mut rng)).collect();
            let refs: Vec<&LabeledImage> = augmented.iter().collect();
            let (x, labels) = to_batch(&refs, stats)?;

            let mut tape = Tape::new();
            let xid = tape.input(x);
            let logits = net.forward(&mut tape, xid, true, None)?;
            let loss_node = tape.cross_entropy(logits, &labels, cfg.label_smoothing)?;
            let loss = tape.value(loss_node).data()[0];
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch} after {} steps",
                    log.step_losses.len()
                )));
            }
            epoch_loss += loss * chunk.len() as f64;
            epoch_wrong += top1_error(tape.value(logits), &labels) * chunk.len() as f64;
            seen += chunk.len();

            let grads = tape.backward(&net.params, None)?;
            match &mut pending {
                None => pending = Some(grads),
                Some(acc) => acc.accumulate(&grads),
            }
            pending_count += 1;
            if pending_count == cfg.accum {
                let mut grads = pending.take().expect("accumulated");
                if cfg.accum > 1 {
                    grads.scale(1.0 / cfg.accum as f64);
                }
                opt.step(&mut net.params, &grads, lr);
                log.step_losses.push(loss);
                pending_count = 0;
            }
        }
        // A leftover partial accumulation group still steps, averaged
        // over the micro-batches it actually saw.
        if let Some(mut grads) = pending.take() {
            if pending_count > 1 {
                grads.scale(1.0 / pending_count as f64);
            }
            opt.step(&mut net.params, &grads, lr);
            log.step_losses.push(*log.step_losses.last().unwrap_or(&0.0));
        }

        let eval_top1 = match eval_set {
            Some(set) => Some(evaluate(net, set, stats, cfg.batch)?),
            None => None,
        };
        let train_loss = epoch_loss / seen as f64;
        log.epochs.push(EpochLog {
            epoch,
            lr,
            train_loss,
            train_top1: epoch_wrong / seen as f64,
            eval_top1,
        });
        if cfg.stop_loss.is_some_and(|t| train_loss < t) {
            break;
        }
    }
    Ok(log)
}
