//! Selective kernel convolution and the squeeze-excite gate.
//!
//! The selective kernel operator runs several convolution paths with
//! different receptive fields over the same input, fuses them into a
//! channel descriptor, and lets a per-channel softmax across paths decide
//! how to mix the branch outputs. The whole thing is differentiable, so
//! the mixing policy is trained jointly with the filters.

use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BnId, BnStore, NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::ops::ConvGeometry;
use crate::tensor::Tensor;

/// One convolution branch of a selective kernel operator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub kernel: usize,
    pub dilation: usize,
    /// Cardinality override for this path; `None` uses the operator-wide
    /// group count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<usize>,
}

impl PathSpec {
    pub fn new(kernel: usize, dilation: usize) -> Self {
        Self { kernel, dilation, groups: None }
    }

    /// Receptive field this path emulates: a dilated k-tap kernel covers
    /// the span of a dense `k + (k-1)(d-1)` one.
    pub fn effective_kernel(&self) -> usize {
        self.kernel + (self.kernel - 1) * (self.dilation - 1)
    }
}

/// How branch outputs are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Per-channel softmax over paths gates each branch (the full
    /// split-fuse-select operator).
    Attention,
    /// Plain elementwise sum of the branches; the fuse and select stages
    /// are absent entirely. The ablation baseline.
    NaiveSum,
}

/// Configuration of a selective kernel operator, minus its channel count
/// and stride (those come from the surrounding block).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkSettings {
    pub paths: Vec<PathSpec>,
    /// Default group count for paths without an override.
    pub groups: usize,
    /// Squeeze ratio for the fuse descriptor: `d = max(c / reduction, min_dim)`.
    pub reduction: usize,
    pub min_dim: usize,
    pub aggregation: Aggregation,
}

impl SkSettings {
    /// Two branches, 3x3 dense and 3x3 two-dilated (a 5x5 field at 3x3
    /// cost), 32 groups, reduction 16 floored at 32.
    pub fn standard() -> Self {
        Self {
            paths: vec![PathSpec::new(3, 1), PathSpec { kernel: 3, dilation: 2, groups: None }],
            groups: 32,
            reduction: 16,
            min_dim: 32,
            aggregation: Aggregation::Attention,
        }
    }

    /// Width of the fuse descriptor for a given channel count.
    pub fn fuse_dim(&self, channels: usize) -> usize {
        (channels / self.reduction).max(self.min_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths.is_empty() {
            return Err(Error::Config("selective kernel needs at least one path".into()));
        }
        for p in &self.paths {
            if p.kernel % 2 == 0 || p.kernel == 0 {
                return Err(Error::Config(format!("path kernel {} must be odd", p.kernel)));
            }
            if p.dilation == 0 {
                return Err(Error::Config("path dilation must be at least 1".into()));
            }
        }
        if self.groups == 0 || self.reduction == 0 || self.min_dim == 0 {
            return Err(Error::Config("groups, reduction and min_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Affine batch-norm parameters plus the id of their running statistics.
#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: BnId,
}

/// Convolution followed by batch norm; the caller applies any activation.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub weight: ParamId,
    pub geom: ConvGeometry,
    pub bn: BnParams,
}

impl ConvBn {
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        bns: &mut BnStore,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let c = tape.conv2d(params, x, self.weight, self.geom)?;
        tape.batch_norm(params, c, self.bn.gamma, self.bn.beta, bns.get_mut(self.bn.running), training)
    }
}

/// Fully-connected layer acting on `(n, c, 1, 1)` descriptors.
#[derive(Clone, Copy, Debug)]
pub struct Fc {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Fc {
    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        tape.linear(params, x, self.weight, self.bias)
    }
}

/// Registers parameters with the conventional initializations: He normal
/// for convolutions, unit/zero for batch-norm affine pairs, small uniform
/// for fully-connected layers.
pub struct LayerBuilder<'a> {
    pub params: &'a mut ParamStore,
    pub bns: &'a mut BnStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl LayerBuilder<'_> {
    pub fn conv(&mut self, name: &str, geom: ConvGeometry) -> Result<ParamId> {
        geom.validate()?;
        let fan_in = (geom.in_channels / geom.groups) * geom.kernel * geom.kernel;
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let shape = geom.weight_shape();
        let len = shape.iter().product();
        let data = (0..len).map(|_| dist.sample(self.rng)).collect();
        self.params.add(name, Tensor::new(shape, data)?, true)
    }

    pub fn bn(&mut self, prefix: &str, channels: usize) -> Result<BnParams> {
        let gamma = self.params.add(
            format!("{prefix}.gamma"),
            Tensor::full([1, channels, 1, 1], 1.0),
            false,
        )?;
        let beta =
            self.params.add(format!("{prefix}.beta"), Tensor::zeros([1, channels, 1, 1]), false)?;
        let running = self.bns.add(prefix, channels)?;
        Ok(BnParams { gamma, beta, running })
    }

    pub fn conv_bn(&mut self, prefix: &str, geom: ConvGeometry) -> Result<ConvBn> {
        let weight = self.conv(&format!("{prefix}.conv.weight"), geom)?;
        let bn = self.bn(&format!("{prefix}.bn"), geom.out_channels)?;
        Ok(ConvBn { weight, geom, bn })
    }

    pub fn fc(&mut self, prefix: &str, out: usize, inn: usize, bias: bool) -> Result<Fc> {
        let bound = 1.0 / (inn as f64).sqrt();
        let data = (0..out * inn).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let weight =
            self.params.add(format!("{prefix}.weight"), Tensor::new([out, inn, 1, 1], data)?, true)?;
        let bias = if bias {
            Some(self.params.add(format!("{prefix}.bias"), Tensor::zeros([1, out, 1, 1]), false)?)
        } else {
            None
        };
        Ok(Fc { weight, bias })
    }
}

/// One recorded selection: which unit fired and the per-sample softmax
/// attention laid out path-major as `(n, paths * channels, 1, 1)`.
#[derive(Clone, Debug)]
pub struct SelectionRecord {
    pub unit: String,
    pub paths: usize,
    pub channels: usize,
    pub attention: Tensor,
}

/// Collects [`SelectionRecord`]s during a forward pass.
pub type SelectionSink = Vec<SelectionRecord>;

struct SkPath {
    conv: ConvBn,
}

struct Select {
    /// Per-path `(c, d)` projections from the fuse descriptor to channel
    /// logits.
    fuse_fc: Fc,
    fuse_bn: BnParams,
    path_fcs: Vec<Fc>,
}

/// The split-fuse-select operator. Input and output both carry
/// `channels` feature maps; a stride applies to every branch alike.
pub struct SkConv {
    /// Label used when reporting recorded selections.
    pub unit: String,
    pub channels: usize,
    pub stride: usize,
    pub settings: SkSettings,
    paths: Vec<SkPath>,
    /// Absent in naive-sum aggregation.
    select: Option<Select>,
}

impl SkConv {
    /// Registers all parameters under `prefix`; `unit` is the reporting
    /// label for recorded selections.
    pub fn new(
        b: &mut LayerBuilder,
        prefix: &str,
        unit: &str,
        channels: usize,
        stride: usize,
        settings: &SkSettings,
    ) -> Result<Self> {
        settings.validate()?;
        let mut paths = Vec::with_capacity(settings.paths.len());
        for (m, p) in settings.paths.iter().enumerate() {
            let groups = p.groups.unwrap_or(settings.groups);
            let geom =
                ConvGeometry::same(channels, channels, p.kernel, p.dilation, groups, stride)?;
            paths.push(SkPath { conv: b.conv_bn(&format!("{prefix}.path{m}"), geom)? });
        }
        let select = match settings.aggregation {
            Aggregation::NaiveSum => None,
            Aggregation::Attention => {
                let d = settings.fuse_dim(channels);
                // The fuse projection carries no bias: batch norm right
                // behind it would absorb one, leaving a parameter with an
                // exactly zero gradient.
                let fuse_fc = b.fc(&format!("{prefix}.fuse.fc"), d, channels, false)?;
                let fuse_bn = b.bn(&format!("{prefix}.fuse.bn"), d)?;
                let mut path_fcs = Vec::with_capacity(settings.paths.len());
                for m in 0..settings.paths.len() {
                    path_fcs.push(b.fc(&format!("{prefix}.select.path{m}"), channels, d, true)?);
                }
                Some(Select { fuse_fc, fuse_bn, path_fcs })
            }
        };
        Ok(Self {
            unit: unit.to_string(),
            channels,
            stride,
            settings: settings.clone(),
            paths,
            select,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        bns: &mut BnStore,
        x: NodeId,
        training: bool,
        sink: Option<&mut SelectionSink>,
    ) -> Result<NodeId> {
        // Split: every branch sees the same input.
        let mut branch_outs = Vec::with_capacity(self.paths.len());
        for p in &self.paths {
            let bn = p.conv.forward(tape, params, bns, x, training)?;
            branch_outs.push(tape.relu(bn));
        }
        let Some(select) = &self.select else {
            return tape.add_n(&branch_outs);
        };

        // Fuse: sum the branches and squeeze to a global descriptor.
        let u = tape.add_n(&branch_outs)?;
        let s = tape.global_avg_pool(u);
        let fc = select.fuse_fc.forward(tape, params, s)?;
        let bn = tape.batch_norm(
            params,
            fc,
            select.fuse_bn.gamma,
            select.fuse_bn.beta,
            bns.get_mut(select.fuse_bn.running),
            training,
        )?;
        let z = tape.relu(bn);

        // Select: per-channel softmax across path logits.
        let mut logits = Vec::with_capacity(self.paths.len());
        for fc in &select.path_fcs {
            logits.push(fc.forward(tape, params, z)?);
        }
        let stacked = tape.concat_channels(&logits)?;
        let attention = tape.path_softmax(stacked, self.paths.len())?;
        if let Some(sink) = sink {
            sink.push(SelectionRecord {
                unit: self.unit.clone(),
                paths: self.paths.len(),
                channels: self.channels,
                attention: tape.value(attention).clone(),
            });
        }

        let mut gated = Vec::with_capacity(self.paths.len());
        for (m, &branch) in branch_outs.iter().enumerate() {
            let a = tape.narrow_channels(attention, m * self.channels, self.channels)?;
            gated.push(tape.scale_channels(branch, a)?);
        }
        tape.add_n(&gated)
    }
}

/// Squeeze-excite gate: a two-layer bottleneck over the pooled
/// descriptor produces a sigmoid gate per channel.
pub struct SeBlock {
    pub channels: usize,
    fc1: Fc,
    fc2: Fc,
}

impl SeBlock {
    pub fn new(b: &mut LayerBuilder, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "squeeze-excite reduction {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        let fc1 = b.fc(&format!("{prefix}.fc1"), hidden, channels, true)?;
        let fc2 = b.fc(&format!("{prefix}.fc2"), channels, hidden, true)?;
        Ok(Self { channels, fc1, fc2 })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        let s = tape.global_avg_pool(x);
        let h = self.fc1.forward(tape, params, s)?;
        let h = tape.relu(h);
        let g = self.fc2.forward(tape, params, h)?;
        let g = tape.sigmoid(g);
        tape.scale_channels(x, g)
    }
}
