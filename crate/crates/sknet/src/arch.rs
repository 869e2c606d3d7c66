//! Whole-network construction from a declarative spec.
//!
//! An [`ArchSpec`] names a stem, a block kind, and a channel plan per
//! stage; [`Network::build`] turns it into parameters plus wired layer
//! structs. The same spec drives the analytic cost model, so a count and
//! a build can never drift apart. Specs serialize as TOML for config
//! files and for embedding in checkpoints.

use std::fs;
use std::path::Path;

use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BnStore, NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::ops::ConvGeometry;
use crate::sk::{Aggregation, ConvBn, Fc, LayerBuilder, SeBlock, SelectionSink, SkConv, SkSettings};
use crate::tensor::Tensor;

/// Stem shape. Large-image nets halve the input twice before the first
/// stage; 32x32 nets keep full resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// 7x7 stride-2 convolution followed by 3x3 stride-2 max pooling.
    Downsampling,
    /// Single 3x3 stride-1 convolution.
    Compact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kind: StemKind,
    pub out: usize,
}

/// One stage: `blocks` bottlenecks at grouped width `width` emitting
/// `out` channels, with `stride` applied by the first block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub width: usize,
    pub out: usize,
    pub stride: usize,
}

/// What sits between the two 1x1 convolutions of a bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Grouped 3x3 convolution.
    Grouped,
    /// Grouped 3x3 convolution plus a squeeze-excite gate on the block
    /// output.
    GroupedSe,
    /// Selective kernel convolution.
    SelectiveKernel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub stem: StemSpec,
    pub block: BlockKind,
    /// Cardinality of the grouped 3x3 convolution in grouped blocks;
    /// selective kernel paths carry their own group counts.
    pub groups: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sk: Option<SkSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_reduction: Option<usize>,
    pub stages: Vec<StageSpec>,
    pub classes: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("spec has no stages".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.stem.out == 0 {
            return Err(Error::Config("stem emits zero channels".into()));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.blocks == 0 || st.width == 0 || st.out == 0 {
                return Err(Error::Config(format!("stage {} has a zero field", i + 1)));
            }
            if st.stride != 1 && st.stride != 2 {
                return Err(Error::Config(format!("stage {} stride must be 1 or 2", i + 1)));
            }
        }
        match self.block {
            BlockKind::SelectiveKernel => {
                let sk = self
                    .sk
                    .as_ref()
                    .ok_or_else(|| Error::Config("selective kernel blocks need [sk] settings".into()))?;
                sk.validate()?;
                for st in &self.stages {
                    for p in &sk.paths {
                        let g = p.groups.unwrap_or(sk.groups);
                        if st.width % g != 0 {
                            return Err(Error::Config(format!(
                                "width {} not divisible by path groups {g}",
                                st.width
                            )));
                        }
                    }
                }
            }
            BlockKind::Grouped | BlockKind::GroupedSe => {
                if self.groups == 0 {
                    return Err(Error::Config("grouped blocks need groups >= 1".into()));
                }
                for st in &self.stages {
                    if st.width % self.groups != 0 {
                        return Err(Error::Config(format!(
                            "width {} not divisible by cardinality {}",
                            st.width, self.groups
                        )));
                    }
                }
                if self.block == BlockKind::GroupedSe {
                    let r = self
                        .se_reduction
                        .ok_or_else(|| Error::Config("squeeze-excite blocks need se_reduction".into()))?;
                    for st in &self.stages {
                        if r == 0 || st.out % r != 0 {
                            return Err(Error::Config(format!(
                                "se_reduction {r} must divide stage output {}",
                                st.out
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("spec serialization: {e}")))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ArchSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("spec parse: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Names of the built-in architectures, in listing order.
pub const PRESET_NAMES: &[&str] = &[
    "resnext50",
    "senet50",
    "sknet26",
    "sknet50",
    "sknet101",
    "resnext29-cifar",
    "senet29-cifar",
    "sknet29-cifar",
    "sknet29-tiny",
];

fn large_image_stages(blocks: [usize; 4]) -> Vec<StageSpec> {
    let widths = [128, 256, 512, 1024];
    let outs = [256, 512, 1024, 2048];
    (0..4)
        .map(|i| StageSpec {
            blocks: blocks[i],
            width: widths[i],
            out: outs[i],
            stride: if i == 0 { 1 } else { 2 },
        })
        .collect()
}

fn cifar_stages() -> Vec<StageSpec> {
    let widths = [512, 1024, 2048];
    let outs = [256, 512, 1024];
    (0..3)
        .map(|i| StageSpec {
            blocks: 3,
            width: widths[i],
            out: outs[i],
            stride: if i == 0 { 1 } else { 2 },
        })
        .collect()
}

/// SK settings for the 32x32 presets: 16 groups, reduction 32, and a 1x1
/// second path instead of the dilated one, to curb overfitting on small
/// images.
fn cifar_sk() -> SkSettings {
    SkSettings {
        paths: vec![
            crate::sk::PathSpec::new(3, 1),
            crate::sk::PathSpec { kernel: 1, dilation: 1, groups: None },
        ],
        groups: 16,
        reduction: 32,
        min_dim: 32,
        aggregation: Aggregation::Attention,
    }
}

/// Returns a built-in [`ArchSpec`] by name.
pub fn preset(name: &str) -> Result<ArchSpec> {
    let large_stem = StemSpec { kind: StemKind::Downsampling, out: 64 };
    let cifar_stem = StemSpec { kind: StemKind::Compact, out: 64 };
    let spec = match name {
        "resnext50" => ArchSpec {
            name: name.into(),
            stem: large_stem,
            block: BlockKind::Grouped,
            groups: 32,
            sk: None,
            se_reduction: None,
            stages: large_image_stages([3, 4, 6, 3]),
            classes: 1000,
        },
        "senet50" => ArchSpec {
            name: name.into(),
            stem: large_stem,
            block: BlockKind::GroupedSe,
            groups: 32,
            sk: None,
            se_reduction: Some(16),
            stages: large_image_stages([3, 4, 6, 3]),
            classes: 1000,
        },
        "sknet26" | "sknet50" | "sknet101" => ArchSpec {
            name: name.into(),
            stem: large_stem,
            block: BlockKind::SelectiveKernel,
            groups: 32,
            sk: Some(SkSettings::standard()),
            se_reduction: None,
            stages: large_image_stages(match name {
                "sknet26" => [2, 2, 2, 2],
                "sknet50" => [3, 4, 6, 3],
                _ => [3, 4, 23, 3],
            }),
            classes: 1000,
        },
        "resnext29-cifar" => ArchSpec {
            name: name.into(),
            stem: cifar_stem,
            block: BlockKind::Grouped,
            groups: 16,
            sk: None,
            se_reduction: None,
            stages: cifar_stages(),
            classes: 10,
        },
        "senet29-cifar" => ArchSpec {
            name: name.into(),
            stem: cifar_stem,
            block: BlockKind::GroupedSe,
            groups: 16,
            sk: None,
            se_reduction: Some(16),
            stages: cifar_stages(),
            classes: 10,
        },
        "sknet29-cifar" => ArchSpec {
            name: name.into(),
            stem: cifar_stem,
            block: BlockKind::SelectiveKernel,
            groups: 16,
            sk: Some(cifar_sk()),
            se_reduction: None,
            stages: cifar_stages(),
            classes: 10,
        },
        // Width-reduced sknet29 for desk-scale experiments on the
        // 4-class synthetic dataset.
        "sknet29-tiny" => ArchSpec {
            name: name.into(),
            stem: StemSpec { kind: StemKind::Compact, out: 8 },
            block: BlockKind::SelectiveKernel,
            groups: 4,
            sk: Some(SkSettings {
                paths: vec![
                    crate::sk::PathSpec::new(3, 1),
                    crate::sk::PathSpec { kernel: 1, dilation: 1, groups: None },
                ],
                groups: 4,
                reduction: 4,
                min_dim: 4,
                aggregation: Aggregation::Attention,
            }),
            se_reduction: None,
            stages: vec![
                StageSpec { blocks: 3, width: 8, out: 16, stride: 1 },
                StageSpec { blocks: 3, width: 16, out: 32, stride: 2 },
                StageSpec { blocks: 3, width: 32, out: 64, stride: 2 },
            ],
            classes: 4,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; known presets: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    debug_assert!(spec.validate().is_ok());
    Ok(spec)
}

/// Resolves `--arch` arguments: a preset name, else a TOML spec file.
pub fn load_arch(arg: &str) -> Result<ArchSpec> {
    if PRESET_NAMES.contains(&arg) {
        return preset(arg);
    }
    let path = Path::new(arg);
    if path.exists() {
        return ArchSpec::from_toml_str(&fs::read_to_string(path)?);
    }
    Err(Error::Config(format!(
        "{arg:?} is neither a preset ({}) nor a spec file",
        PRESET_NAMES.join(", ")
    )))
}

struct Stem {
    conv: ConvBn,
    pooled: bool,
}

impl Stem {
    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        bns: &mut BnStore,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let bn = self.conv.forward(tape, params, bns, x, training)?;
        let act = tape.relu(bn);
        if self.pooled {
            tape.max_pool2d(act, 3, 2, 1)
        } else {
            Ok(act)
        }
    }
}

enum BlockBody {
    Grouped(ConvBn),
    Sk(SkConv),
}

struct Block {
    conv1: ConvBn,
    body: BlockBody,
    conv3: ConvBn,
    se: Option<SeBlock>,
    down: Option<ConvBn>,
}

impl Block {
    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        bns: &mut BnStore,
        x: NodeId,
        training: bool,
        sink: Option<&mut SelectionSink>,
    ) -> Result<NodeId> {
        let c1 = self.conv1.forward(tape, params, bns, x, training)?;
        let c1 = tape.relu(c1);
        let mid = match &self.body {
            BlockBody::Grouped(conv) => {
                let c2 = conv.forward(tape, params, bns, c1, training)?;
                tape.relu(c2)
            }
            BlockBody::Sk(sk) => sk.forward(tape, params, bns, c1, training, sink)?,
        };
        let mut out = self.conv3.forward(tape, params, bns, mid, training)?;
        if let Some(se) = &self.se {
            out = se.forward(tape, params, out)?;
        }
        let shortcut = match &self.down {
            Some(down) => down.forward(tape, params, bns, x, training)?,
            None => x,
        };
        let sum = tape.add_n(&[out, shortcut])?;
        Ok(tape.relu(sum))
    }
}

#[allow(clippy::too_many_arguments)]
fn run_layers(
    stem: &Stem,
    stages: &[Vec<Block>],
    fc: &Fc,
    tape: &mut Tape,
    params: &ParamStore,
    bns: &mut BnStore,
    x: NodeId,
    training: bool,
    mut sink: Option<&mut SelectionSink>,
) -> Result<NodeId> {
    let mut h = stem.forward(tape, params, bns, x, training)?;
    for blocks in stages {
        for block in blocks {
            h = block.forward(tape, params, bns, h, training, sink.as_deref_mut())?;
        }
    }
    let pooled = tape.global_avg_pool(h);
    fc.forward(tape, params, pooled)
}

/// A built network: parameter and batch-norm stores plus the wired
/// layers. Forward passes mutate only the running statistics (and only
/// in training mode).
pub struct Network {
    pub spec: ArchSpec,
    pub params: ParamStore,
    pub bns: BnStore,
    stem: Stem,
    stages: Vec<Vec<Block>>,
    fc: Fc,
}

impl Network {
    /// Deterministic given the seed: two builds produce bit-identical
    /// parameters.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut bns = BnStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = LayerBuilder { params: &mut params, bns: &mut bns, rng: &mut rng };

        let stem = match spec.stem.kind {
            StemKind::Downsampling => Stem {
                conv: b.conv_bn("stem", ConvGeometry::same(3, spec.stem.out, 7, 1, 1, 2)?)?,
                pooled: true,
            },
            StemKind::Compact => Stem {
                conv: b.conv_bn("stem", ConvGeometry::same(3, spec.stem.out, 3, 1, 1, 1)?)?,
                pooled: false,
            },
        };

        let mut stages = Vec::with_capacity(spec.stages.len());
        let mut input = spec.stem.out;
        for (si, st) in spec.stages.iter().enumerate() {
            let mut blocks = Vec::with_capacity(st.blocks);
            for bi in 0..st.blocks {
                let stride = if bi == 0 { st.stride } else { 1 };
                let prefix = format!("stage{}.block{}", si + 1, bi + 1);
                // The stem counts as stage 1 in unit labels.
                let label = format!("SK_{}_{}", si + 2, bi + 1);
                let conv1 =
                    b.conv_bn(&format!("{prefix}.conv1"), ConvGeometry::same(input, st.width, 1, 1, 1, 1)?)?;
                let body = match spec.block {
                    BlockKind::Grouped | BlockKind::GroupedSe => BlockBody::Grouped(b.conv_bn(
                        &format!("{prefix}.conv2"),
                        ConvGeometry::same(st.width, st.width, 3, 1, spec.groups, stride)?,
                    )?),
                    BlockKind::SelectiveKernel => BlockBody::Sk(SkConv::new(
                        &mut b,
                        &format!("{prefix}.sk"),
                        &label,
                        st.width,
                        stride,
                        spec.sk.as_ref().expect("validated"),
                    )?),
                };
                let conv3 =
                    b.conv_bn(&format!("{prefix}.conv3"), ConvGeometry::same(st.width, st.out, 1, 1, 1, 1)?)?;
                let se = match spec.block {
                    BlockKind::GroupedSe => Some(SeBlock::new(
                        &mut b,
                        &format!("{prefix}.se"),
                        st.out,
                        spec.se_reduction.expect("validated"),
                    )?),
                    _ => None,
                };
                let down = if stride != 1 || input != st.out {
                    Some(b.conv_bn(
                        &format!("{prefix}.down"),
                        ConvGeometry::same(input, st.out, 1, 1, 1, stride)?,
                    )?)
                } else {
                    None
                };
                blocks.push(Block { conv1, body, conv3, se, down });
                input = st.out;
            }
            stages.push(blocks);
        }

        let fc = b.fc("fc", spec.classes, input, true)?;
        Ok(Self { spec: spec.clone(), params, bns, stem, stages, fc })
    }

    /// Runs the network on an input node already on the tape, returning
    /// the logits node `(n, classes, 1, 1)`.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: NodeId,
        training: bool,
        sink: Option<&mut SelectionSink>,
    ) -> Result<NodeId> {
        let Self { params, bns, stem, stages, fc, .. } = self;
        run_layers(stem, stages, fc, tape, params, bns, x, training, sink)
    }

    /// Like [`Network::forward`] but reading parameters and statistics
    /// from caller-owned stores, so a gradient check can perturb the
    /// parameters while the layer structure stays borrowed immutably.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        bns: &mut BnStore,
        x: NodeId,
        training: bool,
        sink: Option<&mut SelectionSink>,
    ) -> Result<NodeId> {
        run_layers(&self.stem, &self.stages, &self.fc, tape, params, bns, x, training, sink)
    }

    /// Convenience wrapper: fresh tape, one batch, logits back as a
    /// tensor.
    pub fn infer(&mut self, batch: &Tensor, sink: Option<&mut SelectionSink>) -> Result<Tensor> {
        // Inference never touches running statistics, so the mutable
        // receiver is only about reusing the store plumbing.
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let logits = self.forward(&mut tape, x, false, sink)?;
        Ok(tape.value(logits).clone())
    }

    /// Total number of SK units (zero for grouped blocks).
    pub fn sk_unit_count(&self) -> usize {
        match self.spec.block {
            BlockKind::SelectiveKernel => self.spec.stages.iter().map(|s| s.blocks).sum(),
            _ => 0,
        }
    }
}

// Checkpoints carry everything needed to rebuild and resume: the spec as
// TOML, then every parameter and running statistic as little-endian f64
// arrays behind a name/shape/offset manifest.
const CKPT_MAGIC: &[u8; 8] = b"SKNCKPT\0";
const CKPT_VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.at,
                self.buf.len() - self.at
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("manifest name is not UTF-8".into()))
    }
}

fn push_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Network {
    pub fn save_bytes(&self) -> Result<Vec<u8>> {
        // Manifest entries: parameters in store order, then per batch
        // norm its running mean and variance.
        let mut names: Vec<(String, [usize; 4], &[f64])> = Vec::new();
        for (_, e) in self.params.iter() {
            names.push((e.name.clone(), e.value.shape(), e.value.data()));
        }
        let mut bn_shapes: Vec<(String, usize)> = Vec::new();
        for (name, r) in self.bns.iter() {
            bn_shapes.push((name.to_string(), r.mean.len()));
            names.push((format!("{name}.running_mean"), [1, r.mean.len(), 1, 1], &r.mean));
            names.push((format!("{name}.running_var"), [1, r.var.len(), 1, 1], &r.var));
        }
        let _ = bn_shapes;

        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let spec = self.spec.to_toml_string()?;
        push_string(&mut out, &spec);
        out.extend_from_slice(&(names.len() as u64).to_le_bytes());
        let mut offset = 0u64;
        for (name, shape, data) in &names {
            push_string(&mut out, name);
            for d in shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += data.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, _, data) in &names {
            for v in *data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn load_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: bytes, at: 0 };
        if c.take(8)? != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = c.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version} unsupported (expected {CKPT_VERSION})"
            )));
        }
        let spec = ArchSpec::from_toml_str(&c.string()?)?;
        let count = c.u64()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name = c.string()?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = c.u64()? as usize;
            }
            let offset = c.u64()? as usize;
            manifest.push((name, shape, offset));
        }
        let blob_len = c.u64()? as usize;
        let blob_bytes = c.take(blob_len * 8)?;
        if c.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.at)));
        }
        let read_slice = |offset: usize, len: usize| -> Result<Vec<f64>> {
            if offset + len > blob_len {
                return Err(Error::Checkpoint(format!(
                    "entry at offset {offset} len {len} overruns blob of {blob_len}"
                )));
            }
            Ok((0..len)
                .map(|i| {
                    let at = (offset + i) * 8;
                    f64::from_le_bytes(blob_bytes[at..at + 8].try_into().unwrap())
                })
                .collect())
        };

        let mut net = Network::build(&spec, 0)?;
        let mut filled = vec![false; manifest.len()];
        for (i, (name, shape, offset)) in manifest.iter().enumerate() {
            let len: usize = shape.iter().product();
            if let Some(id) = net.params.id_of(name) {
                let dst = net.params.get_mut(id);
                if dst.shape() != *shape {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {shape:?} does not match built {:?}",
                        dst.shape()
                    )));
                }
                dst.data_mut().copy_from_slice(&read_slice(*offset, len)?);
                filled[i] = true;
            } else if let Some(base) = name.strip_suffix(".running_mean") {
                let id = net.bns.id_of(base).ok_or_else(|| {
                    Error::Checkpoint(format!("{name}: no batch norm named {base:?}"))
                })?;
                let r = net.bns.get_mut(id);
                if r.mean.len() != len {
                    return Err(Error::Checkpoint(format!("{name}: wrong channel count")));
                }
                r.mean = read_slice(*offset, len)?;
                filled[i] = true;
            } else if let Some(base) = name.strip_suffix(".running_var") {
                let id = net.bns.id_of(base).ok_or_else(|| {
                    Error::Checkpoint(format!("{name}: no batch norm named {base:?}"))
                })?;
                let r = net.bns.get_mut(id);
                if r.var.len() != len {
                    return Err(Error::Checkpoint(format!("{name}: wrong channel count")));
                }
                r.var = read_slice(*offset, len)?;
                filled[i] = true;
            } else {
                return Err(Error::Checkpoint(format!("{name}: not part of this architecture")));
            }
        }
        let expected = net.params.len() + 2 * net.bns.len();
        if manifest.len() != expected || filled.iter().any(|f| !f) {
            return Err(Error::Checkpoint(format!(
                "manifest has {} entries, architecture needs {expected}",
                manifest.len()
            )));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.save_bytes()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_bytes(&fs::read(path)?)
    }
}
