//! Kernel-selection analysis: warp inputs to change apparent object
//! size, record the per-channel attention of every SK unit, and reduce
//! the records to per-unit statistics.
//!
//! The headline statistic is the mean attention difference: mean
//! attention on the path with the largest receptive field minus mean
//! attention on the path with the smallest, averaged over channels.
//! For two paths whose attentions sum to 1 this equals
//! 2 * mean(larger) - 1.

use std::fmt::Write as _;
use std::path::Path;

use crate::arch::Network;
use crate::data::{to_batch, ChannelStats, LabeledImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Enlarges the apparent size of central content by a factor `s`: crops
/// the central (h/s) x (w/s) window and resizes it back to h x w with
/// bilinear interpolation, pixel centers aligned. `s = 1` returns the
/// input bit-exactly. Works on any `(n, c, h, w)` tensor, per plane.
pub fn scale_transform(img: &Tensor, s: f64) -> Result<Tensor> {
    if !s.is_finite() || s < 1.0 {
        return Err(Error::Config(format!("scale factor {s} must be >= 1")));
    }
    if s == 1.0 {
        return Ok(img.clone());
    }
    let [n, c, h, w] = img.shape();
    let ch = (h as f64 / s).floor() as usize;
    let cw = (w as f64 / s).floor() as usize;
    if ch < 2 || cw < 2 {
        return Err(Error::Geometry(format!(
            "crop window {ch}x{cw} at scale {s} is smaller than 2x2"
        )));
    }
    let top = (h - ch) / 2;
    let left = (w - cw) / 2;

    // Source coordinate of an output pixel center, in crop-window
    // space. Clamped so edge pixels replicate the border sample.
    let src = |i: usize, out_len: usize, crop_len: usize| -> (usize, usize, f64) {
        let pos = (i as f64 + 0.5) * crop_len as f64 / out_len as f64 - 0.5;
        let pos = pos.clamp(0.0, (crop_len - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(crop_len - 1);
        (i0, i1, pos - i0 as f64)
    };

    let mut out = Tensor::zeros(img.shape());
    for ni in 0..n {
        for ci in 0..c {
            let plane = img.plane(ni, ci);
            for oy in 0..h {
                let (y0, y1, fy) = src(oy, h, ch);
                for ox in 0..w {
                    let (x0, x1, fx) = src(ox, w, cw);
                    let at = |y: usize, x: usize| plane[(top + y) * w + left + x];
                    // Lerp as v0 + f*(v1-v0) so constants pass through
                    // unchanged.
                    let top_row = at(y0, x0) + fx * (at(y0, x1) - at(y0, x0));
                    let bot_row = at(y1, x0) + fx * (at(y1, x1) - at(y1, x0));
                    *out.at_mut(ni, ci, oy, ox) = top_row + fy * (bot_row - top_row);
                }
            }
        }
    }
    Ok(out)
}

/// Which SK units to record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UnitSelector {
    All,
    /// The first unit the forward pass reaches.
    First,
    Exact(String),
    Prefix(String),
}

impl UnitSelector {
    /// "all", "first", a trailing-`*` prefix, or an exact label.
    pub fn parse(s: &str) -> Self {
        match s {
            "all" => Self::All,
            "first" => Self::First,
            _ => match s.strip_suffix('*') {
                Some(p) => Self::Prefix(p.to_string()),
                None => Self::Exact(s.to_string()),
            },
        }
    }

    fn matches(&self, label: &str, first_label: &str) -> bool {
        match self {
            Self::All => true,
            Self::First => label == first_label,
            Self::Exact(want) => label == want,
            Self::Prefix(p) => label.starts_with(p.as_str()),
        }
    }
}

/// Attention of one SK unit for one input at one scale: `paths *
/// channels` values, path-major, each channel's column summing to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub unit: String,
    pub sample: usize,
    pub scale: f64,
    pub paths: usize,
    pub channels: usize,
    /// Effective kernel size per path, defining "larger" and "smaller".
    pub kernels: Vec<usize>,
    pub attention: Vec<f64>,
}

impl AttentionRecord {
    pub fn at(&self, path: usize, channel: usize) -> f64 {
        self.attention[path * self.channels + channel]
    }

    /// Max deviation of any channel's column sum from 1.
    pub fn column_sum_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for c in 0..self.channels {
            let sum: f64 = (0..self.paths).map(|m| self.at(m, c)).sum();
            worst = worst.max((sum - 1.0).abs());
        }
        worst
    }

    /// Mean over channels of attention(largest kernel) minus
    /// attention(smallest kernel) for this one sample.
    pub fn diff(&self) -> f64 {
        let large = argmax(&self.kernels);
        let small = argmin(&self.kernels);
        let mut acc = 0.0;
        for c in 0..self.channels {
            acc += self.at(large, c) - self.at(small, c);
        }
        acc / self.channels as f64
    }
}

fn argmax(v: &[usize]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn argmin(v: &[usize]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

const COLLECT_BATCH: usize = 32;

/// Runs inference on every image at every scale and records the
/// attention of the selected SK units. Batch norm uses running
/// statistics throughout. Errors if the selector matches no unit, which
/// includes networks without attention-aggregated SK units.
pub fn collect(
    net: &mut Network,
    images: &[LabeledImage],
    stats: &ChannelStats,
    scales: &[f64],
    selector: &UnitSelector,
) -> Result<Vec<AttentionRecord>> {
    if images.is_empty() || scales.is_empty() {
        return Err(Error::Config("collect needs at least one image and one scale".into()));
    }
    let kernels: Vec<usize> = match &net.spec.sk {
        Some(sk) => sk.paths.iter().map(|p| p.effective_kernel()).collect(),
        None => Vec::new(),
    };
    let mut records = Vec::new();
    for &scale in scales {
        for (chunk_idx, chunk) in images.chunks(COLLECT_BATCH).enumerate() {
            let refs: Vec<&LabeledImage> = chunk.iter().collect();
            let (x, _) = to_batch(&refs, stats)?;
            let x = scale_transform(&x, scale)?;
            let mut sink = Vec::new();
            net.infer(&x, Some(&mut sink))?;
            let first_label = match sink.first() {
                Some(r) => r.unit.clone(),
                None => continue,
            };
            for rec in &sink {
                if !selector.matches(&rec.unit, &first_label) {
                    continue;
                }
                let span = rec.paths * rec.channels;
                for j in 0..chunk.len() {
                    records.push(AttentionRecord {
                        unit: rec.unit.clone(),
                        sample: chunk_idx * COLLECT_BATCH + j,
                        scale,
                        paths: rec.paths,
                        channels: rec.channels,
                        kernels: kernels.clone(),
                        attention: rec.attention.data()[j * span..(j + 1) * span].to_vec(),
                    });
                }
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Config(format!("selector {selector:?} matched no attention unit")));
    }
    Ok(records)
}

/// Per (unit, scale) reduction of [`AttentionRecord`]s.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSummary {
    pub unit: String,
    pub scale: f64,
    /// Mean attention per path, over all channels and samples.
    pub mean_attention: Vec<f64>,
    /// Mean over samples of the per-sample larger-minus-smaller
    /// difference.
    pub mean_diff: f64,
    /// Population standard deviation of that difference across samples.
    pub std: f64,
    pub n: usize,
    /// Label this summary was restricted to, for per-class aggregation.
    pub class: Option<u32>,
    /// Per path: attention averaged over fixed-width channel windows
    /// (and over samples). Populated by [`summarize_windowed`].
    pub windows: Option<Vec<Vec<f64>>>,
}

/// Numeric sort key for unit labels like `SK_3_4`; anything else sorts
/// after them, lexicographically.
type UnitKey = (u64, u64, String);

fn unit_key(unit: &str) -> UnitKey {
    let mut it = unit.strip_prefix("SK_").unwrap_or("").split('_');
    if let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) {
        if let (Ok(a), Ok(b)) = (a.parse(), b.parse()) {
            return (a, b, String::new());
        }
    }
    (u64::MAX, u64::MAX, unit.to_string())
}

pub fn summarize(records: &[AttentionRecord]) -> Result<Vec<AttentionSummary>> {
    summarize_impl(records, None, None)
}

/// Like [`summarize`] but also averages attention over windows of
/// `window` successive channels (the last window may be narrower).
pub fn summarize_windowed(records: &[AttentionRecord], window: usize) -> Result<Vec<AttentionSummary>> {
    if window == 0 {
        return Err(Error::Config("window width must be positive".into()));
    }
    summarize_impl(records, Some(window), None)
}

/// Per-class aggregation: `labels[sample]` gives each sample's class,
/// and every (class, unit, scale) combination gets its own summary.
pub fn summarize_by_class(
    records: &[AttentionRecord],
    labels: &[u32],
) -> Result<Vec<AttentionSummary>> {
    for r in records {
        if r.sample >= labels.len() {
            return Err(Error::Config(format!("sample {} has no label", r.sample)));
        }
    }
    let mut classes: Vec<u32> = records.iter().map(|r| labels[r.sample]).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for class in classes {
        let subset: Vec<AttentionRecord> = records
            .iter()
            .filter(|r| labels[r.sample] == class)
            .cloned()
            .collect();
        out.extend(summarize_impl(&subset, None, Some(class))?);
    }
    Ok(out)
}

fn summarize_impl(
    records: &[AttentionRecord],
    window: Option<usize>,
    class: Option<u32>,
) -> Result<Vec<AttentionSummary>> {
    if records.is_empty() {
        return Err(Error::Config("no attention records to summarize".into()));
    }
    let paths = records[0].paths;
    for r in records {
        if r.paths != paths {
            return Err(Error::Config(format!(
                "mixed path counts in records: {} and {}",
                paths, r.paths
            )));
        }
        if r.attention.len() != r.paths * r.channels || r.kernels.len() != r.paths {
            return Err(Error::Shape(format!("malformed record for {}", r.unit)));
        }
    }

    // Group membership keyed by (unit, scale); sample order inside a
    // group is fixed by sorting, so the reduction is invariant to the
    // order records arrive in.
    let mut groups: Vec<(UnitKey, f64, Vec<&AttentionRecord>)> = Vec::new();
    for r in records {
        let key = unit_key(&r.unit);
        match groups
            .iter_mut()
            .find(|(k, s, _)| *k == key && s.total_cmp(&r.scale).is_eq())
        {
            Some((_, _, members)) => members.push(r),
            None => groups.push((key, r.scale, vec![r])),
        }
    }
    for (_, _, members) in &mut groups {
        members.sort_by_key(|r| r.sample);
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut out = Vec::new();
    for (_, scale, members) in groups {
        let channels = members[0].channels;
        let n = members.len();
        let mut mean_attention = vec![0.0; paths];
        let mut diffs = Vec::with_capacity(n);
        let mut win_acc: Option<Vec<Vec<f64>>> = window.map(|w| {
            let per_path = channels.div_ceil(w);
            vec![vec![0.0; per_path]; paths]
        });
        for r in &members {
            if r.channels != channels {
                return Err(Error::Shape(format!(
                    "unit {} recorded with {} and {} channels",
                    r.unit, channels, r.channels
                )));
            }
            for m in 0..paths {
                let mut acc = 0.0;
                for c in 0..channels {
                    acc += r.at(m, c);
                }
                mean_attention[m] += acc / channels as f64;
            }
            diffs.push(r.diff());
            if let (Some(acc), Some(w)) = (&mut win_acc, window) {
                for m in 0..paths {
                    for (wi, slot) in acc[m].iter_mut().enumerate() {
                        let lo = wi * w;
                        let hi = ((wi + 1) * w).min(channels);
                        let mut s = 0.0;
                        for c in lo..hi {
                            s += r.at(m, c);
                        }
                        *slot += s / (hi - lo) as f64;
                    }
                }
            }
        }
        for m in &mut mean_attention {
            *m /= n as f64;
        }
        let mean_diff = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / n as f64;
        if let Some(acc) = &mut win_acc {
            for per_path in acc.iter_mut() {
                for v in per_path.iter_mut() {
                    *v /= n as f64;
                }
            }
        }
        out.push(AttentionSummary {
            unit: members[0].unit.clone(),
            scale,
            mean_attention,
            mean_diff,
            std: var.sqrt(),
            n,
            class,
            windows: win_acc,
        });
    }
    Ok(out)
}

/// One row per (unit, scale, path); the difference, deviation, and
/// sample count repeat on each of a group's rows. Numbers print in
/// full-precision decimal so a parse-back recovers them exactly.
pub fn render_csv(summaries: &[AttentionSummary]) -> String {
    let mut rows: Vec<&AttentionSummary> = summaries.iter().collect();
    rows.sort_by(|a, b| {
        unit_key(&a.unit)
            .cmp(&unit_key(&b.unit))
            .then(a.scale.total_cmp(&b.scale))
    });
    let mut out = String::from("unit,scale,path,mean_attention,mean_diff,std,n\n");
    for s in rows {
        for (m, &att) in s.mean_attention.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.unit,
                s.scale,
                m + 1,
                att,
                s.mean_diff,
                s.std,
                s.n
            );
        }
    }
    out
}

pub fn emit_csv(summaries: &[AttentionSummary], path: &Path) -> Result<()> {
    std::fs::write(path, render_csv(summaries))?;
    Ok(())
}
