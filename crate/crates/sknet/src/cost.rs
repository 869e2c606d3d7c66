//! Analytic parameter and multiply-add counting.
//!
//! Walks an [`ArchSpec`] with the same layer plan the network builder
//! uses, so the analytic parameter total always equals the built
//! registry size. Conventions: a convolution costs
//! `Cout * (Cin/G) * k^2` parameters and that times the output area in
//! multiply-adds; batch norm costs its affine pair (running statistics
//! excluded) and no multiply-adds; fully-connected layers cost
//! `Cout * Cin (+ Cout if biased)`; pooling and activations are free.

use serde::Serialize;

use crate::arch::{ArchSpec, BlockKind, StemKind};
use crate::error::{Error, Result};
use crate::ops::ConvGeometry;
use crate::sk::Aggregation;

#[derive(Clone, Debug, Serialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub madds: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub arch: String,
    pub resolution: usize,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_madds: u64,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.total_madds as f64 / 1e9
    }

    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,params,madds\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.name, r.params, r.madds));
        }
        out.push_str(&format!("total,{},{}\n", self.total_params, self.total_madds));
        out
    }

    pub fn to_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(["layer".len(), "total".len()])
            .max()
            .unwrap();
        let mut out = format!("{:<name_w$}  {:>12}  {:>14}\n", "layer", "params", "madds");
        for r in &self.rows {
            out.push_str(&format!("{:<name_w$}  {:>12}  {:>14}\n", r.name, r.params, r.madds));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>12}  {:>14}\n",
            "total", self.total_params, self.total_madds
        ));
        out.push_str(&format!(
            "{:<name_w$}  {:>11.3}M  {:>13.2}G\n",
            "",
            self.params_millions(),
            self.gflops()
        ));
        out
    }
}

/// Parameter count of one convolution.
pub fn conv_params(geom: &ConvGeometry) -> u64 {
    (geom.out_channels * (geom.in_channels / geom.groups) * geom.kernel * geom.kernel) as u64
}

fn pool_out(h: usize, w: usize, kernel: usize, stride: usize, padding: usize) -> Result<(usize, usize)> {
    let span = |n: usize| -> Result<usize> {
        let padded = n + 2 * padding;
        if padded < kernel {
            return Err(Error::Geometry(format!("input {n} too small for pool kernel {kernel}")));
        }
        Ok((padded - kernel) / stride + 1)
    };
    Ok((span(h)?, span(w)?))
}

struct Walker {
    rows: Vec<CostRow>,
}

impl Walker {
    fn row(&mut self, name: String, params: u64, madds: u64) {
        self.rows.push(CostRow { name, params, madds });
    }

    /// Conv plus batch-norm rows; returns the output spatial size.
    fn conv_bn(&mut self, prefix: &str, geom: &ConvGeometry, h: usize, w: usize) -> Result<(usize, usize)> {
        geom.validate()?;
        let (oh, ow) = geom.out_size(h, w)?;
        let p = conv_params(geom);
        self.row(format!("{prefix}.conv"), p, p * (oh * ow) as u64);
        self.row(format!("{prefix}.bn"), 2 * geom.out_channels as u64, 0);
        Ok((oh, ow))
    }

    fn fc(&mut self, name: &str, out: usize, inn: usize, bias: bool) {
        let params = (out * inn + if bias { out } else { 0 }) as u64;
        self.row(name.to_string(), params, (out * inn) as u64);
    }
}

/// Parameter and multiply-add report for a spec at a square input
/// resolution.
pub fn count(spec: &ArchSpec, resolution: usize) -> Result<CostReport> {
    spec.validate()?;
    let mut wk = Walker { rows: Vec::new() };
    let (mut h, mut w) = (resolution, resolution);

    match spec.stem.kind {
        StemKind::Downsampling => {
            let geom = ConvGeometry::same(3, spec.stem.out, 7, 1, 1, 2)?;
            (h, w) = wk.conv_bn("stem", &geom, h, w)?;
            (h, w) = pool_out(h, w, 3, 2, 1)?;
        }
        StemKind::Compact => {
            let geom = ConvGeometry::same(3, spec.stem.out, 3, 1, 1, 1)?;
            (h, w) = wk.conv_bn("stem", &geom, h, w)?;
        }
    }

    let mut input = spec.stem.out;
    for (si, st) in spec.stages.iter().enumerate() {
        for bi in 0..st.blocks {
            let stride = if bi == 0 { st.stride } else { 1 };
            let prefix = format!("stage{}.block{}", si + 1, bi + 1);
            wk.conv_bn(&format!("{prefix}.conv1"), &ConvGeometry::same(input, st.width, 1, 1, 1, 1)?, h, w)?;
            let (bh, bw) = match spec.block {
                BlockKind::Grouped | BlockKind::GroupedSe => wk.conv_bn(
                    &format!("{prefix}.conv2"),
                    &ConvGeometry::same(st.width, st.width, 3, 1, spec.groups, stride)?,
                    h,
                    w,
                )?,
                BlockKind::SelectiveKernel => {
                    let sk = spec.sk.as_ref().expect("validated");
                    let mut out_size = (h, w);
                    for (m, p) in sk.paths.iter().enumerate() {
                        let g = p.groups.unwrap_or(sk.groups);
                        let geom =
                            ConvGeometry::same(st.width, st.width, p.kernel, p.dilation, g, stride)?;
                        out_size =
                            wk.conv_bn(&format!("{prefix}.sk.path{m}"), &geom, h, w)?;
                    }
                    if sk.aggregation == Aggregation::Attention {
                        let d = sk.fuse_dim(st.width);
                        wk.fc(&format!("{prefix}.sk.fuse.fc"), d, st.width, false);
                        wk.row(format!("{prefix}.sk.fuse.bn"), 2 * d as u64, 0);
                        for m in 0..sk.paths.len() {
                            wk.fc(&format!("{prefix}.sk.select.path{m}"), st.width, d, true);
                        }
                    }
                    out_size
                }
            };
            wk.conv_bn(&format!("{prefix}.conv3"), &ConvGeometry::same(st.width, st.out, 1, 1, 1, 1)?, bh, bw)?;
            if spec.block == BlockKind::GroupedSe {
                let r = spec.se_reduction.expect("validated");
                wk.fc(&format!("{prefix}.se.fc1"), st.out / r, st.out, true);
                wk.fc(&format!("{prefix}.se.fc2"), st.out, st.out / r, true);
            }
            if stride != 1 || input != st.out {
                wk.conv_bn(&format!("{prefix}.down"), &ConvGeometry::same(input, st.out, 1, 1, 1, stride)?, h, w)?;
            }
            (h, w) = (bh, bw);
            input = st.out;
        }
    }
    wk.fc("fc", spec.classes, input, true);

    let total_params = wk.rows.iter().map(|r| r.params).sum();
    let total_madds = wk.rows.iter().map(|r| r.madds).sum();
    Ok(CostReport {
        arch: spec.name.clone(),
        resolution,
        rows: wk.rows,
        total_params,
        total_madds,
    })
}

/// Side-by-side totals with ratios against the first entry.
pub fn compare(reports: &[CostReport]) -> String {
    let name_w = reports.iter().map(|r| r.arch.len()).chain(["arch".len()]).max().unwrap();
    let mut out = format!(
        "{:<name_w$}  {:>10}  {:>8}  {:>8}  {:>8}\n",
        "arch", "params", "P ratio", "GMadds", "F ratio"
    );
    let base = &reports[0];
    for r in reports {
        out.push_str(&format!(
            "{:<name_w$}  {:>9.3}M  {:>8.4}  {:>8.3}  {:>8.4}\n",
            r.arch,
            r.params_millions(),
            r.total_params as f64 / base.total_params as f64,
            r.gflops(),
            r.total_madds as f64 / base.total_madds as f64,
        ));
    }
    out
}
