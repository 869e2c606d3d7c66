//! Command-line front end: cost reports, gradient checks, training, and
//! kernel-selection analysis.
//!
//! Conventions: data goes to stdout unless `--out` redirects it to a
//! file; the resolved configuration and progress notes go to stderr.
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

#![allow(clippy::manual_is_multiple_of)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;

use sknet::arch::{
    load_arch, ArchSpec, BlockKind, Network, StageSpec, StemKind, StemSpec, PRESET_NAMES,
};
use sknet::attention::{collect, render_csv, summarize, UnitSelector};
use sknet::autograd::{grad_check, BnStore, GradCheckReport, Grads, ParamStore, Tape};
use sknet::cost;
use sknet::data::{
    gen_synthetic, load_cifar_dir, AugmentMode, ChannelStats, CifarVariant, LabeledImage,
    SyntheticScaleSpec,
};
use sknet::ops::ConvGeometry;
use sknet::sk::{Aggregation, LayerBuilder, PathSpec, SeBlock, SkConv, SkSettings};
use sknet::train::{train, OptimConfig};
use sknet::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "sknet", version, about = "Selective kernel network toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Dataset {
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Subcommand)]
enum Cmd {
    /// Analytic parameter and multiply-add report for one or more
    /// architectures (comma-separated presets or spec files).
    Count {
        #[arg(long, value_delimiter = ',', required = true)]
        arch: Vec<String>,
        /// Input resolution (square).
        #[arg(long, default_value_t = 224)]
        res: usize,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of analytic gradients for one unit.
    Gradcheck {
        /// One of conv, bn, fc, softmax, se, sk, sk-naive, net.
        #[arg(long, default_value = "sk")]
        unit: String,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an architecture and emit the per-epoch log as CSV.
    Train {
        #[arg(long)]
        arch: String,
        #[arg(long, value_enum, default_value_t = Dataset::Synthetic)]
        dataset: Dataset,
        /// Directory with the binary batches (cifar datasets only).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr0: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Save the trained model here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Scale-transform probe images, record the attention of every SK
    /// unit, and emit the summary CSV.
    Analyze {
        /// Needed when no checkpoint supplies the architecture.
        #[arg(long)]
        arch: Option<String>,
        /// Model to analyze; omitted means a freshly initialized one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.5, 2.0])]
        scales: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Dataset::Synthetic)]
        dataset: Dataset,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in architecture names.
    Presets,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Count { arch, res, format, out } => cmd_count(&arch, res, format, out.as_deref()),
        Cmd::Gradcheck { unit, channels, seed, out } => {
            cmd_gradcheck(&unit, channels, seed, out.as_deref())
        }
        Cmd::Train { arch, dataset, data, epochs, batch, lr0, seed, out, checkpoint } => cmd_train(
            &arch,
            dataset,
            data.as_deref(),
            epochs,
            batch,
            lr0,
            seed,
            out.as_deref(),
            checkpoint.as_deref(),
        ),
        Cmd::Analyze { arch, checkpoint, scales, dataset, data, seed, out } => cmd_analyze(
            arch.as_deref(),
            checkpoint.as_deref(),
            &scales,
            dataset,
            data.as_deref(),
            seed,
            out.as_deref(),
        ),
        Cmd::Presets => {
            eprintln!("presets");
            for name in PRESET_NAMES {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn emit(out: Option<&Path>, data: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, data)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{data}"),
    }
    Ok(())
}

fn out_desc(out: Option<&Path>) -> String {
    out.map(|p| p.display().to_string()).unwrap_or_else(|| "stdout".into())
}

fn cmd_count(archs: &[String], res: usize, format: Format, out: Option<&Path>) -> Result<()> {
    eprintln!(
        "count: arch={} res={res} format={format:?} out={}",
        archs.join(","),
        out_desc(out)
    );
    let mut reports = Vec::with_capacity(archs.len());
    for arch in archs {
        let spec = load_arch(arch)?;
        reports.push(cost::count(&spec, res)?);
    }
    let data = if reports.len() == 1 {
        match format {
            Format::Json => reports[0].to_json(),
            Format::Table => reports[0].to_table(),
            Format::Csv => reports[0].to_csv(),
        }
    } else {
        match format {
            Format::Json => serde_json::to_string_pretty(&reports).expect("reports serialize"),
            Format::Table => cost::compare(&reports),
            // A comparison row per architecture, ratios against the
            // first.
            Format::Csv => {
                let base = &reports[0];
                let mut s = String::from("arch,params,madds,gflops,params_ratio,madds_ratio\n");
                for r in &reports {
                    s.push_str(&format!(
                        "{},{},{},{},{:.4},{:.4}\n",
                        r.arch,
                        r.total_params,
                        r.total_madds,
                        r.gflops(),
                        r.total_params as f64 / base.total_params as f64,
                        r.total_madds as f64 / base.total_madds as f64
                    ));
                }
                s
            }
        }
    };
    emit(out, &data)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], half_width: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-half_width..half_width)).collect())
        .expect("shape matches data")
}

/// Finite differences are only valid where the function is smooth: a
/// probe step crossing a ReLU kink measures a one-sided slope and
/// reports a spurious error. Draws candidate inputs (and matching dot
/// coefficients) from seeds derived from `seed` until the forward pass
/// keeps every pre-activation at a safe distance from zero.
fn smooth_probe<F>(seed: u64, shape: [usize; 4], mut margin_of: F) -> Result<(Tensor, Tensor)>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    // Wide nets have thousands of pre-activations, so a fully clear
    // draw can take a few dozen tries; each probe is one forward pass.
    for k in 0..512u64 {
        let derived = seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut rng = ChaCha8Rng::seed_from_u64(derived);
        let x = random_tensor(&mut rng, shape, 1.0);
        let coeffs = random_tensor(&mut rng, shape, 1.0);
        // Margin must dominate step (1e-5) times the worst per-element
        // gain of any single perturbation.
        if margin_of(&x)? > 3e-4 {
            return Ok((x, coeffs));
        }
    }
    Err(Error::Config(
        "no probe input kept clear of activation kinks; try a different --seed".into(),
    ))
}

/// Evaluates a tape-building closure under [`grad_check`]: the closure
/// maps the current parameter values to a loss node.
fn check_unit<F>(params: &mut ParamStore, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<sknet::autograd::NodeId>,
{
    grad_check(
        params,
        |p, with_grad| -> Result<(f64, Option<Grads>)> {
            let mut tape = Tape::new();
            let loss = build(&mut tape, p)?;
            let l = tape.value(loss).data()[0];
            if with_grad {
                Ok((l, Some(tape.backward(p, None)?)))
            } else {
                Ok((l, None))
            }
        },
        1e-5,
    )
}

fn gc_conv(channels: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = if channels % 2 == 0 { 2 } else { 1 };
    let geom = ConvGeometry::same(channels, channels, 3, 2, groups, 1)?;
    let mut params = ParamStore::new();
    let w = params.add("weight", random_tensor(&mut rng, geom.weight_shape(), 0.5), true)?;
    let x = params.add("input", random_tensor(&mut rng, [2, channels, 5, 5], 1.0), false)?;
    let coeffs = random_tensor(&mut rng, [2, channels, 5, 5], 1.0);
    check_unit(&mut params, |tape, p| {
        let xid = tape.param(p, x);
        let y = tape.conv2d(p, xid, w, geom)?;
        tape.dot_const(y, coeffs.clone())
    })
}

fn gc_bn(channels: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let gamma = params.add("gamma", random_tensor(&mut rng, [1, channels, 1, 1], 1.0), false)?;
    let beta = params.add("beta", random_tensor(&mut rng, [1, channels, 1, 1], 0.5), false)?;
    let x = params.add("input", random_tensor(&mut rng, [2, channels, 3, 3], 1.0), false)?;
    let coeffs = random_tensor(&mut rng, [2, channels, 3, 3], 1.0);
    let mut bns = BnStore::new();
    let bid = bns.add("bn", channels)?;
    check_unit(&mut params, |tape, p| {
        let mut bns = bns.clone();
        let xid = tape.param(p, x);
        let y = tape.batch_norm(p, xid, gamma, beta, bns.get_mut(bid), true)?;
        tape.dot_const(y, coeffs.clone())
    })
}

fn gc_fc(channels: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outputs = (channels / 2).max(1);
    let mut params = ParamStore::new();
    let w = params.add("weight", random_tensor(&mut rng, [outputs, channels, 1, 1], 0.5), true)?;
    let b = params.add("bias", random_tensor(&mut rng, [1, outputs, 1, 1], 0.5), false)?;
    let x = params.add("input", random_tensor(&mut rng, [2, channels, 1, 1], 1.0), false)?;
    let coeffs = random_tensor(&mut rng, [2, outputs, 1, 1], 1.0);
    check_unit(&mut params, |tape, p| {
        let xid = tape.param(p, x);
        let y = tape.linear(p, xid, w, Some(b))?;
        tape.dot_const(y, coeffs.clone())
    })
}

fn gc_softmax(channels: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let logits =
        params.add("logits", random_tensor(&mut rng, [2, 2 * channels, 1, 1], 1.0), false)?;
    let coeffs = random_tensor(&mut rng, [2, 2 * channels, 1, 1], 1.0);
    check_unit(&mut params, |tape, p| {
        let lid = tape.param(p, logits);
        let a = tape.path_softmax(lid, 2)?;
        tape.dot_const(a, coeffs.clone())
    })
}

fn gc_se(channels: usize, seed: u64) -> Result<GradCheckReport> {
    let channels = channels.max(2) / 2 * 2;
    let mut params = ParamStore::new();
    let mut bns = BnStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let se = {
        let mut b = LayerBuilder { params: &mut params, bns: &mut bns, rng: &mut rng };
        SeBlock::new(&mut b, "se", channels, 2)?
    };
    let (x, coeffs) = smooth_probe(seed, [4, channels, 3, 3], |x| {
        let mut tape = Tape::new();
        let xid = tape.input(x.clone());
        se.forward(&mut tape, &params, xid)?;
        Ok(tape.relu_kink_margin())
    })?;
    let x = params.add("input", x, false)?;
    check_unit(&mut params, |tape, p| {
        let xid = tape.param(p, x);
        let y = se.forward(tape, p, xid)?;
        tape.dot_const(y, coeffs.clone())
    })
}

fn gc_sk(channels: usize, seed: u64, aggregation: Aggregation) -> Result<GradCheckReport> {
    let groups = if channels % 32 == 0 {
        32
    } else if channels % 2 == 0 {
        2
    } else {
        1
    };
    let settings = SkSettings {
        paths: vec![PathSpec::new(3, 1), PathSpec { kernel: 3, dilation: 2, groups: None }],
        groups,
        reduction: 16,
        min_dim: 32.min(channels),
        aggregation,
    };
    let mut params = ParamStore::new();
    let mut bns = BnStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sk = {
        let mut b = LayerBuilder { params: &mut params, bns: &mut bns, rng: &mut rng };
        SkConv::new(&mut b, "sk", "SK_gc", channels, 1, &settings)?
    };
    let (x, coeffs) = smooth_probe(seed, [4, channels, 5, 5], |x| {
        let mut bns = bns.clone();
        let mut tape = Tape::new();
        let xid = tape.input(x.clone());
        sk.forward(&mut tape, &params, &mut bns, xid, true, None)?;
        Ok(tape.relu_kink_margin())
    })?;
    let x = params.add("input", x, false)?;
    check_unit(&mut params, |tape, p| {
        let mut bns = bns.clone();
        let xid = tape.param(p, x);
        let y = sk.forward(tape, p, &mut bns, xid, true, None)?;
        tape.dot_const(y, coeffs.clone())
    })
}

/// Three selective-kernel bottlenecks end to end, checked through a
/// cross-entropy head.
fn toy_spec() -> ArchSpec {
    ArchSpec {
        name: "toy3".into(),
        stem: StemSpec { kind: StemKind::Compact, out: 4 },
        block: BlockKind::SelectiveKernel,
        groups: 1,
        sk: Some(SkSettings {
            paths: vec![PathSpec::new(3, 1), PathSpec::new(1, 1)],
            groups: 2,
            reduction: 2,
            min_dim: 2,
            aggregation: Aggregation::Attention,
        }),
        se_reduction: None,
        stages: vec![
            StageSpec { blocks: 1, width: 4, out: 8, stride: 1 },
            StageSpec { blocks: 1, width: 8, out: 16, stride: 2 },
            StageSpec { blocks: 1, width: 16, out: 16, stride: 1 },
        ],
        classes: 3,
    }
}

fn gc_net(seed: u64) -> Result<GradCheckReport> {
    let mut net = Network::build(&toy_spec(), seed)?;
    let mut params = std::mem::replace(&mut net.params, ParamStore::new());
    let labels = [0u32, 1, 2, 0];
    let (x, _) = smooth_probe(seed, [4, 3, 8, 8], |x| {
        let mut bns = net.bns.clone();
        let mut tape = Tape::new();
        let xid = tape.input(x.clone());
        net.forward_with(&mut tape, &params, &mut bns, xid, true, None)?;
        Ok(tape.relu_kink_margin())
    })?;
    let x = params.add("input", x, false)?;
    grad_check(
        &mut params,
        |p, with_grad| -> Result<(f64, Option<Grads>)> {
            let mut bns = net.bns.clone();
            let mut tape = Tape::new();
            let xid = tape.param(p, x);
            let logits = net.forward_with(&mut tape, p, &mut bns, xid, true, None)?;
            let loss = tape.cross_entropy(logits, &labels, 0.0)?;
            let l = tape.value(loss).data()[0];
            if with_grad {
                Ok((l, Some(tape.backward(p, None)?)))
            } else {
                Ok((l, None))
            }
        },
        1e-5,
    )
}

fn cmd_gradcheck(unit: &str, channels: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    eprintln!("gradcheck: unit={unit} channels={channels} seed={seed} out={}", out_desc(out));
    if channels == 0 {
        return Err(Error::Config("channels must be positive".into()));
    }
    let report = match unit {
        "conv" => gc_conv(channels, seed)?,
        "bn" => gc_bn(channels, seed)?,
        "fc" => gc_fc(channels, seed)?,
        "softmax" => gc_softmax(channels, seed)?,
        "se" => gc_se(channels, seed)?,
        "sk" => gc_sk(channels, seed, Aggregation::Attention)?,
        "sk-naive" => gc_sk(channels, seed, Aggregation::NaiveSum)?,
        "net" => gc_net(seed)?,
        other => {
            return Err(Error::Config(format!(
                "unknown unit {other:?}; expected conv|bn|fc|softmax|se|sk|sk-naive|net"
            )))
        }
    };
    eprintln!("max relative error {:.3e} at {}", report.max_rel_err, report.worst_name);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    emit(out, &(json + "\n"))
}

/// Train/eval images, class count, and the augmentation that recipe
/// uses.
fn load_dataset(
    dataset: Dataset,
    data: Option<&Path>,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>, usize, AugmentMode)> {
    match dataset {
        Dataset::Synthetic => {
            if data.is_some() {
                eprintln!("note: synthetic data is generated in memory; --data ignored");
            }
            let all = gen_synthetic(&SyntheticScaleSpec::standard(seed), 640)?;
            let mut images: Vec<LabeledImage> = all.into_iter().map(|(img, _)| img).collect();
            let eval = images.split_off(512);
            Ok((images, eval, 4, AugmentMode::None))
        }
        Dataset::Cifar10 | Dataset::Cifar100 => {
            let dir = data.ok_or_else(|| {
                Error::Config("cifar datasets need --data pointing at the binary batches".into())
            })?;
            let variant = match dataset {
                Dataset::Cifar10 => CifarVariant::Ten,
                _ => CifarVariant::Hundred,
            };
            let (train, eval) = load_cifar_dir(dir, variant)?;
            Ok((train, eval, variant.classes() as usize, AugmentMode::CifarStandard))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    arch: &str,
    dataset: Dataset,
    data: Option<&Path>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr0: Option<f64>,
    seed: u64,
    out: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let spec = load_arch(arch)?;
    let (train_set, eval_set, classes, augmentation) = load_dataset(dataset, data, seed)?;
    if spec.classes < classes {
        return Err(Error::Config(format!(
            "{} emits {} logits but the dataset has {classes} classes",
            spec.name, spec.classes
        )));
    }
    let mut cfg = match dataset {
        Dataset::Synthetic => {
            let mut c = OptimConfig::cifar(epochs.unwrap_or(10), classes);
            c.batch = 32;
            c
        }
        _ => OptimConfig::cifar(epochs.unwrap_or(300), classes),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(b) = batch {
        cfg.batch = b;
    }
    if let Some(l) = lr0 {
        cfg.lr0 = l;
    }
    cfg.seed = seed;
    eprintln!(
        "train: arch={} dataset={dataset:?} images={}/{} epochs={} batch={} lr0={} seed={} out={}",
        spec.name,
        train_set.len(),
        eval_set.len(),
        cfg.epochs,
        cfg.batch,
        cfg.lr0,
        cfg.seed,
        out_desc(out)
    );

    let stats = ChannelStats::from_images(&train_set)?;
    let mut net = Network::build(&spec, seed)?;
    let log = train(&mut net, &train_set, Some(&eval_set), &cfg, augmentation, &stats)?;
    for e in &log.epochs {
        eprintln!(
            "epoch {:>3}  lr {:<8}  loss {:.4}  train err {:.4}  eval err {:.4}",
            e.epoch,
            e.lr,
            e.train_loss,
            e.train_top1,
            e.eval_top1.unwrap_or(f64::NAN)
        );
    }
    if let Some(path) = checkpoint {
        net.save(path)?;
        eprintln!("checkpoint {}", path.display());
    }
    emit(out, &log.to_csv())
}

fn cmd_analyze(
    arch: Option<&str>,
    checkpoint: Option<&Path>,
    scales: &[f64],
    dataset: Dataset,
    data: Option<&Path>,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let mut net = match (checkpoint, arch) {
        // The checkpoint embeds its spec, which wins.
        (Some(path), _) => Network::load(path)?,
        (None, Some(a)) => {
            eprintln!("note: no checkpoint given, analyzing a freshly initialized model");
            Network::build(&load_arch(a)?, seed)?
        }
        (None, None) => {
            return Err(Error::Config("analyze needs --checkpoint or --arch".into()))
        }
    };
    let images = match dataset {
        Dataset::Synthetic => gen_synthetic(&SyntheticScaleSpec::standard(seed), 64)?
            .into_iter()
            .map(|(img, _)| img)
            .collect::<Vec<_>>(),
        Dataset::Cifar10 | Dataset::Cifar100 => {
            let dir = data.ok_or_else(|| {
                Error::Config("cifar datasets need --data pointing at the binary batches".into())
            })?;
            let variant = match dataset {
                Dataset::Cifar10 => CifarVariant::Ten,
                _ => CifarVariant::Hundred,
            };
            let (_, mut eval) = load_cifar_dir(dir, variant)?;
            // Probing is dense (every unit at every scale); cap the
            // sample count to keep runtime sane.
            eval.truncate(256);
            eval
        }
    };
    eprintln!(
        "analyze: arch={} scales={scales:?} images={} dataset={dataset:?} seed={seed} out={}",
        net.spec.name,
        images.len(),
        out_desc(out)
    );
    let stats = ChannelStats::from_images(&images)?;
    let records = collect(&mut net, &images, &stats, scales, &UnitSelector::All)?;
    let summaries = summarize(&records)?;
    let first_unit = summaries[0].unit.clone();
    for s in summaries.iter().filter(|s| s.unit == first_unit) {
        eprintln!(
            "unit {} scale {}: mean attention difference {:+.6} (std {:.6}, n {})",
            s.unit, s.scale, s.mean_diff, s.std, s.n
        );
    }
    emit(out, &render_csv(&summaries))
}
