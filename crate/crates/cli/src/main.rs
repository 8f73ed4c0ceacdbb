//! Command-line front end: feasibility checks, single-instance and batch
//! reconstruction attacks, a federated-learning simulation, and the
//! kernel-count sweep — all on top of the gradrecon library.
//!
//! Exit codes: 0 success, 1 infeasible under `--strict`, 2 for I/O,
//! validation, or usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gradrecon::config::ConfigFile;
use gradrecon::error::Result;
use gradrecon::feasibility::{
    check_cnn, check_cnn_no_dense, check_mlp_batch, check_multilayer_cnn, ConvLayerSpec,
    FeasibilityReport,
};
use gradrecon::fl::{self, AttackConfig, AttackOutcome, FlConfig};
use gradrecon::metrics::match_batch;
use gradrecon::models::{batch_gradient, Arch, CnnConfig, ModelParams};
use gradrecon::recon::{reconstruct, Prior, ReconJob, Regularizer};
use gradrecon::Tensor;

mod outdir;
mod setup;

use outdir::RunDir;
use setup::{bad, build_model, load_data, Lookup, Model, ModelFlags};

#[derive(Parser)]
#[command(
    name = "gradrecon",
    version,
    about = "Gradient inversion attacks on federated learning",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count equations vs unknowns for an architecture and report feasibility
    Check(CheckArgs),
    /// Reconstruct one training instance from its gradient
    AttackSingle(AttackArgs),
    /// Reconstruct a batch of instances from an averaged gradient
    AttackBatch(AttackArgs),
    /// Simulate federated rounds, optionally attacking every shared gradient
    FlRun(AttackArgs),
    /// Mean reconstruction L1 as the conv kernel count grows
    SweepKernels(SweepArgs),
}

#[derive(clap::Args)]
struct CheckArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Batch size the attack would face
    #[arg(long, value_name = "N")]
    b: Option<u64>,
    /// Conv stack for --arch cnn-multi: k,p,s,h per layer, ';' separated
    #[arg(long, value_name = "LIST")]
    conv: Option<String>,
    /// Exit 1 when the architecture is infeasible
    #[arg(long)]
    strict: bool,
    /// Key-value config file; explicit flags override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

/// Flags shared by attack-single, attack-batch, and fl-run; each command
/// reads the subset it documents and resolves the rest from its config
/// section.
#[derive(clap::Args)]
struct AttackArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Config file carrying a [model] section
    #[arg(long, value_name = "FILE")]
    model_config: Option<PathBuf>,
    /// IDX image file, or synth:KIND[,n=..,c=..,d=..,classes=..,seed=..]
    #[arg(long, value_name = "SPEC")]
    data: Option<String>,
    /// IDX label file paired with --data
    #[arg(long, value_name = "FILE")]
    labels: Option<String>,
    /// Output directory for images, trajectories, and reports
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Which dataset instance to attack (attack-single)
    #[arg(long, value_name = "I")]
    index: Option<usize>,
    /// Batch size (attack-batch, fl-run)
    #[arg(long, value_name = "N")]
    b: Option<usize>,
    /// Regularizer: none, orth, or l2
    #[arg(long, value_name = "KIND")]
    reg: Option<String>,
    /// Initial regularizer weight λ₀
    #[arg(long, value_name = "X")]
    lambda0: Option<f64>,
    /// Iterations between λ decay steps
    #[arg(long, value_name = "N")]
    decay_m: Option<usize>,
    /// λ decay factor per step
    #[arg(long, value_name = "X")]
    decay_factor: Option<f64>,
    /// Optimization iterations
    #[arg(long, value_name = "N")]
    iters: Option<usize>,
    /// Optimizer step size
    #[arg(long, value_name = "X")]
    eta: Option<f64>,
    /// Initial-guess prior: uniform or normal
    #[arg(long, value_name = "KIND")]
    prior: Option<String>,
    /// Seed for the attack's initial guesses
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Worker count (fl-run)
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Round count (fl-run)
    #[arg(long, value_name = "N")]
    rounds: Option<usize>,
    /// Attack the shared gradients: on or off (fl-run)
    #[arg(long, value_name = "on|off")]
    attack: Option<String>,
    /// Learning rate of the federated training itself (fl-run)
    #[arg(long, value_name = "X")]
    train_eta: Option<f64>,
    /// Exit 1 when the architecture is infeasible for the batch
    #[arg(long)]
    strict: bool,
    /// Key-value config file; explicit flags override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Kernel counts to sweep, comma separated
    #[arg(long, value_name = "LIST")]
    h_list: Option<String>,
    /// IDX image file or synth spec for the probe image
    #[arg(long, value_name = "SPEC")]
    data: Option<String>,
    /// IDX label file paired with --data
    #[arg(long, value_name = "FILE")]
    labels: Option<String>,
    /// Optimization iterations per kernel count
    #[arg(long, value_name = "N")]
    iters: Option<usize>,
    /// Optimizer step size
    #[arg(long, value_name = "X")]
    eta: Option<f64>,
    /// Seed for the attack's initial guesses
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Directory for the CSV table (printed to stdout regardless)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Key-value config file; explicit flags override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

enum Outcome {
    Done,
    Infeasible,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.command {
        Command::Check(args) => cmd_check(args),
        Command::AttackSingle(args) => cmd_attack_single(args),
        Command::AttackBatch(args) => cmd_attack_batch(args),
        Command::FlRun(args) => cmd_fl_run(args),
        Command::SweepKernels(args) => cmd_sweep(args),
    };
    match run {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Infeasible) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

fn parse_conv_stack(raw: &str) -> Result<Vec<ConvLayerSpec>> {
    raw.split(';')
        .map(|layer| {
            let nums: Vec<usize> = layer
                .split(',')
                .map(|n| {
                    n.trim()
                        .parse::<usize>()
                        .map_err(|e| bad(format!("bad conv entry {n:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if nums.len() != 4 {
                return Err(bad(format!(
                    "conv layer {layer:?} needs k,p,s,h (got {} values)",
                    nums.len()
                )));
            }
            Ok(ConvLayerSpec {
                kernel_size: nums[0],
                padding: nums[1],
                stride: nums[2],
                kernel_count: nums[3],
            })
        })
        .collect()
}

fn print_report(arch: &str, report: &FeasibilityReport) {
    println!("arch = {arch}");
    println!("equations = {}", report.equations);
    println!("unknowns = {}", report.unknowns);
    println!("feasible = {}", report.feasible);
    if let Some(n1) = report.min_n1_exact {
        println!("min_n1_exact = {n1}");
    }
    println!("min_n1_approx = {}", report.min_n1_approx);
    if let Some(h) = report.min_kernels {
        println!("min_kernels = {h}");
    }
    for note in &report.notes {
        println!("note: {note}");
    }
}

fn cmd_check(args: CheckArgs) -> Result<Outcome> {
    let cmd = Lookup::open(&[args.config.as_deref()], "check")?;
    let model = Lookup::open(&[args.config.as_deref()], "model")?;
    let arch = model.require(args.model.arch.clone(), "arch")?;
    let b = cmd.get(args.b, "b", 1)?;
    let cnn_config = |dense: usize| -> Result<CnnConfig> {
        Ok(CnnConfig {
            channels: model.get(args.model.c, "c", 1)?,
            input_width: model.require(args.model.d, "d")?,
            kernel_size: model.require(args.model.k, "k")?,
            padding: model.get(args.model.p, "p", 0)?,
            stride: model.get(args.model.s, "s", 1)?,
            kernel_count: model.get(args.model.h_kernels, "h-kernels", 1)?,
            dense_units: dense,
            classes: model.get(args.model.n2, "n2", 10)?,
        })
    };
    let report = match arch.as_str() {
        "mlp" => {
            let d = model.require(args.model.d, "d")? as u64;
            let n1 = model.get(args.model.n1, "n1", 1)? as u64;
            let n2 = model.get(args.model.n2, "n2", 10)? as u64;
            check_mlp_batch(d, n1, n2, b)?
        }
        "cnn" => {
            let dense = model.get(args.model.n1, "n1", 1)?;
            check_cnn(&cnn_config(dense)?, b)?
        }
        "cnn-nodense" => {
            let cfg = cnn_config(0)?;
            let n1_out = model.get(args.model.n1, "n1", cfg.classes)? as u64;
            check_cnn_no_dense(&cfg, b, n1_out)?
        }
        "cnn-multi" => {
            let raw = cmd.require(args.conv.clone(), "conv")?;
            let layers = parse_conv_stack(&raw)?;
            let c = model.get(args.model.c, "c", 1)?;
            let d = model.require(args.model.d, "d")?;
            check_multilayer_cnn(&layers, c, d, b)?
        }
        other => {
            return Err(bad(format!(
                "unknown arch {other:?} (want mlp, cnn, cnn-nodense, or cnn-multi)"
            )))
        }
    };
    print_report(&arch, &report);
    if args.strict && !report.feasible {
        return Ok(Outcome::Infeasible);
    }
    Ok(Outcome::Done)
}

// ---------------------------------------------------------------------------
// Shared attack plumbing
// ---------------------------------------------------------------------------

/// Everything the attack commands resolve before touching the library.
struct AttackSetup {
    model: Model,
    data: Option<String>,
    labels: Option<String>,
    out: PathBuf,
    b: usize,
    reg: Regularizer,
    reg_name: String,
    lambda0: f64,
    decay_m: usize,
    decay_factor: f64,
    iters: usize,
    eta: f64,
    prior: Prior,
    prior_name: String,
    seed: u64,
}

fn resolve_attack(args: &AttackArgs, section: &str, default_b: usize) -> Result<AttackSetup> {
    let cmd = Lookup::open(&[args.config.as_deref()], section)?;
    let model_config = cmd.value(args.model_config.clone(), "model-config")?;
    let model_lookup = Lookup::open(
        &[model_config.as_deref(), args.config.as_deref()],
        "model",
    )?;
    let model = build_model(&args.model, &model_lookup)?;

    let reg_name = cmd.get(args.reg.clone(), "reg", "orth".to_string())?;
    let reg = match reg_name.as_str() {
        "none" => Regularizer::None,
        "orth" => Regularizer::Orthogonality,
        "l2" => Regularizer::L2,
        other => return Err(bad(format!("unknown regularizer {other:?}"))),
    };
    let prior_name = cmd.get(args.prior.clone(), "prior", "uniform".to_string())?;
    let prior = match prior_name.as_str() {
        "uniform" => Prior::Uniform01,
        "normal" => Prior::StandardNormal,
        other => return Err(bad(format!("unknown prior {other:?}"))),
    };
    Ok(AttackSetup {
        model,
        data: cmd.value(args.data.clone(), "data")?,
        labels: cmd.value(args.labels.clone(), "labels")?,
        out: cmd.get(args.out.clone(), "out", PathBuf::from("run"))?,
        b: cmd.get(args.b, "b", default_b)?,
        reg,
        reg_name,
        lambda0: cmd.get(args.lambda0, "lambda0", 0.1)?,
        decay_m: cmd.get(args.decay_m, "decay-m", 200)?,
        decay_factor: cmd.get(args.decay_factor, "decay-factor", 0.9)?,
        iters: cmd.get(args.iters, "iters", 5000)?,
        eta: cmd.get(args.eta, "eta", 0.1)?,
        prior,
        prior_name,
        seed: cmd.get(args.seed, "seed", 1)?,
    })
}

/// Feasibility of the resolved architecture at batch size `b`; used for
/// the pre-flight `--strict` gate.
fn preflight(arch: &Arch, b: usize) -> Result<FeasibilityReport> {
    match arch {
        Arch::Mlp(cfg) => {
            let n1 = if cfg.layer_sizes.len() >= 3 {
                cfg.layer_sizes[1]
            } else {
                1
            };
            check_mlp_batch(
                cfg.input_dim() as u64,
                n1 as u64,
                cfg.classes() as u64,
                b as u64,
            )
        }
        Arch::Cnn(cfg) if cfg.dense_units > 0 => check_cnn(cfg, b as u64),
        Arch::Cnn(cfg) => check_cnn_no_dense(cfg, b as u64, cfg.classes as u64),
    }
}

fn snapshot_model(file: &mut ConfigFile, model: &Model) {
    match &model.arch {
        Arch::Mlp(cfg) => {
            file.set("model", "arch", "mlp");
            let list = cfg
                .layer_sizes
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(",");
            file.set("model", "layers", list);
        }
        Arch::Cnn(cfg) => {
            file.set("model", "arch", "cnn");
            file.set("model", "c", cfg.channels);
            file.set("model", "d", cfg.input_width);
            file.set("model", "k", cfg.kernel_size);
            file.set("model", "p", cfg.padding);
            file.set("model", "s", cfg.stride);
            file.set("model", "h-kernels", cfg.kernel_count);
            file.set("model", "n1", cfg.dense_units);
            file.set("model", "n2", cfg.classes);
        }
    }
    file.set("model", "params-seed", model.params_seed);
}

fn snapshot_attack(file: &mut ConfigFile, section: &str, setup: &AttackSetup) {
    if let Some(data) = &setup.data {
        file.set(section, "data", data);
    }
    if let Some(labels) = &setup.labels {
        file.set(section, "labels", labels);
    }
    file.set(section, "b", setup.b);
    file.set(section, "reg", &setup.reg_name);
    file.set(section, "lambda0", setup.lambda0);
    file.set(section, "decay-m", setup.decay_m);
    file.set(section, "decay-factor", setup.decay_factor);
    file.set(section, "iters", setup.iters);
    file.set(section, "eta", setup.eta);
    file.set(section, "prior", &setup.prior_name);
    file.set(section, "seed", setup.seed);
}

/// Matches reconstructions against the truth after reshaping them to the
/// truth's instance shape (closed-form MLP output comes back flat).
fn match_against(
    x_hat: &[Tensor],
    truth: &[Tensor],
) -> Result<(Vec<Tensor>, gradrecon::metrics::MatchReport)> {
    let shape = truth[0].shape().to_vec();
    let reshaped: Vec<Tensor> = x_hat
        .iter()
        .map(|t| {
            if t.shape() != shape.as_slice() {
                t.reshape(&shape)
            } else {
                Ok(t.clone())
            }
        })
        .collect::<Result<_>>()?;
    let report = match_batch(&reshaped, truth)?;
    Ok((reshaped, report))
}

// ---------------------------------------------------------------------------
// attack-single / attack-batch
// ---------------------------------------------------------------------------

fn run_direct_attack(args: AttackArgs, section: &str, default_b: usize) -> Result<Outcome> {
    let index = args.index.unwrap_or(0);
    let setup = resolve_attack(&args, section, default_b)?;
    let needed = if section == "attack-single" {
        index + 1
    } else {
        setup.b
    };
    let b = if section == "attack-single" { 1 } else { setup.b };

    let report = preflight(&setup.model.arch, b)?;
    if !report.feasible {
        eprintln!(
            "note: architecture under-determined for B={b} ({} equations vs {} unknowns)",
            report.equations, report.unknowns
        );
        if args.strict {
            return Ok(Outcome::Infeasible);
        }
    }

    let ds = load_data(
        setup.data.as_deref(),
        setup.labels.as_deref(),
        &setup.model.arch,
        needed,
    )?;
    let (truth, labels): (Vec<Tensor>, Vec<usize>) = if section == "attack-single" {
        (vec![ds.images[index].clone()], vec![ds.labels[index]])
    } else {
        (
            ds.images[..b].to_vec(),
            ds.labels[..b].to_vec(),
        )
    };

    let params = ModelParams::init(&setup.model.arch, setup.model.params_seed)?;
    let bundle = batch_gradient(&setup.model.arch, &params, &truth, &labels)?;
    let mut job = ReconJob::new(bundle, params, setup.model.arch.clone(), b);
    job.iterations = setup.iters;
    job.learning_rate = setup.eta;
    job.regularizer = setup.reg;
    job.lambda0 = setup.lambda0;
    job.decay_interval = setup.decay_m;
    job.decay_factor = setup.decay_factor;
    job.prior = setup.prior;
    job.seed = setup.seed;
    job.ground_truth = Some(truth.clone());
    let mut result = reconstruct(&job)?;

    let (reshaped, matching) = match_against(&result.x_hat, &truth)?;
    result.x_hat = reshaped;

    let mut snapshot = ConfigFile::new();
    snapshot_model(&mut snapshot, &setup.model);
    snapshot_attack(&mut snapshot, section, &setup);
    if section == "attack-single" {
        snapshot.set(section, "index", index);
    }
    let run_dir = RunDir::create(&setup.out, &snapshot)?;
    let slot = run_dir.slot(0, 0)?;
    outdir::write_slot(&slot, &result, ds.image_shape(), Some(&matching))?;

    println!("wrote {}", slot.display());
    println!("mean_l1 = {:.12e}", matching.mean_l1);
    Ok(Outcome::Done)
}

fn cmd_attack_single(args: AttackArgs) -> Result<Outcome> {
    run_direct_attack(args, "attack-single", 1)
}

fn cmd_attack_batch(args: AttackArgs) -> Result<Outcome> {
    run_direct_attack(args, "attack-batch", 4)
}

// ---------------------------------------------------------------------------
// fl-run
// ---------------------------------------------------------------------------

fn cmd_fl_run(args: AttackArgs) -> Result<Outcome> {
    let setup = resolve_attack(&args, "fl-run", 1)?;
    let cmd = Lookup::open(&[args.config.as_deref()], "fl-run")?;
    let workers = cmd.get(args.workers, "workers", 2)?;
    let rounds = cmd.get(args.rounds, "rounds", 3)?;
    let train_eta = cmd.get(args.train_eta, "train-eta", 0.1)?;
    let attack_on = match cmd.get(args.attack.clone(), "attack", "on".to_string())?.as_str() {
        "on" => true,
        "off" => false,
        other => return Err(bad(format!("unknown --attack value {other:?} (want on or off)"))),
    };
    if workers == 0 || rounds == 0 {
        return Err(bad("workers and rounds must be positive"));
    }

    let report = preflight(&setup.model.arch, setup.b)?;
    if !report.feasible {
        eprintln!(
            "note: architecture under-determined for B={} ({} equations vs {} unknowns)",
            setup.b, report.equations, report.unknowns
        );
        if args.strict {
            return Ok(Outcome::Infeasible);
        }
    }

    let ds = load_data(
        setup.data.as_deref(),
        setup.labels.as_deref(),
        &setup.model.arch,
        workers * setup.b.max(4) * 2,
    )?;
    let shards = fl::partition_contiguous(&ds, workers)?;

    let cfg = FlConfig {
        arch: setup.model.arch.clone(),
        workers,
        rounds,
        batch: setup.b,
        learning_rate: train_eta,
        seed: setup.model.params_seed,
        attack: attack_on.then(|| AttackConfig {
            prior: setup.prior,
            iterations: setup.iters,
            learning_rate: setup.eta,
            regularizer: setup.reg,
            lambda0: setup.lambda0,
            decay_interval: setup.decay_m,
            decay_factor: setup.decay_factor,
            seed: setup.seed,
        }),
    };
    let logs = fl::run(&cfg, &shards)?;

    let mut snapshot = ConfigFile::new();
    snapshot_model(&mut snapshot, &setup.model);
    snapshot_attack(&mut snapshot, "fl-run", &setup);
    snapshot.set("fl-run", "workers", workers);
    snapshot.set("fl-run", "rounds", rounds);
    snapshot.set("fl-run", "train-eta", train_eta);
    snapshot.set("fl-run", "attack", if attack_on { "on" } else { "off" });
    let run_dir = RunDir::create(&setup.out, &snapshot)?;

    let shape = ds.image_shape().map(|s| s.to_vec());
    for log in &logs {
        let mut line = format!("round {}:", log.round);
        for (w, batch) in log.batches.iter().enumerate() {
            let slot = run_dir.slot(log.round, w)?;
            match log.attacks.get(w).and_then(|a| a.as_ref()) {
                Some(AttackOutcome::Recovered(record)) => {
                    outdir::write_slot(
                        &slot,
                        &record.recon,
                        shape.as_deref(),
                        Some(&record.matching),
                    )?;
                    line.push_str(&format!(
                        " worker {w} mean_l1 = {:.3e};",
                        record.matching.mean_l1
                    ));
                }
                Some(AttackOutcome::Failed(msg)) => {
                    outdir::write_failure(&slot, msg)?;
                    line.push_str(&format!(" worker {w} attack failed;"));
                }
                None => {
                    let batch_list = batch
                        .iter()
                        .map(|i| i.to_string())
                        .collect::<Vec<_>>()
                        .join(",");
                    std::fs::write(
                        slot.join("report.txt"),
                        format!("round = {}\nworker = {w}\nbatch = {batch_list}\n", log.round),
                    )?;
                    line.push_str(&format!(" worker {w} no attack;"));
                }
            }
        }
        println!("{line}");
    }
    println!("wrote {}", setup.out.display());
    Ok(Outcome::Done)
}

// ---------------------------------------------------------------------------
// sweep-kernels
// ---------------------------------------------------------------------------

fn cmd_sweep(args: SweepArgs) -> Result<Outcome> {
    let cmd = Lookup::open(&[args.config.as_deref()], "sweep-kernels")?;
    let model = Lookup::open(&[args.config.as_deref()], "model")?;
    // The sweep's defaults are the one-conv-layer setup the kernel-count
    // bound is usually quoted for: 3×32×32 input, k=5, p=2, s=2.
    let base = CnnConfig {
        channels: model.get(args.model.c, "c", 3)?,
        input_width: model.get(args.model.d, "d", 32)?,
        kernel_size: model.get(args.model.k, "k", 5)?,
        padding: model.get(args.model.p, "p", 2)?,
        stride: model.get(args.model.s, "s", 2)?,
        kernel_count: 1,
        dense_units: model.get(args.model.n1, "n1", 16)?,
        classes: model.get(args.model.n2, "n2", 10)?,
    };
    let params_seed = model.get(args.model.params_seed, "params-seed", 0)?;
    let h_list: Vec<usize> = cmd
        .get(args.h_list.clone(), "h-list", "1,5,11,12".to_string())?
        .split(',')
        .map(|n| {
            n.trim()
                .parse::<usize>()
                .map_err(|e| bad(format!("bad h entry {n:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    if h_list.is_empty() {
        return Err(bad("empty --h-list"));
    }
    let iters = cmd.get(args.iters, "iters", 5000)?;
    let eta = cmd.get(args.eta, "eta", 0.2)?;
    let seed = cmd.get(args.seed, "seed", 1)?;
    let data = cmd.value(args.data.clone(), "data")?;
    let labels = cmd.value(args.labels.clone(), "labels")?;

    let probe_arch = Arch::Cnn(base.clone());
    let ds = load_data(data.as_deref(), labels.as_deref(), &probe_arch, 1)?;
    let truth = vec![ds.images[0].clone()];
    let label = vec![ds.labels[0]];

    let mut rows = Vec::new();
    for &h in &h_list {
        let cfg = CnnConfig {
            kernel_count: h,
            ..base.clone()
        };
        let arch = Arch::Cnn(cfg);
        let params = ModelParams::init(&arch, params_seed)?;
        let bundle = batch_gradient(&arch, &params, &truth, &label)?;
        let mut job = ReconJob::new(bundle, params, arch, 1);
        job.iterations = iters;
        job.learning_rate = eta;
        job.seed = seed;
        job.ground_truth = Some(truth.clone());
        let result = reconstruct(&job)?;
        let (_, matching) = match_against(&result.x_hat, &truth)?;
        println!("h = {h}  mean_l1 = {:.6e}", matching.mean_l1);
        rows.push((h, matching.mean_l1));
    }

    if let Some(out) = cmd.value(args.out.clone(), "out")? {
        let mut snapshot = ConfigFile::new();
        snapshot_model(
            &mut snapshot,
            &Model {
                arch: probe_arch,
                params_seed,
            },
        );
        let list = h_list
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",");
        snapshot.set("sweep-kernels", "h-list", list);
        snapshot.set("sweep-kernels", "iters", iters);
        snapshot.set("sweep-kernels", "eta", eta);
        snapshot.set("sweep-kernels", "seed", seed);
        if let Some(data) = &data {
            snapshot.set("sweep-kernels", "data", data);
        }
        let run_dir = RunDir::create(Path::new(&out), &snapshot)?;
        let _ = run_dir; // directory + snapshot created; the table sits beside them
        let mut csv = String::from("h,mean_l1\n");
        for (h, l1) in &rows {
            csv.push_str(&format!("{h},{l1:.17e}\n"));
        }
        std::fs::write(Path::new(&out).join("sweep.csv"), csv)?;
        println!("wrote {}", out.display());
    }
    Ok(Outcome::Done)
}
