//! `lapp`: prune, evaluate, report on and check layer-adaptive pruning runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lapp::controller::Trainer;
use lapp::flops::{self, BypassKind};
use lapp::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use lapp::harness::config::{parse_document, DATA_DIR_ENV};
use lapp::harness::metrics::write_json_lines;
use lapp::harness::{evaluate, load_cifar10, write_atomic, Dataset, JsonLinesSink, Normalization, RunConfig};
use lapp::network::ArchName;
use lapp::report::{self, RunReport};
use lapp::surgery::{equivalence_check_random, SurgeryManifest};
use lapp::{builder, LappError, Result};

#[derive(Parser)]
#[command(name = "lapp", version, about = "Layer-adaptive progressive filter pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an SBC network from scratch, prune it to the target and keep training the compact net.
    Prune(PruneArgs),
    /// Top-1 accuracy of a post-surgery checkpoint on the test split.
    Eval(EvalArgs),
    /// Render the text report and series files of a finished run.
    Report {
        /// Run directory written by `prune`.
        run_dir: PathBuf,
    },
    /// Compare the masked and compact networks saved at surgery.
    Check(CheckArgs),
    /// Baseline FLOPs and parameters of an architecture, and its compression floor.
    Flops {
        #[arg(long, default_value = "resnet20")]
        arch: String,
        #[arg(long, default_value = "0.4")]
        target_c: f64,
        #[arg(long, default_value = "v2")]
        bypass: String,
    },
}

#[derive(Args)]
struct PruneArgs {
    /// Flat `key = value` configuration document; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    target_c: Option<String>,
    #[arg(long)]
    lambda1: Option<String>,
    #[arg(long)]
    lambda2: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    prune_epoch_cap: Option<String>,
    #[arg(long, value_parser = ["v1", "v2"])]
    bypass: Option<String>,
    /// Shared pruning rate chosen up front instead of learned thresholds.
    #[arg(long)]
    uniform: bool,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    base_lr: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long, value_parser = ["desk", "paper", "smoke"])]
    profile: Option<String>,
    #[arg(long)]
    train_subset: Option<String>,
    #[arg(long)]
    test_subset: Option<String>,
    /// Replace artifacts already present in the output directory.
    #[arg(long)]
    overwrite: bool,
    /// Continue the run saved in the output directory.
    #[arg(long)]
    resume: bool,
}

impl PruneArgs {
    fn entries(&self) -> Result<Vec<(String, String)>> {
        let mut out = match &self.config {
            Some(path) => parse_document(&read_text(path)?)?,
            None => Vec::new(),
        };
        let flags = [
            ("arch", &self.arch),
            ("target_c", &self.target_c),
            ("lambda1", &self.lambda1),
            ("lambda2", &self.lambda2),
            ("epochs", &self.epochs),
            ("prune_epoch_cap", &self.prune_epoch_cap),
            ("bypass", &self.bypass),
            ("seed", &self.seed),
            ("batch_size", &self.batch_size),
            ("base_lr", &self.base_lr),
            ("data_dir", &self.data_dir),
            ("out_dir", &self.out_dir),
            ("profile", &self.profile),
            ("train_subset", &self.train_subset),
            ("test_subset", &self.test_subset),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        if self.uniform {
            out.push(("uniform".into(), "true".into()));
        }
        Ok(out)
    }
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Evaluate on the first `n` test images only.
    #[arg(long)]
    test_subset: Option<usize>,
}

#[derive(Args)]
struct CheckArgs {
    /// Run directory holding the surgery snapshots.
    run_dir: PathBuf,
    #[arg(long, default_value = "1e-4")]
    tolerance: f64,
    #[arg(long, default_value = "64")]
    samples: usize,
    #[arg(long, default_value = "0")]
    seed: u64,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| LappError::Artifact(format!("cannot read {}: {e}", path.display())))
}

fn exit_code(e: &LappError) -> u8 {
    match e {
        LappError::Usage(_) | LappError::Domain(_) | LappError::Infeasible(_) | LappError::Shape(_) => 2,
        LappError::TargetNotAttained { .. } => 3,
        LappError::NonFiniteLoss { .. } => 1,
        _ => 4,
    }
}

fn load_splits(data_dir: &Path, train_subset: Option<usize>, test_subset: Option<usize>) -> Result<(Dataset, Dataset)> {
    if data_dir.as_os_str().is_empty() {
        return Err(LappError::Usage(format!("no data directory: pass --data-dir, set data_dir, or set {DATA_DIR_ENV}")));
    }
    let (mut train, mut test) = load_cifar10(data_dir)?;
    if let Some(n) = train_subset {
        train.truncate(n);
    }
    if let Some(n) = test_subset {
        test.truncate(n);
    }
    Ok((train, test))
}

fn prepare_out_dir(dir: &Path, overwrite: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut known: Vec<&str> = report::RUN_ARTIFACTS.to_vec();
    known.extend([report::REPORT_TEXT_FILE, report::C_HAT_SERIES_FILE, report::ACCURACY_SERIES_FILE]);
    let present: Vec<&str> = known.iter().copied().filter(|f| dir.join(f).exists()).collect();
    if present.is_empty() {
        return Ok(());
    }
    if !overwrite {
        return Err(LappError::Artifact(format!(
            "{} already holds run artifacts ({}); pass --overwrite to replace them or --resume to continue",
            dir.display(),
            present.join(", ")
        )));
    }
    for f in present {
        fs::remove_file(dir.join(f))?;
    }
    Ok(())
}

fn cmd_prune(args: &PruneArgs) -> Result<()> {
    let entries = args.entries()?;
    let mut trainer: Trainer<f32> = if args.resume {
        let out = entries
            .iter()
            .rev()
            .find(|(k, _)| k == "out_dir")
            .map(|(_, v)| PathBuf::from(v))
            .ok_or_else(|| LappError::Usage("--resume needs --out-dir".into()))?;
        let mut t = load_checkpoint::<f32>(&out.join(report::CHECKPOINT_FILE))?.into_trainer()?;
        if let Some(d) = &args.data_dir {
            t.config.data_dir = PathBuf::from(d);
        }
        t.config.out_dir = out;
        t
    } else {
        let config = RunConfig::from_entries(&entries)?;
        prepare_out_dir(&config.out_dir, args.overwrite)?;
        let (train, _) = load_splits(&config.data_dir, config.train_subset, config.test_subset)?;
        let norm = config.norm.unwrap_or_else(|| Normalization::from_dataset(&train));
        let config = RunConfig { norm: Some(norm), ..config };
        Trainer::new(config, norm)?
    };
    let cfg = trainer.config.clone();
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out)?;
    write_atomic(&out.join(report::CONFIG_FILE), cfg.to_document().as_bytes())?;
    let (train, test) = load_splits(&cfg.data_dir, cfg.train_subset, cfg.test_subset)?;
    let metrics = out.join(report::METRICS_FILE);
    write_json_lines(&metrics, &trainer.history)?;
    let mut sink = JsonLinesSink::new(&metrics);
    eprintln!(
        "{} target C {} bypass {} mode {}: baseline {} FLOPs, starting compression rate {:.4}",
        cfg.arch,
        cfg.c_target,
        cfg.bypass,
        if cfg.uniform { "uniform" } else { "learned" },
        trainer.state.account.t_total,
        trainer.state.account.c_hat
    );
    let outcome = trainer.run(&train, &test, &mut sink, &mut |t| {
        if let Some(pair) = t.surgery_pair.take() {
            save_checkpoint(&out.join(report::PRE_SURGERY_FILE), &Checkpoint::of(t, &pair.masked, "pre_surgery"))?;
            save_checkpoint(&out.join(report::POST_SURGERY_FILE), &Checkpoint::of(t, &pair.compact, "post_surgery"))?;
            write_manifest(&out, &SurgeryManifest::build(&pair.compact)?)?;
            eprintln!(
                "surgery at epoch {} iteration {}: compression rate {:.6}",
                t.state.surgery_epoch.unwrap_or(0),
                t.state.surgery_iteration.unwrap_or(0),
                t.state.account.c_hat
            );
        }
        save_checkpoint(&out.join(report::CHECKPOINT_FILE), &Checkpoint::from_trainer(t, "latest"))?;
        if let Some(r) = t.history.last() {
            eprintln!(
                "epoch {:>4} {:?} lr {:.4} loss {:.4} compression {:.4} top1 {:.2}%",
                r.epoch,
                r.phase,
                r.lr,
                r.loss,
                r.c_hat,
                100.0 * r.top1
            );
        }
        Ok(())
    });
    if let Err(e) = outcome {
        save_checkpoint(&out.join(report::CHECKPOINT_FILE), &Checkpoint::from_trainer(&trainer, "latest"))?;
        return Err(e);
    }
    let manifest = SurgeryManifest::build(&trainer.net)?;
    write_manifest(&out, &manifest)?;
    let rep = RunReport::build(&cfg, &manifest, &trainer.state, &trainer.history);
    write_atomic(&out.join(report::REPORT_FILE), &serde_json::to_vec_pretty(&rep)?)?;
    let rep = report::render_run_dir(&out)?;
    print!("{}", rep.render_text());
    println!("top1={:.2}", 100.0 * rep.final_top1);
    Ok(())
}

fn write_manifest(dir: &Path, manifest: &SurgeryManifest) -> Result<()> {
    write_atomic(&dir.join(report::MANIFEST_FILE), &serde_json::to_vec_pretty(manifest)?)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(&args.checkpoint)?;
    if ckpt.network.has_sbc() {
        return Err(LappError::Usage(format!(
            "{} is a pre-surgery checkpoint; continue the run with `lapp prune --resume --out-dir <run dir>`",
            args.checkpoint.display()
        )));
    }
    let data_dir = args
        .data_dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| ckpt.meta.config.data_dir.clone());
    let (_, test) = load_splits(&data_dir, Some(1), args.test_subset.or(ckpt.meta.config.test_subset))?;
    let mut net = ckpt.network;
    let top1 = evaluate(&mut net, &test, &ckpt.meta.norm, 100)?;
    println!("top1={:.2}", 100.0 * top1);
    let record = serde_json::json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "top1": top1,
        "samples": test.len(),
        "flops": net.structural_flops(),
        "params": net.structural_params(),
    });
    let mut path = args.checkpoint.clone().into_os_string();
    path.push(".eval.json");
    write_atomic(Path::new(&path), &serde_json::to_vec_pretty(&record)?)
}

fn cmd_check(args: &CheckArgs) -> Result<bool> {
    let pre = args.run_dir.join(report::PRE_SURGERY_FILE);
    let post = args.run_dir.join(report::POST_SURGERY_FILE);
    let missing: Vec<String> = [&pre, &post].iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(LappError::Artifact(format!("surgery snapshot pair incomplete, missing: {}", missing.join(", "))));
    }
    let mut masked = load_checkpoint::<f32>(&pre)?.network;
    let mut compact = load_checkpoint::<f32>(&post)?.network;
    let dev = equivalence_check_random(&mut masked, &mut compact, args.samples, args.seed)?;
    let structural = compact.structural_flops();
    let modeled = masked.masked_flops()?;
    let pass = dev <= args.tolerance && structural == modeled;
    let verdict = if pass { "PASS" } else { "FAIL" };
    let cmp = if dev <= args.tolerance { "<=" } else { ">" };
    println!("{verdict} max_dev={dev:.3e} {cmp} {:e} flops compact={structural} masked={modeled}", args.tolerance);
    Ok(pass)
}

fn cmd_flops(arch: &str, target_c: f64, bypass: &str) -> Result<()> {
    let name: ArchName = arch.parse()?;
    let kind: BypassKind = bypass.parse().map_err(|_| LappError::Usage(format!("bypass {bypass:?} is not v1 or v2")))?;
    let spec = builder::arch_spec(name);
    let net = builder::build_sbcnet::<f32>(&spec, target_c, kind, 0)?;
    let total = spec.total_flops()?;
    let specs = net.bypass_specs();
    let floor = flops::masked_network_flops(&spec.layers, &vec![0; specs.len()], &specs)?;
    let full: Vec<usize> = spec.layers.iter().filter(|l| l.prunable).map(|l| l.c_out).collect();
    let start = flops::masked_network_flops(&spec.layers, &full, &specs)?;
    println!("arch={name} flops={total} params={}", flops::params_count(&spec.layers, &full, &vec![None; full.len()])?);
    println!("bypass={kind} start_c_hat={:.6} floor_c_hat={:.6}", start as f64 / total as f64, floor as f64 / total as f64);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Prune(a) => cmd_prune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report { run_dir } => report::render_run_dir(run_dir).map(|r| print!("{}", r.render_text())),
        Command::Check(a) => match cmd_check(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::Flops { arch, target_c, bypass } => cmd_flops(arch, *target_c, bypass),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
