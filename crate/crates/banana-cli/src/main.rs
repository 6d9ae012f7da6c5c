//! Command-line pipeline: generate toy datasets, train the refinement
//! network, run fixed-point inference, and produce the evaluation and
//! diagnostic reports.
//!
//! Every command resolves its settings as defaults, then config file,
//! then flags, and embeds the resolved settings plus the library
//! version in its JSON report. Runs are deterministic for a fixed seed
//! at any thread count.
//!
//! Exit codes: 0 success, 2 usage or configuration problem, 3 numeric
//! failure, 4 fixed-point divergence (unless allowed).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use banana::fixpoint::{
    banach_infer, equivariance_audit, estimate_lipschitz, fixed_point_error_bound,
    noise_basin_sweep, AdamConfig, FixpointConfig, FixpointReport, NetworkMap, TrainItem, Trainer,
};
use banana::net::{EdgePhi, NetConfig, PartMode, PartNetwork};
use banana::se3::Pointcloud;
use banana::seg::{matched_iou, noisy_init, quotient_distance, seg_residual, uniform_random_init};
use banana::synth::{
    load_entry, make_dataset, read_manifest, DatasetSpec, ManifestEntry, ShapeTemplate,
    BUILTIN_TEMPLATES, SPLIT_TRAIN,
};
use banana::tensor::DType;
use banana::util::{rng_from_seed, subseed};
use banana::{Error, Tensor};

#[derive(Parser)]
#[command(name = "banana", version = banana::version(), about = "Part segmentation by fixed-point refinement")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic articulated-shape dataset
    Gen(GenArgs),
    /// Train the refinement network on a dataset's rest states
    Train(TrainArgs),
    /// Run fixed-point inference on one pointcloud
    Infer(InferArgs),
    /// Evaluate matched IoU over a dataset split
    Eval(EvalArgs),
    /// Check invariance of the map under per-part rigid motions
    #[command(name = "audit-equiv")]
    AuditEquiv(AuditArgs),
    /// Estimate the contraction factor and the fixed-point error bound
    Lipschitz(LipschitzArgs),
    /// Sweep initialization noise against segmentation quality
    #[command(name = "sweep-noise")]
    SweepNoise(SweepArgs),
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } => 3,
            _ => 2,
        };
        Self { code, msg: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let out = match cli.cmd {
        Cmd::Gen(a) => run_gen(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Infer(a) => run_infer(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::AuditEquiv(a) => run_audit(a),
        Cmd::Lipschitz(a) => run_lipschitz(a),
        Cmd::SweepNoise(a) => run_sweep(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

/// Per-command sections of the optional JSON config file, each holding
/// the same field names as the command's flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    gen: GenFileCfg,
    #[serde(default)]
    train: TrainFileCfg,
    #[serde(default)]
    infer: InferFileCfg,
    #[serde(default)]
    eval: EvalFileCfg,
    #[serde(default)]
    audit_equiv: AuditFileCfg,
    #[serde(default)]
    lipschitz: LipschitzFileCfg,
    #[serde(default)]
    sweep_noise: SweepFileCfg,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig, Failure> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::usage(format!("bad config {}: {e}", p.display())))
        }
    }
}

/// Default seed: 0, unless BANANA_SEED is set. Config file and flag
/// still take precedence, in that order.
fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> u64 {
    flag.or(file)
        .or_else(|| {
            std::env::var("BANANA_SEED")
                .ok()
                .and_then(|s| s.parse().ok())
        })
        .unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let json = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, json + "\n").map_err(Error::from)?;
    Ok(())
}

/// Runs `f` over the indices with `threads` workers, preserving input
/// order in the output. Each index's work is independent, so the result
/// does not depend on the thread count.
fn indexed_map<U: Send>(
    count: usize,
    threads: usize,
    f: impl Fn(usize) -> Result<U, Failure> + Sync,
) -> Result<Vec<U>, Failure> {
    let threads = threads.max(1).min(count.max(1));
    if threads == 1 {
        return (0..count).map(f).collect();
    }
    let slots: Vec<std::sync::Mutex<Option<Result<U, Failure>>>> =
        (0..count).map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for t in 0..threads {
            let f = &f;
            let slots = &slots;
            scope.spawn(move || {
                for i in (t..count).step_by(threads) {
                    *slots[i].lock().unwrap() = Some(f(i));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every index visited"))
        .collect()
}

// ---------------------------------------------------------------- gen

#[derive(Args)]
struct GenArgs {
    /// Comma-separated template names
    #[arg(long)]
    templates: Option<String>,
    /// Output directory for clouds and manifest
    #[arg(long)]
    out: PathBuf,
    /// Rest-state training instances per template
    #[arg(long)]
    n: Option<usize>,
    /// Articulations of training instances per template
    #[arg(long)]
    test_states: Option<usize>,
    /// Articulations of fresh instances per template
    #[arg(long)]
    test_instances: Option<usize>,
    /// Points per cloud
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenFileCfg {
    templates: Option<String>,
    n: Option<usize>,
    test_states: Option<usize>,
    test_instances: Option<usize>,
    points: Option<usize>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct GenReport {
    version: String,
    config: DatasetSpec,
    files_written: usize,
}

fn run_gen(a: GenArgs) -> CmdResult {
    let file = load_file_config(&a.config)?.gen;
    let templates: Vec<String> = a
        .templates
        .or(file.templates)
        .unwrap_or_else(|| BUILTIN_TEMPLATES.join(","))
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let spec = DatasetSpec {
        templates,
        out_dir: a.out,
        train_per_template: a.n.or(file.n).unwrap_or(8),
        test_states_per_template: a.test_states.or(file.test_states).unwrap_or(0),
        test_instances_per_template: a.test_instances.or(file.test_instances).unwrap_or(0),
        points_per_cloud: a.points.or(file.points).unwrap_or(256),
        seed: resolve_seed(a.seed, file.seed),
    };
    let manifest = make_dataset(&spec)?;
    let report = GenReport {
        version: banana::version().to_string(),
        files_written: manifest.len(),
        config: spec,
    };
    write_json(&report.config.out_dir.join("gen_report.json"), &report)?;
    println!(
        "wrote {} clouds to {}",
        report.files_written,
        report.config.out_dir.display()
    );
    Ok(())
}

// -------------------------------------------------------------- train

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory containing manifest.json
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out_ckpt: PathBuf,
    /// Continue from this checkpoint instead of initializing
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    readout_width: Option<usize>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Message-passing rounds without the global context exchange
    #[arg(long)]
    plain_rounds: Option<usize>,
    /// Edge feature map: linear or mlp
    #[arg(long)]
    edge_phi: Option<String>,
    /// Part codes: semantic or instance
    #[arg(long)]
    part_mode: Option<String>,
    /// Working precision: f32 or f64
    #[arg(long)]
    dtype: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFileCfg {
    epochs: Option<usize>,
    lr: Option<f64>,
    width: Option<usize>,
    readout_width: Option<usize>,
    radius: Option<f64>,
    neighbors: Option<usize>,
    rounds: Option<usize>,
    plain_rounds: Option<usize>,
    edge_phi: Option<String>,
    part_mode: Option<String>,
    dtype: Option<String>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct TrainResolved {
    data: PathBuf,
    out_ckpt: PathBuf,
    resumed_from: Option<PathBuf>,
    epochs: usize,
    adam: AdamConfig,
    net: NetConfig,
    seed: u64,
}

#[derive(Serialize)]
struct TrainReport {
    version: String,
    config: TrainResolved,
    epochs_run: usize,
    final_epoch: usize,
    final_loss: f64,
}

fn parse_edge_phi(s: &str) -> Result<EdgePhi, Failure> {
    match s {
        "linear" => Ok(EdgePhi::Linear),
        "mlp" => Ok(EdgePhi::Mlp),
        other => Err(Failure::usage(format!(
            "edge-phi must be linear or mlp, got {other}"
        ))),
    }
}

fn parse_part_mode(s: &str) -> Result<PartMode, Failure> {
    match s {
        "semantic" => Ok(PartMode::Semantic),
        "instance" => Ok(PartMode::Instance),
        other => Err(Failure::usage(format!(
            "part-mode must be semantic or instance, got {other}"
        ))),
    }
}

fn parse_dtype(s: &str) -> Result<DType, Failure> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Failure::usage(format!(
            "dtype must be f32 or f64, got {other}"
        ))),
    }
}

/// Loads a manifest split as training items, requiring one part count
/// across all entries.
fn load_items(
    dir: &Path,
    entries: &[&ManifestEntry],
) -> Result<(Vec<TrainItem>, usize), Failure> {
    if entries.is_empty() {
        return Err(Failure::usage("split has no entries"));
    }
    let mut items = Vec::with_capacity(entries.len());
    let mut parts = None;
    for e in entries {
        let (x, y) = load_entry(dir, e)?;
        match parts {
            None => parts = Some(y.num_parts()),
            Some(p) if p == y.num_parts() => {}
            Some(p) => {
                return Err(Failure::usage(format!(
                    "mixed part counts in split: {} vs {}",
                    p,
                    y.num_parts()
                )))
            }
        }
        items.push(TrainItem { x, y_gt: y });
    }
    Ok((items, parts.expect("nonempty")))
}

fn manifest_for(dir: &Path) -> Result<Vec<ManifestEntry>, Failure> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Failure::usage(format!("no manifest at {}", path.display())));
    }
    Ok(read_manifest(&path)?)
}

fn run_train(a: TrainArgs) -> CmdResult {
    let file = load_file_config(&a.config)?.train;
    let manifest = manifest_for(&a.data)?;
    let train_entries: Vec<&ManifestEntry> = manifest
        .iter()
        .filter(|e| e.split == SPLIT_TRAIN)
        .collect();
    let (items, num_parts) = load_items(&a.data, &train_entries)?;

    let seed = resolve_seed(a.seed, file.seed);
    let mut net_cfg = NetConfig::desk(num_parts);
    if let Some(w) = a.width.or(file.width) {
        net_cfg.width = w;
    }
    if let Some(w) = a.readout_width.or(file.readout_width) {
        net_cfg.readout_width = w;
    }
    if let Some(r) = a.radius.or(file.radius) {
        net_cfg.radius = r;
    }
    if let Some(k) = a.neighbors.or(file.neighbors) {
        net_cfg.max_neighbors = k;
    }
    if let Some(r) = a.rounds.or(file.rounds) {
        net_cfg.message_rounds = r;
    }
    if let Some(r) = a.plain_rounds.or(file.plain_rounds) {
        net_cfg.plain_rounds = r;
    }
    if let Some(s) = a.edge_phi.as_deref().or(file.edge_phi.as_deref()) {
        net_cfg.edge_phi = parse_edge_phi(s)?;
    }
    if let Some(s) = a.part_mode.as_deref().or(file.part_mode.as_deref()) {
        net_cfg.part_mode = parse_part_mode(s)?;
    }
    if let Some(s) = a.dtype.as_deref().or(file.dtype.as_deref()) {
        net_cfg.dtype = parse_dtype(s)?;
    }
    let adam = AdamConfig {
        lr: a.lr.or(file.lr).unwrap_or(0.001),
        ..AdamConfig::default()
    };
    let epochs = a.epochs.or(file.epochs).unwrap_or(300);

    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::load(path, &items)?;
            if t.net.config().num_parts != num_parts {
                return Err(Failure::usage(format!(
                    "checkpoint expects {} parts, data has {}",
                    t.net.config().num_parts,
                    num_parts
                )));
            }
            if let Some(lr) = a.lr {
                t.set_lr(lr);
            }
            t
        }
        None => {
            let net = PartNetwork::init(net_cfg.clone(), seed)?;
            Trainer::new(net, adam.clone(), &items)?
        }
    };
    let resolved = TrainResolved {
        data: a.data.clone(),
        out_ckpt: a.out_ckpt.clone(),
        resumed_from: a.resume.clone(),
        epochs,
        adam: trainer.opt.cfg.clone(),
        net: trainer.net.config().clone(),
        seed,
    };

    let losses_path = a
        .out_ckpt
        .parent()
        .unwrap_or(Path::new("."))
        .join("losses.csv");
    let mut csv = if a.resume.is_some() && losses_path.exists() {
        fs::read_to_string(&losses_path).map_err(Error::from)?
    } else {
        "epoch,loss\n".to_string()
    };

    let mut final_loss = f64::NAN;
    for _ in 0..epochs {
        let loss = trainer.run_epoch()?;
        csv.push_str(&format!("{},{}\n", trainer.epoch, loss));
        final_loss = loss;
    }
    fs::write(&losses_path, &csv).map_err(Error::from)?;
    trainer.save(&a.out_ckpt, "trained refinement network")?;

    let report = TrainReport {
        version: banana::version().to_string(),
        config: resolved,
        epochs_run: epochs,
        final_epoch: trainer.epoch,
        final_loss,
    };
    let report_path = a
        .out_ckpt
        .parent()
        .unwrap_or(Path::new("."))
        .join("train_report.json");
    write_json(&report_path, &report)?;
    println!(
        "trained to epoch {}, final loss {:.6}, checkpoint {}",
        trainer.epoch,
        final_loss,
        a.out_ckpt.display()
    );
    Ok(())
}

// -------------------------------------------------------------- infer

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input pointcloud (labels required only for noisy init)
    #[arg(long)]
    input: PathBuf,
    /// Labeled output pointcloud
    #[arg(long)]
    out: PathBuf,
    /// Report path; defaults next to the output
    #[arg(long)]
    report: Option<PathBuf>,
    /// Start: uniform, or noisy:ALPHA blending ground truth
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// Exit 0 even when the iteration diverged
    #[arg(long)]
    allow_diverged: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InferFileCfg {
    init: Option<String>,
    tol: Option<f64>,
    max_iters: Option<usize>,
    beta: Option<f64>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct InferResolved {
    ckpt: PathBuf,
    input: PathBuf,
    out: PathBuf,
    init: String,
    fixpoint: FixpointConfig,
    seed: u64,
}

#[derive(Serialize)]
struct InferReport {
    version: String,
    config: InferResolved,
    fixpoint: FixpointReport,
    network_degenerate_points: usize,
}

fn fix_cfg_from(
    tol: Option<f64>,
    max_iters: Option<usize>,
    beta: Option<f64>,
) -> FixpointConfig {
    let d = FixpointConfig::default();
    FixpointConfig {
        tol: tol.unwrap_or(d.tol),
        max_iters: max_iters.unwrap_or(d.max_iters),
        beta: beta.unwrap_or(d.beta),
    }
}

fn initial_guess(
    spec: &str,
    cloud: &Pointcloud,
    num_parts: usize,
    seed: u64,
) -> Result<banana::seg::SoftSegmentation, Failure> {
    let n = cloud.points.shape()[0];
    let mut rng = rng_from_seed(subseed(seed, "init"));
    if spec == "uniform" {
        return Ok(uniform_random_init(n, num_parts, &mut rng)?);
    }
    if let Some(alpha) = spec.strip_prefix("noisy:") {
        let alpha: f64 = alpha
            .parse()
            .map_err(|_| Failure::usage(format!("bad init {spec}")))?;
        let labels = cloud.labels.as_ref().ok_or_else(|| {
            Failure::usage("noisy init needs a labeled input cloud")
        })?;
        let gt = banana::seg::SoftSegmentation::from_labels(labels, num_parts)?;
        return Ok(noisy_init(&gt, alpha, &mut rng)?);
    }
    Err(Failure::usage(format!(
        "init must be uniform or noisy:ALPHA, got {spec}"
    )))
}

fn run_infer(a: InferArgs) -> CmdResult {
    let file = load_file_config(&a.config)?.infer;
    let net = PartNetwork::load(&a.ckpt)?;
    let cloud = Pointcloud::load(&a.input)?;
    let seed = resolve_seed(a.seed, file.seed);
    let init = a
        .init
        .or(file.init)
        .unwrap_or_else(|| "uniform".to_string());
    let fix = fix_cfg_from(
        a.tol.or(file.tol),
        a.max_iters.or(file.max_iters),
        a.beta.or(file.beta),
    );
    let y0 = initial_guess(&init, &cloud, net.config().num_parts, seed)?;
    let map = NetworkMap::new(&net, &cloud.points)?;
    let (y_fix, report) = banach_infer(&map, &y0, &fix)?;
    let (_, degenerate) = net.apply(map.context(), y_fix.tensor())?;

    let labeled = Pointcloud::new(cloud.points.clone(), Some(y_fix.argmax_labels()))?;
    labeled.save(&a.out)?;
    let resolved = InferResolved {
        ckpt: a.ckpt,
        input: a.input,
        out: a.out.clone(),
        init,
        fixpoint: fix,
        seed,
    };
    let full = InferReport {
        version: banana::version().to_string(),
        config: resolved,
        fixpoint: report.clone(),
        network_degenerate_points: degenerate,
    };
    let report_path = a
        .report
        .unwrap_or_else(|| a.out.with_extension("report.json"));
    write_json(&report_path, &full)?;
    println!(
        "{} iterations, residual {:.3e}, labels at {}",
        report.iterations,
        report.final_residual,
        a.out.display()
    );
    if report.diverged && !a.allow_diverged {
        return Err(Failure {
            code: 4,
            msg: "fixed-point iteration diverged".into(),
        });
    }
    Ok(())
}

// --------------------------------------------------------------- eval

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Manifest split to evaluate
    #[arg(long)]
    split: Option<String>,
    /// Per-instance CSV path
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Summary JSON path
    #[arg(long)]
    out_report: Option<PathBuf>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalFileCfg {
    split: Option<String>,
    tol: Option<f64>,
    max_iters: Option<usize>,
    beta: Option<f64>,
    threads: Option<usize>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct EvalResolved {
    ckpt: PathBuf,
    data: PathBuf,
    split: String,
    fixpoint: FixpointConfig,
    threads: usize,
    seed: u64,
}

#[derive(Serialize)]
struct EvalRow {
    file: String,
    template: String,
    mean_iou: f64,
    converged: bool,
    iterations: usize,
    final_residual: f64,
}

#[derive(Serialize)]
struct EvalReport {
    version: String,
    config: EvalResolved,
    instances: usize,
    mean_iou: f64,
    converged_fraction: f64,
    rows: Vec<EvalRow>,
}

fn run_eval(a: EvalArgs) -> CmdResult {
    let file = load_file_config(&a.config)?.eval;
    let net = PartNetwork::load(&a.ckpt)?;
    let manifest = manifest_for(&a.data)?;
    let split = a
        .split
        .or(file.split)
        .unwrap_or_else(|| "test_states".to_string());
    let entries: Vec<&ManifestEntry> = manifest.iter().filter(|e| e.split == split).collect();
    if entries.is_empty() {
        return Err(Failure::usage(format!("split {split} has no entries")));
    }
    let seed = resolve_seed(a.seed, file.seed);
    let threads = a.threads.or(file.threads).unwrap_or(1);
    let fix = fix_cfg_from(
        a.tol.or(file.tol),
        a.max_iters.or(file.max_iters),
        a.beta.or(file.beta),
    );

    let rows = indexed_map(entries.len(), threads, |i| {
        let entry = entries[i];
        let template = ShapeTemplate::by_name(&entry.template)?;
        let (x, gt) = load_entry(&a.data, entry)?;
        if gt.num_parts() != net.config().num_parts {
            return Err(Failure::usage(format!(
                "checkpoint expects {} parts, {} has {}",
                net.config().num_parts,
                entry.file,
                gt.num_parts()
            )));
        }
        let mut rng = rng_from_seed(subseed(seed, &entry.file));
        let y0 = uniform_random_init(x.shape()[0], gt.num_parts(), &mut rng)?;
        let map = NetworkMap::new(&net, &x)?;
        let (y_fix, rep) = banach_infer(&map, &y0, &fix)?;
        let iou = matched_iou(&y_fix, &gt, &template.groups)?;
        Ok(EvalRow {
            file: entry.file.clone(),
            template: entry.template.clone(),
            mean_iou: iou.mean_iou,
            converged: rep.converged,
            iterations: rep.iterations,
            final_residual: rep.final_residual,
        })
    })?;

    let mean_iou = rows.iter().map(|r| r.mean_iou).sum::<f64>() / rows.len() as f64;
    let converged_fraction =
        rows.iter().filter(|r| r.converged).count() as f64 / rows.len() as f64;

    let mut csv = String::from("file,template,mean_iou,converged,iterations,final_residual\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.file, r.template, r.mean_iou, r.converged, r.iterations, r.final_residual
        ));
    }
    let csv_path = a.out_csv.unwrap_or_else(|| a.data.join("eval.csv"));
    fs::write(&csv_path, csv).map_err(Error::from)?;

    let report = EvalReport {
        version: banana::version().to_string(),
        config: EvalResolved {
            ckpt: a.ckpt,
            data: a.data.clone(),
            split,
            fixpoint: fix,
            threads,
            seed,
        },
        instances: rows.len(),
        mean_iou,
        converged_fraction,
        rows,
    };
    let report_path = a
        .out_report
        .unwrap_or_else(|| a.data.join("eval_report.json"));
    write_json(&report_path, &report)?;
    println!(
        "{} instances: mean IoU {:.4}, converged {:.0}%",
        report.instances,
        report.mean_iou,
        report.converged_fraction * 100.0
    );
    Ok(())
}

// -------------------------------------------------------- audit-equiv

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Labeled pointcloud whose parts will be moved
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_report: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    /// Translation bound for the random motions
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AuditFileCfg {
    samples: Option<usize>,
    t_max: Option<f64>,
    tol: Option<f64>,
    max_iters: Option<usize>,
    beta: Option<f64>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct AuditResolved {
    ckpt: PathBuf,
    input: PathBuf,
    samples: usize,
    t_max: f64,
    fixpoint: FixpointConfig,
    seed: u64,
}

#[derive(Serialize)]
struct AuditReport {
    version: String,
    config: AuditResolved,
    max_forward_residual: f64,
    max_fixpoint_distance: f64,
}

fn run_audit(a: AuditArgs) -> CmdResult {
    let file = load_file_config(&a.config)?.audit_equiv;
    let net = PartNetwork::load(&a.ckpt)?;
    let cloud = Pointcloud::load(&a.input)?;
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Failure::usage("audit needs a labeled input cloud"))?;
    let gt = banana::seg::SoftSegmentation::from_labels(labels, net.config().num_parts)?;
    let samples = a.samples.or(file.samples).unwrap_or(50);
    let t_max = a.t_max.or(file.t_max).unwrap_or(1.0);
    let seed = resolve_seed(a.seed, file.seed);
    let fix = fix_cfg_from(
        a.tol.or(file.tol),
        a.max_iters.or(file.max_iters),
        a.beta.or(file.beta),
    );
    let audit = equivariance_audit(&net, &cloud.points, &gt, samples, t_max, seed, &fix)?;
    let report = AuditReport {
        version: banana::version().to_string(),
        config: AuditResolved {
            ckpt: a.ckpt,
            input: a.input.clone(),
            samples,
            t_max,
            fixpoint: fix,
            seed,
        },
        max_forward_residual: audit.max_forward_residual,
        max_fixpoint_distance: audit.max_fixpoint_distance,
    };
    let report_path = a
        .out_report
        .unwrap_or_else(|| a.input.with_extension("audit.json"));
    write_json(&report_path, &report)?;
    println!(
        "max one-step residual {:.3e}, max fixed-point distance {:.3e} over {} motions",
        report.max_forward_residual, report.max_fixpoint_distance, samples
    );
    Ok(())
}

// ---------------------------------------------------------- lipschitz

#[derive(Args)]
struct LipschitzArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Labeled pointcloud serving as the reference segmentation
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_report: Option<PathBuf>,
    /// Sampled segmentation pairs for the ratio search
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LipschitzFileCfg {
    pairs: Option<usize>,
    tol: Option<f64>,
    max_iters: Option<usize>,
    beta: Option<f64>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct LipschitzResolved {
    ckpt: PathBuf,
    input: PathBuf,
    pairs: usize,
    fixpoint: FixpointConfig,
    seed: u64,
}

#[derive(Serialize)]
struct LipschitzReport {
    version: String,
    config: LipschitzResolved,
    /// Max observed contraction ratio; a lower bound on the true
    /// constant.
    lipschitz_lower_bound: f64,
    /// One-step Frobenius residual at the reference segmentation.
    epsilon: f64,
    /// epsilon / (1 - L); absent when the estimate does not contract.
    error_bound: Option<f64>,
    /// Quotient distance from the reference to the reached fixed point.
    fixed_point_distance: f64,
    /// Whether the distance respects the bound (when one exists).
    bound_satisfied: Option<bool>,
}

fn run_lipschitz(a: LipschitzArgs) -> CmdResult {
    let file = load_file_config(&a.config)?.lipschitz;
    let net = PartNetwork::load(&a.ckpt)?;
    let cloud = Pointcloud::load(&a.input)?;
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Failure::usage("lipschitz needs a labeled input cloud"))?;
    let gt = banana::seg::SoftSegmentation::from_labels(labels, net.config().num_parts)?;
    let pairs = a.pairs.or(file.pairs).unwrap_or(200);
    let seed = resolve_seed(a.seed, file.seed);
    let fix = fix_cfg_from(
        a.tol.or(file.tol),
        a.max_iters.or(file.max_iters),
        a.beta.or(file.beta),
    );
    let map = NetworkMap::new(&net, &cloud.points)?;
    let mut rng = rng_from_seed(subseed(seed, "lipschitz"));
    let l_hat = estimate_lipschitz(&map, pairs, &mut rng)?;
    let fy = map_step(&map, &gt)?;
    let n = cloud.points.shape()[0];
    // everything below lives in the raw Frobenius scale of the quotient
    // metric, so epsilon, bound, and distance are directly comparable
    let epsilon =
        seg_residual(&fy, &gt.tensor().cast(net.config().dtype))? * (n as f64).sqrt();
    let error_bound = fixed_point_error_bound(epsilon, l_hat);

    let mut init_rng = rng_from_seed(subseed(seed, "init"));
    let y0 = uniform_random_init(n, net.config().num_parts, &mut init_rng)?;
    let (y_fix, _) = banach_infer(&map, &y0, &fix)?;
    let (fixed_point_distance, _) = quotient_distance(&y_fix, &gt)?;
    let bound_satisfied = error_bound.map(|b| fixed_point_distance <= b);

    let report = LipschitzReport {
        version: banana::version().to_string(),
        config: LipschitzResolved {
            ckpt: a.ckpt,
            input: a.input.clone(),
            pairs,
            fixpoint: fix,
            seed,
        },
        lipschitz_lower_bound: l_hat,
        epsilon,
        error_bound,
        fixed_point_distance,
        bound_satisfied,
    };
    let report_path = a
        .out_report
        .unwrap_or_else(|| a.input.with_extension("lipschitz.json"));
    write_json(&report_path, &report)?;
    println!(
        "L >= {:.4}, epsilon {:.3e}, bound {:?}, fixed point at {:.3e}",
        report.lipschitz_lower_bound,
        report.epsilon,
        report.error_bound,
        report.fixed_point_distance
    );
    Ok(())
}

fn map_step(
    map: &NetworkMap,
    y: &banana::seg::SoftSegmentation,
) -> Result<Tensor, Failure> {
    use banana::fixpoint::SegmentationMap;
    Ok(map.step(y.tensor())?)
}

// -------------------------------------------------------- sweep-noise

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: Option<String>,
    /// Comma-separated blend levels
    #[arg(long)]
    alphas: Option<String>,
    /// Noisy starts per cloud and level
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_report: Option<PathBuf>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepFileCfg {
    split: Option<String>,
    alphas: Option<String>,
    starts: Option<usize>,
    tol: Option<f64>,
    max_iters: Option<usize>,
    beta: Option<f64>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct SweepResolved {
    ckpt: PathBuf,
    data: PathBuf,
    split: String,
    alphas: Vec<f64>,
    starts: usize,
    fixpoint: FixpointConfig,
    seed: u64,
}

#[derive(Serialize)]
struct SweepReport {
    version: String,
    config: SweepResolved,
    rows: Vec<banana::fixpoint::BasinRow>,
}

fn parse_alphas(s: &str) -> Result<Vec<f64>, Failure> {
    let out: Result<Vec<f64>, _> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect();
    let out = out.map_err(|_| Failure::usage(format!("bad alpha list {s}")))?;
    if out.is_empty() {
        return Err(Failure::usage("alpha list is empty"));
    }
    for a in &out {
        if !(0.0..=1.0).contains(a) {
            return Err(Failure::usage(format!("alpha {a} outside [0, 1]")));
        }
    }
    Ok(out)
}

fn run_sweep(a: SweepArgs) -> CmdResult {
    let file = load_file_config(&a.config)?.sweep_noise;
    let net = PartNetwork::load(&a.ckpt)?;
    let manifest = manifest_for(&a.data)?;
    let split = a
        .split
        .or(file.split)
        .unwrap_or_else(|| "test_states".to_string());
    let entries: Vec<&ManifestEntry> = manifest.iter().filter(|e| e.split == split).collect();
    if entries.is_empty() {
        return Err(Failure::usage(format!("split {split} has no entries")));
    }
    let alphas = parse_alphas(
        a.alphas
            .as_deref()
            .or(file.alphas.as_deref())
            .unwrap_or("0,0.25,0.5,0.75,1"),
    )?;
    let starts = a.starts.or(file.starts).unwrap_or(10);
    let seed = resolve_seed(a.seed, file.seed);
    let fix = fix_cfg_from(
        a.tol.or(file.tol),
        a.max_iters.or(file.max_iters),
        a.beta.or(file.beta),
    );

    let mut groups: Option<Vec<Vec<usize>>> = None;
    let mut clouds = Vec::with_capacity(entries.len());
    for e in &entries {
        let template = ShapeTemplate::by_name(&e.template)?;
        match &groups {
            None => groups = Some(template.groups.clone()),
            Some(g) if *g == template.groups => {}
            Some(_) => {
                return Err(Failure::usage(
                    "sweep requires one template family per run",
                ))
            }
        }
        let (x, gt) = load_entry(&a.data, e)?;
        if gt.num_parts() != net.config().num_parts {
            return Err(Failure::usage(format!(
                "checkpoint expects {} parts, {} has {}",
                net.config().num_parts,
                e.file,
                gt.num_parts()
            )));
        }
        clouds.push((x, gt));
    }
    let groups = groups.expect("nonempty entries");
    let rows = noise_basin_sweep(&net, &clouds, &alphas, starts, seed, &fix, &groups)?;

    let mut csv = String::from("alpha,mean_iou\n");
    for r in &rows {
        csv.push_str(&format!("{},{}\n", r.alpha, r.mean_iou));
    }
    let csv_path = a.out_csv.unwrap_or_else(|| a.data.join("noise.csv"));
    fs::write(&csv_path, csv).map_err(Error::from)?;

    let report = SweepReport {
        version: banana::version().to_string(),
        config: SweepResolved {
            ckpt: a.ckpt,
            data: a.data.clone(),
            split,
            alphas,
            starts,
            fixpoint: fix,
            seed,
        },
        rows,
    };
    let report_path = a
        .out_report
        .unwrap_or_else(|| a.data.join("sweep_report.json"));
    write_json(&report_path, &report)?;
    for r in &report.rows {
        println!(
            "alpha {:.2}: mean IoU {:.4}, converged {:.0}%",
            r.alpha,
            r.mean_iou,
            r.converged_fraction * 100.0
        );
    }
    Ok(())
}
