use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use amoe_core::experts::ExpertGroup;
use amoe_core::feature_io::{gen_synthetic, Dataset, LayerSelection};
use amoe_core::scoring_eval::{build_report, write_pgm, EvalReport, ImageStat, ScoredSample, Weighting};
use amoe_core::trainer::{gradcheck, Trainer};
use clap::Args;
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{RunConfig, SweepConfig};
use crate::{Cli, CliError, Command};

const CHECKPOINT: &str = "checkpoint.amoc";

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Square patch grid side.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Dataset manifest; defaults to `<out>/data/manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Encoder layers fused into the target: `all` or a comma list such as `0,2`.
    #[arg(long)]
    pub layers: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub lambda_esb: Option<f64>,
    #[arg(long)]
    pub lambda_eir: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Sets the expert count of all three groups.
    #[arg(long)]
    pub experts_per_group: Option<usize>,
    #[arg(long)]
    pub n_patch: Option<usize>,
    #[arg(long)]
    pub n_component: Option<usize>,
    #[arg(long)]
    pub n_global: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub group_constrained: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub freeze_gates: Option<bool>,
    #[arg(long)]
    pub capacity_factor: Option<f64>,
    /// Component clusters per class.
    #[arg(long)]
    pub kb_clusters: Option<usize>,
    /// Normal training samples per class used for score statistics; `0` uses all.
    #[arg(long)]
    pub stats_samples: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct AggregateFlags {
    /// Disable per-class standardization of group maps.
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long, value_parser = parse_weighting)]
    pub weighting: Option<Weighting>,
    #[arg(long, value_parser = parse_image_stat)]
    pub image_stat: Option<ImageStat>,
    #[arg(long)]
    pub top_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Continue from a checkpoint until `iterations` total steps.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Log progress every N steps.
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    /// Write an intermediate checkpoint every N steps; `0` disables.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub experts_per_group: Option<usize>,
    /// `0` activates every expert.
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub lambda_esb: Option<f64>,
    #[arg(long)]
    pub lambda_eir: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub aggregate: AggregateFlags,
    /// Defaults to `<out>/checkpoint.amoc`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Only score this class.
    #[arg(long)]
    pub class: Option<String>,
    /// Dump per-group and final maps as PGM images.
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub aggregate: AggregateFlags,
    /// Defaults to `<out>/checkpoint.amoc`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub aggregate: AggregateFlags,
    /// Experts per group, comma separated.
    #[arg(long = "grid-experts", value_delimiter = ',')]
    pub grid_experts: Vec<usize>,
    #[arg(long = "grid-top-k", value_delimiter = ',')]
    pub grid_top_k: Vec<usize>,
    #[arg(long = "grid-lambda-esb", value_delimiter = ',')]
    pub grid_lambda_esb: Vec<f64>,
    #[arg(long = "grid-lambda-eir", value_delimiter = ',')]
    pub grid_lambda_eir: Vec<f64>,
    /// Run cells on all available cores.
    #[arg(long)]
    pub parallel: bool,
}

fn parse_weighting(s: &str) -> Result<Weighting, String> {
    match s {
        "gate" => Ok(Weighting::Gate),
        "uniform" => Ok(Weighting::Uniform),
        "max" => Ok(Weighting::Max),
        _ => Err(format!("unknown weighting {s:?} (gate|uniform|max)")),
    }
}

fn parse_image_stat(s: &str) -> Result<ImageStat, String> {
    match s {
        "max" => Ok(ImageStat::Max),
        "top" => Ok(ImageStat::Top),
        _ => Err(format!("unknown image statistic {s:?} (max|top)")),
    }
}

fn parse_layers(s: &str) -> Result<LayerSelection, CliError> {
    if s == "all" {
        return Ok(LayerSelection::All);
    }
    s.split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map(LayerSelection::Indices)
        .map_err(|_| CliError::Config(format!("bad layer list {s:?}")))
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        if let Some(m) = &self.manifest {
            cfg.data.manifest = Some(m.clone());
        }
        if let Some(l) = &self.layers {
            cfg.data.layers = parse_layers(l)?;
        }
        Ok(())
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        macro_rules! set {
            ($($flag:ident => $($field:ident).+;)*) => {
                $(if let Some(v) = self.$flag { t.$($field).+ = v; })*
            };
        }
        if let Some(n) = self.experts_per_group {
            t.experts.n_patch = n;
            t.experts.n_component = n;
            t.experts.n_global = n;
        }
        set! {
            iterations => iterations;
            batch_size => batch_size;
            seed => seed;
            lr => optimizer.lr;
            weight_decay => optimizer.weight_decay;
            lambda_esb => lambda_esb;
            lambda_eir => lambda_eir;
            top_k => top_k;
            n_patch => experts.n_patch;
            n_component => experts.n_component;
            n_global => experts.n_global;
            group_constrained => group_constrained;
            freeze_gates => freeze_gates;
            capacity_factor => capacity_factor;
            kb_clusters => kb.clusters;
            stats_samples => stats_samples;
        }
    }
}

impl AggregateFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let a = &mut cfg.aggregate;
        if self.no_standardize {
            a.standardize = false;
        }
        if let Some(w) = self.weighting {
            a.weighting = w;
        }
        if let Some(s) = self.image_stat {
            a.image_stat = s;
        }
        if let Some(q) = self.top_fraction {
            a.top_fraction = q;
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(cli.common.config.as_deref(), &cli.common.sets)?;
    let out = cli.common.out;
    match cli.command {
        Command::GenSynth(a) => gen_synth(&mut cfg, &out, &a),
        Command::Train(a) => train(&mut cfg, &out, &a),
        Command::Gradcheck(a) => run_gradcheck(&mut cfg, &out, &a),
        Command::Infer(a) => infer(&mut cfg, &out, &a),
        Command::Eval(a) => eval(&mut cfg, &out, &a),
        Command::Sweep(a) => sweep(&mut cfg, &out, &a),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(crate::config::one_line(&format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn load_dataset(cfg: &RunConfig, out: &Path) -> Result<Dataset, CliError> {
    let manifest = cfg.data.manifest.clone().unwrap_or_else(|| out.join("data").join("manifest.json"));
    if !manifest.is_file() {
        return Err(CliError::Config(format!("manifest {} not found", manifest.display())));
    }
    Ok(Dataset::load(&manifest, &cfg.data.layers)?)
}

fn load_trainer(path: Option<&PathBuf>, out: &Path, data: &Dataset) -> Result<Trainer, CliError> {
    let path = path.cloned().unwrap_or_else(|| out.join(CHECKPOINT));
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint {} not found", path.display())));
    }
    let mut trainer = Trainer::load(&path)?;
    trainer.ensure_compatible(data)?;
    if trainer.score_stats.is_none() {
        let train = trainer.prepare_train(data)?;
        trainer.finalize_stats(&train)?;
    }
    Ok(trainer)
}

fn gen_synth(cfg: &mut RunConfig, out: &Path, a: &GenSynthArgs) -> Result<(), CliError> {
    let s = &mut cfg.synth;
    if let Some(v) = a.classes {
        s.n_classes = v;
    }
    if let Some(v) = a.train_per_class {
        s.train_per_class = v;
    }
    if let Some(v) = a.test_per_class {
        s.test_per_class = v;
    }
    if let Some(v) = a.grid {
        s.grid_h = v;
        s.grid_w = v;
    }
    if let Some(v) = a.dim {
        s.dim = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    cfg.synth.validate()?;
    let data = gen_synthetic(&cfg.synth)?;
    let manifest = data.write(out.join("data"))?;
    cfg.write_snapshot(out)?;
    info!(
        "wrote {} classes ({}x{} grid, D={}) to {}",
        data.classes.len(),
        data.grid_h,
        data.grid_w,
        data.dim,
        manifest.display()
    );
    println!("{}", manifest.display());
    Ok(())
}

fn train(cfg: &mut RunConfig, out: &Path, a: &TrainArgs) -> Result<(), CliError> {
    a.data.apply(cfg)?;
    a.train.apply(cfg);
    cfg.train.validate()?;
    let data = load_dataset(cfg, out)?;
    create_dir(out)?;
    cfg.write_snapshot(out)?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::load(path)?;
            t.ensure_compatible(&data)?;
            if t.config.iterations != cfg.train.iterations {
                info!("extending run from {} to {} iterations", t.config.iterations, cfg.train.iterations);
            }
            t.config.iterations = cfg.train.iterations;
            t
        }
        None => Trainer::new(cfg.train.clone(), &data)?,
    };
    let pool = trainer.prepare_train(&data)?;
    let metrics_path = out.join("metrics.jsonl");
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&metrics_path)
        .map_err(|e| io_err(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let start = Instant::now();
    while (trainer.iteration as usize) < trainer.config.iterations {
        let m = trainer.step(&pool)?;
        let line = serde_json::to_string(&m).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(metrics, "{line}").map_err(|e| io_err(&metrics_path, e))?;
        let done = trainer.iteration as usize;
        if a.log_every > 0 && (done % a.log_every == 0 || done == trainer.config.iterations) {
            info!(
                "step {done}/{} loss {:.5} rec {:.5} esb {:.4} eir {:.4} gate mass {:.2?} ({:.1}s)",
                trainer.config.iterations,
                m.total,
                m.reconstruction,
                m.esb.total,
                m.eir,
                m.group_gate_mass,
                start.elapsed().as_secs_f64()
            );
        }
        if a.checkpoint_every > 0 && done % a.checkpoint_every == 0 {
            trainer.save(out.join(CHECKPOINT))?;
        }
    }
    metrics.flush().map_err(|e| io_err(&metrics_path, e))?;
    trainer.finalize_stats(&pool)?;
    let path = out.join(CHECKPOINT);
    trainer.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn run_gradcheck(cfg: &mut RunConfig, out: &Path, a: &GradcheckArgs) -> Result<(), CliError> {
    let g = &mut cfg.gradcheck;
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { g.$f = v; })* };
    }
    set!(dim, grid, experts_per_group, top_k, batch, seed, tolerance, lambda_esb, lambda_eir);
    create_dir(out)?;
    cfg.write_snapshot(out)?;
    let report = gradcheck(&cfg.gradcheck)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out.join("gradcheck.json"), json)?;
    let width = report.tensors.iter().map(|t| t.name.len()).max().unwrap_or(6).max(6);
    println!("{:<width$}  {:>8}  {:>10}  {:>10}", "tensor", "elements", "rel_err", "grad_norm");
    for t in &report.tensors {
        println!("{:<width$}  {:>8}  {:>10.3e}  {:>10.3e}", t.name, t.elements, t.rel_err, t.grad_norm);
    }
    println!(
        "max rel err {:.3e} (tolerance {:.0e}): {}",
        report.max_rel_err,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if report.passed {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(format!(
            "max relative error {:.3e} ≥ tolerance {:.0e}",
            report.max_rel_err, report.tolerance
        )))
    }
}

fn score_all(trainer: &Trainer, data: &Dataset, cfg: &RunConfig, class: Option<&str>) -> Result<Vec<ScoredSample>, CliError> {
    cfg.aggregate.validate()?;
    let test = trainer.prepare_test(data)?;
    let chosen: Vec<_> = test.iter().filter(|s| class.map_or(true, |c| s.class_id == c)).collect();
    chosen
        .par_iter()
        .map(|s| {
            Ok(ScoredSample {
                sample_id: s.sample_id.clone(),
                class_id: s.class_id.clone(),
                kind: s.kind.clone(),
                normal: s.normal,
                result: trainer.score(s, &cfg.aggregate)?,
                mask: s.pixel_mask.clone(),
            })
        })
        .collect()
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    create_dir(dir)?;
    write_file(&dir.join("report.json"), report.to_json()?)?;
    write_file(&dir.join("report.txt"), report.to_table())
}

fn eval(cfg: &mut RunConfig, out: &Path, a: &EvalArgs) -> Result<(), CliError> {
    a.data.apply(cfg)?;
    a.aggregate.apply(cfg);
    let data = load_dataset(cfg, out)?;
    let trainer = load_trainer(a.checkpoint.as_ref(), out, &data)?;
    cfg.train = trainer.config.clone();
    create_dir(out)?;
    cfg.write_snapshot(out)?;
    let scored = score_all(&trainer, &data, cfg, None)?;
    let report = build_report(&scored, &trainer.model.experts.groups())?;
    write_report(out, &report)?;
    print!("{}", report.to_table());
    Ok(())
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    sample_id: &'a str,
    class_id: &'a str,
    kind: &'a str,
    normal: bool,
    image_score: f64,
    gate_mass: [f64; 3],
    weights: [f64; 3],
    gates: &'a [f64],
}

fn infer(cfg: &mut RunConfig, out: &Path, a: &InferArgs) -> Result<(), CliError> {
    a.data.apply(cfg)?;
    a.aggregate.apply(cfg);
    let data = load_dataset(cfg, out)?;
    if let Some(c) = &a.class {
        if data.class(c).is_none() {
            return Err(CliError::Config(format!("unknown class {c:?}")));
        }
    }
    let trainer = load_trainer(a.checkpoint.as_ref(), out, &data)?;
    cfg.train = trainer.config.clone();
    create_dir(out)?;
    cfg.write_snapshot(out)?;
    let scored = score_all(&trainer, &data, cfg, a.class.as_deref())?;
    let path = out.join("scores.jsonl");
    let mut w = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
    for s in &scored {
        let line = ScoreLine {
            sample_id: &s.sample_id,
            class_id: &s.class_id,
            kind: &s.kind,
            normal: s.normal,
            image_score: s.result.image_score,
            gate_mass: s.result.gate_mass,
            weights: s.result.weights,
            gates: &s.result.gates,
        };
        let json = serde_json::to_string(&line).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(w, "{json}").map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    if a.pgm {
        let (h, wd) = (data.grid_h, data.grid_w);
        for s in &scored {
            let dir = out.join("maps").join(&s.class_id);
            create_dir(&dir)?;
            for g in ExpertGroup::ALL {
                if let Some(map) = &s.result.group_maps[g.index()] {
                    write_pgm(dir.join(format!("{}.{}.pgm", s.sample_id, g.as_str())), map, h, wd)?;
                }
            }
            write_pgm(dir.join(format!("{}.final.pgm", s.sample_id)), &s.result.map, h, wd)?;
            if let Some(mask) = &s.mask {
                let m: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                write_pgm(dir.join(format!("{}.mask.pgm", s.sample_id)), &m, h, wd)?;
            }
        }
    }
    info!("scored {} samples into {}", scored.len(), path.display());
    Ok(())
}

#[derive(Clone, Debug)]
struct Cell {
    n_experts: usize,
    top_k: usize,
    lambda_esb: f64,
    lambda_eir: f64,
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    cell: usize,
    n_experts: usize,
    top_k: usize,
    lambda_esb: f64,
    lambda_eir: f64,
    mean_image_auroc: Option<f64>,
    mean_pixel_auroc: Option<f64>,
    auroc_local: Option<f64>,
    auroc_component: Option<f64>,
    auroc_global: Option<f64>,
    gate_patch: f64,
    gate_component: f64,
    gate_global: f64,
    final_loss: f64,
}

fn grid(base: &RunConfig, axes: &SweepConfig) -> Result<Vec<Cell>, CliError> {
    let t = &base.train;
    let e = &t.experts;
    if !(e.n_patch == e.n_component && e.n_component == e.n_global) && !axes.n_experts.is_empty() {
        return Err(CliError::Config("sweeping n_experts needs equal group sizes in the base config".into()));
    }
    let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
    let orf = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let mut cells = Vec::new();
    for &n in &or(&axes.n_experts, e.n_patch) {
        for &k in &or(&axes.top_k, t.top_k) {
            for &le in &orf(&axes.lambda_esb, t.lambda_esb) {
                for &li in &orf(&axes.lambda_eir, t.lambda_eir) {
                    cells.push(Cell {
                        n_experts: n,
                        top_k: k,
                        lambda_esb: le,
                        lambda_eir: li,
                    });
                }
            }
        }
    }
    Ok(cells)
}

fn cell_config(base: &RunConfig, c: &Cell) -> RunConfig {
    let mut cfg = base.clone();
    let t = &mut cfg.train;
    t.experts.n_patch = c.n_experts;
    t.experts.n_component = c.n_experts;
    t.experts.n_global = c.n_experts;
    t.top_k = c.top_k;
    t.lambda_esb = c.lambda_esb;
    t.lambda_eir = c.lambda_eir;
    cfg.sweep = SweepConfig::default();
    cfg
}

fn run_cell(cfg: &RunConfig, data: &Dataset, dir: &Path) -> Result<(EvalReport, f64), CliError> {
    create_dir(dir)?;
    cfg.write_snapshot(dir)?;
    let mut trainer = Trainer::new(cfg.train.clone(), data)?;
    let pool = trainer.prepare_train(data)?;
    let metrics = trainer.train(&pool, |_| {})?;
    trainer.finalize_stats(&pool)?;
    let scored = score_all(&trainer, data, cfg, None)?;
    let report = build_report(&scored, &trainer.model.experts.groups())?;
    write_report(dir, &report)?;
    Ok((report, metrics.last().map_or(f64::NAN, |m| m.total)))
}

fn sweep(cfg: &mut RunConfig, out: &Path, a: &SweepArgs) -> Result<(), CliError> {
    a.data.apply(cfg)?;
    a.train.apply(cfg);
    a.aggregate.apply(cfg);
    let s = &mut cfg.sweep;
    for (flag, axis) in [(&a.grid_experts, &mut s.n_experts), (&a.grid_top_k, &mut s.top_k)] {
        if !flag.is_empty() {
            *axis = flag.clone();
        }
    }
    for (flag, axis) in [(&a.grid_lambda_esb, &mut s.lambda_esb), (&a.grid_lambda_eir, &mut s.lambda_eir)] {
        if !flag.is_empty() {
            *axis = flag.clone();
        }
    }
    let cells = grid(cfg, &cfg.sweep)?;
    let configs: Vec<RunConfig> = cells.iter().map(|c| cell_config(cfg, c)).collect();
    for c in &configs {
        c.train.validate()?;
    }
    cfg.aggregate.validate()?;
    let data = load_dataset(cfg, out)?;
    create_dir(out)?;
    cfg.write_snapshot(out)?;

    let results: Vec<Mutex<Option<Result<(EvalReport, f64), CliError>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= cells.len() {
            break;
        }
        let c = &cells[i];
        info!(
            "cell {i}: n_experts {} top_k {} lambda_esb {} lambda_eir {}",
            c.n_experts, c.top_k, c.lambda_esb, c.lambda_eir
        );
        let r = run_cell(&configs[i], &data, &out.join("cells").join(format!("{i:03}")));
        *results[i].lock().expect("poisoned") = Some(r);
    };
    let workers = if a.parallel {
        std::thread::available_parallelism().map_or(1, |n| n.get()).min(cells.len())
    } else {
        1
    };
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(work);
        }
    });

    let path = out.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    for (i, (cell, slot)) in cells.iter().zip(results).enumerate() {
        let (report, final_loss) = slot.into_inner().expect("poisoned").expect("cell ran")?;
        let kind = |k: &str| report.per_kind.get(k).copied();
        w.serialize(SummaryRow {
            cell: i,
            n_experts: cell.n_experts,
            top_k: cell.top_k,
            lambda_esb: cell.lambda_esb,
            lambda_eir: cell.lambda_eir,
            mean_image_auroc: report.mean_image_auroc,
            mean_pixel_auroc: report.mean_pixel_auroc,
            auroc_local: kind("local"),
            auroc_component: kind("component"),
            auroc_global: kind("global"),
            gate_patch: report.gate_mass[0],
            gate_component: report.gate_mass[1],
            gate_global: report.gate_mass[2],
            final_loss,
        })
        .map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    println!("{}", path.display());
    Ok(())
}
