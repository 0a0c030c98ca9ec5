//! Command-line entry point: data generation, training, evaluation,
//! explanation exports, and the gradient-check gate.
//!
//! Configuration comes from an optional TOML file (sections `[optimizer]`,
//! `[guidance]`, `[model]`, `[data]`, `[run]`) with command-line flags taking
//! precedence. Every command writes a `run_manifest.json` capturing the fully
//! resolved configuration so a run can be replayed exactly. Exit codes:
//! 0 success, 1 verification failure, 2 usage or configuration error.

use crate::databag::{
    generate_synthetic_cohort, load_cohort, partition_genes, stratified_kfold, synthetic_kb,
    write_cohort, Cohort, GenePartition, SyntheticConfig,
};
use crate::diff::matrix::Matrix;
use crate::diff::{check_gradients, AdamConfig, ParamSet};
use crate::error::{Error, Result};
use crate::explain;
use crate::gpnn::{self, GpnnConfig, GpnnModel};
use crate::knowledge::{embed_phenotypes, load_kb, save_kb, EmbeddingSource, PhenotypeKB};
use crate::metrics::{evaluate, write_kfold_csv, EvalResult};
use crate::pamil::{self, Activation, Head, PamilConfig, PamilModel};
use crate::trainer::{
    self, load_gpnn, load_pamil, save_gpnn, save_pamil, GuidanceConfig, GuidanceObjective,
    TrainerConfig,
};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "pamil", version, about = "Phenotype-aware MIL pipeline")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (also via PAMIL_OUT_DIR).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted ground truth.
    GenData(GenDataArgs),
    /// Train the teacher or the student.
    Train(TrainArgs),
    /// Evaluate with k-fold cross-validation or a frozen checkpoint.
    Eval(EvalArgs),
    /// Export attribution and inspection artifacts.
    Explain(ExplainArgs),
    /// Verify analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Knowledge-base JSON; a synthetic KB is generated when omitted.
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Synthetic-KB phenotype count (ignored with --kb).
    #[arg(long)]
    phenotypes: Option<usize>,
    /// Inject a class-dependent linear patch signal of this strength and make
    /// the planted saliency class-independent.
    #[arg(long)]
    class_signal: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Cohort directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long, value_parser = ["gpnn", "pamil"])]
    model: String,
    #[arg(long, value_parser = ["sequential", "joint"])]
    mode: Option<String>,
    #[arg(long, value_parser = ["off", "feat", "logit", "both"])]
    guidance: Option<String>,
    #[arg(long, value_parser = ["l2", "l1", "cl"])]
    objective: Option<String>,
    #[arg(long, value_parser = ["ln", "leaky"])]
    activation: Option<String>,
    #[arg(long, value_parser = ["score", "feature"])]
    head: Option<String>,
    /// Teacher checkpoint, required when guidance is on.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Frozen student checkpoint: evaluate without retraining.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    kfold: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = ["sequential", "joint"])]
    mode: Option<String>,
    #[arg(long, value_parser = ["off", "feat", "logit", "both"])]
    guidance: Option<String>,
    #[arg(long, value_parser = ["l2", "l1", "cl"])]
    objective: Option<String>,
    #[arg(long, value_parser = ["ln", "leaky"])]
    activation: Option<String>,
    #[arg(long, value_parser = ["score", "feature"])]
    head: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long, value_parser = ["shapley", "genes", "heatmap", "attention", "sankey", "leakage"])]
    what: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Student checkpoint (all targets except `genes`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Teacher checkpoint (`genes` target).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Sample id for per-sample targets; defaults to the first sample.
    #[arg(long)]
    sample: Option<String>,
    #[arg(long, default_value_t = 4)]
    top_genes: usize,
    #[arg(long, default_value_t = 3)]
    top_patches: usize,
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Test hook: corrupt one analytic gradient to force a failure.
    #[arg(long, hide = true)]
    corrupt: bool,
}

/// TOML configuration mirror; every key has a flag counterpart.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub optimizer: OptimizerSection,
    pub guidance: GuidanceSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub clip_norm: Option<f64>,
    pub accumulation_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub mode: Option<String>,
    pub objective: Option<String>,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: Option<usize>,
    pub activation: Option<String>,
    pub head: Option<String>,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
    pub feature_hidden: Option<usize>,
    pub emb_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub classes: Option<usize>,
    pub per_class: Option<usize>,
    pub phenotypes: Option<usize>,
    pub genes_per_phenotype: Option<usize>,
    pub patches_min: Option<usize>,
    pub patches_max: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub class_signal: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub kfold: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    fn optimizer(&self) -> Result<AdamConfig> {
        let d = AdamConfig::default();
        let cfg = AdamConfig {
            learning_rate: self.optimizer.learning_rate.unwrap_or(d.learning_rate),
            weight_decay: self.optimizer.weight_decay.unwrap_or(d.weight_decay),
            beta1: self.optimizer.beta1.unwrap_or(d.beta1),
            beta2: self.optimizer.beta2.unwrap_or(d.beta2),
            epsilon: self.optimizer.epsilon.unwrap_or(d.epsilon),
            clip_norm: self.optimizer.clip_norm.unwrap_or(d.clip_norm),
            accumulation_steps: self
                .optimizer
                .accumulation_steps
                .unwrap_or(d.accumulation_steps),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn guidance(&self) -> Result<GuidanceConfig> {
        let mut g = GuidanceConfig::off();
        if let Some(mode) = &self.guidance.mode {
            g.parse_mode(mode)?;
        }
        if let Some(obj) = &self.guidance.objective {
            g.objective = GuidanceObjective::parse(obj)?;
        }
        if let Some(l) = self.guidance.lambda {
            g.lambda = l;
        }
        if let Some(t) = self.guidance.tau {
            g.tau = t;
        }
        g.validate()?;
        Ok(g)
    }
}

/// Manifest tying one command invocation to its inputs and outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    /// Fully resolved configuration snapshot.
    pub config: FileConfig,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub version: String,
    pub wall_clock_secs: f64,
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let tmp = dir.join("run_manifest.json.tmp");
    let fin = dir.join("run_manifest.json");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(serde_json::to_string_pretty(manifest).unwrap().as_bytes())?;
    f.sync_all()?;
    std::fs::rename(&tmp, &fin)?;
    Ok(())
}

/// Parse and run; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let file_cfg = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let out = resolve_out_dir(&cli);
    std::fs::create_dir_all(&out)?;
    let started = std::time::Instant::now();
    let config_path = cli.config.as_ref().map(|p| p.display().to_string());
    let (command, snapshot, seed, outputs) = match cli.command {
        Command::GenData(a) => cmd_gen_data(a, &file_cfg, &out)?,
        Command::Train(a) => cmd_train(a, &file_cfg, &out)?,
        Command::Eval(a) => cmd_eval(a, &file_cfg, &out)?,
        Command::Explain(a) => cmd_explain(a, &file_cfg, &out)?,
        Command::GradCheck(a) => cmd_grad_check(a, &file_cfg, &out)?,
    };
    write_manifest(
        &out,
        &RunManifest {
            command,
            config_path,
            config: snapshot,
            seed,
            outputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    )
}

fn resolve_out_dir(cli: &Cli) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    if let Some(env) = std::env::var_os("PAMIL_OUT_DIR") {
        return PathBuf::from(env);
    }
    PathBuf::from("runs")
}

type CommandOutcome = (String, FileConfig, u64, Vec<String>);

/// Class saliency profiles: linearly interpolated ramps so that class 0
/// favors the first phenotypes and the last class the last ones. With a
/// class signal, every class shares the class-0 profile so the planted
/// saliency carries no label information.
pub fn default_profiles(
    n_classes: usize,
    n_phenotypes: usize,
    class_independent: bool,
) -> Vec<Vec<f64>> {
    let ramp = |t: f64| -> Vec<f64> {
        let raw: Vec<f64> = (0..n_phenotypes)
            .map(|i| {
                let x = if n_phenotypes > 1 {
                    i as f64 / (n_phenotypes - 1) as f64
                } else {
                    0.0
                };
                1.0 + 8.0 * ((1.0 - t) * (1.0 - x) + t * x)
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    };
    (0..n_classes)
        .map(|c| {
            let t = if class_independent || n_classes == 1 {
                0.0
            } else {
                c as f64 / (n_classes - 1) as f64
            };
            ramp(t)
        })
        .collect()
}

fn load_kb_arg(path: &Option<PathBuf>, fc: &FileConfig) -> Result<PhenotypeKB> {
    match path {
        Some(p) => load_kb(p),
        None => {
            let n = fc.data.phenotypes.unwrap_or(4);
            let g = fc.data.genes_per_phenotype.unwrap_or(6);
            let kb = synthetic_kb(n, g);
            kb.validate()?;
            Ok(kb)
        }
    }
}

fn embeddings(kb: &PhenotypeKB, dim: usize, emb_seed: u64) -> Result<Matrix> {
    embed_phenotypes(
        kb,
        &EmbeddingSource::Pseudo {
            dimension: dim,
            seed: emb_seed,
        },
    )
}

fn cmd_gen_data(a: GenDataArgs, fc: &FileConfig, out: &Path) -> Result<CommandOutcome> {
    let kb = load_kb_arg(&a.kb, fc)?;
    let classes = a.classes.or(fc.data.classes).unwrap_or(2);
    let per_class = a.per_class.or(fc.data.per_class).unwrap_or(50);
    let dim = a.dim.or(fc.model.dim).unwrap_or(32);
    let seed = a.seed.or(fc.run.seed).unwrap_or(1);
    let emb_seed = fc.model.emb_seed.unwrap_or(0);
    let class_signal = a.class_signal.or(fc.data.class_signal);
    if classes < 2 {
        return Err(Error::config("need at least 2 classes"));
    }

    let u = embeddings(&kb, dim, emb_seed)?;
    let profiles = default_profiles(classes, kb.len(), class_signal.is_some());
    let mut cfg = SyntheticConfig::new(per_class, dim, profiles);
    cfg.seed = seed;
    cfg.class_signal = class_signal;
    if let Some(n) = a.noise.or(fc.data.noise_sigma) {
        cfg.noise_sigma = n;
    }
    if let Some(p) = fc.data.patches_min {
        cfg.patches_min = p;
    }
    if let Some(p) = fc.data.patches_max {
        cfg.patches_max = p;
    }
    let cohort = generate_synthetic_cohort(&kb, &u, &cfg)?;
    let manifest = write_cohort(&cohort, out)?;
    let kb_path = out.join("kb.json");
    save_kb(&kb, &kb_path)?;

    let mut snapshot = fc.clone();
    snapshot.data.classes = Some(classes);
    snapshot.data.per_class = Some(per_class);
    snapshot.data.noise_sigma = Some(cfg.noise_sigma);
    snapshot.data.class_signal = class_signal;
    snapshot.model.dim = Some(dim);
    snapshot.model.emb_seed = Some(emb_seed);
    snapshot.run.seed = Some(seed);
    Ok((
        "gen-data".into(),
        snapshot,
        seed,
        vec![
            manifest.display().to_string(),
            kb_path.display().to_string(),
        ],
    ))
}

struct StudentSpec {
    cfg: PamilConfig,
    guidance: GuidanceConfig,
    joint: bool,
}

#[allow(clippy::too_many_arguments)]
fn resolve_student_spec(
    fc: &FileConfig,
    kb: &PhenotypeKB,
    n_classes: usize,
    dim: usize,
    mode: &Option<String>,
    guidance: &Option<String>,
    objective: &Option<String>,
    activation: &Option<String>,
    head: &Option<String>,
) -> Result<StudentSpec> {
    let mut cfg = PamilConfig::new(dim, kb.len(), n_classes);
    if let Some(act) = activation.as_deref().or(fc.model.activation.as_deref()) {
        cfg.activation = Activation::parse(act)?;
    }
    if let Some(h) = head.as_deref().or(fc.model.head.as_deref()) {
        cfg.head = Head::parse(h)?;
    }
    if let Some(t) = fc.model.tau {
        cfg.tau = t;
    }
    if let Some(al) = fc.model.alpha {
        cfg.alpha = al;
    }
    if let Some(fh) = fc.model.feature_hidden {
        cfg.feature_hidden = fh;
    }
    cfg.validate()?;

    let mut g = fc.guidance()?;
    if let Some(mode) = guidance {
        g.parse_mode(mode)?;
    }
    if let Some(obj) = objective {
        g.objective = GuidanceObjective::parse(obj)?;
    }
    let joint = mode.as_deref() != Some("sequential");
    Ok(StudentSpec {
        cfg,
        guidance: g,
        joint,
    })
}

fn write_train_report(path: &Path, reports: &[(&str, &trainer::TrainReport)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "phase,epoch,total,ce,contrast,guidance")?;
    for (phase, r) in reports {
        for e in 0..r.epoch_total.len() {
            writeln!(
                f,
                "{phase},{e},{:.8e},{:.8e},{:.8e},{:.8e}",
                r.epoch_total[e], r.epoch_ce[e], r.epoch_contrast[e], r.epoch_guidance[e]
            )?;
        }
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, fc: &FileConfig, out: &Path) -> Result<CommandOutcome> {
    let cohort = load_cohort(a.data.join("manifest.json"))?;
    let kb = load_kb_arg(&a.kb.clone().or(Some(a.data.join("kb.json"))), fc)?;
    let dim = a
        .dim
        .or(fc.model.dim)
        .unwrap_or_else(|| cohort.bags[0].features.cols);
    let seed = a.seed.or(fc.run.seed).unwrap_or(1);
    let epochs = a.epochs.or(fc.run.epochs).unwrap_or(20);
    let emb_seed = fc.model.emb_seed.unwrap_or(0);
    let opt = fc.optimizer()?;

    let mut outputs = Vec::new();
    match a.model.as_str() {
        "gpnn" => {
            let mut teacher =
                GpnnModel::init(GpnnConfig::new(dim, cohort.n_classes()), &kb, seed)?;
            if let Some(act) = a.activation.as_deref().or(fc.model.activation.as_deref()) {
                teacher.cfg.activation = Activation::parse(act)?;
            }
            let report = gpnn::train_gpnn(&mut teacher, &cohort, &kb, &opt, epochs, seed)?;
            let ckpt = out.join("gpnn.ckpt");
            save_gpnn(&teacher, &ckpt)?;
            let report_path = out.join("report.csv");
            let tr = trainer::TrainReport {
                epoch_total: report.epoch_loss.clone(),
                epoch_ce: report.epoch_loss.clone(),
                epoch_contrast: vec![0.0; report.epoch_loss.len()],
                epoch_guidance: vec![0.0; report.epoch_loss.len()],
            };
            write_train_report(&report_path, &[("teacher", &tr)])?;
            outputs.push(ckpt.display().to_string());
            outputs.push(report_path.display().to_string());
        }
        "pamil" => {
            let spec = resolve_student_spec(
                fc,
                &kb,
                cohort.n_classes(),
                dim,
                &a.mode,
                &a.guidance,
                &a.objective,
                &a.activation,
                &a.head,
            )?;
            let teacher = match (&a.teacher, spec.guidance.enabled()) {
                (Some(path), _) => Some(load_gpnn(path)?),
                (None, true) => {
                    return Err(Error::config(
                        "guidance is enabled but no --teacher checkpoint was given",
                    ))
                }
                (None, false) => None,
            };
            if let Some(t) = &teacher {
                if t.n_phenotypes() != kb.len() {
                    return Err(Error::config(format!(
                        "teacher has {} phenotypes, knowledge base has {}",
                        t.n_phenotypes(),
                        kb.len()
                    )));
                }
            }
            let u = embeddings(&kb, dim, emb_seed)?;
            let mut student = PamilModel::init(spec.cfg, &u, seed)?;
            let mut tcfg = TrainerConfig::new(epochs, spec.guidance.clone());
            tcfg.opt = opt.clone();
            tcfg.seed = seed;
            let report_path = out.join("report.csv");
            if spec.joint {
                let report = trainer::train_joint(
                    &mut student,
                    teacher.as_ref(),
                    &cohort,
                    &kb,
                    &u,
                    &tcfg,
                )?;
                write_train_report(&report_path, &[("joint", &report)])?;
            } else {
                let (p1, p2) = trainer::train_sequential(
                    &mut student,
                    teacher.as_ref(),
                    &cohort,
                    &kb,
                    &u,
                    &tcfg,
                )?;
                write_train_report(&report_path, &[("phenotype", &p1), ("classifier", &p2)])?;
            }
            let ckpt = out.join("pamil.ckpt");
            save_pamil(&student, &ckpt)?;
            outputs.push(ckpt.display().to_string());
            outputs.push(report_path.display().to_string());
        }
        other => return Err(Error::config(format!("unknown model '{other}'"))),
    }

    let mut snapshot = fc.clone();
    snapshot.model.dim = Some(dim);
    snapshot.run.seed = Some(seed);
    snapshot.run.epochs = Some(epochs);
    Ok(("train".into(), snapshot, seed, outputs))
}

/// Train a student (and, when guided, a teacher) on the train split and
/// evaluate on the test split.
#[allow(clippy::too_many_arguments)]
fn eval_fold(
    spec: &StudentSpec,
    train: &Cohort,
    test: &Cohort,
    kb: &PhenotypeKB,
    u: &Matrix,
    opt: &AdamConfig,
    epochs: usize,
    seed: u64,
) -> Result<EvalResult> {
    let teacher = if spec.guidance.enabled() {
        let mut t = GpnnModel::init(GpnnConfig::new(spec.cfg.dim, spec.cfg.n_classes), kb, seed)?;
        gpnn::train_gpnn(&mut t, train, kb, opt, epochs, seed)?;
        Some(t)
    } else {
        None
    };
    let mut student = PamilModel::init(spec.cfg.clone(), u, seed)?;
    let mut tcfg = TrainerConfig::new(epochs, spec.guidance.clone());
    tcfg.opt = opt.clone();
    tcfg.seed = seed;
    if spec.joint {
        trainer::train_joint(&mut student, teacher.as_ref(), train, kb, u, &tcfg)?;
    } else {
        trainer::train_sequential(&mut student, teacher.as_ref(), train, kb, u, &tcfg)?;
    }
    let preds = trainer::predict_student(&student, test, u)?;
    evaluate(&preds.labels, &preds.preds, &preds.probs, spec.cfg.n_classes)
}

fn cmd_eval(a: EvalArgs, fc: &FileConfig, out: &Path) -> Result<CommandOutcome> {
    let cohort = load_cohort(a.data.join("manifest.json"))?;
    let kb = load_kb_arg(&a.kb.clone().or(Some(a.data.join("kb.json"))), fc)?;
    let dim = a
        .dim
        .or(fc.model.dim)
        .unwrap_or_else(|| cohort.bags[0].features.cols);
    let seed = a.seed.or(fc.run.seed).unwrap_or(1);
    let epochs = a.epochs.or(fc.run.epochs).unwrap_or(20);
    let emb_seed = fc.model.emb_seed.unwrap_or(0);
    let opt = fc.optimizer()?;
    let u = embeddings(&kb, dim, emb_seed)?;
    let csv = out.join("metrics.csv");

    let folds: Vec<EvalResult> = match &a.checkpoint {
        Some(path) => {
            let student = load_pamil(path)?;
            if student.cfg.n_phenotypes != kb.len() {
                return Err(Error::config(format!(
                    "checkpoint has {} phenotypes, knowledge base has {}",
                    student.cfg.n_phenotypes,
                    kb.len()
                )));
            }
            let preds = trainer::predict_student(&student, &cohort, &u)?;
            vec![evaluate(
                &preds.labels,
                &preds.preds,
                &preds.probs,
                cohort.n_classes(),
            )?]
        }
        None => {
            let k = a.kfold.or(fc.run.kfold).unwrap_or(5);
            let spec = resolve_student_spec(
                fc,
                &kb,
                cohort.n_classes(),
                dim,
                &a.mode,
                &a.guidance,
                &a.objective,
                &a.activation,
                &a.head,
            )?;
            let splits = stratified_kfold(&cohort, k, seed)?;
            let mut results = Vec::with_capacity(k);
            for (train_idx, test_idx) in &splits {
                let train = cohort.subset(train_idx);
                let test = cohort.subset(test_idx);
                results.push(eval_fold(
                    &spec, &train, &test, &kb, &u, &opt, epochs, seed,
                )?);
            }
            results
        }
    };
    write_kfold_csv(&csv, &folds)?;

    let mut snapshot = fc.clone();
    snapshot.model.dim = Some(dim);
    snapshot.run.seed = Some(seed);
    snapshot.run.epochs = Some(epochs);
    Ok((
        "eval".into(),
        snapshot,
        seed,
        vec![csv.display().to_string()],
    ))
}

fn cmd_explain(a: ExplainArgs, fc: &FileConfig, out: &Path) -> Result<CommandOutcome> {
    let cohort = load_cohort(a.data.join("manifest.json"))?;
    let kb = load_kb_arg(&a.kb.clone().or(Some(a.data.join("kb.json"))), fc)?;
    let dim = a
        .dim
        .or(fc.model.dim)
        .unwrap_or_else(|| cohort.bags[0].features.cols);
    let emb_seed = fc.model.emb_seed.unwrap_or(0);
    let seed = fc.run.seed.unwrap_or(1);
    let u = embeddings(&kb, dim, emb_seed)?;
    let names: Vec<String> = kb.phenotypes.iter().map(|p| p.name.clone()).collect();

    let load_student = || -> Result<PamilModel> {
        let path = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::config("this target needs a --checkpoint"))?;
        let m = load_pamil(path)?;
        if m.cfg.n_phenotypes != kb.len() {
            return Err(Error::config(format!(
                "checkpoint has {} phenotypes, knowledge base has {}",
                m.cfg.n_phenotypes,
                kb.len()
            )));
        }
        Ok(m)
    };
    let sample_index = |id: &Option<String>| -> Result<usize> {
        match id {
            None => Ok(0),
            Some(id) => cohort
                .bags
                .iter()
                .position(|b| &b.sample_id == id)
                .ok_or_else(|| Error::Lookup(format!("no sample '{id}' in cohort"))),
        }
    };

    let path;
    match a.what.as_str() {
        "heatmap" => {
            let student = load_student()?;
            let preds = trainer::predict_student(&student, &cohort, &u)?;
            let ids: Vec<String> = cohort.bags.iter().map(|b| b.sample_id.clone()).collect();
            path = out.join("saliency_heatmap.csv");
            explain::export_saliency_heatmap(&path, &ids, &preds.labels, &names, &preds.saliency)?;
        }
        "attention" => {
            let student = load_student()?;
            let i = sample_index(&a.sample)?;
            path = out.join("attention_heatmap.csv");
            explain::export_attention_heatmap(
                &path,
                &student,
                &cohort.bags[i].features,
                &u,
                &names,
                a.top_patches,
            )?;
        }
        "sankey" => {
            let student = load_student()?;
            let preds = trainer::predict_student(&student, &cohort, &u)?;
            path = out.join("sankey.csv");
            explain::export_sankey(
                &path,
                &student,
                &names,
                &cohort.class_names,
                &preds.labels,
                &preds.saliency,
            )?;
        }
        "leakage" => {
            let student = load_student()?;
            let preds = trainer::predict_student(&student, &cohort, &u)?;
            let report =
                explain::leakage_score(&preds.saliency, &preds.labels, cohort.n_classes())?;
            path = out.join("leakage.csv");
            let mut f = std::fs::File::create(&path)?;
            writeln!(f, "phenotype,jsd")?;
            for (name, jsd) in names.iter().zip(&report.per_phenotype_jsd) {
                writeln!(f, "{name},{:.8e}", jsd)?;
            }
            writeln!(f, "concentration,{:.8e}", report.concentration)?;
        }
        "shapley" => {
            let student = load_student()?;
            let preds = trainer::predict_student(&student, &cohort, &u)?;
            let n = kb.len();
            let baseline: Vec<f64> = (0..n)
                .map(|i| {
                    preds.saliency.iter().map(|s| s[i]).sum::<f64>()
                        / preds.saliency.len() as f64
                })
                .collect();
            path = out.join("shapley.csv");
            let mut f = std::fs::File::create(&path)?;
            writeln!(f, "sample_id,class,{}", names.join(","))?;
            for ((bag, s), &pred) in cohort.bags.iter().zip(&preds.saliency).zip(&preds.preds) {
                let phi = explain::phenotype_contributions(&student, s, &baseline, pred)?;
                let vals: Vec<String> = phi.iter().map(|v| format!("{v:.8e}")).collect();
                writeln!(f, "{},{pred},{}", bag.sample_id, vals.join(","))?;
            }
        }
        "genes" => {
            let teacher_path = a
                .teacher
                .as_ref()
                .ok_or_else(|| Error::config("the genes target needs a --teacher checkpoint"))?;
            let teacher = load_gpnn(teacher_path)?;
            if teacher.n_phenotypes() != kb.len() {
                return Err(Error::config(format!(
                    "teacher has {} phenotypes, knowledge base has {}",
                    teacher.n_phenotypes(),
                    kb.len()
                )));
            }
            let profiles = cohort
                .profiles
                .as_ref()
                .ok_or_else(|| Error::Data("cohort has no transcriptome profiles".into()))?;
            let i = sample_index(&a.sample)?;
            let part = partition_genes(&profiles[i], &kb);
            let baseline = mean_partition(profiles.iter().map(|p| partition_genes(p, &kb)));
            path = out.join("gene_contributions.csv");
            let mut f = std::fs::File::create(&path)?;
            writeln!(f, "phenotype,gene,phi")?;
            for (pi, name) in names.iter().enumerate() {
                let contribs = explain::gene_phenotype_contributions(
                    &teacher,
                    &kb,
                    &part,
                    &baseline,
                    pi,
                    a.top_genes,
                )?;
                for c in contribs {
                    writeln!(f, "{name},{},{:.8e}", c.gene, c.phi)?;
                }
            }
        }
        other => return Err(Error::config(format!("unknown explain target '{other}'"))),
    }

    let mut snapshot = fc.clone();
    snapshot.model.dim = Some(dim);
    Ok((
        format!("explain --what {}", a.what),
        snapshot,
        seed,
        vec![path.display().to_string()],
    ))
}

fn mean_partition(parts: impl Iterator<Item = GenePartition>) -> GenePartition {
    let mut acc: Option<GenePartition> = None;
    let mut count = 0usize;
    for p in parts {
        count += 1;
        match &mut acc {
            None => acc = Some(p),
            Some(a) => {
                for (ga, gp) in a.groups.iter_mut().zip(&p.groups) {
                    for (x, y) in ga.iter_mut().zip(gp) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut mean = acc.expect("at least one profile");
    for g in &mut mean.groups {
        for x in g.iter_mut() {
            *x /= count as f64;
        }
    }
    mean
}

/// The gradient-check fixture and gate. Checks the student's full joint loss,
/// the teacher's cross-entropy, and each guidance objective; fails (exit 1)
/// if any max relative error exceeds 1e-4.
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-4;

fn cmd_grad_check(a: GradCheckArgs, fc: &FileConfig, out: &Path) -> Result<CommandOutcome> {
    let seed = a.seed.or(fc.run.seed).unwrap_or(1);
    let results = grad_check_report(seed, a.corrupt)?;
    let path = out.join("grad_check.csv");
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "loss,max_rel_err")?;
    let mut worst: Option<(&str, f64)> = None;
    for (name, err) in &results {
        println!("{name}: max rel err {err:.3e}");
        writeln!(f, "{name},{err:.8e}")?;
        if worst.map(|(_, w)| *err > w).unwrap_or(true) {
            worst = Some((name, *err));
        }
    }
    let snapshot = {
        let mut s = fc.clone();
        s.run.seed = Some(seed);
        s
    };
    if let Some((name, err)) = worst {
        if err > GRAD_CHECK_THRESHOLD {
            return Err(Error::Validation(format!(
                "gradient check failed: {name} max rel err {err:.3e} > {GRAD_CHECK_THRESHOLD:.0e}"
            )));
        }
    }
    Ok((
        "grad-check".into(),
        snapshot,
        seed,
        vec![path.display().to_string()],
    ))
}

/// Max relative gradient error for each loss on a tiny synthetic fixture.
pub fn grad_check_report(seed: u64, corrupt: bool) -> Result<Vec<(&'static str, f64)>> {
    let kb = synthetic_kb(3, 4);
    let dim = 6;
    let u = embeddings(&kb, dim, seed)?;
    let mut scfg = SyntheticConfig::new(2, dim, vec![vec![0.6, 0.3, 0.1], vec![0.1, 0.3, 0.6]]);
    scfg.genes_per_phenotype = 4;
    scfg.patches_min = 3;
    scfg.patches_max = 5;
    scfg.seed = seed;
    let cohort = generate_synthetic_cohort(&kb, &u, &scfg)?;
    let teacher = GpnnModel::init(GpnnConfig::new(dim, 2), &kb, seed)?;
    let student = PamilModel::init(PamilConfig::new(dim, 3, 2), &u, seed)?;
    let targets = trainer::compute_teacher_targets(&teacher, &cohort, &kb)?;
    let bag = &cohort.bags[0];

    let mut results = Vec::new();
    let student_loss = |guidance: Option<GuidanceConfig>, include_base: bool| {
        let model = student.clone();
        let z = targets.z[0].clone();
        let s_hat = targets.s_hat[0].clone();
        let features = bag.features.clone();
        let label = bag.label;
        let u = u.clone();
        move |set: &mut ParamSet, accumulate: bool| -> f64 {
            let mut m = model.clone();
            m.set = set.clone();
            let mut graph = pamil::build_graph(&m, &features, label, &u).unwrap();
            let gvar = guidance
                .as_ref()
                .and_then(|g| trainer::attach_guidance(&mut graph, g, &z, &s_hat));
            let total = match (include_base, gvar) {
                (true, Some(g)) => {
                    let base = graph.tape.add(graph.l_ce, graph.l_contrast);
                    graph.tape.add(base, g)
                }
                (true, None) => graph.tape.add(graph.l_ce, graph.l_contrast),
                (false, Some(g)) => g,
                (false, None) => unreachable!("guidance-only loss needs guidance"),
            };
            if accumulate {
                graph.tape.backward(total);
                for &(idx, var) in &graph.params {
                    let grad = graph.tape.grad(var).clone();
                    set.tensors[idx].grad.add_assign(&grad);
                }
            }
            graph.tape.scalar(total)
        }
    };

    let probe = 40;
    let eps = 1e-5;
    {
        let mut set = student.set.clone();
        let mut f = student_loss(Some(GuidanceConfig::both(GuidanceObjective::L2)), true);
        let err = check_gradients(&mut set, &mut f, probe, eps, seed)?;
        results.push(("pamil_joint", err));
    }
    for (name, obj) in [
        ("guidance_l2", GuidanceObjective::L2),
        ("guidance_l1", GuidanceObjective::L1),
        ("guidance_cl", GuidanceObjective::Cl),
    ] {
        let mut set = student.set.clone();
        let mut f = student_loss(Some(GuidanceConfig::both(obj)), false);
        let err = check_gradients(&mut set, &mut f, probe, eps, seed)?;
        results.push((name, err));
    }
    {
        let profiles = cohort.profiles.as_ref().unwrap();
        let part = partition_genes(&profiles[0], &kb);
        let label = cohort.bags[0].label;
        let model = teacher.clone();
        let mut set = teacher.set.clone();
        let mut f = move |set: &mut ParamSet, accumulate: bool| -> f64 {
            let mut m = model.clone();
            m.set = set.clone();
            let mut graph = gpnn::build_graph(&m, &part, Some(label)).unwrap();
            let l = graph.l_ce.unwrap();
            if accumulate {
                graph.tape.backward(l);
                for &(idx, var) in &graph.params {
                    let grad = graph.tape.grad(var).clone();
                    set.tensors[idx].grad.add_assign(&grad);
                }
            }
            graph.tape.scalar(l)
        };
        let err = check_gradients(&mut set, &mut f, probe, eps, seed)?;
        results.push(("gpnn_ce", err));
    }
    if corrupt {
        // negative control: report an obviously wrong error for the first loss
        results[0].1 += 1.0;
    }
    Ok(results)
}
