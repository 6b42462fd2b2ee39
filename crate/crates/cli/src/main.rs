//! `ccbm`: generate data, train, edit, retrain, compare and benchmark
//! concept bottleneck models from the command line.
//!
//! Numeric settings come from JSON config files (every field optional);
//! flags override them, and the resolved config is echoed into every
//! artifact. Exit codes: 0 success, 1 usage or input error, 2 numerical
//! failure.

mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccbm_core::curvature::CurvatureKind;
use ccbm_core::data::{generate, split, GeneratorConfig, NoiseLevel};
use ccbm_core::editor::{apply_request, edit, ConceptFix, EditConfig, EditRequest};
use ccbm_core::evaluation::{
    evaluate, rank_concepts, run_audit, run_harmful_removal, run_parity, run_periodic,
    run_ratio_sweep, AuditConfig, BenchmarkResult, HarmfulConfig, ParityConfig, PeriodicConfig,
    SweepConfig, SweepTarget,
};
use ccbm_core::model::{Arch, ModelOptions, TrainConfig};
use ccbm_core::oracle::{compare, loo_influence_check, retrain, retrain_for};
use ccbm_core::{par, CcbmError};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::io::{
    load_config, load_dataset, load_model, run_record, save_dataset, save_model, write_json,
    write_text,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CcbmError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "ccbm",
    version,
    about = "Closed-form editing of concept bottleneck models"
)]
struct Cli {
    /// Worker threads. 1 (the default) runs everything on the calling thread.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a synthetic planted-concept dataset.
    Generate(GenerateArgs),
    /// Train a concept bottleneck model.
    Train(TrainArgs),
    /// Apply a closed-form edit to a trained model.
    Edit(EditArgs),
    /// Retrain from scratch on the data an edit request describes.
    Retrain(RetrainArgs),
    /// Compare two models of the same shape on a probe set.
    Compare(CompareArgs),
    /// Rank concepts by the F1 drop their removal edit causes.
    RankConcepts(RankArgs),
    /// Membership-inference audit of a data-removal edit.
    Rmia(RmiaArgs),
    /// Run an experiment protocol against the retraining oracle.
    Bench {
        #[command(subcommand)]
        protocol: BenchCommand,
    },
    /// Edit-vs-retrain error of single-point removal across regularizers.
    LooBound(LooArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Generator config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset (JSON lines); a `.config.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Also write a held-out split here.
    #[arg(long)]
    test_out: Option<PathBuf>,
    /// Fraction of rows moved to `--test-out`.
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of samples.
    #[arg(long)]
    n: Option<usize>,
    /// Input dimension.
    #[arg(long)]
    d_in: Option<usize>,
    /// Number of concepts.
    #[arg(long)]
    k: Option<usize>,
    /// Number of classes.
    #[arg(long)]
    d_o: Option<usize>,
    /// Seed of the hidden concept and label maps.
    #[arg(long)]
    map_seed: Option<u64>,
    #[arg(long)]
    concept_noise: Option<f64>,
    #[arg(long)]
    label_noise: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum ArchKind {
    Linear,
    #[default]
    Mlp,
}

/// Architecture without the data-determined widths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct ArchSpec {
    kind: ArchKind,
    /// Hidden width (MLP only).
    hidden: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            kind: ArchKind::Mlp,
            hidden: 16,
        }
    }
}

impl ArchSpec {
    fn resolve(&self, d_in: usize, k: usize) -> Arch {
        match self.kind {
            ArchKind::Linear => Arch::Linear { d_in, k },
            ArchKind::Mlp => Arch::Mlp {
                d_in,
                hidden: self.hidden,
                k,
            },
        }
    }
}

#[derive(Args, Debug)]
struct ArchArgs {
    /// Concept predictor architecture.
    #[arg(long, value_enum)]
    arch: Option<ArchKind>,
    /// Hidden width of the MLP concept predictor.
    #[arg(long)]
    hidden: Option<usize>,
    /// L2 regularization strength δ.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Gradient-norm stopping tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

impl ArchArgs {
    fn apply(&self, arch: &mut ArchSpec, train: &mut TrainConfig) {
        set(&mut arch.kind, self.arch);
        set(&mut arch.hidden, self.hidden);
        set(&mut train.delta, self.delta);
        set(&mut train.seed, self.seed);
        set(&mut train.max_iter, self.max_iter);
        set(&mut train.tol, self.tol);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct TrainRun {
    arch: ArchSpec,
    train: TrainConfig,
    options: ModelOptions,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config (JSON with `arch`, `train`, `options`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training data (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Output model.
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Held-out data to report metrics on.
    #[arg(long)]
    probe: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArgs,
    /// Threshold concept probabilities at 0.5 before the label predictor.
    #[arg(long)]
    hard_concepts: bool,
    /// Label predictor without bias.
    #[arg(long)]
    pure_linear: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Level {
    /// Correct concept labels (`--fixes id:concept:value,...`).
    ConceptFix,
    /// Remove concepts (`--concepts j,...`).
    ConceptRemove,
    /// Remove samples (`--ids id,...`).
    DataRemove,
    /// Add samples (`--add new.jsonl`).
    DataAdd,
}

#[derive(Args, Debug)]
struct RequestArgs {
    /// Edit granularity.
    #[arg(long, value_enum, required_unless_present = "request")]
    level: Option<Level>,
    /// Sample ids for data removal.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<u64>,
    /// Concept indices for concept removal.
    #[arg(long, value_delimiter = ',')]
    concepts: Vec<usize>,
    /// Concept-label corrections as `id:concept:value`.
    #[arg(long, value_delimiter = ',')]
    fixes: Vec<String>,
    /// Samples to add (JSON lines).
    #[arg(long)]
    add: Option<PathBuf>,
    /// Full edit request (JSON) instead of `--level` and its flags.
    #[arg(long, conflicts_with = "level")]
    request: Option<PathBuf>,
}

fn parse_fix(s: &str) -> CliResult<ConceptFix> {
    let bad = || CliError::Usage(format!("malformed fix '{s}', expected id:concept:value"));
    let parts: Vec<&str> = s.split(':').collect();
    let [id, concept, value] = parts.as_slice() else {
        return Err(bad());
    };
    Ok(ConceptFix {
        id: id.trim().parse().map_err(|_| bad())?,
        concept: concept.trim().parse().map_err(|_| bad())?,
        value: value.trim().parse().map_err(|_| bad())?,
    })
}

impl RequestArgs {
    fn resolve(&self) -> CliResult<EditRequest> {
        if let Some(path) = &self.request {
            return load_request(path);
        }
        let need =
            |flag: &str, level: &str| CliError::Usage(format!("--level {level} needs {flag}"));
        let req = match self.level.expect("clap enforces --level or --request") {
            Level::ConceptFix => {
                if self.fixes.is_empty() {
                    return Err(need("--fixes", "concept-fix"));
                }
                EditRequest::ConceptLabelFix {
                    fixes: self
                        .fixes
                        .iter()
                        .map(|s| parse_fix(s))
                        .collect::<CliResult<_>>()?,
                }
            }
            Level::ConceptRemove => {
                if self.concepts.is_empty() {
                    return Err(need("--concepts", "concept-remove"));
                }
                EditRequest::ConceptRemoval {
                    concepts: self.concepts.iter().copied().collect(),
                }
            }
            Level::DataRemove => {
                if self.ids.is_empty() {
                    return Err(need("--ids", "data-remove"));
                }
                EditRequest::DataRemoval {
                    ids: self.ids.clone(),
                }
            }
            Level::DataAdd => {
                let path = self.add.as_ref().ok_or_else(|| need("--add", "data-add"))?;
                EditRequest::data_addition(&load_dataset(path)?)
            }
        };
        Ok(req)
    }
}

fn load_request(path: &Path) -> CliResult<EditRequest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("malformed request {}: {e}", path.display())))
}

#[derive(Args, Debug)]
struct CurvatureArgs {
    /// Curvature used by the edit.
    #[arg(long, value_parser = parse_kind)]
    curvature: Option<CurvatureKind>,
    /// Per-layer EK-FAC damping λ_l (defaults to δ).
    #[arg(long, value_delimiter = ',')]
    layer_damping: Vec<f64>,
}

fn parse_kind(s: &str) -> Result<CurvatureKind, String> {
    s.parse().map_err(|e: CcbmError| e.to_string())
}

impl CurvatureArgs {
    fn apply(&self, cfg: &mut EditConfig) {
        set(&mut cfg.curvature.kind, self.curvature);
        if !self.layer_damping.is_empty() {
            cfg.curvature.layer_damping = Some(self.layer_damping.clone());
        }
    }
}

#[derive(Args, Debug)]
struct EditArgs {
    /// Edit config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model to edit.
    #[arg(long, default_value = "model.json")]
    model: PathBuf,
    /// The data the model was trained on.
    #[arg(long)]
    data: PathBuf,
    /// Output model.
    #[arg(long, default_value = "edited.json")]
    out: PathBuf,
    /// Also write the full edit record (terms and timings) here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Held-out data to report metrics on.
    #[arg(long)]
    probe: Option<PathBuf>,
    #[command(flatten)]
    request: RequestArgs,
    #[command(flatten)]
    curvature: CurvatureArgs,
}

#[derive(Args, Debug)]
struct RetrainArgs {
    /// Model whose training settings are reused.
    #[arg(long, default_value = "model.json")]
    model: PathBuf,
    /// The data the model was trained on.
    #[arg(long)]
    data: PathBuf,
    /// Output model.
    #[arg(long, default_value = "retrained.json")]
    out: PathBuf,
    /// Held-out data to report metrics on.
    #[arg(long)]
    probe: Option<PathBuf>,
    #[command(flatten)]
    request: RequestArgs,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// First model (typically the edited one).
    #[arg(long)]
    a: PathBuf,
    /// Second model (typically the retrained one).
    #[arg(long)]
    b: PathBuf,
    /// Probe data.
    #[arg(long)]
    probe: PathBuf,
    /// Write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RankArgs {
    /// Edit config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "model.json")]
    model: PathBuf,
    /// The data the model was trained on.
    #[arg(long)]
    data: PathBuf,
    /// Validation data the F1 drop is measured on.
    #[arg(long)]
    val: PathBuf,
    /// Write the ranking here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    curvature: CurvatureArgs,
}

#[derive(Args, Debug)]
struct SetupArgs {
    /// Protocol config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// L2 regularization strength δ.
    #[arg(long)]
    delta: Option<f64>,
    #[command(flatten)]
    curvature: CurvatureArgs,
}

impl SetupArgs {
    fn apply(&self, setup: &mut ccbm_core::evaluation::BenchSetup) {
        set(&mut setup.seed, self.seed);
        set(&mut setup.train.delta, self.delta);
        self.curvature.apply(&mut setup.edit);
    }
}

#[derive(Args, Debug)]
struct RmiaArgs {
    #[command(flatten)]
    setup: SetupArgs,
    /// Number of training members removed and audited.
    #[arg(long)]
    removed: Option<usize>,
    /// Skip the retrained reference model.
    #[arg(long)]
    no_retrain: bool,
    /// Write the report here.
    #[arg(long, default_value = "rmia.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchOut {
    /// Directory for `<protocol>.json`, `.md` and `.csv`.
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PeriodicLevel {
    ConceptLabel,
    DataLabel,
}

#[derive(Subcommand, Debug)]
enum BenchCommand {
    /// Inject noise at three granularities and clean it up once.
    Harmful {
        #[command(flatten)]
        setup: SetupArgs,
        /// Noise ratio.
        #[arg(long)]
        ratio: Option<f64>,
        #[command(flatten)]
        out: BenchOut,
    },
    /// Clean injected noise up over several rounds, editing cumulatively.
    Periodic {
        #[command(flatten)]
        setup: SetupArgs,
        #[arg(long)]
        rounds: Option<usize>,
        /// Share cleaned per round.
        #[arg(long)]
        per_round_ratio: Option<f64>,
        #[arg(long, value_enum)]
        level: Option<PeriodicLevel>,
        #[command(flatten)]
        out: BenchOut,
    },
    /// One edit per setting (concept-label fix, concept removal, data
    /// removal, data addition) against retraining.
    Parity {
        #[command(flatten)]
        setup: SetupArgs,
        #[command(flatten)]
        out: BenchOut,
    },
    /// Remove growing amounts of data or concepts.
    Sweep {
        #[command(flatten)]
        setup: SetupArgs,
        /// What to remove.
        #[arg(long, value_enum)]
        target: Option<SweepTargetArg>,
        #[command(flatten)]
        out: BenchOut,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepTargetArg {
    Data,
    Concepts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct LooRun {
    arch: ArchSpec,
    train: TrainConfig,
    /// Sample removed; defaults to the first row.
    id: Option<u64>,
    deltas: Vec<f64>,
    curvature: CurvatureKind,
}

impl Default for LooRun {
    fn default() -> Self {
        LooRun {
            arch: ArchSpec {
                kind: ArchKind::Linear,
                hidden: 16,
            },
            train: TrainConfig::default(),
            id: None,
            deltas: vec![0.01, 0.1, 1.0],
            curvature: CurvatureKind::ExactHessian,
        }
    }
}

#[derive(Args, Debug)]
struct LooArgs {
    /// Config (JSON with `arch`, `train`, `id`, `deltas`, `curvature`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Sample id to remove.
    #[arg(long)]
    id: Option<u64>,
    /// Regularizer grid.
    #[arg(long, value_delimiter = ',')]
    deltas: Vec<f64>,
    #[arg(long, value_parser = parse_kind)]
    curvature: Option<CurvatureKind>,
    #[command(flatten)]
    arch: ArchArgs,
    /// Write the table here.
    #[arg(long, default_value = "loo-bound.json")]
    out: PathBuf,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn metrics_line(name: &str, m: ccbm_core::evaluation::Metrics) -> String {
    format!("{name}: accuracy {:.4}, F1 {:.4}", m.accuracy, m.f1)
}

fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    let mut g: GeneratorConfig = load_config(a.config.as_deref())?;
    set(&mut g.seed, a.seed);
    set(&mut g.n, a.n);
    set(&mut g.d_in, a.d_in);
    set(&mut g.k, a.k);
    set(&mut g.d_o, a.d_o);
    set(&mut g.map_seed, a.map_seed);
    set(&mut g.concept_noise, a.concept_noise);
    set(&mut g.label_noise, a.label_noise);
    let d = generate(&g)?;
    let test_fraction = a.test_out.as_ref().map(|_| a.test_fraction);
    let run = run_record(
        "generate",
        &json!({ "generator": g, "test_fraction": test_fraction }),
    )?;
    match &a.test_out {
        Some(test_path) => {
            let (train, test) = split(&d, 1.0 - a.test_fraction, g.seed)?;
            save_dataset(&train, &a.out, &run)?;
            save_dataset(&test, test_path, &run)?;
            println!(
                "wrote {} rows to {} and {} rows to {}",
                train.len(),
                a.out.display(),
                test.len(),
                test_path.display()
            );
        }
        None => {
            save_dataset(&d, &a.out, &run)?;
            println!("wrote {} rows to {}", d.len(), a.out.display());
        }
    }
    let mut counts = vec![0usize; d.n_classes];
    for &y in &d.labels {
        counts[y] += 1;
    }
    println!(
        "{} inputs, {} concepts, class counts {:?}",
        d.d_in(),
        d.n_concepts(),
        counts
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut run: TrainRun = load_config(a.config.as_deref())?;
    a.arch.apply(&mut run.arch, &mut run.train);
    run.options.hard_concepts |= a.hard_concepts;
    run.options.pure_linear |= a.pure_linear;
    let d = load_dataset(&a.data)?;
    let arch = run.arch.resolve(d.d_in(), d.n_concepts());
    let (model, ms) = retrain(&d, arch, &run.train, run.options)?;
    save_model(&model, &a.out, &run_record("train", &run)?)?;
    println!(
        "trained {arch:?} on {} rows in {ms:.1} ms -> {}",
        d.len(),
        a.out.display()
    );
    for (what, fit) in [
        ("concept", &model.meta.concept_fit),
        ("label", &model.meta.label_fit),
    ] {
        println!(
            "{what} predictor: {} iterations, loss {:.6}, |grad| {:.2e}{}",
            fit.iterations,
            fit.loss,
            fit.grad_norm,
            if fit.converged {
                ""
            } else {
                " (not converged)"
            }
        );
    }
    println!("{}", metrics_line("train", evaluate(&model, &d)?));
    if let Some(p) = &a.probe {
        println!(
            "{}",
            metrics_line("probe", evaluate(&model, &load_dataset(p)?)?)
        );
    }
    Ok(())
}

/// Probe rows restricted to the concepts a model still has.
fn probe_for(path: &Path, req: &EditRequest) -> CliResult<ccbm_core::data::Dataset> {
    let probe = load_dataset(path)?;
    Ok(match req {
        EditRequest::ConceptRemoval { .. } => apply_request(&probe, req)?,
        _ => probe,
    })
}

fn cmd_edit(a: &EditArgs) -> CliResult<()> {
    let mut cfg: EditConfig = load_config(a.config.as_deref())?;
    a.curvature.apply(&mut cfg);
    let model = load_model(&a.model)?;
    let data = load_dataset(&a.data)?;
    let req = a.request.resolve()?;
    let out = edit(&model, &data, &req, &cfg)?;
    let run = run_record(
        "edit",
        &json!({ "edit": cfg, "request": req, "model": a.model, "data": a.data }),
    )?;
    save_model(&out.model, &a.out, &run)?;
    if let Some(r) = &a.report {
        write_json(r, &json!({ "run": run, "outcome": out.to_record() }))?;
    }
    println!(
        "{:?} edit with {} in {:.2} ms -> {}",
        out.kind,
        out.curvature,
        out.total_ms(),
        a.out.display()
    );
    for (stage, ms) in &out.timings {
        println!("  {stage}: {ms:.2} ms");
    }
    for w in &out.warnings {
        println!("warning: {w}");
    }
    let after = apply_request(&data, &req)?;
    println!(
        "{}",
        metrics_line("train (edited data)", evaluate(&out.model, &after)?)
    );
    if let Some(p) = &a.probe {
        println!(
            "{}",
            metrics_line("probe", evaluate(&out.model, &probe_for(p, &req)?)?)
        );
    }
    Ok(())
}

fn cmd_retrain(a: &RetrainArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let data = load_dataset(&a.data)?;
    let req = a.request.resolve()?;
    let (re, ms) = retrain_for(&model, &data, &req)?;
    let run = run_record(
        "retrain",
        &json!({ "train": model.meta.config, "request": req, "model": a.model, "data": a.data }),
    )?;
    save_model(&re, &a.out, &run)?;
    println!("retrained in {ms:.1} ms -> {}", a.out.display());
    let after = apply_request(&data, &req)?;
    println!(
        "{}",
        metrics_line("train (edited data)", evaluate(&re, &after)?)
    );
    if let Some(p) = &a.probe {
        println!(
            "{}",
            metrics_line("probe", evaluate(&re, &probe_for(p, &req)?)?)
        );
    }
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> CliResult<()> {
    let (ma, mb) = (load_model(&a.a)?, load_model(&a.b)?);
    let mut probe = load_dataset(&a.probe)?;
    if probe.n_concepts() != ma.n_concepts() {
        // Probe written before a concept removal: the edited models never
        // read concept labels, so only the shape check needs them to agree.
        let keep = ma.n_concepts();
        probe.concepts.iter_mut().for_each(|c| c.truncate(keep));
    }
    let report = compare(&ma, &mb, &probe)?;
    if let Some(out) = &a.out {
        let run = run_record("compare", &json!({ "a": a.a, "b": a.b, "probe": a.probe }))?;
        write_json(out, &json!({ "run": run, "report": report }))?;
    }
    println!(
        "parameter distance: concept {:.6e}, label {:.6e}",
        report.concept_param_distance, report.label_param_distance
    );
    println!(
        "functional distance (mean symmetric KL): {:.6e}",
        report.functional_distance
    );
    println!("prediction agreement: {:.4}", report.agreement);
    println!(
        "F1: a {:.4}, b {:.4}, gap {:.4}",
        report.f1_a,
        report.f1_b,
        (report.f1_a - report.f1_b).abs()
    );
    Ok(())
}

fn cmd_rank(a: &RankArgs) -> CliResult<()> {
    let mut cfg: EditConfig = load_config(a.config.as_deref())?;
    a.curvature.apply(&mut cfg);
    let model = load_model(&a.model)?;
    let (data, val) = (load_dataset(&a.data)?, load_dataset(&a.val)?);
    let ranked = rank_concepts(&model, &data, &val, &cfg)?;
    if let Some(out) = &a.out {
        let run = run_record(
            "rank-concepts",
            &json!({ "edit": cfg, "model": a.model, "data": a.data, "val": a.val }),
        )?;
        let rows: Vec<_> = ranked
            .iter()
            .map(|(j, s)| json!({ "concept": j, "score": s }))
            .collect();
        write_json(out, &json!({ "run": run, "ranking": rows }))?;
    }
    println!("| Rank | Concept | F1 drop |\n|---|---|---|");
    for (r, (j, s)) in ranked.iter().enumerate() {
        println!("| {} | {j} | {s:.4} |", r + 1);
    }
    Ok(())
}

fn cmd_rmia(a: &RmiaArgs) -> CliResult<()> {
    let mut cfg: AuditConfig = load_config(a.setup.config.as_deref())?;
    a.setup.apply(&mut cfg.setup);
    set(&mut cfg.removed, a.removed);
    cfg.with_retrain &= !a.no_retrain;
    let report = run_audit(&cfg)?;
    write_json(&a.out, &report)?;
    println!("| Model | mean RMIA removed | mean RMIA non-member | gap |\n|---|---|---|---|");
    let sides = [
        ("before", Some(&report.before)),
        ("CCBM", Some(&report.after_edit)),
        ("retrain", report.after_retrain.as_ref()),
    ];
    for (name, side) in sides {
        if let Some(s) = side {
            println!(
                "| {name} | {:.4} | {:.4} | {:.4} |",
                s.mean_audited,
                s.mean_non_member,
                s.gap()
            );
        }
    }
    println!(
        "edit took {:.2} ms; gap shrank: {}",
        report.edit_ms,
        report.gap_shrank()
    );
    Ok(())
}

fn write_bench(result: &BenchmarkResult, dir: &Path) -> CliResult<()> {
    let stem = dir.join(&result.protocol);
    write_text(&stem.with_extension("json"), &(result.to_json()? + "\n"))?;
    write_text(&stem.with_extension("md"), &result.to_markdown())?;
    write_text(&stem.with_extension("csv"), &result.to_csv()?)?;
    print!("{}", result.to_markdown());
    println!("\nwrote {}.{{json,md,csv}}", stem.display());
    Ok(())
}

fn cmd_bench(p: &BenchCommand) -> CliResult<()> {
    let (result, out) = match p {
        BenchCommand::Harmful { setup, ratio, out } => {
            let mut cfg: HarmfulConfig = load_config(setup.config.as_deref())?;
            setup.apply(&mut cfg.setup);
            set(&mut cfg.ratio, *ratio);
            (run_harmful_removal(&cfg)?, out)
        }
        BenchCommand::Periodic {
            setup,
            rounds,
            per_round_ratio,
            level,
            out,
        } => {
            let mut cfg: PeriodicConfig = load_config(setup.config.as_deref())?;
            setup.apply(&mut cfg.setup);
            set(&mut cfg.rounds, *rounds);
            set(&mut cfg.per_round_ratio, *per_round_ratio);
            set(
                &mut cfg.level,
                level.map(|l| match l {
                    PeriodicLevel::ConceptLabel => NoiseLevel::ConceptLabel,
                    PeriodicLevel::DataLabel => NoiseLevel::DataLabel,
                }),
            );
            (run_periodic(&cfg)?, out)
        }
        BenchCommand::Parity { setup, out } => {
            let mut cfg: ParityConfig = load_config(setup.config.as_deref())?;
            setup.apply(&mut cfg.setup);
            (run_parity(&cfg)?, out)
        }
        BenchCommand::Sweep { setup, target, out } => {
            let mut cfg: SweepConfig = load_config(setup.config.as_deref())?;
            setup.apply(&mut cfg.setup);
            set(
                &mut cfg.target,
                target.map(|t| match t {
                    SweepTargetArg::Data => SweepTarget::Data,
                    SweepTargetArg::Concepts => SweepTarget::Concepts,
                }),
            );
            (run_ratio_sweep(&cfg)?, out)
        }
    };
    write_bench(&result, &out.out)
}

fn cmd_loo(a: &LooArgs) -> CliResult<()> {
    let mut run: LooRun = load_config(a.config.as_deref())?;
    a.arch.apply(&mut run.arch, &mut run.train);
    set(&mut run.id, a.id.map(Some));
    set(&mut run.curvature, a.curvature);
    if !a.deltas.is_empty() {
        run.deltas = a.deltas.clone();
    }
    let d = load_dataset(&a.data)?;
    let id = match run.id {
        Some(id) => id,
        None => *d
            .ids
            .first()
            .ok_or_else(|| CliError::Usage("dataset is empty".into()))?,
    };
    run.id = Some(id);
    let arch = run.arch.resolve(d.d_in(), d.n_concepts());
    let rows = loo_influence_check(&d, arch, &run.train, id, &run.deltas, run.curvature)?;
    write_json(
        &a.out,
        &json!({ "run": run_record("loo-bound", &run)?, "rows": rows }),
    )?;
    println!("| δ | ‖e−r‖ | ‖o−r‖ | ‖e−r‖/‖r‖ | label error |\n|---|---|---|---|---|");
    for r in &rows {
        println!(
            "| {} | {:.3e} | {:.3e} | {:.3e} | {:.3e} |",
            r.delta, r.concept_error, r.concept_shift, r.concept_relative, r.label_error
        );
    }
    Ok(())
}

fn configure_threads(jobs: u16) -> CliResult<()> {
    if jobs == 1 {
        par::set_parallel(false);
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.into())
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads(cli.jobs)?;
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Edit(a) => cmd_edit(a),
        Command::Retrain(a) => cmd_retrain(a),
        Command::Compare(a) => cmd_compare(a),
        Command::RankConcepts(a) => cmd_rank(a),
        Command::Rmia(a) => cmd_rmia(a),
        Command::Bench { protocol } => cmd_bench(protocol),
        Command::LooBound(a) => cmd_loo(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CCBM_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
