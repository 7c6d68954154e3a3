//! Command implementations behind the `pinnopf` binary.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pinnopf::grid::{bundled, compute_ptdf, load_case, GridCase, PtdfMatrix};
use pinnopf::pinn::{evaluate, load_model, save_model, train, NetworkParams, TrainConfig, Variant};
use pinnopf::sampling::{build_dataset_parallel, input_domain, load_dataset, save_dataset, Dataset, Split};
use pinnopf::verifier::{
    worst_case_distance, worst_case_gen_violation, worst_case_line_violation, worst_case_suboptimality,
    MilpOptions, VerifyOptions, WorstCase, WorstCaseKind,
};

use config::{config_hash, require_seed, RunConfig};
use report::{
    EvalRow, EvaluationFile, Provenance, TrainCard, ValidityRow, VerificationFile, WorstCaseRow,
};

/// Bad invocation or input; exits with code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const EXIT_OK: u8 = 0;
pub const EXIT_NUMERICAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_GAP: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "pinnopf", version, about = "Physics-informed OPF networks with worst-case guarantees")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Case file or bundled case name (case3, case5, case39).
    #[arg(long)]
    pub case: Option<String>,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; 1 is the deterministic reference mode.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the size and structure of a case.
    InspectCase {
        #[command(flatten)]
        common: Common,
    },
    /// Sample demands and label them with OPF optima.
    Dataset {
        #[command(flatten)]
        common: Common,
        /// Total number of samples.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a network on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Average prediction metrics of one or more models on a dataset pool.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// `unseen` or `labeled`.
        #[arg(long, default_value = "unseen")]
        pool: String,
    },
    /// Worst-case guarantees of a model over the demand domain.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated: gen, line, distance, suboptimality.
        #[arg(long, value_delimiter = ',')]
        objectives: Option<Vec<String>>,
        #[arg(long)]
        node_limit: Option<usize>,
    },
    /// Aggregate evaluation and verification outputs into tables.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
    },
}

/// Maps an error to its exit code.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if let Some(e) = err.downcast_ref::<pinnopf::Error>() {
        use pinnopf::Error::*;
        return match e {
            Numerical(_) | Infeasible(_) | Diverged(_) => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() || err.downcast_ref::<serde_json::Error>().is_some() {
        return EXIT_USAGE;
    }
    EXIT_NUMERICAL
}

pub fn run(cli: Cli) -> ExitCode {
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::InspectCase { common } => cmd_inspect(&common),
        Command::Dataset { common, n } => cmd_dataset(&common, n),
        Command::Train {
            common,
            dataset,
            variant,
            epochs,
        } => cmd_train(&common, &dataset, variant.as_deref(), epochs),
        Command::Evaluate {
            common,
            dataset,
            models,
            pool,
        } => cmd_evaluate(&common, &dataset, &models, &pool),
        Command::Verify {
            common,
            model,
            objectives,
            node_limit,
        } => cmd_verify(&common, &model, objectives, node_limit),
        Command::Report { common, inputs } => cmd_report(&common, &inputs),
    }
}

struct Loaded {
    name: String,
    case: GridCase,
    ptdf: PtdfMatrix,
}

fn load_case_arg(common: &Common, cfg: &RunConfig) -> Result<Loaded> {
    let Some(name) = common.case.clone().or_else(|| cfg.case.clone()) else {
        bail!(UsageError("no case given (--case or `case` in the config)".into()));
    };
    let case = if let Some(text) = bundled(&name) {
        pinnopf::grid::parse_case(text)?
    } else {
        let path = Path::new(&name);
        if !path.exists() {
            bail!(UsageError(format!("case file `{name}` does not exist")));
        }
        load_case(BufReader::new(File::open(path)?))?
    };
    let ptdf = compute_ptdf(&case)?;
    Ok(Loaded { name, case, ptdf })
}

fn require_out(common: &Common) -> Result<&Path> {
    match &common.out {
        Some(p) => Ok(p),
        None => bail!(UsageError("--out is required".into())),
    }
}

fn open_input(path: &Path, what: &str) -> Result<BufReader<File>> {
    let f = File::open(path).map_err(|e| UsageError(format!("cannot open {what} `{}`: {e}", path.display())))?;
    Ok(BufReader::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write `{}`", path.display()))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn file_label(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn cmd_inspect(common: &Common) -> Result<u8> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let l = load_case_arg(common, &cfg)?;
    let c = &l.case;
    println!("case            {}", c.name);
    println!("buses           {}", c.n_bus);
    println!("loads           {}", c.n_load());
    println!("generators      {}", c.n_gen());
    println!("lines           {}", c.n_line());
    println!("slack bus       {}", c.slack_bus + 1);
    println!("max loading     {:.2} MW", c.max_loading());
    println!("capacity        {:.2} MW", c.total_capacity());
    println!("OPF LP          {} variables, {} rows", c.n_gen(), 1 + 2 * c.n_line());
    println!("multipliers     {}", c.n_duals());
    println!("max |PTDF|      {:.6}", l.ptdf.max_abs());
    if let Some(out) = &common.out {
        std::fs::write(out, c.to_toml())?;
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct DatasetSettings<'a> {
    case: &'a str,
    n_total: usize,
    labeled_frac: f64,
    collocation_frac: f64,
    seed: u64,
}

fn cmd_dataset(common: &Common, n: Option<usize>) -> Result<u8> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let l = load_case_arg(common, &cfg)?;
    let out = require_out(common)?;
    let seed = require_seed(common.seed, cfg.dataset.seed, "dataset")?;
    let Some(n_total) = n.or(cfg.dataset.n_total) else {
        bail!(UsageError("dataset needs a sample count (--n or dataset.n_total)".into()));
    };
    let d = Split::default();
    let split = Split {
        labeled_frac: cfg.dataset.labeled_frac.unwrap_or(d.labeled_frac),
        collocation_frac: cfg.dataset.collocation_frac.unwrap_or(d.collocation_frac),
    };
    let ds = build_dataset_parallel(&l.case, &l.ptdf, n_total, split, seed, common.threads)?;
    let settings = DatasetSettings {
        case: &l.name,
        n_total,
        labeled_frac: split.labeled_frac,
        collocation_frac: split.collocation_frac,
        seed,
    };
    save_dataset(&ds, BufWriter::new(File::create(out)?))?;
    println!(
        "dataset {}: {} labeled, {} collocation, {} unseen, {} infeasible redraws, config {}",
        out.display(),
        ds.labeled.len(),
        ds.collocation.len(),
        ds.unseen_test.len(),
        ds.infeasible_redraws,
        &config_hash(&settings)[..12]
    );
    Ok(EXIT_OK)
}

fn read_dataset(path: &Path, case: &GridCase) -> Result<Dataset> {
    let ds = load_dataset(open_input(path, "dataset")?)?;
    if ds.input_domain.len() != case.n_load() {
        bail!(UsageError(format!(
            "dataset has {} demand dimensions but the case has {} loads",
            ds.input_domain.len(),
            case.n_load()
        )));
    }
    Ok(ds)
}

fn cmd_train(common: &Common, dataset: &Path, variant: Option<&str>, epochs: Option<usize>) -> Result<u8> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let l = load_case_arg(common, &cfg)?;
    let out = require_out(common)?;
    let ds = read_dataset(dataset, &l.case)?;
    let mut tc: TrainConfig = cfg.train.resolve();
    tc.seed = require_seed(common.seed, cfg.train.seed, "train")?;
    if let Some(v) = variant {
        tc.variant = v
            .parse::<Variant>()
            .map_err(|e| UsageError(format!("{e}; expected one of plain, pg_abs, pg_sqr, pg_exp, kkt")))?;
    }
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    tc.validate().map_err(|e| UsageError(e.to_string()))?;
    if tc.variant == Variant::Plain && !ds.collocation.is_empty() {
        log::info!("plain variant: {} collocation points are ignored", ds.collocation.len());
    }
    let (params, history) = train(&ds, &l.case, &l.ptdf, &tc)?;
    save_model(&params, BufWriter::new(File::create(out)?))?;

    let hash = config_hash(&(&l.name, &tc, dataset_fingerprint(&ds)));
    let card = TrainCard::new(
        Provenance::new("train", &l.name, &hash, [("dataset", ds.seed), ("train", tc.seed)]),
        tc.clone(),
        &history,
    );
    write_json(&sidecar(out, ".train.json"), &card)?;
    let last = history.train.last().copied().unwrap_or_default();
    println!(
        "model {}: variant {}, {} epochs, best epoch {}, final train loss {:.6e}",
        out.display(),
        tc.variant,
        history.train.len(),
        history.best_epoch.map_or("-".to_string(), |e| e.to_string()),
        last.total
    );
    Ok(EXIT_OK)
}

/// Short digest of a dataset's serialised form.
fn dataset_fingerprint(ds: &Dataset) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(ds.to_text().as_bytes()))[..16].to_string()
}

fn read_model(path: &Path, case: &GridCase) -> Result<(NetworkParams, Option<TrainCard>)> {
    let params = load_model(open_input(path, "model")?)?;
    if params.input_dim() != case.n_load()
        || params.pg_head.output_dim() != case.n_gen()
        || params.dual_head.output_dim() != case.n_duals()
    {
        bail!(UsageError(format!(
            "model `{}` does not match the case dimensions",
            path.display()
        )));
    }
    let card_path = sidecar(path, ".train.json");
    let card = if card_path.exists() {
        Some(serde_json::from_reader(open_input(&card_path, "training card")?)?)
    } else {
        None
    };
    Ok((params, card))
}

fn cmd_evaluate(common: &Common, dataset: &Path, models: &[PathBuf], pool: &str) -> Result<u8> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let l = load_case_arg(common, &cfg)?;
    let ds = read_dataset(dataset, &l.case)?;
    let points = match pool {
        "unseen" => &ds.unseen_test,
        "labeled" => &ds.labeled,
        other => bail!(UsageError(format!("unknown pool `{other}`; expected unseen or labeled"))),
    };
    let mut rows = Vec::new();
    let mut seeds = BTreeMap::new();
    seeds.insert("dataset".to_string(), ds.seed);
    for path in models {
        let (params, card) = read_model(path, &l.case)?;
        let ev = evaluate(&params, points, &l.case, &l.ptdf)?;
        rows.push(EvalRow::new(file_label(path), card.as_ref(), pool, &ev));
    }
    let hash = config_hash(&(&l.name, pool, dataset_fingerprint(&ds), &rows));
    let file = EvaluationFile {
        kind: "evaluation".into(),
        provenance: Provenance::with_seeds("evaluate", &l.name, &hash, seeds),
        rows,
    };
    print!("{}", report::evaluation_table(&file.rows));
    if let Some(out) = &common.out {
        write_json(out, &file)?;
    }
    Ok(EXIT_OK)
}

fn parse_objectives(list: &[String]) -> Result<Vec<WorstCaseKind>> {
    let mut kinds = Vec::new();
    for item in list {
        let k = match item.trim() {
            "gen" | "gen_violation" => WorstCaseKind::GenViolation,
            "line" | "line_violation" => WorstCaseKind::LineViolation,
            "distance" => WorstCaseKind::Distance,
            "suboptimality" | "subopt" => WorstCaseKind::Suboptimality,
            other => bail!(UsageError(format!(
                "unknown objective `{other}`; expected gen, line, distance or suboptimality"
            ))),
        };
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    if kinds.is_empty() {
        bail!(UsageError("no verification objectives given".into()));
    }
    Ok(kinds)
}

#[derive(Serialize, Deserialize)]
struct TimingFile {
    wall_time_s: BTreeMap<String, f64>,
}

fn cmd_verify(
    common: &Common,
    model: &Path,
    objectives: Option<Vec<String>>,
    node_limit: Option<usize>,
) -> Result<u8> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let l = load_case_arg(common, &cfg)?;
    let (params, card) = read_model(model, &l.case)?;
    let list = objectives
        .or(cfg.verify.objectives.clone())
        .unwrap_or_else(|| vec!["gen".into(), "line".into()]);
    let kinds = parse_objectives(&list)?;
    let node_limit = node_limit.or(cfg.verify.node_limit).unwrap_or(MilpOptions::default().node_limit);
    if node_limit == 0 {
        bail!(UsageError("node limit must be at least 1".into()));
    }
    let options = VerifyOptions {
        milp: MilpOptions {
            node_limit,
            ..MilpOptions::default()
        },
        threads: common.threads.max(1),
        ..VerifyOptions::default()
    };
    let domain = input_domain(&l.case);
    let max_loading = l.case.max_loading();

    let mut results = Vec::new();
    let mut timing = BTreeMap::new();
    for kind in &kinds {
        let start = Instant::now();
        let wc: WorstCase = match kind {
            WorstCaseKind::GenViolation => worst_case_gen_violation(&params, &l.case, &domain, &options)?,
            WorstCaseKind::LineViolation => {
                worst_case_line_violation(&params, &l.case, &l.ptdf, &domain, &options)?
            }
            WorstCaseKind::Distance => worst_case_distance(&params, &l.case, &l.ptdf, &domain, &options)?,
            WorstCaseKind::Suboptimality => {
                worst_case_suboptimality(&params, &l.case, &l.ptdf, &domain, &options)?
            }
        };
        timing.insert(kind.name().to_string(), start.elapsed().as_secs_f64());
        results.push(WorstCaseRow::new(&wc, max_loading));
    }

    let mut seeds = BTreeMap::new();
    if let Some(c) = &card {
        seeds.extend(c.provenance.seeds.clone());
    }
    let hash = config_hash(&(&l.name, file_label(model), &list, node_limit, params.to_text()));
    let file = VerificationFile {
        kind: "verification".into(),
        provenance: Provenance::with_seeds("verify", &l.name, &hash, seeds),
        model: file_label(model),
        variant: card.as_ref().map(|c| c.config.variant.name().to_string()),
        max_loading_mw: max_loading,
        node_limit,
        results,
    };
    print!("{}", report::verification_table(&file));
    if let Some(out) = &common.out {
        write_json(out, &file)?;
        write_json(&sidecar(out, ".timing.json"), &TimingFile { wall_time_s: timing })?;
    }
    let unproven = file.results.iter().any(|r| !r.proven());
    Ok(if unproven { EXIT_GAP } else { EXIT_OK })
}

fn cmd_report(common: &Common, inputs: &[PathBuf]) -> Result<u8> {
    if inputs.is_empty() {
        bail!(UsageError("report needs at least one --input".into()));
    }
    let out = require_out(common)?;
    let mut evaluations = Vec::new();
    let mut verifications = Vec::new();
    for path in inputs {
        let value: serde_json::Value = serde_json::from_reader(open_input(path, "report input")?)
            .map_err(|e| UsageError(format!("`{}` is not JSON: {e}", path.display())))?;
        match value.get("kind").and_then(|k| k.as_str()) {
            Some("evaluation") => evaluations.push(serde_json::from_value::<EvaluationFile>(value)?),
            Some("verification") => verifications.push(serde_json::from_value::<VerificationFile>(value)?),
            _ => bail!(UsageError(format!(
                "`{}` is neither an evaluation nor a verification output",
                path.display()
            ))),
        }
    }
    let bundle = report::aggregate(&evaluations, &verifications);
    std::fs::create_dir_all(out)?;
    write_json(&out.join("report.json"), &bundle)?;
    std::fs::write(out.join("report.md"), report::markdown(&bundle))?;
    println!("report written to {}", out.display());
    Ok(EXIT_OK)
}

/// Row label for a training variant.
pub fn variant_label(v: Option<&str>) -> String {
    match v {
        Some("plain") => "NN".into(),
        Some("pg_abs") => "Pg Abs".into(),
        Some("pg_sqr") => "Pg Sqr".into(),
        Some("pg_exp") => "Pg Exp".into(),
        Some("kkt") => "KKT".into(),
        Some(other) => other.into(),
        None => "unlabelled".into(),
    }
}

pub(crate) fn validity_row(wc: &WorstCase) -> ValidityRow {
    ValidityRow {
        passed: wc.valid,
        min_big_m_slack: wc.validity.min_big_m_slack,
        max_complementarity: wc.validity.max_complementarity,
        max_relu_error: wc.validity.max_relu_error,
    }
}
