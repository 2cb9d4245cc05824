use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use dialogscm::config::RunConfig;
use dialogscm::evaluation::{
    emotion_consistency_eval, generate_challenges, implicit_cause_recovery, projection_csv,
    score_challenges, ChallengeType, LearnedPredictor, PairPredictor, ReferencePredictor,
};
use dialogscm::model::{train, ModelState, PreparedSample};
use dialogscm::skeleton::{build_skeleton_with, BuildOptions};
use dialogscm::synth::{generate_corpus, load_corpus, load_jsonl, save_corpus, SyntheticConfig};
use dialogscm::{
    discriminate_pair, simulate, Conversation, LinearScm, SampleMatrix, SkeletonVariant,
};

#[derive(Parser)]
#[command(
    name = "dialogscm",
    about = "Dialogue SCM simulation, causal discrimination and causal autoencoder training"
)]
struct Cli {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set model.hidden_size=32`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, action = ArgAction::Append)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (train/val/test JSONL plus manifest).
    GenData(GenData),
    /// Build a cogn skeleton over a conversation file.
    BuildSkeleton(BuildSkeleton),
    /// Sample a linear SCM into a CSV with one column per node.
    Simulate(SimulateArgs),
    /// Residual-independence verdicts for node pairs of a sample CSV.
    Discriminate(Discriminate),
    /// Train the causal autoencoder.
    Train(TrainArgs),
    /// Probe and consistency reports for a checkpoint.
    Evaluate(EvaluateArgs),
    /// Score a predictor on generated challenge instances.
    EvalChallenges(EvalChallenges),
    /// Write per-utterance implicit causes and their 2-D projection.
    ExportEmbeddings(ExportEmbeddings),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Add the bounded perturbation to the vectors.
    #[arg(long, overrides_with = "no_perturb")]
    perturb: bool,
    /// Emit exact SCM vectors.
    #[arg(long)]
    no_perturb: bool,
}

#[derive(Args)]
struct BuildSkeleton {
    #[arg(long)]
    variant: SkeletonVariant,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    conversation: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Start the outer loops of variants I-IV at the first utterance.
    #[arg(long)]
    inclusive_bounds: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scm: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Discriminate {
    /// CSV with a header row naming the nodes.
    #[arg(long)]
    data: PathBuf,
    /// One `x,y` pair per line, by column name or 0-based index.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalChallenges {
    #[arg(long)]
    model_type: ChallengeType,
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// `reference` or `learned:PATH` to a checkpoint.
    #[arg(long, default_value = "reference")]
    predictor: String,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportEmbeddings {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write `id,x,y,label` principal-component coordinates here.
    #[arg(long)]
    projection: Option<PathBuf>,
}

fn main() -> ExitCode {
    let version: &'static str = Box::leak(
        format!(
            "{} (checkpoint format {})",
            env!("CARGO_PKG_VERSION"),
            dialogscm::CHECKPOINT_FORMAT_VERSION
        )
        .into_boxed_str(),
    );
    let matches = match Cli::command().version(version).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e.chain().any(|c| {
                c.downcast_ref::<dialogscm::Error>()
                    .is_some_and(|d| d.is_numeric())
            });
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply_overrides(&cli.overrides)?;
    match cli.command {
        Command::GenData(a) => gen_data(config, a),
        Command::BuildSkeleton(a) => build_skeleton_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Discriminate(a) => discriminate_cmd(&config, a),
        Command::Train(a) => train_cmd(&config, a),
        Command::Evaluate(a) => evaluate_cmd(&config, a),
        Command::EvalChallenges(a) => eval_challenges_cmd(&config, a),
        Command::ExportEmbeddings(a) => export_cmd(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

/// Effective config beside a single output file: `<out>.config.json`.
fn echo_config_for_file(config: &RunConfig, out: &Path) -> Result<()> {
    let mut name = out
        .file_name()
        .ok_or_else(|| anyhow!("output path has no file name"))?
        .to_os_string();
    name.push(".config.json");
    write_json(&out.with_file_name(name), config)
}

fn gen_data(mut config: RunConfig, a: GenData) -> Result<()> {
    if let Some(seed) = a.seed {
        config.synthetic.seed = seed;
    }
    if a.no_perturb && !a.perturb {
        config.synthetic.perturbation = None;
    } else if a.perturb && config.synthetic.perturbation.is_none() {
        config.synthetic.perturbation = SyntheticConfig::default().perturbation;
    }
    config.validate()?;
    let corpus = generate_corpus(&[], &config.synthetic)?;
    let manifest = save_corpus(&a.out, &corpus, &config.synthetic)
        .with_context(|| format!("writing corpus to {}", a.out.display()))?;
    config.save(&a.out.join("config.json"))?;
    eprintln!(
        "wrote {} train / {} val / {} test samples to {} (config {})",
        manifest.counts.train,
        manifest.counts.val,
        manifest.counts.test,
        a.out.display(),
        &manifest.config_hash[..12]
    );
    Ok(())
}

fn build_skeleton_cmd(a: BuildSkeleton) -> Result<()> {
    let text = fs::read_to_string(&a.conversation)
        .with_context(|| format!("reading {}", a.conversation.display()))?;
    let conversation: Conversation = serde_json::from_str(&text)
        .map_err(|e| dialogscm::Error::Validation(format!("{}: {e}", a.conversation.display())))?;
    let skeleton = build_skeleton_with(
        a.variant,
        &conversation,
        a.k,
        BuildOptions {
            inclusive_bounds: a.inclusive_bounds,
        },
    )?;
    write_json(&a.out, &skeleton)?;
    eprintln!(
        "variant {} over {} utterances: {} edges",
        skeleton.variant,
        skeleton.n,
        skeleton.edges.len()
    );
    print!("{}", skeleton.adjacency_matrix().to_csv());
    Ok(())
}

fn simulate_cmd(a: SimulateArgs) -> Result<()> {
    let text =
        fs::read_to_string(&a.scm).with_context(|| format!("reading {}", a.scm.display()))?;
    let scm: LinearScm = serde_json::from_str(&text)
        .map_err(|e| dialogscm::Error::Validation(format!("{}: {e}", a.scm.display())))?;
    let data = simulate(&scm, a.n, a.seed)?;
    if data.dim() != 1 {
        bail!(dialogscm::Error::Validation(
            "CSV export needs scalar (dim 1) nodes".into()
        ));
    }
    let mut w =
        csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    w.write_record((1..=data.n_nodes()).map(|k| format!("U{k}")))?;
    for s in 0..data.n_samples() {
        w.write_record(data.sample(s).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    eprintln!(
        "wrote {} samples of {} nodes to {}",
        data.n_samples(),
        data.n_nodes(),
        a.out.display()
    );
    Ok(())
}

fn read_sample_csv(path: &Path) -> Result<(Vec<String>, SampleMatrix)> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let names: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut columns = vec![Vec::new(); names.len()];
    for (line, record) in r.records().enumerate() {
        let record = record?;
        for (col, field) in columns.iter_mut().zip(record.iter()) {
            col.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| dialogscm::Error::Parse {
                        line: line + 2,
                        message: format!("{field:?}: {e}"),
                    })?,
            );
        }
    }
    Ok((names, SampleMatrix::from_columns(&columns)?))
}

fn resolve_node(names: &[String], token: &str) -> Result<usize> {
    let token = token.trim();
    if let Some(k) = names.iter().position(|n| n == token) {
        return Ok(k);
    }
    match token.parse::<usize>() {
        Ok(k) if k < names.len() => Ok(k),
        _ => Err(dialogscm::Error::Validation(format!("unknown node {token:?}")).into()),
    }
}

#[derive(Serialize)]
struct PairVerdict {
    x_name: String,
    y_name: String,
    #[serde(flatten)]
    record: dialogscm::discrimination::VerdictRecord,
}

fn discriminate_cmd(config: &RunConfig, a: Discriminate) -> Result<()> {
    let (names, data) = read_sample_csv(&a.data)?;
    let pairs_text =
        fs::read_to_string(&a.pairs).with_context(|| format!("reading {}", a.pairs.display()))?;
    let mut out = Vec::new();
    for line in pairs_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (x, y) = line.split_once(',').ok_or_else(|| {
            dialogscm::Error::Validation(format!("pair line {line:?} is not x,y"))
        })?;
        let (xi, yi) = (resolve_node(&names, x)?, resolve_node(&names, y)?);
        let verdict = discriminate_pair(&data, xi, yi, &config.discrimination)
            .with_context(|| format!("pair ({}, {})", names[xi], names[yi]))?;
        eprintln!("{} vs {}: {:?}", names[xi], names[yi], verdict.kind);
        out.push(PairVerdict {
            x_name: names[xi].clone(),
            y_name: names[yi].clone(),
            record: (&verdict).into(),
        });
    }
    write_json(&a.out, &out)?;
    echo_config_for_file(config, &a.out)
}

fn train_cmd(config: &RunConfig, a: TrainArgs) -> Result<()> {
    let corpus = load_corpus(&a.data)
        .with_context(|| format!("loading corpus from {}", a.data.display()))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    config.save(&a.out.join("config.json"))?;
    let outcome = train(&corpus, &config.model, config.seed, Some(&a.out))?;
    if let Some(last) = outcome.history.last() {
        eprintln!(
            "trained {} epochs: loss {:.4} -> {:.4}, probe E {:.3}, probe Hhat {:.3}",
            last.epoch,
            outcome.initial_loss,
            last.loss_total,
            last.probe_acc_e,
            last.probe_acc_h_hat
        );
    }
    Ok(())
}

fn evaluate_cmd(config: &RunConfig, a: EvaluateArgs) -> Result<()> {
    let model =
        ModelState::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let corpus = load_corpus(&a.data)
        .with_context(|| format!("loading corpus from {}", a.data.display()))?;
    let recovery = implicit_cause_recovery(&model, &corpus)?;
    let consistency = emotion_consistency_eval(&model, &corpus)?;
    fs::create_dir_all(&a.out)?;
    config.save(&a.out.join("config.json"))?;
    write_json(&a.out.join("recovery.json"), &recovery)?;
    write_json(&a.out.join("consistency.json"), &consistency)?;
    fs::write(
        a.out.join("projection.csv"),
        projection_csv(&recovery.projection),
    )?;
    for flag in &recovery.flags {
        eprintln!("warning: {flag}");
    }
    eprintln!(
        "probe on learned E {:.3} (ground truth {:.3}); restricted set E {:.3} vs Hhat {:.3}",
        recovery.probe_acc_learned_e,
        recovery.probe_acc_true_e,
        consistency.e_probe_acc,
        consistency.h_hat_probe_acc
    );
    Ok(())
}

fn eval_challenges_cmd(config: &RunConfig, a: EvalChallenges) -> Result<()> {
    let set = generate_challenges(a.model_type, a.n, &config.challenges, config.seed)?;
    let model;
    let predictor: Box<dyn PairPredictor + '_> = match a.predictor.split_once(':') {
        None if a.predictor == "reference" => Box::new(ReferencePredictor {
            config: config.discrimination,
        }),
        Some(("learned", path)) => {
            model = ModelState::load(Path::new(path)).with_context(|| format!("loading {path}"))?;
            Box::new(LearnedPredictor { model: &model })
        }
        _ => bail!(dialogscm::Error::Validation(format!(
            "unknown predictor {:?} (reference or learned:PATH)",
            a.predictor
        ))),
    };
    let report = score_challenges(&set, predictor.as_ref())?;
    eprintln!(
        "{} x{} with {} predictor: pos {:.1}%, neg {:.1}%",
        report.model_type, report.n_instances, report.predictor, report.pos_pct, report.neg_pct
    );
    match &a.out {
        Some(path) => {
            write_json(path, &report)?;
            echo_config_for_file(config, path)
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn export_cmd(a: ExportEmbeddings) -> Result<()> {
    let model =
        ModelState::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let path = a.data.join(format!("{}.jsonl", a.split));
    let samples = load_jsonl(&path).with_context(|| format!("loading {}", path.display()))?;
    let mut w =
        csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let width = model.config.implicit_cause_size;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..width).map(|k| format!("e{k}")));
    w.write_record(&header)?;
    let mut rows = Vec::new();
    let mut meta = Vec::new();
    for s in &samples {
        let out = model
            .forward(&PreparedSample::new(s, &model.config)?)
            .with_context(|| format!("sample {}", s.id))?;
        for (t, (row, label)) in out.e.to_rows().into_iter().zip(s.labels()).enumerate() {
            let id = format!("{}:{t}", s.id);
            let mut record = vec![id.clone(), u8::from(label).to_string()];
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record)?;
            rows.push(row);
            meta.push((id, label));
        }
    }
    w.flush()?;
    if let Some(proj_path) = &a.projection {
        let points: Vec<_> = dialogscm::probe::pca_2d(&rows)?
            .into_iter()
            .zip(meta)
            .map(|([x, y], (id, label))| dialogscm::evaluation::ProjectionPoint { id, x, y, label })
            .collect();
        fs::write(proj_path, projection_csv(&points))?;
    }
    eprintln!("wrote {} rows of E to {}", rows.len(), a.out.display());
    Ok(())
}
