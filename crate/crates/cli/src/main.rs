//! `anytouch`: generate synthetic worlds, run the two training stages,
//! evaluate checkpoints, and export embeddings.
//!
//! Exit codes: 0 success, 2 bad arguments, 3 IO failure, 4 numerical
//! divergence, 5 incompatible checkpoint.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use anytouch::checkpoint::Checkpoint;
use anytouch::config::{ModelConfig, RunConfig, TrainConfig, TrainStage};
use anytouch::data::{load_manifest, LoadedData, Manifest, Split};
use anytouch::encoder::TokenPolicy;
use anytouch::error::Error;
use anytouch::eval::{
    export_embeddings_csv, extract_embeddings, extract_embeddings_routed, linear_probe,
    matching_eval, silhouette_separation, write_report, EmbeddingTable, LabelColumn,
};
use anytouch::synth::{generate_world, WorldSpec};
use anytouch::trainer::{train_stage1, train_stage2, write_loss_log};

const DATA_DIR_ENV: &str = "ANYTOUCH_DATA_DIR";

#[derive(Parser)]
#[command(name = "anytouch", version, about = "Multi-sensor tactile representation learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-sensor touch dataset.
    Gen(GenArgs),
    /// Train stage 1 (masked modeling) or stage 2 (alignment + matching).
    Train(TrainArgs),
    /// Evaluate a checkpoint: linear probe, clustering, or pair matching.
    Eval(EvalArgs),
    /// Export embeddings with provenance labels as CSV.
    Export(ExportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// World spec JSON; the built-in desk world when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Data root containing manifest.jsonl (default: $ANYTOUCH_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run config JSON with optional "model" and "train" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss log CSV path (default: <out>.loss.csv).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Stage-1 checkpoint to initialize stage 2 from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Allow stage 2 without a stage-1 checkpoint.
    #[arg(long)]
    from_scratch: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Train only on these sensors (comma-separated); others become unseen.
    #[arg(long, value_delimiter = ',')]
    sensors: Option<Vec<String>>,
    #[arg(long)]
    no_match: bool,
    #[arg(long)]
    no_text: bool,
    #[arg(long)]
    no_vision: bool,
    #[arg(long)]
    no_dynamic: bool,
    #[arg(long)]
    no_universal_tokens: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Probe,
    Cluster,
    Match,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Specific,
    Universal,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum LabelArg {
    Material,
    Object,
    Sensor,
    Position,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    task: TaskArg,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Restrict evaluation to one sensor (probe protocol).
    #[arg(long)]
    sensor: Option<String>,
    /// Sensor-token selection for probe/export-style extraction.
    #[arg(long, value_enum, default_value_t = PolicyArg::Specific)]
    sensor_token_policy: PolicyArg,
    #[arg(long, value_enum, default_value_t = LabelArg::Material)]
    label: LabelArg,
    /// Row subset for the cluster task.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = PolicyArg::Specific)]
    sensor_token_policy: PolicyArg,
}

#[derive(Deserialize, Default)]
struct PartialRunConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Export(args) => cmd_export(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::NumericalDivergence { .. } => 4,
        Error::IncompatibleCheckpoint(_) | Error::VersionMismatch { .. } => 5,
        Error::IoFailure(_) | Error::Image(_) | Error::CorruptCheckpoint { .. } => 3,
        Error::InvalidConfig(_)
        | Error::InvalidSpec(_)
        | Error::MissingStage1
        | Error::UnknownSensor(_)
        | Error::Json(_) => 2,
        _ => 1,
    }
}

fn data_root(arg: Option<PathBuf>) -> Result<PathBuf, Error> {
    if let Some(p) = arg {
        return Ok(p);
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(p) => Ok(PathBuf::from(p)),
        None => Err(Error::InvalidConfig(format!(
            "no --data given and {DATA_DIR_ENV} is unset"
        ))),
    }
}

fn load_world(manifest_root: &Path) -> Result<(Manifest, LoadedData), Error> {
    let manifest = load_manifest(&manifest_root.join("manifest.jsonl"))?;
    let data = LoadedData::load(&manifest, manifest_root)?;
    Ok((manifest, data))
}

fn cmd_gen(args: GenArgs) -> Result<(), Error> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<WorldSpec>(&text)?
        }
        None => WorldSpec::desk_default(args.seed.unwrap_or(0)),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    log::info!(
        "world: {} objects x {} positions x {} sensors, seed {} ({})",
        spec.n_objects,
        spec.n_positions_per_object,
        spec.sensors.len(),
        spec.seed,
        if args.config.is_some() { "config file" } else { "built-in default" },
    );
    let manifest = generate_world(&spec, &args.out)?;
    log::info!(
        "wrote {} samples in {} groups under {}",
        manifest.samples().len(),
        manifest.n_groups(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let stage = if args.stage == 1 { TrainStage::Stage1 } else { TrainStage::Stage2 };
    let init = match (&args.init, stage) {
        (Some(path), _) => Some(Checkpoint::load(path)?),
        (None, TrainStage::Stage2) if !args.from_scratch => {
            return Err(Error::MissingStage1);
        }
        _ => None,
    };

    let root = data_root(args.data)?;
    let (mut manifest, mut data) = load_world(&root)?;
    if let Some(sensors) = &args.sensors {
        manifest = manifest.restrict_sensors(sensors)?;
        data = LoadedData::load(&manifest, &root)?;
        log::info!("restricted training to sensors {sensors:?}");
    }

    let file_cfg: PartialRunConfig = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => PartialRunConfig::default(),
    };

    let seed = args.seed.unwrap_or_else(|| {
        file_cfg.train.as_ref().map(|t| t.seed).unwrap_or(0)
    });
    let mut train_cfg = file_cfg.train.unwrap_or_else(|| match stage {
        TrainStage::Stage1 => TrainConfig::stage1_default(seed),
        TrainStage::Stage2 => TrainConfig::stage2_default(seed),
    });
    train_cfg.stage = stage;
    train_cfg.seed = seed;
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        train_cfg.batch_size = b;
    }
    train_cfg.ablation.no_match |= args.no_match;
    train_cfg.ablation.no_text |= args.no_text;
    train_cfg.ablation.no_vision |= args.no_vision;
    train_cfg.ablation.no_dynamic |= args.no_dynamic;
    train_cfg.ablation.no_universal_tokens |= args.no_universal_tokens;

    // Architecture: init checkpoint > config file > desk default.
    let (mut model, init_stage) = match &init {
        Some(ckpt) => (ckpt.restore_model()?, ckpt.stage),
        None => {
            let model_cfg = file_cfg
                .model
                .unwrap_or_else(|| ModelConfig::desk_default(manifest.sensors().names().to_vec()));
            (anytouch::encoder::Model::new(model_cfg, seed)?, None)
        }
    };
    log::info!(
        "config precedence: CLI > {} > defaults; stage {:?}, {} epochs, batch {}, seed {}",
        args.config.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()),
        stage,
        train_cfg.epochs,
        train_cfg.batch_size,
        seed
    );

    let report = match stage {
        TrainStage::Stage1 => train_stage1(&mut model, &train_cfg, &manifest, &data)?,
        TrainStage::Stage2 => train_stage2(
            &mut model,
            &train_cfg,
            &manifest,
            &data,
            init_stage,
            args.from_scratch,
        )?,
    };

    let run = RunConfig { model: model.cfg.clone(), train: train_cfg };
    let step = report.rows.last().map(|r| r.step as u64).unwrap_or(0);
    Checkpoint::capture(&model, &run, Some(stage), step, Some(&report.optimizer))
        .save(&args.out)?;
    let log_path = args
        .log
        .unwrap_or_else(|| args.out.with_extension("loss.csv"));
    write_loss_log(&log_path, &report.rows)?;
    log::info!(
        "stage {:?} done: {} steps, epoch means {:?}; checkpoint {}, loss log {}",
        stage,
        report.rows.len(),
        report.epoch_means,
        args.out.display(),
        log_path.display()
    );
    Ok(())
}

fn policy_of(arg: PolicyArg) -> TokenPolicy {
    match arg {
        PolicyArg::Specific => TokenPolicy::Specific,
        PolicyArg::Universal => TokenPolicy::Universal,
    }
}

fn label_of(arg: LabelArg) -> LabelColumn {
    match arg {
        LabelArg::Material => LabelColumn::Material,
        LabelArg::Object => LabelColumn::Object,
        LabelArg::Sensor => LabelColumn::Sensor,
        LabelArg::Position => LabelColumn::Position,
    }
}

fn split_of(arg: SplitArg) -> Split {
    match arg {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = ckpt.restore_model()?;
    let root = data_root(args.data)?;
    let (mut manifest, mut data) = load_world(&root)?;
    if let Some(sensor) = &args.sensor {
        manifest = manifest.restrict_sensors(std::slice::from_ref(sensor))?;
        data = LoadedData::load(&manifest, &root)?;
    }

    match args.task {
        TaskArg::Probe => {
            let table =
                extract_embeddings(&model, &manifest, &data, policy_of(args.sensor_token_policy))?;
            let probe = linear_probe(&table, label_of(args.label), args.seed)?;
            write_report(
                &args.out,
                &[
                    ("accuracy", probe.accuracy as f64),
                    ("n_train", probe.n_train as f64),
                    ("class_count", probe.class_count as f64),
                ],
                probe.n_test,
                &ckpt.config_hash,
            )?;
            log::info!("probe accuracy {:.4} over {} test rows", probe.accuracy, probe.n_test);
        }
        TaskArg::Cluster => {
            // Inference routing: specific tokens for seen sensors, universal
            // for the rest.
            let table = extract_embeddings_routed(&model, &manifest, &data)?;
            let rows: Vec<_> = table
                .rows
                .into_iter()
                .filter(|r| r.split == split_of(args.split))
                .collect();
            let n = rows.len();
            let table = EmbeddingTable { rows, dim: table.dim };
            let (s_object, s_sensor) =
                silhouette_separation(&table, LabelColumn::Object, LabelColumn::Sensor)?;
            write_report(
                &args.out,
                &[("s_object", s_object as f64), ("s_sensor", s_sensor as f64)],
                n,
                &ckpt.config_hash,
            )?;
            log::info!("silhouette by object {s_object:.4}, by sensor {s_sensor:.4}");
        }
        TaskArg::Match => {
            let result = matching_eval(&model, &manifest, &data, args.seed)?;
            write_report(
                &args.out,
                &[("auc", result.auc), ("accuracy_at_half", result.accuracy_at_half)],
                result.n_pos + result.n_neg,
                &ckpt.config_hash,
            )?;
            log::info!(
                "matching auc {:.4}, accuracy@0.5 {:.4} over {}+{} pairs",
                result.auc,
                result.accuracy_at_half,
                result.n_pos,
                result.n_neg
            );
        }
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = ckpt.restore_model()?;
    let root = data_root(args.data)?;
    let (manifest, data) = load_world(&root)?;
    let table =
        extract_embeddings(&model, &manifest, &data, policy_of(args.sensor_token_policy))?;
    export_embeddings_csv(&table, &args.out)?;
    log::info!("exported {} rows to {}", table.rows.len(), args.out.display());
    Ok(())
}
