//! Command-line pipeline: preprocess check-in logs, build the trajectory
//! graph artifacts, train, evaluate, sweep alpha/beta, and serve top-k
//! recommendations.
//!
//! Exit codes: 0 success, 2 usage/format errors, 3 numerical failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use seaget_core::dataio::hours::OperationalHoursTable;
use seaget_core::dataio::parse::parse_checkins;
use seaget_core::dataio::persist::{load_split, save_split};
use seaget_core::dataio::preprocess::{preprocess, DatasetSplit};
use seaget_core::dataio::{CheckIn, PoiCatalog, Trajectory};
use seaget_core::error::CoreError;
use seaget_core::flowgraph::{build_flow_map, EdgeWeightMode};
use seaget_core::model::operational_filter;
use seaget_core::trainer::checkpoint::{
    export_matrix, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader,
};
use seaget_core::trainer::metrics::{rank_of, report_from_ranks, EvalReport};
use seaget_core::trainer::{
    build_graph_context, epoch_log_csv, evaluate, sweep_alpha_beta, sweep_csv, sweep_table, train,
    EvalGranularity, InferenceEngine, ModelState, TrainConfig,
};

#[derive(Parser)]
#[command(name = "seaget", version, about = "Next point-of-interest recommendation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitName {
    Test,
    Val,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Granularity {
    /// Every prefix position of every trajectory contributes one prediction.
    PerPosition,
    /// Only the final transition of each trajectory contributes.
    Final,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw check-in log, filter, segment, split, and persist it.
    Preprocess {
        /// Tab-separated raw check-in log.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for split files and the id map.
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Drop POIs and users with fewer check-ins than this.
        #[arg(long, default_value_t = 10)]
        min_checkins: usize,
    },
    /// Emit flow-map edge/node CSVs and the popularity table.
    BuildGraph {
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0.33)]
        beta: f64,
        #[arg(long, default_value_t = 90)]
        recent_days: i64,
    },
    /// Train a model on a preprocessed workdir.
    Train {
        #[arg(long)]
        workdir: PathBuf,
        /// Flat key = value config file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Checkpoint output path (default <workdir>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on the validation or test split.
    Evaluate {
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Apply the operational-hours filter during ranking.
        #[arg(long, value_enum, default_value_t = OnOff::Off)]
        filter: OnOff,
        /// Operational hours CSV (defaults to always-open).
        #[arg(long)]
        hours: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Granularity::PerPosition)]
        eval_granularity: Granularity,
    },
    /// Train and evaluate once per (alpha, beta) grid cell.
    Sweep {
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated alpha grid.
        #[arg(long, default_value = "0.33,0.50,0.67")]
        alphas: String,
        /// Comma-separated beta grid.
        #[arg(long, default_value = "0.33,0.50,0.67")]
        betas: String,
    },
    /// Top-k next-POI recommendation for an inline check-in prefix.
    Recommend {
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Raw user id as it appears in the source log.
        #[arg(long)]
        user: String,
        /// Comma-separated prefix: raw_poi_id@YYYY-MM-DDTHH:MM:SS,...
        #[arg(long)]
        trajectory: String,
        /// Query local datetime the recommendation is for.
        #[arg(long)]
        at: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        hours: Option<PathBuf>,
        /// Disable the operational-hours filter.
        #[arg(long, value_enum, default_value_t = OnOff::On)]
        filter: OnOff,
    },
}

struct CliError {
    code: u8,
    message: String,
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::Numerical { .. } => 3,
            _ => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: 2,
            message: e.to_string(),
        }
    }
}

fn usage_err(message: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load_train_config(
    config: Option<&Path>,
    overrides: &[(&str, Option<String>)],
) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = config {
        let text = fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with('[') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| usage_err(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.apply_kv(key, value)?;
        }
    }
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.apply_kv(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_workdir(workdir: &Path) -> Result<(DatasetSplit, PoiCatalog), CliError> {
    Ok(load_split(workdir)?)
}

fn hours_table(path: Option<&Path>) -> Result<OperationalHoursTable, CliError> {
    match path {
        Some(p) => Ok(OperationalHoursTable::load(p, true)?),
        None => Ok(OperationalHoursTable::all_open()),
    }
}

fn state_for(split: &DatasetSplit, cp: &Checkpoint) -> Result<ModelState, CliError> {
    if cp.header.config.poi_count != split.poi_count()
        || cp.header.config.category_count != split.category_count()
    {
        return Err(usage_err(format!(
            "checkpoint was trained on {} POIs / {} categories but the workdir has {} / {}",
            cp.header.config.poi_count,
            cp.header.config.category_count,
            split.poi_count(),
            split.category_count()
        )));
    }
    Ok(ModelState {
        config: cp.header.config.clone(),
        params: cp.params.clone(),
    })
}

fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| usage_err(format!("bad grid value {v:?}")))
        })
        .collect()
}

fn parse_local_datetime(text: &str) -> Result<i64, CliError> {
    chrono::NaiveDateTime::parse_from_str(text.trim(), "%Y-%m-%dT%H:%M:%S")
        .map(|dt| dt.and_utc().timestamp())
        .map_err(|_| usage_err(format!("bad local datetime {text:?}, expected YYYY-MM-DDTHH:MM:SS")))
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Preprocess {
            input,
            workdir,
            seed,
            min_checkins,
        } => {
            // parse fully before touching the workdir
            let log = parse_checkins(&input)?;
            let pre = preprocess(&log, min_checkins, seed)?;
            save_split(&workdir, &pre.split, &pre.catalog)?;
            let s = &pre.stats;
            println!(
                "{} {} {} {} {}",
                s.users, s.pois, s.categories, s.checkins, s.trajectories
            );
            Ok(())
        }
        Command::BuildGraph {
            workdir,
            alpha,
            beta,
            recent_days,
        } => {
            let (split, catalog) = load_workdir(&workdir)?;
            let cfg = TrainConfig {
                alpha,
                beta,
                recent_days,
                ..TrainConfig::default()
            };
            cfg.validate()?;
            let ctx = build_graph_context(&split, &catalog, &cfg)?;
            let map = build_flow_map(
                &split.train,
                &catalog,
                &ctx.popularity,
                EdgeWeightMode::TransitionCount,
            )?;
            fs::write(workdir.join("edges.csv"), map.edge_list_csv())?;
            fs::write(workdir.join("nodes.csv"), map.node_attr_csv())?;
            fs::write(workdir.join("popularity.csv"), ctx.popularity.to_csv())?;
            println!(
                "graph: {} nodes, {} edges",
                map.node_count,
                map.edges.len()
            );
            Ok(())
        }
        Command::Train {
            workdir,
            config,
            alpha,
            beta,
            epochs,
            seed,
            batch_size,
            learning_rate,
            checkpoint,
        } => {
            let cfg = load_train_config(
                config.as_deref(),
                &[
                    ("alpha", alpha.map(|v| v.to_string())),
                    ("beta", beta.map(|v| v.to_string())),
                    ("epochs", epochs.map(|v| v.to_string())),
                    ("seed", seed.map(|v| v.to_string())),
                    ("batch_size", batch_size.map(|v| v.to_string())),
                    ("learning_rate", learning_rate.map(|v| v.to_string())),
                ],
            )?;
            let (split, catalog) = load_workdir(&workdir)?;
            let outcome = train(&cfg, &split, &catalog)?;
            let ckpt_path = checkpoint.unwrap_or_else(|| workdir.join("model.ckpt"));
            let cp = Checkpoint {
                header: CheckpointHeader {
                    config: outcome.state.config.clone(),
                    alpha: cfg.alpha,
                    beta: cfg.beta,
                    seed: cfg.seed,
                    epoch: outcome.best_epoch,
                    validation_loss: outcome.best_val_loss,
                    dtype: String::new(),
                    tensors: vec![],
                },
                params: outcome.state.params.clone(),
            };
            save_checkpoint(&ckpt_path, &cp)?;
            fs::write(workdir.join("epochs.csv"), epoch_log_csv(&outcome.log))?;
            // export POI embeddings and the transition map for inspection
            let ctx = build_graph_context(&split, &catalog, &cfg)?;
            let engine = InferenceEngine::new(outcome.state, &ctx)?;
            export_matrix(&workdir.join("poi_embeddings.mat"), &engine.poi_embeddings)?;
            export_matrix(&workdir.join("transition_map.mat"), &engine.phi)?;
            if let Some(reason) = outcome.nan_abort {
                eprintln!("error: {reason}; checkpoint written to {}", ckpt_path.display());
                return Err(CliError {
                    code: 3,
                    message: format!("training aborted: {reason}"),
                });
            }
            println!(
                "trained {} epochs, best validation loss {:.6} at epoch {}, checkpoint {}",
                outcome.log.len(),
                outcome.best_val_loss,
                outcome.best_epoch,
                ckpt_path.display()
            );
            Ok(())
        }
        Command::Evaluate {
            workdir,
            checkpoint,
            split: which,
            filter,
            hours,
            eval_granularity,
        } => {
            let (split, catalog) = load_workdir(&workdir)?;
            let cp = load_checkpoint(&checkpoint)?;
            let state = state_for(&split, &cp)?;
            let cfg = TrainConfig {
                alpha: cp.header.alpha,
                beta: cp.header.beta,
                ..TrainConfig::default()
            };
            let ctx = build_graph_context(&split, &catalog, &cfg)?;
            let engine = InferenceEngine::new(state, &ctx)?;
            let trajectories = match which {
                SplitName::Test => &split.test,
                SplitName::Val => &split.validation,
            };
            let granularity = match eval_granularity {
                Granularity::PerPosition => EvalGranularity::PerPosition,
                Granularity::Final => EvalGranularity::FinalOnly,
            };
            let ks = [1, 5, 10, 20];
            let report = match filter {
                OnOff::Off => evaluate(&engine, trajectories, &ks, granularity)?,
                OnOff::On => {
                    let table = hours_table(hours.as_deref())?;
                    evaluate_filtered(&engine, &catalog, &table, trajectories, &ks, granularity)?
                }
            };
            println!("{}", report.table_row());
            fs::write(
                workdir.join("eval.csv"),
                format!("{}\n{}\n", report.csv_header(), report.csv_row()),
            )?;
            Ok(())
        }
        Command::Sweep {
            workdir,
            config,
            alphas,
            betas,
        } => {
            let cfg = load_train_config(config.as_deref(), &[])?;
            let (split, catalog) = load_workdir(&workdir)?;
            let alphas = parse_grid(&alphas)?;
            let betas = parse_grid(&betas)?;
            let results = sweep_alpha_beta(&cfg, &split, &catalog, &alphas, &betas)?;
            print!("{}", sweep_table(&results));
            fs::write(workdir.join("sweep.csv"), sweep_csv(&results))?;
            Ok(())
        }
        Command::Recommend {
            workdir,
            checkpoint,
            user,
            trajectory,
            at,
            k,
            hours,
            filter,
        } => {
            let (split, catalog) = load_workdir(&workdir)?;
            let cp = load_checkpoint(&checkpoint)?;
            let state = state_for(&split, &cp)?;
            let cfg = TrainConfig {
                alpha: cp.header.alpha,
                beta: cp.header.beta,
                ..TrainConfig::default()
            };
            let ctx = build_graph_context(&split, &catalog, &cfg)?;
            let engine = InferenceEngine::new(state, &ctx)?;

            let user_id = split
                .user_ids
                .iter()
                .position(|raw| raw == &user)
                .ok_or_else(|| usage_err(format!("unknown user id {user:?}")))?;
            let poi_index: BTreeMap<&str, usize> = split
                .poi_ids
                .iter()
                .enumerate()
                .map(|(i, raw)| (raw.as_str(), i))
                .collect();
            let mut checkins = Vec::new();
            for part in trajectory.split(',') {
                let (raw_poi, time_text) = part
                    .split_once('@')
                    .ok_or_else(|| usage_err(format!("bad trajectory entry {part:?}, expected poi@datetime")))?;
                let poi_id = *poi_index
                    .get(raw_poi.trim())
                    .ok_or_else(|| usage_err(format!("unknown POI id {:?}", raw_poi.trim())))?;
                let local_ts = parse_local_datetime(time_text)?;
                let info = &catalog.pois[poi_id];
                checkins.push(CheckIn {
                    user_id,
                    poi_id,
                    category_id: info.category_id,
                    lat: info.lat,
                    lon: info.lon,
                    utc_timestamp: local_ts,
                    tz_offset_minutes: 0,
                });
            }
            if checkins.is_empty() {
                return Err(usage_err("trajectory prefix must not be empty"));
            }
            let traj = Trajectory {
                trajectory_id: 0,
                user_id,
                checkins,
            };
            let query_ts = parse_local_datetime(&at)?;
            let logits = engine.sequence_logits(&traj)?;
            let scores = logits.row(traj.len() - 1).to_vec();
            let (scores, all_closed) = match filter {
                OnOff::On => {
                    let table = hours_table(hours.as_deref())?;
                    operational_filter(&scores, &catalog, &table, query_ts)
                }
                OnOff::Off => (scores, false),
            };
            if all_closed {
                println!("warning: every POI is closed at the query time; showing the unfiltered ranking");
            }
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            let open: Vec<usize> = order
                .into_iter()
                .filter(|&i| scores[i].is_finite())
                .collect();
            if open.len() < k {
                println!(
                    "warning: only {} POIs are open at the query time (k = {k})",
                    open.len()
                );
            }
            for &poi in open.iter().take(k) {
                let cat = catalog.pois[poi].category_id;
                println!(
                    "{}\t{}\t{:.6}",
                    split.poi_ids[poi], split.category_names[cat], scores[poi]
                );
            }
            Ok(())
        }
    }
}

/// Per-position evaluation with closed POIs masked at each target's own
/// visit time.
fn evaluate_filtered(
    engine: &InferenceEngine,
    catalog: &PoiCatalog,
    table: &OperationalHoursTable,
    trajectories: &[Trajectory],
    ks: &[usize],
    granularity: EvalGranularity,
) -> Result<EvalReport, CoreError> {
    let mut ranks = Vec::new();
    for traj in trajectories {
        if traj.len() < 2 {
            continue;
        }
        let logits = engine.sequence_logits(traj)?;
        let positions: Vec<usize> = match granularity {
            EvalGranularity::PerPosition => (0..traj.len() - 1).collect(),
            EvalGranularity::FinalOnly => vec![traj.len() - 2],
        };
        for i in positions {
            let next = &traj.checkins[i + 1];
            let (scores, _) =
                operational_filter(logits.row(i), catalog, table, next.local_timestamp());
            ranks.push(rank_of(&scores, next.poi_id));
        }
    }
    report_from_ranks(&ranks, ks)
}
