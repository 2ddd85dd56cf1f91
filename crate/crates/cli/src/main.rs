use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use geoleak::config::{AttackMethod, DataSource, RunConfig};
use geoleak::data::{gen_synthetic, ingest_checkins, write_checkins};
use geoleak::defense::DefenseKind;
use geoleak::experiment::{
    attack, build_network, build_world, load_checkpoint, load_logs, load_records, make_predictor, report,
    run_experiment, save_checkpoint, save_config, save_logs, save_records, save_report, train, CONFIG_FILE,
};
use geoleak::{Error, Result};

const NETWORK_FILE: &str = "network.txt";
const TRAJECTORY_FILE: &str = "trajectories.tsv";

/// Gradient inversion attacks and location-privacy defenses on simulated
/// spatiotemporal federated learning.
#[derive(Parser)]
#[command(name = "geoleak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; every artifact goes here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// none, dpsgd, geoi, geogi or adaptive
    #[arg(long)]
    defense: Option<DefenseKind>,
    /// Total privacy budget.
    #[arg(long)]
    epsilon: Option<f64>,
    /// st-gia, st-gia-plus or baseline
    #[arg(long)]
    attack: Option<AttackMethod>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured road network to <out>/network.txt.
    GenNet(RunArgs),
    /// Write synthetic walks to <out>/trajectories.tsv.
    GenTraj {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
    },
    /// Clean and resample a check-in file into <out>/trajectories.tsv.
    Ingest {
        #[command(flatten)]
        run: RunArgs,
        /// Tab-separated `user  time  lat  lon` lines.
        #[arg(long)]
        input: PathBuf,
    },
    /// Federated training; writes round logs and the final model.
    Train(RunArgs),
    /// Training with a defense (adaptive unless --defense says otherwise).
    Defend(RunArgs),
    /// Attack the round logs of a trained run directory.
    Attack(RunArgs),
    /// Recompute metrics.csv and summary.json of a run directory.
    Report(RunArgs),
    /// Train, attack and report in one go.
    All(RunArgs),
}

/// Loads the run configuration: `--config` if given, else the snapshot in
/// the run directory when `snapshot` is set and one exists, else defaults.
fn resolve(args: &RunArgs, snapshot: bool) -> Result<RunConfig> {
    let from_dir = args.out.as_ref().map(|d| d.join(CONFIG_FILE)).filter(|p| snapshot && p.exists());
    let mut cfg = match (&args.config, from_dir) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) => RunConfig::load(&p)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = args.defense {
        cfg.defense.mechanism.kind = d;
    }
    if let Some(e) = args.epsilon {
        cfg.defense.mechanism.epsilon_total = e;
    }
    if let Some(a) = args.attack {
        cfg.attack.method = a;
    }
    Ok(cfg)
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn prepare_dir(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

fn cmd_train(cfg: RunConfig) -> Result<()> {
    stage("config", cfg.validate())?;
    let dir = stage("config", prepare_dir(&cfg))?;
    stage("config", save_config(dir, &cfg))?;
    let world = stage("data", build_world(&cfg))?;
    let predictor = match (cfg.defense.mechanism.kind, cfg.attack.method) {
        (DefenseKind::Adaptive, AttackMethod::StGiaPlus) => Some(stage("predictor", make_predictor(&world, &cfg.predictor))?),
        _ => None,
    };
    let out = stage("train", train(&world, &cfg, predictor.as_deref()))?;
    stage("train", save_logs(dir, &out.logs))?;
    stage("train", save_checkpoint(dir, &world.spec, &out.params))?;
    if let Some(recs) = &out.shadow_records {
        stage("train", save_records(dir, recs))?;
    }
    let spent: f64 = out.logs.iter().filter_map(|l| l.epsilon).sum();
    println!("trained {} rounds into {}", out.logs.len(), dir.display());
    if cfg.defense.mechanism.kind != DefenseKind::None {
        println!("privacy budget spent {spent:.6} of {}", cfg.defense.mechanism.epsilon_total);
    }
    Ok(())
}

fn cmd_attack(cfg: RunConfig) -> Result<()> {
    stage("config", cfg.validate())?;
    let dir = cfg.out_dir.as_path();
    let world = stage("data", build_world(&cfg))?;
    let logs = stage("attack", load_logs(dir))?;
    let predictor = match cfg.attack.method {
        AttackMethod::StGiaPlus => Some(stage("predictor", make_predictor(&world, &cfg.predictor))?),
        _ => None,
    };
    let out = stage("attack", attack(&world, &cfg, &logs, predictor.as_deref()))?;
    stage("attack", save_records(dir, &out.records))?;
    // later stages read the method from the snapshot
    stage("attack", save_config(dir, &cfg))?;
    println!("attacked {} updates from {}", out.records.len(), dir.display());
    Ok(())
}

fn cmd_report(cfg: RunConfig) -> Result<()> {
    let dir = cfg.out_dir.as_path();
    let world = stage("data", build_world(&cfg))?;
    let logs = stage("report", load_logs(dir))?;
    let params = stage("report", load_checkpoint(dir))?;
    let records = stage("report", load_records(dir))?;
    let rep = stage("report", report(&world, &cfg, &logs, &params, &records))?;
    stage("report", save_report(dir, &rep))?;
    println!("{}", serde_json::to_string_pretty(&rep.summary).map_err(Error::from)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenNet(args) => {
            let cfg = resolve(&args, false)?;
            let dir = prepare_dir(&cfg)?;
            let (net, _) = build_network(&cfg)?;
            net.save(&dir.join(NETWORK_FILE))?;
            println!("{} nodes, {} edges -> {}", net.len(), net.edges().len(), dir.join(NETWORK_FILE).display());
        }
        Command::GenTraj { run, users, length } => {
            let cfg = resolve(&run, false)?;
            let (u, l) = match cfg.data {
                DataSource::Synthetic { users, length } => (users, length),
                DataSource::Checkins { .. } => (100, 53),
            };
            let dir = prepare_dir(&cfg)?;
            let (net, _) = build_network(&cfg)?;
            let trajs = gen_synthetic(&net, users.unwrap_or(u), length.unwrap_or(l), cfg.seed)?;
            write_checkins(&dir.join(TRAJECTORY_FILE), &trajs)?;
            println!("{} walks -> {}", trajs.len(), dir.join(TRAJECTORY_FILE).display());
        }
        Command::Ingest { run, input } => {
            let cfg = resolve(&run, false)?;
            let dir = prepare_dir(&cfg)?;
            let (trajs, summary) = ingest_checkins(&input)?;
            write_checkins(&dir.join(TRAJECTORY_FILE), &trajs)?;
            println!(
                "{} lines, {} malformed, {} users, {} points after resampling -> {}",
                summary.lines,
                summary.malformed,
                summary.users,
                summary.points,
                dir.join(TRAJECTORY_FILE).display()
            );
        }
        Command::Train(args) => cmd_train(resolve(&args, false)?)?,
        Command::Defend(args) => {
            let mut cfg = resolve(&args, false)?;
            if cfg.defense.mechanism.kind == DefenseKind::None {
                if args.defense.is_some() {
                    return Err(Error::Config("defend needs a defense other than none".into()));
                }
                cfg.defense.mechanism.kind = DefenseKind::Adaptive;
            }
            cmd_train(cfg)?
        }
        Command::Attack(args) => cmd_attack(resolve(&args, true)?)?,
        Command::Report(args) => cmd_report(resolve(&args, true)?)?,
        Command::All(args) => {
            let res = run_experiment(&resolve(&args, false)?)?;
            println!("{}", serde_json::to_string_pretty(&res.report.summary).map_err(Error::from)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // stage errors already carry their cause in the message
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
