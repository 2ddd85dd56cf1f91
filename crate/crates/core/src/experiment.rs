//! End-to-end runs: data and network setup, (defended) training, the attack,
//! and the report, with every artifact written under one run directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::attack::{write_reconstructions, AttackOutput, AttackRecord, Attacker};
use crate::config::{AttackMethod, DataSource, NetworkSource, RunConfig};
use crate::data::{gen_synthetic, ingest_checkins, to_clients};
use crate::defense::{load_domains, ConstraintDomain, Defense, DefenseKind};
use crate::error::{Error, Result};
use crate::fed::{predict_all, read_round_logs, run_training, write_round_log, Client, Encoder, FedConfig, NoDefense, RoundLog};
use crate::geo::{BBox, GridIndex, Trajectory};
use crate::metrics::{build_report, recall_at_k, EvalReport, ReportInputs};
use crate::model::{read_checkpoint, write_checkpoint, Mlp, Model, ModelSpec, ParamVector};
use crate::network::{lattice, LatticeSpec, RoadNetwork};
use crate::predictor::{CandidatePredictor, MarkovPredictor, MarkovTable, PredictorBinding, RemotePredictor, RemoteSettings};
use crate::rng::{derive_seed, stream_rng, Stream};

pub const CONFIG_FILE: &str = "config.toml";
pub const ROUND_LOG_FILE: &str = "round_logs.jsonl";
pub const RECONSTRUCTION_FILE: &str = "reconstructions.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RECORDS_FILE: &str = "attack_records.jsonl";
pub const CHECKPOINT_FILE: &str = "model.bin";

/// Everything a run needs before training starts.
pub struct World {
    pub net: RoadNetwork,
    pub encoder: Encoder,
    pub spec: ModelSpec,
    pub model: Mlp,
    pub trajectories: Vec<Trajectory>,
    pub clients: Vec<Client>,
    /// Cell sequences of walks the attacker may use to fit a Markov table.
    pub auxiliary: Vec<Vec<usize>>,
}

impl World {
    pub fn init_params(&self, seed: u64) -> ParamVector {
        self.model.init_params(&mut stream_rng(seed, Stream::Model, 0, 0))
    }

    fn cells(&self, t: &Trajectory) -> Vec<usize> {
        t.points().iter().map(|sp| self.encoder.label(sp.point)).collect()
    }
}

/// The configured road network and the model grid over it.
pub fn build_network(cfg: &RunConfig) -> Result<(RoadNetwork, GridIndex)> {
    let g = cfg.model.grid;
    match &cfg.network {
        NetworkSource::Lattice { bbox, jitter, keep_edge } => {
            let grid = GridIndex::new(BBox::new(bbox[0], bbox[1], bbox[2], bbox[3])?, g)?;
            let net = lattice(&LatticeSpec {
                grid,
                jitter: *jitter,
                keep_edge: *keep_edge,
                seed: derive_seed(cfg.seed, Stream::Data, 1, 0),
            })?;
            Ok((net, grid))
        }
        NetworkSource::File { path } => {
            let net = RoadNetwork::load(path)?;
            let bbox = BBox::around(net.nodes().values(), 1e-4)?;
            Ok((net, GridIndex::new(bbox, g)?))
        }
    }
}

pub fn build_world(cfg: &RunConfig) -> Result<World> {
    let (net, grid) = build_network(cfg)?;
    let encoder = Encoder {
        grid,
        window: cfg.model.window,
    };
    let spec = cfg.model.spec()?;
    let w = cfg.model.window;
    let (selected, rest) = match &cfg.data {
        DataSource::Synthetic { users, length } => {
            let trajs = gen_synthetic(&net, *users, *length, cfg.seed)?;
            let aux = gen_synthetic(&net, (*users).max(20), *length, derive_seed(cfg.seed, Stream::Data, 2, 0))?;
            let n = cfg.fed.clients.min(trajs.len());
            (trajs[..n].to_vec(), aux)
        }
        DataSource::Checkins { path } => {
            let (mut trajs, summary) = ingest_checkins(path)?;
            log::info!(
                "ingested {} users, {} points ({} malformed lines)",
                summary.users,
                summary.points,
                summary.malformed
            );
            trajs.retain(|t| t.len() > w);
            trajs.shuffle(&mut stream_rng(cfg.seed, Stream::Data, 3, 0));
            let n = cfg.fed.clients.min(trajs.len());
            let rest = trajs.split_off(n);
            let rest = if rest.is_empty() { trajs.clone() } else { rest };
            trajs.sort_by(|a, b| a.user_id.cmp(&b.user_id));
            (trajs, rest)
        }
    };
    if selected.is_empty() {
        return Err(Error::Config("no usable trajectories".into()));
    }
    if selected.len() < cfg.fed.clients {
        log::warn!("only {} of {} requested clients available", selected.len(), cfg.fed.clients);
    }
    let mut world = World {
        net,
        encoder,
        spec,
        model: Mlp::new(spec),
        clients: to_clients(&selected),
        trajectories: selected,
        auxiliary: Vec::new(),
    };
    world.auxiliary = rest.iter().map(|t| world.cells(t)).collect();
    Ok(world)
}

pub fn make_predictor(world: &World, binding: &PredictorBinding) -> Result<Box<dyn CandidatePredictor>> {
    let classes = world.spec.classes;
    let table = MarkovTable::fit(classes, world.auxiliary.iter().map(Vec::as_slice))?;
    Ok(match binding {
        PredictorBinding::Markov => Box::new(MarkovPredictor { table }),
        PredictorBinding::Remote(settings) => {
            let mut s: RemoteSettings = settings.clone();
            if s.endpoint.is_empty() {
                s.endpoint = RemoteSettings::from_env()?.endpoint;
            }
            Box::new(RemotePredictor::http(s, classes, Some(table))?)
        }
    })
}

pub fn constraint_domains(world: &World, cfg: &RunConfig) -> Result<Vec<ConstraintDomain>> {
    let from_file = match &cfg.defense.domains {
        Some(p) => load_domains(p, &world.net)?,
        None => BTreeMap::new(),
    };
    world
        .trajectories
        .iter()
        .map(|t| match from_file.get(&t.user_id) {
            Some(d) => Ok(d.clone()),
            None => ConstraintDomain::around(
                t.user_id.clone(),
                t.centroid(),
                cfg.defense.mechanism.domain_radius_m,
                &world.net,
            ),
        })
        .collect()
}

pub struct TrainOutput {
    pub logs: Vec<RoundLog>,
    pub params: ParamVector,
    /// Attack records of the adaptive defense's shadow attack.
    pub shadow_records: Option<Vec<AttackRecord>>,
}

fn attacker<'a>(
    world: &'a World,
    cfg: &RunConfig,
    predictor: Option<&'a dyn CandidatePredictor>,
) -> Result<Attacker<'a>> {
    let a = Attacker::new(&world.model, world.encoder, &world.net, cfg.attack_config())?;
    Ok(match (cfg.attack.method, predictor) {
        (AttackMethod::StGiaPlus, Some(p)) => a.with_predictor(p),
        _ => a,
    })
}

/// Federated training with the configured defense.
pub fn train(world: &World, cfg: &RunConfig, predictor: Option<&dyn CandidatePredictor>) -> Result<TrainOutput> {
    let fed = FedConfig {
        rounds: cfg.fed.rounds,
        lr: cfg.fed.lr,
        seed: cfg.seed,
    };
    let init = world.init_params(cfg.seed);
    let kind = cfg.defense.mechanism.kind;
    if kind == DefenseKind::None {
        let (logs, params) = run_training(&world.model, &world.encoder, &world.clients, init, &fed, &mut NoDefense)?;
        return Ok(TrainOutput {
            logs,
            params,
            shadow_records: None,
        });
    }
    let shadow = match kind {
        DefenseKind::Adaptive => Some(attacker(world, cfg, predictor)?),
        _ => None,
    };
    let domains = match kind {
        DefenseKind::Adaptive => constraint_domains(world, cfg)?,
        _ => Vec::new(),
    };
    let mut defense = Defense::new(cfg.defense.mechanism.clone(), &world.net, cfg.fed.rounds, domains, shadow)?;
    let (logs, params) = run_training(&world.model, &world.encoder, &world.clients, init, &fed, &mut defense)?;
    let shadow_records = (kind == DefenseKind::Adaptive).then(|| defense.take_shadow_records());
    Ok(TrainOutput {
        logs,
        params,
        shadow_records,
    })
}

/// Runs the configured attack over all round logs.
pub fn attack(world: &World, cfg: &RunConfig, logs: &[RoundLog], predictor: Option<&dyn CandidatePredictor>) -> Result<AttackOutput> {
    if logs.is_empty() {
        return Err(Error::Empty("round logs"));
    }
    let mut a = attacker(world, cfg, predictor)?;
    let mut records = Vec::new();
    for log in logs {
        records.extend(a.attack_round(log)?);
    }
    Ok(AttackOutput {
        records,
        trajectories: a.trajectories(),
    })
}

/// Recall@5 of `params` over every clean window of the clients.
pub fn model_recall(world: &World, params: &ParamVector) -> Result<f64> {
    let preds = predict_all(&world.model, &world.encoder, &world.clients, params, 5)?;
    let (ranked, truth): (Vec<Vec<usize>>, Vec<usize>) = preds.into_iter().unzip();
    recall_at_k(&ranked, &truth, 5)
}

pub fn report(
    world: &World,
    cfg: &RunConfig,
    logs: &[RoundLog],
    final_params: &ParamVector,
    records: &[AttackRecord],
) -> Result<EvalReport> {
    let mut inputs = ReportInputs {
        final_recall: Some(model_recall(world, final_params)?),
        ..Default::default()
    };
    for log in logs {
        inputs.recall.insert(log.round, model_recall(world, &log.params)?);
        if let Some(e) = log.epsilon {
            inputs.epsilon.insert(log.round, e);
        }
    }
    if cfg.defense.mechanism.kind != DefenseKind::None {
        inputs.epsilon_total = Some(cfg.defense.mechanism.epsilon_total);
    }
    build_report(records, world.net.origin(), &inputs)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn save_logs(dir: &Path, logs: &[RoundLog]) -> Result<()> {
    let mut w = create(&dir.join(ROUND_LOG_FILE))?;
    for l in logs {
        write_round_log(&mut w, l)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_logs(dir: &Path) -> Result<Vec<RoundLog>> {
    read_round_logs(BufReader::new(File::open(dir.join(ROUND_LOG_FILE))?))
}

pub fn save_checkpoint(dir: &Path, spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    write_checkpoint(&dir.join(CHECKPOINT_FILE), spec, params)
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamVector> {
    Ok(read_checkpoint(&dir.join(CHECKPOINT_FILE))?.1)
}

pub fn save_records(dir: &Path, records: &[AttackRecord]) -> Result<()> {
    let mut w = create(&dir.join(RECONSTRUCTION_FILE))?;
    write_reconstructions(&mut w, records)?;
    w.flush()?;
    let mut w = create(&dir.join(RECORDS_FILE))?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_records(dir: &Path) -> Result<Vec<AttackRecord>> {
    let text = std::fs::read_to_string(dir.join(RECORDS_FILE))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn save_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::write(dir.join(METRICS_FILE), report.to_csv())?;
    let mut w = create(&dir.join(SUMMARY_FILE))?;
    serde_json::to_writer_pretty(&mut w, &report.summary)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn save_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    Ok(())
}

#[derive(Debug)]
pub struct RunResult {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub attack: AttackOutput,
}

/// Train, attack and evaluate, writing every artifact into `cfg.out_dir`.
/// Errors carry the stage they came from; files written before the failure
/// are kept.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::from(e).in_stage("config"))?;
    save_config(&dir, cfg).map_err(|e| e.in_stage("config"))?;

    let world = build_world(cfg).map_err(|e| e.in_stage("data"))?;
    let predictor = match cfg.attack.method {
        AttackMethod::StGiaPlus => Some(make_predictor(&world, &cfg.predictor).map_err(|e| e.in_stage("predictor"))?),
        _ => None,
    };
    let predictor = predictor.as_deref();

    let trained = train(&world, cfg, predictor).map_err(|e| e.in_stage("train"))?;
    save_logs(&dir, &trained.logs).map_err(|e| e.in_stage("train"))?;
    save_checkpoint(&dir, &world.spec, &trained.params).map_err(|e| e.in_stage("train"))?;

    let attack_out = match trained.shadow_records {
        // the shadow attack already ran the configured attack on these logs
        Some(records) => AttackOutput {
            trajectories: BTreeMap::new(),
            records,
        },
        None => attack(&world, cfg, &trained.logs, predictor).map_err(|e| e.in_stage("attack"))?,
    };
    save_records(&dir, &attack_out.records).map_err(|e| e.in_stage("attack"))?;

    let report = report(&world, cfg, &trained.logs, &trained.params, &attack_out.records)
        .map_err(|e| e.in_stage("report"))?;
    save_report(&dir, &report).map_err(|e| e.in_stage("report"))?;
    Ok(RunResult {
        dir,
        report,
        attack: attack_out,
    })
}
