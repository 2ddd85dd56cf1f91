//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/demo"
//!
//! [data]
//! source = "synthetic"        # or "checkins" with `path = "..."`
//! users = 100
//! length = 53
//!
//! [network]
//! source = "lattice"          # or "file" with `path = "..."`
//! bbox = [35.0, 35.03, 139.0, 139.03]
//! jitter = 0.2
//! keep_edge = 0.5
//!
//! [model]
//! window = 3
//! hidden = 16
//! grid = 10
//!
//! [fed]
//! clients = 100
//! rounds = 50
//! lr = 0.05
//!
//! [attack]
//! method = "st-gia"           # st-gia | st-gia-plus | baseline
//! max_iters = 200
//! step = 0.1
//!
//! [defense]
//! kind = "none"               # none | dpsgd | geoi | geogi | adaptive
//! epsilon_total = 10.0
//!
//! [predictor]
//! kind = "markov"             # or "remote" with endpoint settings
//! ```
//!
//! Every key has a default; see the `Default` impls.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, LabelMode};
use crate::defense::DefenseConfig;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::predictor::PredictorBinding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { users: usize, length: usize },
    Checkins { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum NetworkSource {
    /// Synthetic lattice with one node per grid cell over `bbox`
    /// (`[min_lat, max_lat, min_lon, max_lon]`).
    Lattice { bbox: [f64; 4], jitter: f64, keep_edge: f64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub window: usize,
    pub hidden: usize,
    /// Cells per grid side; the model has `grid * grid` classes.
    pub grid: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            window: 3,
            hidden: 16,
            grid: 10,
        }
    }
}

impl ModelSection {
    pub fn spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.window, self.hidden, self.grid * self.grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedSection {
    pub clients: usize,
    pub rounds: usize,
    pub lr: f64,
}

impl Default for FedSection {
    fn default() -> Self {
        FedSection {
            clients: 100,
            rounds: 50,
            lr: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    StGia,
    StGiaPlus,
    Baseline,
}

impl std::str::FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "st-gia" => Ok(AttackMethod::StGia),
            "st-gia-plus" => Ok(AttackMethod::StGiaPlus),
            "baseline" => Ok(AttackMethod::Baseline),
            _ => Err(Error::Config(format!("unknown attack `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSection {
    pub method: AttackMethod,
    pub max_iters: usize,
    pub step: f64,
    pub tol: f64,
    pub map_all_positions: bool,
    pub label: LabelMode,
}

impl Default for AttackSection {
    fn default() -> Self {
        let d = AttackConfig::st_gia();
        AttackSection {
            method: AttackMethod::StGia,
            max_iters: d.max_iters,
            step: d.step,
            tol: d.tol,
            map_all_positions: d.map_all_positions,
            label: d.label,
        }
    }
}

impl AttackSection {
    pub fn config(&self, seed: u64) -> AttackConfig {
        let base = match self.method {
            AttackMethod::StGia => AttackConfig::st_gia(),
            AttackMethod::StGiaPlus => AttackConfig::st_gia_plus(),
            AttackMethod::Baseline => AttackConfig::baseline(),
        };
        AttackConfig {
            max_iters: self.max_iters,
            step: self.step,
            tol: self.tol,
            map_all_positions: self.map_all_positions,
            label: self.label,
            seed,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DefenseSection {
    #[serde(flatten)]
    pub mechanism: DefenseConfig,
    /// Constraint domain file; users missing from it get every node within
    /// `domain_radius_m` of their trajectory centroid.
    pub domains: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub network: NetworkSource,
    pub model: ModelSection,
    pub fed: FedSection,
    pub attack: AttackSection,
    pub defense: DefenseSection,
    pub predictor: PredictorBinding,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataSource::Synthetic {
                users: 100,
                length: 53,
            },
            network: NetworkSource::Lattice {
                bbox: [35.0, 35.03, 139.0, 139.03],
                jitter: 0.2,
                keep_edge: 0.5,
            },
            model: ModelSection::default(),
            fed: FedSection::default(),
            attack: AttackSection::default(),
            defense: DefenseSection::default(),
            predictor: PredictorBinding::Markov,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn attack_config(&self) -> AttackConfig {
        self.attack.config(self.seed)
    }

    /// Checks ranges and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.spec()?;
        if self.model.grid < 2 {
            return bad(format!("model.grid must be at least 2, got {}", self.model.grid));
        }
        if self.fed.clients == 0 || self.fed.rounds == 0 {
            return bad("fed.clients and fed.rounds must be positive".into());
        }
        if !(self.fed.lr >= 0.0 && self.fed.lr.is_finite()) {
            return bad(format!("fed.lr must be non-negative, got {}", self.fed.lr));
        }
        self.attack_config().validate()?;
        let d = &self.defense.mechanism;
        if !(d.epsilon_total > 0.0 && d.unit_m > 0.0 && d.clip > 0.0 && d.domain_radius_m >= 0.0) {
            return bad("defense epsilon_total, unit_m and clip must be positive".into());
        }
        if !(0.0..=1.0).contains(&d.alpha) || !(d.delta > 0.0 && d.delta < 1.0) {
            return bad("defense alpha must be in [0, 1] and delta in (0, 1)".into());
        }
        match &self.data {
            DataSource::Synthetic { users, length } => {
                if *users == 0 || *length < self.model.window + 1 {
                    return bad(format!(
                        "synthetic data needs users > 0 and length > window, got {users} x {length}"
                    ));
                }
            }
            DataSource::Checkins { path } => must_exist(path)?,
        }
        match &self.network {
            NetworkSource::Lattice { bbox, jitter, keep_edge } => {
                crate::geo::BBox::new(bbox[0], bbox[1], bbox[2], bbox[3])?;
                if !(0.0..0.5).contains(jitter) || !(0.0..=1.0).contains(keep_edge) {
                    return bad("lattice jitter must be in [0, 0.5) and keep_edge in [0, 1]".into());
                }
            }
            NetworkSource::File { path } => must_exist(path)?,
        }
        if let Some(p) = &self.defense.domains {
            must_exist(p)?;
        }
        if let PredictorBinding::Remote(r) = &self.predictor {
            if r.max_in_flight == 0 {
                return bad("predictor.max_in_flight must be positive".into());
            }
        }
        Ok(())
    }
}

fn must_exist(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("file {} does not exist", p.display())))
    }
}
