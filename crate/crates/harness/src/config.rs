//! Experiment configuration: a TOML file with nested sections, overridden by
//! command-line flags, validated before any data is touched.
//!
//! ```toml
//! method = "fedaux"          # fedavg | fedprox | feddf | fedaux, "+p" for pre-trained init
//! alpha = 0.01
//! seed = 3
//!
//! [federation]
//! n_clients = 10
//! participation = 0.4
//!
//! [privacy]
//! epsilon = 0.1
//!
//! [data.train]
//! source = "csv"
//! path = "train.csv"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use auxdistill::data::{circle_centers, SyntheticSpec};
use auxdistill::distill::DistillConfig;
use auxdistill::federation::{FederationConfig, Method};
use auxdistill::model::ModelPrototype;
use auxdistill::pretrain::PretrainConfig;
use auxdistill::scoring::{PrivacyParams, SolverOptions};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// A method plus the "+P" flag, written e.g. `FedDF+P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MethodChoice {
    pub method: Method,
    pub pretrained: bool,
}

impl MethodChoice {
    /// FedAUX always pre-trains, so its flag is forced on.
    pub fn new(method: Method, pretrained: bool) -> Self {
        Self {
            method,
            pretrained: pretrained || method == Method::FedAux,
        }
    }

    /// Lowercase form used in file names, e.g. `feddf_p`.
    pub fn file_tag(&self) -> String {
        let base = self.method.name().to_ascii_lowercase();
        if self.pretrained && self.method != Method::FedAux {
            format!("{base}_p")
        } else {
            base
        }
    }
}

impl fmt::Display for MethodChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // The suffix would be redundant for FedAUX.
        if self.pretrained && self.method != Method::FedAux {
            write!(f, "{}+P", self.method)
        } else {
            write!(f, "{}", self.method)
        }
    }
}

impl FromStr for MethodChoice {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (base, pretrained) = match s.strip_suffix("+P").or_else(|| s.strip_suffix("+p")) {
            Some(base) => (base, true),
            None => (s, false),
        };
        let method = base.parse::<Method>().map_err(|_| {
            HarnessError::Config(format!(
                "unknown method `{s}` (expected fedavg, fedprox, feddf or fedaux, optionally with +P)"
            ))
        })?;
        Ok(Self::new(method, pretrained))
    }
}

impl TryFrom<String> for MethodChoice {
    type Error = HarnessError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MethodChoice> for String {
    fn from(m: MethodChoice) -> Self {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub n_clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub local_lr: f64,
    pub local_batch_size: usize,
    pub prox_mu: f64,
    pub linear_eval_only: bool,
    pub distill_fraction: f64,
    /// Prototype index per client; empty puts every client on the first prototype.
    pub prototype_map: Vec<usize>,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            n_clients: 10,
            participation: 0.4,
            rounds: 5,
            local_epochs: 1,
            local_lr: 1e-3,
            local_batch_size: 32,
            prox_mu: 0.01,
            linear_eval_only: false,
            distill_fraction: 0.8,
            prototype_map: Vec::new(),
        }
    }
}

/// Architecture of one prototype; input width and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeSpec {
    pub id: String,
    pub hidden_layers: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for PrototypeSpec {
    fn default() -> Self {
        Self {
            id: "mlp".into(),
            hidden_layers: Vec::new(),
            feature_dim: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    pub epsilon: f64,
    pub delta: f64,
    pub lambda: f64,
    pub xi: f64,
    /// Fixed noise variance instead of the calibrated one; `0` disables sanitization.
    pub sigma_sq: Option<f64>,
}

impl Default for PrivacySection {
    fn default() -> Self {
        let p = PrivacyParams::default();
        Self {
            epsilon: p.epsilon,
            delta: p.delta,
            lambda: p.lambda,
            xi: p.xi,
            sigma_sq: None,
        }
    }
}

impl PrivacySection {
    pub fn params(&self) -> PrivacyParams {
        PrivacyParams {
            epsilon: self.epsilon,
            delta: self.delta,
            lambda: self.lambda,
            xi: self.xi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Relative paths are resolved against the config file's directory.
    Csv {
        path: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
    },
    Synthetic {
        spec: SyntheticSpec,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    pub test: DataSource,
    /// Unlabeled public data; labels in the source are ignored.
    #[serde(default)]
    pub aux: Option<DataSource>,
}

impl Default for DataConfig {
    /// Ten Gaussian classes on a circle in the plane (2000 train / 500
    /// test) with a broader, unlabeled version of the same mixture as public
    /// data.
    fn default() -> Self {
        let centers = circle_centers(10, 5.0);
        let blobs = |std: f64| SyntheticSpec::GaussianBlobs {
            centers: centers.clone(),
            std,
        };
        Self {
            train: DataSource::Synthetic {
                spec: blobs(1.0),
                n: 2000,
                seed: 1,
            },
            test: DataSource::Synthetic {
                spec: blobs(1.0),
                n: 500,
                seed: 2,
            },
            aux: Some(DataSource::Synthetic {
                spec: blobs(1.5),
                n: 2000,
                seed: 3,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub method: Option<MethodChoice>,
    /// Same as a "+P" suffix on `method`.
    #[serde(default)]
    pub pretrained_init: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Add per-round `wall_ms` to the metrics, which makes them non-reproducible.
    #[serde(default)]
    pub record_wall_clock: bool,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub prototypes: Vec<PrototypeSpec>,
    #[serde(default)]
    pub privacy: PrivacySection,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config is valid")
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub method: Option<MethodChoice>,
    pub alpha: Option<f64>,
    pub clients: Option<usize>,
    pub participation: Option<f64>,
    pub rounds: Option<usize>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub linear_eval: bool,
    pub one_shot: bool,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text)?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    /// Reads the file if given, applies the overrides and validates.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.method {
            self.method = Some(m);
            self.pretrained_init = m.pretrained;
        }
        if let Some(v) = o.alpha {
            self.alpha = v;
        }
        if let Some(v) = o.clients {
            self.federation.n_clients = v;
        }
        if let Some(v) = o.participation {
            self.federation.participation = v;
        }
        if let Some(v) = o.rounds {
            self.federation.rounds = v;
        }
        if let Some(v) = o.epsilon {
            self.privacy.epsilon = v;
        }
        if let Some(v) = o.delta {
            self.privacy.delta = v;
        }
        if let Some(v) = o.lambda {
            self.privacy.lambda = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if o.linear_eval {
            self.federation.linear_eval_only = true;
        }
        if o.one_shot {
            self.federation.rounds = 1;
            self.federation.participation = 1.0;
        }
        if let Some(dir) = &o.out {
            self.out_dir = dir.clone();
        }
    }

    pub fn method_choice(&self) -> Result<MethodChoice> {
        let m = self
            .method
            .ok_or_else(|| HarnessError::Config("no method given (set `method` or pass --method)".into()))?;
        Ok(MethodChoice::new(m.method, m.pretrained || self.pretrained_init))
    }

    pub fn prototype_specs(&self) -> Vec<PrototypeSpec> {
        if self.prototypes.is_empty() {
            vec![PrototypeSpec::default()]
        } else {
            self.prototypes.clone()
        }
    }

    /// Output file stem encoding method, α and seed.
    pub fn run_stem(&self) -> Result<String> {
        Ok(format!(
            "{}_alpha{}_seed{}",
            self.method_choice()?.file_tag(),
            self.alpha,
            self.seed
        ))
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Orchestrator configuration once the data dimensions are known.
    pub fn federation_config(&self, input_dim: usize, num_classes: usize) -> Result<FederationConfig> {
        let choice = self.method_choice()?;
        let f = &self.federation;
        let prototypes = self
            .prototype_specs()
            .into_iter()
            .map(|p| ModelPrototype::new(p.id, input_dim, p.hidden_layers, p.feature_dim, num_classes))
            .collect::<auxdistill::Result<Vec<_>>>()?;
        let cfg = FederationConfig {
            method: choice.method,
            pretrained_init: choice.pretrained,
            n_clients: f.n_clients,
            participation: f.participation,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            local_lr: f.local_lr,
            local_batch_size: f.local_batch_size,
            prox_mu: f.prox_mu,
            linear_eval_only: f.linear_eval_only,
            prototypes,
            prototype_map: f.prototype_map.clone(),
            privacy: self.privacy.params(),
            sigma_sq_override: self.privacy.sigma_sq,
            solver: self.solver,
            pretrain: self.pretrain,
            distill: self.distill,
            distill_fraction: f.distill_fraction,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Range checks plus fail-fast checks on the data sources.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(HarnessError::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        // Dimensions are placeholders; they only matter once data is loaded.
        let fed = self.federation_config(1, 2)?;
        let needs_aux = fed.needs_aux();
        match &self.data.aux {
            None if needs_aux => {
                return Err(HarnessError::Config(format!(
                    "{} needs auxiliary data but `data.aux` is not set",
                    self.method_choice()?
                )))
            }
            _ => {}
        }
        for (name, source) in [
            ("train", Some(&self.data.train)),
            ("test", Some(&self.data.test)),
            ("aux", self.data.aux.as_ref()),
        ] {
            match source {
                Some(DataSource::Csv { path, .. }) if !self.resolve_path(path).is_file() => {
                    return Err(HarnessError::Config(format!(
                        "{name} data file {} does not exist",
                        self.resolve_path(path).display()
                    )))
                }
                Some(DataSource::Synthetic { n: 0, .. }) => {
                    return Err(HarnessError::Config(format!(
                        "{name} data must have at least one sample"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}
