//! Round-based federated training: FedAVG, FedPROX, FedDF and FedAUX.
//!
//! A run has a preparation phase (auxiliary split, extractor pre-training,
//! scoring heads) followed by `T` communication rounds. Every round selects a
//! seeded client subset, trains it locally, averages parameters per prototype
//! and, for the distillation methods, distills an ensemble teacher into every
//! prototype on the public distillation data.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{mean_logits, weighted_logits, SoftLabelBatch};
use crate::data::{minibatches, split_auxiliary, AuxSplit, Dataset, DEFAULT_DISTILL_FRACTION};
use crate::distill::{distill, DistillConfig};
use crate::error::{Error, Result};
use crate::model::{average_parameters, HeadInit, Model, ModelPrototype};
use crate::numeric::{LossKind, Matrix, OptimizerState};
use crate::pretrain::{train_feature_extractor, PretrainConfig};
use crate::scalar::Scalar;
use crate::scoring::{PrivacyParams, Sanitization, ScoringHead, SolverOptions};
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fedavg", alias = "FedAVG")]
    FedAvg,
    #[serde(rename = "fedprox", alias = "FedPROX")]
    FedProx,
    #[serde(rename = "feddf", alias = "FedDF")]
    FedDf,
    #[serde(rename = "fedaux", alias = "FedAUX")]
    FedAux,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::FedAvg, Method::FedProx, Method::FedDf, Method::FedAux];

    pub fn distills(self) -> bool {
        matches!(self, Method::FedDf | Method::FedAux)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::FedAvg => "FedAVG",
            Method::FedProx => "FedPROX",
            Method::FedDf => "FedDF",
            Method::FedAux => "FedAUX",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Method::FedAvg),
            "fedprox" => Ok(Method::FedProx),
            "feddf" => Ok(Method::FedDf),
            "fedaux" => Ok(Method::FedAux),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub method: Method,
    /// Initialize extractors from self-supervised pre-training ("+P").
    pub pretrained_init: bool,
    pub n_clients: usize,
    /// Fraction `C` of clients selected per round.
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub local_lr: f64,
    pub local_batch_size: usize,
    /// Proximal strength, used by FedPROX only.
    pub prox_mu: f64,
    /// Train only the classification head on clients.
    pub linear_eval_only: bool,
    pub prototypes: Vec<ModelPrototype>,
    /// Prototype index of every client; empty maps every client to prototype 0.
    pub prototype_map: Vec<usize>,
    pub privacy: PrivacyParams,
    /// Replaces the calibrated noise variance of the scoring heads.
    pub sigma_sq_override: Option<f64>,
    pub solver: SolverOptions,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    pub distill_fraction: f64,
    pub seed: u64,
}

impl FederationConfig {
    /// Defaults for everything except the method, client count and prototype.
    pub fn new(method: Method, n_clients: usize, prototype: ModelPrototype) -> Self {
        Self {
            method,
            pretrained_init: false,
            n_clients,
            participation: 1.0,
            rounds: 1,
            local_epochs: 1,
            local_lr: 1e-3,
            local_batch_size: 32,
            prox_mu: 0.01,
            linear_eval_only: false,
            prototypes: vec![prototype],
            prototype_map: Vec::new(),
            privacy: PrivacyParams::default(),
            sigma_sq_override: None,
            solver: SolverOptions::default(),
            pretrain: PretrainConfig::default(),
            distill: DistillConfig::default(),
            distill_fraction: DEFAULT_DISTILL_FRACTION,
            seed: 0,
        }
    }

    /// Single round with every client participating.
    pub fn one_shot(mut self) -> Self {
        self.rounds = 1;
        self.participation = 1.0;
        self
    }

    /// FedAUX always pre-trains; the other methods only in their "+P" form.
    pub fn uses_pretraining(&self) -> bool {
        self.pretrained_init || self.method == Method::FedAux
    }

    pub fn needs_aux(&self) -> bool {
        self.method.distills() || self.uses_pretraining()
    }

    pub fn clients_per_round(&self) -> usize {
        ((self.participation * self.n_clients as f64).ceil() as usize).clamp(1, self.n_clients.max(1))
    }

    pub fn prototype_of(&self, client: usize) -> usize {
        self.prototype_map.get(client).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::Config("n_clients must be at least 1".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config(format!(
                "participation must lie in (0, 1], got {}",
                self.participation
            )));
        }
        if !(self.local_lr >= 0.0) || !self.local_lr.is_finite() {
            return Err(Error::Config(format!(
                "local_lr must be non-negative, got {}",
                self.local_lr
            )));
        }
        if self.local_batch_size == 0 {
            return Err(Error::Config("local_batch_size must be at least 1".into()));
        }
        if !(self.prox_mu >= 0.0) || !self.prox_mu.is_finite() {
            return Err(Error::Config(format!(
                "prox_mu must be non-negative, got {}",
                self.prox_mu
            )));
        }
        if !(self.distill_fraction > 0.0 && self.distill_fraction < 1.0) {
            return Err(Error::Config(format!(
                "distill_fraction must lie in (0, 1), got {}",
                self.distill_fraction
            )));
        }
        if self.prototypes.is_empty() {
            return Err(Error::Config("at least one model prototype is required".into()));
        }
        for p in &self.prototypes {
            p.validate()?;
        }
        let (d, k) = (self.prototypes[0].input_dim, self.prototypes[0].num_classes);
        if self.prototypes.iter().any(|p| p.input_dim != d || p.num_classes != k) {
            return Err(Error::Config(
                "prototypes must agree on input_dim and num_classes".into(),
            ));
        }
        if !self.prototype_map.is_empty() {
            if self.prototype_map.len() != self.n_clients {
                return Err(Error::Config(format!(
                    "prototype_map has {} entries for {} clients",
                    self.prototype_map.len(),
                    self.n_clients
                )));
            }
            if let Some(&bad) = self.prototype_map.iter().find(|&&p| p >= self.prototypes.len()) {
                return Err(Error::Config(format!(
                    "prototype_map refers to missing prototype {bad}"
                )));
            }
        }
        if let Some(s) = self.sigma_sq_override {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::Config(format!(
                    "sigma_sq_override must be non-negative, got {s}"
                )));
            }
        }
        self.privacy.validate()?;
        self.distill.validate()?;
        self.pretrain.validate()?;
        Ok(())
    }
}

/// A simulated client: private data, prototype assignment and (after
/// preparation, FedAUX only) its released scoring head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState<T> {
    pub id: usize,
    pub dataset: Dataset<T>,
    pub prototype: usize,
    pub scoring_head: Option<ScoringHead<T>>,
}

impl<T: Scalar> ClientState<T> {
    /// One client per dataset, prototypes assigned from the config.
    pub fn from_shards(shards: Vec<Dataset<T>>, cfg: &FederationConfig) -> Vec<Self> {
        shards
            .into_iter()
            .enumerate()
            .map(|(id, dataset)| Self {
                id,
                dataset,
                prototype: cfg.prototype_of(id),
                scoring_head: None,
            })
            .collect()
    }
}

/// Everything the server holds after the preparation phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Preparation<T> {
    pub split: Option<AuxSplit<T>>,
    /// Pre-trained extractor per prototype.
    pub extractors: Vec<Option<Vec<T>>>,
    /// Per-client certainty scores over the distillation data (FedAUX only).
    pub score_maps: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> Preparation<T> {
    pub fn distill_data(&self) -> Option<&Matrix<T>> {
        self.split.as_ref().map(|s| s.distill.features())
    }
}

/// The seeded negatives / distillation split a run uses.
pub fn auxiliary_split<T: Scalar>(cfg: &FederationConfig, aux: &Dataset<T>) -> Result<AuxSplit<T>> {
    split_auxiliary(
        &aux.without_labels(),
        cfg.distill_fraction,
        derive_seed(cfg.seed, "aux-split", &[]),
    )
}

/// Splits the auxiliary data, pre-trains extractors and, for FedAUX, fits and
/// releases each client's scoring head and evaluates it on the distillation data.
///
/// This is the only place where client data is read outside local training.
pub fn run_preparation<T: Scalar>(
    cfg: &FederationConfig,
    clients: &mut [ClientState<T>],
    aux: Option<&Dataset<T>>,
) -> Result<Preparation<T>> {
    cfg.validate()?;
    let aux = match aux {
        Some(a) if !a.is_empty() => Some(a),
        _ if cfg.needs_aux() => {
            return Err(Error::Config(format!(
                "{} requires auxiliary data{}",
                cfg.method,
                if cfg.pretrained_init { " (pre-trained init)" } else { "" }
            )))
        }
        _ => None,
    };
    let Some(aux) = aux else {
        return Ok(Preparation {
            split: None,
            extractors: vec![None; cfg.prototypes.len()],
            score_maps: None,
        });
    };
    let aux = aux.without_labels();
    let split = auxiliary_split(cfg, &aux)?;

    let extractors = if cfg.uses_pretraining() {
        cfg.prototypes
            .par_iter()
            .enumerate()
            .map(|(p, proto)| {
                let pc = PretrainConfig {
                    seed: derive_seed(cfg.seed, "pretrain", &[p as u64]),
                    ..cfg.pretrain
                };
                train_feature_extractor(proto, &aux, &pc).map(|o| Some(o.extractor))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![None; cfg.prototypes.len()]
    };

    let score_maps = if cfg.method == Method::FedAux {
        let feature_models: Vec<Model<T>> = cfg
            .prototypes
            .iter()
            .zip(&extractors)
            .map(|(proto, ext)| {
                let mut m = Model::zeros(proto)?;
                m.set_extractor_params(ext.as_deref().expect("FedAUX pre-trains every prototype"))?;
                Ok(m)
            })
            .collect::<Result<_>>()?;
        let heads = clients
            .par_iter()
            .map(|c| {
                if c.dataset.is_empty() {
                    return Err(Error::Client {
                        client: c.id,
                        reason: "empty local dataset".into(),
                    });
                }
                let fm = &feature_models[c.prototype];
                let local = fm.features(c.dataset.features())?;
                let negative = fm.features(split.negatives.features())?;
                let sanitization = match cfg.sigma_sq_override {
                    Some(sigma_sq) => Sanitization::Fixed {
                        sigma_sq,
                        seed: derive_seed(cfg.seed, "sanitize", &[c.id as u64]),
                    },
                    None => Sanitization::Calibrated {
                        seed: derive_seed(cfg.seed, "sanitize", &[c.id as u64]),
                    },
                };
                ScoringHead::fit(&local, &negative, &cfg.privacy, cfg.solver, sanitization)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut maps = Vec::with_capacity(clients.len());
        for (c, head) in clients.iter_mut().zip(heads) {
            let features = feature_models[c.prototype].features(split.distill.features())?;
            maps.push(head.score(&features)?);
            c.scoring_head = Some(head);
        }
        Some(maps)
    } else {
        None
    };

    Ok(Preparation {
        split: Some(split),
        extractors,
        score_maps,
    })
}

/// Initial server model of every prototype.
pub fn initial_models<T: Scalar>(cfg: &FederationConfig, prep: &Preparation<T>) -> Result<Vec<Model<T>>> {
    cfg.prototypes
        .iter()
        .enumerate()
        .map(|(p, proto)| {
            let m = Model::seeded(proto, derive_seed(cfg.seed, "global-init", &[p as u64]))?;
            match (&prep.extractors[p], cfg.uses_pretraining()) {
                (Some(ext), true) => m.clone_with_extractor(ext, HeadInit::Zeros),
                _ => Ok(m),
            }
        })
        .collect()
}

/// `E` epochs of mini-batch cross-entropy (plus the proximal term for
/// FedPROX) with a fresh Adam state. `round` only selects the batch order.
pub fn local_train<T: Scalar>(
    client: &ClientState<T>,
    init: &Model<T>,
    cfg: &FederationConfig,
    round: usize,
) -> Result<Model<T>> {
    if client.dataset.is_empty() {
        return Err(Error::Client {
            client: client.id,
            reason: "empty local dataset".into(),
        });
    }
    let expected = &cfg.prototypes[client.prototype];
    if init.prototype() != expected {
        return Err(Error::Prototype {
            expected: expected.id.clone(),
            actual: init.prototype().id.clone(),
        });
    }
    let labels = client.dataset.require_labels().map_err(|_| Error::Client {
        client: client.id,
        reason: "local dataset has no labels".into(),
    })?;
    let mut model = init.clone();
    let anchor = init.params();
    let frozen = if cfg.linear_eval_only {
        model.extractor_param_count()
    } else {
        0
    };
    let mut opt = OptimizerState::adam(T::of(cfg.local_lr), model.param_count())?;
    let x = client.dataset.features();
    let k = init.prototype().num_classes;
    for epoch in 0..cfg.local_epochs {
        let seed = derive_seed(cfg.seed, "local", &[round as u64, client.id as u64, epoch as u64]);
        for idx in minibatches(x.rows(), cfg.local_batch_size, seed) {
            let batch = x.select_rows(&idx);
            let mut target = Matrix::zeros(idx.len(), k);
            for (r, &i) in idx.iter().enumerate() {
                target.set(r, labels[i], T::one());
            }
            let loss = match cfg.method {
                Method::FedProx => LossKind::Proximal {
                    mu: T::of(cfg.prox_mu),
                    anchor: &anchor,
                },
                _ => LossKind::CrossEntropy,
            };
            let (_, mut grad) = model.loss_and_gradient(&batch, &target, loss)?;
            grad[..frozen].iter_mut().for_each(|g| *g = T::zero());
            let mut params = model.params();
            opt.step(&mut params, &grad)?;
            params[..frozen].copy_from_slice(&anchor[..frozen]);
            model.set_params(&params)?;
        }
    }
    if model.params().iter().any(|v| !v.is_finite()) {
        return Err(Error::Client {
            client: client.id,
            reason: "local training diverged".into(),
        });
    }
    Ok(model)
}

/// Seeded subset of `⌈C·n⌉` clients, ascending. Depends only on the seed and
/// the round, never on the method.
pub fn select_clients(cfg: &FederationConfig, round: usize) -> Vec<usize> {
    let mut rng = rng_for(cfg.seed, "select", &[round as u64]);
    let mut s = sample(&mut rng, cfg.n_clients, cfg.clients_per_round()).into_vec();
    s.sort_unstable();
    s
}

/// What happened in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub selected: Vec<usize>,
    /// Mean over prototypes of the distillation loss, for distilling methods.
    pub mean_distill_loss: Option<f64>,
}

/// One communication round, updating `globals` (one model per prototype).
///
/// `score_maps` are needed for FedAUX; `distill_data` for FedDF and FedAUX.
pub fn run_round<T: Scalar>(
    round: usize,
    globals: &mut [Model<T>],
    clients: &[ClientState<T>],
    cfg: &FederationConfig,
    score_maps: Option<&[Vec<T>]>,
    distill_data: Option<&Matrix<T>>,
) -> Result<RoundOutcome> {
    if round == 0 {
        return Err(Error::Argument("rounds are numbered from 1".into()));
    }
    if clients.len() != cfg.n_clients {
        return Err(Error::Config(format!(
            "{} clients given, config declares {}",
            clients.len(),
            cfg.n_clients
        )));
    }
    if globals.len() != cfg.prototypes.len() {
        return Err(Error::dim("global models", cfg.prototypes.len(), globals.len()));
    }
    let selected = select_clients(cfg, round);
    if selected.is_empty() {
        return Err(Error::Config("no clients selected".into()));
    }

    let locals: Vec<Model<T>> = selected
        .par_iter()
        .map(|&i| local_train(&clients[i], &globals[clients[i].prototype], cfg, round))
        .collect::<Result<_>>()?;

    for (p, global) in globals.iter_mut().enumerate() {
        let members: Vec<(&Model<T>, T)> = selected
            .iter()
            .zip(&locals)
            .filter(|(&i, _)| clients[i].prototype == p)
            .map(|(&i, m)| (m, T::of_usize(clients[i].dataset.len())))
            .collect();
        if !members.is_empty() {
            *global = average_parameters(&members)?;
        }
    }

    let mut mean_distill_loss = None;
    if cfg.method.distills() {
        let data = distill_data.ok_or_else(|| Error::Config(format!("{} needs distillation data", cfg.method)))?;
        let logits: Vec<Matrix<T>> = locals.par_iter().map(|m| m.logits(data)).collect::<Result<_>>()?;
        let combined = match cfg.method {
            Method::FedAux => {
                let maps = score_maps.ok_or_else(|| Error::Config("FedAUX needs score maps".into()))?;
                if maps.len() != clients.len() {
                    return Err(Error::dim("score maps", clients.len(), maps.len()));
                }
                let scores: Vec<Vec<T>> = selected.iter().map(|&i| maps[i].clone()).collect();
                weighted_logits(&logits, &scores)?
            }
            _ => mean_logits(&logits)?,
        };
        let teacher = SoftLabelBatch::from_logits(&combined, T::of(cfg.distill.temperature))?;
        let losses: Vec<Option<f64>> = globals
            .iter_mut()
            .enumerate()
            .map(|(p, global)| {
                let dc = DistillConfig {
                    seed: derive_seed(cfg.seed, "distill", &[round as u64, p as u64]),
                    ..cfg.distill
                };
                distill(global, data, &teacher, &dc).map(|r| r.mean_loss())
            })
            .collect::<Result<_>>()?;
        let losses: Vec<f64> = losses.into_iter().flatten().collect();
        if !losses.is_empty() {
            mean_distill_loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
        }
    }
    Ok(RoundOutcome {
        selected,
        mean_distill_loss,
    })
}

/// Server-side evaluation after a round (round 0 is the initial model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    /// Mean over prototypes of the top-1 test accuracy.
    pub accuracy: f64,
    pub prototype_accuracy: Vec<f64>,
    pub mean_distill_loss: Option<f64>,
    pub selected: Vec<usize>,
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct TrainingRun<T> {
    pub summaries: Vec<RoundSummary>,
    pub models: Vec<Model<T>>,
    pub clients: Vec<ClientState<T>>,
    pub preparation: Preparation<T>,
}

fn evaluate<T: Scalar>(models: &[Model<T>], test: &Dataset<T>) -> Result<(f64, Vec<f64>)> {
    let labels = test.require_labels()?;
    let per: Vec<f64> = models
        .iter()
        .map(|m| m.accuracy(test.features(), labels))
        .collect::<Result<_>>()?;
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

/// Preparation followed by `cfg.rounds` rounds, evaluating after each.
pub fn run_training<T: Scalar>(
    cfg: &FederationConfig,
    shards: Vec<Dataset<T>>,
    aux: Option<&Dataset<T>>,
    test: &Dataset<T>,
) -> Result<TrainingRun<T>> {
    run_training_observed(cfg, shards, aux, test, |_| {})
}

/// [`run_training`], calling `observe` as soon as each summary (round 0
/// included) is available.
pub fn run_training_observed<T: Scalar>(
    cfg: &FederationConfig,
    shards: Vec<Dataset<T>>,
    aux: Option<&Dataset<T>>,
    test: &Dataset<T>,
    mut observe: impl FnMut(&RoundSummary),
) -> Result<TrainingRun<T>> {
    cfg.validate()?;
    if shards.len() != cfg.n_clients {
        return Err(Error::Config(format!(
            "{} client shards for {} clients",
            shards.len(),
            cfg.n_clients
        )));
    }
    let mut clients = ClientState::from_shards(shards, cfg);
    let preparation = run_preparation(cfg, &mut clients, aux)?;
    let mut models = initial_models(cfg, &preparation)?;
    let (accuracy, prototype_accuracy) = evaluate(&models, test)?;
    let mut summaries = vec![RoundSummary {
        round: 0,
        accuracy,
        prototype_accuracy,
        mean_distill_loss: None,
        selected: Vec::new(),
    }];
    observe(&summaries[0]);
    for t in 1..=cfg.rounds {
        let outcome = run_round(
            t,
            &mut models,
            &clients,
            cfg,
            preparation.score_maps.as_deref(),
            preparation.distill_data(),
        )?;
        let (accuracy, prototype_accuracy) = evaluate(&models, test)?;
        log::debug!("round {t}: accuracy {accuracy:.4}");
        summaries.push(RoundSummary {
            round: t,
            accuracy,
            prototype_accuracy,
            mean_distill_loss: outcome.mean_distill_loss,
            selected: outcome.selected,
        });
        observe(&summaries[t]);
    }
    Ok(TrainingRun {
        summaries,
        models,
        clients,
        preparation,
    })
}
