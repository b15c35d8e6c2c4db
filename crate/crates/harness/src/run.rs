//! Experiment execution and metrics persistence.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use auxdistill::data::{dirichlet_partition, generate_synthetic, load_csv, Dataset};
use auxdistill::federation::{run_training_observed, FederationConfig, TrainingRun};
use auxdistill::model::Checkpoint;
use auxdistill::scoring::write_scores_csv;
use auxdistill::seed::derive_seed;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{HarnessError, Result};

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub method: String,
    pub alpha: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub mean_distill_loss: Option<f64>,
    /// Only written when wall-clock recording is enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

pub fn write_jsonl<W: Write>(records: &[RoundRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| HarnessError::io("<metrics>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<RoundRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| HarnessError::io("<metrics>", e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn load_source(cfg: &ExperimentConfig, source: &DataSource) -> Result<Dataset<f64>> {
    Ok(match source {
        DataSource::Csv { path, num_classes } => load_csv(cfg.resolve_path(path), *num_classes)?,
        DataSource::Synthetic { spec, n, seed } => generate_synthetic(spec, *n, *seed)?,
    })
}

/// Loaded and partitioned data plus the orchestrator configuration.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub federation: FederationConfig,
    pub shards: Vec<Dataset<f64>>,
    pub aux: Option<Dataset<f64>>,
    pub test: Dataset<f64>,
}

pub fn prepare_inputs(cfg: &ExperimentConfig) -> Result<Inputs> {
    cfg.validate()?;
    let train = load_source(cfg, &cfg.data.train)?;
    let test = load_source(cfg, &cfg.data.test)?;
    let aux = cfg.data.aux.as_ref().map(|s| load_source(cfg, s)).transpose()?;
    let labels = train
        .labels()
        .ok_or_else(|| HarnessError::Config("training data must be labeled".into()))?;
    if !test.is_labeled() {
        return Err(HarnessError::Config("test data must be labeled".into()));
    }
    let k = train.num_classes().max(test.num_classes());
    for (name, d) in [("test", Some(&test)), ("aux", aux.as_ref())] {
        if let Some(d) = d {
            if d.dim() != train.dim() {
                return Err(HarnessError::Config(format!(
                    "{name} data has {} features, training data {}",
                    d.dim(),
                    train.dim()
                )));
            }
        }
    }
    let federation = cfg.federation_config(train.dim(), k)?;
    let plan = dirichlet_partition(
        labels,
        federation.n_clients,
        cfg.alpha,
        derive_seed(cfg.seed, "partition", &[]),
    )?;
    let shards = plan.shards(&train)?;
    Ok(Inputs {
        federation,
        shards,
        aux,
        test,
    })
}

/// Runs the configured experiment in memory.
pub fn execute(cfg: &ExperimentConfig) -> Result<(Vec<RoundRecord>, TrainingRun<f64>)> {
    let inputs = prepare_inputs(cfg)?;
    let method = cfg.method_choice()?.to_string();
    let mut records = Vec::with_capacity(cfg.federation.rounds + 1);
    let mut clock = Instant::now();
    let run = run_training_observed(
        &inputs.federation,
        inputs.shards,
        inputs.aux.as_ref(),
        &inputs.test,
        |s| {
            let wall_ms = cfg.record_wall_clock.then(|| clock.elapsed().as_millis() as u64);
            clock = Instant::now();
            records.push(RoundRecord {
                round: s.round,
                method: method.clone(),
                alpha: cfg.alpha,
                seed: cfg.seed,
                accuracy: s.accuracy,
                mean_distill_loss: s.mean_distill_loss,
                wall_ms,
            });
        },
    )?;
    Ok((records, run))
}

/// Files written by [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    /// FedAUX only.
    pub scores: Option<PathBuf>,
    /// FedAUX only: the pre-trained extractor of each prototype.
    pub extractors: Vec<PathBuf>,
    pub records: Vec<RoundRecord>,
}

pub fn metrics_path(cfg: &ExperimentConfig) -> Result<PathBuf> {
    Ok(cfg.out_dir.join(format!("{}.jsonl", cfg.run_stem()?)))
}

pub fn scores_path(cfg: &ExperimentConfig) -> Result<PathBuf> {
    Ok(cfg.out_dir.join(format!("{}_scores.csv", cfg.run_stem()?)))
}

pub fn extractor_path(cfg: &ExperimentConfig, prototype: usize) -> Result<PathBuf> {
    Ok(cfg
        .out_dir
        .join(format!("{}_extractor_p{prototype}.json", cfg.run_stem()?)))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HarnessError::io(path, e))
}

/// Runs the experiment and writes metrics, final checkpoints and, for
/// FedAUX, the certainty scores and pre-trained extractors.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let (records, run) = execute(cfg)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| HarnessError::io(&cfg.out_dir, e))?;
    let stem = cfg.run_stem()?;

    let metrics = metrics_path(cfg)?;
    let mut w = create(&metrics)?;
    write_jsonl(&records, &mut w)?;
    w.flush().map_err(|e| HarnessError::io(&metrics, e))?;

    let mut checkpoints = Vec::new();
    for (p, model) in run.models.iter().enumerate() {
        let path = cfg.out_dir.join(format!("{stem}_model_p{p}.json"));
        Checkpoint::from_model(model).save(&path)?;
        checkpoints.push(path);
    }

    let mut scores = None;
    let mut extractors = Vec::new();
    if let Some(maps) = &run.preparation.score_maps {
        let path = scores_path(cfg)?;
        let table: Vec<(usize, Vec<f64>)> = maps.iter().cloned().enumerate().collect();
        write_scores_csv(&table, create(&path)?)?;
        scores = Some(path);
        for (p, ext) in run.preparation.extractors.iter().enumerate() {
            if let Some(ext) = ext {
                let path = extractor_path(cfg, p)?;
                Checkpoint::extractor_only(run.models[p].prototype(), ext.clone()).save(&path)?;
                extractors.push(path);
            }
        }
    }
    log::info!(
        "{stem}: final accuracy {:.4}",
        records.last().map_or(f64::NAN, |r| r.accuracy)
    );
    Ok(RunArtifacts {
        metrics,
        checkpoints,
        scores,
        extractors,
        records,
    })
}

pub fn load_metrics(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    let path = path.as_ref();
    read_jsonl(BufReader::new(File::open(path).map_err(|e| HarnessError::io(path, e))?))
}
