//! Empirical privacy audit: for every client, the public samples it scores
//! highest, next to their nearest private neighbors in the pre-trained
//! feature space. Visually similar pairs would indicate leakage.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::PathBuf;

use auxdistill::federation::{auxiliary_split, Method};
use auxdistill::model::{Checkpoint, Model};
use auxdistill::numeric::{dot, norm, Matrix};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::run::{extractor_path, prepare_inputs, scores_path};

/// Number of top-scored distillation samples reported per client.
pub const TOP_SAMPLES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub client_id: usize,
    /// Position among the client's top-scored samples, starting at 0.
    pub rank: usize,
    pub distill_sample_index: usize,
    pub score: f64,
    /// Local sample indices, most similar first.
    pub neighbor_indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

/// `⟨a,b⟩ / (‖a‖‖b‖)`; zero when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        (dot(a, b) / denom).clamp(-1.0, 1.0)
    }
}

/// Indices of the `k` largest values, ties broken by ascending index.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Audit table over extractor features.
///
/// `distill_features[c]` and `local_features[c]` are client `c`'s view of
/// the distillation and local data (clients on different prototypes see
/// different features).
pub fn privacy_audit(
    distill_features: &[Matrix<f64>],
    local_features: &[Matrix<f64>],
    scores: &[Vec<f64>],
    k: usize,
) -> Result<Vec<AuditEntry>> {
    if distill_features.len() != scores.len() || local_features.len() != scores.len() {
        return Err(HarnessError::Argument(format!(
            "audit inputs disagree on the client count: {} distill views, {} local views, {} score maps",
            distill_features.len(),
            local_features.len(),
            scores.len()
        )));
    }
    let mut out = Vec::new();
    for (client, s) in scores.iter().enumerate() {
        let distill = &distill_features[client];
        let local = &local_features[client];
        if s.len() != distill.rows() {
            return Err(HarnessError::Argument(format!(
                "client {client} has {} scores for {} distillation samples",
                s.len(),
                distill.rows()
            )));
        }
        for (rank, i) in top_k(s, TOP_SAMPLES).into_iter().enumerate() {
            let sims: Vec<f64> = local
                .iter_rows()
                .map(|row| cosine_similarity(distill.row(i), row))
                .collect();
            let neighbor_indices = top_k(&sims, k);
            out.push(AuditEntry {
                client_id: client,
                rank,
                distill_sample_index: i,
                score: s[i],
                similarities: neighbor_indices.iter().map(|&j| sims[j]).collect(),
                neighbor_indices,
            });
        }
    }
    Ok(out)
}

/// Neighbor lists are `;`-separated inside their cell.
pub fn write_audit_csv<W: Write>(entries: &[AuditEntry], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "client_id",
        "rank",
        "distill_sample_index",
        "score",
        "neighbor_indices",
        "similarities",
    ])?;
    let join = |v: Vec<String>| v.join(";");
    for e in entries {
        w.write_record([
            e.client_id.to_string(),
            e.rank.to_string(),
            e.distill_sample_index.to_string(),
            e.score.to_string(),
            join(e.neighbor_indices.iter().map(usize::to_string).collect()),
            join(e.similarities.iter().map(f64::to_string).collect()),
        ])?;
    }
    w.flush().map_err(|e| HarnessError::io("<audit>", e))?;
    Ok(())
}

/// Parses a `sample_index,client_id,score` table into per-client score vectors.
pub fn read_scores_csv<R: Read>(reader: R) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut maps: Vec<Vec<(usize, f64)>> = Vec::new();
    for rec in rdr.deserialize() {
        let (sample, client, score): (usize, usize, f64) = rec?;
        if maps.len() <= client {
            maps.resize_with(client + 1, Vec::new);
        }
        maps[client].push((sample, score));
    }
    maps.into_iter()
        .enumerate()
        .map(|(client, mut m)| {
            m.sort_by_key(|&(i, _)| i);
            if m.iter().enumerate().any(|(pos, &(i, _))| pos != i) {
                return Err(HarnessError::Argument(format!(
                    "scores of client {client} are not a contiguous index range"
                )));
            }
            Ok(m.into_iter().map(|(_, s)| s).collect())
        })
        .collect()
}

/// Audits a finished FedAUX run: reloads its scores and extractors from the
/// output directory, rebuilds the client shards and distillation data from
/// the config, and writes `<stem>_audit.csv`.
pub fn audit_run(cfg: &ExperimentConfig, k: usize) -> Result<(Vec<AuditEntry>, PathBuf)> {
    if cfg.method_choice()?.method != Method::FedAux {
        return Err(HarnessError::Argument(format!(
            "the privacy audit needs a FedAUX run, config describes {}",
            cfg.method_choice()?
        )));
    }
    let scores_file = scores_path(cfg)?;
    if !scores_file.is_file() {
        return Err(HarnessError::Argument(format!(
            "no FedAUX artifacts at {} (run the experiment first)",
            scores_file.display()
        )));
    }
    let scores = read_scores_csv(BufReader::new(
        File::open(&scores_file).map_err(|e| HarnessError::io(&scores_file, e))?,
    ))?;

    let inputs = prepare_inputs(cfg)?;
    let fed = &inputs.federation;
    let aux = inputs
        .aux
        .as_ref()
        .ok_or_else(|| HarnessError::Argument("run has no auxiliary data".into()))?;
    let split = auxiliary_split(fed, aux)?;
    let extractors: Vec<Model<f64>> = (0..fed.prototypes.len())
        .map(|p| {
            let path = extractor_path(cfg, p)?;
            if !path.is_file() {
                return Err(HarnessError::Argument(format!(
                    "missing extractor checkpoint {}",
                    path.display()
                )));
            }
            Ok(Checkpoint::<f64>::load(&path)?.to_model()?)
        })
        .collect::<Result<_>>()?;
    if scores.len() != inputs.shards.len() {
        return Err(HarnessError::Argument(format!(
            "score table covers {} clients, config has {}",
            scores.len(),
            inputs.shards.len()
        )));
    }
    let mut distill_views = Vec::with_capacity(scores.len());
    let mut local_views = Vec::with_capacity(scores.len());
    for (c, shard) in inputs.shards.iter().enumerate() {
        let h = &extractors[fed.prototype_of(c)];
        distill_views.push(h.features(split.distill.features())?);
        local_views.push(h.features(shard.features())?);
    }
    let entries = privacy_audit(&distill_views, &local_views, &scores, k)?;
    let path = cfg.out_dir.join(format!("{}_audit.csv", cfg.run_stem()?));
    write_audit_csv(&entries, File::create(&path).map_err(|e| HarnessError::io(&path, e))?)?;
    Ok((entries, path))
}
