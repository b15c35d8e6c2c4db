//! Checks that normalized certainty scores track true density ratios on a
//! toy problem with known Gaussian client distributions.

use std::io::Write;

use auxdistill::numeric::Matrix;
use auxdistill::scoring::{PrivacyParams, Sanitization, ScoringHead, SolverOptions};
use auxdistill::seed::rng_for;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Bivariate normal distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl Gaussian2 {
    pub fn isotropic(mean: [f64; 2], variance: f64) -> Self {
        Self {
            mean,
            cov: [[variance, 0.0], [0.0, variance]],
        }
    }

    fn det(&self) -> f64 {
        self.cov[0][0] * self.cov[1][1] - self.cov[0][1] * self.cov[1][0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.cov;
        let finite = self.mean.iter().chain(c.iter().flatten()).all(|v| v.is_finite());
        if !finite || c[0][1] != c[1][0] || !(c[0][0] > 0.0) || !(self.det() > 0.0) {
            return Err(HarnessError::Spec(format!(
                "covariance {c:?} is not symmetric positive definite"
            )));
        }
        Ok(())
    }

    pub fn pdf(&self, x: [f64; 2]) -> f64 {
        let det = self.det();
        let (dx, dy) = (x[0] - self.mean[0], x[1] - self.mean[1]);
        let c = self.cov;
        let q = (c[1][1] * dx * dx - 2.0 * c[0][1] * dx * dy + c[0][0] * dy * dy) / det;
        (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
    }

    /// Cholesky-factor sampling.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<[f64; 2]> {
        let l00 = self.cov[0][0].sqrt();
        let l10 = self.cov[1][0] / l00;
        let l11 = (self.cov[1][1] - l10 * l10).sqrt();
        (0..n)
            .map(|_| {
                let z0: f64 = rng.sample(StandardNormal);
                let z1: f64 = rng.sample(StandardNormal);
                [self.mean[0] + l00 * z0, self.mean[1] + l10 * z0 + l11 * z1]
            })
            .collect()
    }
}

/// Fixed lifting of 2-D points before the linear scoring head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// `[x, y]`
    Identity,
    /// `[1, x, y]`
    Affine,
    /// `[1, x, y, x², xy, y²]`, under which Gaussian log-density ratios are linear.
    Quadratic,
}

impl FeatureMap {
    pub fn dim(self) -> usize {
        match self {
            FeatureMap::Identity => 2,
            FeatureMap::Affine => 3,
            FeatureMap::Quadratic => 6,
        }
    }

    pub fn apply(self, points: &[[f64; 2]]) -> Matrix<f64> {
        let mut data = Vec::with_capacity(points.len() * self.dim());
        for &[x, y] in points {
            if self != FeatureMap::Identity {
                data.push(1.0);
            }
            data.extend_from_slice(&[x, y]);
            if self == FeatureMap::Quadratic {
                data.extend_from_slice(&[x * x, x * y, y * y]);
            }
        }
        Matrix::from_vec(points.len(), self.dim(), data).expect("row-major layout matches")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub min: [f64; 2],
    pub max: [f64; 2],
    /// Points per axis.
    pub steps: usize,
}

impl Grid {
    pub fn points(&self) -> Vec<[f64; 2]> {
        let at = |a: usize, i: usize| {
            if self.steps == 1 {
                0.5 * (self.min[a] + self.max[a])
            } else {
                self.min[a] + (self.max[a] - self.min[a]) * i as f64 / (self.steps - 1) as f64
            }
        };
        (0..self.steps)
            .flat_map(|i| (0..self.steps).map(move |j| (i, j)))
            .map(|(i, j)| [at(0, i), at(1, j)])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub clients: Vec<Gaussian2>,
    /// Distribution of the shared negative (public) samples.
    pub negative: Gaussian2,
    pub n_local: usize,
    pub n_negative: usize,
    pub lambda: f64,
    pub feature_map: FeatureMap,
    pub grid: Grid,
    /// Grid points whose mixture density is below this fraction of the
    /// maximum are outside the support and excluded from the correlation.
    pub support_floor: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    /// Three well separated clients around the origin and a broad negative
    /// distribution covering all of them.
    fn default() -> Self {
        let r = 2.5;
        let means = (0..3).map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
            [r * t.cos(), r * t.sin()]
        });
        Self {
            clients: means.map(|m| Gaussian2::isotropic(m, 1.0)).collect(),
            negative: Gaussian2::isotropic([0.0, 0.0], 9.0),
            n_local: 500,
            n_negative: 2000,
            lambda: PrivacyParams::default().lambda,
            feature_map: FeatureMap::Identity,
            grid: Grid {
                min: [-6.0, -6.0],
                max: [6.0, 6.0],
                steps: 41,
            },
            support_floor: 1e-3,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(HarnessError::Spec(
                "at least one client distribution is required".into(),
            ));
        }
        for g in self.clients.iter().chain([&self.negative]) {
            g.validate()?;
        }
        if self.n_local == 0 || self.n_negative == 0 || self.grid.steps == 0 {
            return Err(HarnessError::Spec(
                "sample counts and grid steps must be positive".into(),
            ));
        }
        if !(self.lambda > 0.0) {
            return Err(HarnessError::Spec(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.support_floor) {
            return Err(HarnessError::Spec(format!(
                "support_floor must lie in [0, 1), got {}",
                self.support_floor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityRow {
    pub point: [f64; 2],
    /// `s_i(x) / Σ_j s_j(x)` per client.
    pub normalized_scores: Vec<f64>,
    /// `D_i(x) / Σ_j D_j(x)` per client.
    pub density_ratios: Vec<f64>,
    pub in_support: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityReport {
    pub rows: Vec<DensityRow>,
    /// Pearson correlation per client over the in-support points; `None`
    /// when either field is constant there.
    pub correlations: Vec<Option<f64>>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let denom = (saa * sbb).sqrt();
    // Relative guard: numerically constant fields have no meaningful correlation.
    if denom <= 1e-12 * n {
        None
    } else {
        Some(sab / denom)
    }
}

/// Fits a noiseless scoring head per client against the shared negatives and
/// compares both normalized fields on the grid.
pub fn score_density_report(spec: &ToySpec) -> Result<DensityReport> {
    spec.validate()?;
    let privacy = PrivacyParams {
        lambda: spec.lambda,
        ..PrivacyParams::default()
    };
    let fmap = spec.feature_map;
    let negatives = fmap.apply(
        &spec
            .negative
            .sample(spec.n_negative, &mut rng_for(spec.seed, "toy-negatives", &[])),
    );
    let points = spec.grid.points();
    let grid_features = fmap.apply(&points);

    let mut scores = Vec::with_capacity(spec.clients.len());
    for (i, g) in spec.clients.iter().enumerate() {
        let local = fmap.apply(&g.sample(spec.n_local, &mut rng_for(spec.seed, "toy-local", &[i as u64])));
        let head = ScoringHead::fit(
            &local,
            &negatives,
            &privacy,
            SolverOptions::default(),
            Sanitization::Disabled,
        )?;
        scores.push(head.score(&grid_features)?);
    }

    let densities: Vec<Vec<f64>> = points
        .iter()
        .map(|&p| spec.clients.iter().map(|g| g.pdf(p)).collect())
        .collect();
    let mixture: Vec<f64> = densities.iter().map(|d| d.iter().sum()).collect();
    let peak = mixture.iter().copied().fold(0.0, f64::max);

    let rows: Vec<DensityRow> = points
        .iter()
        .enumerate()
        .map(|(r, &point)| {
            let s_total: f64 = scores.iter().map(|s| s[r]).sum();
            let normalized_scores = scores.iter().map(|s| s[r] / s_total).collect();
            let density_ratios = if mixture[r] > 0.0 {
                densities[r].iter().map(|d| d / mixture[r]).collect()
            } else {
                vec![1.0 / spec.clients.len() as f64; spec.clients.len()]
            };
            DensityRow {
                point,
                normalized_scores,
                density_ratios,
                in_support: mixture[r] >= spec.support_floor * peak,
            }
        })
        .collect();

    let correlations = (0..spec.clients.len())
        .map(|i| {
            let (a, b): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.in_support)
                .map(|r| (r.normalized_scores[i], r.density_ratios[i]))
                .unzip();
            pearson(&a, &b)
        })
        .collect();
    Ok(DensityReport { rows, correlations })
}

/// Plot-ready table: `x,y,in_support,score_0,ratio_0,score_1,ratio_1,...`.
pub fn write_density_csv<W: Write>(report: &DensityReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let k = report.correlations.len();
    let mut header = vec!["x".to_string(), "y".to_string(), "in_support".to_string()];
    for i in 0..k {
        header.push(format!("score_{i}"));
        header.push(format!("ratio_{i}"));
    }
    w.write_record(&header)?;
    for row in &report.rows {
        let mut rec = vec![
            row.point[0].to_string(),
            row.point[1].to_string(),
            row.in_support.to_string(),
        ];
        for i in 0..k {
            rec.push(row.normalized_scores[i].to_string());
            rec.push(row.density_ratios[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| HarnessError::io("<density report>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pdf_matches_closed_form() {
        let g = Gaussian2::isotropic([1.0, -1.0], 2.0);
        let expected = (-0.25f64 * 2.0).exp() / (2.0 * std::f64::consts::PI * 2.0);
        assert!((g.pdf([2.0, 0.0]) - expected).abs() < 1e-15);
    }

    #[test]
    fn sampling_matches_moments() {
        let g = Gaussian2 {
            mean: [1.0, 2.0],
            cov: [[2.0, 0.6], [0.6, 1.0]],
        };
        let xs = g.sample(200_000, &mut rng_for(1, "t", &[]));
        let n = xs.len() as f64;
        let mx = xs.iter().map(|p| p[0]).sum::<f64>() / n;
        let my = xs.iter().map(|p| p[1]).sum::<f64>() / n;
        let cxy = xs.iter().map(|p| (p[0] - mx) * (p[1] - my)).sum::<f64>() / n;
        assert!((mx - 1.0).abs() < 0.02 && (my - 2.0).abs() < 0.02);
        assert!((cxy - 0.6).abs() < 0.02, "{cxy}");
    }

    #[test]
    fn degenerate_covariance_is_rejected() {
        let mut spec = ToySpec::default();
        spec.clients[1].cov = [[1.0, 1.0], [1.0, 1.0]];
        assert!(matches!(score_density_report(&spec), Err(HarnessError::Spec(_))));
        spec.clients[1].cov = [[1.0, 0.2], [0.1, 1.0]];
        assert!(matches!(score_density_report(&spec), Err(HarnessError::Spec(_))));
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(pearson(&[1.0], &[1.0]), None);
    }

    #[test]
    fn single_client_fields_are_identically_one() {
        let spec = ToySpec {
            clients: vec![Gaussian2::isotropic([0.5, 0.0], 1.0)],
            grid: Grid {
                min: [-3.0, -3.0],
                max: [3.0, 3.0],
                steps: 7,
            },
            ..ToySpec::default()
        };
        let report = score_density_report(&spec).unwrap();
        for row in &report.rows {
            assert_eq!(row.normalized_scores, vec![1.0]);
            assert_eq!(row.density_ratios, vec![1.0]);
        }
        assert_eq!(report.correlations, vec![None]);
    }

    #[test]
    fn mirrored_clients_split_evenly_on_the_axis() {
        let spec = ToySpec {
            clients: vec![
                Gaussian2::isotropic([-2.0, 0.0], 1.0),
                Gaussian2::isotropic([2.0, 0.0], 1.0),
            ],
            grid: Grid {
                min: [-4.0, -4.0],
                max: [4.0, 4.0],
                steps: 9,
            },
            ..ToySpec::default()
        };
        let report = score_density_report(&spec).unwrap();
        for row in report
            .rows
            .iter()
            .filter(|r| r.point[0] == 0.0 && r.point[1].abs() <= 2.0)
        {
            for i in 0..2 {
                assert!((row.density_ratios[i] - 0.5).abs() < 1e-12);
                // Finite samples make the fitted heads only approximately mirror images.
                assert!((row.normalized_scores[i] - 0.5).abs() < 0.1, "{row:?}");
            }
        }
    }
}
