//! Serializable records for instance manifests, chain manifests and run
//! metadata, plus the shared float formatting used by every CSV export.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 17 significant digits: round-trips every finite f64 exactly.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{x:.16e}")
    }
}

/// FNV-1a 64-bit, used for config hashes and wire checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GaussianRecord {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MixtureRecord {
    pub weights: Vec<f64>,
    pub components: Vec<GaussianRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasureRecord {
    Gaussian(GaussianRecord),
    Mixture(MixtureRecord),
    Truncated {
        base: Box<MeasureRecord>,
        center: Vec<f64>,
        radius: f64,
    },
}

impl MeasureRecord {
    pub fn to_measure(&self) -> Result<crate::measures::Measure> {
        use crate::measures::{Gaussian, GaussianMixture, Measure};
        match self {
            MeasureRecord::Gaussian(g) => {
                Ok(Measure::Gaussian(Gaussian::new(g.mean.clone(), g.covariance.clone())?))
            }
            MeasureRecord::Mixture(m) => {
                let comps = m
                    .components
                    .iter()
                    .map(|g| Gaussian::new(g.mean.clone(), g.covariance.clone()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Measure::Mixture(GaussianMixture::new(m.weights.clone(), comps)?))
            }
            MeasureRecord::Truncated { base, center, radius } => {
                Measure::truncated(base.to_measure()?, center.clone(), *radius)
            }
        }
    }

    pub fn from_measure(m: &crate::measures::Measure) -> Self {
        use crate::measures::Measure;
        match m {
            Measure::Gaussian(g) => MeasureRecord::Gaussian(GaussianRecord {
                mean: g.mean().to_vec(),
                covariance: crate::linalg::to_rows(g.covariance()),
            }),
            Measure::Mixture(gm) => MeasureRecord::Mixture(MixtureRecord {
                weights: gm.weights().to_vec(),
                components: gm
                    .components()
                    .iter()
                    .map(|g| GaussianRecord {
                        mean: g.mean().to_vec(),
                        covariance: crate::linalg::to_rows(g.covariance()),
                    })
                    .collect(),
            }),
            Measure::Truncated { base, center, radius } => MeasureRecord::Truncated {
                base: Box::new(MeasureRecord::from_measure(base)),
                center: center.clone(),
                radius: *radius,
            },
        }
    }
}

/// Full payload of one entropic map: enough for exact replay of evaluations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EntropicMapRecord {
    pub targets: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    pub theta: f64,
    pub r0_mu: f64,
    pub r0_nu: f64,
    pub lambda_lb: f64,
    pub degenerate: bool,
    pub sinkhorn_iterations: usize,
    pub sinkhorn_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerRecord {
    pub t: usize,
    pub weights: Vec<f64>,
    pub maps: Vec<EntropicMapRecord>,
}

/// Chain manifest: everything needed to resume or replay a run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChainRecord {
    pub seed: u64,
    pub base: MeasureRecord,
    pub layers: Vec<LayerRecord>,
    pub radii: Vec<f64>,
}

/// One row of the metric trajectory CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub t: usize,
    pub radius: f64,
    pub n_samples: usize,
    pub theta: f64,
    pub v_hat: f64,
    pub w2_to_ref: f64,
    pub accept_rate: f64,
    pub wall_ms: f64,
}

pub const TRAJECTORY_HEADER: &str = "t,R,N,theta,V_hat,W2_to_ref,accept_rate,wall_ms";

/// `record_wall_time = false` zeroes the wall-clock column so replays of the
/// same seed produce byte-identical files; real timings then live only in the
/// run manifest.
pub fn trajectory_csv(rows: &[MetricRow], record_wall_time: bool) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for r in rows {
        let wall = if record_wall_time { r.wall_ms } else { 0.0 };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.t,
            fmt_f64(r.radius),
            r.n_samples,
            fmt_f64(r.theta),
            fmt_f64(r.v_hat),
            fmt_f64(r.w2_to_ref),
            fmt_f64(r.accept_rate),
            fmt_f64(wall),
        ));
    }
    out
}

pub fn write_json<T: Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}
