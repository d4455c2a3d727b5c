//! Agent side: one input measure, one current estimator.

use std::time::Duration;

use ndarray::Array2;
use rayon::prelude::*;

use crate::entropic_map::{build_entropic_map, EntropicMap, EntropicMapConfig};
use crate::error::Result;
use crate::fixed_point::{certify_target_radius, BarycenterProblem};
use crate::measures::SampleBatch;
use crate::rng::{labels, RngStream};
use crate::sinkhorn::SinkhornConfig;

use super::protocol::{FloatMode, Payload, ProtocolMessage};
use super::transport::Transport;

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub k: usize,
    pub seed: u64,
    pub float_mode: FloatMode,
    pub solver: SinkhornConfig,
    pub timeout: Duration,
}

impl AgentConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        AgentConfig {
            k,
            seed,
            float_mode: FloatMode::Raw,
            solver: SinkhornConfig::default(),
            timeout: Duration::from_secs(300),
        }
    }
}

/// Serve one session: build estimators on `SourceSamples`, answer
/// `EvalRequest`s with images under the current estimator, exit on
/// `Shutdown`. Target samples come from the same stream path the serial
/// engine uses, so a replayed `SourceSamples` rebuilds the identical
/// estimator.
pub fn agent_serve<P: BarycenterProblem, T: Transport>(
    problem: &P,
    config: &AgentConfig,
    transport: &mut T,
) -> Result<()> {
    let root = RngStream::from_seed(config.seed);
    let mut current: Option<(usize, EntropicMap)> = None;
    let mut last_t: Option<usize> = None;

    loop {
        match transport.recv(config.timeout)? {
            ProtocolMessage::Shutdown => return Ok(()),
            ProtocolMessage::SourceSamples { t, k, theta, r0_mu, r0_nu_hint, points } => {
                if k != config.k {
                    transport.send(&ProtocolMessage::ProtocolError {
                        t,
                        k: config.k,
                        message: format!("agent {} received samples for agent {k}", config.k),
                    })?;
                    continue;
                }
                if last_t.is_some_and(|prev| t < prev) {
                    transport.send(&ProtocolMessage::ProtocolError {
                        t,
                        k,
                        message: format!(
                            "iteration index went backwards: {} -> {t}",
                            last_t.unwrap()
                        ),
                    })?;
                    continue;
                }
                let x_points = points.to_matrix()?;
                let n = x_points.nrows();
                let x = SampleBatch::new(x_points, root.provenance())?;
                let mut target_stream = root.child3(labels::TARGET, t as u64, k as u64);
                let y = problem.sample_input(k, n, &mut target_stream)?;
                let r0_nu = certify_target_radius(&y, r0_nu_hint);
                let map = build_entropic_map(
                    &x,
                    &y,
                    theta,
                    r0_mu,
                    r0_nu,
                    EntropicMapConfig { solver: config.solver },
                )?;
                let record = map.to_record();
                current = Some((t, map));
                last_t = Some(t);
                transport.send(&ProtocolMessage::EstimatorAck { t, k, estimator: record })?;
            }
            ProtocolMessage::EvalRequest { t, k, points } => {
                let reply = match &current {
                    None => ProtocolMessage::ProtocolError {
                        t,
                        k: config.k,
                        message: "eval requested before any estimator was built".into(),
                    },
                    Some((cur_t, _)) if *cur_t != t => ProtocolMessage::ProtocolError {
                        t,
                        k: config.k,
                        message: format!(
                            "eval requested for t={t}, current estimator is t={cur_t}"
                        ),
                    },
                    Some((_, map)) => {
                        let pts = points.to_matrix()?;
                        let images = eval_matrix(map, &pts);
                        ProtocolMessage::EvalReply {
                            t,
                            k,
                            images: Payload::from_matrix(&images, config.float_mode),
                        }
                    }
                };
                transport.send(&reply)?;
            }
            other => {
                transport.send(&ProtocolMessage::ProtocolError {
                    t: last_t.unwrap_or(0),
                    k: config.k,
                    message: format!("unexpected message {other:?}"),
                })?;
            }
        }
    }
}

fn eval_matrix(map: &EntropicMap, pts: &Array2<f64>) -> Array2<f64> {
    let d = pts.ncols();
    let rows: Vec<Vec<f64>> = (0..pts.nrows())
        .into_par_iter()
        .map(|i| map.eval(pts.row(i).to_slice().expect("row-major")))
        .collect();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in &rows {
        data.extend_from_slice(r);
    }
    Array2::from_shape_vec((rows.len(), d), data).expect("shape by construction")
}
