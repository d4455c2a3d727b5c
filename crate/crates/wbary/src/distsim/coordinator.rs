//! Coordinator side: runs the shared fixed-point engine with a backend that
//! delegates estimator builds and current-layer evaluations to the agents.

use std::sync::Mutex;
use std::time::Duration;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fixed_point::{
    push_through_layers, BarycenterProblem, ChainBackend, Engine, LayerMap, RunResult,
    RunSettings,
};
use crate::manifest::{ChainRecord, MeasureRecord};
use crate::measures::{Measure, SampleBatch};

use super::protocol::{FloatMode, Payload, ProtocolMessage};
use super::transport::Transport;

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    pub float_mode: FloatMode,
    pub timeout: Duration,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig { float_mode: FloatMode::Raw, timeout: Duration::from_secs(300) }
    }
}

/// Backend that owns the chain but routes work through the agents: the most
/// recently built layer is evaluated remotely (the weighted sum of agent
/// replies), earlier layers locally from the acknowledged payloads.
pub struct RemoteBackend {
    base: Measure,
    weights: Vec<f64>,
    layers: Vec<LayerMap>,
    /// Iteration index of the layer the agents currently hold.
    current_t: Option<usize>,
    transports: Vec<Mutex<Box<dyn Transport>>>,
    config: CoordinatorConfig,
}

impl RemoteBackend {
    pub fn new(
        base: Measure,
        weights: Vec<f64>,
        transports: Vec<Box<dyn Transport>>,
        config: CoordinatorConfig,
    ) -> Result<Self> {
        if transports.len() != weights.len() {
            return Err(Error::protocol(format!(
                "{} transports for {} input measures",
                transports.len(),
                weights.len()
            )));
        }
        Ok(RemoteBackend {
            base,
            weights,
            layers: Vec::new(),
            current_t: None,
            transports: transports.into_iter().map(Mutex::new).collect(),
        config,
        })
    }

    fn send_to(&self, k: usize, msg: &ProtocolMessage) -> Result<()> {
        self.transports[k]
            .lock()
            .map_err(|_| Error::protocol("transport mutex poisoned"))?
            .send(msg)
    }

    fn recv_from(&self, k: usize) -> Result<ProtocolMessage> {
        self.transports[k]
            .lock()
            .map_err(|_| Error::protocol("transport mutex poisoned"))?
            .recv(self.config.timeout)
    }

    /// Weighted sum of agent images of the current layer at `pts`.
    fn remote_layer_eval(&self, t: usize, pts: &Array2<f64>) -> Result<Array2<f64>> {
        let k_count = self.transports.len();
        for k in 0..k_count {
            let payload = Payload::from_matrix(pts, self.config.float_mode);
            self.send_to(k, &ProtocolMessage::EvalRequest { t, k, points: payload })
                .map_err(|e| Error::protocol(format!("eval send failed at (t={t}, k={k}): {e}")))?;
        }
        let mut combined = Array2::<f64>::zeros((pts.nrows(), pts.ncols()));
        for k in 0..k_count {
            let reply = self
                .recv_from(k)
                .map_err(|e| Error::protocol(format!("eval reply failed at (t={t}, k={k}): {e}")))?;
            match reply {
                ProtocolMessage::EvalReply { t: rt, k: rk, images } => {
                    if rt != t || rk != k {
                        return Err(Error::protocol(format!(
                            "eval reply for (t={rt}, k={rk}), expected (t={t}, k={k})"
                        )));
                    }
                    let m = images.to_matrix()?;
                    if m.dim() != pts.dim() {
                        return Err(Error::protocol(format!(
                            "eval reply shape {:?} != request shape {:?} at (t={t}, k={k})",
                            m.dim(),
                            pts.dim()
                        )));
                    }
                    combined += &(&m * self.weights[k]);
                }
                ProtocolMessage::ProtocolError { message, .. } => {
                    return Err(Error::protocol(format!("agent error at (t={t}, k={k}): {message}")));
                }
                other => {
                    return Err(Error::protocol(format!(
                        "unexpected reply at (t={t}, k={k}): {other:?}"
                    )));
                }
            }
        }
        Ok(combined)
    }
}

impl ChainBackend for RemoteBackend {
    fn layer_count(&self) -> usize {
        self.layers.len()
    }

    fn push_through(&self, pts: Array2<f64>) -> Result<Array2<f64>> {
        if self.layers.is_empty() {
            return Ok(pts);
        }
        let prefix = &self.layers[..self.layers.len() - 1];
        let staged = push_through_layers(prefix, pts)?;
        let t = self.current_t.expect("layers exist, current_t set");
        self.remote_layer_eval(t, &staged)
    }

    fn append_layer(
        &mut self,
        t: usize,
        xs: Vec<SampleBatch>,
        theta: f64,
        r0_mu: f64,
        r0_nu_hints: &[Option<f64>],
    ) -> Result<()> {
        let k_count = self.transports.len();
        if xs.len() != k_count {
            return Err(Error::shape("one source batch per agent required"));
        }
        for (k, x) in xs.iter().enumerate() {
            let msg = ProtocolMessage::SourceSamples {
                t,
                k,
                theta,
                r0_mu,
                r0_nu_hint: r0_nu_hints[k],
                points: Payload::from_matrix(&x.points, self.config.float_mode),
            };
            self.send_to(k, &msg)
                .map_err(|e| Error::protocol(format!("source send failed at (t={t}, k={k}): {e}")))?;
        }
        let mut maps = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let reply = self
                .recv_from(k)
                .map_err(|e| Error::protocol(format!("estimator ack failed at (t={t}, k={k}): {e}")))?;
            match reply {
                ProtocolMessage::EstimatorAck { t: rt, k: rk, estimator } => {
                    if rt != t || rk != k {
                        return Err(Error::protocol(format!(
                            "ack for (t={rt}, k={rk}), expected (t={t}, k={k})"
                        )));
                    }
                    maps.push(crate::entropic_map::EntropicMap::from_record(&estimator)?);
                }
                ProtocolMessage::ProtocolError { message, .. } => {
                    return Err(Error::protocol(format!(
                        "agent error at (t={t}, k={k}): {message}"
                    )));
                }
                other => {
                    return Err(Error::protocol(format!(
                        "unexpected ack at (t={t}, k={k}): {other:?}"
                    )));
                }
            }
        }
        self.layers.push(LayerMap::new(t, self.weights.clone(), maps)?);
        self.current_t = Some(t);
        Ok(())
    }

    fn chain_record(&self, seed: u64, radii: &[f64]) -> Result<ChainRecord> {
        Ok(ChainRecord {
            seed,
            base: MeasureRecord::from_measure(&self.base),
            layers: self.layers.iter().map(|l| l.to_record()).collect(),
            radii: radii.to_vec(),
        })
    }

    fn shutdown(&mut self) -> Result<()> {
        for k in 0..self.transports.len() {
            // agents may already be gone; shutdown is best effort
            let _ = self.send_to(k, &ProtocolMessage::Shutdown);
        }
        Ok(())
    }
}

/// Run the fixed-point iteration with one connected transport per agent.
/// Identical seeds and schedules give trajectories bit-identical to the
/// serial engine.
pub fn coordinator_run<P: BarycenterProblem>(
    problem: &P,
    settings: RunSettings,
    transports: Vec<Box<dyn Transport>>,
    config: CoordinatorConfig,
) -> Result<RunResult> {
    let backend = RemoteBackend::new(
        settings.initial.clone(),
        problem.weights().to_vec(),
        transports,
        config,
    )?;
    Engine::new(problem, settings, backend)?.run_to_completion()
}
