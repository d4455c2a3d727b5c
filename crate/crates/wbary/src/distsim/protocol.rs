//! Wire protocol: newline-delimited JSON messages with checksummed float
//! payloads, in either decimal or raw little-endian base64 encoding.

use base64::Engine as _;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{fnv1a64, EntropicMapRecord};

/// Float encoding on the wire. `Decimal` writes JSON numbers (shortest
/// round-trip representation); `Raw` ships the exact IEEE-754 bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloatMode {
    Decimal,
    Raw,
}

/// A checksummed matrix of floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub rows: usize,
    pub cols: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    /// FNV-1a over the little-endian bytes of the row-major floats.
    pub checksum: String,
}

impl Payload {
    pub fn from_matrix(m: &Array2<f64>, mode: FloatMode) -> Self {
        let values: Vec<f64> = m.iter().copied().collect();
        let checksum = checksum_of(&values);
        match mode {
            FloatMode::Decimal => Payload {
                rows: m.nrows(),
                cols: m.ncols(),
                data: Some(values),
                raw: None,
                checksum,
            },
            FloatMode::Raw => {
                let mut bytes = Vec::with_capacity(values.len() * 8);
                for v in &values {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                Payload {
                    rows: m.nrows(),
                    cols: m.ncols(),
                    data: None,
                    raw: Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
                    checksum,
                }
            }
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        let values = match (&self.data, &self.raw) {
            (Some(v), None) => v.clone(),
            (None, Some(b64)) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b64)
                    .map_err(|e| Error::protocol(format!("bad raw payload: {e}")))?;
                if bytes.len() % 8 != 0 {
                    return Err(Error::protocol("raw payload length not a multiple of 8"));
                }
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect()
            }
            _ => return Err(Error::protocol("payload must carry exactly one of data/raw")),
        };
        if values.len() != self.rows * self.cols {
            return Err(Error::protocol(format!(
                "payload shape {}x{} does not match {} values",
                self.rows,
                self.cols,
                values.len()
            )));
        }
        if checksum_of(&values) != self.checksum {
            return Err(Error::protocol("payload checksum mismatch"));
        }
        Array2::from_shape_vec((self.rows, self.cols), values)
            .map_err(|e| Error::protocol(format!("payload reshape: {e}")))
    }
}

fn checksum_of(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    format!("{:016x}", fnv1a64(&bytes))
}

/// Messages exchanged between coordinator and one agent. `t` is the
/// iteration index, `k` the agent index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProtocolMessage {
    /// Coordinator -> agent: source samples and build parameters for the
    /// estimator at iteration `t`.
    SourceSamples {
        t: usize,
        k: usize,
        theta: f64,
        r0_mu: f64,
        /// Exact input-support radius when known; the agent otherwise
        /// certifies its own target batch.
        r0_nu_hint: Option<f64>,
        points: Payload,
    },
    /// Agent -> coordinator: estimator built; full payload for replay and
    /// for local evaluation once this layer is superseded.
    EstimatorAck { t: usize, k: usize, estimator: EntropicMapRecord },
    /// Coordinator -> agent: evaluate the current estimator at these points.
    EvalRequest { t: usize, k: usize, points: Payload },
    /// Agent -> coordinator: images under the current estimator.
    EvalReply { t: usize, k: usize, images: Payload },
    /// Agent -> coordinator: the request could not be served.
    ProtocolError { t: usize, k: usize, message: String },
    /// Coordinator -> agent: terminate cleanly.
    Shutdown,
}

impl ProtocolMessage {
    pub fn encode(&self) -> Result<String> {
        let mut line = serde_json::to_string(self)?;
        line.push('\n');
        Ok(line)
    }

    pub fn decode(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim_end())
            .map_err(|e| Error::protocol(format!("bad message: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn payload_round_trips_exactly_in_both_modes() {
        let m = arr2(&[[0.1, 1.0 / 3.0], [-2.5e-17, 123456.789]]);
        for mode in [FloatMode::Decimal, FloatMode::Raw] {
            let p = Payload::from_matrix(&m, mode);
            let back = p.to_matrix().unwrap();
            for (a, b) in m.iter().zip(back.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{mode:?}");
            }
        }
    }

    #[test]
    fn checksum_detects_corruption() {
        let m = arr2(&[[1.0, 2.0]]);
        let mut p = Payload::from_matrix(&m, FloatMode::Decimal);
        p.data.as_mut().unwrap()[0] = 1.0000001;
        assert!(p.to_matrix().is_err());
    }

    #[test]
    fn message_json_round_trip() {
        let m = arr2(&[[1.5, -2.5]]);
        let msg = ProtocolMessage::EvalRequest {
            t: 3,
            k: 1,
            points: Payload::from_matrix(&m, FloatMode::Raw),
        };
        let line = msg.encode().unwrap();
        assert!(line.ends_with('\n'));
        let back = ProtocolMessage::decode(&line).unwrap();
        assert_eq!(msg, back);
    }
}
