//! Coordinator/agent execution of the fixed-point iteration as an explicit
//! message protocol.
//!
//! The coordinator owns the chain and performs all rejection sampling; each
//! agent holds one input measure and its current map estimator. Per
//! iteration the coordinator ships source samples to every agent, the agent
//! draws its own target samples (from the same derivation path the serial
//! engine would use), solves the dual problem, and acknowledges with the
//! full estimator payload. Pushforward evaluations of the *current* layer
//! go through the agents; superseded layers are evaluated locally from the
//! acknowledged payloads. With equal seeds the trajectory is bit-identical
//! to the serial engine on any transport that preserves float bits.

mod agent;
mod coordinator;
mod protocol;
mod transport;

pub use agent::{agent_serve, AgentConfig};
pub use coordinator::{coordinator_run, CoordinatorConfig};
pub use protocol::{FloatMode, Payload, ProtocolMessage};
pub use transport::{in_process_pair, InProcessTransport, TcpTransport, Transport};
