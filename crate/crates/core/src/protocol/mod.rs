//! Messages exchanged between agents and the coordinator, their binary framing,
//! and the transports that carry them.
//!
//! Every frame is `[len: u32 LE][tag: u8][payload]` where `len` counts the tag
//! and payload bytes. Integers are little-endian, floats are IEEE-754 binary64.
//!
//! | tag | message | payload |
//! |-----|---------|---------|
//! | 1 | [`TradeProposal`] | `user u32, iteration u64, rows u32, horizon u32, rows × (counterparty u32, horizon × f64)` |
//! | 2 | [`CoordinatorBroadcast`] | `iteration u64, rho f64, done u8, rows u32, horizon u32, rows × (counterparty u32, horizon × f64 aux, horizon × f64 dual)` |
//! | 3 | `Join` | `user u32` |

mod barrier;
mod codec;
mod driver;
mod transport;

pub use barrier::{barrier_collect, BarrierError, BarrierSettings};
pub use codec::{decode_frame, encode_frame, read_frame, DecodeError, DecodeErrorKind};
pub use driver::{run_agent_loop, run_coordinator, DriverError};
pub use transport::{
    inproc_pair, AgentEndpoint, CoordinatorEndpoint, Direction, InprocAgent, InprocHub, SocketAgent, SocketHub, Tap,
    TapLog, TransportError,
};

use serde::{Deserialize, Serialize};

use crate::model::TradeMatrix;

/// An agent's proposed trades for one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeProposal {
    #[serde(rename = "id")]
    pub user_id: usize,
    pub iteration: usize,
    pub trades: TradeMatrix<f64>,
}

/// The coordinator's consensus trades and multipliers for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorBroadcast {
    pub iteration: usize,
    pub aux_row: TradeMatrix<f64>,
    pub dual_row: TradeMatrix<f64>,
    pub rho: f64,
    /// Set on the final broadcast; `aux_row` then holds the settled trades.
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Message {
    Proposal(TradeProposal),
    Broadcast(CoordinatorBroadcast),
    Join { user_id: usize },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Proposal(_) => "proposal",
            Message::Broadcast(_) => "broadcast",
            Message::Join { .. } => "join",
        }
    }
}

pub const TRADE_PROPOSAL_FIELDS: [&str; 3] = ["id", "iteration", "trades"];
pub const BROADCAST_FIELDS: [&str; 5] = ["iteration", "aux_row", "dual_row", "rho", "done"];

impl TradeProposal {
    /// Checks the outbound schema: exactly the proposal fields, one full-length
    /// row per counterparty and no row for the sender itself.
    pub fn audit(&self, horizon: usize) -> Result<(), String> {
        let json = serde_json::to_value(self).map_err(|e| e.to_string())?;
        let keys: Vec<&str> = json
            .as_object()
            .map(|o| o.keys().map(String::as_str).collect())
            .unwrap_or_default();
        let mut expected = TRADE_PROPOSAL_FIELDS.to_vec();
        expected.sort_unstable();
        let mut got = keys.clone();
        got.sort_unstable();
        if got != expected {
            return Err(format!("fields {got:?}, expected {expected:?}"));
        }
        if self.trades.counterparties.len() != self.trades.rows.len() {
            return Err("counterparty list and trade rows differ in length".into());
        }
        if self.trades.counterparties.contains(&self.user_id) {
            return Err("proposal contains a self-trade row".into());
        }
        if let Some(r) = self.trades.rows.iter().find(|r| r.len() != horizon) {
            return Err(format!("trade row of length {}, expected {horizon}", r.len()));
        }
        if self.trades.rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite trade value".into());
        }
        Ok(())
    }
}
