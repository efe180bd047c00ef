use crate::agent::{AgentError, AgentOutcome, LocalAgent};
use crate::coordinator::{AdmmConfig, Coordinator, CoordinatorError};
use crate::model::TradeMatrix;
use crate::num::Scalar;

use super::barrier::{barrier_collect, BarrierError, BarrierSettings};
use super::codec::{decode_frame, encode_frame, DecodeError};
use super::transport::{AgentEndpoint, CoordinatorEndpoint, TransportError};
use super::Message;

#[derive(Debug, thiserror::Error)]
pub enum DriverError {
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("agent {user}: unexpected {kind} frame")]
    Unexpected { user: usize, kind: &'static str },
    #[error("agent {0}: coordinator closed the connection before the final broadcast")]
    Closed(usize),
}

fn convert<T: Scalar>(m: &TradeMatrix<f64>) -> TradeMatrix<T> {
    TradeMatrix {
        counterparties: m.counterparties.clone(),
        rows: m
            .rows
            .iter()
            .map(|r| r.iter().map(|&v| T::lit(v)).collect())
            .collect(),
    }
}

/// Drives the coordinator over `endpoint` until consensus or the iteration
/// limit, then sends every agent its closing broadcast. The returned state
/// holds the history and settled trades; agent outcomes are reported by the
/// agents themselves.
pub fn run_coordinator<E: CoordinatorEndpoint + ?Sized>(
    endpoint: &mut E,
    horizon: usize,
    config: AdmmConfig<f64>,
    barrier: &BarrierSettings,
) -> Result<Coordinator<f64>, DriverError> {
    let n = endpoint.n_users();
    let mut coord = Coordinator::new(n, horizon, config)?;
    loop {
        let k = coord.iteration() + 1;
        let frames: Vec<Vec<u8>> = (0..n)
            .map(|i| encode_frame(&Message::Broadcast(coord.broadcast_for(i, false))))
            .collect();
        for (i, f) in frames.iter().enumerate() {
            endpoint.send(i, f)?;
        }
        let proposals = barrier_collect(endpoint, k, barrier, |ep, u| ep.send(u, &frames[u]))?;
        let trades: Vec<TradeMatrix<f64>> = proposals.into_iter().map(|p| p.trades).collect();
        coord.step(&trades)?;
        if coord.converged() || coord.iteration() >= coord.config().max_iter {
            break;
        }
    }
    for i in 0..n {
        endpoint.send(i, &encode_frame(&Message::Broadcast(coord.broadcast_for(i, true))))?;
    }
    Ok(coord)
}

/// Serves one agent until the closing broadcast and returns its priced
/// outcome. A repeated broadcast for an iteration already answered is met by
/// resending the cached proposal.
pub fn run_agent_loop<T: Scalar, E: AgentEndpoint + ?Sized>(
    agent: &mut LocalAgent<T>,
    endpoint: &mut E,
) -> Result<AgentOutcome<T>, DriverError> {
    let user = agent.id();
    let mut cached: Option<(usize, Vec<u8>)> = None;
    loop {
        let frame = endpoint.recv()?.ok_or(DriverError::Closed(user))?;
        let b = match decode_frame(&frame)? {
            Message::Broadcast(b) => b,
            other => return Err(DriverError::Unexpected { user, kind: other.kind() }),
        };
        if b.done {
            return Ok(agent.finalize(convert(&b.aux_row))?);
        }
        if let Some((k, f)) = &cached {
            if *k == b.iteration {
                endpoint.send(f)?;
                continue;
            }
        }
        agent.apply_broadcast(&b)?;
        agent.solve_llp(T::lit(b.rho))?;
        let out = encode_frame(&Message::Proposal(agent.outbound_message()?));
        endpoint.send(&out)?;
        cached = Some((b.iteration, out));
    }
}
