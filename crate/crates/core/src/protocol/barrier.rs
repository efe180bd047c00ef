use std::time::{Duration, Instant};

use super::codec::{decode_frame, DecodeError};
use super::transport::{CoordinatorEndpoint, TransportError};
use super::{Message, TradeProposal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BarrierSettings {
    pub timeout: Duration,
}

impl Default for BarrierSettings {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BarrierError {
    #[error("iteration {iteration}: timed out waiting for users {missing:?}")]
    Timeout { iteration: usize, missing: Vec<usize> },
    #[error("iteration {iteration}: protocol violation by user {user:?}: {detail}")]
    Violation {
        iteration: usize,
        user: Option<usize>,
        detail: String,
    },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Waits until every user has proposed for `iteration` and returns the
/// proposals ordered by user id.
///
/// A proposal tagged with an earlier iteration is answered once by calling
/// `resend(user)`, which should repeat that user's broadcast; a second stale
/// proposal from the same user, a duplicate, a future iteration or a non-proposal
/// frame is a violation.
pub fn barrier_collect<E, F>(
    endpoint: &mut E,
    iteration: usize,
    settings: &BarrierSettings,
    mut resend: F,
) -> Result<Vec<TradeProposal>, BarrierError>
where
    E: CoordinatorEndpoint + ?Sized,
    F: FnMut(&mut E, usize) -> Result<(), TransportError>,
{
    let n = endpoint.n_users();
    let deadline = Instant::now() + settings.timeout;
    let mut got: Vec<Option<TradeProposal>> = (0..n).map(|_| None).collect();
    let mut stale_seen = vec![false; n];
    let mut remaining = n;
    let violation = |user: Option<usize>, detail: String| BarrierError::Violation {
        iteration,
        user,
        detail,
    };
    while remaining > 0 {
        let wait = deadline.saturating_duration_since(Instant::now());
        let frame = match endpoint.recv_timeout(wait)? {
            Some(f) => f,
            None => {
                return Err(BarrierError::Timeout {
                    iteration,
                    missing: (0..n).filter(|&i| got[i].is_none()).collect(),
                })
            }
        };
        let p = match decode_frame(&frame)? {
            Message::Proposal(p) => p,
            other => return Err(violation(None, format!("unexpected {} frame", other.kind()))),
        };
        let u = p.user_id;
        if u >= n {
            return Err(violation(Some(u), format!("unknown user id (n = {n})")));
        }
        if p.iteration < iteration {
            if stale_seen[u] {
                return Err(violation(Some(u), format!("repeated stale proposal for iteration {}", p.iteration)));
            }
            stale_seen[u] = true;
            resend(endpoint, u)?;
            continue;
        }
        if p.iteration > iteration {
            return Err(violation(Some(u), format!("proposal for future iteration {}", p.iteration)));
        }
        if got[u].is_some() {
            return Err(violation(Some(u), "duplicate proposal".into()));
        }
        got[u] = Some(p);
        remaining -= 1;
    }
    Ok(got.into_iter().map(Option::unwrap).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TradeMatrix;
    use crate::protocol::codec::encode_frame;
    use crate::protocol::transport::{inproc_pair, AgentEndpoint};

    fn frame(user: usize, iteration: usize) -> Vec<u8> {
        encode_frame(&Message::Proposal(TradeProposal {
            user_id: user,
            iteration,
            trades: TradeMatrix::for_user(user, 3, 1),
        }))
    }

    fn short() -> BarrierSettings {
        BarrierSettings {
            timeout: Duration::from_millis(50),
        }
    }

    #[test]
    fn any_arrival_order() {
        let (mut hub, mut agents) = inproc_pair(3);
        for u in [2, 0, 1] {
            agents[u].send(&frame(u, 4)).unwrap();
        }
        let got = barrier_collect(&mut hub, 4, &short(), |_, _| Ok(())).unwrap();
        assert_eq!(got.iter().map(|p| p.user_id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn timeout_names_missing_users() {
        let (mut hub, mut agents) = inproc_pair(3);
        agents[1].send(&frame(1, 1)).unwrap();
        match barrier_collect(&mut hub, 1, &short(), |_, _| Ok(())) {
            Err(BarrierError::Timeout { iteration: 1, missing }) => assert_eq!(missing, vec![0, 2]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_is_violation() {
        let (mut hub, mut agents) = inproc_pair(3);
        agents[1].send(&frame(1, 1)).unwrap();
        agents[1].send(&frame(1, 1)).unwrap();
        assert!(matches!(
            barrier_collect(&mut hub, 1, &short(), |_, _| Ok(())),
            Err(BarrierError::Violation { user: Some(1), .. })
        ));
    }

    #[test]
    fn stale_proposal_triggers_one_resend() {
        let (mut hub, mut agents) = inproc_pair(3);
        agents[0].send(&frame(0, 2)).unwrap();
        agents[1].send(&frame(1, 3)).unwrap();
        agents[2].send(&frame(2, 3)).unwrap();
        agents[0].send(&frame(0, 3)).unwrap();
        let mut resent = Vec::new();
        let got = barrier_collect(&mut hub, 3, &short(), |_, u| {
            resent.push(u);
            Ok(())
        })
        .unwrap();
        assert_eq!(resent, vec![0]);
        assert_eq!(got.len(), 3);

        let (mut hub, mut agents) = inproc_pair(3);
        agents[0].send(&frame(0, 2)).unwrap();
        agents[0].send(&frame(0, 2)).unwrap();
        assert!(matches!(
            barrier_collect(&mut hub, 3, &short(), |_, _| Ok(())),
            Err(BarrierError::Violation { user: Some(0), .. })
        ));
    }

    #[test]
    fn foreign_frames_rejected() {
        let (mut hub, mut agents) = inproc_pair(2);
        agents[0].send(&encode_frame(&Message::Join { user_id: 0 })).unwrap();
        assert!(matches!(
            barrier_collect(&mut hub, 1, &short(), |_, _| Ok(())),
            Err(BarrierError::Violation { .. })
        ));
        let (mut hub, mut agents) = inproc_pair(2);
        agents[0].send(&[1, 0, 0, 0]).unwrap();
        assert!(matches!(
            barrier_collect(&mut hub, 1, &short(), |_, _| Ok(())),
            Err(BarrierError::Decode(_))
        ));
        let (mut hub, mut agents) = inproc_pair(2);
        agents[0].send(&frame(0, 9)).unwrap();
        assert!(matches!(
            barrier_collect(&mut hub, 1, &short(), |_, _| Ok(())),
            Err(BarrierError::Violation { .. })
        ));
    }
}
