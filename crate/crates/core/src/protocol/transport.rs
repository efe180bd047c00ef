use std::io::{self, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::codec::{decode_frame, encode_frame, read_frame, DecodeError};
use super::Message;

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("peer {} disconnected", .0.map_or("?".to_string(), |u| u.to_string()))]
    Disconnected(Option<usize>),
    #[error("no message for user {0}")]
    UnknownUser(usize),
    #[error("handshake failed: {0}")]
    Handshake(String),
}

/// The coordinator's side of a star topology.
pub trait CoordinatorEndpoint {
    fn n_users(&self) -> usize;
    fn send(&mut self, user: usize, frame: &[u8]) -> Result<(), TransportError>;
    /// Next frame from any agent, or `None` once `timeout` elapses.
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>, TransportError>;
}

/// One agent's link to the coordinator.
pub trait AgentEndpoint {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError>;
    /// Blocks for the next frame; `None` when the coordinator has gone away.
    fn recv(&mut self) -> Result<Option<Vec<u8>>, TransportError>;
}

type Inbox = Receiver<Result<Vec<u8>, TransportError>>;

fn recv_inbox(rx: &Inbox, timeout: Duration) -> Result<Option<Vec<u8>>, TransportError> {
    match rx.recv_timeout(timeout) {
        Ok(r) => r.map(Some),
        Err(RecvTimeoutError::Timeout) => Ok(None),
        Err(RecvTimeoutError::Disconnected) => Err(TransportError::Disconnected(None)),
    }
}

pub struct InprocHub {
    to_agents: Vec<Sender<Vec<u8>>>,
    inbox: Inbox,
}

pub struct InprocAgent {
    user: usize,
    outbox: Sender<Result<Vec<u8>, TransportError>>,
    inbox: Receiver<Vec<u8>>,
}

/// Channels for `n_users` agents in this process. Frames are passed as
/// encoded bytes so in-process runs exercise the codec.
pub fn inproc_pair(n_users: usize) -> (InprocHub, Vec<InprocAgent>) {
    let (up_tx, up_rx) = mpsc::channel();
    let mut to_agents = Vec::new();
    let mut agents = Vec::new();
    for user in 0..n_users {
        let (tx, rx) = mpsc::channel();
        to_agents.push(tx);
        agents.push(InprocAgent {
            user,
            outbox: up_tx.clone(),
            inbox: rx,
        });
    }
    (
        InprocHub {
            to_agents,
            inbox: up_rx,
        },
        agents,
    )
}

impl CoordinatorEndpoint for InprocHub {
    fn n_users(&self) -> usize {
        self.to_agents.len()
    }

    fn send(&mut self, user: usize, frame: &[u8]) -> Result<(), TransportError> {
        self.to_agents
            .get(user)
            .ok_or(TransportError::UnknownUser(user))?
            .send(frame.to_vec())
            .map_err(|_| TransportError::Disconnected(Some(user)))
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>, TransportError> {
        recv_inbox(&self.inbox, timeout)
    }
}

impl AgentEndpoint for InprocAgent {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.outbox
            .send(Ok(frame.to_vec()))
            .map_err(|_| TransportError::Disconnected(Some(self.user)))
    }

    fn recv(&mut self) -> Result<Option<Vec<u8>>, TransportError> {
        Ok(self.inbox.recv().ok())
    }
}

/// TCP endpoint of the coordinator. Each agent connection gets a reader thread
/// feeding a shared inbox.
pub struct SocketHub {
    writers: Vec<TcpStream>,
    inbox: Inbox,
}

impl SocketHub {
    pub fn bind(addr: impl ToSocketAddrs) -> io::Result<TcpListener> {
        TcpListener::bind(addr)
    }

    /// Accepts connections until every user in `0..n_users` has joined.
    pub fn accept(listener: &TcpListener, n_users: usize, timeout: Duration) -> Result<Self, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut slots: Vec<Option<TcpStream>> = (0..n_users).map(|_| None).collect();
        listener.set_nonblocking(true)?;
        while slots.iter().any(Option::is_none) {
            let mut stream = match listener.accept() {
                Ok((s, _)) => s,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        let missing: Vec<usize> = (0..n_users).filter(|&i| slots[i].is_none()).collect();
                        return Err(TransportError::Handshake(format!("users {missing:?} never joined")));
                    }
                    thread::sleep(Duration::from_millis(5));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            stream.set_nonblocking(false)?;
            stream.set_nodelay(true)?;
            stream.set_read_timeout(Some(deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1))))?;
            let frame = read_frame(&mut stream)?
                .ok_or_else(|| TransportError::Handshake("connection closed before join".into()))?;
            stream.set_read_timeout(None)?;
            match decode_frame(&frame)? {
                Message::Join { user_id } if user_id < n_users => {
                    if slots[user_id].is_some() {
                        return Err(TransportError::Handshake(format!("user {user_id} joined twice")));
                    }
                    slots[user_id] = Some(stream);
                }
                Message::Join { user_id } => {
                    return Err(TransportError::Handshake(format!(
                        "user id {user_id} out of range for {n_users} users"
                    )))
                }
                other => {
                    return Err(TransportError::Handshake(format!("expected join, got {}", other.kind())))
                }
            }
        }
        listener.set_nonblocking(false)?;

        let (tx, rx) = mpsc::channel();
        let mut writers = Vec::new();
        for (user, stream) in slots.into_iter().enumerate() {
            let stream = stream.unwrap();
            let mut reader = stream.try_clone()?;
            let tx = tx.clone();
            thread::spawn(move || loop {
                match read_frame(&mut reader) {
                    Ok(Some(f)) => {
                        if tx.send(Ok(f)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => {
                        let _ = tx.send(Err(TransportError::Disconnected(Some(user))));
                        return;
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e.into()));
                        return;
                    }
                }
            });
            writers.push(stream);
        }
        Ok(Self { writers, inbox: rx })
    }
}

impl Drop for SocketHub {
    fn drop(&mut self) {
        // reader threads hold clones of each socket, so close explicitly
        for w in &self.writers {
            let _ = w.shutdown(std::net::Shutdown::Both);
        }
    }
}

impl CoordinatorEndpoint for SocketHub {
    fn n_users(&self) -> usize {
        self.writers.len()
    }

    fn send(&mut self, user: usize, frame: &[u8]) -> Result<(), TransportError> {
        let w = self.writers.get_mut(user).ok_or(TransportError::UnknownUser(user))?;
        w.write_all(frame).map_err(|_| TransportError::Disconnected(Some(user)))
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>, TransportError> {
        recv_inbox(&self.inbox, timeout)
    }
}

pub struct SocketAgent {
    stream: TcpStream,
}

impl SocketAgent {
    /// Connects to the coordinator, retrying until `timeout`, and announces
    /// `user_id`.
    pub fn connect(addr: &str, user_id: usize, timeout: Duration) -> Result<Self, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut stream = loop {
            match TcpStream::connect(addr) {
                Ok(s) => break s,
                Err(e) if Instant::now() < deadline => {
                    let _ = e;
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(e.into()),
            }
        };
        stream.set_nodelay(true)?;
        stream.write_all(&encode_frame(&Message::Join { user_id }))?;
        Ok(Self { stream })
    }
}

impl AgentEndpoint for SocketAgent {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.stream.write_all(frame)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Option<Vec<u8>>, TransportError> {
        Ok(read_frame(&mut self.stream)?)
    }
}

/// Direction of a captured frame relative to the coordinator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToAgent(usize),
    FromAgent,
}

pub type TapLog = Arc<Mutex<Vec<(Direction, Vec<u8>)>>>;

/// Records every frame passing through a coordinator endpoint.
pub struct Tap<E> {
    inner: E,
    log: TapLog,
}

impl<E> Tap<E> {
    pub fn new(inner: E) -> (Self, TapLog) {
        let log = TapLog::default();
        (
            Self {
                inner,
                log: log.clone(),
            },
            log,
        )
    }
}

impl<E: CoordinatorEndpoint> CoordinatorEndpoint for Tap<E> {
    fn n_users(&self) -> usize {
        self.inner.n_users()
    }

    fn send(&mut self, user: usize, frame: &[u8]) -> Result<(), TransportError> {
        self.log.lock().unwrap().push((Direction::ToAgent(user), frame.to_vec()));
        self.inner.send(user, frame)
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>, TransportError> {
        let r = self.inner.recv_timeout(timeout)?;
        if let Some(f) = &r {
            self.log.lock().unwrap().push((Direction::FromAgent, f.clone()));
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inproc_routes_by_user() {
        let (mut hub, mut agents) = inproc_pair(2);
        hub.send(1, b"abc").unwrap();
        assert_eq!(agents[1].recv().unwrap().unwrap(), b"abc");
        agents[0].send(b"xyz").unwrap();
        assert_eq!(hub.recv_timeout(Duration::from_millis(10)).unwrap().unwrap(), b"xyz");
        assert!(hub.recv_timeout(Duration::from_millis(1)).unwrap().is_none());
        assert!(matches!(hub.send(5, b""), Err(TransportError::UnknownUser(5))));
    }

    #[test]
    fn socket_handshake_and_echo() {
        let listener = SocketHub::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let agents: Vec<_> = (0..2)
            .rev()
            .map(|u| {
                let addr = addr.clone();
                thread::spawn(move || {
                    let mut a = SocketAgent::connect(&addr, u, Duration::from_secs(5)).unwrap();
                    let f = a.recv().unwrap().unwrap();
                    a.send(&f).unwrap();
                    // hold the connection until the hub closes it
                    assert!(a.recv().unwrap().is_none());
                })
            })
            .collect();
        let hub = SocketHub::accept(&listener, 2, Duration::from_secs(5)).unwrap();
        let (mut hub, log) = Tap::new(hub);
        for u in 0..2 {
            hub.send(u, &encode_frame(&Message::Join { user_id: u })).unwrap();
        }
        let mut got = Vec::new();
        for _ in 0..2 {
            let f = hub.recv_timeout(Duration::from_secs(5)).unwrap().unwrap();
            got.push(decode_frame(&f).unwrap());
        }
        got.sort_by_key(|m| match m {
            Message::Join { user_id } => *user_id,
            _ => usize::MAX,
        });
        assert_eq!(got, vec![Message::Join { user_id: 0 }, Message::Join { user_id: 1 }]);
        assert_eq!(log.lock().unwrap().len(), 4);
        drop(hub);
        agents.into_iter().for_each(|h| h.join().unwrap());
    }

    #[test]
    fn duplicate_join_rejected() {
        let listener = SocketHub::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let _a = SocketAgent::connect(&addr, 0, Duration::from_secs(5)).unwrap();
        let _b = SocketAgent::connect(&addr, 0, Duration::from_secs(5)).unwrap();
        let err = SocketHub::accept(&listener, 2, Duration::from_secs(5)).err().unwrap();
        assert!(matches!(err, TransportError::Handshake(m) if m.contains("twice")));
    }

    #[test]
    fn missing_join_times_out() {
        let listener = SocketHub::bind("127.0.0.1:0").unwrap();
        let err = SocketHub::accept(&listener, 1, Duration::from_millis(50)).err().unwrap();
        assert!(matches!(err, TransportError::Handshake(m) if m.contains("[0]")));
    }
}
