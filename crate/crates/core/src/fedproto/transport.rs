//! Transports carry one broadcast/collect exchange per round.
//!
//! [`InProcess`] calls the clients directly (in parallel); [`TcpServer`] speaks
//! the framed protocol of [`super::wire`] to remote [`run_client`] loops.

use std::fmt;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::thread;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::wire::{self, Hello, MsgType, ParamShape};
use super::{serve_rounds, ClientState, FedError, FederationOutcome, GlobalParams, TrainConfig};

/// Where the clients live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TransportKind {
    InProcess,
    /// Loopback TCP on the given address (`host:port`; port 0 picks a free one).
    Tcp(String),
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inprocess" => Ok(TransportKind::InProcess),
            _ => match s.strip_prefix("tcp:") {
                Some(addr) if !addr.is_empty() => Ok(TransportKind::Tcp(addr.to_string())),
                _ => Err(format!("unknown transport '{s}' (expected inprocess or tcp:HOST:PORT)")),
            },
        }
    }
}

impl TryFrom<String> for TransportKind {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TransportKind> for String {
    fn from(t: TransportKind) -> String {
        t.to_string()
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportKind::InProcess => f.write_str("inprocess"),
            TransportKind::Tcp(addr) => write!(f, "tcp:{addr}"),
        }
    }
}

pub trait Transport {
    fn client_count(&self) -> usize;

    /// Broadcasts `global` for `round` and returns the clients' updates in client-id order.
    fn exchange(&mut self, round: u32, global: &GlobalParams) -> Result<Vec<GlobalParams>, FedError>;

    /// Broadcasts the final aggregate (as round `rounds`) and closes the session.
    fn finish(&mut self, rounds: u32, global: &GlobalParams) -> Result<(), FedError>;
}

/// Clients held in memory, trained concurrently on the rayon pool.
pub struct InProcess {
    clients: Vec<ClientState>,
    cfg: TrainConfig,
}

impl InProcess {
    pub fn new(mut clients: Vec<ClientState>, cfg: TrainConfig) -> Self {
        clients.sort_by_key(|c| c.id);
        Self { clients, cfg }
    }

    pub fn into_clients(self) -> Vec<ClientState> {
        self.clients
    }
}

impl Transport for InProcess {
    fn client_count(&self) -> usize {
        self.clients.len()
    }

    fn exchange(&mut self, round: u32, global: &GlobalParams) -> Result<Vec<GlobalParams>, FedError> {
        let cfg = &self.cfg;
        self.clients
            .par_iter_mut()
            .map(|c| {
                if round > 0 {
                    c.end_round(global, round - 1, cfg.rounds)?;
                }
                c.local_update(global, cfg, round)
            })
            .collect()
    }

    fn finish(&mut self, rounds: u32, global: &GlobalParams) -> Result<(), FedError> {
        let total = self.cfg.rounds;
        self.clients
            .par_iter_mut()
            .try_for_each(|c| c.end_round(global, rounds - 1, total))
    }
}

/// Server side of the TCP protocol, one stream per client sorted by client id.
pub struct TcpServer<S> {
    streams: Vec<S>,
    shape: ParamShape,
}

impl TcpServer<TcpStream> {
    /// Accepts `clients` connections and reads their HELLOs.
    pub fn accept(listener: &TcpListener, clients: usize, shape: ParamShape) -> Result<Self, FedError> {
        let mut streams = Vec::with_capacity(clients);
        for _ in 0..clients {
            let (stream, peer) = listener.accept()?;
            stream.set_nodelay(true)?;
            log::debug!("accepted client connection from {peer}");
            streams.push(stream);
        }
        Self::from_streams(streams, shape)
    }
}

impl<S: Read + Write> TcpServer<S> {
    /// Handshakes on already-connected streams; ids must be exactly `0..n`.
    pub fn from_streams(streams: Vec<S>, shape: ParamShape) -> Result<Self, FedError> {
        let n = streams.len();
        let mut slots: Vec<Option<S>> = (0..n).map(|_| None).collect();
        for mut s in streams {
            let hello = wire::decode_hello(&wire::read_frame(&mut s)?)?;
            if hello.dim as usize != shape.dim || hello.classes as usize != shape.classes {
                return Err(FedError::Protocol(format!(
                    "client {} announced d={} K={}, server expects d={} K={}",
                    hello.client_id, hello.dim, hello.classes, shape.dim, shape.classes
                )));
            }
            let id = hello.client_id as usize;
            match slots.get_mut(id) {
                Some(slot @ None) => *slot = Some(s),
                Some(Some(_)) => return Err(FedError::Protocol(format!("duplicate client id {id}"))),
                None => return Err(FedError::Protocol(format!("client id {id} outside 0..{n}"))),
            }
        }
        Ok(Self {
            streams: slots.into_iter().map(|s| s.expect("every slot filled")).collect(),
            shape,
        })
    }
}

impl<S: Read + Write> Transport for TcpServer<S> {
    fn client_count(&self) -> usize {
        self.streams.len()
    }

    fn exchange(&mut self, round: u32, global: &GlobalParams) -> Result<Vec<GlobalParams>, FedError> {
        let payload = wire::encode_params(round, global);
        for s in &mut self.streams {
            wire::write_frame(s, MsgType::Global, &payload)?;
        }
        let mut updates = Vec::with_capacity(self.streams.len());
        for (id, s) in self.streams.iter_mut().enumerate() {
            let (r, update) = wire::decode_params(&wire::read_frame(s)?, MsgType::Update, self.shape)?;
            if r != round {
                return Err(FedError::Protocol(format!("client {id} answered round {r} during round {round}")));
            }
            updates.push(update);
        }
        Ok(updates)
    }

    fn finish(&mut self, rounds: u32, global: &GlobalParams) -> Result<(), FedError> {
        let payload = wire::encode_params(rounds, global);
        for s in &mut self.streams {
            wire::write_frame(s, MsgType::Global, &payload)?;
            wire::write_frame(s, MsgType::Fin, &[])?;
        }
        Ok(())
    }
}

/// Client side of the TCP protocol. Returns the trained client state after FIN.
pub fn run_client<S: Read + Write>(mut stream: S, mut state: ClientState, cfg: &TrainConfig) -> Result<ClientState, FedError> {
    let hello = Hello {
        client_id: state.id,
        dim: state.dim() as u32,
        classes: state.classes() as u32,
    };
    wire::write_frame(&mut stream, MsgType::Hello, &wire::encode_hello(hello))?;
    let shape = ParamShape {
        classes: state.classes(),
        dim: state.dim(),
        with_local: state.variant.shares_local(),
    };
    let mut last: Option<u32> = None;
    loop {
        let frame = wire::read_frame(&mut stream)?;
        if frame.kind == MsgType::Fin {
            if last != Some(cfg.rounds) {
                return Err(FedError::Protocol(format!(
                    "FIN after round {last:?}, expected the final broadcast of round {}",
                    cfg.rounds
                )));
            }
            return Ok(state);
        }
        let (round, global) = wire::decode_params(&frame, MsgType::Global, shape)?;
        if last.is_some_and(|l| round <= l) || round > cfg.rounds {
            return Err(FedError::Protocol(format!("unexpected round {round} after {last:?}")));
        }
        last = Some(round);
        if round > 0 {
            state.end_round(&global, round - 1, cfg.rounds)?;
        }
        if round < cfg.rounds {
            let update = state.local_update(&global, cfg, round)?;
            wire::write_frame(&mut stream, MsgType::Update, &wire::encode_params(round, &update))?;
        }
    }
}

pub fn connect(addr: impl ToSocketAddrs) -> Result<TcpStream, FedError> {
    let s = TcpStream::connect(addr)?;
    s.set_nodelay(true)?;
    Ok(s)
}

/// Runs server and clients in this process, talking over loopback TCP.
pub fn run_loopback(
    addr: &str,
    clients: Vec<ClientState>,
    init: GlobalParams,
    cfg: &TrainConfig,
) -> Result<FederationOutcome, FedError> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let n = clients.len();
    let shape = init.shape();
    let handles: Vec<_> = clients
        .into_iter()
        .map(|c| {
            let cfg = cfg.clone();
            thread::spawn(move || connect(local).and_then(|s| run_client(s, c, &cfg)))
        })
        .collect();
    let served = TcpServer::accept(&listener, n, shape).and_then(|mut t| serve_rounds(&mut t, init, cfg.rounds));
    let mut states = Vec::with_capacity(n);
    let mut client_err = None;
    for h in handles {
        match h.join() {
            Ok(Ok(s)) => states.push(s),
            Ok(Err(e)) => client_err = client_err.or(Some(e)),
            Err(_) => client_err = client_err.or(Some(FedError::Setup("client thread panicked".into()))),
        }
    }
    let server = served?;
    if let Some(e) = client_err {
        return Err(e);
    }
    states.sort_by_key(|c| c.id);
    Ok(FederationOutcome { server, clients: states })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transport_kind_parsing() {
        assert_eq!("inprocess".parse::<TransportKind>().unwrap(), TransportKind::InProcess);
        assert_eq!(
            "tcp:127.0.0.1:0".parse::<TransportKind>().unwrap(),
            TransportKind::Tcp("127.0.0.1:0".into())
        );
        assert!("tcp:".parse::<TransportKind>().is_err());
        assert!("udp:1".parse::<TransportKind>().is_err());
        assert_eq!(TransportKind::Tcp("h:1".into()).to_string(), "tcp:h:1");
    }
}
