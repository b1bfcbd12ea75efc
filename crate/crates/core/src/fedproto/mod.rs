//! Client and server state machines for federated training of the shared
//! classifier, and the round loop that drives them over a [`Transport`].
//!
//! Each round the server broadcasts `w_g`, every client runs local SGD on its
//! own split (updating `w_g` and, depending on the variant, its local `X`),
//! and the server replaces `w_g` with the unweighted mean of the returned
//! copies. Only the all-global variant ever ships `X`.

pub mod transport;
pub mod wire;

use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::SplitDataset;
use crate::eval;
use crate::head::{self, HeadError, HeadParams, LocalMap};
use crate::linalg::{self, LinalgError, Matrix};
use crate::orthomap::{self, BlockSpec, OrthoError};
use crate::rng::{self, SplitMix64};
use crate::sgd::{self, OptimConfig, OptimError, OptimState};

pub use transport::{InProcess, TcpServer, Transport, TransportKind};

/// Condition numbers are sampled every this many rounds, plus the last round.
pub const KAPPA_INTERVAL: u32 = 10;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transport I/O: {0}")]
    Io(#[from] io::Error),
    #[error("client {client}: {source}")]
    Client {
        client: u32,
        #[source]
        source: HeadError,
    },
    #[error("aggregation needs at least one update")]
    NoUpdates,
    #[error("invalid federation setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Ortho(#[from] OrthoError),
}

/// Which parameters are local, and how the local map is parametrised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Cayley-orthogonal local map, only `w_g` is shared.
    Orthogonal,
    /// Unconstrained linear local map, only `w_g` is shared.
    Unconstrained,
    /// No local map (`Q = I`); a plain federated linear probe.
    IdentityLocal,
    /// Cayley map whose `X` is averaged along with `w_g`.
    AllGlobal,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Orthogonal,
        Variant::Unconstrained,
        Variant::IdentityLocal,
        Variant::AllGlobal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Orthogonal => "orthogonal",
            Variant::Unconstrained => "unconstrained",
            Variant::IdentityLocal => "identity-local",
            Variant::AllGlobal => "all-global",
        }
    }

    pub fn local_map(&self, spec: BlockSpec) -> LocalMap {
        match self {
            Variant::Orthogonal | Variant::AllGlobal => LocalMap::orthogonal(spec),
            Variant::Unconstrained => LocalMap::linear(spec),
            Variant::IdentityLocal => LocalMap::identity(spec.dim()),
        }
    }

    /// Whether `X` crosses the wire.
    pub fn shares_local(&self) -> bool {
        matches!(self, Variant::AllGlobal)
    }

    pub fn is_orthogonal(&self) -> bool {
        !matches!(self, Variant::Unconstrained)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant '{s}' (expected orthogonal, unconstrained, identity-local or all-global)"))
    }
}

/// Hyper-parameters that drive a federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub tau: f64,
    pub optim: OptimConfig,
    pub epochs: u32,
    pub rounds: u32,
    pub batch_size: usize,
    pub blocks: usize,
    pub variant: Variant,
}

/// Parameters that travel between server and clients.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams {
    pub w_g: Matrix,
    /// Only present for [`Variant::AllGlobal`].
    pub x: Option<Matrix>,
}

impl GlobalParams {
    pub fn shape(&self) -> wire::ParamShape {
        wire::ParamShape {
            classes: self.w_g.rows(),
            dim: self.w_g.cols(),
            with_local: self.x.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaSample {
    pub round: u32,
    pub kappa: f64,
    /// `‖QᵀQ − I‖_F`
    pub orthogonality_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub round: u32,
    pub val_accuracy: f64,
    pub head: HeadParams,
}

/// Everything one client owns. Its data and `X` never leave this struct
/// except through [`ClientState::local_update`]'s return value.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u32,
    pub name: String,
    pub variant: Variant,
    pub head: HeadParams,
    pub data: SplitDataset,
    pub history: Vec<RoundRecord>,
    pub best: Option<Snapshot>,
    pub kappa_trace: Vec<KappaSample>,
    wg_state: OptimState,
    x_state: Option<OptimState>,
    last_round: Option<u32>,
}

impl ClientState {
    pub fn new(
        id: u32,
        name: impl Into<String>,
        data: SplitDataset,
        variant: Variant,
        spec: BlockSpec,
        w_g: Matrix,
        tau: f64,
    ) -> Result<Self, FedError> {
        if data.train.dim != spec.dim() || w_g.cols() != spec.dim() || w_g.rows() != data.train.classes {
            return Err(FedError::Setup(format!(
                "client {id}: data is {}-dim with {} classes, classifier is {}x{}, block spec is {}-dim",
                data.train.dim,
                data.train.classes,
                w_g.rows(),
                w_g.cols(),
                spec.dim()
            )));
        }
        if data.train.is_empty() {
            return Err(FedError::Setup(format!("client {id}: empty training split")));
        }
        let local = variant.local_map(spec);
        let x_state = local.parameter().map(OptimState::zeros_like);
        let wg_state = OptimState::zeros_like(&w_g);
        Ok(Self {
            id,
            name: name.into(),
            variant,
            head: HeadParams::new(w_g, local, tau)?,
            data,
            history: Vec::new(),
            best: None,
            kappa_trace: Vec::new(),
            wg_state,
            x_state,
            last_round: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.head.dim()
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    /// `w_g⁽ⁱ⁾ ← w_g` (and `X⁽ⁱ⁾ ← X` for the all-global variant).
    pub fn adopt(&mut self, global: &GlobalParams) -> Result<(), FedError> {
        if global.w_g.shape() != self.head.w_g.shape() {
            return Err(FedError::Protocol(format!(
                "client {}: received {:?} classifier, expected {:?}",
                self.id,
                global.w_g.shape(),
                self.head.w_g.shape()
            )));
        }
        self.head.w_g = global.w_g.clone();
        match (&global.x, self.variant.shares_local()) {
            (Some(x), true) => self.head.local.set_parameter(x.clone())?,
            (None, false) => {}
            _ => {
                return Err(FedError::Protocol(format!(
                    "client {}: local parameter presence does not match variant {}",
                    self.id, self.variant
                )))
            }
        }
        Ok(())
    }

    /// Runs `epochs` passes of shuffled mini-batch SGD on the training split.
    pub fn train_epochs(&mut self, optim: &OptimConfig, epochs: u32, batch_size: usize, seed: u64) -> Result<(), FedError> {
        let mut rng = SplitMix64::new(seed);
        let batch_size = batch_size.max(1);
        let n = self.data.train.len();
        for _ in 0..epochs {
            let order = rng.permutation(n);
            for chunk in order.chunks(batch_size) {
                let batch: Vec<head::Example> = chunk.iter().map(|&i| self.data.train.examples[i].clone()).collect();
                let grads = head::gradients(&self.head, &batch).map_err(|source| FedError::Client {
                    client: self.id,
                    source,
                })?;
                sgd::step(&mut self.head.w_g, &grads.grad_wg, &mut self.wg_state, optim, true)?;
                if let (Some(x), Some(state)) = (self.head.local.parameter(), self.x_state.as_mut()) {
                    // X is not weight-decayed.
                    let mut x = x.clone();
                    sgd::step(&mut x, &grads.grad_x, state, optim, false)?;
                    self.head.local.set_parameter(x)?;
                }
            }
        }
        Ok(())
    }

    /// One `LocalUpdate`: adopt the broadcast, train, and return what may be sent.
    pub fn local_update(&mut self, global: &GlobalParams, cfg: &TrainConfig, round: u32) -> Result<GlobalParams, FedError> {
        self.adopt(global)?;
        let seed = rng::derive_seed(cfg.seed, &[rng::TAG_CLIENT, self.id as u64, round as u64]);
        self.train_epochs(&cfg.optim, cfg.epochs, cfg.batch_size, seed)?;
        Ok(self.outgoing())
    }

    /// The parameters this client is allowed to transmit.
    pub fn outgoing(&self) -> GlobalParams {
        GlobalParams {
            w_g: self.head.w_g.clone(),
            x: if self.variant.shares_local() {
                self.head.local.parameter().cloned()
            } else {
                None
            },
        }
    }

    /// Closes `round`: adopt the aggregate, score on validation, keep the best snapshot.
    pub fn end_round(&mut self, global: &GlobalParams, round: u32, total_rounds: u32) -> Result<(), FedError> {
        if let Some(last) = self.last_round {
            if round <= last {
                return Err(FedError::Protocol(format!(
                    "client {}: round {round} does not follow round {last}",
                    self.id
                )));
            }
        }
        self.last_round = Some(round);
        self.adopt(global)?;
        let val_accuracy = eval::evaluate(&self.head, &self.data.val).map_err(|source| FedError::Client {
            client: self.id,
            source,
        })?;
        self.history.push(RoundRecord { round, val_accuracy });
        if self.best.as_ref().is_none_or(|b| val_accuracy > b.val_accuracy) {
            self.best = Some(Snapshot {
                round,
                val_accuracy,
                head: self.head.clone(),
            });
        }
        if round.is_multiple_of(KAPPA_INTERVAL) || round + 1 == total_rounds {
            let q = self.head.local.matrix();
            self.kappa_trace.push(KappaSample {
                round,
                kappa: linalg::condition_number(q)?,
                orthogonality_error: linalg::orthogonality_error(q)?,
            });
        }
        Ok(())
    }

    /// Best-validation model, falling back to the current one before any round closed.
    pub fn best_head(&self) -> &HeadParams {
        self.best.as_ref().map_or(&self.head, |s| &s.head)
    }
}

/// Server-side state after the final aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub w_g: Matrix,
    /// Averaged local parameter; all-global variant only.
    pub x_global: Option<Matrix>,
    pub rounds_completed: u32,
    pub clients: usize,
}

impl ServerState {
    /// The server's evaluation model. Its local map is the identity except for
    /// the all-global variant, whose averaged `X` is part of the global model.
    pub fn model(&self, tau: f64, spec: BlockSpec) -> Result<HeadParams, FedError> {
        let local = match &self.x_global {
            Some(x) => LocalMap::Orthogonal(orthomap::cayley(x, spec)?),
            None => LocalMap::identity(self.w_g.cols()),
        };
        Ok(HeadParams::new(self.w_g.clone(), local, tau)?)
    }
}

/// Unweighted mean, accumulated in the order given.
pub fn aggregate(updates: &[Matrix]) -> Result<Matrix, FedError> {
    let first = updates.first().ok_or(FedError::NoUpdates)?;
    let mut sum = Matrix::zeros(first.rows(), first.cols());
    for u in updates {
        sum.axpy(1.0, u)?;
    }
    Ok(sum.scale(1.0 / updates.len() as f64))
}

fn aggregate_params(updates: &[GlobalParams]) -> Result<GlobalParams, FedError> {
    let w_g = aggregate(&updates.iter().map(|u| u.w_g.clone()).collect::<Vec<_>>())?;
    let xs: Vec<Matrix> = updates.iter().filter_map(|u| u.x.clone()).collect();
    let x = match xs.len() {
        0 => None,
        n if n == updates.len() => Some(aggregate(&xs)?),
        _ => return Err(FedError::Protocol("some but not all updates carry a local parameter".into())),
    };
    Ok(GlobalParams { w_g, x })
}

/// The server loop: `rounds` × (broadcast, collect, average), then a final broadcast.
pub fn serve_rounds<T: Transport + ?Sized>(transport: &mut T, init: GlobalParams, rounds: u32) -> Result<ServerState, FedError> {
    if rounds == 0 {
        return Err(FedError::Setup("at least one round is required".into()));
    }
    let mut global = init;
    for round in 0..rounds {
        let updates = transport.exchange(round, &global)?;
        global = aggregate_params(&updates)?;
        log::debug!("round {round}: aggregated {} updates", updates.len());
    }
    transport.finish(rounds, &global)?;
    Ok(ServerState {
        w_g: global.w_g,
        x_global: global.x,
        rounds_completed: rounds,
        clients: transport.client_count(),
    })
}

/// Result of a complete federation.
#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

impl FederationOutcome {
    /// Per-round validation accuracy of every client, rows ordered by client id.
    pub fn round_log(&self) -> Vec<(u32, Vec<RoundRecord>)> {
        self.clients.iter().map(|c| (c.id, c.history.clone())).collect()
    }
}

/// Initial broadcast: the given classifier and, for the all-global variant, `X = I`.
pub fn initial_params(w_g: Matrix, variant: Variant) -> GlobalParams {
    let x = variant.shares_local().then(|| Matrix::identity(w_g.cols()));
    GlobalParams { w_g, x }
}

/// Trains `clients` for `cfg.rounds` rounds over the chosen transport.
pub fn run_federation(
    clients: Vec<ClientState>,
    init_w_g: Matrix,
    cfg: &TrainConfig,
    transport: &TransportKind,
) -> Result<FederationOutcome, FedError> {
    if clients.is_empty() {
        return Err(FedError::Setup("at least one training client is required".into()));
    }
    let init = initial_params(init_w_g, cfg.variant);
    match transport {
        TransportKind::InProcess => {
            let mut t = InProcess::new(clients, cfg.clone());
            let server = serve_rounds(&mut t, init, cfg.rounds)?;
            Ok(FederationOutcome {
                server,
                clients: t.into_clients(),
            })
        }
        TransportKind::Tcp(addr) => transport::run_loopback(addr, clients, init, cfg),
    }
}
