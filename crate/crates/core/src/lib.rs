//! Federated training of a shared linear classifier over frozen embeddings,
//! with a private orthogonal (Cayley-parameterised) transform per client.

pub mod config;
pub mod dataio;
pub mod eval;
pub mod fedproto;
pub mod head;
pub mod linalg;
pub mod orthomap;
pub mod rng;
pub mod sgd;

pub use config::{ClassifierInit, ConfigError, ExperimentConfig};
pub use dataio::{EmbeddingDataset, Manifest, SplitDataset};
pub use eval::{AccMatrix, MetricsReport};
pub use fedproto::{ClientState, FedError, TrainConfig, TransportKind, Variant};
pub use head::{Example, HeadParams, LocalMap};
pub use linalg::Matrix;
pub use orthomap::{BlockSpec, LocalTransform};
