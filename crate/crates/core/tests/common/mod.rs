#![allow(dead_code)]

use std::net::TcpListener;
use std::path::Path;
use std::thread;

use fedot_core::config::ExperimentConfig;
use fedot_core::dataio::{self, SynthConfig, Synthetic};
use fedot_core::eval;
use fedot_core::fedproto::transport::{connect, run_client};
use fedot_core::fedproto::wire::Tap;
use fedot_core::fedproto::{self, serve_rounds, ClientState, TcpServer, TrainConfig, Variant};
use fedot_core::head::{Example, HeadParams, LocalMap};
use fedot_core::linalg::Matrix;
use fedot_core::orthomap::BlockSpec;
use fedot_core::rng::SplitMix64;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rng: &mut SplitMix64) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * gaussian(rng))
}

/// Random matrix restricted to the block pattern of `spec`.
pub fn random_in_pattern(rng: &mut SplitMix64, spec: BlockSpec, scale: f64) -> Matrix {
    spec.mask(&random_matrix(rng, spec.dim(), spec.dim(), scale))
}

pub fn random_batch(rng: &mut SplitMix64, n: usize, d: usize, k: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let f = (0..d).map(|_| gaussian(rng)).collect();
            Example::new(f, rng.below(k as u64) as u32).unwrap()
        })
        .collect()
}

pub fn orthogonal_head(w_g: Matrix, x: Matrix, spec: BlockSpec, tau: f64) -> HeadParams {
    let mut local = LocalMap::orthogonal(spec);
    local.set_parameter(x).unwrap();
    HeadParams::new(w_g, local, tau).unwrap()
}

pub fn linear_head(w_g: Matrix, x: Matrix, spec: BlockSpec, tau: f64) -> HeadParams {
    let mut local = LocalMap::linear(spec);
    local.set_parameter(x).unwrap();
    HeadParams::new(w_g, local, tau).unwrap()
}

/// The ablation benchmark: d=32, K=5, four domains, σ=0.3, seed 0.
pub fn benchmark(dir: &Path) -> Synthetic {
    dataio::generate_synthetic(&SynthConfig::default(), dir).unwrap()
}

pub fn synth(dir: &Path, cfg: SynthConfig) -> Synthetic {
    dataio::generate_synthetic(&cfg, dir).unwrap()
}

pub fn train_cfg(variant: Variant, rounds: u32) -> TrainConfig {
    ExperimentConfig {
        variant,
        rounds,
        ..ExperimentConfig::synthetic()
    }
    .train_config()
}

/// Client `id` training on domain `domain` of `s`.
pub fn client(s: &Synthetic, domain: usize, id: u32, variant: Variant, init: &Matrix) -> ClientState {
    let split = eval::split_domain(&s.datasets[domain], 0).unwrap();
    let spec = BlockSpec::full(s.manifest.dimension);
    ClientState::new(id, s.datasets[domain].domain.clone(), split, variant, spec, init.clone(), 100.0).unwrap()
}

/// Runs a TCP federation of the first three domains with every server-side
/// stream tapped. Returns the clients and, per client, the bytes the server
/// received and sent.
pub fn tapped_run(s: &Synthetic, variant: Variant, rounds: u32) -> (Vec<ClientState>, Vec<Vec<u8>>, Vec<Vec<u8>>) {
    let (k, d) = (s.manifest.class_count(), s.manifest.dimension);
    let init = eval::random_classifier(k, d, 2);
    let cfg = train_cfg(variant, rounds);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handles: Vec<_> = (0..3)
        .map(|i| {
            let c = client(s, i, i as u32, variant, &init);
            let cfg = cfg.clone();
            thread::spawn(move || run_client(connect(addr).unwrap(), c, &cfg).unwrap())
        })
        .collect();
    let mut streams = Vec::new();
    let mut captures = Vec::new();
    for _ in 0..3 {
        let (tap, cap) = Tap::new(listener.accept().unwrap().0);
        streams.push(tap);
        captures.push(cap);
    }
    let init_params = fedproto::initial_params(init, variant);
    let mut server = TcpServer::from_streams(streams, init_params.shape()).unwrap();
    serve_rounds(&mut server, init_params, cfg.rounds).unwrap();
    let mut clients: Vec<ClientState> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    clients.sort_by_key(|c| c.id);
    (
        clients,
        captures.iter().map(|c| c.received_bytes()).collect(),
        captures.iter().map(|c| c.sent_bytes()).collect(),
    )
}

/// Whether any entry of `m` other than 0 and 1 appears as an f64 in `haystack`.
pub fn contains_any_value(haystack: &[u8], m: &Matrix) -> bool {
    m.as_slice()
        .iter()
        .filter(|v| v.abs() > 1e-9 && (*v - 1.0).abs() > 1e-9)
        .any(|v| haystack.windows(8).any(|w| w == v.to_le_bytes()))
}
