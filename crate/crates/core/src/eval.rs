//! Leave-one-domain-out evaluation, the three aggregate accuracies and the
//! condition-number / gradient-discrepancy diagnostics.
//!
//! Fold `j` trains on every domain except `j`. Row `j` of the accuracy matrix
//! holds the server model on domain `j`'s test split at column `j`, and each
//! training client's own-domain test accuracy at its column.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ClassifierInit, ConfigError, ExperimentConfig};
use crate::dataio::{self, DataError, EmbeddingDataset, Manifest, SplitDataset};
use crate::fedproto::{self, ClientState, FedError, KappaSample, TransportKind, Variant};
use crate::head::{self, Example, HeadError, HeadParams};
use crate::linalg::{self, Matrix};
use crate::orthomap::{self, BlockSpec};
use crate::rng::{self, SplitMix64};

/// Examples in the shared gradient-diagnostic probe batch.
pub const PROBE_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("fold holding out '{fold}': {source}")]
    Fold {
        fold: String,
        #[source]
        source: FedError,
    },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("invalid accuracy matrix: {0}")]
    AccMatrix(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Fraction of examples whose predicted class matches the label (0 for an empty set).
pub fn evaluate(p: &HeadParams, ds: &EmbeddingDataset) -> Result<f64, HeadError> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for ex in &ds.examples {
        if head::predict(p, &ex.feature)? == ex.label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// `values[j][i]`: accuracy attributed to domain `i` in the fold that holds out domain `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccMatrix {
    pub domains: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub generalization: f64,
    pub personalization: f64,
    pub comprehensive: f64,
}

impl AccMatrix {
    pub fn new(domains: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        let n = domains.len();
        if n < 2 {
            return Err(EvalError::AccMatrix("need at least two domains".into()));
        }
        if values.len() != n || values.iter().any(|r| r.len() != n) {
            return Err(EvalError::AccMatrix(format!("expected a {n}x{n} grid")));
        }
        if values.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(EvalError::AccMatrix("accuracies must lie in [0, 1]".into()));
        }
        Ok(Self { domains, values })
    }

    pub fn size(&self) -> usize {
        self.domains.len()
    }

    /// Mean of the diagonal: held-out accuracy of the server model.
    pub fn generalization(&self) -> f64 {
        let n = self.size();
        (0..n).map(|i| self.values[i][i]).sum::<f64>() / n as f64
    }

    /// Mean over folds of the mean off-diagonal entry: clients on their own domains.
    pub fn personalization(&self) -> f64 {
        let n = self.size();
        (0..n)
            .map(|j| (0..n).filter(|&i| i != j).map(|i| self.values[j][i]).sum::<f64>() / (n - 1) as f64)
            .sum::<f64>()
            / n as f64
    }

    /// Mean over folds of the mean over all entries.
    pub fn comprehensive(&self) -> f64 {
        let n = self.size();
        (0..n).map(|j| self.values[j].iter().sum::<f64>() / n as f64).sum::<f64>() / n as f64
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            generalization: self.generalization(),
            personalization: self.personalization(),
            comprehensive: self.comprehensive(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDiscrepancy {
    pub a: String,
    pub b: String,
    /// `‖∇_W ℓ⁽ᵃ⁾ − ∇_W ℓ⁽ᵇ⁾‖_F` on the shared probe batch.
    pub discrepancy: f64,
    /// `2τ(κ_a + κ_b)`
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientKappa {
    pub client: String,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub kappas: Vec<ClientKappa>,
    pub pairs: Vec<PairDiscrepancy>,
    pub dof: u64,
}

impl Diagnostics {
    pub fn max_kappa(&self) -> f64 {
        self.kappas.iter().map(|k| k.kappa).fold(f64::NEG_INFINITY, f64::max)
    }

    /// The pair with the largest discrepancy.
    pub fn worst_pair(&self) -> Option<&PairDiscrepancy> {
        self.pairs.iter().max_by(|a, b| a.discrepancy.total_cmp(&b.discrepancy))
    }

    pub fn violations(&self) -> usize {
        self.pairs.iter().filter(|p| p.discrepancy > p.bound).count()
    }
}

/// Gradient discrepancy of every client pair on `probe`, against the bound `2τ(κᵢ + κⱼ)`.
pub fn diagnose(clients: &[ClientState], probe: &[Example], spec: BlockSpec) -> Result<Diagnostics, EvalError> {
    diagnose_heads(
        &clients.iter().map(|c| (c.name.clone(), c.head.clone())).collect::<Vec<_>>(),
        probe,
        spec,
    )
}

/// [`diagnose`] over bare named heads.
pub fn diagnose_heads(heads: &[(String, HeadParams)], probe: &[Example], spec: BlockSpec) -> Result<Diagnostics, EvalError> {
    let mut kappas = Vec::with_capacity(heads.len());
    let mut grads = Vec::with_capacity(heads.len());
    for (name, h) in heads {
        let kappa = linalg::condition_number(h.local.matrix()).map_err(HeadError::from)?;
        kappas.push(ClientKappa {
            client: name.clone(),
            kappa,
        });
        grads.push(head::gradients(h, probe)?.grad_wg);
    }
    let mut pairs = Vec::new();
    for i in 0..heads.len() {
        for j in (i + 1)..heads.len() {
            let tau = heads[i].1.tau;
            pairs.push(PairDiscrepancy {
                a: heads[i].0.clone(),
                b: heads[j].0.clone(),
                discrepancy: grads[i].sub(&grads[j]).map_err(HeadError::from)?.frobenius_norm(),
                bound: 2.0 * tau * (kappas[i].kappa + kappas[j].kappa),
            });
        }
    }
    Ok(Diagnostics {
        kappas,
        pairs,
        dof: orthomap::dof(spec),
    })
}

/// Per-client results of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client: String,
    pub id: u32,
    pub best_round: Option<u32>,
    pub best_val_accuracy: Option<f64>,
    pub test_accuracy_best: f64,
    pub test_accuracy_final: f64,
    pub val_history: Vec<f64>,
    pub kappa_trace: Vec<KappaSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub held_out: String,
    pub server_accuracy: f64,
    pub clients: Vec<ClientReport>,
    pub diagnostics: Diagnostics,
}

/// Configuration echo embedded in the report. Transport and output directory
/// are omitted so that runs differing only in those produce identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub tau: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u32,
    pub rounds: u32,
    pub batch_size: usize,
    pub blocks: usize,
    pub variant: Variant,
    pub init: ClassifierInit,
    pub manifest: PathBuf,
    pub weight_decay_on_local: bool,
    pub classifier_rows_normalized: bool,
    pub kappa_interval: u32,
    pub probe_size: usize,
}

impl From<&ExperimentConfig> for ConfigEcho {
    fn from(c: &ExperimentConfig) -> Self {
        Self {
            tau: c.tau,
            seed: c.seed,
            learning_rate: c.learning_rate,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            epochs: c.epochs,
            rounds: c.rounds,
            batch_size: c.batch_size,
            blocks: c.blocks,
            variant: c.variant,
            init: c.init.clone(),
            manifest: c.manifest.clone(),
            weight_decay_on_local: false,
            classifier_rows_normalized: true,
            kappa_interval: fedproto::KAPPA_INTERVAL,
            probe_size: PROBE_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tau: f64,
    pub generalization: f64,
    pub personalization: f64,
    pub comprehensive: f64,
    /// The same metrics with final-round client models instead of best-validation snapshots.
    pub final_round: Metrics,
    pub acc_matrix: AccMatrix,
    pub acc_matrix_final: AccMatrix,
    pub max_kappa: f64,
    pub max_discrepancy: f64,
    pub bound_at_max_discrepancy: f64,
    pub bound_violations: usize,
    pub dof: u64,
    pub folds: Vec<FoldReport>,
    pub config: ConfigEcho,
}

/// Splits a domain with a seed keyed by its name, so the split is the same in every fold.
pub fn split_domain(ds: &EmbeddingDataset, seed: u64) -> Result<SplitDataset, DataError> {
    dataio::split(ds, rng::derive_seed(seed, &[rng::TAG_SPLIT, rng::name_tag(&ds.domain)]))
}

/// Seeded Gaussian classifier with unit-norm rows.
pub fn random_classifier(classes: usize, dim: usize, seed: u64) -> Matrix {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = SplitMix64::new(rng::derive_seed(seed, &[rng::TAG_INIT]));
    let mut m = Matrix::from_fn(classes, dim, |_, _| StandardNormal.sample(&mut rng));
    for i in 0..classes {
        let row = m.row_mut(i);
        let n = linalg::norm(row);
        row.iter_mut().for_each(|v| *v /= n);
    }
    m
}

pub fn initial_classifier(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<Matrix, EvalError> {
    Ok(match &cfg.init {
        ClassifierInit::Random => random_classifier(manifest.class_count(), manifest.dimension, cfg.seed),
        ClassifierInit::File(p) => manifest.load_classifier(p)?,
    })
}

/// The shared probe batch: up to [`PROBE_SIZE`] training examples drawn with a dedicated seed.
pub fn probe_batch(clients: &[ClientState], seed: u64) -> Vec<Example> {
    let pool: Vec<&Example> = clients.iter().flat_map(|c| c.data.train.examples.iter()).collect();
    let mut rng = SplitMix64::new(rng::derive_seed(seed, &[rng::TAG_PROBE]));
    let order = rng.permutation(pool.len());
    order.iter().take(PROBE_SIZE).map(|&i| pool[i].clone()).collect()
}

/// Builds the clients for a fold: the given domains, ordered by name, ids `0..n`.
pub fn build_clients(
    splits: &[(String, SplitDataset)],
    cfg: &ExperimentConfig,
    spec: BlockSpec,
    init: &Matrix,
) -> Result<Vec<ClientState>, FedError> {
    let mut sorted: Vec<&(String, SplitDataset)> = splits.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    sorted
        .into_iter()
        .enumerate()
        .map(|(id, (name, data))| ClientState::new(id as u32, name.clone(), data.clone(), cfg.variant, spec, init.clone(), cfg.tau))
        .collect()
}

struct FoldResult {
    report: FoldReport,
    row_best: Vec<f64>,
    row_final: Vec<f64>,
}

fn run_fold(
    held_out: usize,
    names: &[String],
    splits: &[SplitDataset],
    cfg: &ExperimentConfig,
    spec: BlockSpec,
    init: &Matrix,
) -> Result<FoldResult, EvalError> {
    let fold_name = names[held_out].clone();
    let tag = |source: FedError| EvalError::Fold {
        fold: fold_name.clone(),
        source,
    };
    let training: Vec<(String, SplitDataset)> = (0..names.len())
        .filter(|&i| i != held_out)
        .map(|i| (names[i].clone(), splits[i].clone()))
        .collect();
    let clients = build_clients(&training, cfg, spec, init).map_err(tag)?;
    let outcome = fedproto::run_federation(clients, init.clone(), &cfg.train_config(), &cfg.transport).map_err(tag)?;

    let server_model = outcome.server.model(cfg.tau, spec).map_err(tag)?;
    let server_accuracy = evaluate(&server_model, &splits[held_out].test)?;

    let n = names.len();
    let mut row_best = vec![0.0; n];
    let mut row_final = vec![0.0; n];
    row_best[held_out] = server_accuracy;
    row_final[held_out] = server_accuracy;
    let mut client_reports = Vec::with_capacity(outcome.clients.len());
    for c in &outcome.clients {
        let col = names.iter().position(|n| *n == c.name).expect("client names come from the manifest");
        let best = evaluate(c.best_head(), &c.data.test)?;
        let last = evaluate(&c.head, &c.data.test)?;
        row_best[col] = best;
        row_final[col] = last;
        client_reports.push(ClientReport {
            client: c.name.clone(),
            id: c.id,
            best_round: c.best.as_ref().map(|b| b.round),
            best_val_accuracy: c.best.as_ref().map(|b| b.val_accuracy),
            test_accuracy_best: best,
            test_accuracy_final: last,
            val_history: c.history.iter().map(|r| r.val_accuracy).collect(),
            kappa_trace: c.kappa_trace.clone(),
        });
    }
    let probe = probe_batch(&outcome.clients, cfg.seed);
    let diagnostics = diagnose(&outcome.clients, &probe, spec)?;
    Ok(FoldResult {
        report: FoldReport {
            held_out: fold_name.clone(),
            server_accuracy,
            clients: client_reports,
            diagnostics,
        },
        row_best,
        row_final,
    })
}

/// Runs every fold and assembles the report.
pub fn leave_one_out(manifest: &Manifest, cfg: &ExperimentConfig) -> Result<MetricsReport, EvalError> {
    let spec = cfg.validate_for_dim(manifest.dimension)?;
    if manifest.domains.len() < 2 {
        return Err(EvalError::AccMatrix("leave-one-domain-out needs at least two domains".into()));
    }
    let datasets = manifest.load_all()?;
    let splits = datasets
        .iter()
        .map(|d| split_domain(d, cfg.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let names: Vec<String> = datasets.iter().map(|d| d.domain.clone()).collect();
    let init = initial_classifier(cfg, manifest)?;
    log::info!(
        "leave-one-out over {} domains, variant {}, tau {}, {} rounds",
        names.len(),
        cfg.variant,
        cfg.tau,
        cfg.rounds
    );

    let fold = |j: usize| run_fold(j, &names, &splits, cfg, spec, &init);
    let results: Vec<FoldResult> = match cfg.transport {
        TransportKind::InProcess => (0..names.len()).into_par_iter().map(fold).collect::<Result<_, _>>()?,
        // Folds share the configured address, so they run one after another.
        TransportKind::Tcp(_) => (0..names.len()).map(fold).collect::<Result<_, _>>()?,
    };

    let acc_matrix = AccMatrix::new(names.clone(), results.iter().map(|r| r.row_best.clone()).collect())?;
    let acc_matrix_final = AccMatrix::new(names, results.iter().map(|r| r.row_final.clone()).collect())?;
    let folds: Vec<FoldReport> = results.into_iter().map(|r| r.report).collect();
    let best = acc_matrix.metrics();

    let max_kappa = folds
        .iter()
        .map(|f| f.diagnostics.max_kappa())
        .fold(f64::NEG_INFINITY, f64::max);
    let worst = folds
        .iter()
        .filter_map(|f| f.diagnostics.worst_pair())
        .max_by(|a, b| a.discrepancy.total_cmp(&b.discrepancy));
    Ok(MetricsReport {
        tau: cfg.tau,
        generalization: best.generalization,
        personalization: best.personalization,
        comprehensive: best.comprehensive,
        final_round: acc_matrix_final.metrics(),
        acc_matrix,
        acc_matrix_final,
        max_kappa,
        max_discrepancy: worst.map_or(0.0, |p| p.discrepancy),
        bound_at_max_discrepancy: worst.map_or(0.0, |p| p.bound),
        bound_violations: folds.iter().map(|f| f.diagnostics.violations()).sum(),
        dof: orthomap::dof(spec),
        folds,
        config: ConfigEcho::from(cfg),
    })
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const REPORT_JSON: &str = "report.json";
pub const DIAGNOSTICS_CSV: &str = "diagnostics.csv";
pub const CONFIG_ECHO: &str = "config.toml";

pub fn report_json(report: &MetricsReport) -> Result<String, EvalError> {
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from("fold,client,role,accuracy\n");
    for f in &report.folds {
        let _ = writeln!(out, "{},{},server,{}", f.held_out, f.held_out, f.server_accuracy);
        for c in &f.clients {
            let _ = writeln!(out, "{},{},client,{}", f.held_out, c.client, c.test_accuracy_best);
            let _ = writeln!(out, "{},{},client_final,{}", f.held_out, c.client, c.test_accuracy_final);
        }
    }
    out
}

pub fn diagnostics_csv(report: &MetricsReport) -> String {
    let mut out = String::from("fold,round,client,kappa,orthogonality_error,pairwise_discrepancy,bound\n");
    for f in &report.folds {
        for c in &f.clients {
            let last = c.kappa_trace.last().map(|k| k.round);
            for k in &c.kappa_trace {
                let (disc, bound) = if Some(k.round) == last {
                    f.diagnostics
                        .pairs
                        .iter()
                        .filter(|p| p.a == c.client || p.b == c.client)
                        .max_by(|a, b| a.discrepancy.total_cmp(&b.discrepancy))
                        .map_or((String::new(), String::new()), |p| (p.discrepancy.to_string(), p.bound.to_string()))
                } else {
                    (String::new(), String::new())
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    f.held_out, k.round, c.client, k.kappa, k.orthogonality_error, disc, bound
                );
            }
        }
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<(), EvalError> {
    fs::write(path, contents).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `metrics.csv`, `report.json`, `diagnostics.csv` and the full `config.toml` echo.
pub fn write_outputs(report: &MetricsReport, cfg: &ExperimentConfig, dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_file(&dir.join(CONFIG_ECHO), &cfg.to_toml_string())?;
    write_file(&dir.join(REPORT_JSON), &report_json(report)?)?;
    write_file(&dir.join(METRICS_CSV), &metrics_csv(report))?;
    write_file(&dir.join(DIAGNOSTICS_CSV), &diagnostics_csv(report))?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<MetricsReport, EvalError> {
    let path = dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path).map_err(|source| EvalError::Io { path, source })?;
    Ok(serde_json::from_str(&text)?)
}

/// Human-readable diagnostics summary of a finished run.
pub fn summarize(report: &MetricsReport) -> String {
    let mut out = String::new();
    let c = &report.config;
    let _ = writeln!(out, "tau = {}", report.tau);
    let _ = writeln!(out, "variant = {}, blocks = {}, dof = {}", c.variant, c.blocks, report.dof);
    let _ = writeln!(
        out,
        "generalization = {:.4}, personalization = {:.4}, comprehensive = {:.4}",
        report.generalization, report.personalization, report.comprehensive
    );
    let max_trace = report
        .folds
        .iter()
        .flat_map(|f| f.clients.iter().flat_map(|c| c.kappa_trace.iter().map(|k| k.kappa)))
        .fold(report.max_kappa, f64::max);
    let _ = writeln!(out, "max κ = {max_trace:.6}");
    let _ = writeln!(
        out,
        "max gradient discrepancy = {:.6} (bound {:.6}), violations = {}",
        report.max_discrepancy, report.bound_at_max_discrepancy, report.bound_violations
    );
    for f in &report.folds {
        let kappas: Vec<String> = f
            .diagnostics
            .kappas
            .iter()
            .map(|k| format!("{}={:.6}", k.client, k.kappa))
            .collect();
        let _ = writeln!(out, "fold {}: server acc {:.4}; κ {}", f.held_out, f.server_accuracy, kappas.join(" "));
    }
    out
}
