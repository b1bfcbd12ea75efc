use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use fedot_core::config::{ClassifierInit, ExperimentConfig};
use fedot_core::dataio::{self, DataError, Manifest, SynthConfig};
use fedot_core::eval::{self, EvalError};
use fedot_core::fedproto::transport::{self, TcpServer};
use fedot_core::fedproto::{self, ClientState, TransportKind, Variant};

#[derive(Parser)]
#[command(name = "fedot", version, about = "Federated orthogonal-transform training over frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Leave-one-domain-out evaluation of every domain in the manifest.
    Run(Overrides),
    /// Generate the rotated-prototype synthetic benchmark.
    Synth(SynthArgs),
    /// Summarise the diagnostics of a finished run.
    Diag {
        /// Output directory of `fedot run`.
        run_dir: PathBuf,
    },
    /// Act as the server of a single federation over TCP.
    Serve {
        #[command(flatten)]
        overrides: Overrides,
        /// Address to listen on.
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Domain excluded from training; the server model is scored on its test split.
        #[arg(long)]
        hold_out: Option<String>,
    },
    /// Act as one client of a TCP federation.
    Client {
        #[command(flatten)]
        overrides: Overrides,
        /// Server address.
        #[arg(long)]
        connect: String,
        /// The manifest domain this client trains on.
        #[arg(long)]
        domain: String,
        /// Domain excluded from training (must match the server).
        #[arg(long)]
        hold_out: Option<String>,
    },
}

/// Configuration file plus per-key overrides; precedence is flags > file > defaults.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// TOML configuration file. Relative paths inside it are resolved against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Number of diagonal blocks of each local transform.
    #[arg(long)]
    blocks: Option<usize>,
    /// orthogonal, unconstrained, identity-local or all-global.
    #[arg(long)]
    variant: Option<Variant>,
    /// random or file:PATH (relative to the manifest).
    #[arg(long)]
    init: Option<ClassifierInit>,
    /// inprocess or tcp:HOST:PORT.
    #[arg(long)]
    transport: Option<TransportKind>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().dim)]
    dim: usize,
    #[arg(long, default_value_t = SynthConfig::default().classes)]
    classes: usize,
    #[arg(long, default_value_t = SynthConfig::default().domains)]
    domains: usize,
    #[arg(long, default_value_t = SynthConfig::default().per_domain)]
    per_domain: usize,
    #[arg(long, default_value_t = SynthConfig::default().noise)]
    noise: f64,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().rotation_scale)]
    rotation_scale: f64,
    /// Skip writing the prototype classifier.
    #[arg(long)]
    no_classifier: bool,
}

/// Errors split by exit status.
enum Failure {
    /// Bad configuration or arguments: exit 2.
    Usage(anyhow::Error),
    /// Anything that went wrong while doing the work: exit 1.
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn resolve_in(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => {
                let mut c = ExperimentConfig::load(path).map_err(usage)?;
                let base = path.parent().unwrap_or(Path::new(""));
                c.manifest = resolve_in(base, &c.manifest);
                c.out = resolve_in(base, &c.out);
                c
            }
            None => ExperimentConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                })*
            };
        }
        apply!(seed, tau, learning_rate, momentum, weight_decay, epochs, rounds, batch_size, blocks, variant, init, transport, manifest, out);
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

/// Loads the manifest; an unreadable or inconsistent manifest is a configuration error.
fn load_manifest(cfg: &ExperimentConfig) -> Result<Manifest, Failure> {
    Manifest::load(&cfg.manifest).map_err(|e| match e {
        DataError::Io { path, source } => usage(anyhow!("cannot read manifest {}: {source}", path.display())),
        other => usage(anyhow!("manifest {}: {other}", cfg.manifest.display())),
    })
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::Config(_) => usage(e),
        other => Failure::Runtime(other.into()),
    }
}

fn cmd_run(o: &Overrides) -> Result<(), Failure> {
    let cfg = o.resolve()?;
    let manifest = load_manifest(&cfg)?;
    cfg.validate_for_dim(manifest.dimension).map_err(usage)?;
    let report = eval::leave_one_out(&manifest, &cfg).map_err(eval_failure)?;
    eval::write_outputs(&report, &cfg, &cfg.out)?;
    println!("generalization = {:.4}", report.generalization);
    println!("personalization = {:.4}", report.personalization);
    println!("comprehensive = {:.4}", report.comprehensive);
    println!("outputs written to {}", cfg.out.display());
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<(), Failure> {
    let synth = SynthConfig {
        dim: a.dim,
        classes: a.classes,
        domains: a.domains,
        per_domain: a.per_domain,
        noise: a.noise,
        seed: a.seed,
        rotation_scale: a.rotation_scale,
        write_classifier: !a.no_classifier,
    };
    let s = dataio::generate_synthetic(&synth, &a.out).map_err(|e| match e {
        DataError::InvalidSynth(_) => usage(e),
        other => other.into(),
    })?;
    // A ready-to-run configuration with the synthetic preset.
    let cfg = ExperimentConfig {
        seed: a.seed,
        init: if a.no_classifier {
            ClassifierInit::Random
        } else {
            ClassifierInit::File(PathBuf::from(dataio::SYNTH_CLASSIFIER))
        },
        manifest: PathBuf::from(dataio::SYNTH_MANIFEST),
        out: PathBuf::from("run"),
        ..ExperimentConfig::synthetic()
    };
    let cfg_path = a.out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()).with_context(|| format!("writing {}", cfg_path.display()))?;
    println!(
        "wrote {} domains of {} examples to {} (manifest {}, config {})",
        s.datasets.len(),
        synth.per_domain,
        a.out.display(),
        s.manifest_path.display(),
        cfg_path.display()
    );
    Ok(())
}

fn cmd_diag(dir: &Path) -> Result<(), Failure> {
    let report = eval::read_report(dir).map_err(|e| match e {
        EvalError::Io { .. } => usage(e),
        other => other.into(),
    })?;
    print!("{}", eval::summarize(&report));
    Ok(())
}

/// Training domains of a single federation, sorted by name; their rank is the client id.
fn training_domains(manifest: &Manifest, hold_out: Option<&str>) -> Result<Vec<String>, Failure> {
    if let Some(h) = hold_out {
        if manifest.domain(h).is_none() {
            return Err(usage(anyhow!("held-out domain '{h}' is not in the manifest")));
        }
    }
    let mut names: Vec<String> = manifest
        .domains
        .iter()
        .map(|d| d.name.clone())
        .filter(|n| Some(n.as_str()) != hold_out)
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(usage(anyhow!("no training domains left")));
    }
    Ok(names)
}

fn cmd_serve(o: &Overrides, listen: &str, hold_out: Option<&str>) -> Result<(), Failure> {
    let cfg = o.resolve()?;
    let manifest = load_manifest(&cfg)?;
    let spec = cfg.validate_for_dim(manifest.dimension).map_err(usage)?;
    let n = training_domains(&manifest, hold_out)?.len();
    let init = fedproto::initial_params(eval::initial_classifier(&cfg, &manifest).map_err(eval_failure)?, cfg.variant);
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    println!("listening on {} for {n} clients", listener.local_addr()?);
    std::io::stdout().flush()?;
    let shape = init.shape();
    let mut server = TcpServer::accept(&listener, n, shape)?;
    let state = fedproto::serve_rounds(&mut server, init, cfg.rounds)?;
    println!("completed {} rounds with {} clients", state.rounds_completed, state.clients);
    if let Some(h) = hold_out {
        let entry = manifest.domain(h).expect("checked above");
        let split = eval::split_domain(&manifest.load_domain(entry)?, cfg.seed)?;
        let acc = eval::evaluate(&state.model(cfg.tau, spec)?, &split.test)?;
        println!("server accuracy on {h} = {acc}");
    }
    Ok(())
}

fn cmd_client(o: &Overrides, addr: &str, domain: &str, hold_out: Option<&str>) -> Result<(), Failure> {
    let cfg = o.resolve()?;
    let manifest = load_manifest(&cfg)?;
    let spec = cfg.validate_for_dim(manifest.dimension).map_err(usage)?;
    let names = training_domains(&manifest, hold_out)?;
    let id = names
        .iter()
        .position(|n| n == domain)
        .ok_or_else(|| usage(anyhow!("domain '{domain}' is not a training domain of this federation")))?;
    let entry = manifest.domain(domain).expect("listed in the manifest");
    let split = eval::split_domain(&manifest.load_domain(entry)?, cfg.seed)?;
    let init = eval::initial_classifier(&cfg, &manifest).map_err(eval_failure)?;
    let state = ClientState::new(id as u32, domain, split, cfg.variant, spec, init, cfg.tau)?;
    let stream = transport::connect(addr)?;
    let state = transport::run_client(stream, state, &cfg.train_config())?;
    let best = eval::evaluate(state.best_head(), &state.data.test)?;
    let last = eval::evaluate(&state.head, &state.data.test)?;
    println!("client {id} ({domain}) accuracy = {best}");
    println!("client {id} ({domain}) final-round accuracy = {last}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(o) => cmd_run(o),
        Command::Synth(a) => cmd_synth(a),
        Command::Diag { run_dir } => cmd_diag(run_dir),
        Command::Serve {
            overrides,
            listen,
            hold_out,
        } => cmd_serve(overrides, listen, hold_out.as_deref()),
        Command::Client {
            overrides,
            connect,
            domain,
            hold_out,
        } => cmd_client(overrides, connect, domain, hold_out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
