//! Whole federations: single-client oracles, transports, privacy and fold bookkeeping.

mod common;

use common::*;
use fedot_core::config::{ClassifierInit, ExperimentConfig};
use fedot_core::dataio::{self, SynthConfig};
use fedot_core::eval;
use fedot_core::fedproto::wire::{self, MsgType};
use fedot_core::fedproto::{self, TrainConfig, TransportKind, Variant};

#[test]
fn centralised_training_on_one_domain() {
    let dir = tempfile::tempdir().unwrap();
    let s = benchmark(dir.path());
    let init = eval::random_classifier(5, 32, 0);
    let c = client(&s, 0, 0, Variant::IdentityLocal, &init);
    let out = fedproto::run_federation(vec![c], init, &train_cfg(Variant::IdentityLocal, 100), &TransportKind::InProcess).unwrap();
    let c = &out.clients[0];
    let acc = eval::evaluate(c.best_head(), &c.data.test).unwrap();
    // Frozen from the single-client oracle run.
    assert!(acc >= 0.95, "test accuracy {acc}");
    assert!((acc - CENTRALISED_ACCURACY).abs() < 1e-12, "test accuracy {acc}");
}

const CENTRALISED_ACCURACY: f64 = 0.965;

#[test]
fn identity_local_fits_separable_data() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(
        dir.path(),
        SynthConfig {
            noise: 0.0,
            domains: 1,
            ..Default::default()
        },
    );
    let init = eval::random_classifier(5, 32, 0);
    let mut c = client(&s, 0, 0, Variant::IdentityLocal, &init);
    let optim = ExperimentConfig::synthetic().optim();
    let mut reached = None;
    for epoch in 1..=50u32 {
        c.train_epochs(&optim, 1, 32, epoch as u64).unwrap();
        if eval::evaluate(&c.head, &c.data.train).unwrap() == 1.0 {
            reached = Some(epoch);
            break;
        }
    }
    assert!(reached.is_some(), "training accuracy below 100% after 50 epochs");
}

#[test]
fn identical_clients_follow_the_single_client_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(
        dir.path(),
        SynthConfig {
            per_domain: 60,
            domains: 1,
            ..Default::default()
        },
    );
    let init = eval::random_classifier(5, 32, 1);
    // A full batch makes the shuffle order, and hence the client id, irrelevant.
    let cfg = TrainConfig {
        batch_size: 1000,
        ..train_cfg(Variant::Orthogonal, 5)
    };
    let one = fedproto::run_federation(vec![client(&s, 0, 0, Variant::Orthogonal, &init)], init.clone(), &cfg, &TransportKind::InProcess).unwrap();
    let two = fedproto::run_federation(
        vec![client(&s, 0, 0, Variant::Orthogonal, &init), client(&s, 0, 1, Variant::Orthogonal, &init)],
        init,
        &cfg,
        &TransportKind::InProcess,
    )
    .unwrap();
    // Shuffled batches sum in a different order, so agreement is to rounding.
    assert!(one.server.w_g.sub(&two.server.w_g).unwrap().max_abs() < 1e-12);
    let x1 = one.clients[0].head.local.parameter().unwrap();
    for c in &two.clients {
        assert!(c.head.local.parameter().unwrap().sub(x1).unwrap().max_abs() < 1e-12);
    }
}

fn small_run(dir: &std::path::Path, transport: TransportKind, variant: Variant) -> String {
    let s = synth(
        dir,
        SynthConfig {
            per_domain: 80,
            domains: 3,
            dim: 8,
            classes: 3,
            ..Default::default()
        },
    );
    let cfg = ExperimentConfig {
        rounds: 12,
        variant,
        transport,
        manifest: s.manifest_path.clone(),
        ..ExperimentConfig::synthetic()
    };
    eval::report_json(&eval::leave_one_out(&s.manifest, &cfg).unwrap()).unwrap()
}

#[test]
fn tcp_and_in_process_reports_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    for variant in [Variant::Orthogonal, Variant::AllGlobal] {
        let a = small_run(dir.path(), TransportKind::InProcess, variant);
        let b = small_run(dir.path(), TransportKind::Tcp("127.0.0.1:0".into()), variant);
        assert_eq!(a, b, "{variant}");
    }
}

#[test]
fn local_transforms_never_cross_the_wire() {
    let dir = tempfile::tempdir().unwrap();
    let s = benchmark(dir.path());
    for variant in [Variant::Orthogonal, Variant::Unconstrained, Variant::IdentityLocal] {
        let (clients, uplink, downlink) = tapped_run(&s, variant, 4);
        for (c, (up, down)) in clients.iter().zip(uplink.iter().zip(&downlink)) {
            let frames = wire::parse_stream(up).unwrap();
            assert_eq!(frames[0].kind, MsgType::Hello);
            for f in &frames[1..] {
                assert_eq!(f.kind, MsgType::Update);
                assert_eq!(f.payload.len(), 4 + 5 * 32 * 8);
            }
            if let Some(x) = c.head.local.parameter() {
                assert!(!contains_any_value(up, x), "{variant}: X found in uplink");
                assert!(!contains_any_value(down, x), "{variant}: X found in downlink");
            }
        }
    }
}

#[test]
fn all_global_ships_its_local_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let s = benchmark(dir.path());
    let (clients, uplink, _) = tapped_run(&s, Variant::AllGlobal, 4);
    let last_update = wire::parse_stream(&uplink[0]).unwrap().pop().unwrap();
    assert_eq!(last_update.payload.len(), 4 + 5 * 32 * 8 + 32 * 32 * 8);
    // After the final broadcast every client holds the averaged X.
    let x = clients[0].head.local.parameter().unwrap();
    assert!(clients.iter().all(|c| c.head.local.parameter() == Some(x)));
}

#[test]
fn fold_results_do_not_depend_on_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(
        dir.path(),
        SynthConfig {
            per_domain: 80,
            domains: 3,
            dim: 8,
            classes: 3,
            ..Default::default()
        },
    );
    let cfg = ExperimentConfig {
        rounds: 6,
        ..ExperimentConfig::synthetic()
    };
    let forward = eval::leave_one_out(&s.manifest, &cfg).unwrap();
    let mut reversed = s.manifest.clone();
    reversed.domains.reverse();
    let backward = eval::leave_one_out(&reversed, &cfg).unwrap();
    let n = 3;
    for j in 0..n {
        for i in 0..n {
            assert_eq!(forward.acc_matrix.values[j][i], backward.acc_matrix.values[n - 1 - j][n - 1 - i]);
        }
    }
    assert_eq!(forward.generalization, backward.generalization);
}

#[test]
fn prototype_classifier_init_is_loaded_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(
        dir.path(),
        SynthConfig {
            per_domain: 60,
            domains: 2,
            ..Default::default()
        },
    );
    let cfg = ExperimentConfig {
        init: ClassifierInit::File(dir.path().join(dataio::SYNTH_CLASSIFIER)),
        ..ExperimentConfig::synthetic()
    };
    let w = eval::initial_classifier(&cfg, &s.manifest).unwrap();
    assert!(w.sub(&s.prototypes).unwrap().max_abs() < 1e-6);
}
