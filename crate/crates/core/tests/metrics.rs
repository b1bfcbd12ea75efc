//! Accuracy-matrix algebra and the gradient-discrepancy bound.

mod common;

use common::*;
use fedot_core::eval::{self, AccMatrix};
use fedot_core::head::{HeadParams, LocalMap};
use fedot_core::orthomap::BlockSpec;
use fedot_core::rng::SplitMix64;
use proptest::prelude::*;

fn random_acc(rng: &mut SplitMix64, n: usize) -> AccMatrix {
    let values = (0..n).map(|_| (0..n).map(|_| rng.next_f64()).collect()).collect();
    AccMatrix::new((0..n).map(|i| format!("d{i}")).collect(), values).unwrap()
}

#[test]
fn comprehensive_is_weighted_mix_of_the_other_two() {
    let mut rng = SplitMix64::new(31);
    for _ in 0..1000 {
        let n = 2 + rng.below(15) as usize;
        let m = random_acc(&mut rng, n);
        let nf = n as f64;
        let mix = (m.generalization() + (nf - 1.0) * m.personalization()) / nf;
        assert!((m.comprehensive() - mix).abs() <= 1e-12);
    }
}

#[test]
fn metrics_follow_their_definitions() {
    // Direct transcription of the three sums over folds j and clients i.
    let mut rng = SplitMix64::new(32);
    let m = random_acc(&mut rng, 5);
    let v = &m.values;
    let gen: f64 = (0..5).map(|j| v[j][j]).sum::<f64>() / 5.0;
    let mut pers = 0.0;
    let mut comp = 0.0;
    for (j, row) in v.iter().enumerate() {
        pers += row.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, a)| a).sum::<f64>() / 4.0;
        comp += row.iter().sum::<f64>() / 5.0;
    }
    assert!((m.generalization() - gen).abs() < 1e-15);
    assert!((m.personalization() - pers / 5.0).abs() < 1e-15);
    assert!((m.comprehensive() - comp / 5.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn metrics_stay_in_unit_interval(seed in any::<u64>(), n in 2usize..10) {
        let mut rng = SplitMix64::new(seed);
        let m = random_acc(&mut rng, n).metrics();
        for v in [m.generalization, m.personalization, m.comprehensive] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn relabelling_domains_leaves_metrics_unchanged(seed in any::<u64>(), n in 2usize..8) {
        // Permuting folds and columns together maps diagonal to diagonal.
        let mut rng = SplitMix64::new(seed);
        let m = random_acc(&mut rng, n);
        let perm = rng.permutation(n);
        let values = perm.iter().map(|&j| perm.iter().map(|&i| m.values[j][i]).collect()).collect();
        let p = AccMatrix::new(perm.iter().map(|&i| m.domains[i].clone()).collect(), values).unwrap();
        prop_assert!((p.generalization() - m.generalization()).abs() < 1e-12);
        prop_assert!((p.personalization() - m.personalization()).abs() < 1e-12);
    }
}

fn heads(rng: &mut SplitMix64, n: usize, d: usize, k: usize, orthogonal: bool) -> Vec<(String, HeadParams)> {
    let spec = BlockSpec::full(d);
    let w_g = random_matrix(rng, k, d, 1.0);
    (0..n)
        .map(|i| {
            let h = if orthogonal {
                orthogonal_head(w_g.clone(), random_matrix(rng, d, d, 1.0), spec, 100.0)
            } else {
                let mut x = random_matrix(rng, d, d, 0.4);
                for r in 0..d {
                    x.row_mut(r)[r] += 1.0;
                }
                linear_head(w_g.clone(), x, spec, 100.0)
            };
            (format!("c{i}"), h)
        })
        .collect()
}

#[test]
fn discrepancy_bound_holds_for_random_pairs() {
    let mut rng = SplitMix64::new(33);
    let (d, k) = (16, 5);
    let probe = random_batch(&mut rng, 64, d, k);
    for orthogonal in [true, false] {
        let hs = heads(&mut rng, 15, d, k, orthogonal);
        let diag = eval::diagnose_heads(&hs, &probe, BlockSpec::full(d)).unwrap();
        assert_eq!(diag.pairs.len(), 105);
        assert_eq!(diag.violations(), 0);
        for p in &diag.pairs {
            if orthogonal {
                assert!(p.discrepancy <= 4.0 * 100.0);
                assert!((p.bound - 400.0).abs() < 1e-6);
            } else {
                assert!(p.bound > 400.0);
            }
        }
    }
}

#[test]
fn identical_heads_have_zero_discrepancy() {
    let mut rng = SplitMix64::new(34);
    let h = HeadParams::new(random_matrix(&mut rng, 3, 4, 1.0), LocalMap::identity(4), 50.0).unwrap();
    let probe = random_batch(&mut rng, 10, 4, 3);
    let d = eval::diagnose_heads(&[("a".into(), h.clone()), ("b".into(), h)], &probe, BlockSpec::full(4)).unwrap();
    assert_eq!(d.pairs[0].discrepancy, 0.0);
    assert_eq!(d.pairs[0].bound, 200.0);
}
