//! The multi-view losses against the straight-line reference under every
//! configuration switch, plus invariants over random bundles.

mod common;

use common::{info_nce, library_losses, oracle_gap, random_bundle, shared_loss, Bundle};
use mvd_core::mvdloss::{MvdConfig, SharedNegatives, Similarity};
use mvd_core::numcore::{Rng, Stream};
use proptest::prelude::*;

fn configs() -> Vec<MvdConfig> {
    let base = MvdConfig::default();
    vec![
        base.clone(),
        MvdConfig { use_shared_negatives: false, ..base.clone() },
        MvdConfig { use_private_negatives: false, ..base.clone() },
        MvdConfig { shared_only: true, ..base.clone() },
        MvdConfig { shared_negative_source: SharedNegatives::QueryCamera, ..base.clone() },
        MvdConfig { temperature: 0.5, ..base.clone() },
        MvdConfig { similarity: Similarity::Bilinear, ..base },
    ]
}

#[test]
fn every_configuration_matches_the_reference() {
    let mut rng = Rng::new(7, Stream::Init);
    for cfg in configs() {
        for &(n, b) in &[(2, 2), (3, 4), (2, 8), (3, 1)] {
            if b < 2 && cfg.use_shared_negatives {
                continue;
            }
            let bundle = random_bundle(&mut rng, n, b, 6);
            let w: Vec<Vec<f64>> = (0..6).map(|_| (0..6).map(|_| 0.5 * rng.standard_normal()).collect()).collect();
            let w = (cfg.similarity == Similarity::Bilinear).then_some(w.as_slice());
            let gap = oracle_gap(&bundle, &cfg, w);
            assert!(gap < 1e-9, "{cfg:?} n={n} b={b}: gap {gap}");
        }
    }
}

#[test]
fn aligned_shared_and_orthogonal_private_reach_the_floor() {
    // s_t^c = e_t for every camera, privates on disjoint axes: every negative
    // has similarity 0 and every positive 1.
    for &(n, b) in &[(2, 2), (3, 4), (2, 8)] {
        let d = b + n;
        let e = |i: usize| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let bundle = Bundle {
            shared: (0..n).map(|_| (0..b).map(e).collect()).collect(),
            private: (0..n).map(|c| (0..b).map(|_| e(b + c)).collect()).collect(),
            private_next: (0..n).map(|c| (0..b).map(|_| e(b + c)).collect()).collect(),
        };
        let cfg = MvdConfig::default();
        let floor = (n * (n - 1)) as f64 * info_nce(1.0, &vec![0.0; b - 1 + n], 0.1);
        let got = library_losses(&bundle, &cfg, None).1;
        assert!((got - floor).abs() < 1e-12);
        assert!((shared_loss(&bundle, &cfg, None) - floor).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn camera_relabeling_leaves_losses_unchanged(seed in 0u64..10_000, n in 2usize..4, b in 2usize..5) {
        let mut rng = Rng::new(seed, Stream::Init);
        let bundle = random_bundle(&mut rng, n, b, 5);
        let cfg = MvdConfig::default();
        let (t, s, p) = library_losses(&bundle, &cfg, None);
        let rev = |r: &Vec<Vec<Vec<f64>>>| r.iter().rev().cloned().collect::<Vec<_>>();
        let swapped = Bundle {
            shared: rev(&bundle.shared),
            private: rev(&bundle.private),
            private_next: rev(&bundle.private_next),
        };
        let (t2, s2, p2) = library_losses(&swapped, &cfg, None);
        prop_assert!((t - t2).abs() < 1e-9 && (s - s2).abs() < 1e-9);
        prop_assert!((p.unwrap() - p2.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn cosine_losses_ignore_row_scale(seed in 0u64..10_000, scale in 0.1f64..20.0) {
        let mut rng = Rng::new(seed, Stream::Init);
        let bundle = random_bundle(&mut rng, 2, 3, 4);
        let cfg = MvdConfig::default();
        let scaled = |r: &Vec<Vec<Vec<f64>>>| r.iter().map(|c| c.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect()).collect();
        let big = Bundle {
            shared: scaled(&bundle.shared),
            private: scaled(&bundle.private),
            private_next: bundle.private_next.clone(),
        };
        let (t, _, _) = library_losses(&bundle, &cfg, None);
        let (t2, _, _) = library_losses(&big, &cfg, None);
        prop_assert!((t - t2).abs() < 1e-9);
    }

    #[test]
    fn losses_are_positive_and_total_is_the_sum(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed, Stream::Init);
        let bundle = random_bundle(&mut rng, 3, 4, 5);
        let (t, s, p) = library_losses(&bundle, &MvdConfig::default(), None);
        let p = p.unwrap();
        prop_assert!(s > 0.0 && p > 0.0);
        prop_assert_eq!(t, s + p);
    }
}
