//! Sampling uniformity of the replay buffer.

use mvd_core::env::MultiViewObservation;
use mvd_core::numcore::{Rng, Stream};
use mvd_core::rl::ReplayBuffer;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn obs(v: u8) -> MultiViewObservation {
    MultiViewObservation {
        image_size: 4,
        frames: vec![vec![v; 48]],
        proprio: None,
    }
}

#[test]
fn every_index_is_drawn_uniformly() {
    let mut buf = ReplayBuffer::new(10, 1, 4, 1, 1, 0).unwrap();
    for i in 0..10 {
        buf.push(&obs(i), &[0.0], i as f32, &obs(i + 1), false, false).unwrap();
    }
    let mut rng = Rng::new(0, Stream::Replay);
    let mut counts = [0u32; 10];
    let draws = 10_000;
    for _ in 0..draws / 10 {
        let batch = buf.sample::<f64>(10, &mut rng).unwrap();
        for &r in batch.reward.data() {
            counts[r as usize] += 1;
        }
    }
    assert!(counts.iter().all(|&c| c > 0));
    let expected = draws as f64 / 10.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(chi2);
    assert!(p > 0.001, "chi-square {chi2}, p = {p}, counts {counts:?}");
}

#[test]
fn ring_overwrite_keeps_sampling_uniform_over_live_items() {
    let mut buf = ReplayBuffer::new(10, 1, 4, 1, 1, 0).unwrap();
    for i in 0..25u8 {
        buf.push(&obs(i), &[0.0], i as f32, &obs(i + 1), false, i % 5 == 4).unwrap();
    }
    let mut rng = Rng::new(1, Stream::Replay);
    let mut counts = [0u32; 25];
    for _ in 0..1000 {
        for &r in buf.sample::<f64>(10, &mut rng).unwrap().reward.data() {
            counts[r as usize] += 1;
        }
    }
    assert!(counts[..15].iter().all(|&c| c == 0), "evicted items drawn: {counts:?}");
    let live = &counts[15..];
    let chi2: f64 = live.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
    let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(chi2);
    assert!(p > 0.001, "p = {p}, counts {live:?}");
}
