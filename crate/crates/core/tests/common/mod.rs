//! Straight-line scalar reference for the multi-view losses, written from
//! the loss definitions without the graph, batching or shared helpers.
#![allow(dead_code)]

use mvd_core::mvdloss::{mvd_loss, MvdConfig, RepresentationBundle, SharedNegatives, Similarity};
use mvd_core::numcore::{Graph, Rng, Tensor};

/// `reps[camera][batch][dim]`.
pub type Reps = Vec<Vec<Vec<f64>>>;

pub struct Bundle {
    pub shared: Reps,
    pub private: Reps,
    pub private_next: Reps,
}

fn sim(q: &[f64], k: &[f64], cfg: &MvdConfig, w: Option<&[Vec<f64>]>) -> f64 {
    match cfg.similarity {
        Similarity::Cosine => {
            let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
            let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nk = k.iter().map(|a| a * a).sum::<f64>().sqrt();
            dot / (nq * nk)
        }
        Similarity::Bilinear => {
            let w = w.unwrap();
            let mut s = 0.0;
            for i in 0..q.len() {
                for j in 0..k.len() {
                    s += q[i] * w[i][j] * k[j];
                }
            }
            s
        }
    }
}

/// `-log(exp(pos/t) / (exp(pos/t) + sum exp(neg/t)))`.
pub fn info_nce(pos: f64, negs: &[f64], t: f64) -> f64 {
    let denom: f64 = (pos / t).exp() + negs.iter().map(|n| (n / t).exp()).sum::<f64>();
    -((pos / t).exp() / denom).ln()
}

pub fn shared_loss(b: &Bundle, cfg: &MvdConfig, w: Option<&[Vec<f64>]>) -> f64 {
    let n = b.shared.len();
    let batch = b.shared[0].len();
    let private_negs = cfg.use_private_negatives && !cfg.shared_only;
    let mut total = 0.0;
    for cq in 0..n {
        for cp in 0..n {
            if cq == cp {
                continue;
            }
            let mut pair = 0.0;
            for t in 0..batch {
                let q = &b.shared[cq][t];
                let pos = sim(q, &b.shared[cp][t], cfg, w);
                let mut negs = Vec::new();
                if cfg.use_shared_negatives {
                    let src = match cfg.shared_negative_source {
                        SharedNegatives::PositiveCamera => cp,
                        SharedNegatives::QueryCamera => cq,
                    };
                    for u in 0..batch {
                        if u != t {
                            negs.push(sim(q, &b.shared[src][u], cfg, w));
                        }
                    }
                }
                if private_negs {
                    for c in 0..n {
                        negs.push(sim(q, &b.private[c][t], cfg, w));
                    }
                }
                pair += info_nce(pos, &negs, cfg.temperature);
            }
            total += pair / batch as f64;
        }
    }
    total
}

pub fn private_loss(b: &Bundle, cfg: &MvdConfig, w: Option<&[Vec<f64>]>) -> f64 {
    let n = b.private.len();
    let batch = b.private[0].len();
    let mut total = 0.0;
    for c in 0..n {
        let mut cam = 0.0;
        for t in 0..batch {
            let q = &b.private[c][t];
            let pos = sim(q, &b.private_next[c][t], cfg, w);
            let negs: Vec<f64> = (0..n).filter(|&o| o != c).map(|o| sim(q, &b.private[o][t], cfg, w)).collect();
            cam += info_nce(pos, &negs, cfg.temperature);
        }
        total += cam / batch as f64;
    }
    total
}

pub fn random_reps(rng: &mut Rng, n: usize, b: usize, d: usize) -> Reps {
    (0..n)
        .map(|_| (0..b).map(|_| (0..d).map(|_| rng.standard_normal().tanh()).collect()).collect())
        .collect()
}

pub fn random_bundle(rng: &mut Rng, n: usize, b: usize, d: usize) -> Bundle {
    Bundle {
        shared: random_reps(rng, n, b, d),
        private: random_reps(rng, n, b, d),
        private_next: random_reps(rng, n, b, d),
    }
}

/// `(total, shared, private)` from the library's graph implementation.
pub fn library_losses(b: &Bundle, cfg: &MvdConfig, w: Option<&[Vec<f64>]>) -> (f64, f64, Option<f64>) {
    let mut g = Graph::<f64>::new();
    let mut vars = |reps: &Reps| {
        reps.iter()
            .map(|cam| {
                let rows = cam.len();
                let d = cam[0].len();
                g.input(Tensor::new(vec![rows, d], cam.concat()).unwrap())
            })
            .collect::<Vec<_>>()
    };
    let shared = vars(&b.shared);
    let (private, private_next) = if cfg.shared_only { (Vec::new(), Vec::new()) } else { (vars(&b.private), vars(&b.private_next)) };
    let wv = w.map(|w| g.input(Tensor::new(vec![w.len(), w.len()], w.concat()).unwrap()));
    let bundle = RepresentationBundle {
        shared,
        private,
        private_next,
    };
    let l = mvd_loss(&mut g, &bundle, cfg, wv).unwrap();
    (g.item(l.total), g.item(l.shared), l.private.map(|p| g.item(p)))
}

/// Largest absolute deviation between library and reference over shared,
/// private and total, for one bundle.
pub fn oracle_gap(b: &Bundle, cfg: &MvdConfig, w: Option<&[Vec<f64>]>) -> f64 {
    let (total, shared, private) = library_losses(b, cfg, w);
    let ls = shared_loss(b, cfg, w);
    let lp = if cfg.shared_only { 0.0 } else { private_loss(b, cfg, w) };
    let mut gap = (shared - ls).abs().max((total - (ls + lp)).abs());
    if let Some(p) = private {
        gap = gap.max((p - lp).abs());
    }
    gap
}
