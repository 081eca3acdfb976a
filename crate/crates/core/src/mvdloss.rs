//! Similarity measures, InfoNCE and the shared/private multi-view losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    /// `q^T W k` with a trainable square `W`.
    Bilinear,
}

/// Which camera supplies the in-batch negatives of the shared loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SharedNegatives {
    /// Shared representations of the positive camera at other batch indices.
    #[default]
    PositiveCamera,
    /// Shared representations of the query camera at other batch indices.
    QueryCamera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MvdConfig {
    pub temperature: f64,
    pub similarity: Similarity,
    pub use_shared_negatives: bool,
    pub use_private_negatives: bool,
    pub shared_only: bool,
    pub shared_negative_source: SharedNegatives,
}

impl Default for MvdConfig {
    fn default() -> Self {
        MvdConfig {
            temperature: 0.1,
            similarity: Similarity::Cosine,
            use_shared_negatives: true,
            use_private_negatives: true,
            shared_only: false,
            shared_negative_source: SharedNegatives::PositiveCamera,
        }
    }
}

impl MvdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("mvd.temperature", "must be a positive finite number"));
        }
        let private_negs = self.use_private_negatives && !self.shared_only;
        if !self.use_shared_negatives && !private_negs {
            return Err(Error::config(
                "mvd.use_shared_negatives",
                "the shared loss needs at least one source of negatives",
            ));
        }
        Ok(())
    }
}

/// Per-camera representations, each a `[B, D]` graph node.
///
/// `private` and `private_next` are empty in shared-only mode.
#[derive(Clone, Debug, Default)]
pub struct RepresentationBundle {
    pub shared: Vec<Var>,
    pub private: Vec<Var>,
    pub private_next: Vec<Var>,
}

impl RepresentationBundle {
    pub fn cameras(&self) -> usize {
        self.shared.len()
    }

    pub fn has_private(&self) -> bool {
        !self.private.is_empty()
    }
}

/// Scalar loss nodes of one evaluation.
#[derive(Clone, Copy, Debug)]
pub struct MvdLosses {
    pub total: Var,
    pub shared: Var,
    pub private: Option<Var>,
}

/// Representations prepared once for repeated similarity evaluation: unit rows
/// for cosine, `x W` on the query side for bilinear.
struct Prepared {
    query: Var,
    key: Var,
}

fn prepare<T: Scalar>(g: &mut Graph<T>, x: Var, kind: Similarity, w: Option<Var>) -> Result<Prepared> {
    match kind {
        Similarity::Cosine => {
            let n = g.l2_normalize_rows(x)?;
            Ok(Prepared { query: n, key: n })
        }
        Similarity::Bilinear => {
            let w = w.ok_or_else(|| Error::InvalidArgument("bilinear similarity requires W".into()))?;
            let qw = g.matmul(x, w, false, false)?;
            Ok(Prepared { query: qw, key: x })
        }
    }
}

/// Row-wise similarity `[B, 1]` between `q` and `k`, both `[B, D]`.
pub fn similarity<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, kind: Similarity, w: Option<Var>) -> Result<Var> {
    match kind {
        Similarity::Cosine => {
            let qn = g.l2_normalize_rows(q)?;
            let kn = g.l2_normalize_rows(k)?;
            g.row_dot(qn, kn)
        }
        Similarity::Bilinear => {
            let p = prepare(g, q, kind, w)?;
            g.row_dot(p.query, k)
        }
    }
}

/// Negated log-softmax of column 0 of `logits / temperature`, averaged over rows.
fn nce_from_logits<T: Scalar>(g: &mut Graph<T>, columns: &[Var], temperature: f64) -> Result<Var> {
    let logits = g.concat_cols(columns)?;
    let scaled = g.scale(logits, T::from_f64_lossy(1.0 / temperature));
    let ls = g.log_softmax(scaled)?;
    let rows = g.shape(ls)[0];
    let pos = g.pick_cols(ls, &vec![0; rows])?;
    let m = g.mean(pos);
    Ok(g.neg(m))
}

/// InfoNCE with per-row positive `k_pos` and per-row negatives `k_neg[i]`, all
/// `[B, D]`. Returns the batch mean.
pub fn info_nce<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k_pos: Var,
    k_neg: &[Var],
    kind: Similarity,
    w: Option<Var>,
    temperature: f64,
) -> Result<Var> {
    if k_neg.is_empty() {
        return Err(Error::InvalidArgument("InfoNCE needs at least one negative key".into()));
    }
    let mut cols = vec![similarity(g, q, k_pos, kind, w)?];
    for &k in k_neg {
        cols.push(similarity(g, q, k, kind, w)?);
    }
    nce_from_logits(g, &cols, temperature)
}

/// InfoNCE from precomputed similarities, in plain `f64`.
pub fn info_nce_from_similarities(positive: f64, negatives: &[f64], temperature: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("InfoNCE needs at least one negative key".into()));
    }
    let logits: Vec<f64> = std::iter::once(positive)
        .chain(negatives.iter().copied())
        .map(|s| s / temperature)
        .collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln() + mx;
    Ok(lse - logits[0])
}

/// Off-diagonal entries of a `[B, B]` matrix as `[B, B-1]`, row-major.
fn off_diagonal<T: Scalar>(g: &mut Graph<T>, m: Var) -> Result<Var> {
    let b = g.shape(m)[0];
    let flat = g.reshape(m, &[b * b, 1])?;
    let idx: Vec<usize> = (0..b)
        .flat_map(|r| (0..b).filter(move |&c| c != r).map(move |c| r * b + c))
        .collect();
    let picked = g.gather_rows(flat, &idx)?;
    g.reshape(picked, &[b, b - 1])
}

struct Context {
    shared: Vec<Prepared>,
    private: Vec<Prepared>,
    private_next: Vec<Prepared>,
    batch: usize,
}

fn context<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &RepresentationBundle,
    cfg: &MvdConfig,
    w: Option<Var>,
) -> Result<Context> {
    let n = bundle.cameras();
    if n == 0 {
        return Err(Error::InvalidArgument("representation bundle has no cameras".into()));
    }
    let batch = g.shape(bundle.shared[0])[0];
    let shape = g.shape(bundle.shared[0]).to_vec();
    for &v in bundle.shared.iter().chain(&bundle.private).chain(&bundle.private_next) {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::dim("mvd", format!("representation {:?} vs {shape:?}", g.shape(v))));
        }
    }
    if bundle.has_private() && (bundle.private.len() != n || bundle.private_next.len() != n) {
        return Err(Error::dim(
            "mvd",
            format!(
                "{n} shared, {} private, {} next private",
                bundle.private.len(),
                bundle.private_next.len()
            ),
        ));
    }
    let mut prep = |xs: &[Var]| -> Result<Vec<Prepared>> { xs.iter().map(|&x| prepare(g, x, cfg.similarity, w)).collect() };
    Ok(Context {
        shared: prep(&bundle.shared)?,
        private: prep(&bundle.private)?,
        private_next: prep(&bundle.private_next)?,
        batch,
    })
}

fn shared_from_context<T: Scalar>(g: &mut Graph<T>, ctx: &Context, cfg: &MvdConfig) -> Result<Var> {
    cfg.validate()?;
    let n = ctx.shared.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("shared loss needs at least 2 cameras, got {n}")));
    }
    if cfg.use_shared_negatives && ctx.batch < 2 {
        return Err(Error::InvalidArgument("in-batch shared negatives need a batch of at least 2".into()));
    }
    let private_negs = cfg.use_private_negatives && !cfg.shared_only && !ctx.private.is_empty();
    if !cfg.use_shared_negatives && !private_negs {
        return Err(Error::InvalidArgument("shared loss has no negatives".into()));
    }
    let mut terms = Vec::with_capacity(n * (n - 1));
    for cq in 0..n {
        for cp in 0..n {
            if cq == cp {
                continue;
            }
            let q = ctx.shared[cq].query;
            let mut cols = vec![g.row_dot(q, ctx.shared[cp].key)?];
            if cfg.use_shared_negatives {
                let src = match cfg.shared_negative_source {
                    SharedNegatives::PositiveCamera => cp,
                    SharedNegatives::QueryCamera => cq,
                };
                let all = g.matmul(q, ctx.shared[src].key, false, true)?;
                cols.push(off_diagonal(g, all)?);
            }
            if private_negs {
                for p in &ctx.private {
                    cols.push(g.row_dot(q, p.key)?);
                }
            }
            terms.push(nce_from_logits(g, &cols, cfg.temperature)?);
        }
    }
    sum_terms(g, &terms)
}

fn private_from_context<T: Scalar>(g: &mut Graph<T>, ctx: &Context, cfg: &MvdConfig) -> Result<Var> {
    let n = ctx.private.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("private loss needs at least 2 cameras, got {n}")));
    }
    let mut terms = Vec::with_capacity(n);
    for cq in 0..n {
        let q = ctx.private[cq].query;
        let mut cols = vec![g.row_dot(q, ctx.private_next[cq].key)?];
        for (cn, p) in ctx.private.iter().enumerate() {
            if cn != cq {
                cols.push(g.row_dot(q, p.key)?);
            }
        }
        terms.push(nce_from_logits(g, &cols, cfg.temperature)?);
    }
    sum_terms(g, &terms)
}

fn sum_terms<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Shared loss summed over ordered camera pairs, averaged over the batch.
pub fn shared_loss<T: Scalar>(g: &mut Graph<T>, bundle: &RepresentationBundle, cfg: &MvdConfig, w: Option<Var>) -> Result<Var> {
    let ctx = context(g, bundle, cfg, w)?;
    shared_from_context(g, &ctx, cfg)
}

/// Private loss summed over cameras, averaged over the batch.
pub fn private_loss<T: Scalar>(g: &mut Graph<T>, bundle: &RepresentationBundle, cfg: &MvdConfig, w: Option<Var>) -> Result<Var> {
    let ctx = context(g, bundle, cfg, w)?;
    private_from_context(g, &ctx, cfg)
}

/// Shared plus private loss. In shared-only mode the private term is absent.
pub fn mvd_loss<T: Scalar>(g: &mut Graph<T>, bundle: &RepresentationBundle, cfg: &MvdConfig, w: Option<Var>) -> Result<MvdLosses> {
    let ctx = context(g, bundle, cfg, w)?;
    let shared = shared_from_context(g, &ctx, cfg)?;
    if cfg.shared_only {
        return Ok(MvdLosses {
            total: shared,
            shared,
            private: None,
        });
    }
    let private = private_from_context(g, &ctx, cfg)?;
    let total = g.add(shared, private)?;
    Ok(MvdLosses {
        total,
        shared,
        private: Some(private),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn row(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.input(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap())
    }

    fn unit(d: usize, i: usize, s: f64) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = s;
        v
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::<f64>::new();
        let a = row(&mut g, &[1.0, 0.0]);
        let b = row(&mut g, &[0.0, 1.0]);
        let c = row(&mut g, &[1.0, 1.0]);
        let s = similarity(&mut g, a, b, Similarity::Cosine, None).unwrap();
        assert_eq!(g.item(s), 0.0);
        let s = similarity(&mut g, c, a, Similarity::Cosine, None).unwrap();
        assert!((g.item(s) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        let s = similarity(&mut g, c, c, Similarity::Cosine, None).unwrap();
        assert!((g.item(s) - 1.0).abs() < 1e-15);
        let q2 = row(&mut g, &[0.6, -1.4]);
        let k5 = row(&mut g, &[1.5, 2.5]);
        let q = row(&mut g, &[0.3, -0.7]);
        let k = row(&mut g, &[0.3, 0.5]);
        let s1 = similarity(&mut g, q2, k5, Similarity::Cosine, None).unwrap();
        let s2 = similarity(&mut g, q, k, Similarity::Cosine, None).unwrap();
        assert!((g.item(s1) - g.item(s2)).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_is_rejected() {
        let mut g = Graph::<f64>::new();
        let a = row(&mut g, &[0.0, 0.0]);
        let b = row(&mut g, &[0.0, 1.0]);
        assert!(matches!(similarity(&mut g, a, b, Similarity::Cosine, None), Err(Error::ZeroNorm)));
    }

    #[test]
    fn bilinear_with_identity_is_dot_product() {
        let mut g = Graph::<f64>::new();
        let w = g.input(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = row(&mut g, &[2.0, 3.0]);
        let b = row(&mut g, &[-1.0, 4.0]);
        let s = similarity(&mut g, a, b, Similarity::Bilinear, Some(w)).unwrap();
        assert_eq!(g.item(s), 10.0);
        assert!(similarity(&mut g, a, b, Similarity::Bilinear, None).is_err());
    }

    #[test]
    fn info_nce_worked_values() {
        let l = info_nce_from_similarities(1.0, &[0.0], 0.1).unwrap();
        assert!((l - (-10f64).exp().ln_1p()).abs() < 1e-15);
        assert!((info_nce_from_similarities(0.3, &[0.3], 0.1).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((info_nce_from_similarities(0.5, &[0.5; 3], 0.1).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(info_nce_from_similarities(1.0, &[], 0.1).is_err());
    }

    #[test]
    fn graph_info_nce_matches_scalar_form() {
        let mut g = Graph::<f64>::new();
        let q = row(&mut g, &[1.0, 0.0, 0.0]);
        let kp = row(&mut g, &[1.0, 0.0, 0.0]);
        let kn = row(&mut g, &[0.0, 1.0, 0.0]);
        let l = info_nce(&mut g, q, kp, &[kn], Similarity::Cosine, None, 0.1).unwrap();
        assert!((g.item(l) - (-10f64).exp().ln_1p()).abs() < 1e-15);
        assert!(info_nce(&mut g, q, kp, &[], Similarity::Cosine, None, 0.1).is_err());
    }

    #[test]
    fn two_camera_shared_example() {
        let mut g = Graph::<f64>::new();
        let s = row(&mut g, &unit(50, 0, 1.0));
        let p1 = row(&mut g, &unit(50, 1, 1.0));
        let p2 = row(&mut g, &unit(50, 1, -1.0));
        let bundle = RepresentationBundle {
            shared: vec![s, s],
            private: vec![p1, p2],
            private_next: vec![p1, p2],
        };
        let cfg = MvdConfig {
            use_shared_negatives: false,
            ..MvdConfig::default()
        };
        let l = shared_loss(&mut g, &bundle, &cfg, None).unwrap();
        let expect = 2.0 * (2.0 * (-10f64).exp()).ln_1p();
        assert!((g.item(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn two_camera_private_example() {
        let mut g = Graph::<f64>::new();
        let s = row(&mut g, &unit(50, 2, 1.0));
        let p1 = row(&mut g, &unit(50, 0, 1.0));
        let p2 = row(&mut g, &unit(50, 1, 1.0));
        let bundle = RepresentationBundle {
            shared: vec![s, s],
            private: vec![p1, p2],
            private_next: vec![p1, p2],
        };
        let l = private_loss(&mut g, &bundle, &MvdConfig::default(), None).unwrap();
        assert!((g.item(l) - 2.0 * (-10f64).exp().ln_1p()).abs() < 1e-12);
    }

    #[test]
    fn identical_privates_give_n_log_two() {
        let mut g = Graph::<f64>::new();
        let p = row(&mut g, &[0.2, -0.4, 0.9]);
        let bundle = RepresentationBundle {
            shared: vec![p; 3],
            private: vec![p; 3],
            private_next: vec![p; 3],
        };
        let l = private_loss(&mut g, &bundle, &MvdConfig::default(), None).unwrap();
        assert!((g.item(l) - 3.0 * 3f64.ln()).abs() < 1e-12);
        let bundle2 = RepresentationBundle {
            shared: vec![p; 2],
            private: vec![p; 2],
            private_next: vec![p; 2],
        };
        let l = private_loss(&mut g, &bundle2, &MvdConfig::default(), None).unwrap();
        assert!((g.item(l) - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_is_exact_sum_and_shared_only_drops_private() {
        let mut g = Graph::<f64>::new();
        let mk = |g: &mut Graph<f64>, seed: f64| {
            let d: Vec<f64> = (0..12).map(|i| ((i as f64 + 1.0) * seed).sin()).collect();
            g.input(Tensor::new(vec![4, 3], d).unwrap())
        };
        let bundle = RepresentationBundle {
            shared: vec![mk(&mut g, 0.3), mk(&mut g, 0.7)],
            private: vec![mk(&mut g, 1.1), mk(&mut g, 1.9)],
            private_next: vec![mk(&mut g, 2.3), mk(&mut g, 2.9)],
        };
        let cfg = MvdConfig::default();
        let out = mvd_loss(&mut g, &bundle, &cfg, None).unwrap();
        let (t, s, p) = (g.item(out.total), g.item(out.shared), g.item(out.private.unwrap()));
        assert_eq!(t - (s + p), 0.0);
        let so = MvdConfig {
            shared_only: true,
            ..cfg
        };
        let only = RepresentationBundle {
            shared: bundle.shared.clone(),
            ..Default::default()
        };
        let out = mvd_loss(&mut g, &only, &so, None).unwrap();
        assert!(out.private.is_none());
        assert_eq!(out.total, out.shared);
    }

    #[test]
    fn no_negatives_is_an_error() {
        let cfg = MvdConfig {
            use_shared_negatives: false,
            use_private_negatives: false,
            ..MvdConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = MvdConfig {
            use_shared_negatives: false,
            shared_only: true,
            ..MvdConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
