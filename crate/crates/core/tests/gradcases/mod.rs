//! Finite-difference cases for every differentiable graph op and for
//! encoders feeding the multi-view loss. Each returns `(label, max rel err)`.
#![allow(dead_code)]

use mvd_core::mvdloss::{mvd_loss, MvdConfig, RepresentationBundle, Similarity};
use mvd_core::nets::{Bind, Encoder, EncoderSpec};
use mvd_core::numcore::{finite_diff_check, Graph, ParamId, ParamStore, Rng, Stream, Tensor, Var};
use mvd_core::Result;

pub const H: f64 = 1e-6;

struct Case {
    store: ParamStore<f64>,
    ids: Vec<ParamId>,
    rng: Rng,
}

impl Case {
    fn new(seed: u64) -> Self {
        Case {
            store: ParamStore::new(),
            ids: Vec::new(),
            rng: Rng::new(seed, Stream::Init),
        }
    }

    fn param(&mut self, shape: &[usize], scale: f64, shift: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| shift + scale * self.rng.standard_normal()).collect();
        let id = self.store.register(format!("p{}", self.ids.len()), Tensor::new(shape.to_vec(), data).unwrap()).unwrap();
        self.ids.push(id);
        id
    }

    /// Worst relative error of `sum(op(params) * R)` for a fixed random `R`
    /// of the output's shape.
    fn check(mut self, name: &str, op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> (String, f64) {
        let ids = self.ids.clone();
        let w = {
            let mut g = Graph::new();
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(&self.store, id)).collect();
            let out = op(&mut g, &vars).unwrap();
            let shape = g.shape(out).to_vec();
            let mut wrng = Rng::new(99, Stream::Init);
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| wrng.standard_normal()).collect()).unwrap()
        };
        let report = finite_diff_check(&mut self.store, &ids, H, |store, g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
            let out = op(g, &vars)?;
            let wv = g.input(w.clone());
            let prod = g.mul(out, wv)?;
            Ok(g.sum(prod))
        })
        .unwrap();
        assert!(report.coordinates > 0);
        (format!("{name} {:?}", report.worst), report.max_rel_error)
    }
}

fn unary(name: &str, shift: f64, f: impl Fn(&mut Graph<f64>, Var) -> Var) -> (String, f64) {
    let mut c = Case::new(1);
    c.param(&[3, 4], 1.0, shift);
    c.check(name, |g, v| Ok(f(g, v[0])))
}

pub fn elementwise_ops() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    out.push(unary("relu", 0.0, |g, x| g.relu(x)));
    out.push(unary("tanh", 0.0, |g, x| g.tanh(x)));
    out.push(unary("exp", 0.0, |g, x| g.exp(x)));
    out.push(unary("log", 4.0, |g, x| g.log(x)));
    out.push(unary("softplus", 0.0, |g, x| g.softplus(x)));
    out.push(unary("square", 0.0, |g, x| g.square(x)));
    out.push(unary("neg", 0.0, |g, x| g.neg(x)));
    out.push(unary("scale", 0.0, |g, x| g.scale(x, -1.7)));
    out.push(unary("add_scalar", 0.0, |g, x| g.add_scalar(x, 0.3)));
    out.push(unary("clamp", 0.0, |g, x| g.clamp(x, -0.5, 0.5)));
    out
}

pub fn binary_ops() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    type Bin = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
    let ops: [(&str, Bin); 4] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
        ("minimum", |g, a, b| g.minimum(a, b)),
    ];
    for (name, f) in ops {
        let mut c = Case::new(2);
        c.param(&[3, 4], 1.0, 0.0);
        c.param(&[3, 4], 1.0, 0.0);
        out.push(c.check(name, |g, v| f(g, v[0], v[1])));
    }
    let mut c = Case::new(3);
    c.param(&[3, 4], 1.0, 0.0);
    c.param(&[1, 4], 1.0, 0.0);
    out.push(c.check("add_row", |g, v| g.add_row(v[0], v[1])));
    let mut c = Case::new(4);
    c.param(&[3, 4], 1.0, 0.0);
    c.param(&[1, 4], 1.0, 0.0);
    out.push(c.check("mul_row", |g, v| g.mul_row(v[0], v[1])));
    out
}

pub fn matrix_ops() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut c = Case::new(5);
        c.param(if ta { &[4, 3] } else { &[3, 4] }, 1.0, 0.0);
        c.param(if tb { &[5, 4] } else { &[4, 5] }, 1.0, 0.0);
        out.push(c.check(&format!("matmul {ta} {tb}"), |g, v| g.matmul(v[0], v[1], ta, tb)));
    }
    let mut c = Case::new(6);
    c.param(&[3, 4], 1.0, 0.0);
    c.param(&[5, 4], 1.0, 0.0);
    c.param(&[5], 1.0, 0.0);
    out.push(c.check("linear", |g, v| g.linear(v[0], v[1], Some(v[2]))));
    let mut c = Case::new(7);
    c.param(&[3, 6], 1.0, 0.0);
    c.param(&[6], 1.0, 1.0);
    c.param(&[6], 1.0, 0.0);
    out.push(c.check("layer_norm", |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)));
    let mut c = Case::new(8);
    c.param(&[3, 5], 1.0, 0.0);
    out.push(c.check("log_softmax", |g, v| g.log_softmax(v[0])));
    let mut c = Case::new(9);
    c.param(&[3, 5], 1.0, 0.0);
    out.push(c.check("l2_normalize_rows", |g, v| g.l2_normalize_rows(v[0])));
    let mut c = Case::new(10);
    c.param(&[3, 5], 1.0, 0.0);
    c.param(&[3, 5], 1.0, 0.0);
    out.push(c.check("row_dot", |g, v| g.row_dot(v[0], v[1])));
    out
}

pub fn reductions_and_reshaping() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut c = Case::new(11);
    c.param(&[3, 5], 1.0, 0.0);
    out.push(c.check("sum", |g, v| Ok(g.sum(v[0]))));
    let mut c = Case::new(12);
    c.param(&[3, 5], 1.0, 0.0);
    out.push(c.check("mean", |g, v| Ok(g.mean(v[0]))));
    let mut c = Case::new(13);
    c.param(&[3, 5], 1.0, 0.0);
    out.push(c.check("sum_cols", |g, v| g.sum_cols(v[0])));
    let mut c = Case::new(14);
    c.param(&[3, 2], 1.0, 0.0);
    c.param(&[3, 4], 1.0, 0.0);
    out.push(c.check("concat_cols", |g, v| g.concat_cols(&[v[0], v[1], v[0]])));
    let mut c = Case::new(15);
    c.param(&[2, 4], 1.0, 0.0);
    c.param(&[3, 4], 1.0, 0.0);
    out.push(c.check("concat_rows", |g, v| g.concat_rows(&[v[1], v[0]])));
    let mut c = Case::new(16);
    c.param(&[5, 4], 1.0, 0.0);
    out.push(c.check("slice_rows", |g, v| g.slice_rows(v[0], 1, 3)));
    let mut c = Case::new(17);
    c.param(&[3, 6], 1.0, 0.0);
    out.push(c.check("slice_cols", |g, v| g.slice_cols(v[0], 2, 3)));
    let mut c = Case::new(18);
    c.param(&[4, 3], 1.0, 0.0);
    out.push(c.check("gather_rows", |g, v| g.gather_rows(v[0], &[2, 0, 2, 3, 1])));
    let mut c = Case::new(19);
    c.param(&[3, 5], 1.0, 0.0);
    out.push(c.check("pick_cols", |g, v| g.pick_cols(v[0], &[4, 0, 4])));
    let mut c = Case::new(20);
    c.param(&[2, 3, 4], 1.0, 0.0);
    out.push(c.check("reshape", |g, v| g.reshape(v[0], &[4, 6])));
    out
}

pub fn convolutions() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for stride in [1, 2] {
        let mut c = Case::new(21);
        c.param(&[2, 3, 7, 7], 1.0, 0.0);
        c.param(&[4, 3, 3, 3], 0.5, 0.0);
        c.param(&[4], 1.0, 0.0);
        out.push(c.check(&format!("conv2d stride {stride}"), |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride)));
    }
    for (stride, pad) in [(1, 0), (2, 1)] {
        let mut c = Case::new(22);
        c.param(&[2, 3, 4, 4], 1.0, 0.0);
        c.param(&[3, 2, 3, 3], 0.5, 0.0);
        c.param(&[2], 1.0, 0.0);
        out.push(c.check(&format!("conv_transpose2d stride {stride}"), |g, v| {
            g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad)
        }));
    }
    out
}

/// Two 2-layer conv encoders on 8x8 images of two cameras, into the full
/// multi-view loss. Every parameter of both encoders is checked.
pub fn composite(similarity: Similarity, shared_only: bool) -> (String, f64) {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(30, Stream::Init);
    let spec = EncoderSpec {
        in_channels: 3,
        image_size: 8,
        channels: 4,
        kernel: 3,
        strides: vec![2, 1],
        repr_dim: 5,
    };
    let shared = Encoder::new(&mut store, "shared", spec.clone(), &mut rng).unwrap();
    let private = Encoder::new(&mut store, "private", spec, &mut rng).unwrap();
    let w = (similarity == Similarity::Bilinear).then(|| {
        let d = (0..25).map(|_| 0.3 * rng.standard_normal()).collect();
        store.register("bilinear", Tensor::new(vec![5, 5], d).unwrap()).unwrap()
    });
    let b = 3;
    let img = |rng: &mut Rng| Tensor::new(vec![b, 3, 8, 8], (0..b * 192).map(|_| rng.standard_normal().abs().min(1.0)).collect()).unwrap();
    let obs = [img(&mut rng), img(&mut rng)];
    let next = [img(&mut rng), img(&mut rng)];
    let cfg = MvdConfig {
        similarity,
        shared_only,
        ..MvdConfig::default()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let report = finite_diff_check(&mut store, &ids, H, |store, g| {
        let o: Vec<Var> = obs.iter().map(|t| g.input(t.clone())).collect();
        let n: Vec<Var> = next.iter().map(|t| g.input(t.clone())).collect();
        let s = o.iter().map(|&x| shared.forward(g, store, x, Bind::Train)).collect::<Result<Vec<_>>>()?;
        let (p, pn) = if shared_only {
            (Vec::new(), Vec::new())
        } else {
            (
                o.iter().map(|&x| private.forward(g, store, x, Bind::Train)).collect::<Result<Vec<_>>>()?,
                n.iter().map(|&x| private.forward(g, store, x, Bind::Train)).collect::<Result<Vec<_>>>()?,
            )
        };
        let wv = w.map(|id| g.param(store, id));
        let bundle = RepresentationBundle {
            shared: s,
            private: p,
            private_next: pn,
        };
        Ok(mvd_loss(g, &bundle, &cfg, wv)?.total)
    })
    .unwrap();
    (format!("{similarity:?} shared_only={shared_only} {:?}", report.worst), report.max_rel_error)
}
