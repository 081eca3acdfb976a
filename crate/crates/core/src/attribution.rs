//! Integrated Gradients, SmoothGrad-Squared and policy-weighted saliency maps
//! over the shared and private representations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Bind;
use crate::numcore::{Graph, Rng, Scalar, Tensor, Var};
use crate::rl::Agent;

/// A batched function `[B, ...] -> [B, K]` recorded on a graph.
pub trait BatchFn<T: Scalar> {
    fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

impl<T: Scalar, F> BatchFn<T> for F
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self(g, x)
    }
}

/// Outputs `[B, K]` and, for each requested output column, the gradient of
/// that column with respect to every input row. One forward pass, one
/// backward pass per column.
pub fn value_and_grads<T: Scalar>(
    f: &impl BatchFn<T>,
    x: &Tensor<T>,
    columns: &[usize],
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f.forward(&mut g, xv)?;
    let &[b, k] = g.shape(out) else {
        return Err(Error::dim("attribution", format!("function output {:?} is not [B, K]", g.shape(out))));
    };
    if b != x.shape()[0] {
        return Err(Error::dim("attribution", format!("batch {} in, {b} out", x.shape()[0])));
    }
    let mut grads = Vec::with_capacity(columns.len());
    for &c in columns {
        if c >= k {
            return Err(Error::dim("attribution", format!("column {c} of {k}")));
        }
        let mut seed = Tensor::zeros(vec![b, k]);
        for r in 0..b {
            seed.data_mut()[r * k + c] = T::one();
        }
        let gr = g.backward_from(out, &seed)?;
        let dx = gr.get(xv).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); x.len()]);
        grads.push(Tensor::new(x.shape().to_vec(), dx)?);
    }
    Ok((g.value(out).clone(), grads))
}

/// Integrated Gradients of each output column in `columns` for a single input
/// `x: [1, ...]`, using a left Riemann sum over `steps` points
/// `baseline + (k / steps)(x - baseline)`, `k = 0..steps`.
pub fn integrated_gradients_multi<T: Scalar>(
    f: &impl BatchFn<T>,
    x: &Tensor<T>,
    baseline: &Tensor<T>,
    steps: usize,
    columns: &[usize],
) -> Result<Vec<Tensor<T>>> {
    if x.shape() != baseline.shape() || x.shape().first() != Some(&1) {
        return Err(Error::dim("integrated_gradients", format!("input {:?}, baseline {:?}", x.shape(), baseline.shape())));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs at least one step".into()));
    }
    let n = x.len();
    let diff: Vec<T> = x.data().iter().zip(baseline.data()).map(|(&a, &b)| a - b).collect();
    let mut path = Vec::with_capacity(steps * n);
    for k in 0..steps {
        let alpha = T::from_f64_lossy(k as f64 / steps as f64);
        path.extend(baseline.data().iter().zip(&diff).map(|(&b, &d)| b + alpha * d));
    }
    let mut shape = x.shape().to_vec();
    shape[0] = steps;
    let (_, grads) = value_and_grads(f, &Tensor::new(shape, path)?, columns)?;
    grads
        .into_iter()
        .map(|gr| {
            let mut acc = vec![0.0f64; n];
            for row in gr.data().chunks(n) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v.as_f64();
                }
            }
            let attr = acc
                .iter()
                .zip(&diff)
                .map(|(&a, &d)| T::from_f64_lossy(d.as_f64() * a / steps as f64))
                .collect();
            Tensor::new(x.shape().to_vec(), attr)
        })
        .collect()
}

/// Integrated Gradients of the scalar function `f: [B, ...] -> [B, 1]`.
pub fn integrated_gradients<T: Scalar>(
    f: &impl BatchFn<T>,
    x: &Tensor<T>,
    baseline: &Tensor<T>,
    steps: usize,
) -> Result<Tensor<T>> {
    Ok(integrated_gradients_multi(f, x, baseline, steps, &[0])?.remove(0))
}

/// Mean over `n` Gaussian-perturbed copies of `x` of the squared
/// attributions returned by `attr`, elementwise for every returned tensor.
pub fn smoothgrad_squared<T: Scalar>(
    mut attr: impl FnMut(&Tensor<T>) -> Result<Vec<Tensor<T>>>,
    x: &Tensor<T>,
    n: usize,
    sigma: f64,
    rng: &mut Rng,
) -> Result<Vec<Tensor<T>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("smoothgrad needs n >= 1".into()));
    }
    let mut acc: Vec<Vec<f64>> = Vec::new();
    for _ in 0..n {
        let noisy: Vec<T> = x.data().iter().map(|&v| v + T::from_f64_lossy(sigma * rng.standard_normal())).collect();
        let maps = attr(&Tensor::new(x.shape().to_vec(), noisy)?)?;
        if acc.is_empty() {
            acc = maps.iter().map(|m| vec![0.0; m.len()]).collect();
        }
        for (a, m) in acc.iter_mut().zip(&maps) {
            for (s, &v) in a.iter_mut().zip(m.data()) {
                *s += v.as_f64() * v.as_f64();
            }
        }
    }
    acc.into_iter()
        .map(|a| Tensor::new(x.shape().to_vec(), a.into_iter().map(|v| T::from_f64_lossy(v / n as f64)).collect()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencySettings {
    pub ig_steps: usize,
    pub smoothgrad_n: usize,
    /// Noise standard deviation in pixel units (pixels lie in `[0, 1]`).
    pub smoothgrad_sigma: f64,
    pub baseline: String,
}

impl Default for SaliencySettings {
    fn default() -> Self {
        SaliencySettings {
            ig_steps: 128,
            smoothgrad_n: 5,
            smoothgrad_sigma: 0.1,
            baseline: "black".into(),
        }
    }
}

impl SaliencySettings {
    pub fn validate(&self) -> Result<()> {
        if self.ig_steps < 8 {
            return Err(Error::InvalidArgument("ig_steps must be at least 8".into()));
        }
        if self.smoothgrad_n == 0 {
            return Err(Error::InvalidArgument("smoothgrad_n must be at least 1".into()));
        }
        if !(self.smoothgrad_sigma >= 0.0 && self.smoothgrad_sigma.is_finite()) {
            return Err(Error::InvalidArgument("smoothgrad_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Saliency of one camera. Maps are `H x W`, rescaled to `[0, 1]`;
/// `*_max` are the maxima before rescaling.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraSaliency {
    pub camera: usize,
    pub image_size: usize,
    pub shared: Vec<f64>,
    pub shared_max: f64,
    pub private: Option<Vec<f64>>,
    pub private_max: Option<f64>,
    /// Summed policy attribution of every representation dimension.
    pub policy_attr: Vec<f64>,
}

fn rescale(map: &mut [f64]) -> f64 {
    let max = map.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        map.iter_mut().for_each(|v| *v /= max);
    }
    max
}

/// `sum_d sum_channels |pixel_attr_d * policy_attr_d|` per pixel.
fn weighted_map<T: Scalar>(pixel: &[Tensor<T>], policy: &[f64], hw: usize) -> Vec<f64> {
    let mut map = vec![0.0; hw];
    for (attr, &w) in pixel.iter().zip(policy) {
        for (i, &v) in attr.data().iter().enumerate() {
            map[i % hw] += (v.as_f64() * w).abs();
        }
    }
    map
}

/// Policy-weighted saliency maps for every camera of one observation.
///
/// `images[c]` is camera `c`'s stacked frame `[1, C, H, W]`. The policy
/// attributions use the deterministic action and, as baseline, the
/// representation of the black image.
pub fn policy_saliency<T: Scalar>(
    agent: &Agent<T>,
    images: &[Tensor<T>],
    proprio: Option<&Tensor<T>>,
    settings: &SaliencySettings,
    rng: &mut Rng,
) -> Result<Vec<CameraSaliency>> {
    settings.validate()?;
    if images.len() != agent.spec.cameras {
        return Err(Error::dim("policy_saliency", format!("{} images for {} cameras", images.len(), agent.spec.cameras)));
    }
    let d = agent.cfg.repr_dim;
    let dims: Vec<usize> = (0..d).collect();
    let store = &agent.store;
    let shared_fn = |g: &mut Graph<T>, x: Var| agent.shared.forward(g, store, x, Bind::Frozen);
    let mut out = Vec::with_capacity(images.len());
    for (c, x) in images.iter().enumerate() {
        let s = x.shape();
        if s.len() != 4 || s[0] != 1 || s[2] != s[3] {
            return Err(Error::dim("policy_saliency", format!("camera {c} image {s:?}")));
        }
        let hw = s[2] * s[3];
        let black = Tensor::zeros(s.to_vec());
        let ig = |f: &dyn Fn(&mut Graph<T>, Var) -> Result<Var>, input: &Tensor<T>| {
            integrated_gradients_multi(&f, input, &black, settings.ig_steps, &dims)
        };
        let n = settings.smoothgrad_n;
        let sigma = settings.smoothgrad_sigma;
        let shared_px = smoothgrad_squared(|xn| ig(&shared_fn, xn), x, n, sigma, rng)?;
        let private_px = match &agent.private {
            Some(enc) => {
                let f = |g: &mut Graph<T>, x: Var| enc.forward(g, store, x, Bind::Frozen);
                Some(smoothgrad_squared(|xn| ig(&f, xn), x, n, sigma, rng)?)
            }
            None => None,
        };

        let (s_x, p_x) = agent.encode(x)?;
        let (s_b, p_b) = agent.encode(&black)?;
        let compose = |s: Tensor<T>, p: Option<Tensor<T>>| -> Result<Tensor<T>> {
            let mut z = s.into_data();
            if let Some(p) = p {
                z.extend(p.into_data());
            }
            if let Some(pr) = proprio {
                z.extend_from_slice(pr.data());
            }
            let len = z.len();
            Tensor::new(vec![1, len], z)
        };
        let z = compose(s_x, p_x)?;
        let z_base = compose(s_b, p_b)?;
        let policy = |g: &mut Graph<T>, z: Var| agent.actor.mean_action(g, store, z, Bind::Frozen);
        let outputs: Vec<usize> = (0..agent.spec.action_dim).collect();
        let per_output = integrated_gradients_multi(&policy, &z, &z_base, settings.ig_steps, &outputs)?;
        let mut policy_attr = vec![0.0; z.len()];
        for a in &per_output {
            for (p, &v) in policy_attr.iter_mut().zip(a.data()) {
                *p += v.as_f64();
            }
        }

        let mut shared = weighted_map(&shared_px, &policy_attr[..d], hw);
        let shared_max = rescale(&mut shared);
        let (private, private_max) = match &private_px {
            Some(px) => {
                let mut m = weighted_map(px, &policy_attr[d..2 * d], hw);
                let max = rescale(&mut m);
                (Some(m), Some(max))
            }
            None => (None, None),
        };
        out.push(CameraSaliency {
            camera: c,
            image_size: s[2],
            shared,
            shared_max,
            private,
            private_max,
            policy_attr,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct MapMeta {
    camera: String,
    shared_file: String,
    shared_max: f64,
    private_file: Option<String>,
    private_max: Option<f64>,
}

#[derive(Serialize)]
struct SaliencyMeta<'a> {
    settings: &'a SaliencySettings,
    cameras: Vec<MapMeta>,
}

/// Heatmap blended over the (first frame of the) input image.
fn overlay(frame: &[u8], map: &[f64], size: usize) -> image::RgbImage {
    image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        let heat = map[i] * 255.0;
        let px = |ch: usize| (0.35 * frame[ch * size * size + i] as f64 + 0.65 * heat).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Write `saliency_<camera>_{shared,private}.png` and `saliency.json`
/// (settings and pre-scaling maxima) into `dir`.
pub fn export_saliency(
    maps: &[CameraSaliency],
    frames: &[Vec<u8>],
    camera_ids: &[String],
    settings: &SaliencySettings,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut meta = SaliencyMeta {
        settings,
        cameras: Vec::new(),
    };
    for m in maps {
        let id = &camera_ids[m.camera];
        let frame = &frames[m.camera];
        let shared_file = format!("saliency_{id}_shared.png");
        overlay(frame, &m.shared, m.image_size).save(dir.join(&shared_file))?;
        written.push(dir.join(&shared_file));
        let private_file = match &m.private {
            Some(p) => {
                let f = format!("saliency_{id}_private.png");
                overlay(frame, p, m.image_size).save(dir.join(&f))?;
                written.push(dir.join(&f));
                Some(f)
            }
            None => None,
        };
        meta.cameras.push(MapMeta {
            camera: id.clone(),
            shared_file,
            shared_max: m.shared_max,
            private_file,
            private_max: m.private_max,
        });
    }
    let json = dir.join("saliency.json");
    std::fs::write(&json, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&json, e))?;
    written.push(json);
    Ok(written)
}
