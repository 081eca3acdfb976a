use serde::{Deserialize, Serialize};

use super::layers::{bind, register_copies, Bind, Dense};
use crate::error::{Error, Result};
use crate::numcore::{conv_out_extent, Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Convolutional encoder architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub channels: usize,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub repr_dim: usize,
}

impl EncoderSpec {
    /// Four 3x3 convolutions with 32 channels, strides (2,1,1,1), 50-d output.
    pub fn standard(in_channels: usize, image_size: usize) -> Self {
        EncoderSpec {
            in_channels,
            image_size,
            channels: 32,
            kernel: 3,
            strides: vec![2, 1, 1, 1],
            repr_dim: 50,
        }
    }

    /// Spatial extent after every convolution.
    pub fn conv_extents(&self) -> Vec<usize> {
        let mut e = self.image_size;
        self.strides
            .iter()
            .map(|&s| {
                e = conv_out_extent(e, self.kernel, s);
                e
            })
            .collect()
    }

    pub fn flat_dim(&self) -> usize {
        let e = *self.conv_extents().last().unwrap();
        self.channels * e * e
    }

    pub fn validate(&self) -> Result<()> {
        let mut e = self.image_size;
        for &s in &self.strides {
            if s == 0 || e < self.kernel {
                return Err(Error::dim(
                    "encoder",
                    format!("image size {} too small for strides {:?}", self.image_size, self.strides),
                ));
            }
            e = conv_out_extent(e, self.kernel, s);
        }
        Ok(())
    }
}

/// Convolutions, linear projection, layer norm, tanh.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: EncoderSpec,
    convs: Vec<(ParamId, ParamId)>,
    fc: Dense,
    ln_gain: ParamId,
    ln_shift: ParamId,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: EncoderSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let mut convs = Vec::with_capacity(spec.strides.len());
        let mut c_in = spec.in_channels;
        for i in 0..spec.strides.len() {
            let fan_in = c_in * spec.kernel * spec.kernel;
            let w = store.register_uniform(
                format!("{name}.conv{}.weight", i + 1),
                &[spec.channels, c_in, spec.kernel, spec.kernel],
                fan_in,
                rng,
            )?;
            let b = store.register_uniform(format!("{name}.conv{}.bias", i + 1), &[spec.channels], fan_in, rng)?;
            convs.push((w, b));
            c_in = spec.channels;
        }
        let fc = Dense::new(store, &format!("{name}.fc"), spec.flat_dim(), spec.repr_dim, rng)?;
        let ln_gain = store.register(format!("{name}.ln.gain"), Tensor::full(vec![spec.repr_dim], T::one()))?;
        let ln_shift = store.register(format!("{name}.ln.shift"), Tensor::zeros(vec![spec.repr_dim]))?;
        Ok(Encoder {
            spec,
            convs,
            fc,
            ln_gain,
            ln_shift,
        })
    }

    /// Register an exact copy under a new name prefix.
    pub fn copy_as<T: Scalar>(&self, store: &mut ParamStore<T>, from: &str, to: &str) -> Result<Self> {
        let ids = register_copies(store, &self.param_ids(), from, to)?;
        Ok(self.with_ids(&ids))
    }

    fn with_ids(&self, ids: &[ParamId]) -> Self {
        let n = self.convs.len();
        let convs = (0..n).map(|i| (ids[2 * i], ids[2 * i + 1])).collect();
        Encoder {
            spec: self.spec.clone(),
            convs,
            fc: Dense {
                weight: ids[2 * n],
                bias: ids[2 * n + 1],
                ..self.fc.clone()
            },
            ln_gain: ids[2 * n + 2],
            ln_shift: ids[2 * n + 3],
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.convs.iter().flat_map(|&(w, b)| [w, b]).collect();
        ids.extend(self.fc.ids());
        ids.push(self.ln_gain);
        ids.push(self.ln_shift);
        ids
    }

    /// `obs: [B, C, H, W]`, pixels in `[0, 1]`. Returns `[B, repr_dim]` in `(-1, 1)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        obs: Var,
        mode: Bind,
    ) -> Result<Var> {
        let s = &self.spec;
        let shape = g.shape(obs).to_vec();
        if shape.len() != 4 || shape[1] != s.in_channels || shape[2] != s.image_size || shape[3] != s.image_size {
            return Err(Error::dim(
                "encode",
                format!(
                    "expected [B, {}, {}, {}], got {shape:?}",
                    s.in_channels, s.image_size, s.image_size
                ),
            ));
        }
        let batch = shape[0];
        let mut h = obs;
        for (i, (&(w, b), &stride)) in self.convs.iter().zip(&s.strides).enumerate() {
            let wv = bind(g, store, w, mode);
            let bv = bind(g, store, b, mode);
            h = g.conv2d(h, wv, Some(bv), stride)?;
            if i + 1 < self.convs.len() {
                h = g.relu(h);
            }
        }
        let flat = g.reshape(h, &[batch, s.flat_dim()])?;
        let y = self.fc.forward(g, store, flat, mode)?;
        let gain = bind(g, store, self.ln_gain, mode);
        let shift = bind(g, store, self.ln_shift, mode);
        let y = g.layer_norm(y, gain, shift, T::from_f64_lossy(LAYER_NORM_EPS))?;
        Ok(g.tanh(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Stream;

    #[test]
    fn output_is_bounded_and_deterministic() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(0, Stream::Init);
        let enc = Encoder::new(&mut store, "shared_encoder", EncoderSpec::standard(3, 24), &mut rng).unwrap();
        let obs: Vec<f32> = (0..2 * 3 * 24 * 24).map(|i| ((i * 7919) % 255) as f32 / 255.0).collect();
        let run = || {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![2, 3, 24, 24], obs.clone()).unwrap());
            let y = enc.forward(&mut g, &store, x, Bind::Frozen).unwrap();
            (g.shape(y).to_vec(), g.data(y).to_vec())
        };
        let (shape, a) = run();
        assert_eq!(shape, vec![2, 50]);
        assert!(a.iter().all(|v| v.abs() < 1.0));
        let (_, b) = run();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_image_shape_is_dimension_error() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(0, Stream::Init);
        let enc = Encoder::new(&mut store, "e", EncoderSpec::standard(3, 24), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![1, 3, 20, 20]));
        assert!(matches!(enc.forward(&mut g, &store, x, Bind::Train), Err(Error::Dimension { .. })));
    }

    #[test]
    fn flatten_length_for_84_pixels() {
        assert_eq!(EncoderSpec::standard(3, 84).flat_dim(), 39200);
        assert_eq!(EncoderSpec::standard(3, 48).flat_dim(), 32 * 17 * 17);
    }
}
