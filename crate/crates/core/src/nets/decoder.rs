use super::encoder::EncoderSpec;
use super::layers::{bind, Bind, Dense};
use crate::error::{Error, Result};
use crate::numcore::{conv_transpose_out_extent, Graph, ParamId, ParamStore, Rng, Scalar, Var};

/// Fully connected layer followed by transposed convolutions with strides
/// (1,1,1,2) back to the observation shape.
#[derive(Clone, Debug)]
pub struct Decoder {
    fc: Dense,
    deconvs: Vec<(ParamId, ParamId, usize, usize)>,
    channels: usize,
    start_extent: usize,
    out_channels: usize,
    image_size: usize,
}

impl Decoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        enc: &EncoderSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        let start_extent = *enc.conv_extents().last().unwrap();
        let channels = enc.channels;
        let k = enc.kernel;
        let fc = Dense::new(store, &format!("{name}.fc"), input_dim, channels * start_extent * start_extent, rng)?;
        let strides = [1usize, 1, 1, 2];
        let mut extent = start_extent;
        let mut deconvs = Vec::new();
        for (i, &s) in strides.iter().enumerate() {
            let last = i + 1 == strides.len();
            let c_out = if last { enc.in_channels } else { channels };
            let base = conv_transpose_out_extent(extent, k, s, 0);
            let pad = if last { enc.image_size.checked_sub(base) } else { Some(0) };
            let pad = match pad {
                Some(p) if p < s || p == 0 => p,
                _ => {
                    return Err(Error::dim(
                        "decoder",
                        format!("cannot reach image size {} from extent {extent}", enc.image_size),
                    ))
                }
            };
            let fan_in = channels * k * k;
            let w = store.register_uniform(format!("{name}.deconv{}.weight", i + 1), &[channels, c_out, k, k], fan_in, rng)?;
            let b = store.register_uniform(format!("{name}.deconv{}.bias", i + 1), &[c_out], fan_in, rng)?;
            deconvs.push((w, b, s, pad));
            extent = base + pad;
        }
        Ok(Decoder {
            fc,
            deconvs,
            channels,
            start_extent,
            out_channels: enc.in_channels,
            image_size: enc.image_size,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.fc.ids().to_vec();
        for &(w, b, _, _) in &self.deconvs {
            ids.push(w);
            ids.push(b);
        }
        ids
    }

    pub fn input_dim(&self) -> usize {
        self.fc.inputs
    }

    /// `z: [B, input_dim]` to `[B, C, H, W]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var, mode: Bind) -> Result<Var> {
        let batch = g.shape(z)[0];
        let h = self.fc.forward(g, store, z, mode)?;
        let h = g.relu(h);
        let mut h = g.reshape(h, &[batch, self.channels, self.start_extent, self.start_extent])?;
        for (i, &(w, b, s, pad)) in self.deconvs.iter().enumerate() {
            let wv = bind(g, store, w, mode);
            let bv = bind(g, store, b, mode);
            h = g.conv_transpose2d(h, wv, Some(bv), s, pad)?;
            if i + 1 < self.deconvs.len() {
                h = g.relu(h);
            }
        }
        debug_assert_eq!(g.shape(h), &[batch, self.out_channels, self.image_size, self.image_size]);
        Ok(h)
    }
}

/// Mean squared error between two equally shaped tensors.
pub fn mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}
