use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numcore::{Rng, Scalar, Tensor};

/// Replicate-pad each image by `pad` and crop back at a random offset drawn
/// independently per image. Offset `(pad, pad)` is the identity.
pub fn random_shift<T: Scalar>(images: &Tensor<T>, pad: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    let b = images.shape().first().copied().unwrap_or(0);
    let offsets: Vec<(usize, usize)> = (0..b)
        .map(|_| (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad)))
        .collect();
    shift_with_offsets(images, pad, &offsets)
}

/// Crop at explicit `(row, col)` offsets into the padded image, one per batch entry.
pub fn shift_with_offsets<T: Scalar>(images: &Tensor<T>, pad: usize, offsets: &[(usize, usize)]) -> Result<Tensor<T>> {
    let &[b, c, h, w] = images.shape() else {
        return Err(Error::dim("random_shift", format!("expected [B, C, H, W], got {:?}", images.shape())));
    };
    if offsets.len() != b || offsets.iter().any(|&(r, q)| r > 2 * pad || q > 2 * pad) {
        return Err(Error::dim("random_shift", format!("{} offsets for batch {b} with pad {pad}", offsets.len())));
    }
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for (i, &(dy, dx)) in offsets.iter().enumerate() {
        for ch in 0..c {
            let plane = &src[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            for r in 0..h {
                let sr = clampi(r as isize + dy as isize - pad as isize, h);
                let row = &plane[sr * w..(sr + 1) * w];
                out.extend((0..w).map(|q| row[clampi(q as isize + dx as isize - pad as isize, w)]));
            }
        }
    }
    Tensor::new(images.shape().to_vec(), out)
}
