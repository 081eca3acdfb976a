//! Central finite-difference oracle for reverse-mode gradients (64-bit only).

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compare `backward()` against `(f(x+h) - f(x-h)) / 2h` for every coordinate
/// of the parameters in `ids`. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` must be deterministic and rebuild its graph from `store` on each call.
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    let grads = g.backward(loss)?;
    store.accumulate(&g, &grads);
    drop(g);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(store, &mut g)?;
        Ok(g.item(v))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for &id in ids {
        let analytic = store
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; store.value(id).len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[j];
            store.get_mut(id).value_mut().data_mut()[j] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).value_mut().data_mut()[j] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).value_mut().data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), j));
            }
        }
    }
    store.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::Tensor;

    #[test]
    fn quadratic_is_within_1e7() {
        let mut s = ParamStore::new();
        let id = s
            .register("x", Tensor::new(vec![3], vec![0.7, -1.3, 2.2]).unwrap())
            .unwrap();
        let r = finite_diff_check(&mut s, &[id], 1e-4, |s, g| {
            let x = g.param(s, id);
            let sq = g.square(x);
            let y = g.scale(sq, 1.5);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn linear_is_near_machine_precision() {
        let mut s = ParamStore::new();
        let id = s
            .register("x", Tensor::new(vec![2], vec![0.25, 4.0]).unwrap())
            .unwrap();
        let r = finite_diff_check(&mut s, &[id], 1e-4, |s, g| {
            let x = g.param(s, id);
            let y = g.scale(x, 3.0);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }
}
