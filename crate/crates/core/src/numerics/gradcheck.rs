use rand::seq::index::sample;
use rand::Rng;

use super::params::ParamStore;
use crate::error::{GuardianError, Result};

/// Relative errors are taken against `max(|analytic|, |numeric|, floor)` so
/// that coordinates with vanishing gradient compare absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// Compares recorded gradients against central finite differences.
///
/// `loss_fn` must evaluate the loss at the store's current values and add its
/// analytic gradient into the store's gradient buffers. At most `max_coords`
/// coordinates are sampled (all of them when `None`). Returns the worst
/// relative error; the store's values and gradients are restored on return.
pub fn grad_check<F>(
    store: &mut ParamStore,
    eps: f64,
    max_coords: Option<usize>,
    rng: &mut impl Rng,
    mut loss_fn: F,
) -> Result<f64>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(GuardianError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    store.zero_grads();
    let base = loss_fn(store)?;
    if !base.is_finite() {
        return Err(GuardianError::NonFinite("grad_check loss".into()));
    }
    let analytic = store.clone();

    let coords: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, p)| (0..p.value.len()).map(move |i| (name.to_string(), i)))
        .collect();
    let chosen: Vec<usize> = match max_coords {
        Some(k) if k < coords.len() => {
            let mut idx = sample(rng, coords.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..coords.len()).collect(),
    };

    let mut worst: f64 = 0.0;
    for ci in chosen {
        let (name, i) = &coords[ci];
        let original = *store.scalar_mut(name, *i);

        *store.scalar_mut(name, *i) = original + eps;
        let plus = loss_fn(store)?;
        *store.scalar_mut(name, *i) = original - eps;
        let minus = loss_fn(store)?;
        *store.scalar_mut(name, *i) = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GuardianError::NonFinite(format!("grad_check loss near {name}[{i}]")));
        }

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.grad(name).expect("known parameter").values()[*i];
        let denom = a.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }

    for (name, p) in analytic.iter() {
        if let Some(g) = store.grad_mut(name) {
            *g = p.grad.clone();
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor2D};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(rng: &mut ChaCha8Rng) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert_glorot("a", 3, 4, rng);
        s.insert_glorot("b", 4, 2, rng);
        s
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = store(&mut rng);
        let err = grad_check(&mut s, 1e-4, None, &mut rng, |st| {
            let mut tape = Tape::new();
            let mut total = None;
            for name in ["a", "b"] {
                let p = tape.param(st, name)?;
                let sq = tape.mul(p, p)?;
                let s = tape.sum(sq);
                total = Some(match total {
                    None => s,
                    Some(t) => tape.add(t, s)?,
                });
            }
            let out = total.unwrap();
            tape.backward(out)?.accumulate_into(st)?;
            Ok(tape.value(out).item())
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = store(&mut rng);
        let err = grad_check(&mut s, 1e-4, None, &mut rng, |st| {
            let mut tape = Tape::new();
            let p = tape.param(st, "a")?;
            let z = tape.scale(p, 0.0);
            let s = tape.sum(z);
            let out = tape.offset(s, 5.0);
            tape.backward(out)?.accumulate_into(st)?;
            Ok(tape.value(out).item())
        })
        .unwrap();
        assert_eq!(err, 0.0);
        assert!(s.grad("a").unwrap().values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        s.insert("x", Tensor2D::scalar(1.5));
        let err = grad_check(&mut s, 1e-4, None, &mut rng, |st| {
            let x = st.value("x").unwrap().item();
            st.accumulate_grad("x", &Tensor2D::scalar(x))?; // true gradient is 2x
            Ok(x * x)
        })
        .unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn rejects_bad_eps_and_nan_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = store(&mut rng);
        assert!(grad_check(&mut s, 0.0, None, &mut rng, |_| Ok(1.0)).is_err());
        assert!(grad_check(&mut s, 1e-4, None, &mut rng, |_| Ok(f64::NAN)).is_err());
    }
}
