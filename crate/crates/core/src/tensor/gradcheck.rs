use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest relative error found for each parameter.
#[derive(Debug, Clone)]
pub struct GradCheckReport<T> {
    pub per_param: Vec<(String, T)>,
}

impl<T: Scalar> GradCheckReport<T> {
    pub fn max_error(&self) -> T {
        self.per_param.iter().map(|(_, e)| *e).fold(T::zero(), T::max)
    }
}

fn eval_loss<T, F>(store: &ParamStore<T>, loss: &mut F) -> Result<T>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = loss(&mut tape, store)?;
    let value = tape.value(v);
    if !value.is_scalar() {
        return Err(Error::Contract("loss closure returned a non-scalar".into()));
    }
    let x = value.item();
    if !x.is_finite() {
        return Err(Error::Numerical(format!("loss evaluated to {x}")));
    }
    Ok(x)
}

/// Compares the tape gradient of `loss` with respect to one parameter
/// against central differences with step `eps`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)`.
/// The parameter value is restored before returning.
pub fn finite_difference_check<T, F>(
    store: &mut ParamStore<T>,
    id: ParamId,
    eps: T,
    mut loss: F,
) -> Result<T>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    if eps <= T::zero() {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let v = loss(&mut tape, store)?;
        tape.backward(v)?.param_grad(&tape, store, id)
    };
    if !analytic.all_finite() {
        return Err(Error::Numerical("analytic gradient is not finite".into()));
    }
    let floor = T::lit(1e-8);
    let two = T::lit(2.0);
    let mut worst = T::zero();
    for i in 0..analytic.len() {
        let original = store.get(id).value.data()[i];
        store.get_mut(id).value.data_mut()[i] = original + eps;
        let plus = eval_loss(store, &mut loss);
        store.get_mut(id).value.data_mut()[i] = original - eps;
        let minus = eval_loss(store, &mut loss);
        store.get_mut(id).value.data_mut()[i] = original;
        let numeric = (plus? - minus?) / (two * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Runs [`finite_difference_check`] for every parameter in the store.
pub fn gradient_check_all<T, F>(store: &mut ParamStore<T>, eps: T, mut loss: F) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let ids: Vec<_> = store.ids().collect();
    let mut per_param = Vec::with_capacity(ids.len());
    for id in ids {
        let err = finite_difference_check(store, id, eps, &mut loss)?;
        per_param.push((store.get(id).name.clone(), err));
    }
    Ok(GradCheckReport { per_param })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0)).unwrap();
        let err = finite_difference_check(&mut store, w, 1e-5, |tape, s| {
            let v = tape.param(s, w);
            Ok(tape.mul(v, v)?)
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
        assert_eq!(store.get(w).value.item(), 3.0);
    }

    #[test]
    fn relu_locally_linear() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0)).unwrap();
        let err = finite_difference_check(&mut store, w, 1e-5, |tape, s| {
            let v = tape.param(s, w);
            Ok(tape.relu(v))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_cross_product_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut rt = |r: usize, c: usize| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let mut store = ParamStore::new();
        let w = store.add("w", rt(3, 4)).unwrap();
        let x = rt(4, 3);
        let report = gradient_check_all(&mut store, 1e-5, |tape, s| {
            let wv = tape.param(s, w);
            let xv = tape.constant(x.clone());
            let p = tape.matmul(wv, xv)?;
            let sm = tape.softmax_rows(p);
            let cross = tape.mul(sm, p)?;
            Ok(tape.sum(cross))
        })
        .unwrap();
        assert!(report.max_error() < 1e-4, "{:?}", report.per_param);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0)).unwrap();
        let r = finite_difference_check(&mut store, w, 0.0, |tape, s| Ok(tape.param(s, w)));
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn non_finite_loss_is_numerical_error() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(f64::MAX)).unwrap();
        let r = finite_difference_check(&mut store, w, 1e-5, |tape, s| {
            let v = tape.param(s, w);
            Ok(tape.mul(v, v)?)
        });
        assert!(matches!(r, Err(Error::Numerical(_))));
    }
}
