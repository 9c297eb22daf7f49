use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::{DenseMatrix, Scalar};
use crate::error::{Error, Result};

/// A value grid with a same-shape gradient slot.
///
/// Cloning a `Parameter` clones the handle, not the storage; the tape and
/// the owning layer share one underlying value/grad pair. Gradients
/// accumulate with `+=` across backward passes until [`Parameter::zero_grad`].
pub struct Parameter<S>(Rc<RefCell<ParamStorage<S>>>);

struct ParamStorage<S> {
    value: DenseMatrix<S>,
    grad: DenseMatrix<S>,
    trainable: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(value: DenseMatrix<S>) -> Self {
        let grad = DenseMatrix::zeros(value.rows(), value.cols());
        Parameter(Rc::new(RefCell::new(ParamStorage {
            value,
            grad,
            trainable: true,
        })))
    }

    /// A parameter excluded from optimization (running statistics, buffers).
    pub fn frozen(value: DenseMatrix<S>) -> Self {
        let p = Self::new(value);
        p.0.borrow_mut().trainable = false;
        p
    }

    pub fn value(&self) -> Ref<'_, DenseMatrix<S>> {
        Ref::map(self.0.borrow(), |s| &s.value)
    }

    pub fn grad(&self) -> Ref<'_, DenseMatrix<S>> {
        Ref::map(self.0.borrow(), |s| &s.grad)
    }

    pub fn rows(&self) -> usize {
        self.0.borrow().value.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.borrow().value.cols()
    }

    pub fn trainable(&self) -> bool {
        self.0.borrow().trainable
    }

    /// Replace the value; the new matrix must keep the shape.
    pub fn set_value(&self, value: DenseMatrix<S>) -> Result<()> {
        let mut s = self.0.borrow_mut();
        if value.shape() != s.value.shape() {
            return Err(Error::InvalidArgument(format!(
                "parameter value shape {}x{} cannot change to {}x{}",
                s.value.rows(),
                s.value.cols(),
                value.rows(),
                value.cols()
            )));
        }
        s.value = value;
        Ok(())
    }

    /// Nudge a single entry; finite-difference harness hook.
    pub fn perturb(&self, r: usize, c: usize, delta: S) {
        let mut s = self.0.borrow_mut();
        let v = s.value.get(r, c);
        s.value.set(r, c, v + delta);
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad.fill(S::zero());
    }

    pub(crate) fn accumulate_grad(&self, g: &DenseMatrix<S>) -> Result<()> {
        self.0.borrow_mut().grad.add_assign(g)
    }

    /// Apply an in-place update reading the gradient: `f(value, grad)`.
    pub fn apply_update<F>(&self, mut f: F)
    where
        F: FnMut(&mut DenseMatrix<S>, &DenseMatrix<S>),
    {
        let s = &mut *self.0.borrow_mut();
        f(&mut s.value, &s.grad);
    }

    pub fn handle_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

impl<S> Clone for Parameter<S> {
    fn clone(&self) -> Self {
        Parameter(Rc::clone(&self.0))
    }
}

impl<S: Scalar> std::fmt::Debug for Parameter<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = self.0.borrow();
        write!(
            f,
            "Parameter({}x{}, trainable={})",
            s.value.rows(),
            s.value.cols(),
            s.trainable
        )
    }
}

/// Ordered, name-addressed registry of the parameters of one model.
///
/// Registration order is construction order, which fixes the optimizer slot
/// layout and the checkpoint tensor order.
#[derive(Default)]
pub struct Parameters<S> {
    entries: Vec<(String, Parameter<S>)>,
}

impl<S: Scalar> Parameters<S> {
    pub fn new() -> Self {
        Parameters {
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, param: &Parameter<S>) {
        let name = name.into();
        debug_assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, param.clone()));
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<S>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<S>)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&self) {
        for (_, p) in &self.entries {
            p.zero_grad();
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|(_, p)| p.trainable()).count()
    }

    /// Total number of scalar entries across all registered tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, p)| p.rows() * p.cols())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_matches_value_shape_and_zeroes() {
        let p = Parameter::new(DenseMatrix::<f64>::filled(2, 3, 1.5));
        assert_eq!(p.grad().shape(), (2, 3));
        p.accumulate_grad(&DenseMatrix::filled(2, 3, 2.0)).unwrap();
        assert_eq!(p.grad().get(1, 2), 2.0);
        p.zero_grad();
        assert!(p.grad().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn set_value_rejects_shape_change() {
        let p = Parameter::new(DenseMatrix::<f32>::zeros(2, 2));
        assert!(p.set_value(DenseMatrix::zeros(3, 2)).is_err());
    }
}
