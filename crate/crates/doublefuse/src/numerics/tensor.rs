//! Dense tensors and the parameter store.

use super::scalar::Scalar;
use super::NumericsError;
use std::collections::HashMap;
use std::sync::Arc;

/// Immutable dense n-dimensional array. Cloning is cheap (shared storage).
///
/// Gradients are not stored on the tensor itself: values flowing through a
/// forward pass are immutable, and gradient buffers live on [`Param`] entries
/// in the [`ParamStore`], which is what "requires grad" means here.
#[derive(Clone, Debug)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::ShapeMismatch {
                expected: format!("{numel} elements for shape {shape:?}"),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![S::zero(); numel]),
        }
    }

    pub fn filled(shape: Vec<usize>, v: S) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![v; numel]),
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: Arc::new((0..numel).map(&mut f).collect()),
        }
    }

    pub(crate) fn from_arc(shape: Vec<usize>, data: Arc<Vec<S>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.data)
    }

    /// Number of rows when viewed as a 2-D `[rows, cols]` array, i.e. all
    /// leading dimensions collapsed.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Size of the last dimension (1 for true scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> S {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Convert element type (used to move fixtures between precisions).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| T::from_f64(v.to_f64())).collect()),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Identifier of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named parameter: value, optional gradient buffer, trainable flag.
#[derive(Clone, Debug)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Vec<S>>,
    pub trainable: bool,
}

/// Owns every parameter of a model. Parameter order is creation order and is
/// part of the checkpoint contract.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<S>) {
        assert_eq!(
            self.params[id.0].value.shape(),
            value.shape(),
            "set_value shape mismatch for {}",
            self.params[id.0].name
        );
        self.params[id.0].value = value;
    }

    /// Mutable access to a parameter's raw values (optimizer / perturbation).
    pub fn value_data_mut(&mut self, id: ParamId) -> &mut [S] {
        let p = &mut self.params[id.0];
        Arc::make_mut(&mut p.value.data)
    }

    pub fn grad(&self, id: ParamId) -> Option<&[S]> {
        self.params[id.0].grad.as_deref()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[S]) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.value.numel(), delta.len());
        match &mut p.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta.iter()) {
                    *gi += *di;
                }
            }
            None => p.grad = Some(delta.to_vec()),
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Total element count over parameters whose name starts with `prefix`,
    /// restricted to trainable or frozen entries.
    pub fn count_elems(&self, prefix: &str, trainable: Option<bool>) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .filter(|p| trainable.is_none_or(|t| p.trainable == t))
            .map(|p| p.value.numel())
            .sum()
    }

    /// FNV-1a checksum over the little-endian bytes of all parameters whose
    /// name starts with `prefix`, in store order.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut bytes = Vec::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
        crate::util::fnv1a64(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn store_tracks_grads_and_checksums() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", Tensor::filled(vec![2, 2], 1.5), true);
        assert!(ps.grad(id).is_none());
        ps.accumulate_grad(id, &[1.0, 2.0, 3.0, 4.0]);
        ps.accumulate_grad(id, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(ps.grad(id).unwrap(), &[2.0, 3.0, 4.0, 5.0]);
        let c1 = ps.checksum("w");
        ps.value_data_mut(id)[0] = 2.0;
        assert_ne!(ps.checksum("w"), c1);
    }
}
