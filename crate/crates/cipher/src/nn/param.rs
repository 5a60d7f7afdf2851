//! Parameter plumbing shared by every network: a visitor that exposes each
//! parameter tensor (value + gradient accumulator) as a named flat slice, in
//! a deterministic order. The optimizer and the checkpoint codec both walk
//! parameters through this interface.

use ndarray::{Array, Dimension};

use super::scalar::Scalar;

pub struct ParamMut<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [F],
    pub grad: &'a mut [F],
    pub trainable: bool,
}

pub type ParamFn<'v, F> = dyn FnMut(ParamMut<'_, F>) + 'v;

/// Anything that owns trainable parameters.
pub trait ParamSet<F: Scalar> {
    /// Visit every parameter in a fixed order. `prefix` is prepended to
    /// parameter names so nested modules get hierarchical names.
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, F>);
}

/// Build a `ParamMut` from a value/grad array pair. Arrays must be in
/// standard layout (they always are here; we never hand out views).
pub fn param_entry<'a, F: Scalar, D: Dimension>(
    name: impl Into<String>,
    value: &'a mut Array<F, D>,
    grad: &'a mut Array<F, D>,
    trainable: bool,
) -> ParamMut<'a, F> {
    let shape = value.shape().to_vec();
    debug_assert_eq!(shape, grad.shape().to_vec());
    ParamMut {
        name: name.into(),
        shape,
        value: value.as_slice_mut().expect("parameter not contiguous"),
        grad: grad.as_slice_mut().expect("gradient not contiguous"),
        trainable,
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grads<F: Scalar>(net: &mut dyn ParamSet<F>) {
    net.visit_params("", &mut |p: ParamMut<'_, F>| {
        p.grad.fill(F::zero());
    });
}

pub fn param_count<F: Scalar>(net: &mut dyn ParamSet<F>) -> usize {
    let mut n = 0;
    net.visit_params("", &mut |p: ParamMut<'_, F>| n += p.value.len());
    n
}

/// Snapshot all parameter values in visit order (used by tests and by the
/// zero-epoch identity path).
pub fn flatten_params<F: Scalar>(net: &mut dyn ParamSet<F>) -> Vec<F> {
    let mut out = Vec::new();
    net.visit_params("", &mut |p: ParamMut<'_, F>| out.extend_from_slice(p.value));
    out
}

/// Write a flat vector back into the parameters, in visit order.
pub fn unflatten_params<F: Scalar>(net: &mut dyn ParamSet<F>, flat: &[F]) {
    let mut offset = 0;
    net.visit_params("", &mut |p: ParamMut<'_, F>| {
        p.value.copy_from_slice(&flat[offset..offset + p.value.len()]);
        offset += p.value.len();
    });
    assert_eq!(offset, flat.len(), "flat parameter length mismatch");
}

/// Collect gradients in visit order.
pub fn flatten_grads<F: Scalar>(net: &mut dyn ParamSet<F>) -> Vec<F> {
    let mut out = Vec::new();
    net.visit_params("", &mut |p: ParamMut<'_, F>| out.extend_from_slice(p.grad));
    out
}

/// Forward/backward mode. Dropout and minibatch-std behave differently in
/// eval mode; everything else ignores it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A feature-map-to-feature-map module with manual backprop. Forward caches
/// whatever backward needs; backward consumes the cache and accumulates
/// parameter gradients.
pub trait Layer<F: Scalar>: ParamSet<F> {
    fn forward(&mut self, x: ndarray::Array4<F>, mode: Mode) -> ndarray::Array4<F>;
    fn backward(&mut self, gy: ndarray::Array4<F>) -> ndarray::Array4<F>;
}

/// A named chain of layers.
pub struct Sequential<F: Scalar> {
    layers: Vec<(String, Box<dyn Layer<F>>)>,
}

impl<F: Scalar> Default for Sequential<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Sequential<F> {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Box<dyn Layer<F>>) {
        self.layers.push((name.into(), layer));
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<F: Scalar> ParamSet<F> for Sequential<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        for (name, layer) in &mut self.layers {
            layer.visit_params(&join(prefix, name), f);
        }
    }
}

impl<F: Scalar> Layer<F> for Sequential<F> {
    fn forward(&mut self, x: ndarray::Array4<F>, mode: Mode) -> ndarray::Array4<F> {
        let mut h = x;
        for (_, layer) in &mut self.layers {
            h = layer.forward(h, mode);
        }
        h
    }

    fn backward(&mut self, gy: ndarray::Array4<F>) -> ndarray::Array4<F> {
        let mut g = gy;
        for (_, layer) in self.layers.iter_mut().rev() {
            g = layer.backward(g);
        }
        g
    }
}
