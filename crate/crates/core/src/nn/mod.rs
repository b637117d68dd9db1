//! Minimal neural-network building blocks with hand-written gradients.
//!
//! Parameters are shared through [`ParamRef`] handles so two networks can
//! alias the same backbone tensors: cloning a layer clones the handles, not
//! the values. All forward passes are deterministic functions of parameter
//! values and inputs; backward passes accumulate into `Param::grad`.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

pub mod conv;
pub mod embedding;
pub mod gru;
pub mod linear;
pub mod lstm;

pub use conv::ConvText;
pub use embedding::Embedding;
pub use gru::GruUnit;
pub use linear::Linear;
pub use lstm::{BiLstmUnit, LstmUnit};

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

/// Shared handle to a parameter. Two layers holding clones of the same
/// handle see each other's updates (hard parameter sharing).
pub type ParamRef = Rc<RefCell<Param>>;

pub fn new_param(name: impl Into<String>, value: ArrayD<f32>) -> ParamRef {
    let grad = ArrayD::zeros(value.raw_dim());
    Rc::new(RefCell::new(Param {
        name: name.into(),
        value,
        grad,
    }))
}

/// Deep copy: fresh storage, same name and values, zeroed gradient.
pub fn deep_clone_param(p: &ParamRef) -> ParamRef {
    let b = p.borrow();
    new_param(b.name.clone(), b.value.clone())
}

pub fn zero_grad(params: &[ParamRef]) {
    for p in params {
        p.borrow_mut().grad.fill(0.0);
    }
}

/// Xavier-uniform matrix of shape `(rows, cols)`.
pub fn xavier(rng: &mut ChaCha20Rng, name: &str, rows: usize, cols: usize) -> ParamRef {
    let a = (6.0 / (rows + cols) as f64).sqrt() as f32;
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    new_param(
        name,
        ArrayD::from_shape_vec(IxDyn(&[rows, cols]), data).expect("shape"),
    )
}

/// Uniform matrix in `(-bound, bound)`.
pub fn uniform(
    rng: &mut ChaCha20Rng,
    name: &str,
    rows: usize,
    cols: usize,
    bound: f32,
) -> ParamRef {
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    new_param(
        name,
        ArrayD::from_shape_vec(IxDyn(&[rows, cols]), data).expect("shape"),
    )
}

/// Zero vector parameter of length `n`.
pub fn zeros_vec(name: &str, n: usize) -> ParamRef {
    new_param(name, ArrayD::zeros(IxDyn(&[n])))
}

/// Borrow a 2-D view of a parameter value.
pub fn value2(p: &ParamRef) -> Array2<f32> {
    p.borrow()
        .value
        .view()
        .into_dimensionality()
        .expect("2-d param")
        .to_owned()
}

/// Borrow a 1-D copy of a parameter value.
pub fn value1(p: &ParamRef) -> Array1<f32> {
    p.borrow()
        .value
        .view()
        .into_dimensionality()
        .expect("1-d param")
        .to_owned()
}

pub fn add_grad2(p: &ParamRef, g: &Array2<f32>) {
    let mut b = p.borrow_mut();
    let mut view = b
        .grad
        .view_mut()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d grad");
    view += g;
}

pub fn add_grad1(p: &ParamRef, g: &Array1<f32>) {
    let mut b = p.borrow_mut();
    let mut view = b
        .grad
        .view_mut()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("1-d grad");
    view += g;
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-position mask (batch, len): 1.0 where the id is not PAD.
pub fn mask_from_ids(ids: ArrayView2<u32>, pad_id: u32) -> Array2<f32> {
    ids.map(|&t| if t == pad_id { 0.0 } else { 1.0 })
}

/// Non-PAD token count per row.
pub fn lengths_from_ids(ids: ArrayView2<u32>, pad_id: u32) -> Vec<usize> {
    ids.rows()
        .into_iter()
        .map(|r| r.iter().filter(|&&t| t != pad_id).count())
        .collect()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Sum of gradients over the batch axis.
pub fn col_sum(g: &Array2<f32>) -> Array1<f32> {
    g.sum_axis(Axis(0))
}
