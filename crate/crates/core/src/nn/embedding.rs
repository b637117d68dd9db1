//! Token embedding table.

use ndarray::{Array3, ArrayView2};
use rand_chacha::ChaCha20Rng;

use super::{uniform, ParamRef};

/// Lookup table mapping token ids to dense vectors. Row 0 is the PAD row.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub weight: ParamRef,
    pub vocab_size: usize,
    pub embed_dim: usize,
}

impl Embedding {
    pub fn new(rng: &mut ChaCha20Rng, name: &str, vocab_size: usize, embed_dim: usize) -> Self {
        let weight = uniform(rng, name, vocab_size, embed_dim, 0.1);
        Self {
            weight,
            vocab_size,
            embed_dim,
        }
    }

    /// Gathers rows: (batch, len) ids -> (batch, len, embed).
    pub fn forward(&self, ids: ArrayView2<u32>) -> Array3<f32> {
        let (b, l) = ids.dim();
        let w = self.weight.borrow();
        let wv = w
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("embedding 2-d");
        let mut out = Array3::<f32>::zeros((b, l, self.embed_dim));
        for i in 0..b {
            for t in 0..l {
                let tok = ids[[i, t]] as usize;
                out.slice_mut(ndarray::s![i, t, ..]).assign(&wv.row(tok));
            }
        }
        out
    }

    /// Scatter-adds the output gradient back into the table rows.
    pub fn backward(&self, ids: ArrayView2<u32>, grad_out: &Array3<f32>) {
        let (b, l) = ids.dim();
        let mut w = self.weight.borrow_mut();
        let mut gv = w
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("embedding 2-d");
        for i in 0..b {
            for t in 0..l {
                let tok = ids[[i, t]] as usize;
                let mut row = gv.row_mut(tok);
                row += &grad_out.slice(ndarray::s![i, t, ..]);
            }
        }
    }

    pub fn deep_clone(&self) -> Self {
        Self {
            weight: super::deep_clone_param(&self.weight),
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
        }
    }
}
