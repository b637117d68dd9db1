//! LSTM and bidirectional LSTM over right-padded batches.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha20Rng;

use super::{add_grad1, add_grad2, col_sum, sigmoid, value1, value2, xavier, zeros_vec, ParamRef};

/// Single-direction LSTM. Gate layout in the fused projections is
/// `[input | forget | cell | output]`; the forget-gate bias starts at 1.
#[derive(Debug, Clone)]
pub struct LstmUnit {
    pub w_x: ParamRef, // (embed, 4*hidden)
    pub u_h: ParamRef, // (hidden, 4*hidden)
    pub bias: ParamRef, // (4*hidden)
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

pub struct LstmCache {
    steps: Vec<LstmStep>,
    /// Time indices in processing order (reversed for the backward direction).
    order: Vec<usize>,
}

struct LstmStep {
    h_prev: Array2<f32>,
    c_prev: Array2<f32>,
    i: Array2<f32>,
    f: Array2<f32>,
    g: Array2<f32>,
    o: Array2<f32>,
    tanh_c: Array2<f32>,
    mask: Array2<f32>,
}

impl LstmUnit {
    pub fn new(rng: &mut ChaCha20Rng, name: &str, embed_dim: usize, hidden_dim: usize) -> Self {
        let bias = zeros_vec(&format!("{name}.bias"), 4 * hidden_dim);
        {
            let mut b = bias.borrow_mut();
            let mut view = b
                .value
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("bias 1-d");
            for k in hidden_dim..2 * hidden_dim {
                view[k] = 1.0;
            }
        }
        Self {
            w_x: xavier(rng, &format!("{name}.w_x"), embed_dim, 4 * hidden_dim),
            u_h: xavier(rng, &format!("{name}.u_h"), hidden_dim, 4 * hidden_dim),
            bias,
            embed_dim,
            hidden_dim,
        }
    }

    /// Runs over the time indices in `order` (ascending for the forward
    /// direction, descending for the reverse one). Masked steps hold both
    /// the hidden and cell state.
    pub fn forward_ordered(
        &self,
        emb: &Array3<f32>,
        mask: &Array2<f32>,
        order: &[usize],
    ) -> (Array2<f32>, LstmCache) {
        let (batch, _, _) = emb.dim();
        let h = self.hidden_dim;
        let w_x = value2(&self.w_x);
        let u_h = value2(&self.u_h);
        let bias = value1(&self.bias);

        let mut hidden = Array2::<f32>::zeros((batch, h));
        let mut cell = Array2::<f32>::zeros((batch, h));
        let mut steps = Vec::with_capacity(order.len());
        for &t in order {
            let x_t = emb.slice(s![.., t, ..]).to_owned();
            let mut pre = x_t.dot(&w_x);
            pre += &bias;
            pre += &hidden.dot(&u_h);

            let mut i = Array2::<f32>::zeros((batch, h));
            let mut f = Array2::<f32>::zeros((batch, h));
            let mut g = Array2::<f32>::zeros((batch, h));
            let mut o = Array2::<f32>::zeros((batch, h));
            for b in 0..batch {
                for k in 0..h {
                    i[[b, k]] = sigmoid(pre[[b, k]]);
                    f[[b, k]] = sigmoid(pre[[b, h + k]]);
                    g[[b, k]] = pre[[b, 2 * h + k]].tanh();
                    o[[b, k]] = sigmoid(pre[[b, 3 * h + k]]);
                }
            }
            let c_new = &f * &cell + &i * &g;
            let tanh_c = c_new.map(|v| v.tanh());
            let h_new = &o * &tanh_c;

            let m = mask.column(t).to_owned().insert_axis(Axis(1));
            let h_next = &m * &h_new + (1.0 - &m) * &hidden;
            let c_next = &m * &c_new + (1.0 - &m) * &cell;

            steps.push(LstmStep {
                h_prev: hidden,
                c_prev: cell,
                i,
                f,
                g,
                o,

                tanh_c,
                mask: m,
            });
            hidden = h_next;
            cell = c_next;
        }
        (
            hidden,
            LstmCache {
                steps,
                order: order.to_vec(),
            },
        )
    }

    /// Backward pass matching `forward_ordered`; returns the gradient w.r.t.
    /// `emb` (accumulated into the provided buffer).
    pub fn backward_ordered(
        &self,
        emb: &Array3<f32>,
        cache: &LstmCache,
        grad_h_final: &Array2<f32>,
        demb: &mut Array3<f32>,
    ) {
        let (batch, _, _) = emb.dim();
        let h = self.hidden_dim;
        let w_x = value2(&self.w_x);
        let u_h = value2(&self.u_h);

        let mut dw_x = Array2::<f32>::zeros((self.embed_dim, 4 * h));
        let mut du_h = Array2::<f32>::zeros((h, 4 * h));
        let mut dbias = Array1::<f32>::zeros(4 * h);

        let mut dh = grad_h_final.clone();
        let mut dc = Array2::<f32>::zeros((batch, h));
        for (si, &t) in cache.order.iter().enumerate().rev() {
            let step = &cache.steps[si];
            let m = &step.mask;

            let dh_new = m * &dh;
            let mut dh_prev = (1.0 - m) * &dh;
            let mut dc_new = m * &dc;
            let mut dc_prev = (1.0 - m) * &dc;

            let do_ = &dh_new * &step.tanh_c;
            dc_new = dc_new + &dh_new * &step.o * &(1.0 - &step.tanh_c * &step.tanh_c);

            let di = &dc_new * &step.g;
            let df = &dc_new * &step.c_prev;
            let dg = &dc_new * &step.i;
            dc_prev = dc_prev + &dc_new * &step.f;

            let mut dpre = Array2::<f32>::zeros((batch, 4 * h));
            dpre.slice_mut(s![.., 0..h])
                .assign(&(&di * &step.i * &(1.0 - &step.i)));
            dpre.slice_mut(s![.., h..2 * h])
                .assign(&(&df * &step.f * &(1.0 - &step.f)));
            dpre.slice_mut(s![.., 2 * h..3 * h])
                .assign(&(&dg * &(1.0 - &step.g * &step.g)));
            dpre.slice_mut(s![.., 3 * h..4 * h])
                .assign(&(&do_ * &step.o * &(1.0 - &step.o)));

            let x_t = emb.slice(s![.., t, ..]).to_owned();
            dw_x += &x_t.t().dot(&dpre);
            du_h += &step.h_prev.t().dot(&dpre);
            dbias += &col_sum(&dpre);
            {
                let mut slot = demb.slice_mut(s![.., t, ..]);
                slot += &dpre.dot(&w_x.t());
            }
            dh_prev = dh_prev + dpre.dot(&u_h.t());

            dh = dh_prev;
            dc = dc_prev;
        }

        add_grad2(&self.w_x, &dw_x);
        add_grad2(&self.u_h, &du_h);
        add_grad1(&self.bias, &dbias);
    }

    pub fn params(&self) -> Vec<ParamRef> {
        vec![self.w_x.clone(), self.u_h.clone(), self.bias.clone()]
    }

    pub fn deep_clone(&self) -> Self {
        Self {
            w_x: super::deep_clone_param(&self.w_x),
            u_h: super::deep_clone_param(&self.u_h),
            bias: super::deep_clone_param(&self.bias),
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }
}

/// Bidirectional LSTM; features are the concatenated final hidden states of
/// the two directions.
#[derive(Debug, Clone)]
pub struct BiLstmUnit {
    pub fwd: LstmUnit,
    pub bwd: LstmUnit,
}

pub struct BiLstmCache {
    fwd: LstmCache,
    bwd: LstmCache,
}

impl BiLstmUnit {
    pub fn new(rng: &mut ChaCha20Rng, name: &str, embed_dim: usize, hidden_dim: usize) -> Self {
        Self {
            fwd: LstmUnit::new(rng, &format!("{name}.lstm_fwd"), embed_dim, hidden_dim),
            bwd: LstmUnit::new(rng, &format!("{name}.lstm_bwd"), embed_dim, hidden_dim),
        }
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.fwd.hidden_dim
    }

    pub fn forward(&self, emb: &Array3<f32>, mask: &Array2<f32>) -> (Array2<f32>, BiLstmCache) {
        let (batch, seq, _) = emb.dim();
        let asc: Vec<usize> = (0..seq).collect();
        let desc: Vec<usize> = (0..seq).rev().collect();
        let (hf, cf) = self.fwd.forward_ordered(emb, mask, &asc);
        let (hb, cb) = self.bwd.forward_ordered(emb, mask, &desc);

        let h = self.fwd.hidden_dim;
        let mut features = Array2::<f32>::zeros((batch, 2 * h));
        features.slice_mut(s![.., 0..h]).assign(&hf);
        features.slice_mut(s![.., h..2 * h]).assign(&hb);
        (features, BiLstmCache { fwd: cf, bwd: cb })
    }

    pub fn backward(
        &self,
        emb: &Array3<f32>,
        cache: &BiLstmCache,
        grad_features: &Array2<f32>,
    ) -> Array3<f32> {
        let (batch, seq, _) = emb.dim();
        let h = self.fwd.hidden_dim;
        let mut demb = Array3::<f32>::zeros((batch, seq, self.fwd.embed_dim));
        let gf = grad_features.slice(s![.., 0..h]).to_owned();
        let gb = grad_features.slice(s![.., h..2 * h]).to_owned();
        self.fwd.backward_ordered(emb, &cache.fwd, &gf, &mut demb);
        self.bwd.backward_ordered(emb, &cache.bwd, &gb, &mut demb);
        demb
    }

    pub fn params(&self) -> Vec<ParamRef> {
        let mut p = self.fwd.params();
        p.extend(self.bwd.params());
        p
    }

    pub fn deep_clone(&self) -> Self {
        Self {
            fwd: self.fwd.deep_clone(),
            bwd: self.bwd.deep_clone(),
        }
    }
}
