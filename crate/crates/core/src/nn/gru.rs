//! Gated recurrent unit over right-padded batches.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha20Rng;

use super::{add_grad1, add_grad2, col_sum, sigmoid, value1, value2, xavier, zeros_vec, ParamRef};

/// Single-direction GRU; the feature vector is the hidden state after the
/// last real token of each sample (PAD steps hold the state).
///
/// Gate layout in the fused input projection is `[update | reset | candidate]`.
#[derive(Debug, Clone)]
pub struct GruUnit {
    pub w_x: ParamRef,  // (embed, 3*hidden)
    pub u_zr: ParamRef, // (hidden, 2*hidden)
    pub u_c: ParamRef,  // (hidden, hidden)
    pub bias: ParamRef, // (3*hidden)
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

pub struct GruCache {
    steps: Vec<GruStep>,
}

struct GruStep {
    h_prev: Array2<f32>,
    z: Array2<f32>,
    r: Array2<f32>,
    c: Array2<f32>,
    rh: Array2<f32>,
    mask: Array2<f32>, // (batch, 1)
}

impl GruUnit {
    pub fn new(rng: &mut ChaCha20Rng, name: &str, embed_dim: usize, hidden_dim: usize) -> Self {
        Self {
            w_x: xavier(rng, &format!("{name}.w_x"), embed_dim, 3 * hidden_dim),
            u_zr: xavier(rng, &format!("{name}.u_zr"), hidden_dim, 2 * hidden_dim),
            u_c: xavier(rng, &format!("{name}.u_c"), hidden_dim, hidden_dim),
            bias: zeros_vec(&format!("{name}.bias"), 3 * hidden_dim),
            embed_dim,
            hidden_dim,
        }
    }

    /// `emb`: (batch, len, embed); `mask`: (batch, len) of {0,1}.
    pub fn forward(&self, emb: &Array3<f32>, mask: &Array2<f32>) -> (Array2<f32>, GruCache) {
        let (batch, seq, _) = emb.dim();
        let h = self.hidden_dim;
        let w_x = value2(&self.w_x);
        let u_zr = value2(&self.u_zr);
        let u_c = value2(&self.u_c);
        let bias = value1(&self.bias);

        let mut hidden = Array2::<f32>::zeros((batch, h));
        let mut steps = Vec::with_capacity(seq);
        for t in 0..seq {
            let x_t = emb.slice(s![.., t, ..]).to_owned();
            let mut pre = x_t.dot(&w_x);
            pre += &bias;
            let qzr = hidden.dot(&u_zr);

            let mut z = Array2::<f32>::zeros((batch, h));
            let mut r = Array2::<f32>::zeros((batch, h));
            for b in 0..batch {
                for k in 0..h {
                    z[[b, k]] = sigmoid(pre[[b, k]] + qzr[[b, k]]);
                    r[[b, k]] = sigmoid(pre[[b, h + k]] + qzr[[b, h + k]]);
                }
            }
            let rh = &r * &hidden;
            let qc = rh.dot(&u_c);
            let mut c = Array2::<f32>::zeros((batch, h));
            for b in 0..batch {
                for k in 0..h {
                    c[[b, k]] = (pre[[b, 2 * h + k]] + qc[[b, k]]).tanh();
                }
            }
            let m = mask.column(t).to_owned().insert_axis(Axis(1));
            let h_new = (1.0 - &z) * &hidden + &z * &c;
            let h_next = &m * &h_new + (1.0 - &m) * &hidden;

            steps.push(GruStep {
                h_prev: hidden,
                z,
                r,
                c,
                rh,
                mask: m,
            });
            hidden = h_next;
        }
        (hidden, GruCache { steps })
    }

    /// Backpropagates through time; returns the gradient w.r.t. `emb`.
    pub fn backward(
        &self,
        emb: &Array3<f32>,
        cache: &GruCache,
        grad_h_final: &Array2<f32>,
    ) -> Array3<f32> {
        let (batch, seq, _) = emb.dim();
        let h = self.hidden_dim;
        let w_x = value2(&self.w_x);
        let u_zr = value2(&self.u_zr);
        let u_c = value2(&self.u_c);

        let mut demb = Array3::<f32>::zeros((batch, seq, self.embed_dim));
        let mut dw_x = Array2::<f32>::zeros((self.embed_dim, 3 * h));
        let mut du_zr = Array2::<f32>::zeros((h, 2 * h));
        let mut du_c = Array2::<f32>::zeros((h, h));
        let mut dbias = Array1::<f32>::zeros(3 * h);

        let mut dh = grad_h_final.clone();
        for t in (0..seq).rev() {
            let step = &cache.steps[t];
            let m = &step.mask;
            let dh_new = m * &dh;
            let mut dh_prev = (1.0 - m) * &dh;

            let dz = &dh_new * &(&step.c - &step.h_prev);
            let dc = &dh_new * &step.z;
            dh_prev = dh_prev + &dh_new * &(1.0 - &step.z);

            // Candidate path.
            let dpc = &dc * &(1.0 - &step.c * &step.c);
            du_c += &step.rh.t().dot(&dpc);
            let drh = dpc.dot(&u_c.t());
            let dr = &drh * &step.h_prev;
            dh_prev = dh_prev + &drh * &step.r;

            // Gate pre-activations.
            let dz_pre = &dz * &step.z * &(1.0 - &step.z);
            let dr_pre = &dr * &step.r * &(1.0 - &step.r);

            let mut dpre = Array2::<f32>::zeros((batch, 3 * h));
            dpre.slice_mut(s![.., 0..h]).assign(&dz_pre);
            dpre.slice_mut(s![.., h..2 * h]).assign(&dr_pre);
            dpre.slice_mut(s![.., 2 * h..3 * h]).assign(&dpc);

            let x_t = emb.slice(s![.., t, ..]).to_owned();
            dw_x += &x_t.t().dot(&dpre);
            dbias += &col_sum(&dpre);
            demb.slice_mut(s![.., t, ..]).assign(&dpre.dot(&w_x.t()));

            let dqzr = dpre.slice(s![.., 0..2 * h]).to_owned();
            du_zr += &step.h_prev.t().dot(&dqzr);
            dh_prev = dh_prev + dqzr.dot(&u_zr.t());

            dh = dh_prev;
        }

        add_grad2(&self.w_x, &dw_x);
        add_grad2(&self.u_zr, &du_zr);
        add_grad2(&self.u_c, &du_c);
        add_grad1(&self.bias, &dbias);
        demb
    }

    pub fn params(&self) -> Vec<ParamRef> {
        vec![
            self.w_x.clone(),
            self.u_zr.clone(),
            self.u_c.clone(),
            self.bias.clone(),
        ]
    }

    pub fn deep_clone(&self) -> Self {
        Self {
            w_x: super::deep_clone_param(&self.w_x),
            u_zr: super::deep_clone_param(&self.u_zr),
            u_c: super::deep_clone_param(&self.u_c),
            bias: super::deep_clone_param(&self.bias),
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }
}
