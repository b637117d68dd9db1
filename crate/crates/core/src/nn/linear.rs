//! Fully-connected layer.

use ndarray::Array2;
use rand_chacha::ChaCha20Rng;

use super::{add_grad1, add_grad2, col_sum, value1, value2, xavier, zeros_vec, ParamRef};

/// `y = x @ W + b` with `W` of shape (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamRef,
    pub bias: ParamRef,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(rng: &mut ChaCha20Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = xavier(rng, &format!("{name}.weight"), in_dim, out_dim);
        let bias = zeros_vec(&format!("{name}.bias"), out_dim);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let w = value2(&self.weight);
        let b = value1(&self.bias);
        let mut y = x.dot(&w);
        y += &b;
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, x: &Array2<f32>, grad_out: &Array2<f32>) -> Array2<f32> {
        let w = value2(&self.weight);
        add_grad2(&self.weight, &x.t().dot(grad_out));
        add_grad1(&self.bias, &col_sum(grad_out));
        grad_out.dot(&w.t())
    }

    pub fn params(&self) -> Vec<ParamRef> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn deep_clone(&self) -> Self {
        Self {
            weight: super::deep_clone_param(&self.weight),
            bias: super::deep_clone_param(&self.bias),
            in_dim: self.in_dim,
            out_dim: self.out_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{assert_close, fd_param, probe_grad, probe_loss};
    use crate::nn::zero_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let layer = Linear::new(&mut rng, "t", 4, 3);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) as f32 / 10.0) - 1.0);

        zero_grad(&layer.params());
        let y = layer.forward(&x);
        let dx = layer.backward(&x, &probe_grad(&y));

        for (p, n) in [(&layer.weight, 12usize), (&layer.bias, 3usize)] {
            for idx in 0..n {
                let num = fd_param(p, idx, 1e-2, || probe_loss(&layer.forward(&x)));
                let ana = p.borrow().grad.as_slice().unwrap()[idx] as f64;
                assert_close(ana, num, &format!("{} [{idx}]", p.borrow().name));
            }
        }

        // Input gradient via finite differences on one entry.
        let mut x2 = x.clone();
        let h = 1e-2f32;
        x2[[0, 0]] += h;
        let up = probe_loss(&layer.forward(&x2));
        x2[[0, 0]] -= 2.0 * h;
        let down = probe_loss(&layer.forward(&x2));
        assert_close(dx[[0, 0]] as f64, (up - down) / (2.0 * h as f64), "dx[0,0]");
    }
}
