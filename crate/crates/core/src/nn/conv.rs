//! Parallel text convolutions with max-over-time pooling.

use ndarray::{s, Array2, Array3};
use rand_chacha::ChaCha20Rng;

use super::{add_grad1, add_grad2, col_sum, value1, value2, xavier, zeros_vec, ParamRef};

/// One convolution bank per filter width; features are the concatenated
/// max-over-time pooled ReLU activations. Only windows that lie fully inside
/// a sample's real (non-PAD) prefix participate in pooling, so the feature
/// vector of a sample does not depend on how far the batch was padded.
#[derive(Debug, Clone)]
pub struct ConvText {
    pub widths: Vec<usize>,
    pub filters: usize,
    pub embed_dim: usize,
    /// (weight (width*embed, filters), bias (filters)) per width.
    pub banks: Vec<(ParamRef, ParamRef)>,
}

pub struct ConvCache {
    /// Per width: pre-activation stack (batch, positions, filters).
    pre: Vec<Array3<f32>>,
    /// Per width: argmax position per (batch, filter).
    argmax: Vec<Array2<usize>>,
}

impl ConvText {
    pub fn new(
        rng: &mut ChaCha20Rng,
        name: &str,
        widths: &[usize],
        filters: usize,
        embed_dim: usize,
    ) -> Self {
        let banks = widths
            .iter()
            .map(|&k| {
                let w = xavier(
                    rng,
                    &format!("{name}.conv{k}.weight"),
                    k * embed_dim,
                    filters,
                );
                let b = zeros_vec(&format!("{name}.conv{k}.bias"), filters);
                (w, b)
            })
            .collect();
        Self {
            widths: widths.to_vec(),
            filters,
            embed_dim,
            banks,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.widths.len() * self.filters
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(1)
    }

    /// Number of pooling-eligible window positions for a sample of `len`
    /// real tokens under width `k`: at least one window always exists.
    fn valid_windows(len: usize, k: usize) -> usize {
        len.saturating_sub(k - 1).max(1)
    }

    /// `emb`: (batch, len, embed); `lengths`: real token counts per row.
    /// Requires `len >= max width`.
    pub fn forward(&self, emb: &Array3<f32>, lengths: &[usize]) -> (Array2<f32>, ConvCache) {
        let (batch, seq, _) = emb.dim();
        assert!(
            seq >= self.max_width(),
            "sequence length {seq} below widest filter {}",
            self.max_width()
        );
        let mut features = Array2::<f32>::zeros((batch, self.feature_dim()));
        let mut pre_all = Vec::with_capacity(self.widths.len());
        let mut argmax_all = Vec::with_capacity(self.widths.len());

        for (wi, &k) in self.widths.iter().enumerate() {
            let weight = value2(&self.banks[wi].0);
            let bias = value1(&self.banks[wi].1);
            let positions = seq - k + 1;
            let mut pre = Array3::<f32>::zeros((batch, positions, self.filters));
            for j in 0..positions {
                let window = emb
                    .slice(s![.., j..j + k, ..])
                    .to_shape((batch, k * self.embed_dim))
                    .expect("window reshape")
                    .to_owned();
                let mut a = window.dot(&weight);
                a += &bias;
                pre.slice_mut(s![.., j, ..]).assign(&a);
            }

            let mut argmax = Array2::<usize>::zeros((batch, self.filters));
            for b in 0..batch {
                let valid = Self::valid_windows(lengths[b], k).min(positions);
                for f in 0..self.filters {
                    let mut best_j = 0usize;
                    let mut best = f32::NEG_INFINITY;
                    for j in 0..valid {
                        let v = pre[[b, j, f]].max(0.0);
                        if v > best {
                            best = v;
                            best_j = j;
                        }
                    }
                    argmax[[b, f]] = best_j;
                    features[[b, wi * self.filters + f]] = best;
                }
            }
            pre_all.push(pre);
            argmax_all.push(argmax);
        }
        (
            features,
            ConvCache {
                pre: pre_all,
                argmax: argmax_all,
            },
        )
    }

    /// Returns the gradient with respect to the embedded input.
    pub fn backward(
        &self,
        emb: &Array3<f32>,
        cache: &ConvCache,
        grad_features: &Array2<f32>,
    ) -> Array3<f32> {
        let (batch, seq, _) = emb.dim();
        let mut demb = Array3::<f32>::zeros((batch, seq, self.embed_dim));

        for (wi, &k) in self.widths.iter().enumerate() {
            let weight = value2(&self.banks[wi].0);
            let pre = &cache.pre[wi];
            let argmax = &cache.argmax[wi];
            let positions = seq - k + 1;

            // Route pooled gradients back to the winning window, gated by ReLU.
            let mut dpre = Array3::<f32>::zeros((batch, positions, self.filters));
            for b in 0..batch {
                for f in 0..self.filters {
                    let j = argmax[[b, f]];
                    if pre[[b, j, f]] > 0.0 {
                        dpre[[b, j, f]] = grad_features[[b, wi * self.filters + f]];
                    }
                }
            }

            for j in 0..positions {
                let dj = dpre.slice(s![.., j, ..]).to_owned();
                if dj.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let window = emb
                    .slice(s![.., j..j + k, ..])
                    .to_shape((batch, k * self.embed_dim))
                    .expect("window reshape")
                    .to_owned();
                add_grad2(&self.banks[wi].0, &window.t().dot(&dj));
                add_grad1(&self.banks[wi].1, &col_sum(&dj));
                let dwindow = dj.dot(&weight.t());
                let dwindow3 = dwindow
                    .to_shape((batch, k, self.embed_dim))
                    .expect("window reshape")
                    .to_owned();
                let mut target = demb.slice_mut(s![.., j..j + k, ..]);
                target += &dwindow3;
            }
        }
        demb
    }

    pub fn params(&self) -> Vec<ParamRef> {
        self.banks
            .iter()
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect()
    }

    pub fn deep_clone(&self) -> Self {
        Self {
            widths: self.widths.clone(),
            filters: self.filters,
            embed_dim: self.embed_dim,
            banks: self
                .banks
                .iter()
                .map(|(w, b)| (super::deep_clone_param(w), super::deep_clone_param(b)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{assert_close, fd_param, probe_grad, probe_loss};
    use crate::nn::zero_grad;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy_input(rng: &mut ChaCha20Rng, batch: usize, seq: usize, embed: usize) -> Array3<f32> {
        Array3::from_shape_fn((batch, seq, embed), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let layer = ConvText::new(&mut rng, "t", &[2, 3], 2, 4);
        let emb = toy_input(&mut rng, 3, 6, 4);
        let lengths = vec![6, 4, 2];

        zero_grad(&layer.params());
        let (y, cache) = layer.forward(&emb, &lengths);
        let demb = layer.backward(&emb, &cache, &probe_grad(&y));

        for (w, _) in &layer.banks {
            let n = w.borrow().value.len();
            for idx in (0..n).step_by(3) {
                let num = fd_param(w, idx, 5e-3, || {
                    probe_loss(&layer.forward(&emb, &lengths).0)
                });
                let ana = w.borrow().grad.as_slice().unwrap()[idx] as f64;
                assert_close(ana, num, &format!("{} [{idx}]", w.borrow().name));
            }
        }

        // Finite differences on a few input coordinates.
        let mut emb2 = emb.clone();
        for &(b, t, e) in &[(0usize, 0usize, 0usize), (1, 3, 2), (2, 1, 1)] {
            let h = 5e-3f32;
            emb2[[b, t, e]] += h;
            let up = probe_loss(&layer.forward(&emb2, &lengths).0);
            emb2[[b, t, e]] -= 2.0 * h;
            let down = probe_loss(&layer.forward(&emb2, &lengths).0);
            emb2[[b, t, e]] += h;
            assert_close(
                demb[[b, t, e]] as f64,
                (up - down) / (2.0 * h as f64),
                &format!("demb[{b},{t},{e}]"),
            );
        }
    }

    #[test]
    fn padding_beyond_real_length_is_ignored() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let layer = ConvText::new(&mut rng, "t", &[2, 3], 3, 4);
        let emb = toy_input(&mut rng, 1, 8, 4);
        let lengths = vec![4];

        let (feat_full, _) = layer.forward(&emb, &lengths);
        // Clobber embeddings past the real prefix; features must not change.
        let mut emb2 = emb.clone();
        emb2.slice_mut(s![.., 4.., ..]).fill(9.0);
        let (feat_clobbered, _) = layer.forward(&emb2, &lengths);
        assert_eq!(feat_full, feat_clobbered);
    }
}
