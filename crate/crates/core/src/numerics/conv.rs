//! One-dimensional dilated causal convolution stack with residual blocks.
//!
//! The window is a `W x D` matrix, row `W - 1` being the current position.
//! Block `l` uses dilation `2^l`; taps reaching before row 0 read zeros.
//! A conditioning vector and a step embedding are projected per block and
//! added to every position. The output is an affine read-out of the last
//! row, so it depends only on rows `W - R .. W` where `R` is the receptive
//! field `1 + (k - 1) * (2^L - 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::params::{glorot_uniform, join, ParamGroup};
use crate::numerics::rng::RngStream;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ResidualBlock<T> {
    /// `taps[j]` multiplies the row `j * dilation` steps back.
    pub taps: Vec<Matrix<T>>,
    pub bias: Vec<T>,
    /// Projection of `[cond; step_embed]` broadcast over positions.
    pub w_cond: Matrix<T>,
    pub w_out: Matrix<T>,
    pub b_out: Vec<T>,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CausalConvNet<T> {
    pub w_in: Matrix<T>,
    pub b_in: Vec<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub head_w: Matrix<T>,
    pub head_b: Vec<T>,
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    window: Matrix<T>,
    cond: Vec<T>,
    /// `hs[l]` is the `W x C` input of block `l`; `hs[L]` the final stack.
    hs: Vec<Matrix<T>>,
    acts: Vec<Matrix<T>>,
}

impl<T: Scalar> CausalConvNet<T> {
    pub fn zeros(data_dim: usize, channels: usize, blocks: usize, kernel: usize, cond_dim: usize) -> Self {
        Self {
            w_in: Matrix::zeros(channels, data_dim),
            b_in: vec![T::zero(); channels],
            blocks: (0..blocks)
                .map(|l| ResidualBlock {
                    taps: (0..kernel).map(|_| Matrix::zeros(channels, channels)).collect(),
                    bias: vec![T::zero(); channels],
                    w_cond: Matrix::zeros(channels, cond_dim),
                    w_out: Matrix::zeros(channels, channels),
                    b_out: vec![T::zero(); channels],
                    dilation: 1 << l,
                })
                .collect(),
            head_w: Matrix::zeros(data_dim, channels),
            head_b: vec![T::zero(); data_dim],
        }
    }

    pub fn random(
        data_dim: usize,
        channels: usize,
        blocks: usize,
        kernel: usize,
        cond_dim: usize,
        rng: &mut RngStream,
    ) -> Self {
        let mut net = Self::zeros(data_dim, channels, blocks, kernel, cond_dim);
        net.w_in = glorot_uniform(channels, data_dim, rng);
        let tap_scale = T::c(1.0 / (kernel as f64).sqrt());
        for b in &mut net.blocks {
            for t in &mut b.taps {
                *t = glorot_uniform::<T>(channels, channels, rng).scaled(tap_scale);
            }
            b.w_cond = glorot_uniform(channels, cond_dim, rng);
            b.w_out = glorot_uniform(channels, channels, rng);
        }
        net.head_w = glorot_uniform(data_dim, channels, rng);
        net
    }

    pub fn data_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn channels(&self) -> usize {
        self.w_in.rows()
    }

    pub fn cond_dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.w_cond.cols())
    }

    pub fn receptive_field(&self) -> usize {
        1 + self
            .blocks
            .iter()
            .map(|b| (b.taps.len().saturating_sub(1)) * b.dilation)
            .sum::<usize>()
    }

    /// Returns the `D`-dimensional read-out of the last window row.
    pub fn forward(&self, window: &Matrix<T>, cond: &[T], step_embed: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_cached(window, cond, step_embed)?.0)
    }

    pub fn forward_cached(
        &self,
        window: &Matrix<T>,
        cond: &[T],
        step_embed: &[T],
    ) -> Result<(Vec<T>, ConvCache<T>)> {
        if window.cols() != self.data_dim() || window.rows() == 0 {
            return Err(dim_err(
                "dilated_causal_conv_forward window",
                format!("W x {}", self.data_dim()),
                format!("{:?}", window.shape()),
            ));
        }
        if cond.len() + step_embed.len() != self.cond_dim() {
            return Err(dim_err(
                "dilated_causal_conv_forward conditioning",
                self.cond_dim(),
                cond.len() + step_embed.len(),
            ));
        }
        let mut g = Vec::with_capacity(self.cond_dim());
        g.extend_from_slice(cond);
        g.extend_from_slice(step_embed);

        let w = window.rows();
        let c = self.channels();
        let mut h = Matrix::zeros(w, c);
        for p in 0..w {
            let row = &mut h.data_mut()[p * c..(p + 1) * c];
            row.copy_from_slice(&self.b_in);
            self.w_in.matvec_acc(window.row(p), row);
        }
        let mut hs = Vec::with_capacity(self.blocks.len() + 1);
        let mut acts = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut shift = b.bias.clone();
            b.w_cond.matvec_acc(&g, &mut shift);
            let mut a = Matrix::zeros(w, c);
            let mut next = h.clone();
            for p in 0..w {
                let y = &mut a.data_mut()[p * c..(p + 1) * c];
                y.copy_from_slice(&shift);
                for (j, tap) in b.taps.iter().enumerate() {
                    let back = j * b.dilation;
                    if back <= p {
                        tap.matvec_acc(h.row(p - back), y);
                    }
                }
                y.iter_mut().for_each(|v| *v = v.tanh());
                let out = &mut next.data_mut()[p * c..(p + 1) * c];
                for (o, &bo) in out.iter_mut().zip(&b.b_out) {
                    *o += bo;
                }
                b.w_out.matvec_acc(a.row(p), out);
            }
            hs.push(h);
            acts.push(a);
            h = next;
        }
        let mut eps = self.head_b.clone();
        self.head_w.matvec_acc(h.row(w - 1), &mut eps);
        hs.push(h);
        Ok((
            eps,
            ConvCache {
                window: window.clone(),
                cond: g,
                hs,
                acts,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream gradient `d_out` and
    /// returns the gradient with respect to `[cond; step_embed]`.
    pub fn backward(&self, cache: &ConvCache<T>, d_out: &[T], grads: &mut CausalConvNet<T>) -> Vec<T> {
        let one = T::one();
        let w = cache.window.rows();
        let c = self.channels();
        let last = cache.hs.last().expect("non-empty cache");
        grads.head_w.add_outer(one, d_out, last.row(w - 1));
        for (g, &d) in grads.head_b.iter_mut().zip(d_out) {
            *g += d;
        }
        let mut dh = Matrix::zeros(w, c);
        self.head_w
            .matvec_t_acc(d_out, &mut dh.data_mut()[(w - 1) * c..w * c]);

        let mut d_cond = vec![T::zero(); cache.cond.len()];
        for (l, b) in self.blocks.iter().enumerate().rev() {
            let h_in = &cache.hs[l];
            let a = &cache.acts[l];
            let gb = &mut grads.blocks[l];
            // residual path carries dh through unchanged
            let mut dh_in = dh.clone();
            let mut du = vec![T::zero(); c];
            let mut da = vec![T::zero(); c];
            for p in 0..w {
                let dn = dh.row(p);
                if dn.iter().all(|v| *v == T::zero()) {
                    continue;
                }
                gb.w_out.add_outer(one, dn, a.row(p));
                for (g, &d) in gb.b_out.iter_mut().zip(dn) {
                    *g += d;
                }
                da.iter_mut().for_each(|v| *v = T::zero());
                b.w_out.matvec_t_acc(dn, &mut da);
                let ap = a.row(p);
                let dy: Vec<T> = da.iter().zip(ap).map(|(&d, &av)| d * (one - av * av)).collect();
                for (u, &d) in du.iter_mut().zip(&dy) {
                    *u += d;
                }
                for (j, tap) in b.taps.iter().enumerate() {
                    let back = j * b.dilation;
                    if back <= p {
                        gb.taps[j].add_outer(one, &dy, h_in.row(p - back));
                        let q = p - back;
                        tap.matvec_t_acc(&dy, &mut dh_in.data_mut()[q * c..(q + 1) * c]);
                    }
                }
            }
            for (g, &d) in gb.bias.iter_mut().zip(&du) {
                *g += d;
            }
            gb.w_cond.add_outer(one, &du, &cache.cond);
            b.w_cond.matvec_t_acc(&du, &mut d_cond);
            dh = dh_in;
        }
        for p in 0..w {
            let d = dh.row(p);
            grads.w_in.add_outer(one, d, cache.window.row(p));
            for (g, &v) in grads.b_in.iter_mut().zip(d) {
                *g += v;
            }
        }
        d_cond
    }
}

impl<T: Scalar> ParamGroup<T> for CausalConvNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&join(prefix, "w_in"), self.w_in.data());
        f(&join(prefix, "b_in"), &self.b_in);
        for (l, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{l}"));
            for (j, t) in b.taps.iter().enumerate() {
                f(&join(&p, &format!("tap{j}")), t.data());
            }
            f(&join(&p, "bias"), &b.bias);
            f(&join(&p, "w_cond"), b.w_cond.data());
            f(&join(&p, "w_out"), b.w_out.data());
            f(&join(&p, "b_out"), &b.b_out);
        }
        f(&join(prefix, "head_w"), self.head_w.data());
        f(&join(prefix, "head_b"), &self.head_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&join(prefix, "w_in"), self.w_in.data_mut());
        f(&join(prefix, "b_in"), &mut self.b_in);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("block{l}"));
            for (j, t) in b.taps.iter_mut().enumerate() {
                f(&join(&p, &format!("tap{j}")), t.data_mut());
            }
            f(&join(&p, "bias"), &mut b.bias);
            f(&join(&p, "w_cond"), b.w_cond.data_mut());
            f(&join(&p, "w_out"), b.w_out.data_mut());
            f(&join(&p, "b_out"), &mut b.b_out);
        }
        f(&join(prefix, "head_w"), self.head_w.data_mut());
        f(&join(prefix, "head_b"), &mut self.head_b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_net(seed: u64) -> CausalConvNet<f64> {
        let mut rng = RngStream::new(seed);
        let mut net = CausalConvNet::random(1, 4, 2, 2, 3, &mut rng);
        net.visit_mut("", &mut |_, v| {
            for x in v.iter_mut() {
                if *x == 0.0 {
                    *x = 0.1 * rng.gaussian::<f64>();
                }
            }
        });
        net
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = CausalConvNet::<f64>::zeros(2, 3, 2, 2, 4);
        let win = Matrix::from_fn(5, 2, |i, j| (i + j) as f64);
        assert_eq!(net.forward(&win, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn leading_rows_beyond_receptive_field_are_ignored() {
        let net = random_net(9);
        assert_eq!(net.receptive_field(), 4);
        let short = Matrix::from_rows(&[vec![0.0], vec![0.0], vec![0.3], vec![0.7]]);
        let long = Matrix::from_rows(&[
            vec![0.0],
            vec![0.0],
            vec![0.0],
            vec![0.0],
            vec![0.3],
            vec![0.7],
        ]);
        let a = net.forward(&short, &[0.1, -0.2], &[0.5]).unwrap();
        let b = net.forward(&long, &[0.1, -0.2], &[0.5]).unwrap();
        assert_eq!(a, b);
        let mut noisy = long.clone();
        noisy[(0, 0)] = 5.0;
        noisy[(1, 0)] = -3.0;
        assert_eq!(net.forward(&noisy, &[0.1, -0.2], &[0.5]).unwrap(), b);
    }

    #[test]
    fn hand_computed_single_block() {
        // D = 1, C = 1, one block, kernel 2, dilation 1, 3-step window.
        let mut net = CausalConvNet::<f64>::zeros(1, 1, 1, 2, 1);
        net.w_in[(0, 0)] = 2.0;
        net.b_in[0] = 0.5;
        net.blocks[0].taps[0][(0, 0)] = 0.3;
        net.blocks[0].taps[1][(0, 0)] = -0.4;
        net.blocks[0].bias[0] = 0.1;
        net.blocks[0].w_cond[(0, 0)] = 1.5;
        net.blocks[0].w_out[(0, 0)] = 0.8;
        net.blocks[0].b_out[0] = -0.05;
        net.head_w[(0, 0)] = 1.2;
        net.head_b[0] = 0.25;
        let win = Matrix::from_rows(&[vec![1.0], vec![-1.0], vec![0.5]]);
        // h0 = 2x + 0.5 -> (2.5, -1.5, 1.5); shift = 0.1 + 1.5 * 0.2 = 0.4
        // last position: y = 0.4 + 0.3 * 1.5 - 0.4 * (-1.5) = 1.45
        // h1 = 1.5 + 0.8 * tanh(1.45) - 0.05
        let h1 = 1.5 + 0.8 * 1.45f64.tanh() - 0.05;
        let want = 1.2 * h1 + 0.25;
        let got = net.forward(&win, &[], &[0.2]).unwrap();
        assert!((got[0] - want).abs() < 1e-14);
    }

    #[test]
    fn wrong_window_width_is_rejected() {
        let net = CausalConvNet::<f64>::zeros(2, 3, 1, 2, 1);
        let win = Matrix::zeros(4, 3);
        assert!(net.forward(&win, &[], &[0.0]).is_err());
        assert!(net.forward(&Matrix::zeros(4, 2), &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = random_net(21);
        let mut rng = RngStream::new(2);
        let win = Matrix::from_fn(5, 1, |_, _| rng.gaussian::<f64>());
        let cond = vec![0.4, -0.9];
        let emb = vec![0.3];
        let upstream = [1.7];
        let loss = |n: &CausalConvNet<f64>, c: &[f64]| n.forward(&win, c, &emb).unwrap()[0] * upstream[0];
        let (_, cache) = net.forward_cached(&win, &cond, &emb).unwrap();
        let mut g = CausalConvNet::zeros(1, 4, 2, 2, 3);
        let d_cond = net.backward(&cache, &upstream, &mut g);
        let base = net.flatten();
        let analytic = g.flatten();
        let eps = 1e-6;
        for k in 0..base.len() {
            let mut v = base.clone();
            v[k] += eps;
            let mut plus = net.clone();
            plus.unflatten(&v);
            v[k] -= 2.0 * eps;
            let mut minus = net.clone();
            minus.unflatten(&v);
            let fd = (loss(&plus, &cond) - loss(&minus, &cond)) / (2.0 * eps);
            assert!((fd - analytic[k]).abs() < 1e-7, "param {k}: {fd} vs {}", analytic[k]);
        }
        for i in 0..2 {
            let mut cp = cond.clone();
            cp[i] += eps;
            let mut cm = cond.clone();
            cm[i] -= eps;
            let fd = (loss(&net, &cp) - loss(&net, &cm)) / (2.0 * eps);
            assert!((fd - d_cond[i]).abs() < 1e-7);
        }
    }
}
