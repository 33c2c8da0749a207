//! Gated recurrent unit with an explicit backward pass.
//!
//! ```text
//! z  = sigmoid(W_z x + U_z h + b_z)
//! r  = sigmoid(W_r x + U_r h + b_r)
//! h~ = tanh(W_h x + U_h (r * h) + b_h)
//! h' = (1 - z) * h + z * h~
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numerics::matrix::{sigmoid, Matrix};
use crate::numerics::params::{glorot_uniform, join, ParamGroup};
use crate::numerics::rng::RngStream;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GruParams<T> {
    pub w_z: Matrix<T>,
    pub w_r: Matrix<T>,
    pub w_h: Matrix<T>,
    pub u_z: Matrix<T>,
    pub u_r: Matrix<T>,
    pub u_h: Matrix<T>,
    pub b_z: Vec<T>,
    pub b_r: Vec<T>,
    pub b_h: Vec<T>,
}

impl<T: Scalar> GruParams<T> {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            w_z: Matrix::zeros(hidden, input),
            w_r: Matrix::zeros(hidden, input),
            w_h: Matrix::zeros(hidden, input),
            u_z: Matrix::zeros(hidden, hidden),
            u_r: Matrix::zeros(hidden, hidden),
            u_h: Matrix::zeros(hidden, hidden),
            b_z: vec![T::zero(); hidden],
            b_r: vec![T::zero(); hidden],
            b_h: vec![T::zero(); hidden],
        }
    }

    pub fn random(hidden: usize, input: usize, rng: &mut RngStream) -> Self {
        Self {
            w_z: glorot_uniform(hidden, input, rng),
            w_r: glorot_uniform(hidden, input, rng),
            w_h: glorot_uniform(hidden, input, rng),
            u_z: glorot_uniform(hidden, hidden, rng),
            u_r: glorot_uniform(hidden, hidden, rng),
            u_h: glorot_uniform(hidden, hidden, rng),
            b_z: vec![T::zero(); hidden],
            b_r: vec![T::zero(); hidden],
            b_h: vec![T::zero(); hidden],
        }
    }

    #[inline]
    pub fn hidden(&self) -> usize {
        self.u_z.rows()
    }

    #[inline]
    pub fn input(&self) -> usize {
        self.w_z.cols()
    }

    /// Checks that all nine members agree on `(hidden, input)`.
    pub fn validate(&self) -> Result<()> {
        let m = self.hidden();
        let d = self.input();
        for (name, w) in [("w_z", &self.w_z), ("w_r", &self.w_r), ("w_h", &self.w_h)] {
            if w.shape() != (m, d) {
                return Err(dim_err("GruParams", format!("{name} {m}x{d}"), format!("{:?}", w.shape())));
            }
        }
        for (name, u) in [("u_z", &self.u_z), ("u_r", &self.u_r), ("u_h", &self.u_h)] {
            if u.shape() != (m, m) {
                return Err(dim_err("GruParams", format!("{name} {m}x{m}"), format!("{:?}", u.shape())));
            }
        }
        for b in [&self.b_z, &self.b_r, &self.b_h] {
            if b.len() != m {
                return Err(dim_err("GruParams bias", m, b.len()));
            }
        }
        Ok(())
    }

    /// Same cell with the input matrices restricted to columns
    /// `[start, start + len)`; the remaining input columns are treated as a
    /// constant and dropped.
    pub fn input_columns(&self, start: usize, len: usize) -> GruParams<T> {
        GruParams {
            w_z: self.w_z.column_block(start, len),
            w_r: self.w_r.column_block(start, len),
            w_h: self.w_h.column_block(start, len),
            u_z: self.u_z.clone(),
            u_r: self.u_r.clone(),
            u_h: self.u_h.clone(),
            b_z: self.b_z.clone(),
            b_r: self.b_r.clone(),
            b_h: self.b_h.clone(),
        }
    }

    /// Writes the input matrices of `block` back into columns starting at
    /// `start`, and copies the recurrent matrices.
    pub fn set_input_columns(&mut self, start: usize, block: &GruParams<T>) {
        self.w_z.set_column_block(start, &block.w_z);
        self.w_r.set_column_block(start, &block.w_r);
        self.w_h.set_column_block(start, &block.w_h);
        self.u_z = block.u_z.clone();
        self.u_r = block.u_r.clone();
        self.u_h = block.u_h.clone();
    }
}

impl<T: Scalar> ParamGroup<T> for GruParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&join(prefix, "w_z"), self.w_z.data());
        f(&join(prefix, "w_r"), self.w_r.data());
        f(&join(prefix, "w_h"), self.w_h.data());
        f(&join(prefix, "u_z"), self.u_z.data());
        f(&join(prefix, "u_r"), self.u_r.data());
        f(&join(prefix, "u_h"), self.u_h.data());
        f(&join(prefix, "b_z"), &self.b_z);
        f(&join(prefix, "b_r"), &self.b_r);
        f(&join(prefix, "b_h"), &self.b_h);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&join(prefix, "w_z"), self.w_z.data_mut());
        f(&join(prefix, "w_r"), self.w_r.data_mut());
        f(&join(prefix, "w_h"), self.w_h.data_mut());
        f(&join(prefix, "u_z"), self.u_z.data_mut());
        f(&join(prefix, "u_r"), self.u_r.data_mut());
        f(&join(prefix, "u_h"), self.u_h.data_mut());
        f(&join(prefix, "b_z"), &mut self.b_z);
        f(&join(prefix, "b_r"), &mut self.b_r);
        f(&join(prefix, "b_h"), &mut self.b_h);
    }
}

/// Everything one GRU step produces, kept for monitoring and backprop.
#[derive(Clone, Debug)]
pub struct GruStep<T> {
    pub x: Vec<T>,
    pub h_prev: Vec<T>,
    pub z: Vec<T>,
    pub r: Vec<T>,
    pub h_tilde: Vec<T>,
    pub h_new: Vec<T>,
}

pub fn gru_forward<T: Scalar>(h_prev: &[T], x: &[T], p: &GruParams<T>) -> Result<GruStep<T>> {
    let m = p.hidden();
    if h_prev.len() != m {
        return Err(dim_err("gru_forward hidden", m, h_prev.len()));
    }
    if x.len() != p.input() {
        return Err(dim_err("gru_forward input", p.input(), x.len()));
    }
    Ok(gru_forward_unchecked(h_prev, x, p))
}

pub(crate) fn gru_forward_unchecked<T: Scalar>(h_prev: &[T], x: &[T], p: &GruParams<T>) -> GruStep<T> {
    let m = p.hidden();
    let mut az = p.b_z.clone();
    p.w_z.matvec_acc(x, &mut az);
    p.u_z.matvec_acc(h_prev, &mut az);
    let mut ar = p.b_r.clone();
    p.w_r.matvec_acc(x, &mut ar);
    p.u_r.matvec_acc(h_prev, &mut ar);
    let z: Vec<T> = az.into_iter().map(sigmoid).collect();
    let r: Vec<T> = ar.into_iter().map(sigmoid).collect();
    let rh: Vec<T> = r.iter().zip(h_prev).map(|(&a, &b)| a * b).collect();
    let mut ah = p.b_h.clone();
    p.w_h.matvec_acc(x, &mut ah);
    p.u_h.matvec_acc(&rh, &mut ah);
    let h_tilde: Vec<T> = ah.into_iter().map(|v| v.tanh()).collect();
    let h_new: Vec<T> = (0..m)
        .map(|i| (T::one() - z[i]) * h_prev[i] + z[i] * h_tilde[i])
        .collect();
    GruStep {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        z,
        r,
        h_tilde,
        h_new,
    }
}

/// Backpropagates `dh_new` through one step. Parameter gradients are
/// accumulated into `grads`; returns `(dh_prev, dx)`.
pub fn gru_backward<T: Scalar>(
    step: &GruStep<T>,
    p: &GruParams<T>,
    dh_new: &[T],
    grads: &mut GruParams<T>,
) -> (Vec<T>, Vec<T>) {
    let m = p.hidden();
    let one = T::one();
    let mut dh_prev: Vec<T> = (0..m).map(|i| dh_new[i] * (one - step.z[i])).collect();
    let mut dx = vec![T::zero(); p.input()];

    // candidate branch
    let da_h: Vec<T> = (0..m)
        .map(|i| dh_new[i] * step.z[i] * (one - step.h_tilde[i] * step.h_tilde[i]))
        .collect();
    let rh: Vec<T> = step.r.iter().zip(&step.h_prev).map(|(&a, &b)| a * b).collect();
    grads.w_h.add_outer(one, &da_h, &step.x);
    grads.u_h.add_outer(one, &da_h, &rh);
    for (g, &d) in grads.b_h.iter_mut().zip(&da_h) {
        *g += d;
    }
    p.w_h.matvec_t_acc(&da_h, &mut dx);
    let d_rh = p.u_h.matvec_t(&da_h);
    let mut da_r = vec![T::zero(); m];
    for i in 0..m {
        dh_prev[i] += d_rh[i] * step.r[i];
        da_r[i] = d_rh[i] * step.h_prev[i] * step.r[i] * (one - step.r[i]);
    }

    // update gate
    let da_z: Vec<T> = (0..m)
        .map(|i| dh_new[i] * (step.h_tilde[i] - step.h_prev[i]) * step.z[i] * (one - step.z[i]))
        .collect();

    gate_backward(&da_z, step, &p.w_z, &p.u_z, &mut grads.w_z, &mut grads.u_z, &mut grads.b_z, &mut dx, &mut dh_prev);
    gate_backward(&da_r, step, &p.w_r, &p.u_r, &mut grads.w_r, &mut grads.u_r, &mut grads.b_r, &mut dx, &mut dh_prev);
    (dh_prev, dx)
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn gate_backward<T: Scalar>(
    da: &[T],
    step: &GruStep<T>,
    w: &Matrix<T>,
    u: &Matrix<T>,
    gw: &mut Matrix<T>,
    gu: &mut Matrix<T>,
    gb: &mut [T],
    dx: &mut [T],
    dh_prev: &mut [T],
) {
    gw.add_outer(T::one(), da, &step.x);
    gu.add_outer(T::one(), da, &step.h_prev);
    for (g, &d) in gb.iter_mut().zip(da) {
        *g += d;
    }
    w.matvec_t_acc(da, dx);
    u.matvec_t_acc(da, dh_prev);
}

/// Runs the cell over a sequence from `h0`, returning every step.
pub fn gru_sequence<T: Scalar>(h0: &[T], inputs: &[Vec<T>], p: &GruParams<T>) -> Result<Vec<GruStep<T>>> {
    let mut steps = Vec::with_capacity(inputs.len());
    let mut h = h0.to_vec();
    for x in inputs {
        let s = gru_forward(&h, x, p)?;
        h = s.h_new.clone();
        steps.push(s);
    }
    Ok(steps)
}
