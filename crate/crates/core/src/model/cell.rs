//! Single-gate recurrent cell and the dense kernels it is built from.
//!
//! ```text
//! f  = sigmoid(W_f x + U_f h + b_f)
//! c  = tanh(W_h x + U_h (f * h) + b_h)
//! h' = (1 - f) * h + f * c
//! ```

use std::ops::Range;

/// `out += W x` for row-major `W` of shape `rows × cols`.
#[inline]
pub(crate) fn gemv_acc(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Wᵀ y`.
#[inline]
pub(crate) fn gemv_t_acc(w: &[f64], cols: usize, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), cols);
    for (&yi, row) in y.iter().zip(w.chunks_exact(cols)) {
        if yi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += yi * a;
        }
    }
}

/// `G += y xᵀ`.
#[inline]
pub(crate) fn ger_acc(g: &mut [f64], cols: usize, y: &[f64], x: &[f64]) {
    for (&yi, row) in y.iter().zip(g.chunks_exact_mut(cols)) {
        if yi == 0.0 {
            continue;
        }
        for (o, b) in row.iter_mut().zip(x) {
            *o += yi * b;
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Offsets of one cell's weights inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellLayout {
    pub input: usize,
    pub hidden: usize,
    pub w_f: Range<usize>,
    pub u_f: Range<usize>,
    pub b_f: Range<usize>,
    pub w_h: Range<usize>,
    pub u_h: Range<usize>,
    pub b_h: Range<usize>,
}

impl CellLayout {
    pub(crate) fn new(start: usize, input: usize, hidden: usize) -> (Self, usize) {
        let mut at = start;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let w_f = take(hidden * input);
        let u_f = take(hidden * hidden);
        let b_f = take(hidden);
        let w_h = take(hidden * input);
        let u_h = take(hidden * hidden);
        let b_h = take(hidden);
        (
            CellLayout {
                input,
                hidden,
                w_f,
                u_f,
                b_f,
                w_h,
                u_h,
                b_h,
            },
            at,
        )
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        2 * (hidden * input + hidden * hidden + hidden)
    }

    pub(crate) fn segments(&self, prefix: &str) -> Vec<(String, Range<usize>, [usize; 2])> {
        let (i, h) = (self.input, self.hidden);
        vec![
            (format!("{prefix}.w_gate"), self.w_f.clone(), [h, i]),
            (format!("{prefix}.u_gate"), self.u_f.clone(), [h, h]),
            (format!("{prefix}.b_gate"), self.b_f.clone(), [h, 1]),
            (format!("{prefix}.w_cand"), self.w_h.clone(), [h, i]),
            (format!("{prefix}.u_cand"), self.u_h.clone(), [h, h]),
            (format!("{prefix}.b_cand"), self.b_h.clone(), [h, 1]),
        ]
    }
}

/// Activations kept from a forward step for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct CellStep {
    pub gate: Vec<f64>,
    pub cand: Vec<f64>,
    pub h: Vec<f64>,
}

pub(crate) fn cell_forward(p: &[f64], l: &CellLayout, x: &[f64], h_prev: &[f64]) -> CellStep {
    let hn = l.hidden;
    let mut gate = p[l.b_f.clone()].to_vec();
    gemv_acc(&p[l.w_f.clone()], l.input, x, &mut gate);
    gemv_acc(&p[l.u_f.clone()], hn, h_prev, &mut gate);
    for g in gate.iter_mut() {
        *g = sigmoid(*g);
    }
    let reset: Vec<f64> = gate.iter().zip(h_prev).map(|(f, h)| f * h).collect();
    let mut cand = p[l.b_h.clone()].to_vec();
    gemv_acc(&p[l.w_h.clone()], l.input, x, &mut cand);
    gemv_acc(&p[l.u_h.clone()], hn, &reset, &mut cand);
    for c in cand.iter_mut() {
        *c = c.tanh();
    }
    let h = (0..hn)
        .map(|j| (1.0 - gate[j]) * h_prev[j] + gate[j] * cand[j])
        .collect();
    CellStep { gate, cand, h }
}

/// Backpropagates `dh` through one step. Parameter gradients accumulate into
/// `grad`; input and previous-state gradients accumulate into `dx` / `dh_prev`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn cell_backward(
    p: &[f64],
    l: &CellLayout,
    grad: &mut [f64],
    x: &[f64],
    h_prev: &[f64],
    step: &CellStep,
    dh: &[f64],
    dx: Option<&mut [f64]>,
    dh_prev: &mut [f64],
) {
    let hn = l.hidden;
    let mut dgate = vec![0.0; hn];
    let mut dcand_pre = vec![0.0; hn];
    for j in 0..hn {
        let f = step.gate[j];
        let c = step.cand[j];
        dgate[j] = dh[j] * (c - h_prev[j]);
        dh_prev[j] += dh[j] * (1.0 - f);
        dcand_pre[j] = dh[j] * f * (1.0 - c * c);
    }
    let reset: Vec<f64> = step.gate.iter().zip(h_prev).map(|(f, h)| f * h).collect();
    ger_acc(&mut grad[l.w_h.clone()], l.input, &dcand_pre, x);
    ger_acc(&mut grad[l.u_h.clone()], hn, &dcand_pre, &reset);
    for (g, d) in grad[l.b_h.clone()].iter_mut().zip(&dcand_pre) {
        *g += d;
    }
    let mut dreset = vec![0.0; hn];
    gemv_t_acc(&p[l.u_h.clone()], hn, &dcand_pre, &mut dreset);
    let mut dgate_pre = vec![0.0; hn];
    for j in 0..hn {
        dh_prev[j] += dreset[j] * step.gate[j];
        let dg = dgate[j] + dreset[j] * h_prev[j];
        let f = step.gate[j];
        dgate_pre[j] = dg * f * (1.0 - f);
    }
    ger_acc(&mut grad[l.w_f.clone()], l.input, &dgate_pre, x);
    ger_acc(&mut grad[l.u_f.clone()], hn, &dgate_pre, h_prev);
    for (g, d) in grad[l.b_f.clone()].iter_mut().zip(&dgate_pre) {
        *g += d;
    }
    gemv_t_acc(&p[l.u_f.clone()], hn, &dgate_pre, dh_prev);
    if let Some(dx) = dx {
        gemv_t_acc(&p[l.w_h.clone()], l.input, &dcand_pre, dx);
        gemv_t_acc(&p[l.w_f.clone()], l.input, &dgate_pre, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn step_gradient_matches_finite_differences() {
        let (layout, n) = CellLayout::new(0, 3, 4);
        let mut rng = crate::rng::stream(5, 1);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h0: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |p: &[f64], x: &[f64], h0: &[f64]| -> f64 {
            let s = cell_forward(p, &layout, x, h0);
            s.h.iter().zip(&w).map(|(a, b)| a * b).sum()
        };

        let step = cell_forward(&p, &layout, &x, &h0);
        let mut grad = vec![0.0; n];
        let mut dx = vec![0.0; 3];
        let mut dh0 = vec![0.0; 4];
        cell_backward(&p, &layout, &mut grad, &x, &h0, &step, &w, Some(&mut dx), &mut dh0);

        let eps = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * eps);
            assert!(
                (analytic - numeric).abs() < 1e-7,
                "{analytic} vs {numeric}"
            );
        };
        for i in 0..n {
            let mut pp = p.clone();
            pp[i] += eps;
            let mut pm = p.clone();
            pm[i] -= eps;
            check(grad[i], objective(&pp, &x, &h0), objective(&pm, &x, &h0));
        }
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            check(dx[i], objective(&p, &xp, &h0), objective(&p, &xm, &h0));
        }
        for i in 0..4 {
            let mut hp = h0.clone();
            hp[i] += eps;
            let mut hm = h0.clone();
            hm[i] -= eps;
            check(dh0[i], objective(&p, &x, &hp), objective(&p, &x, &hm));
        }
    }
}
