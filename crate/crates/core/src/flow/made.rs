//! Masked conditioner network (MADE) shared by every flow layer.
//!
//! Inputs are `[v (d) | context (c)]`. Context units get degree 0, coordinate
//! `i` of `v` gets degree `i + 1`, hidden unit `j` gets degree `j mod d`. A
//! hidden unit sees inputs of degree `<=` its own; output `i` (and `d + i`)
//! sees hidden units of degree `< i + 1`. Output `i` therefore depends on
//! `v_0 .. v_{i-1}` and the full context only.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub(crate) struct Dense<S> {
    pub n_in: usize,
    pub n_out: usize,
    /// Offset of the row-major `n_out x n_in` weight block; the bias follows.
    pub offset: usize,
    pub mask: Array2<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn len(&self) -> usize {
        self.n_out * (self.n_in + 1)
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.n_out * self.n_in
    }

    pub fn masked_weights(&self, params: &[S]) -> Array2<S> {
        let w = ArrayView2::from_shape((self.n_out, self.n_in), &params[self.offset..self.bias_offset()])
            .expect("weight block shape");
        &w * &self.mask
    }

    pub fn bias<'a>(&self, params: &'a [S]) -> &'a [S] {
        &params[self.bias_offset()..self.offset + self.len()]
    }
}

/// Activations of one batched pass, kept for the backward sweep.
pub(crate) struct MadeTrace<S> {
    pub input: Array2<S>,
    /// Post-tanh activations of each hidden layer.
    pub hidden: Vec<Array2<S>>,
}

#[derive(Debug, Clone)]
pub(crate) struct Made<S> {
    pub d: usize,
    pub dense: Vec<Dense<S>>,
}

impl<S: Scalar> Made<S> {
    /// Layout for a network whose parameters start at `offset`.
    pub fn new(d: usize, n_ctx: usize, hidden: &[usize], offset: usize) -> Self {
        let in_deg: Vec<usize> = (1..=d).chain(std::iter::repeat_n(0, n_ctx)).collect();
        let mut prev = in_deg;
        let mut dense = Vec::new();
        let mut off = offset;
        for &h in hidden {
            let deg: Vec<usize> = (0..h).map(|j| j % d).collect();
            let mask = Array2::from_shape_fn((h, prev.len()), |(o, i)| {
                if deg[o] >= prev[i] {
                    S::one()
                } else {
                    S::zero()
                }
            });
            let layer = Dense {
                n_in: prev.len(),
                n_out: h,
                offset: off,
                mask,
            };
            off += layer.len();
            dense.push(layer);
            prev = deg;
        }
        let out_deg: Vec<usize> = (0..2 * d).map(|o| o % d + 1).collect();
        let mask = Array2::from_shape_fn((2 * d, prev.len()), |(o, i)| {
            if out_deg[o] > prev[i] {
                S::one()
            } else {
                S::zero()
            }
        });
        dense.push(Dense {
            n_in: prev.len(),
            n_out: 2 * d,
            offset: off,
            mask,
        });
        Self { d, dense }
    }

    pub fn n_params(&self) -> usize {
        self.dense.iter().map(Dense::len).sum()
    }

    pub fn output_layer(&self) -> &Dense<S> {
        self.dense.last().expect("at least one dense layer")
    }

    /// Raw outputs (`B x 2d`: log-scale pre-activations then shifts).
    pub fn forward(&self, params: &[S], input: Array2<S>, trace: bool) -> (Array2<S>, Option<MadeTrace<S>>) {
        let mut hidden = Vec::with_capacity(self.dense.len() - 1);
        let mut act: Option<Array2<S>> = None;
        let last = self.dense.len() - 1;
        let mut out = None;
        for (l, layer) in self.dense.iter().enumerate() {
            let x = act.as_ref().unwrap_or(&input);
            let mut pre = x.dot(&layer.masked_weights(params).t());
            pre = pre + ArrayView2::from_shape((1, layer.n_out), layer.bias(params)).unwrap();
            if l == last {
                out = Some(pre);
            } else {
                S::tanh_in_place(pre.as_slice_memory_order_mut().expect("contiguous"));
                if trace {
                    if let Some(a) = act.take() {
                        hidden.push(a);
                    }
                }
                act = Some(pre);
            }
        }
        if trace {
            if let Some(a) = act {
                hidden.push(a);
            }
        }
        let t = trace.then_some(MadeTrace { input, hidden });
        (out.expect("output layer"), t)
    }

    /// Accumulates parameter gradients into `grad` given `g_out = dL/d(raw
    /// output)`; returns `dL/dv` for the `d` autoregressive inputs.
    pub fn backward(
        &self,
        params: &[S],
        trace: &MadeTrace<S>,
        g_out: Array2<S>,
        grad: &mut [S],
    ) -> Array2<S> {
        let mut g = g_out;
        for (l, layer) in self.dense.iter().enumerate().rev() {
            let x = if l == 0 {
                &trace.input
            } else {
                &trace.hidden[l - 1]
            };
            let gw = g.t().dot(x) * &layer.mask;
            let gb: Array1<S> = g.sum_axis(Axis(0));
            for (dst, v) in grad[layer.offset..layer.bias_offset()].iter_mut().zip(gw.iter()) {
                *dst = *dst + *v;
            }
            for (dst, v) in grad[layer.bias_offset()..layer.offset + layer.len()]
                .iter_mut()
                .zip(gb.iter())
            {
                *dst = *dst + *v;
            }
            let gx = g.dot(&layer.masked_weights(params));
            if l == 0 {
                return gx.slice(s![.., ..self.d]).to_owned();
            }
            // through tanh of the previous hidden layer
            let h = &trace.hidden[l - 1];
            g = gx * &h.mapv(|a| S::one() - a * a);
        }
        unreachable!("loop returns at the input layer")
    }
}
