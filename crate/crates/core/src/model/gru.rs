//! Batched forward/backward math for the gated recurrent classifier.
//!
//! One GRU layer over a scalar input sequence, last hidden state into a
//! linear softmax head. Sequences shorter than `seq_len` are handled by
//! freezing the hidden state once a sample's `true_len` is exhausted, so
//! zero padding never dilutes the final state.
//!
//! Everything is f64 and single-threaded, so results are bit-reproducible
//! for a fixed batch partition.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};

/// Network dimensions. The parameter vector layout is fixed by this struct:
/// `wz, uz, bz, wr, ur, br, wc, uc, bc, wo, bo` in that order, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub hidden: usize,
    pub classes: usize,
    pub seq_len: usize,
}

impl Dims {
    pub fn param_count(&self) -> usize {
        let (h, c) = (self.hidden, self.classes);
        3 * (h + h * h + h) + c * h + c
    }

    /// Named parameter blocks as ranges into the flat vector.
    pub fn blocks(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        let (h, c) = (self.hidden, self.classes);
        let sizes = [
            ("wz", h),
            ("uz", h * h),
            ("bz", h),
            ("wr", h),
            ("ur", h * h),
            ("br", h),
            ("wc", h),
            ("uc", h * h),
            ("bc", h),
            ("wo", c * h),
            ("bo", c),
        ];
        let mut out = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for (name, len) in sizes {
            out.push((name, off..off + len));
            off += len;
        }
        out
    }
}

struct Params<'a> {
    wz: ArrayView2<'a, f64>,
    uz: ArrayView2<'a, f64>,
    bz: ArrayView1<'a, f64>,
    wr: ArrayView2<'a, f64>,
    ur: ArrayView2<'a, f64>,
    br: ArrayView1<'a, f64>,
    wc: ArrayView2<'a, f64>,
    uc: ArrayView2<'a, f64>,
    bc: ArrayView1<'a, f64>,
    wo: ArrayView2<'a, f64>,
    bo: ArrayView1<'a, f64>,
}

fn views<'a>(p: &'a [f64], d: &Dims) -> Params<'a> {
    let (h, c) = (d.hidden, d.classes);
    debug_assert_eq!(p.len(), d.param_count());
    let b = d.blocks();
    let v1 = |i: usize| ArrayView1::from(&p[b[i].1.clone()]);
    let v2 = |i: usize, rows: usize, cols: usize| {
        ArrayView2::from_shape((rows, cols), &p[b[i].1.clone()]).expect("block shape")
    };
    Params {
        wz: v2(0, h, 1),
        uz: v2(1, h, h),
        bz: v1(2),
        wr: v2(3, h, 1),
        ur: v2(4, h, h),
        br: v1(5),
        wc: v2(6, h, 1),
        uc: v2(7, h, h),
        bc: v1(8),
        wo: v2(9, c, h),
        bo: v1(10),
    }
}

struct Grads<'a> {
    wz: ArrayViewMut2<'a, f64>,
    uz: ArrayViewMut2<'a, f64>,
    bz: ArrayViewMut1<'a, f64>,
    wr: ArrayViewMut2<'a, f64>,
    ur: ArrayViewMut2<'a, f64>,
    br: ArrayViewMut1<'a, f64>,
    wc: ArrayViewMut2<'a, f64>,
    uc: ArrayViewMut2<'a, f64>,
    bc: ArrayViewMut1<'a, f64>,
    wo: ArrayViewMut2<'a, f64>,
    bo: ArrayViewMut1<'a, f64>,
}

fn grad_views<'a>(g: &'a mut [f64], d: &Dims) -> Grads<'a> {
    let (h, c) = (d.hidden, d.classes);
    let (wz, rest) = g.split_at_mut(h);
    let (uz, rest) = rest.split_at_mut(h * h);
    let (bz, rest) = rest.split_at_mut(h);
    let (wr, rest) = rest.split_at_mut(h);
    let (ur, rest) = rest.split_at_mut(h * h);
    let (br, rest) = rest.split_at_mut(h);
    let (wc, rest) = rest.split_at_mut(h);
    let (uc, rest) = rest.split_at_mut(h * h);
    let (bc, rest) = rest.split_at_mut(h);
    let (wo, bo) = rest.split_at_mut(c * h);
    Grads {
        wz: ArrayViewMut2::from_shape((h, 1), wz).unwrap(),
        uz: ArrayViewMut2::from_shape((h, h), uz).unwrap(),
        bz: ArrayViewMut1::from(bz),
        wr: ArrayViewMut2::from_shape((h, 1), wr).unwrap(),
        ur: ArrayViewMut2::from_shape((h, h), ur).unwrap(),
        br: ArrayViewMut1::from(br),
        wc: ArrayViewMut2::from_shape((h, 1), wc).unwrap(),
        uc: ArrayViewMut2::from_shape((h, h), uc).unwrap(),
        bc: ArrayViewMut1::from(bc),
        wo: ArrayViewMut2::from_shape((c, h), wo).unwrap(),
        bo: ArrayViewMut1::from(bo),
    }
}

fn sigmoid_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
}

fn add_bias(a: &mut Array2<f64>, bias: &ArrayView1<f64>) {
    for mut col in a.columns_mut() {
        col += bias;
    }
}

struct StepCache {
    z: Array2<f64>,
    r: Array2<f64>,
    c: Array2<f64>,
    rh: Array2<f64>,
}

struct Forward {
    /// states[t] is the hidden state before step t; states[seq_len] is final.
    states: Vec<Array2<f64>>,
    steps: Vec<StepCache>,
    probs: Array2<f64>,
}

fn run_forward(
    params: &[f64],
    dims: &Dims,
    xs: &Array2<f64>,
    true_lens: &[usize],
    keep_cache: bool,
) -> Forward {
    let p = views(params, dims);
    let (h_dim, batch) = (dims.hidden, xs.nrows());
    debug_assert_eq!(xs.ncols(), dims.seq_len);
    debug_assert_eq!(true_lens.len(), batch);

    let mut states = Vec::with_capacity(if keep_cache { dims.seq_len + 1 } else { 2 });
    let mut steps = Vec::with_capacity(if keep_cache { dims.seq_len } else { 0 });
    let mut h = Array2::<f64>::zeros((h_dim, batch));
    if keep_cache {
        states.push(h.clone());
    }

    for t in 0..dims.seq_len {
        let x_row = xs.column(t).insert_axis(Axis(0)); // 1 x B

        let mut z = p.wz.dot(&x_row);
        general_mat_mul(1.0, &p.uz, &h, 1.0, &mut z);
        add_bias(&mut z, &p.bz);
        sigmoid_inplace(&mut z);

        let mut r = p.wr.dot(&x_row);
        general_mat_mul(1.0, &p.ur, &h, 1.0, &mut r);
        add_bias(&mut r, &p.br);
        sigmoid_inplace(&mut r);

        let rh = &r * &h;
        let mut c = p.wc.dot(&x_row);
        general_mat_mul(1.0, &p.uc, &rh, 1.0, &mut c);
        add_bias(&mut c, &p.bc);
        c.mapv_inplace(f64::tanh);

        // h_new = (1 - z) .* h + z .* c, written as h + z .* (c - h)
        let mut h_new = &h + &(&z * &(&c - &h));
        for (b, &tl) in true_lens.iter().enumerate() {
            if t >= tl {
                h_new.column_mut(b).assign(&h.column(b));
            }
        }
        if keep_cache {
            steps.push(StepCache { z, r, c, rh });
            states.push(h_new.clone());
        }
        h = h_new;
    }

    let mut logits = p.wo.dot(&h);
    add_bias(&mut logits, &p.bo);
    let probs = softmax_columns(&logits);

    if !keep_cache {
        states.push(h);
    }
    Forward { states, steps, probs }
}

fn softmax_columns(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut col in out.columns_mut() {
        let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|v| (v - m).exp());
        let s: f64 = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    out
}

/// Class probabilities for a batch: rows of `xs` are samples, output is
/// `classes x batch`.
pub fn forward_probs(
    params: &[f64],
    dims: &Dims,
    xs: &Array2<f64>,
    true_lens: &[usize],
) -> Array2<f64> {
    run_forward(params, dims, xs, true_lens, false).probs
}

/// Mean cross-entropy over the batch plus the full analytic gradient,
/// laid out identically to the parameter vector.
pub fn loss_and_grad(
    params: &[f64],
    dims: &Dims,
    xs: &Array2<f64>,
    true_lens: &[usize],
    labels: &[usize],
) -> (f64, Vec<f64>) {
    let batch = xs.nrows();
    debug_assert_eq!(labels.len(), batch);
    let fwd = run_forward(params, dims, xs, true_lens, true);
    let p = views(params, dims);

    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        loss -= fwd.probs[(y, b)].max(1e-300).ln();
    }
    loss /= batch as f64;

    let mut grad = vec![0.0; dims.param_count()];
    let mut g = grad_views(&mut grad, dims);

    // d loss / d logits = (probs - onehot) / batch
    let mut dlogits = fwd.probs.clone();
    for (b, &y) in labels.iter().enumerate() {
        dlogits[(y, b)] -= 1.0;
    }
    dlogits.mapv_inplace(|v| v / batch as f64);

    let h_last = &fwd.states[dims.seq_len];
    general_mat_mul(1.0, &dlogits, &h_last.t(), 1.0, &mut g.wo);
    g.bo += &dlogits.sum_axis(Axis(1));
    let mut dh = p.wo.t().dot(&dlogits);

    for t in (0..dims.seq_len).rev() {
        let step = &fwd.steps[t];
        let h_prev = &fwd.states[t];
        let x_row = xs.column(t).insert_axis(Axis(0));

        // Frozen samples pass their gradient straight through to h_{t-1}.
        let mut dhn = dh.clone();
        for (b, &tl) in true_lens.iter().enumerate() {
            if t >= tl {
                dhn.column_mut(b).fill(0.0);
            }
        }

        let dc = &dhn * &step.z;
        let dz = &dhn * &(&step.c - h_prev);
        let dh_direct = &dhn - &dc; // dhn .* (1 - z)

        let da_c = &dc * &step.c.mapv(|v| 1.0 - v * v);
        general_mat_mul(1.0, &da_c, &x_row.t(), 1.0, &mut g.wc);
        general_mat_mul(1.0, &da_c, &step.rh.t(), 1.0, &mut g.uc);
        g.bc += &da_c.sum_axis(Axis(1));
        let drh = p.uc.t().dot(&da_c);

        let dr = &drh * h_prev;
        let da_r = &dr * &(&step.r * &step.r.mapv(|v| 1.0 - v));
        general_mat_mul(1.0, &da_r, &x_row.t(), 1.0, &mut g.wr);
        general_mat_mul(1.0, &da_r, &h_prev.t(), 1.0, &mut g.ur);
        g.br += &da_r.sum_axis(Axis(1));

        let da_z = &dz * &(&step.z * &step.z.mapv(|v| 1.0 - v));
        general_mat_mul(1.0, &da_z, &x_row.t(), 1.0, &mut g.wz);
        general_mat_mul(1.0, &da_z, &h_prev.t(), 1.0, &mut g.uz);
        g.bz += &da_z.sum_axis(Axis(1));

        let mut dh_prev = dh_direct + &(&drh * &step.r);
        general_mat_mul(1.0, &p.uz.t(), &da_z, 1.0, &mut dh_prev);
        general_mat_mul(1.0, &p.ur.t(), &da_r, 1.0, &mut dh_prev);
        for (b, &tl) in true_lens.iter().enumerate() {
            if t >= tl {
                let carry = dh.column(b).to_owned();
                dh_prev.column_mut(b).assign(&carry);
            }
        }
        dh = dh_prev;
    }

    (loss, grad)
}

/// Scale the gradient down to `max_norm` when its L2 norm exceeds it.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for v in grad.iter_mut() {
            *v *= scale;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_setup() -> (Dims, Vec<f64>, Array2<f64>, Vec<usize>, Vec<usize>) {
        let dims = Dims { hidden: 4, seq_len: 5, classes: 3 };
        // Deterministic, non-symmetric parameter fill.
        let params: Vec<f64> = (0..dims.param_count())
            .map(|i| ((i as f64 * 0.7311).sin()) * 0.4)
            .collect();
        let batch = 6;
        let xs = Array2::from_shape_fn((batch, dims.seq_len), |(b, t)| {
            ((b * 7 + t * 3) as f64 * 0.913).cos() * 0.8
        });
        let true_lens = vec![5, 3, 1, 5, 4, 2];
        let labels = vec![0, 1, 2, 1, 0, 2];
        (dims, params, xs, true_lens, labels)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (dims, params, xs, true_lens, labels) = tiny_setup();
        let (_, grad) = loss_and_grad(&params, &dims, &xs, &true_lens, &labels);
        let h = 1e-4;
        let mut worst = 0.0f64;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            let lp = loss_and_grad(&plus, &dims, &xs, &true_lens, &labels).0;
            let lm = loss_and_grad(&minus, &dims, &xs, &true_lens, &labels).0;
            let fd = (lp - lm) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((grad[i] - fd).abs() / denom);
        }
        assert!(worst < 1e-4, "max relative gradient error {worst}");
    }

    #[test]
    fn probs_are_normalized_and_nonnegative() {
        let (dims, params, xs, true_lens, _) = tiny_setup();
        let probs = forward_probs(&params, &dims, &xs, &true_lens);
        for col in probs.columns() {
            let s: f64 = col.sum();
            assert!((s - 1.0).abs() <= 1e-6);
            assert!(col.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_params_give_uniform_probs() {
        let dims = Dims { hidden: 4, seq_len: 5, classes: 3 };
        let params = vec![0.0; dims.param_count()];
        let xs = Array2::from_shape_fn((2, 5), |(b, t)| (b + t) as f64 * 0.1);
        let probs = forward_probs(&params, &dims, &xs, &[5, 5]);
        for v in probs.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_is_inert_beyond_true_len() {
        let (dims, params, _, _, _) = tiny_setup();
        // Same prefix, different garbage after true_len: probs must agree.
        let mut a = Array2::zeros((1, dims.seq_len));
        let mut b = Array2::zeros((1, dims.seq_len));
        for t in 0..3 {
            a[(0, t)] = 0.3 * (t as f64 + 1.0);
            b[(0, t)] = 0.3 * (t as f64 + 1.0);
        }
        b[(0, 3)] = 0.9;
        b[(0, 4)] = -0.9;
        let pa = forward_probs(&params, &dims, &a, &[3]);
        let pb = forward_probs(&params, &dims, &b, &[3]);
        assert_eq!(pa, pb);
    }

    #[test]
    fn clip_scales_only_large_gradients() {
        let mut g = vec![3.0, 4.0];
        let norm = clip_global_norm(&mut g, 5.0);
        assert_eq!(norm, 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        let mut g = vec![30.0, 40.0];
        clip_global_norm(&mut g, 5.0);
        let new_norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((new_norm - 5.0).abs() < 1e-12);
    }
}
