//! Forward and backward passes.
//!
//! Activations are NHWC. Convolutions run as im2col followed by one GEMM per
//! layer; the accumulation order is fixed, so a pass is bitwise reproducible.

use rand::Rng;

use super::params::Parameters;
use super::spec::ModelSpec;
use super::tensor::{gemm, Scalar, Tensor};
use crate::rng::StreamRng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active on the hidden dense layers.
    Train,
    /// Deterministic inference.
    Eval,
}

struct BlockCache<T> {
    cols: Vec<T>,
    /// Post-ReLU conv output, NHWC.
    act: Vec<T>,
    /// For each pooled element, the flat index into `act` it came from.
    argmax: Vec<u32>,
}

/// Intermediate values of one forward pass.
pub struct Trace<T> {
    blocks: Vec<BlockCache<T>>,
    /// Flattened conv-section output `[N, flat_dim]`.
    pub features: Vec<T>,
    /// Hidden dense activations after ReLU and dropout.
    pub hidden1: Vec<T>,
    pub hidden2: Vec<T>,
    mask1: Option<Vec<T>>,
    mask2: Option<Vec<T>>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    pub batch: usize,
}

fn check_finite<T: Scalar>(values: &[T], layer: &str) -> Result<()> {
    // Non-short-circuiting fold so the scan vectorizes.
    if values.iter().fold(true, |ok, v| ok & v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{layer} produced a non-finite activation")))
    }
}

fn relu<T: Scalar>(x: &mut [T]) {
    for v in x {
        *v = if *v > T::zero() { *v } else { T::zero() };
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// 3x3, stride 1, zero "same" padding. Column order within a row is (ky, kx, ci).
fn im2col<T: Scalar>(x: &[T], n: usize, side: usize, cin: usize, cols: &mut Vec<T>) {
    let seg = 3 * cin;
    cols.clear();
    cols.reserve(n * side * side * 3 * seg);
    for img in x.chunks_exact(side * side * cin).take(n) {
        for y in 0..side {
            for xx in 0..side {
                for ky in 0..3 {
                    let sy = (y + ky).wrapping_sub(1);
                    if sy >= side {
                        cols.extend(std::iter::repeat_n(T::zero(), seg));
                        continue;
                    }
                    let row = &img[sy * side * cin..(sy + 1) * side * cin];
                    if xx >= 1 && xx + 1 < side {
                        cols.extend_from_slice(&row[(xx - 1) * cin..(xx + 2) * cin]);
                    } else {
                        for kx in 0..3 {
                            let sx = (xx + kx).wrapping_sub(1);
                            if sx >= side {
                                cols.extend(std::iter::repeat_n(T::zero(), cin));
                            } else {
                                cols.extend_from_slice(&row[sx * cin..(sx + 1) * cin]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(dcols: &[T], n: usize, side: usize, cin: usize, dx: &mut [T]) {
    let seg = 3 * cin;
    dx.iter_mut().for_each(|v| *v = T::zero());
    let mut rows = dcols.chunks_exact(3 * seg);
    for img in dx.chunks_exact_mut(side * side * cin).take(n) {
        for y in 0..side {
            for xx in 0..side {
                let r = rows.next().expect("dcols sized for the batch");
                for ky in 0..3 {
                    let sy = (y + ky).wrapping_sub(1);
                    if sy >= side {
                        continue;
                    }
                    let src = &r[ky * seg..(ky + 1) * seg];
                    let row = &mut img[sy * side * cin..(sy + 1) * side * cin];
                    if xx >= 1 && xx + 1 < side {
                        for (d, &s) in row[(xx - 1) * cin..(xx + 2) * cin].iter_mut().zip(src) {
                            *d += s;
                        }
                    } else {
                        for kx in 0..3 {
                            let sx = (xx + kx).wrapping_sub(1);
                            if sx < side {
                                for (d, &s) in row[sx * cin..(sx + 1) * cin].iter_mut().zip(&src[kx * cin..]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max-pool (first maximum wins ties). Returns pooled values and source indices.
fn maxpool<T: Scalar>(act: &[T], n: usize, side: usize, c: usize) -> (Vec<T>, Vec<u32>) {
    let half = side / 2;
    let mut out = Vec::with_capacity(n * half * half * c);
    let mut idx = Vec::with_capacity(out.capacity());
    for b in 0..n {
        for py in 0..half {
            for px in 0..half {
                for ch in 0..c {
                    let mut best_i = ((b * side + 2 * py) * side + 2 * px) * c + ch;
                    let mut best = act[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((b * side + 2 * py + dy) * side + 2 * px + dx) * c + ch;
                        if act[i] > best {
                            best = act[i];
                            best_i = i;
                        }
                    }
                    out.push(best);
                    idx.push(best_i as u32);
                }
            }
        }
    }
    (out, idx)
}

fn dense_forward<T: Scalar>(x: &[T], n: usize, fan_in: usize, w: &[T], bias: &[T]) -> Vec<T> {
    let units = bias.len();
    let mut out = vec![T::zero(); n * units];
    gemm(n, fan_in, units, x, false, w, false, &mut out, false);
    for row in out.chunks_exact_mut(units) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

fn dropout<T: Scalar>(h: &mut [T], rate: f64, rng: &mut StreamRng) -> Vec<T> {
    let keep = 1.0 - rate;
    let scale = T::of(1.0 / keep);
    let mask: Vec<T> = (0..h.len())
        .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
        .collect();
    for (v, &m) in h.iter_mut().zip(&mask) {
        *v *= m;
    }
    mask
}

fn check_batch<T: Scalar>(spec: &ModelSpec, batch: &Tensor<T>) -> Result<usize> {
    let s = spec.input_size;
    match batch.shape.as_slice() {
        [n, h, w, 3] if *h == s && *w == s && batch.data.len() == n * s * s * 3 => Ok(*n),
        other => Err(Error::ShapeMismatch(format!("batch shape {other:?} does not match [N, {s}, {s}, 3]"))),
    }
}

/// Runs the network and keeps every intermediate needed by [`backward`].
///
/// `rng` is required in `Mode::Train` when the dropout rate is positive.
pub fn forward_trace<T: Scalar>(
    spec: &ModelSpec,
    params: &Parameters<T>,
    batch: &Tensor<T>,
    mode: Mode,
    rng: Option<&mut StreamRng>,
) -> Result<Trace<T>> {
    let n = check_batch(spec, batch)?;
    let mut x: Vec<T> = batch.data.clone();
    let mut blocks = Vec::with_capacity(spec.blocks());
    for b in 0..spec.blocks() {
        let (side, cin, cout) = (spec.side_at(b), spec.cin_at(b), spec.conv_channels[b]);
        let mut cols = Vec::new();
        im2col(&x, n, side, cin, &mut cols);
        let mut act = vec![T::zero(); n * side * side * cout];
        gemm(n * side * side, 9 * cin, cout, &cols, false, params.conv_weight(b), false, &mut act, false);
        let bias = params.conv_bias(b);
        for row in act.chunks_exact_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        check_finite(&act, &format!("conv{}", b + 1))?;
        relu(&mut act);
        let (pooled, argmax) = maxpool(&act, n, side, cout);
        blocks.push(BlockCache { cols, act, argmax });
        x = pooled;
    }
    let features = x;
    let nb = spec.blocks();
    let flat = spec.flat_dim();
    let [u1, u2] = [spec.dense_units[0], spec.dense_units[1]];

    let train = mode == Mode::Train && spec.dropout_rate > 0.0;
    let mut rng = rng;
    if train && rng.is_none() {
        return Err(Error::InvalidArgument("train-mode forward with dropout needs a random stream".into()));
    }

    let mut hidden1 = dense_forward(&features, n, flat, params.dense_weight(nb, 0), params.dense_bias(nb, 0));
    check_finite(&hidden1, "dense1")?;
    relu(&mut hidden1);
    let mask1 = match (train, rng.as_deref_mut()) {
        (true, Some(r)) => Some(dropout(&mut hidden1, spec.dropout_rate, r)),
        _ => None,
    };

    let mut hidden2 = dense_forward(&hidden1, n, u1, params.dense_weight(nb, 1), params.dense_bias(nb, 1));
    check_finite(&hidden2, "dense2")?;
    relu(&mut hidden2);
    let mask2 = match (train, rng.as_deref_mut()) {
        (true, Some(r)) => Some(dropout(&mut hidden2, spec.dropout_rate, r)),
        _ => None,
    };

    let logits = dense_forward(&hidden2, n, u2, params.dense_weight(nb, 2), params.dense_bias(nb, 2));
    check_finite(&logits, "output")?;
    let probs = logits.iter().map(|&z| sigmoid(z)).collect();
    Ok(Trace { blocks, features, hidden1, hidden2, mask1, mask2, logits, probs, batch: n })
}

/// Output probabilities, one per batch item.
pub fn forward<T: Scalar>(
    spec: &ModelSpec,
    params: &Parameters<T>,
    batch: &Tensor<T>,
    mode: Mode,
    rng: Option<&mut StreamRng>,
) -> Result<Vec<T>> {
    forward_trace(spec, params, batch, mode, rng).map(|t| t.probs)
}

/// Conv-section output only (flattened NHWC features).
pub fn conv_features<T: Scalar>(spec: &ModelSpec, params: &Parameters<T>, batch: &Tensor<T>) -> Result<Vec<T>> {
    forward_trace(spec, params, batch, Mode::Eval, None).map(|t| t.features)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Scalar>(p: &[T], y: &[T]) -> Result<T> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "bce_loss: {} probabilities vs {} labels",
            p.len(),
            y.len()
        )));
    }
    let lo = T::of(1e-7);
    let hi = T::one() - lo;
    let sum: T = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.max(lo).min(hi);
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        })
        .sum();
    Ok(sum / T::of(p.len() as f64))
}

/// Backward pass through a trace produced by [`forward_trace`] on the same inputs.
pub fn backward_from_trace<T: Scalar>(
    spec: &ModelSpec,
    params: &Parameters<T>,
    trace: &Trace<T>,
    labels: &[T],
) -> Result<Parameters<T>> {
    let n = trace.batch;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for a batch of {n}", labels.len())));
    }
    let nb = spec.blocks();
    let flat = spec.flat_dim();
    let [u1, u2] = [spec.dense_units[0], spec.dense_units[1]];
    let mut grads = params.zeros_like();
    let inv_n = T::of(1.0 / n as f64);

    // d(mean BCE)/d logit = (p - y) / N
    let dlogit: Vec<T> = trace.probs.iter().zip(labels).map(|(&p, &y)| (p - y) * inv_n).collect();

    let mut upstream = dlogit;
    let layers: [(&[T], usize, usize, Option<&Vec<T>>); 3] = [
        (&trace.features, flat, u1, trace.mask1.as_ref()),
        (&trace.hidden1, u1, u2, trace.mask2.as_ref()),
        (&trace.hidden2, u2, 1, None),
    ];
    // Walk output -> dense2 -> dense1. `upstream` holds dL/d(pre-activation) of layer d.
    for d in (0..3).rev() {
        let (input, fan_in, units, _) = layers[d];
        let wi = 2 * nb + 2 * d;
        gemm(fan_in, n, units, input, true, &upstream, false, &mut grads.tensors[wi].data, false);
        let db = &mut grads.tensors[wi + 1].data;
        for row in upstream.chunks_exact(units) {
            for (g, &v) in db.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dinput = vec![T::zero(); n * fan_in];
        gemm(n, units, fan_in, &upstream, false, params.dense_weight(nb, d), true, &mut dinput, false);
        if d > 0 {
            // `input` is the post-ReLU, post-dropout activation of the previous dense layer.
            let mask = layers[d - 1].3;
            for (i, g) in dinput.iter_mut().enumerate() {
                if !(input[i] > T::zero()) {
                    *g = T::zero();
                } else if let Some(m) = mask {
                    *g *= m[i];
                }
            }
        }
        upstream = dinput;
    }

    // `upstream` is now dL/d(features), the pooled output of the last block.
    for b in (0..nb).rev() {
        let (side, cin, cout) = (spec.side_at(b), spec.cin_at(b), spec.conv_channels[b]);
        let cache = &trace.blocks[b];
        let mut dact = vec![T::zero(); n * side * side * cout];
        for (&src, &g) in cache.argmax.iter().zip(&upstream) {
            dact[src as usize] += g;
        }
        for (g, &a) in dact.iter_mut().zip(&cache.act) {
            if !(a > T::zero()) {
                *g = T::zero();
            }
        }
        let m = n * side * side;
        gemm(9 * cin, m, cout, &cache.cols, true, &dact, false, &mut grads.tensors[2 * b].data, false);
        let db = &mut grads.tensors[2 * b + 1].data;
        for row in dact.chunks_exact(cout) {
            for (g, &v) in db.iter_mut().zip(row) {
                *g += v;
            }
        }
        if b > 0 {
            let mut dcols = vec![T::zero(); m * 9 * cin];
            gemm(m, cout, 9 * cin, &dact, false, params.conv_weight(b), true, &mut dcols, false);
            let mut dx = vec![T::zero(); n * side * side * cin];
            col2im(&dcols, n, side, cin, &mut dx);
            upstream = dx;
        }
    }
    Ok(grads)
}

/// Loss and exact gradients of the mean BCE for one batch.
///
/// The forward pass inside uses `rng` for dropout, and the backward pass
/// reuses the same masks.
pub fn backward<T: Scalar>(
    spec: &ModelSpec,
    params: &Parameters<T>,
    batch: &Tensor<T>,
    labels: &[T],
    mode: Mode,
    rng: Option<&mut StreamRng>,
) -> Result<(T, Parameters<T>)> {
    let trace = forward_trace(spec, params, batch, mode, rng)?;
    let loss = bce_loss(&trace.probs, labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = backward_from_trace(spec, params, &trace, labels)?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::params::init_params;
    use crate::rng;

    fn batch(spec: &ModelSpec, n: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, "test/batch");
        let data = (0..n * spec.input_len()).map(|_| r.random::<f64>()).collect();
        Tensor::new(vec![n, spec.input_size, spec.input_size, 3], data).unwrap()
    }

    #[test]
    fn zero_params_give_half() {
        let spec = ModelSpec::default();
        let p = Parameters::<f32>::zeros(&spec);
        let x = batch(&spec, 3, 1);
        let x32 = Tensor::new(x.shape.clone(), x.data.iter().map(|&v| v as f32).collect()).unwrap();
        assert_eq!(forward(&spec, &p, &x32, Mode::Eval, None).unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn eval_forward_is_repeatable() {
        let spec = ModelSpec::default();
        let p: Parameters<f64> = init_params(&spec, 3);
        let x = batch(&spec, 4, 2);
        let a = forward(&spec, &p, &x, Mode::Eval, None).unwrap();
        assert_eq!(a, forward(&spec, &p, &x, Mode::Eval, None).unwrap());
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn hand_computed_conv_map() {
        // One block, single input channel emulated by putting the image in channel 0.
        let img: [f64; 16] = [1., 2., 0., 1., 0., 1., 3., 2., 2., 0., 1., 1., 1., 1., 0., 2.];
        let kernel: [f64; 9] = [0., 1., 0., 1., -4., 1., 0., 1., 0.];
        let mut x = vec![0.0; 16 * 3];
        for i in 0..16 {
            x[i * 3] = img[i];
        }
        let mut cols = Vec::new();
        im2col(&x, 1, 4, 3, &mut cols);
        // weight [3,3,3,1]: only input channel 0 is nonzero
        let mut w = vec![0.0; 27];
        for (t, &kv) in kernel.iter().enumerate() {
            w[t * 3] = kv;
        }
        let mut out = vec![0.0; 16];
        gemm(16, 27, 1, &cols, false, &w, false, &mut out, false);
        // Laplacian with zero padding, computed by hand:
        // out(y,x) = up + down + left + right - 4 * center
        let want = [
            -2., -6., 6., -2., //
            4., 1., -8., -3., //
            -7., 5., 0., 1., //
            -1., -3., 4., -7.,
        ];
        assert_eq!(out, want);
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.5f64], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&[0.5f64], &[0.0]).unwrap() - 0.693147).abs() < 1e-6);
        let l = bce_loss(&[1.0 - 1e-7f64], &[1.0]).unwrap();
        assert!((l - 1e-7).abs() < 1e-12);
        assert!((bce_loss(&[1.0f64], &[1.0]).unwrap() - 1e-7).abs() < 1e-12);
        let l = bce_loss(&[0.9f64, 0.2], &[0.0, 1.0]).unwrap();
        assert!((l - 1.956012).abs() < 1e-6, "{l}");
        assert!(bce_loss(&[0.5f64], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn train_mode_without_stream_is_rejected() {
        let spec = ModelSpec::with_channels(8, vec![2]);
        let p: Parameters<f64> = init_params(&spec, 1);
        assert!(forward(&spec, &p, &batch(&spec, 1, 1), Mode::Train, None).is_err());
        let bad = Tensor::<f64>::zeros(vec![1, 4, 4, 3]);
        assert!(matches!(forward(&spec, &p, &bad, Mode::Eval, None), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn non_finite_input_is_reported() {
        let spec = ModelSpec::with_channels(8, vec![2]);
        let p: Parameters<f64> = init_params(&spec, 1);
        let mut x = batch(&spec, 1, 1);
        x.data[5] = f64::NAN;
        assert!(matches!(forward(&spec, &p, &x, Mode::Eval, None), Err(Error::NonFinite(_))));
    }

    #[test]
    fn balanced_zero_network_has_zero_output_bias_grad() {
        let spec = ModelSpec::with_channels(8, vec![2]);
        let p = Parameters::<f64>::zeros(&spec);
        let (_, g) = backward(&spec, &p, &batch(&spec, 2, 4), &[0.0, 1.0], Mode::Eval, None).unwrap();
        assert_eq!(g.get("output.bias").unwrap().data, vec![0.0]);
    }

    #[test]
    fn duplicated_batch_keeps_gradients() {
        let spec = ModelSpec::with_channels(8, vec![2]);
        let p: Parameters<f64> = init_params(&spec, 9);
        let x = batch(&spec, 3, 5);
        let y = [1.0, 0.0, 1.0];
        let (l1, g1) = backward(&spec, &p, &x, &y, Mode::Eval, None).unwrap();
        let mut d = x.data.clone();
        d.extend_from_slice(&x.data);
        let x2 = Tensor::new(vec![6, 8, 8, 3], d).unwrap();
        let y2 = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let (l2, g2) = backward(&spec, &p, &x2, &y2, Mode::Eval, None).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.tensors.iter().zip(&g2.tensors) {
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()), "{}", a.name);
            }
        }
    }
}
