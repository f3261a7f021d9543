use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use slidexfer::nnet::{
    adam_step, backward, conv_features, forward, forward_trace, init_params, predict_dataset, train,
    transfer_conv_weights, AdamState, Checkpoint, Mode, ModelSpec, Parameters, Provenance, Section, Tensor,
    TileDataset, TrainConfig,
};
use slidexfer::raster::RasterImage;
use slidexfer::{rng, Exec};

fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> Tensor<f64> {
    let mut r = Xoshiro256StarStar::seed_from_u64(seed);
    let len = n * spec.input_len();
    Tensor::new(vec![n, spec.input_size, spec.input_size, 3], (0..len).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn loss_at(spec: &ModelSpec, p: &Parameters<f64>, x: &Tensor<f64>, y: &[f64]) -> f64 {
    backward(spec, p, x, y, Mode::Eval, None).unwrap().0
}

/// Worst relative error over every component of every tensor.
fn worst_gradient_error(spec: &ModelSpec, seed: u64) -> Vec<(String, f64)> {
    let params: Parameters<f64> = init_params(spec, seed);
    let x = random_batch(spec, 3, seed + 100);
    let y = [1.0, 0.0, 1.0];
    let (_, grads) = backward(spec, &params, &x, &y, Mode::Eval, None).unwrap();
    let h = 1e-5;
    let mut out = Vec::new();
    for (ti, t) in params.tensors.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..t.data.len() {
            let mut p = params.clone();
            p.tensors[ti].data[i] = t.data[i] + h;
            let up = loss_at(spec, &p, &x, &y);
            p.tensors[ti].data[i] = t.data[i] - h;
            let down = loss_at(spec, &p, &x, &y);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.tensors[ti].data[i];
            let scale = analytic.abs().max(numeric.abs());
            let err = if scale < 1e-8 { (analytic - numeric).abs() } else { (analytic - numeric).abs() / scale };
            worst = worst.max(err);
        }
        out.push((t.name.clone(), worst));
    }
    out
}

#[test]
fn gradients_match_central_differences() {
    let mut spec = ModelSpec::with_channels(8, vec![2]);
    spec.dropout_rate = 0.0;
    for (name, err) in worst_gradient_error(&spec, 4) {
        assert!(err < 1e-4, "{name}: relative error {err:.3e}");
    }
}

#[test]
fn dropout_is_unbiased_in_expectation() {
    let spec = ModelSpec::with_channels(8, vec![2]);
    let params: Parameters<f64> = init_params(&spec, 9);
    let x = random_batch(&spec, 1, 1);
    let eval = forward_trace(&spec, &params, &x, Mode::Eval, None).unwrap().hidden1;
    let mut stream = rng::stream(5, "test/dropout");
    let mut sum = vec![0.0; eval.len()];
    let passes = 10_000;
    for _ in 0..passes {
        let t = forward_trace(&spec, &params, &x, Mode::Train, Some(&mut stream)).unwrap();
        for (s, v) in sum.iter_mut().zip(&t.hidden1) {
            *s += v;
        }
    }
    let diff: f64 = sum.iter().zip(&eval).map(|(s, e)| (s / passes as f64 - e).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = eval.iter().map(|e| e * e).sum::<f64>().sqrt();
    assert!(norm > 0.0);
    assert!(diff / norm < 0.05, "relative error {}", diff / norm);
}

#[test]
fn dropout_only_in_train_mode() {
    let spec = ModelSpec::with_channels(8, vec![2]);
    let params: Parameters<f64> = init_params(&spec, 3);
    let x = random_batch(&spec, 2, 2);
    let a = forward(&spec, &params, &x, Mode::Eval, None).unwrap();
    let mut s = rng::stream(1, "x");
    let b = forward(&spec, &params, &x, Mode::Eval, Some(&mut s)).unwrap();
    assert_eq!(a, b);
    let t = forward_trace(&spec, &params, &x, Mode::Train, Some(&mut s)).unwrap();
    let zeros = t.hidden1.iter().filter(|&&v| v == 0.0).count();
    assert!(zeros as f64 > 0.7 * t.hidden1.len() as f64);
}

fn checkpoint(spec: &ModelSpec, seed: u64) -> Checkpoint {
    Checkpoint {
        spec: spec.clone(),
        params: init_params(spec, seed),
        epoch: 3,
        val_loss: 0.25,
        provenance: Provenance::Pretrain,
        source_digest: None,
    }
}

#[test]
fn transfer_copies_conv_and_reinitializes_dense() {
    let spec = ModelSpec::default();
    let src = checkpoint(&spec, 21);
    let dst = transfer_conv_weights(&src, &spec, 99).unwrap();
    let fresh: Parameters<f32> = init_params(&spec, 99);
    for ((d, s), f) in dst.tensors.iter().zip(&src.params.tensors).zip(&fresh.tensors) {
        match d.section {
            Section::Conv => assert_eq!(d.data, s.data, "{}", d.name),
            Section::Dense => {
                assert_eq!(d.data, f.data, "{}", d.name);
                if !d.name.ends_with(".bias") {
                    assert_ne!(d.data, s.data, "{}", d.name);
                }
            }
        }
    }
    let mut r = Xoshiro256StarStar::seed_from_u64(8);
    for _ in 0..100 {
        let x: Vec<f32> = (0..spec.input_len()).map(|_| r.random::<f32>()).collect();
        let x = Tensor::new(vec![1, spec.input_size, spec.input_size, 3], x).unwrap();
        let a = conv_features(&spec, &src.params, &x).unwrap();
        let b = conv_features(&spec, &dst, &x).unwrap();
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn transfer_rejects_mismatched_conv_shapes() {
    let src = checkpoint(&ModelSpec::with_channels(32, vec![8, 16, 32]), 1);
    let err = transfer_conv_weights(&src, &ModelSpec::with_channels(32, vec![8, 12, 32]), 1).unwrap_err();
    assert!(err.to_string().contains("conv block 2"), "{err}");
}

/// Independent scalar Adam, written from the textbook update.
fn reference_adam(theta: &mut [f64], grads: &[Vec<f64>], lr: f64) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            theta[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[test]
fn adam_matches_reference_trajectory() {
    let spec = ModelSpec::with_channels(8, vec![2]);
    let mut params: Parameters<f64> = init_params(&spec, 2);
    let mut flat: Vec<f64> = params.tensors.iter().flat_map(|t| t.data.clone()).collect();
    let mut r = Xoshiro256StarStar::seed_from_u64(77);
    let steps: Vec<Parameters<f64>> = (0..5)
        .map(|_| {
            let mut g = params.zeros_like();
            for t in &mut g.tensors {
                t.data.iter_mut().for_each(|v| *v = r.random::<f64>() * 2.0 - 1.0);
            }
            g
        })
        .collect();
    let mut state = AdamState::new(&params, 1e-3);
    for g in &steps {
        adam_step(&mut params, g, &mut state).unwrap();
    }
    let flat_grads: Vec<Vec<f64>> = steps.iter().map(|g| g.tensors.iter().flat_map(|t| t.data.clone()).collect()).collect();
    reference_adam(&mut flat, &flat_grads, 1e-3);
    let ours: Vec<f64> = params.tensors.iter().flat_map(|t| t.data.clone()).collect();
    let worst = ours.iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-10, "max deviation {worst:e}");
}

/// Left half bright for positives, right half bright for negatives.
fn separable_set(n: usize, size: usize, seed: u64) -> TileDataset {
    let mut r = Xoshiro256StarStar::seed_from_u64(seed);
    let mut d = TileDataset::new(size);
    for i in 0..n {
        let pos = i % 2 == 0;
        let mut img = RasterImage::filled(size, size, [0, 0, 0]);
        for y in 0..size {
            for x in 0..size {
                let bright = (x < size / 2) == pos;
                let base: u8 = if bright { 200 } else { 60 };
                let v = base.saturating_add(r.random_range(0..30));
                img.set_pixel(x, y, [v, v / 2, v]);
            }
        }
        d.push_tile(&img, if pos { 1.0 } else { 0.0 }).unwrap();
    }
    d
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let spec = ModelSpec::with_channels(8, vec![4]);
    let tr = separable_set(64, 8, 1);
    let va = separable_set(16, 8, 2);
    let cfg = TrainConfig { epochs: 50, batch_size: 16, lr: 1e-3, seed: 3, ..TrainConfig::default() };
    let a = train(&spec, init_params(&spec, 3), &tr, &va, &cfg).unwrap();
    let b = train(&spec, init_params(&spec, 3), &tr, &va, &cfg).unwrap();
    assert_eq!(a.checkpoint.digest().unwrap(), b.checkpoint.digest().unwrap());
    let first = a.history.first().unwrap().train_loss;
    let last = a.history.last().unwrap().train_loss;
    assert!(last < first, "train loss {first} -> {last}");
    let scores = predict_dataset(&spec, &a.checkpoint.params, &va, Exec::Sequential).unwrap();
    assert_eq!(scores, predict_dataset(&spec, &a.checkpoint.params, &va, Exec::Parallel).unwrap());
}
