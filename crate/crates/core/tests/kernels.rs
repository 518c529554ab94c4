//! Layer kernels against direct-loop oracles, and finite-difference gradient
//! checks of every backward kernel in f64.

use decorre_core::gradcheck::{grad_check, grad_check_op};
use decorre_core::ops::{
    bce_with_logits, clip_grad_norm, conv2d, conv2d_backward, global_avg_pool, global_avg_pool_backward, linear,
    linear_backward, maxpool2d, maxpool2d_backward, relu, relu_backward, sgd_step, Padding,
};
use decorre_core::{LayerKind, LayerParams, Rng, Tensor};

const GRAD_POINTS: usize = 50;
const GRAD_TOL: f64 = 1e-3;
const EPS: f64 = 1e-6;

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform() * 2.0 - 1.0)
}

fn rand_tensor32(shape: &[usize], rng: &mut Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| (rng.uniform() * 2.0 - 1.0) as f32)
}

fn conv_params(out_c: usize, in_c: usize, k: usize, rng: &mut Rng) -> LayerParams<f64> {
    LayerParams::new(
        LayerKind::Conv2d,
        rand_tensor(&[out_c, in_c, k, k], rng),
        rand_tensor(&[out_c], rng),
    )
    .unwrap()
}

fn linear_params(out_f: usize, in_f: usize, rng: &mut Rng) -> LayerParams<f64> {
    LayerParams::new(
        LayerKind::Linear,
        rand_tensor(&[out_f, in_f], rng),
        rand_tensor(&[out_f], rng),
    )
    .unwrap()
}

/// Six nested loops with explicit zero padding.
fn naive_conv<T: decorre_core::tensor::Scalar>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    stride: usize,
    pad: (usize, usize),
    out_hw: (usize, usize),
) -> Vec<T> {
    let [b, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let [oc, _, kh, kw] = [p.weights.dim(0), p.weights.dim(1), p.weights.dim(2), p.weights.dim(3)];
    let (xd, wd, bd) = (x.data(), p.weights.data(), p.bias.data());
    let mut out = Vec::new();
    for n in 0..b {
        for o in 0..oc {
            for i in 0..out_hw.0 {
                for j in 0..out_hw.1 {
                    let mut acc = bd[o];
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let ih = (i * stride + u) as i64 - pad.0 as i64;
                                let iw = (j * stride + v) as i64 - pad.1 as i64;
                                let inside = ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w;
                                let xv = if inside {
                                    xd[((n * c + ci) * h + ih as usize) * w + iw as usize]
                                } else {
                                    T::zero()
                                };
                                acc = acc + wd[((o * c + ci) * kh + u) * kw + v] * xv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_valid_matches_direct_loops_bit_for_bit() {
    let mut rng = Rng::new(11);
    for &(b, c, h, w, oc, k) in &[
        (2, 1, 32, 32, 6, 5),
        (3, 6, 14, 14, 16, 5),
        (1, 3, 7, 9, 4, 3),
        (2, 2, 5, 5, 3, 5),
    ] {
        let x = rand_tensor32(&[b, c, h, w], &mut rng);
        let p = LayerParams::new(
            LayerKind::Conv2d,
            rand_tensor32(&[oc, c, k, k], &mut rng),
            rand_tensor32(&[oc], &mut rng),
        )
        .unwrap();
        let y = conv2d(&x, &p, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), [b, oc, h - k + 1, w - k + 1]);
        let expected = naive_conv(&x, &p, 1, (0, 0), (h - k + 1, w - k + 1));
        assert_eq!(y.data(), &expected[..], "shape {:?}", x.shape());
    }
}

#[test]
fn conv_same_and_strided_match_direct_loops() {
    let mut rng = Rng::new(12);
    for &(h, w, k, stride) in &[(8, 8, 3, 1), (7, 6, 5, 1), (9, 9, 3, 2), (8, 5, 4, 2)] {
        let x = rand_tensor(&[2, 3, h, w], &mut rng);
        let p = conv_params(4, 3, k, &mut rng);
        let y = conv2d(&x, &p, stride, Padding::Same).unwrap();
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        assert_eq!(y.shape(), [2, 4, oh, ow]);
        let pad_h = ((oh - 1) * stride + k).saturating_sub(h);
        let pad_w = ((ow - 1) * stride + k).saturating_sub(w);
        let expected = naive_conv(&x, &p, stride, (pad_h / 2, pad_w / 2), (oh, ow));
        for (a, e) in y.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }

        let y = conv2d(&x, &p, stride, Padding::Valid).unwrap();
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let expected = naive_conv(&x, &p, stride, (0, 0), (oh, ow));
        for (a, e) in y.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }
}

#[test]
fn maxpool_matches_direct_loops() {
    let mut rng = Rng::new(13);
    let x = rand_tensor(&[2, 3, 9, 8], &mut rng);
    let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
    assert_eq!(y.shape(), [2, 3, 4, 4]);
    let d = x.data();
    let mut k = 0;
    for plane in 0..6 {
        for i in 0..4 {
            for j in 0..4 {
                let idx = (0..2)
                    .flat_map(|u| (0..2).map(move |v| plane * 72 + (2 * i + u) * 8 + 2 * j + v))
                    .max_by(|&a, &b| d[a].total_cmp(&d[b]))
                    .unwrap();
                assert_eq!(y.data()[k], d[idx]);
                assert_eq!(arg[k], idx);
                k += 1;
            }
        }
    }
}

#[test]
fn maxpool_tie_routes_gradient_to_first_maximum() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0f64, 3.0, 3.0, 0.0]).unwrap();
    let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
    assert_eq!(y.data(), [3.0]);
    let dx = maxpool2d_backward(x.shape(), &arg, &Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap()).unwrap();
    assert_eq!(dx.data(), [0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn linear_matches_direct_loops_bit_for_bit() {
    let mut rng = Rng::new(14);
    for &(b, fi, fo) in &[(1, 1, 1), (4, 400, 120), (7, 84, 1), (32, 120, 84)] {
        let x = rand_tensor32(&[b, fi], &mut rng);
        let p = LayerParams::new(
            LayerKind::Linear,
            rand_tensor32(&[fo, fi], &mut rng),
            rand_tensor32(&[fo], &mut rng),
        )
        .unwrap();
        let y = linear(&x, &p).unwrap();
        let mut expected = Vec::new();
        for n in 0..b {
            for o in 0..fo {
                let mut acc = p.bias.data()[o];
                for i in 0..fi {
                    acc += x.data()[n * fi + i] * p.weights.data()[o * fi + i];
                }
                expected.push(acc);
            }
        }
        assert_eq!(y.data(), &expected[..]);
    }
}

#[test]
fn global_avg_pool_and_bce_match_formulas() {
    let mut rng = Rng::new(15);
    let x = rand_tensor(&[3, 4, 5, 6], &mut rng);
    let y = global_avg_pool(&x).unwrap();
    for (plane, v) in x.data().chunks(30).zip(y.data()) {
        assert!((plane.iter().sum::<f64>() / 30.0 - v).abs() < 1e-15);
    }

    let logits = Tensor::new(&[4], vec![-40.0f64, -0.5, 0.0, 3.0]).unwrap();
    let labels = Tensor::new(&[4], vec![1.0f64, 0.0, 1.0, 1.0]).unwrap();
    let (loss, _) = bce_with_logits(&logits, &labels).unwrap();
    let naive: f64 = logits
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&z, &y)| {
            let s = 1.0 / (1.0 + (-z).exp());
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum::<f64>()
        / 4.0;
    assert!((loss - naive).abs() < 1e-12, "{loss} vs {naive}");
}

#[test]
fn sgd_step_example_and_missing_gradient() {
    let mut p = LayerParams::new(
        LayerKind::Linear,
        Tensor::new(&[1, 1], vec![1.0f64]).unwrap(),
        Tensor::new(&[1], vec![0.0f64]).unwrap(),
    )
    .unwrap();
    assert!(sgd_step(&mut [&mut p], 0.1).is_err());
    p.weights.set_grad(vec![0.5]).unwrap();
    p.bias.set_grad(vec![0.0]).unwrap();
    sgd_step(&mut [&mut p], 0.1).unwrap();
    assert!((p.weights.data()[0] - 0.95).abs() < 1e-15);
    assert_eq!(p.weights.grad(), Some(&[0.0][..]));
}

#[test]
fn clip_grad_norm_rescales_jointly() {
    let param = |w: Vec<f64>, b: f64| {
        let mut p = LayerParams::new(
            LayerKind::Linear,
            Tensor::new(&[1, w.len()], vec![0.0; w.len()]).unwrap(),
            Tensor::new(&[1], vec![0.0]).unwrap(),
        )
        .unwrap();
        p.weights.set_grad(w).unwrap();
        p.bias.set_grad(vec![b]).unwrap();
        p
    };
    // joint gradient (3, 0, 4, 12): norm 13
    let (mut a, mut b) = (param(vec![3.0, 0.0], 4.0), param(vec![12.0], 0.0));
    let norm = clip_grad_norm(&mut [&mut a, &mut b], 6.5).unwrap();
    assert_eq!(norm, 13.0);
    assert_eq!(a.weights.grad(), Some(&[1.5, 0.0][..]));
    assert_eq!(a.bias.grad(), Some(&[2.0][..]));
    assert_eq!(b.weights.grad(), Some(&[6.0][..]));
    // below the bound nothing changes
    assert_eq!(clip_grad_norm(&mut [&mut a, &mut b], 100.0).unwrap(), 6.5);
    assert_eq!(b.weights.grad(), Some(&[6.0][..]));
}

fn worst(errors: impl Iterator<Item = f64>) -> f64 {
    errors.fold(0.0, f64::max)
}

#[test]
fn conv_gradients_pass_finite_differences() {
    let mut rng = Rng::new(21);
    let configs = [
        (1usize, Padding::Valid, 3usize),
        (1, Padding::Same, 3),
        (2, Padding::Same, 3),
        (1, Padding::Valid, 5),
    ];
    let err = worst((0..GRAD_POINTS).flat_map(|i| {
        let (stride, padding, k) = configs[i % configs.len()];
        let x = rand_tensor(&[2, 2, 7, 7], &mut rng);
        let p = conv_params(3, 2, k, &mut rng);
        let dx = grad_check_op(
            |x| conv2d(x, &p, stride, padding).unwrap(),
            |x, g| conv2d_backward(x, &p, g, stride, padding).unwrap().input.unwrap(),
            &x,
            EPS,
            &mut rng,
        );
        let with_w = |w: &Tensor<f64>| LayerParams::new(LayerKind::Conv2d, w.clone(), p.bias.clone()).unwrap();
        let dw = grad_check_op(
            |w| conv2d(&x, &with_w(w), stride, padding).unwrap(),
            |w, g| conv2d_backward(&x, &with_w(w), g, stride, padding).unwrap().weights,
            &p.weights,
            EPS,
            &mut rng,
        );
        let with_b = |b: &Tensor<f64>| LayerParams::new(LayerKind::Conv2d, p.weights.clone(), b.clone()).unwrap();
        let db = grad_check_op(
            |b| conv2d(&x, &with_b(b), stride, padding).unwrap(),
            |b, g| conv2d_backward(&x, &with_b(b), g, stride, padding).unwrap().bias,
            &p.bias,
            EPS,
            &mut rng,
        );
        [dx, dw, db]
    }));
    assert!(err < GRAD_TOL, "max relative error {err}");
}

#[test]
fn linear_gradients_pass_finite_differences() {
    let mut rng = Rng::new(22);
    let err = worst((0..GRAD_POINTS).flat_map(|_| {
        let x = rand_tensor(&[3, 6], &mut rng);
        let p = linear_params(4, 6, &mut rng);
        let dx = grad_check_op(
            |x| linear(x, &p).unwrap(),
            |x, g| linear_backward(x, &p, g).unwrap().input,
            &x,
            EPS,
            &mut rng,
        );
        let with_w = |w: &Tensor<f64>| LayerParams::new(LayerKind::Linear, w.clone(), p.bias.clone()).unwrap();
        let dw = grad_check_op(
            |w| linear(&x, &with_w(w)).unwrap(),
            |w, g| linear_backward(&x, &with_w(w), g).unwrap().weights,
            &p.weights,
            EPS,
            &mut rng,
        );
        let with_b = |b: &Tensor<f64>| LayerParams::new(LayerKind::Linear, p.weights.clone(), b.clone()).unwrap();
        let db = grad_check_op(
            |b| linear(&x, &with_b(b)).unwrap(),
            |b, g| linear_backward(&x, &with_b(b), g).unwrap().bias,
            &p.bias,
            EPS,
            &mut rng,
        );
        [dx, dw, db]
    }));
    assert!(err < GRAD_TOL, "max relative error {err}");
}

#[test]
fn relu_gradient_passes_finite_differences_away_from_kink() {
    let mut rng = Rng::new(23);
    let err = worst((0..GRAD_POINTS).map(|_| {
        // keep every coordinate at least 1e-2 from zero, far outside the probe
        let x = Tensor::from_fn(&[4, 5], |_| {
            let v = rng.uniform() * 2.0 - 1.0;
            v.signum() * (v.abs() + 1e-2)
        });
        grad_check_op(relu, |x, g| relu_backward(x, g).unwrap(), &x, EPS, &mut rng)
    }));
    assert!(err < GRAD_TOL, "max relative error {err}");
}

#[test]
fn maxpool_gradient_passes_finite_differences_without_ties() {
    let mut rng = Rng::new(24);
    let err = worst((0..GRAD_POINTS).map(|_| {
        // distinct values on a 0.01 grid, so no window has a near tie
        let mut values: Vec<f64> = (0..2 * 2 * 6 * 6).map(|i| i as f64 * 0.01).collect();
        rng.shuffle(&mut values);
        let x = Tensor::new(&[2, 2, 6, 6], values).unwrap();
        grad_check_op(
            |x| maxpool2d(x, 2, 2).unwrap().0,
            |x, g| {
                let (_, arg) = maxpool2d(x, 2, 2).unwrap();
                maxpool2d_backward(x.shape(), &arg, g).unwrap()
            },
            &x,
            EPS,
            &mut rng,
        )
    }));
    assert!(err < GRAD_TOL, "max relative error {err}");
}

#[test]
fn global_avg_pool_gradient_passes_finite_differences() {
    let mut rng = Rng::new(25);
    let err = worst((0..GRAD_POINTS).map(|_| {
        let x = rand_tensor(&[2, 3, 4, 5], &mut rng);
        grad_check_op(
            |x| global_avg_pool(x).unwrap(),
            |x, g| global_avg_pool_backward(x.shape(), g).unwrap(),
            &x,
            EPS,
            &mut rng,
        )
    }));
    assert!(err < GRAD_TOL, "max relative error {err}");
}

#[test]
fn bce_gradient_passes_finite_differences() {
    let mut rng = Rng::new(26);
    let err = worst((0..GRAD_POINTS).map(|_| {
        let z: Vec<f64> = (0..8).map(|_| rng.uniform() * 8.0 - 4.0).collect();
        let labels = Tensor::new(&[8], (0..8).map(|_| f64::from(u8::from(rng.bernoulli(0.5)))).collect()).unwrap();
        let (_, grad) = bce_with_logits(&Tensor::new(&[8], z.clone()).unwrap(), &labels).unwrap();
        let loss = |v: &[f64]| {
            bce_with_logits(&Tensor::new(&[8], v.to_vec()).unwrap(), &labels)
                .unwrap()
                .0
        };
        grad_check(loss, &z, grad.data(), EPS)
    }));
    assert!(err < GRAD_TOL, "max relative error {err}");
}

#[test]
fn stacked_layers_pass_finite_differences() {
    // conv -> relu -> pool -> flatten -> linear -> bce, input gradient
    let mut rng = Rng::new(27);
    let conv = conv_params(3, 1, 3, &mut rng);
    let fc = linear_params(1, 3 * 3 * 3, &mut rng);
    let labels = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
    let forward = |x: &Tensor<f64>| {
        let c = conv2d(x, &conv, 1, Padding::Valid).unwrap();
        let (p, _) = maxpool2d(&relu(&c), 2, 2).unwrap();
        let f = p.reshape(&[2, 27]).unwrap();
        linear(&f, &fc).unwrap().reshape(&[2]).unwrap()
    };
    let err = worst((0..GRAD_POINTS).map(|_| {
        let x = rand_tensor(&[2, 1, 8, 8], &mut rng);
        let c = conv2d(&x, &conv, 1, Padding::Valid).unwrap();
        let r = relu(&c);
        let (p, arg) = maxpool2d(&r, 2, 2).unwrap();
        let f = p.clone().reshape(&[2, 27]).unwrap();
        let z = linear(&f, &fc).unwrap().reshape(&[2]).unwrap();
        let (_, dz) = bce_with_logits(&z, &labels).unwrap();
        let df = linear_backward(&f, &fc, &dz.reshape(&[2, 1]).unwrap()).unwrap().input;
        let dp = df.reshape(p.shape()).unwrap();
        let dr = maxpool2d_backward(r.shape(), &arg, &dp).unwrap();
        let dc = relu_backward(&c, &dr).unwrap();
        let dx = conv2d_backward(&x, &conv, &dc, 1, Padding::Valid)
            .unwrap()
            .input
            .unwrap();
        let loss = |v: &[f64]| {
            let xt = Tensor::new(x.shape(), v.to_vec()).unwrap();
            bce_with_logits(&forward(&xt), &labels).unwrap().0
        };
        grad_check(loss, x.data(), dx.data(), EPS)
    }));
    assert!(err < GRAD_TOL, "max relative error {err}");
}
