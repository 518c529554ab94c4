use decorre_core::decorre::{
    correlation_unit, decorre_backward, decorre_forward, dropout_keep_prob, filter_factor, filter_sigmoid,
    pearson_corr, FilterDecision, DEFAULT_EPS,
};
use decorre_core::ops::{bce_with_logits, linear, linear_backward};
use decorre_core::{DecorreConfig, FilterMode, LayerKind, LayerParams, Rng, Tensor};
use proptest::prelude::*;

/// Direct formula `sum(dx dy) / sqrt(sum(dx^2) sum(dy^2))` in f64.
fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn varied(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    len.prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )
    })
    .prop_filter("needs spread", |(x, y)| spread(x) > 1e-3 && spread(y) > 1e-3)
}

fn spread(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0)
}

proptest! {
    #[test]
    fn pearson_matches_oracle_and_is_bounded((x, y) in varied(2..=64)) {
        let r = pearson_corr(&x, &y, DEFAULT_EPS).unwrap();
        prop_assert!((r - pearson_oracle(&x, &y)).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn pearson_affine_invariance_and_sign_flip(
        (x, y) in varied(3..=64),
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let r = pearson_corr(&x, &y, DEFAULT_EPS).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let flipped: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
        prop_assert!((pearson_corr(&scaled, &y, DEFAULT_EPS).unwrap() - r).abs() < 1e-9);
        prop_assert!((pearson_corr(&flipped, &y, DEFAULT_EPS).unwrap() + r).abs() < 1e-9);
        prop_assert!((pearson_corr(&y, &x, DEFAULT_EPS).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn pearson_of_constant_input_is_exactly_zero(c in -5.0f64..5.0, y in prop::collection::vec(-1.0f64..1.0, 2..32)) {
        let x = vec![c; y.len()];
        prop_assert_eq!(pearson_corr(&x, &y, DEFAULT_EPS).unwrap(), 0.0);
        prop_assert_eq!(pearson_corr(&y, &x, DEFAULT_EPS).unwrap(), 0.0);
    }

    #[test]
    fn filters_are_non_increasing_and_bounded(
        d1 in -1.0f64..1.0,
        d2 in -1.0f64..1.0,
        t in 0.0f64..1.0,
        c in 0.0f64..1.0,
        m in 0.0f64..1.0,
        a in 0.0f64..1.0,
        s in 0.5f64..100.0,
        g in 0.05f64..1.0,
    ) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(filter_factor(lo, t, c) >= filter_factor(hi, t, c));
        prop_assert!(filter_sigmoid(lo, m, a, s) >= filter_sigmoid(hi, m, a, s));
        prop_assert!(dropout_keep_prob(lo, g) >= dropout_keep_prob(hi, g));
        for d in [lo, hi] {
            let f = filter_sigmoid(d, m, a, s);
            prop_assert!(f >= a - 1e-15 && f <= 1.0 + 1e-15);
            let p = dropout_keep_prob(d, g);
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!(filter_factor(d, t, c) == c || filter_factor(d, t, c) == 1.0);
        }
    }

    #[test]
    fn keep_prob_is_one_for_negative_and_zero_past_guarantee(d in -1.0f64..=0.0, e in 0.0f64..1.0, g in 0.05f64..1.0) {
        prop_assert_eq!(dropout_keep_prob(d, g), 1.0);
        prop_assert_eq!(dropout_keep_prob(g + e, g), 0.0);
        if e < g {
            prop_assert!((dropout_keep_prob(e, g) - (1.0 - e / g)).abs() < 1e-12);
        }
    }
}

#[test]
fn pearson_oracle_on_a_thousand_pairs() {
    let mut rng = Rng::new(31);
    for _ in 0..1000 {
        let n = rng.int_inclusive(2, 64) as usize;
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v + rng.normal()).collect();
        let r = pearson_corr(&x, &y, DEFAULT_EPS).unwrap();
        assert!((r - pearson_oracle(&x, &y)).abs() < 1e-9);
    }
}

#[test]
fn near_constant_input_counts_as_degenerate() {
    let x = [1.0, 1.0 + 1e-6, 1.0 - 1e-6, 1.0];
    assert_eq!(pearson_corr(&x, &[0.0, 1.0, 2.0, 3.0], DEFAULT_EPS).unwrap(), 0.0);
}

#[test]
fn anchored_filter_values() {
    assert!((filter_sigmoid(0.5, 0.5, 0.01, 30.0) - 0.505).abs() < 1e-12);
    assert_eq!(dropout_keep_prob(0.3, 0.3), 0.0);
    assert_eq!(dropout_keep_prob(0.45, 0.3), 0.0);
    assert_eq!(filter_factor(0.5, 0.5, 0.2), 0.2);
    assert_eq!(filter_factor(0.49, 0.5, 0.2), 1.0);
}

#[test]
fn dropout_keep_frequency_matches_probability() {
    let ds = [-0.2, 0.15, 0.29, 0.45];
    let draws = 10_000;
    let mode = FilterMode::Dropout { guarantee: 0.3 };
    let decision = FilterDecision::decide(&ds, draws, &mode, &mut Rng::new(32));
    let FilterDecision::Mask { keep, features, .. } = decision else {
        panic!("dropout yields a mask");
    };
    for (f, &d) in ds.iter().enumerate() {
        let kept = (0..draws).filter(|&b| keep[b * features + f]).count() as f64;
        let p = dropout_keep_prob(d, 0.3);
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((kept - draws as f64 * p).abs() <= 4.0 * sd, "d={d}: kept {kept}, p={p}");
    }
}

#[test]
fn dropout_output_has_expected_mean_without_rescaling() {
    let cfg = DecorreConfig::dropout(0.3);
    let mut rng = Rng::new(33);
    let b = 4000;
    // ROI feature 0 copies the control region (d = 1, always dropped),
    // feature 1 is independent of it (d close to 0, nearly always kept).
    let cr = Tensor::from_fn(&[b, 2], |_| rng.normal() as f32);
    let roi = Tensor::from_fn(&[b, 2], |i| {
        if i % 2 == 0 {
            cr.data()[i]
        } else {
            2.0 + rng.normal() as f32
        }
    });
    let (out, rec) = decorre_forward(&roi, &cr, &cfg, &mut rng, true).unwrap();
    assert!((rec.correlations[0] - 1.0).abs() < 1e-9);
    assert!(rec.correlations[1].abs() < 0.1);
    let col = |t: &Tensor, f: usize| {
        t.data()
            .iter()
            .skip(f)
            .step_by(2)
            .map(|&v| v as f64)
            .collect::<Vec<_>>()
    };
    assert!(col(&out, 0).iter().all(|&v| v == 0.0));
    let kept = col(&out, 1);
    let p = dropout_keep_prob(rec.correlations[1], 0.3);
    let mean_in = col(&roi, 1).iter().sum::<f64>() / b as f64;
    let mean_out = kept.iter().sum::<f64>() / b as f64;
    assert!((mean_out - p * mean_in).abs() < 0.05, "{mean_out} vs {}", p * mean_in);
    for (o, i) in kept.iter().zip(col(&roi, 1)) {
        assert!(*o == 0.0 || *o == i, "kept values are not rescaled");
    }
}

#[test]
fn correlation_unit_examples() {
    let cfg = DecorreConfig::default();
    let mut rng = Rng::new(34);
    let x = Tensor::from_fn(&[256, 3], |_| rng.normal() as f32);
    let rec = correlation_unit(&x, &x, &cfg).unwrap();
    assert!(rec.correlations.iter().all(|&d| (d - 1.0).abs() < 1e-9));

    let y = Tensor::from_fn(&[256, 3], |_| rng.normal() as f32);
    let rec = correlation_unit(&x, &y, &cfg).unwrap();
    assert!(rec.mean().unwrap().abs() < 0.1);

    // spatial inputs are compared on their channel means
    let a = Tensor::from_fn(&[64, 2, 3, 3], |_| rng.normal() as f32);
    let b = Tensor::from_fn(&[64, 2, 3, 3], |i| 3.0 * a.data()[i] + 1.0);
    let rec = correlation_unit(&a, &b, &cfg).unwrap();
    assert_eq!(rec.correlations.len(), 2);
    assert!(rec.correlations.iter().all(|&d| (d - 1.0).abs() < 1e-6));
}

#[test]
fn inference_and_backward_are_bit_exact_identities() {
    let mut rng = Rng::new(35);
    let cfg = DecorreConfig::dropout(0.3);
    let x = Tensor::from_fn(&[8, 4, 2, 2], |_| rng.normal() as f32);
    let (y, rec) = decorre_forward(&x, &x, &cfg, &mut rng, false).unwrap();
    assert_eq!(y, x);
    assert!(rec.is_empty());
    let g = Tensor::from_fn(&[8, 4, 2, 2], |_| rng.normal() as f32);
    assert_eq!(decorre_backward(&g).data(), g.data());
}

/// `z = w2 * filter(w1 * x)` with BCE on `z`. Both weights scalar, biases zero.
#[test]
fn two_parameter_chain_rule_uses_identity_jacobian() {
    let (w1, w2) = (0.7f32, -1.3f32);
    let (c, t) = (0.25, 0.5);
    let cfg = DecorreConfig::factor(t, c);
    let scalar_layer = |w: f32| {
        LayerParams::new(
            LayerKind::Linear,
            Tensor::new(&[1, 1], vec![w]).unwrap(),
            Tensor::new(&[1], vec![0.0]).unwrap(),
        )
        .unwrap()
    };
    let (l1, l2) = (scalar_layer(w1), scalar_layer(w2));
    let xs = [0.5f32, -1.0, 2.0, 1.5];
    let ys = [1.0f32, 0.0, 1.0, 0.0];
    let x = Tensor::new(&[4, 1], xs.to_vec()).unwrap();
    let labels = Tensor::new(&[4], ys.to_vec()).unwrap();

    let h = linear(&x, &l1).unwrap();
    // control region equals the ROI feature: d = 1 >= t, so Factor scales by c
    let (hf, rec) = decorre_forward(&h, &h, &cfg, &mut Rng::new(0), true).unwrap();
    assert!((rec.correlations[0] - 1.0).abs() < 1e-9);
    let z = linear(&hf, &l2).unwrap();
    let (_, dz) = bce_with_logits(&z.clone().reshape(&[4]).unwrap(), &labels).unwrap();
    let g2 = linear_backward(&hf, &l2, &dz.clone().reshape(&[4, 1]).unwrap()).unwrap();
    let g1 = linear_backward(&x, &l1, &decorre_backward(&g2.input)).unwrap();

    // by hand: dL/dz_i = (s(z_i) - y_i) / 4, z_i = w2 c w1 x_i
    let (mut dw1, mut dw2) = (0.0f64, 0.0f64);
    for (&xi, &yi) in xs.iter().zip(&ys) {
        let zi = f64::from(w2) * c * f64::from(w1) * f64::from(xi);
        let dzi = (1.0 / (1.0 + (-zi).exp()) - f64::from(yi)) / 4.0;
        dw2 += dzi * c * f64::from(w1) * f64::from(xi);
        // identity Jacobian at the filter: the factor c is not applied here
        dw1 += dzi * f64::from(w2) * f64::from(xi);
    }
    assert!((f64::from(g2.weights.data()[0]) - dw2).abs() < 1e-6);
    assert!((f64::from(g1.weights.data()[0]) - dw1).abs() < 1e-6);
}

#[test]
fn spatial_mask_zeroes_whole_channels() {
    let x = Tensor::from_fn(&[3, 2, 2, 2], |i| i as f32 + 1.0);
    let keep = vec![true, false, false, true, true, true];
    let decision = FilterDecision::Mask {
        batch: 3,
        features: 2,
        keep: keep.clone(),
    };
    let y = decision.apply(&x);
    for b in 0..3 {
        for c in 0..2 {
            let plane = &y.data()[(b * 2 + c) * 4..(b * 2 + c + 1) * 4];
            let src = &x.data()[(b * 2 + c) * 4..(b * 2 + c + 1) * 4];
            assert_eq!(plane, if keep[b * 2 + c] { src.to_vec() } else { vec![0.0; 4] });
        }
    }
}
