use proptest::prelude::*;
use slip_core::decompose::PlannedModel;
use slip_core::linalg::Matrix;
use slip_core::models::{attention_scores, conv_to_fc, forward_reference, toy_attention, toy_mlp, ConvSpec};
use slip_core::qforward::forward_reference_quantized;
use slip_core::ring::{dequantize, RingParams, MERSENNE_61};

/// Straight nested-loop convolution, stride 1, no padding.
fn direct_conv(s: &ConvSpec, x: &[f64], k: &[f64]) -> Vec<f64> {
    let (ho, wo) = (s.h - s.kh + 1, s.w - s.kw + 1);
    let mut out = vec![0.0; ho * wo * s.n];
    for i in 0..ho {
        for j in 0..wo {
            for n in 0..s.n {
                let mut acc = 0.0;
                for u in 0..s.kh {
                    for v in 0..s.kw {
                        for c in 0..s.c {
                            acc += x[((i + u) * s.w + (j + v)) * s.c + c] * k[((u * s.kw + v) * s.c + c) * s.n + n];
                        }
                    }
                }
                out[(i * wo + j) * s.n + n] = acc;
            }
        }
    }
    out
}

fn conv_case() -> impl Strategy<Value = (ConvSpec, Vec<f64>, Vec<f64>)> {
    (1usize..=8, 1usize..=8, 1usize..=3, 1usize..=3)
        .prop_flat_map(|(h, w, c, n)| (Just(h), Just(w), Just(c), Just(n), 1..=h, 1..=w))
        .prop_flat_map(|(h, w, c, n, kh, kw)| {
            let spec = ConvSpec { h, w, c, kh, kw, n };
            (
                Just(spec),
                prop::collection::vec(-1.0f64..1.0, h * w * c),
                prop::collection::vec(-1.0f64..1.0, kh * kw * c * n),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn conv_as_dense_layer((spec, x, k) in conv_case()) {
        let w = conv_to_fc(&spec, &k).unwrap();
        let got = w.matvec(&x);
        let want = direct_conv(&spec, &x, &k);
        prop_assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(q in prop::collection::vec(-3.0f64..3.0, 12), k in prop::collection::vec(-3.0f64..3.0, 12)) {
        let s = attention_scores(&q, &k, 4, 3);
        for i in 0..4 {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_commutes_with_token_permutation(seed in any::<u64>(), rot in 1usize..4) {
        let m = toy_attention(seed, 5, 4, 3, 4);
        let x = Matrix::from_fn(4, 5, |i, j| ((seed as usize % 97 + i * 5 + j) as f64 * 0.31).cos());
        let perm: Vec<usize> = (0..4).map(|i| (i + rot) % 4).collect();
        let xp = Matrix::from_fn(4, 5, |i, j| x[(perm[i], j)]);
        let y = forward_reference(&m, &x).unwrap();
        let yp = forward_reference(&m, &xp).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                prop_assert!((yp[(i, j)] - y[(perm[i], j)]).abs() < 1e-12);
            }
        }
    }
}

/// Interval-arithmetic bound on |quantized - float| for an MLP: input
/// rounding, weight rounding against the true activation plus the incoming
/// error, then output rounding; relu and identity are 1-Lipschitz.
fn error_bound(m: &slip_core::models::ModelParams, x: &[f64], scale: f64) -> f64 {
    let half = 0.5 / scale;
    let mut a = x.to_vec();
    let mut e = half;
    for l in &m.layers {
        let w = &l.weight;
        let a_l1: f64 = a.iter().map(|v| v.abs() + e).sum();
        e = w.max_row_l1() * e + half * a_l1 + half;
        let mut next = w.matvec(&a);
        if let Some(b) = &l.bias {
            next.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        l.activation.apply(&mut next);
        a = next;
    }
    e
}

#[test]
fn quantized_pass_converges_as_scale_grows() {
    for seed in 0..5 {
        let m = toy_mlp(seed, &[8, 8, 8, 4]);
        let p = PlannedModel::offload_all(m.clone());
        let x = Matrix::from_fn(1, 8, |_, j| ((seed as usize + j) as f64 * 0.7).sin());
        let f = forward_reference(&m, &x).unwrap();
        let dev = |scale: u64| {
            let ring = RingParams::new(MERSENNE_61, scale).unwrap();
            let q = dequantize(&forward_reference_quantized(&p, &x, &ring).unwrap(), &ring).unwrap();
            q.iter().zip(f.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        for bits in 4..20u32 {
            let s = (1u64 << bits) as f64;
            let (b1, b2) = (error_bound(&m, x.data(), s), error_bound(&m, x.data(), 2.0 * s));
            assert!(dev(1 << bits) <= b1, "seed {seed}, scale 2^{bits}");
            assert!(b2 <= b1 / 2.0 + 1e-15, "bound halves with each doubling");
        }
        assert!(dev(1 << 12) <= dev(1 << 4) / 64.0, "seed {seed}");
    }
}
