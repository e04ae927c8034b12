use proptest::prelude::*;
use slip_core::costmodel::{flops_breakdown, phase_table, ModelShape, Side};
use slip_core::decompose::{plan_decomposition, LayerType, SplitPlan, Triplet};
use slip_core::linalg::Matrix;
use slip_core::models::{toy_attention, toy_mlp, ModelParams};
use slip_core::protocol::{build_parties, run_hybrid, run_mlp_hybrid, ProtocolError, SecurityMode};
use slip_core::qforward::forward_reference_quantized;
use slip_core::ring::RingParams;

fn mlp_case() -> impl Strategy<Value = (u64, Vec<usize>, Vec<bool>, usize, Vec<f64>)> {
    (prop::collection::vec(2usize..=24, 2..=5), any::<u64>()).prop_flat_map(|(dims, seed)| {
        let layers = dims.len() - 1;
        let d0 = dims[0];
        (
            Just(seed),
            Just(dims),
            prop::collection::vec(any::<bool>(), layers),
            2usize..=4,
            prop::collection::vec(-2.0f64..2.0, d0),
        )
    })
}

fn plan_for(m: &ModelParams, split: &[bool], k: usize) -> SplitPlan {
    let t = m
        .layers
        .iter()
        .zip(split)
        .filter(|(l, &s)| s && l.in_dim().min(l.out_dim()) >= k)
        .map(|(l, _)| Triplet { block: l.id.block, layer_type: LayerType::Generic, k })
        .collect();
    SplitPlan::new(t).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mlp_hybrid_equals_quantized_reference((seed, dims, split, k, x) in mlp_case()) {
        let m = toy_mlp(seed, &dims);
        let p = plan_decomposition(&m, &plan_for(&m, &split, k)).unwrap();
        let ring = RingParams::default();
        let (mut c, mut d) = build_parties(&p, ring, seed, 0, SecurityMode::Secure).unwrap();
        c.precompute(1);
        let run = run_mlp_hybrid(&mut c, &mut d, 0, &x).unwrap();
        let xm = Matrix::from_vec(1, x.len(), x).unwrap();
        prop_assert_eq!(run.output, forward_reference_quantized(&p, &xm, &ring).unwrap());
        prop_assert_eq!(c.pool_len(), 0);
    }

    #[test]
    fn attention_hybrid_equals_quantized_reference(
        seed in any::<u64>(),
        d in 2usize..=12,
        tokens in 1usize..=6,
        mask in 0u8..16,
    ) {
        let m = toy_attention(seed, d, d, d, 6);
        let types = [LayerType::AttnQ, LayerType::AttnK, LayerType::AttnV, LayerType::AttnO];
        let t = types
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &lt)| Triplet { block: 0, layer_type: lt, k: 2 })
            .collect();
        let p = plan_decomposition(&m, &SplitPlan::new(t).unwrap()).unwrap();
        let ring = RingParams::default();
        let (mut c, mut dv) = build_parties(&p, ring, seed, 1, SecurityMode::Secure).unwrap();
        c.precompute(1);
        let x = Matrix::from_fn(tokens, d, |i, j| ((seed % 1000) as f64 + (i * d + j) as f64).sin());
        let run = run_hybrid(&mut c, &mut dv, 0, &x).unwrap();
        prop_assert_eq!(run.output, forward_reference_quantized(&p, &x, &ring).unwrap());
    }

    #[test]
    fn schedule_depends_only_on_the_plan(seed_a in any::<u64>(), seed_b in any::<u64>(), split in prop::collection::vec(any::<bool>(), 4)) {
        let dims = [6, 6, 6, 6, 6];
        let schedule = |seed: u64| {
            let m = toy_mlp(seed, &dims);
            let p = plan_decomposition(&m, &plan_for(&m, &split, 2)).unwrap();
            let (mut c, mut d) = build_parties(&p, RingParams::default(), seed, 0, SecurityMode::Secure).unwrap();
            c.precompute(1);
            let run = run_mlp_hybrid(&mut c, &mut d, 0, &[0.3; 6]).unwrap();
            run.transcript.schedule().into_iter().map(|e| (e.0, e.1, e.2, e.3)).collect::<Vec<_>>()
        };
        prop_assert_eq!(schedule(seed_a), schedule(seed_b));
    }
}

#[test]
fn pads_are_never_reused_across_inferences() {
    let m = toy_mlp(2, &[6, 6, 3]);
    let p = plan_decomposition(&m, &plan_for(&m, &[true, true], 2)).unwrap();
    let (mut c, mut d) = build_parties(&p, RingParams::default(), 5, 0, SecurityMode::Secure).unwrap();
    c.precompute(3);
    let x = [0.5; 6];
    let a = run_mlp_hybrid(&mut c, &mut d, 0, &x).unwrap();
    let b = run_mlp_hybrid(&mut c, &mut d, 1, &x).unwrap();
    assert_eq!(a.output, b.output);
    let first = |r: &slip_core::protocol::HybridRun| r.transcript.entries[1].message.payload().cloned();
    assert_ne!(first(&a), first(&b), "same input, different pads");
    assert!(matches!(
        run_mlp_hybrid(&mut c, &mut d, 1, &x),
        Err(ProtocolError::Unexpected(_)) | Err(ProtocolError::MaskExhausted { .. })
    ));
    assert_eq!(c.pool_entries_for(2), 2);
}

/// Toy shape `l = 4, l_d = 2, n = m = 8, b = 1, k = 2`: the matrix-product
/// phases of the closed forms equal the counted multiply-adds × 2. The
/// activation and noise phases describe a different masking scheme and are
/// compared as elementwise counts only.
#[test]
fn closed_forms_match_counters_on_toy_shape() {
    let shape = ModelShape { l: 4, l_d: 2, n: 8, m: 8, b: 1, k: 2, l_v: 2 };
    let m = toy_mlp(9, &[8, 8, 8, 8, 8]);
    let p = plan_decomposition(&m, &plan_for(&m, &[false, true, false, true], 2)).unwrap();
    let (mut c, mut d) = build_parties(&p, RingParams::default(), 1, 0, SecurityMode::Secure).unwrap();
    c.precompute(1);
    c.reset_counters();
    run_mlp_hybrid(&mut c, &mut d, 0, &[0.25; 8]).unwrap();
    let phases = phase_table(&shape);
    let phase = |name: &str| phases.iter().find(|r| r.phase == name).unwrap().total;
    assert_eq!(
        2 * d.counters().macs,
        phase("edge_partial_compute") + 2 * shape.m * shape.n * shape.b * (shape.l - shape.l_d)
    );
    assert_eq!(2 * d.counters().macs, 2 * shape.m * shape.n * shape.b * shape.l);
    assert_eq!(2 * c.counters().macs, phase("cloud_partial_compute"));
    let f = flops_breakdown(&shape);
    assert_eq!(f.flops_edge - shape.n * shape.b * (shape.l - shape.l_d), 2 * d.counters().macs);
    let link: u64 = phases.iter().filter(|r| r.side == Side::Link).map(|r| r.total).sum();
    assert_eq!(link, f.transfer_values);
}
