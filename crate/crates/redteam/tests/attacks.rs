use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use slip_core::decompose::{plan_decomposition, split, LayerType, SplitOptions, SplitPlan, Triplet};
use slip_core::linalg::Matrix;
use slip_core::models::toy_mlp;
use slip_core::protocol::{build_parties, run_mlp_hybrid, SecurityMode, Transcript};
use slip_core::ring::{MaskSampler, RingParams, MERSENNE_61};
use slip_redteam::restore::{exposed_model, risk, train};
use slip_redteam::{
    chi_square_uniformity, linear_equation_attack, mutual_information_check, restoration_attack, sigma1_trace_estimate,
    subspace_attack_k1, wire_payload_samples, EvalTask, Loss, RedteamError, Verdict,
};

fn random_matrix(rng: &mut ChaCha20Rng, n: usize) -> Matrix {
    Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

const N: usize = 16;

fn transcripts(mode: SecurityMode, count: usize) -> (Vec<Transcript>, slip_core::decompose::PlannedModel, RingParams) {
    let model = toy_mlp(21, &[N, N]);
    let plan = SplitPlan::new(vec![Triplet { block: 0, layer_type: LayerType::Generic, k: 2 }]).unwrap();
    let p = plan_decomposition(&model, &plan).unwrap();
    let ring = RingParams::new(MERSENNE_61, 1 << 24).unwrap();
    let (mut c, mut d) = build_parties(&p, ring, 99, 0, mode).unwrap();
    c.precompute(count as u64);
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let ts = (0..count as u64)
        .map(|id| {
            let x: Vec<f64> = (0..N).map(|_| rng.gen_range(-1.0..1.0)).collect();
            run_mlp_hybrid(&mut c, &mut d, id, &x).unwrap().transcript
        })
        .collect();
    (ts, p, ring)
}

#[test]
fn same_attack_breaks_insecure_and_fails_on_secure() {
    for (mode, broken) in [(SecurityMode::Insecure, true), (SecurityMode::Secure, false)] {
        let (ts, p, ring) = transcripts(mode, N + 10);
        let w = &p.model.layers[0].weight;
        let r = linear_equation_attack(&ts, 0, &ring, w, true, Some(p.david_weight(0))).unwrap();
        if broken {
            assert!(r.report.success_metric <= 1e-6, "insecure error {}", r.report.success_metric);
            assert_eq!(r.report.verdict, Verdict::Broken);
            let truth_c = w.sub(p.david_weight(0));
            let err_c = slip_core::linalg::relative_frobenius(r.w_c_hat.as_ref().unwrap(), &truth_c);
            assert!(err_c < 1e-5, "hidden part error {err_c}");
            let b = p.model.layers[0].bias.as_ref().unwrap();
            let bias_err = r.bias_hat.unwrap().iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(bias_err < 1e-6);
        } else {
            assert!(r.report.success_metric >= 0.5, "secure error {}", r.report.success_metric);
            assert_eq!(r.report.verdict, Verdict::Resisted);
        }
        assert_eq!(r.report.queries_used, (N + 10) as u64);
    }
}

#[test]
fn too_few_transcripts_is_rank_deficient() {
    let (ts, p, ring) = transcripts(SecurityMode::Insecure, N - 1);
    let e = linear_equation_attack(&ts, 0, &ring, &p.model.layers[0].weight, false, None).unwrap_err();
    assert!(matches!(e, RedteamError::RankDeficient { rank: 15, needed: 16 }));
}

#[test]
fn subspace_attack_recovers_k1_vectors() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for case in 0..100 {
        let n = rng.gen_range(2..=64);
        let w = random_matrix(&mut rng, n);
        let d = split(&w, 1, SplitOptions { allow_unsafe_k1: true }).unwrap();
        // oracle singular vectors from an independent SVD
        let na = to_na(&w).svd(true, true);
        let top = na.singular_values.imax();
        let u1: Vec<f64> = na.u.as_ref().unwrap().column(top).iter().copied().collect();
        let v1: Vec<f64> = na.v_t.as_ref().unwrap().row(top).iter().copied().collect();
        let r = subspace_attack_k1(&d.david, &u1, &v1).unwrap();
        assert!(r.report.success_metric >= 1.0 - 1e-8, "case {case} n={n}: {}", r.report.success_metric);
        assert_eq!(r.report.verdict, Verdict::Broken);
    }
}

#[test]
fn k2_leaves_a_degenerate_complement() {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let w = random_matrix(&mut rng, 32);
    let d = split(&w, 2, SplitOptions::default()).unwrap();
    let u = d.charlie.u.column(0);
    let v = d.charlie.v.column(0);
    match subspace_attack_k1(&d.david, &u, &v) {
        Err(RedteamError::Degenerate { complement_dim, freedom }) => {
            assert_eq!(complement_dim, 2);
            assert_eq!(freedom, 32 - 2 + 1);
        }
        other => panic!("expected degenerate, got {other:?}"),
    }
}

#[test]
fn trace_estimate_on_random_psd() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    for _ in 0..20 {
        let b = random_matrix(&mut rng, 16);
        let w = b.matmul(&b.transpose());
        let eig = to_na(&w).symmetric_eigen();
        let sigma1 = eig.eigenvalues.max();
        let d = split(&w, 1, SplitOptions { allow_unsafe_k1: true }).unwrap();
        let est = sigma1_trace_estimate(&d.david, w.trace()).unwrap();
        assert!((est - sigma1).abs() <= 1e-8 * sigma1.max(1.0), "{est} vs {sigma1}");
    }
}

#[test]
fn trace_estimate_refuses_general_matrices() {
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let w = random_matrix(&mut rng, 8);
    let d = split(&w, 1, SplitOptions { allow_unsafe_k1: true }).unwrap();
    assert!(matches!(sigma1_trace_estimate(&d.david, w.trace()), Err(RedteamError::Domain(_))));
}

#[test]
fn masked_payloads_pass_and_constant_plaintext_fails() {
    for seed in 0..5 {
        let s = wire_payload_samples(SecurityMode::Secure, seed, 100_000).unwrap();
        let c = chi_square_uniformity(&s, 17).unwrap();
        assert!(!c.rejects(0.01), "seed {seed}: p = {}", c.p_value);
    }
    let s = wire_payload_samples(SecurityMode::Insecure, 0, 100_000).unwrap();
    assert!(chi_square_uniformity(&s, 17).unwrap().p_value < 1e-6);
}

#[test]
fn sampled_mask_channel_carries_no_information() {
    let ring = RingParams::new(17, 1).unwrap();
    let mut sampler = MaskSampler::new(3, 0);
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let n = 1_000_000;
    let s: Vec<u64> = (0..n).map(|_| rng.gen_range(0..17)).collect();
    let masked: Vec<u64> = s.iter().map(|&v| ring.add(v, sampler.next_residue(17))).collect();
    let mi = mutual_information_check(&s, &masked, 17).unwrap();
    assert!(mi.within_bound(), "{} bits > {}", mi.bits, mi.threshold());
    assert_eq!(mi.report().verdict, Verdict::Resisted);
}

fn owner(task: &EvalTask) -> (slip_core::models::ModelParams, f64) {
    let mut m = toy_mlp(8, &[16, 32, 32, 32, 4]);
    train(&mut m, &task.train, task.loss, 300, 0.1);
    let r = risk(&m, &task.eval, task.loss);
    (m, r)
}

fn task() -> EvalTask {
    EvalTask::synthetic(17, 16, 4, [512, 256, 512], Loss::CrossEntropy)
}

#[test]
fn nothing_removed_means_kappa_one() {
    let task = task();
    let (m, baseline) = owner(&task);
    let planned = plan_decomposition(&m, &SplitPlan::default()).unwrap();
    let r = restoration_attack(&exposed_model(&planned), baseline, &task, 0, 0.05).unwrap();
    assert_eq!(r.kappa, 1.0);
}

#[test]
fn restoration_curve_trends_down() {
    let task = task();
    let (m, baseline) = owner(&task);
    let plan = SplitPlan::new(vec![Triplet { block: 0, layer_type: LayerType::Generic, k: 8 }]).unwrap();
    let planned = plan_decomposition(&m, &plan).unwrap();
    let r = restoration_attack(&exposed_model(&planned), baseline, &task, 50, 0.05).unwrap();
    assert!(r.exposed_risk > baseline);
    assert!(r.restored_risk < r.exposed_risk);
    assert!(r.trend_non_increasing(5), "{}", r.to_csv());
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 52);
    assert!(csv.starts_with("epoch,risk,kappa\n0,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn subspace_reports_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let w = random_matrix(&mut rng, 4);
        let d = split(&w, 1, SplitOptions { allow_unsafe_k1: true }).unwrap();
        let r = subspace_attack_k1(&d.david, &d.charlie.u.column(0), &d.charlie.v.column(0)).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.report.success_metric));
        let back: slip_redteam::AttackReport = serde_json::from_str(&r.report.to_json()).unwrap();
        prop_assert_eq!(back.verdict, r.report.verdict);
        prop_assert_eq!(&back.notes, &r.report.notes);
        prop_assert!((back.success_metric - r.report.success_metric).abs() <= 1e-15);
    }
}
