//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use slip_core::checkpoint::{CharlieBundle, DavidBundle};
use slip_core::costmodel::{DelayMode, PublishedPreset};
use slip_core::decompose::{
    plan_decomposition, spectral_profile, split, LayerType, PlannedModel, SplitOptions, SplitPlan, Triplet,
};
use slip_core::linalg::{relative_frobenius, Matrix};
use slip_core::models::{conv_to_fc, toy_attention, toy_mlp, ConvSpec, ToyTransformerShape};
use slip_core::protocol::{
    build_parties, run_attention_hybrid, run_hybrid, run_mlp_hybrid, DavidState, Party, ProtocolMessage, SecurityMode,
    PROTOCOL_VERSION,
};
use slip_core::qforward::forward_reference_quantized;
use slip_core::ring::{FixedVec, RingParams, MERSENNE_61};
use slip_redteam::restore::{exposed_model, risk, train};
use slip_redteam::{
    chi_square_uniformity, exhaustive_mask_table, linear_equation_attack, restoration_attack, subspace_attack_k1,
    wire_payload_samples, EvalTask, Loss, RedteamError,
};
use slip_transport::frame::MSG_SETUP;
use slip_transport::{
    david_request_inference, decode_frame, encode_frame, memory_pair, run_in_memory, serve_charlie, CharlieService,
    EndpointConfig, Link, TranscriptFile, TransportError,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($fmt)+)),
        }
    };
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed > limit {
        Err(format!("took {:.1} s, limit {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64()))
    } else {
        Ok(())
    }
}

fn na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn oracle_sigma(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn c1_bit_exact() -> Outcome {
    let t0 = Instant::now();
    let ring = RingParams::new(MERSENNE_61, 1 << 16).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut split_layers = 0;
    for case in 0..1000u64 {
        let layers = rng.gen_range(1..=5);
        let dims: Vec<usize> = (0..=layers).map(|_| rng.gen_range(2..=64)).collect();
        let m = toy_mlp(case, &dims);
        let k = rng.gen_range(2..=8);
        let t: Vec<Triplet> = m
            .layers
            .iter()
            .filter(|_| rng.gen_bool(0.5))
            .map(|l| Triplet {
                block: l.id.block,
                layer_type: LayerType::Generic,
                k: k.min(l.in_dim().min(l.out_dim())),
            })
            .collect();
        split_layers += t.len();
        let p = plan_decomposition(&m, &SplitPlan::new(t).unwrap()).unwrap();
        let (mut c, mut d) = build_parties(&p, ring, case, 0, SecurityMode::Secure).unwrap();
        c.precompute(1);
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let run = run_mlp_hybrid(&mut c, &mut d, 0, &x).unwrap();
        let xm = Matrix::from_vec(1, x.len(), x).unwrap();
        ensure!(
            run.output == forward_reference_quantized(&p, &xm, &ring).unwrap(),
            "mlp case {case} dims {dims:?} differs"
        );
    }
    let types = [LayerType::AttnQ, LayerType::AttnK, LayerType::AttnV, LayerType::AttnO];
    for case in 0..200u64 {
        let d = rng.gen_range(2..=16);
        let d_h = rng.gen_range(2..=d);
        let d_out = rng.gen_range(2..=16);
        let m = toy_attention(case, d, d_h, d_out, 8);
        let t: Vec<Triplet> = types
            .iter()
            .filter(|_| rng.gen_bool(0.5))
            .map(|&lt| {
                let l = m.layers.iter().find(|l| l.id.layer_type == lt).unwrap();
                Triplet { block: 0, layer_type: lt, k: 2.min(l.in_dim().min(l.out_dim())) }
            })
            .collect();
        split_layers += t.len();
        let p = plan_decomposition(&m, &SplitPlan::new(t).unwrap()).unwrap();
        let (mut c, mut dv) = build_parties(&p, ring, case, 1, SecurityMode::Secure).unwrap();
        c.precompute(1);
        let tokens = rng.gen_range(1..=8);
        let x = Matrix::from_fn(tokens, d, |_, _| rng.gen_range(-2.0..2.0));
        let run = run_attention_hybrid(&mut c, &mut dv, 0, &x).unwrap();
        ensure!(run.output == forward_reference_quantized(&p, &x, &ring).unwrap(), "attention case {case} differs");
    }
    within(t0.elapsed(), Duration::from_secs(120))?;
    Ok(format!("1000 MLPs + 200 heads bit-exact, {split_layers} split layers, {:.1} s", t0.elapsed().as_secs_f64()))
}

fn c2_exhaustive() -> Outcome {
    let t0 = Instant::now();
    for l in [5, 17, 31] {
        let t = exhaustive_mask_table(l).unwrap();
        ensure!(t.total() == l * l, "L={l}: {} cells counted", t.total());
        ensure!(t.is_uniform(), "L={l}: marginals not uniform");
        ensure!(t.factorizes(), "L={l}: joint table does not factorize");
    }
    within(t0.elapsed(), Duration::from_secs(1))?;
    Ok(format!("L in {{5, 17, 31}} uniform and factorizing, {:.3} s", t0.elapsed().as_secs_f64()))
}

fn c3_chi_square() -> Outcome {
    let t0 = Instant::now();
    let mut kept = 0;
    let mut coords = usize::MAX;
    for seed in 0..200 {
        let s = wire_payload_samples(SecurityMode::Secure, seed, 100_000).unwrap();
        coords = coords.min(s.len());
        if !chi_square_uniformity(&s, 17).unwrap().rejects(0.01) {
            kept += 1;
        }
    }
    ensure!(coords >= 100_000, "only {coords} coordinates per run");
    ensure!(kept >= 195, "{kept}/200 runs not rejected");
    let s = wire_payload_samples(SecurityMode::Insecure, 0, 100_000).unwrap();
    let p = chi_square_uniformity(&s, 17).unwrap().p_value;
    ensure!(p < 1e-6, "insecure p = {p:e}");
    within(t0.elapsed(), Duration::from_secs(60))?;
    Ok(format!("{kept}/200 secure runs not rejected, insecure p = {p:.1e}, {:.1} s", t0.elapsed().as_secs_f64()))
}

fn c4_lineq() -> Outcome {
    const N: usize = 16;
    let model = toy_mlp(21, &[N, N]);
    let plan = SplitPlan::new(vec![Triplet { block: 0, layer_type: LayerType::Generic, k: 2 }]).unwrap();
    let p = plan_decomposition(&model, &plan).unwrap();
    let ring = RingParams::new(MERSENNE_61, 1 << 24).unwrap();
    let w = &p.model.layers[0].weight;
    let mut errs = [0.0; 2];
    for (i, mode) in [SecurityMode::Insecure, SecurityMode::Secure].into_iter().enumerate() {
        let (mut c, mut d) = build_parties(&p, ring, 99, 0, mode).unwrap();
        c.precompute((N + 10) as u64);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let ts: Vec<_> = (0..(N + 10) as u64)
            .map(|id| {
                let x: Vec<f64> = (0..N).map(|_| rng.gen_range(-1.0..1.0)).collect();
                run_mlp_hybrid(&mut c, &mut d, id, &x).unwrap().transcript
            })
            .collect();
        errs[i] =
            linear_equation_attack(&ts, 0, &ring, w, true, Some(p.david_weight(0))).unwrap().report.success_metric;
    }
    ensure!(errs[0] <= 1e-6, "insecure error {:e}", errs[0]);
    ensure!(errs[1] >= 0.5, "secure error {:e}", errs[1]);
    Ok(format!("n+10 = 26 transcripts: insecure error {:.1e}, secure error {:.3}", errs[0], errs[1]))
}

fn c5_subspace() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let mut worst: f64 = 1.0;
    for case in 0..100 {
        let n = rng.gen_range(2..=64);
        let w = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let d = split(&w, 1, SplitOptions { allow_unsafe_k1: true }).unwrap();
        let svd = na(&w).svd(true, true);
        let top = svd.singular_values.imax();
        let u1: Vec<f64> = svd.u.as_ref().unwrap().column(top).iter().copied().collect();
        let v1: Vec<f64> = svd.v_t.as_ref().unwrap().row(top).iter().copied().collect();
        let r = subspace_attack_k1(&d.david, &u1, &v1).unwrap();
        worst = worst.min(r.report.success_metric);
        ensure!(r.report.success_metric >= 1.0 - 1e-8, "case {case} n={n}: |cos| = {}", r.report.success_metric);
    }
    let n = 32;
    let w = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let d = split(&w, 2, SplitOptions::default()).unwrap();
    match subspace_attack_k1(&d.david, &d.charlie.u.column(0), &d.charlie.v.column(0)) {
        Err(RedteamError::Degenerate { complement_dim: 2, freedom }) if freedom == n - 2 + 1 => {}
        other => return Err(format!("k=2 should be degenerate with n-k+1 = {}, got {other:?}", n - 1)),
    }
    within(t0.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "min |cos| {worst:.12} over 100 cases, k=2 ambiguity {} dims, {:.1} s",
        n - 1,
        t0.elapsed().as_secs_f64()
    ))
}

fn c6_cost() -> Outcome {
    let t0 = Instant::now();
    let r = PublishedPreset::report(DelayMode::Aggregate);
    let rel = |a: f64, b: f64| (a - b).abs() / b;
    ensure!(rel(r.flops_full as f64, 240.547e9) <= 1e-3, "flops full {}", r.flops_full);
    ensure!(rel(r.flops_cloud as f64, 3.697e9) <= 1e-3, "flops cloud {}", r.flops_cloud);
    ensure!(rel(r.t_edge, 150.34e-3) <= 5e-3, "t_edge {}", r.t_edge);
    ensure!(rel(r.t_cloud, 0.66e-3) <= 5e-2, "t_cloud {}", r.t_cloud);
    ensure!((r.offload_fraction - 0.015).abs() <= 0.002, "offload {}", r.offload_fraction);
    for metric in ["transfer_values", "t_transfer"] {
        let c = r.published.iter().find(|c| c.metric == metric).ok_or(format!("{metric} missing"))?;
        ensure!(c.discrepancy, "{metric} not flagged");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_slip")).args(["cost", "--preset", "paper-appendix-c"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    ensure!(out.status.success(), "slip cost exited {:?}", out.status.code());
    for needle in ["150.34", "0.66", "1.848000e6", "1.848115e7", "7.131000e-2", "DISCREPANCY"] {
        ensure!(text.contains(needle), "cost output lacks {needle}");
    }
    within(t0.elapsed(), Duration::from_secs(1))?;
    Ok(format!(
        "full {:.3} GFLOP, cloud {:.3} GFLOP, t_edge {:.2} ms, t_cloud {:.2} ms, offload {:.2}%, transfer flagged",
        r.flops_full as f64 / 1e9,
        r.flops_cloud as f64 / 1e9,
        r.t_edge * 1e3,
        r.t_cloud * 1e3,
        r.offload_fraction * 100.0
    ))
}

/// Nested-loop convolution, stride 1, no padding, HWC input and (kh, kw, c, n) kernel.
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

fn c7_algebra() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let (mut worst_add, mut worst_spec): (f64, f64) = (0.0, 0.0);
    for case in 0..500 {
        let (r, c) = (rng.gen_range(2..=128), rng.gen_range(2..=128));
        let w = Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let k = rng.gen_range(2..=r.min(c));
        let d = split(&w, k, SplitOptions::default()).unwrap();
        let add = relative_frobenius(&d.reconstruct(), &w);
        ensure!(add <= 1e-10, "case {case} {r}x{c} k={k}: additivity {add:e}");
        let full = oracle_sigma(&w);
        let rest = spectral_profile(&d.david).unwrap();
        for (i, s) in full[k..].iter().enumerate() {
            let e = (rest[i] - s).abs();
            worst_spec = worst_spec.max(e);
            ensure!(e <= 1e-8, "case {case}: sigma_{} {} vs {}", k + i + 1, rest[i], s);
        }
        worst_add = worst_add.max(add);
    }
    let mut worst_conv: f64 = 0.0;
    for case in 0..200 {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let spec = ConvSpec {
            h,
            w,
            c: rng.gen_range(1..=3),
            kh: rng.gen_range(1..=h),
            kw: rng.gen_range(1..=w),
            n: rng.gen_range(1..=3),
        };
        let x: Vec<f64> = (0..h * w * spec.c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..spec.kh * spec.kw * spec.c * spec.n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = conv_to_fc(&spec, &k).unwrap().matvec(&x);
        let want = direct_conv(&spec, &x, &k);
        ensure!(got.len() == want.len(), "conv case {case}: length");
        for (a, b) in got.iter().zip(&want) {
            worst_conv = worst_conv.max((a - b).abs());
        }
        ensure!(worst_conv <= 1e-12, "conv case {case}: error {worst_conv:e}");
    }
    within(t0.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "additivity {worst_add:.1e}, spectrum {worst_spec:.1e}, conv {worst_conv:.1e}, {:.1} s",
        t0.elapsed().as_secs_f64()
    ))
}

fn c8_efficiency() -> Outcome {
    let shape = ToyTransformerShape::default();
    let model = shape.build(3);
    let p = plan_decomposition(&model, &SplitPlan::default_for(&model)).unwrap();
    let ring = RingParams::default();
    let (mut c, mut d) = build_parties(&p, ring, 3, 0, SecurityMode::Secure).unwrap();
    c.reset_counters();
    c.precompute(1);
    let x = Matrix::from_fn(shape.max_tokens, shape.d, |i, j| ((i * shape.d + j) as f64 * 0.013).sin());
    let run = run_attention_hybrid(&mut c, &mut d, 0, &x).unwrap();
    ensure!(run.output == forward_reference_quantized(&p, &x, &ring).unwrap(), "output differs from reference");
    let mono = model.monolithic_macs(shape.max_tokens);
    let online = c.counters().macs;
    let ratio = online as f64 / mono as f64;
    ensure!(ratio <= 0.1, "Charlie online MACs {online} are {:.2}% of {mono}", ratio * 100.0);
    Ok(format!(
        "Charlie online MACs {online} = {:.2}% of monolithic {mono} (offline cancellation-mask MACs {} not counted)",
        ratio * 100.0,
        c.counters().precompute_macs
    ))
}

fn c9_restoration() -> Outcome {
    let task = EvalTask::synthetic(17, 16, 4, [512, 256, 512], Loss::CrossEntropy);
    ensure!(task.splits_disjoint(), "train/public/eval overlap");
    let mut owner = toy_mlp(8, &[16, 32, 32, 32, 4]);
    train(&mut owner, &task.train, task.loss, 300, 0.1);
    let baseline = risk(&owner, &task.eval, task.loss);
    let whole = plan_decomposition(&owner, &SplitPlan::default()).unwrap();
    let r0 = restoration_attack(&exposed_model(&whole), baseline, &task, 0, 0.05).unwrap();
    ensure!(r0.kappa == 1.0, "kappa with nothing removed = {}", r0.kappa);
    let plan = SplitPlan::new(vec![Triplet { block: 0, layer_type: LayerType::Generic, k: 8 }]).unwrap();
    let planned = plan_decomposition(&owner, &plan).unwrap();
    let r = restoration_attack(&exposed_model(&planned), baseline, &task, 50, 0.05).unwrap();
    ensure!(r.trend_non_increasing(5), "smoothed risk rises:\n{}", r.to_csv());
    ensure!(r.curve.len() == 51, "curve has {} points", r.curve.len());
    Ok(format!(
        "kappa = 1 when nothing removed; K=8 on layer 0: risk {:.3} -> {:.3} over 50 epochs, kappa {:.3}",
        r.exposed_risk, r.restored_risk, r.kappa
    ))
}

const TRANSPORT_SEED: u64 = 0x5eed;

fn service(p: &PlannedModel, address: &str) -> CharlieService {
    let ring = RingParams::default();
    let bundle = CharlieBundle::from_planned(p, ring);
    let mut config = EndpointConfig::for_topology(Party::Charlie, address, &bundle.topology);
    config.session_timeout = Duration::from_secs(10);
    CharlieService::new(bundle, TRANSPORT_SEED, SecurityMode::Secure, config)
}

fn loopback_matches(p: &PlannedModel, x: &Matrix, session: u64) -> Result<usize, String> {
    let ring = RingParams::default();
    let david = DavidBundle::from_planned(p, ring);
    let (addr, server) = serve_charlie(service(p, "127.0.0.1:0"), Some(1)).map_err(|e| e.to_string())?;
    let mut cfg = EndpointConfig::for_topology(Party::David, addr.to_string(), &david.topology);
    cfg.session_timeout = Duration::from_secs(10);
    let tcp = david_request_inference(&cfg, &david, session, 0, x).map_err(|e| e.to_string())?;
    server.join().unwrap().map_err(|e| e.to_string())?;
    let (mem, _) = run_in_memory(&service(p, "unused"), &david, session, &[(0, x.clone())]);
    let mem = mem.map_err(|e| e.to_string())?.remove(0);
    ensure!(tcp.file.to_bytes() == mem.file.to_bytes(), "TCP and in-memory transcripts differ");
    let (mut c, mut d) = build_parties(p, ring, TRANSPORT_SEED, session, SecurityMode::Secure).unwrap();
    c.precompute(1);
    let local = run_hybrid(&mut c, &mut d, 0, x).unwrap();
    ensure!(
        tcp.file == TranscriptFile::from_transcript(&local.transcript, session),
        "wire and in-process transcripts differ"
    );
    ensure!(tcp.output == forward_reference_quantized(p, x, &ring).unwrap(), "wire output differs from reference");
    Ok(tcp.file.to_bytes().len())
}

fn mutate(rng: &mut ChaCha20Rng, base: &[u8]) -> Vec<u8> {
    let mut f = base.to_vec();
    match rng.gen_range(0..6) {
        0 => {
            for _ in 0..rng.gen_range(1..4) {
                let i = rng.gen_range(0..f.len());
                f[i] ^= 1 << rng.gen_range(0..8);
            }
        }
        1 => f.truncate(rng.gen_range(0..f.len())),
        2 => {
            let n = rng.gen_range(1..16);
            f.extend((0..n).map(|_| rng.gen::<u8>()));
        }
        3 => {
            let i = rng.gen_range(4..30);
            f[i] = rng.gen();
        }
        4 => {
            if f.len() > 30 {
                let k = 30 + 8 * rng.gen_range(0..(f.len() - 30) / 8);
                f[k..k + 8].copy_from_slice(&u64::MAX.to_le_bytes());
            }
        }
        _ => {
            let n = rng.gen_range(0..64);
            f = (0..n).map(|_| rng.gen()).collect();
            if rng.gen_bool(0.5) && f.len() >= 4 {
                f[..4].copy_from_slice(b"SLP1");
            }
        }
    }
    f
}

fn c10_transport() -> Outcome {
    let t0 = Instant::now();
    let mlp = {
        let m = toy_mlp(3, &[8, 12, 10, 6]);
        let plan = SplitPlan::new(vec![
            Triplet { block: 0, layer_type: LayerType::Generic, k: 2 },
            Triplet { block: 2, layer_type: LayerType::Generic, k: 3 },
        ])
        .unwrap();
        plan_decomposition(&m, &plan).unwrap()
    };
    let attn = {
        let m = toy_attention(9, 6, 6, 6, 4);
        let t =
            [LayerType::AttnQ, LayerType::AttnV].iter().map(|&lt| Triplet { block: 0, layer_type: lt, k: 2 }).collect();
        plan_decomposition(&m, &SplitPlan::new(t).unwrap()).unwrap()
    };
    let a = loopback_matches(&mlp, &Matrix::from_fn(1, 8, |_, j| (j as f64 * 0.37).sin()), 42)?;
    let b = loopback_matches(&attn, &Matrix::from_fn(3, 6, |i, j| ((i * 6 + j) as f64 * 0.37 + 0.7).sin()), 43)?;

    let ring = RingParams::default();
    let david = DavidBundle::from_planned(&mlp, ring);
    let svc = service(&mlp, "unused");
    let (runs, _) = run_in_memory(&svc, &david, 0, &[(0, Matrix::from_fn(1, 8, |_, j| j as f64 * 0.1))]);
    let mut corpus: Vec<Vec<u8>> =
        runs.map_err(|e| e.to_string())?[0].file.frames.iter().map(|(_, f)| f.clone()).collect();
    corpus.push(encode_frame(
        &ProtocolMessage::SetupParams { version: PROTOCOL_VERSION, ring, topology: david.topology.digest() },
        0,
    ));
    corpus
        .push(encode_frame(&ProtocolMessage::InferenceOutput { inference_id: 0, output: FixedVec::new(vec![], 1) }, 0));

    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    let mut rejected = 0;
    let (mut clean, mut malformed, mut other_abort) = (0, 0, 0);
    for n in 0..10_000u64 {
        let pick = rng.gen_range(0..corpus.len());
        let f = mutate(&mut rng, &corpus[pick]);
        if decode_frame(&f, Some(&ring)).is_err() {
            rejected += 1;
        }
        if n % 10 == 0 {
            let (c_end, mut d_end) = memory_pair(Duration::from_secs(5), svc.config.max_frame_bytes);
            let state = DavidState::new(david.topology.clone(), david.layers.clone(), ring).unwrap();
            let sid = 1_000_000 + n;
            let mut g = f.clone();
            if g.len() >= 13 && g[4] != MSG_SETUP {
                g[5..13].copy_from_slice(&sid.to_le_bytes());
            }
            let report = std::thread::scope(|s| {
                let server = s.spawn(|| svc.serve_session(c_end));
                d_end.send(&encode_frame(&state.setup_message(), sid)).unwrap();
                // Charlie's setup arrives before the mutant is read; hang up after it
                let _ = d_end.recv();
                d_end.send(&g).unwrap();
                drop(d_end);
                server.join()
            })
            .map_err(|_| format!("session thread panicked on mutant {n}"))?;
            match &report.error {
                None => clean += 1,
                Some(TransportError::Malformed(_)) => malformed += 1,
                Some(_) => other_abort += 1,
            }
            if let Some(state) = &report.state {
                for id in &report.aborted {
                    ensure!(state.pool_entries_for(*id) == 0, "pads of aborted inference {id} survive");
                }
            }
        }
    }
    ensure!(malformed > 0, "no live session saw a malformed frame");
    Ok(format!(
        "TCP = in-memory transcripts ({a} and {b} bytes); 10000 fuzzed frames: {rejected} rejected by the decoder; 1000 live sessions: {malformed} aborted on MalformedFrame, {other_abort} on protocol errors, {clean} closed cleanly; no crash, {:.1} s",
        t0.elapsed().as_secs_f64()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("bit-exact hybrid correctness", c1_bit_exact),
        ("exhaustive masking table", c2_exhaustive),
        ("chi-square indistinguishability", c3_chi_square),
        ("linear-equation attack contrast", c4_lineq),
        ("rank-one subspace attack", c5_subspace),
        ("cost model reproduction", c6_cost),
        ("decomposition algebra", c7_algebra),
        ("Charlie efficiency", c8_efficiency),
        ("restoration harness", c9_restoration),
        ("transport determinism and fuzzing", c10_transport),
    ];
    let only: Option<usize> = std::env::var("SLIP_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
