//! Distinguishers for masked wire payloads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use slip_core::decompose::{plan_decomposition, LayerId, LayerType, SplitPlan, Triplet};
use slip_core::linalg::Matrix;
use slip_core::models::{Activation, Layer, ModelKind, ModelParams};
use slip_core::protocol::{build_parties, insecure_layer_step, secure_layer_step, SecurityMode};
use slip_core::ring::{mask, FixedVec, MaskVec, RingParams, StreamPosition};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::report::{AttackKind, AttackReport, Verdict};
use crate::RedteamError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: u64,
    pub p_value: f64,
    pub samples: u64,
}

impl ChiSquare {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }

    /// `broken` when uniformity is rejected at `alpha`.
    pub fn report(&self, alpha: f64) -> AttackReport {
        let verdict = if self.rejects(alpha) { Verdict::Broken } else { Verdict::Resisted };
        AttackReport::new(AttackKind::Uniformity, self.p_value, self.samples, verdict)
            .with_note(format!("chi-square {:.3} on {} dof, alpha {alpha}", self.statistic, self.dof))
    }
}

/// Pearson chi-square of `samples` against the uniform law on `[0, L)`.
pub fn chi_square_uniformity(samples: &[u64], l: u64) -> Result<ChiSquare, RedteamError> {
    if l < 2 {
        return Err(RedteamError::Domain(format!("modulus {l}")));
    }
    let needed = 100 * l as usize;
    if samples.len() < needed {
        return Err(RedteamError::InsufficientSamples { needed, got: samples.len() });
    }
    let mut counts = vec![0u64; l as usize];
    for &s in samples {
        if s >= l {
            return Err(RedteamError::Domain(format!("residue {s} ≥ {l}")));
        }
        counts[s as usize] += 1;
    }
    let expected = samples.len() as f64 / l as f64;
    let statistic = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dof = l - 1;
    let p_value = ChiSquared::new(dof as f64).expect("dof ≥ 1").sf(statistic);
    Ok(ChiSquare { statistic, dof, p_value, samples: samples.len() as u64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutualInformation {
    pub bits: f64,
    /// Expected plug-in bias under independence, `L² / (2N ln 2)`.
    pub bias_bound: f64,
    /// Standard deviation of the plug-in estimate under independence.
    pub sigma: f64,
    pub samples: u64,
}

impl MutualInformation {
    pub fn threshold(&self) -> f64 {
        self.bias_bound + 3.0 * self.sigma
    }

    pub fn within_bound(&self) -> bool {
        self.bits <= self.threshold()
    }

    pub fn report(&self) -> AttackReport {
        let verdict = if self.within_bound() { Verdict::Resisted } else { Verdict::Broken };
        AttackReport::new(AttackKind::MutualInformation, self.bits.max(0.0), self.samples, verdict)
            .with_note(format!("threshold {:.3e} bits", self.threshold()))
    }
}

/// Plug-in mutual information in bits between paired residues.
pub fn mutual_information_check(s: &[u64], masked: &[u64], l: u64) -> Result<MutualInformation, RedteamError> {
    if !(2..=31).contains(&l) {
        return Err(RedteamError::Domain(format!("modulus {l} outside 2..=31")));
    }
    if s.len() != masked.len() {
        return Err(RedteamError::Domain("unpaired samples".into()));
    }
    let cells = (l * l) as usize;
    if s.len() < cells {
        return Err(RedteamError::InsufficientSamples { needed: cells, got: s.len() });
    }
    let li = l as usize;
    let mut joint = vec![0u64; cells];
    for (&a, &b) in s.iter().zip(masked) {
        if a >= l || b >= l {
            return Err(RedteamError::Domain("residue out of range".into()));
        }
        joint[a as usize * li + b as usize] += 1;
    }
    let n = s.len() as u64;
    let bits = plug_in_bits(&joint, li, n);
    let denom = 2.0 * n as f64 * std::f64::consts::LN_2;
    let dof = ((l - 1) * (l - 1)) as f64;
    Ok(MutualInformation { bits, bias_bound: (l * l) as f64 / denom, sigma: (2.0 * dof).sqrt() / denom, samples: n })
}

/// Ratios are formed in integers so an exactly independent table gives 0.
fn plug_in_bits(joint: &[u64], l: usize, n: u64) -> f64 {
    let row: Vec<u64> = (0..l).map(|i| joint[i * l..(i + 1) * l].iter().sum()).collect();
    let col: Vec<u64> = (0..l).map(|j| (0..l).map(|i| joint[i * l + j]).sum()).collect();
    let mut bits = 0.0;
    for i in 0..l {
        for j in 0..l {
            let c = joint[i * l + j];
            if c == 0 {
                continue;
            }
            let num = c as u128 * n as u128;
            let den = row[i] as u128 * col[j] as u128;
            let ratio = if num == den { 1.0 } else { num as f64 / den as f64 };
            bits += c as f64 / n as f64 * ratio.log2();
        }
    }
    bits
}

/// Counts of `(s, mod(s + r, L))` over every `s, r ∈ [0, L)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointTable {
    pub l: u64,
    /// Row `s`, column masked value.
    pub counts: Vec<Vec<u64>>,
}

impl JointTable {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn masked_marginal(&self) -> Vec<u64> {
        (0..self.l as usize).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }

    /// Every secret value yields each masked value equally often.
    pub fn is_uniform(&self) -> bool {
        let first = self.counts[0][0];
        self.counts.iter().all(|r| r.iter().all(|&c| c == first))
            && self.masked_marginal().iter().all(|&c| c == first * self.l)
    }

    /// `count(s, m) · N = count(s) · count(m)` for every cell.
    pub fn factorizes(&self) -> bool {
        let n = self.total() as u128;
        let col = self.masked_marginal();
        self.counts.iter().all(|r| {
            let row: u64 = r.iter().sum();
            r.iter().zip(&col).all(|(&c, &m)| c as u128 * n == row as u128 * m as u128)
        })
    }

    pub fn mutual_information_bits(&self) -> f64 {
        let flat: Vec<u64> = self.counts.iter().flatten().copied().collect();
        plug_in_bits(&flat, self.l as usize, self.total())
    }
}

/// Runs the ring's own `mask` over the full `(s, r)` grid with `d = 1`.
pub fn exhaustive_mask_table(l: u64) -> Result<JointTable, RedteamError> {
    let ring = RingParams::new(l, 1)?;
    let mut counts = vec![vec![0u64; l as usize]; l as usize];
    for s in 0..l {
        for r in 0..l {
            let pad = MaskVec { values: vec![r], seed_id: StreamPosition { stream: 0, word_pos: 0 } };
            let m = mask(&FixedVec::new(vec![s], 1), &pad, &ring)?;
            counts[s as usize][m.values[0] as usize] += 1;
        }
    }
    Ok(JointTable { l, counts })
}

/// Width of the layer used by [`wire_payload_samples`].
pub const PROBE_DIM: usize = 64;

/// Masked-activation payload coordinates from repeated single-layer steps at
/// `L = 17`, scale 1.
///
/// Secure runs feed fresh integer inputs in `[−4, 4]`; insecure runs feed the
/// same constant input every time. Weights are small enough to round to zero
/// in the ring, so the headroom check always passes.
pub fn wire_payload_samples(mode: SecurityMode, seed: u64, min_coords: usize) -> Result<Vec<u64>, RedteamError> {
    let ring = RingParams::new(17, 1)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let w = Matrix::from_fn(PROBE_DIM, PROBE_DIM, |_, _| rng.gen_range(-1e-3..1e-3));
    let model = ModelParams {
        kind: ModelKind::Mlp,
        layers: vec![Layer::new(LayerId::new(0, LayerType::Generic), w, Activation::Identity)],
        max_tokens: 1,
    };
    let plan = SplitPlan::new(vec![Triplet { block: 0, layer_type: LayerType::Generic, k: 2 }])?;
    let planned = plan_decomposition(&model, &plan)?;
    let (mut charlie, mut david) = build_parties(&planned, ring, seed, 0, mode)?;
    let constant: Vec<u64> = vec![ring.reduce_i64(3); PROBE_DIM];
    let mut out = Vec::with_capacity(min_coords + PROBE_DIM);
    let mut id = 0u64;
    while out.len() < min_coords {
        charlie.precompute(1);
        let run = match mode {
            SecurityMode::Secure => {
                let a: Vec<u64> = (0..PROBE_DIM).map(|_| ring.reduce_i64(rng.gen_range(-4..=4))).collect();
                secure_layer_step(&mut charlie, &mut david, id, &FixedVec::new(a, 1), 0)?
            }
            SecurityMode::Insecure => {
                insecure_layer_step(&mut charlie, &mut david, id, &FixedVec::new(constant.clone(), 1), 0)?
            }
        };
        out.extend_from_slice(&run.transcript.entries[0].message.payload().expect("activation payload").values);
        id += 1;
    }
    Ok(out)
}
