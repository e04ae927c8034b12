//! Weight recovery by least squares from (input, output) pairs that leak
//! through insecure transcripts.

use slip_core::linalg::{lstsq, relative_frobenius, Matrix};
use slip_core::protocol::{Path, ProtocolMessage, Transcript};
use slip_core::ring::{dequantize, RingParams};

use crate::report::{AttackKind, AttackReport, Verdict};
use crate::RedteamError;

/// Recovery error at or below this counts as a broken layer.
pub const BROKEN_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct LinEqRecovery {
    pub report: AttackReport,
    pub w_hat: Matrix,
    pub bias_hat: Option<Vec<f64>>,
    /// `Ŵ − W^D`, the hidden part, when David's residual is supplied.
    pub w_c_hat: Option<Matrix>,
}

/// Input and output of `layer_id` as they appear in one transcript.
///
/// The input is the Main-path masked activation (plaintext when the run was
/// insecure). The output is the plain activation tagged with the layer, or
/// the inference output when no later masked step follows.
fn observed_pair(t: &Transcript, layer_id: u32, ring: &RingParams) -> Result<(Vec<f64>, Vec<f64>), RedteamError> {
    let unobservable = |reason: &str| RedteamError::Unobservable { layer: layer_id, reason: reason.to_string() };
    let pos = t
        .entries
        .iter()
        .position(|e| {
            matches!(e.message, ProtocolMessage::MaskedActivation { layer_id: l, path: Path::Main, .. } if l == layer_id)
        })
        .ok_or_else(|| unobservable("no masked activation"))?;
    let input = t.entries[pos].message.payload().expect("activation has a payload");
    let rest = &t.entries[pos + 1..];
    let output = rest
        .iter()
        .find_map(|e| match &e.message {
            ProtocolMessage::PlainActivation { layer_id: l, payload, .. } if *l == layer_id => Some(payload),
            _ => None,
        })
        .or_else(|| {
            let later_masked = rest.iter().any(|e| matches!(e.message, ProtocolMessage::MaskedActivation { .. }));
            if later_masked {
                return None;
            }
            rest.iter().find_map(|e| match &e.message {
                ProtocolMessage::InferenceOutput { output, .. } => Some(output),
                _ => None,
            })
        })
        .ok_or_else(|| unobservable("layer output never crosses the wire"))?;
    Ok((dequantize(input, ring)?, dequantize(output, ring)?))
}

/// Solves `[a 1] [Wᵀ; bᵀ] = y` over every transcript. `fit_bias` adds the
/// intercept column. Needs as many independent samples as unknowns per row.
pub fn linear_equation_attack(
    transcripts: &[Transcript],
    layer_id: u32,
    ring: &RingParams,
    true_w: &Matrix,
    fit_bias: bool,
    w_d: Option<&Matrix>,
) -> Result<LinEqRecovery, RedteamError> {
    let pairs = transcripts.iter().map(|t| observed_pair(t, layer_id, ring)).collect::<Result<Vec<_>, _>>()?;
    let (n, m) = (true_w.cols(), true_w.rows());
    let unknowns = n + usize::from(fit_bias);
    if pairs.len() < unknowns {
        return Err(RedteamError::RankDeficient { rank: pairs.len(), needed: unknowns });
    }
    for (a, y) in &pairs {
        if a.len() != n || y.len() != m {
            return Err(RedteamError::Domain(format!("pair of dims {}→{} for a {m}×{n} layer", a.len(), y.len())));
        }
    }
    let a = Matrix::from_fn(pairs.len(), unknowns, |i, j| if j < n { pairs[i].0[j] } else { 1.0 });
    let y = Matrix::from_fn(pairs.len(), m, |i, j| pairs[i].1[j]);
    let x = lstsq(&a, &y)?;
    let w_hat = Matrix::from_fn(m, n, |i, j| x[(j, i)]);
    let bias_hat = fit_bias.then(|| (0..m).map(|i| x[(n, i)]).collect());
    let err = relative_frobenius(&w_hat, true_w);
    let verdict = if err <= BROKEN_THRESHOLD { Verdict::Broken } else { Verdict::Resisted };
    let report = AttackReport::new(AttackKind::LinearEquation, err, pairs.len() as u64, verdict)
        .with_note(format!("layer {layer_id}, {m}x{n}, intercept fitted: {fit_bias}"));
    let w_c_hat = w_d.map(|d| w_hat.sub(d));
    Ok(LinEqRecovery { report, w_hat, bias_hat, w_c_hat })
}
