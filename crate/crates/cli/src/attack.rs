use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use slip_core::checkpoint::{densified_layers, load_model, CharlieBundle, DavidBundle};
use slip_core::decompose::{plan_decomposition, split, LayerType, SplitOptions, SplitPlan, Triplet};
use slip_core::models::toy_mlp;
use slip_core::protocol::{ProtocolMessage, SecurityMode, Transcript};
use slip_core::ring::{MaskSampler, RingParams};
use slip_redteam::restore::{exposed_model, risk, train};
use slip_redteam::{
    chi_square_uniformity, linear_equation_attack, mutual_information_check, restoration_attack, subspace_attack_k1,
    wire_payload_samples, AttackKind, AttackReport, EvalTask, Loss, RedteamError, Verdict,
};
use slip_transport::TranscriptFile;

use crate::io::{emit, require_files, Usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    /// Least-squares weight recovery from transcripts (needs --in, --charlie, --david).
    Lineq,
    /// Hidden singular vectors of a k = 1 split (needs --model).
    Subspace,
    /// Chi-square uniformity of masked payloads (transcripts with --in, else a synthetic probe).
    Uniformity,
    /// Mutual information between secrets and masked values at L = 17.
    Mi,
    /// Fine-tuning David's exposed model on public data.
    Restore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Secure,
    Insecure,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    /// Directory of .slpt transcript files.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Where the JSON report goes; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub charlie: Option<PathBuf>,
    #[arg(long)]
    pub david: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Layer index in model order.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Components hidden: 1 for subspace, the first-layer split for restore.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, value_enum, default_value = "secure")]
    pub mode: Mode,
    /// Bins for transcript uniformity; residues are bucketed by magnitude.
    #[arg(long, default_value_t = 16)]
    pub bins: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Risk curve of the restoration attack.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    let p = p.as_ref().ok_or_else(|| Usage(format!("--kind needs {flag}")))?;
    require_files([p])?;
    Ok(p)
}

fn load_transcripts(dir: &Path, ring: &RingParams) -> Result<Vec<Transcript>> {
    if !dir.is_dir() {
        return Err(Usage(format!("not a directory: {}", dir.display())).into());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "slpt"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let f = TranscriptFile::load(p).with_context(|| format!("loading {}", p.display()))?;
            f.to_transcript(ring).with_context(|| format!("decoding {}", p.display()))
        })
        .collect()
}

pub fn attack(a: &AttackArgs, seed: u64) -> Result<()> {
    let report = match a.kind {
        Kind::Lineq => lineq(a)?,
        Kind::Subspace => subspace(a)?,
        Kind::Uniformity => uniformity(a, seed)?,
        Kind::Mi => mi(a, seed)?,
        Kind::Restore => restore(a, seed)?,
    };
    let mut json = report.to_json();
    json.push('\n');
    emit(a.report.as_deref(), &json)
}

fn lineq(a: &AttackArgs) -> Result<AttackReport> {
    let dir = a.input.as_ref().ok_or_else(|| Usage("--kind lineq needs --in".into()))?;
    let charlie = CharlieBundle::load(need(&a.charlie, "--charlie")?)?;
    let david = DavidBundle::load(need(&a.david, "--david")?)?;
    let layer = match a.layer {
        Some(l) => l,
        None => david
            .topology
            .layers
            .iter()
            .position(|l| l.split)
            .ok_or_else(|| Usage("model has no split layer".into()))?,
    };
    let truth =
        densified_layers(&charlie, &david).into_iter().nth(layer).ok_or_else(|| Usage(format!("no layer {layer}")))?;
    let ts = load_transcripts(dir, &david.ring)?;
    let r = linear_equation_attack(&ts, layer as u32, &david.ring, &truth, true, Some(&david.layers[layer].w))?;
    Ok(r.report)
}

fn subspace(a: &AttackArgs) -> Result<AttackReport> {
    let model = load_model(need(&a.model, "--model")?)?;
    let layer = a.layer.unwrap_or(0);
    let w = &model.layers.get(layer).ok_or_else(|| Usage(format!("no layer {layer}")))?.weight;
    let k = a.k.unwrap_or(1);
    let d = split(w, k, SplitOptions { allow_unsafe_k1: true })?;
    match subspace_attack_k1(&d.david, &d.charlie.u.column(0), &d.charlie.v.column(0)) {
        Ok(r) => Ok(r.report),
        Err(e @ RedteamError::Degenerate { .. }) => {
            Ok(AttackReport::new(AttackKind::SubspaceK1, 0.0, 0, Verdict::Resisted).with_note(e.to_string()))
        }
        Err(e) => Err(e.into()),
    }
}

fn uniformity(a: &AttackArgs, seed: u64) -> Result<AttackReport> {
    let stat = match &a.input {
        Some(dir) => {
            let david = DavidBundle::load(need(&a.david, "--david")?)?;
            let l = david.ring.modulus();
            let bins = a.bins;
            let samples: Vec<u64> = load_transcripts(dir, &david.ring)?
                .iter()
                .flat_map(|t| &t.entries)
                .filter_map(|e| match &e.message {
                    ProtocolMessage::MaskedActivation { payload, .. } => Some(payload.values.iter()),
                    _ => None,
                })
                .flatten()
                .map(|&v| (v as u128 * bins as u128 / l as u128) as u64)
                .collect();
            chi_square_uniformity(&samples, bins)?
        }
        None => {
            let mode = match a.mode {
                Mode::Secure => SecurityMode::Secure,
                Mode::Insecure => SecurityMode::Insecure,
            };
            chi_square_uniformity(&wire_payload_samples(mode, seed, a.samples)?, 17)?
        }
    };
    Ok(stat.report(0.01))
}

fn mi(a: &AttackArgs, seed: u64) -> Result<AttackReport> {
    let ring = RingParams::new(17, 1)?;
    let mut secrets = MaskSampler::new(seed, 1);
    let mut pads = MaskSampler::new(seed, 0);
    let s: Vec<u64> = (0..a.samples).map(|_| secrets.next_residue(17)).collect();
    let masked: Vec<u64> = s.iter().map(|&v| ring.add(v, pads.next_residue(17))).collect();
    Ok(mutual_information_check(&s, &masked, 17)?.report())
}

fn restore(a: &AttackArgs, seed: u64) -> Result<AttackReport> {
    let task = EvalTask::synthetic(seed, 16, 4, [512, 256, 512], Loss::CrossEntropy);
    let mut owner = toy_mlp(seed, &[16, 32, 32, 32, 4]);
    train(&mut owner, &task.train, task.loss, 300, 0.1);
    let baseline = risk(&owner, &task.eval, task.loss);
    let k = a.k.unwrap_or(8);
    let plan = if k == 0 {
        SplitPlan::default()
    } else {
        SplitPlan::new(vec![Triplet { block: 0, layer_type: LayerType::Generic, k }])?
    };
    let planned = plan_decomposition(&owner, &plan)?;
    let r = restoration_attack(&exposed_model(&planned), baseline, &task, a.epochs, a.lr)?;
    if let Some(p) = &a.csv {
        std::fs::write(p, r.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(r.attack_report().with_note(format!(
        "baseline risk {:.6}, exposed {:.6}, restored {:.6}",
        r.baseline_risk, r.exposed_risk, r.restored_risk
    )))
}
