use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use slip_core::checkpoint::{densified_layers, load_model, save_model, CharlieBundle, DavidBundle};
use slip_core::decompose::{
    parameter_density, plan_decomposition, spectral_profile, PlannedModel, SplitPlan, DEFAULT_K,
};
use slip_core::linalg::relative_frobenius;
use slip_core::models::{toy_attention, toy_mlp, ModelParams, ToyTransformerShape};
use slip_core::qforward::forward_reference_quantized;
use slip_core::ring::{RingParams, MERSENNE_61};

use crate::io::{emit, read_input, read_json, require_files, write_json, OutputFile, Usage};

/// Seed used by the presets when none is given.
pub const PRESET_SEED: u64 = 7;

#[allow(clippy::enum_variant_names)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    ToyMlp,
    ToyAttn,
    ToyTransformer,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
    /// Layer widths for toy-mlp, input first.
    #[arg(long, value_delimiter = ',', default_value = "16,32,32,8")]
    pub dims: Vec<usize>,
    /// Model width for toy-attn and toy-transformer.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub tokens: Option<usize>,
}

pub fn gen(a: &GenArgs, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(PRESET_SEED);
    let model = match a.preset {
        Preset::ToyMlp => {
            if a.dims.len() < 2 || a.dims.contains(&0) {
                return Err(Usage("--dims needs at least two positive widths".into()).into());
            }
            toy_mlp(seed, &a.dims)
        }
        Preset::ToyAttn => {
            let d = a.d.unwrap_or(16);
            toy_attention(seed, d, d, d, a.tokens.unwrap_or(8))
        }
        Preset::ToyTransformer => {
            let def = ToyTransformerShape::default();
            ToyTransformerShape {
                blocks: a.blocks.unwrap_or(def.blocks),
                d: a.d.unwrap_or(def.d),
                hidden: a.hidden.unwrap_or(def.hidden),
                max_tokens: a.tokens.unwrap_or(def.max_tokens),
            }
            .build(seed)
        }
    };
    model.validate()?;
    save_model(&model, &a.out)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct RingArgs {
    #[arg(long, default_value_t = MERSENNE_61)]
    pub modulus: u64,
    /// Fixed-point scale is 2^scale_bits.
    #[arg(long, default_value_t = 16)]
    pub scale_bits: u32,
}

impl RingArgs {
    pub fn ring(&self) -> Result<RingParams> {
        if self.scale_bits > 40 {
            return Err(Usage(format!("--scale-bits {} is too large", self.scale_bits)).into());
        }
        RingParams::new(self.modulus, 1 << self.scale_bits).map_err(|e| Usage(e.to_string()).into())
    }
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// JSON list of {"block", "layer_type", "K"}.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Without --plan: split every layer of this many leading and trailing blocks.
    #[arg(long, default_value_t = 1, conflicts_with = "plan")]
    pub edge_blocks: u32,
    /// Without --plan: components hidden per split layer (capped by its rank).
    #[arg(long, default_value_t = DEFAULT_K, conflicts_with = "plan")]
    pub k: usize,
}

impl PlanArgs {
    pub fn resolve(&self, model: &ModelParams) -> Result<SplitPlan> {
        match &self.plan {
            Some(p) => {
                let plan: SplitPlan = read_json(p)?;
                plan.validate()?;
                Ok(plan)
            }
            None => Ok(SplitPlan::edge_blocks(model, self.edge_blocks, self.k)),
        }
    }

    fn files(&self) -> Vec<&PathBuf> {
        self.plan.iter().collect()
    }
}

fn planned(model_path: &PathBuf, plan: &PlanArgs) -> Result<PlannedModel> {
    let model = load_model(model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let plan = plan.resolve(&model)?;
    Ok(plan_decomposition(&model, &plan)?)
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[command(flatten)]
    pub ring: RingArgs,
    /// Receives charlie.bin, david.bin and plan.json.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub fn decompose(a: &DecomposeArgs) -> Result<()> {
    require_files([&a.model].into_iter().chain(a.plan.files()))?;
    let ring = a.ring.ring()?;
    let p = planned(&a.model, &a.plan)?;
    let plan = a.plan.resolve(&p.model)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let charlie = CharlieBundle::from_planned(&p, ring);
    let david = DavidBundle::from_planned(&p, ring);
    charlie.save(a.out_dir.join("charlie.bin"))?;
    david.save(a.out_dir.join("david.bin"))?;
    write_json(&a.out_dir.join("plan.json"), &plan)?;

    // reload what was written and check it adds back up
    let c = CharlieBundle::load(a.out_dir.join("charlie.bin"))?;
    let d = DavidBundle::load(a.out_dir.join("david.bin"))?;
    let max_err = densified_layers(&c, &d)
        .iter()
        .zip(&p.model.layers)
        .map(|(w, l)| relative_frobenius(w, &l.weight))
        .fold(0.0, f64::max);
    let density = parameter_density(&plan, &p.model)?;
    let summary = serde_json::json!({
        "split_layers": p.split_count(),
        "layers": p.model.layers.len(),
        "eta": density.eta,
        "charlie_params": density.charlie_params,
        "total_params": density.total_params,
        "dense_warning": density.dense_warning,
        "max_densified_relative_error": max_err,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Layer index in model order.
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn spectrum(a: &SpectrumArgs) -> Result<()> {
    require_files([&a.model])?;
    let model = load_model(&a.model)?;
    let layer = model
        .layers
        .get(a.layer)
        .ok_or_else(|| Usage(format!("model has {} layers, no layer {}", model.layers.len(), a.layer)))?;
    let mut csv = String::from("index,sigma\n");
    for (i, s) in spectral_profile(&layer.weight)?.iter().enumerate() {
        csv.push_str(&format!("{i},{s:e}\n"));
    }
    emit(a.out.as_deref(), &csv)
}

#[derive(Debug, Args)]
pub struct InferLocalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[command(flatten)]
    pub ring: RingArgs,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Monolithic quantized reference: both halves of every layer in one process.
pub fn infer_local(a: &InferLocalArgs) -> Result<()> {
    require_files([&a.model, &a.input].into_iter().chain(a.plan.files()))?;
    let ring = a.ring.ring()?;
    let p = planned(&a.model, &a.plan)?;
    let x = read_input(&a.input)?;
    let y = forward_reference_quantized(&p, &x, &ring)?;
    write_json(&a.out, &OutputFile::new(&y, x.rows(), &ring)?)
}
