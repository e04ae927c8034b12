//! Fine-tuning what David holds to see how much of the owner's risk it can
//! win back. A toy-scale stand-in for the safety property: the output is a
//! risk curve and κ, not a pass/fail.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use slip_core::checkpoint::DavidBundle;
use slip_core::decompose::{usefulness_ratio, PlannedModel};
use slip_core::linalg::Matrix;
use slip_core::models::{Activation, Layer, ModelKind, ModelParams};

use crate::report::{AttackKind, AttackReport, Verdict};
use crate::RedteamError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    /// Half squared error against the one-hot label.
    Mse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Gaussian-mixture classification split three ways: the owner's training
/// data, public data the attacker may use, and evaluation data.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub dim: usize,
    pub classes: usize,
    pub loss: Loss,
    pub train: Dataset,
    pub public: Dataset,
    pub eval: Dataset,
}

impl EvalTask {
    pub fn synthetic(seed: u64, dim: usize, classes: usize, sizes: [usize; 3], loss: Loss) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let centre = Normal::new(0.0, 1.0).expect("std");
        let noise = Normal::new(0.0, 1.0).expect("std");
        let centres: Vec<Vec<f64>> =
            (0..classes).map(|_| (0..dim).map(|_| centre.sample(&mut rng)).collect()).collect();
        let mut draw = |n: usize| {
            let mut d = Dataset { x: Vec::with_capacity(n), y: Vec::with_capacity(n) };
            for i in 0..n {
                let c = i % classes;
                d.x.push(centres[c].iter().map(|m| m + noise.sample(&mut rng)).collect());
                d.y.push(c);
            }
            d
        };
        let train = draw(sizes[0]);
        let public = draw(sizes[1]);
        let eval = draw(sizes[2]);
        EvalTask { dim, classes, loss, train, public, eval }
    }

    /// No sample appears in two splits.
    pub fn splits_disjoint(&self) -> bool {
        let sets = [&self.train, &self.public, &self.eval];
        for (i, a) in sets.iter().enumerate() {
            for b in &sets[i + 1..] {
                if a.x.iter().any(|x| b.x.contains(x)) {
                    return false;
                }
            }
        }
        true
    }
}

struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn forward(model: &ModelParams, x: &[f64]) -> Trace {
    let mut post = vec![x.to_vec()];
    let mut pre = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        let mut z = l.weight.matvec(post.last().expect("input"));
        if let Some(b) = &l.bias {
            z.iter_mut().zip(b).for_each(|(z, b)| *z += b);
        }
        let mut a = z.clone();
        l.activation.apply(&mut a);
        pre.push(z);
        post.push(a);
    }
    Trace { pre, post }
}

fn sample_loss(out: &[f64], y: usize, loss: Loss) -> (f64, Vec<f64>) {
    match loss {
        Loss::CrossEntropy => {
            let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = out.iter().map(|o| (o - max).exp()).sum();
            let log_z = max + sum.ln();
            let grad = out.iter().enumerate().map(|(i, o)| (o - log_z).exp() - f64::from(i == y)).collect();
            (log_z - out[y], grad)
        }
        Loss::Mse => {
            let diff: Vec<f64> = out.iter().enumerate().map(|(i, o)| o - f64::from(i == y)).collect();
            (0.5 * diff.iter().map(|d| d * d).sum::<f64>(), diff)
        }
    }
}

/// Mean loss of `model` on `data`.
pub fn risk(model: &ModelParams, data: &Dataset, loss: Loss) -> f64 {
    let total: f64 = data
        .x
        .iter()
        .zip(&data.y)
        .map(|(x, &y)| sample_loss(&forward(model, x).post.last().unwrap()[..], y, loss).0)
        .sum();
    total / data.len() as f64
}

/// One full-batch gradient step on every weight and bias. Missing biases
/// are created as zeros first.
pub fn gradient_step(model: &mut ModelParams, data: &Dataset, loss: Loss, lr: f64) {
    for l in &mut model.layers {
        if l.bias.is_none() {
            l.bias = Some(vec![0.0; l.out_dim()]);
        }
    }
    let mut gw: Vec<Matrix> = model.layers.iter().map(|l| Matrix::zeros(l.out_dim(), l.in_dim())).collect();
    let mut gb: Vec<Vec<f64>> = model.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect();
    for (x, &y) in data.x.iter().zip(&data.y) {
        let t = forward(model, x);
        let (_, mut delta) = sample_loss(t.post.last().unwrap(), y, loss);
        for i in (0..model.layers.len()).rev() {
            let layer = &model.layers[i];
            if layer.activation == Activation::Relu {
                delta.iter_mut().zip(&t.pre[i]).for_each(|(d, z)| {
                    if *z <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            let a_in = &t.post[i];
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                gw[i].row_mut(r).iter_mut().zip(a_in).for_each(|(g, a)| *g += d * a);
                gb[i][r] += d;
            }
            if i > 0 {
                delta = layer.weight.matvec_t(&delta);
            }
        }
    }
    let step = lr / data.len() as f64;
    for (i, l) in model.layers.iter_mut().enumerate() {
        l.weight = l.weight.sub(&gw[i].scaled(step));
        let b = l.bias.as_mut().expect("created above");
        b.iter_mut().zip(&gb[i]).for_each(|(b, g)| *b -= step * g);
    }
}

/// Full-batch gradient descent; returns the training risk after each epoch.
pub fn train(model: &mut ModelParams, data: &Dataset, loss: Loss, epochs: usize, lr: f64) -> Vec<f64> {
    (0..epochs)
        .map(|_| {
            gradient_step(model, data, loss, lr);
            risk(model, data, loss)
        })
        .collect()
}

/// What David holds: `W^D` in place of each split weight, and no bias on
/// split layers (those stay with Charlie).
pub fn exposed_model(planned: &PlannedModel) -> ModelParams {
    let mut m = planned.model.clone();
    for (i, l) in m.layers.iter_mut().enumerate() {
        if planned.assignments[i].is_split() {
            l.weight = planned.david_weight(i).clone();
            l.bias = None;
        }
    }
    m
}

/// [`exposed_model`] rebuilt from a David checkpoint.
pub fn exposed_from_bundle(bundle: &DavidBundle, template: &ModelParams) -> Result<ModelParams, RedteamError> {
    if bundle.layers.len() != template.layers.len() {
        return Err(RedteamError::Domain("bundle and template disagree on layer count".into()));
    }
    let layers = bundle
        .layers
        .iter()
        .zip(&template.layers)
        .map(|(d, t)| Layer { id: t.id, weight: d.w.clone(), bias: d.bias.clone(), activation: d.activation })
        .collect();
    Ok(ModelParams { kind: template.kind, layers, max_tokens: template.max_tokens })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestorePoint {
    pub epoch: usize,
    pub risk: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationReport {
    pub baseline_risk: f64,
    pub exposed_risk: f64,
    pub restored_risk: f64,
    /// `baseline / restored`; 1 means the attacker matched the owner.
    pub kappa: f64,
    pub curve: Vec<RestorePoint>,
    pub note: String,
}

impl RestorationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,risk,kappa\n");
        for p in &self.curve {
            s.push_str(&format!("{},{:.12},{:.12}\n", p.epoch, p.risk, p.kappa));
        }
        s
    }

    /// Trailing moving average of the risk curve.
    pub fn smoothed_risk(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let r: Vec<f64> = self.curve.iter().map(|p| p.risk).collect();
        (0..r.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                r[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    pub fn trend_non_increasing(&self, window: usize) -> bool {
        self.smoothed_risk(window).windows(2).all(|p| p[1] <= p[0] + 1e-12 * p[0].abs())
    }

    /// `broken` when the attacker gets within 10% of the owner's risk.
    pub fn attack_report(&self) -> AttackReport {
        let verdict = if self.kappa >= 0.9 { Verdict::Broken } else { Verdict::Resisted };
        let epochs = self.curve.last().map_or(0, |p| p.epoch) as u64;
        AttackReport::new(AttackKind::Restoration, self.kappa, epochs, verdict).with_note(self.note.clone())
    }
}

/// Fine-tunes every exposed parameter on the task's public split and records
/// the evaluation risk after each epoch.
pub fn restoration_attack(
    exposed: &ModelParams,
    baseline_risk: f64,
    task: &EvalTask,
    epochs: usize,
    lr: f64,
) -> Result<RestorationReport, RedteamError> {
    if exposed.kind != ModelKind::Mlp {
        return Err(RedteamError::Domain("restoration runs on MLPs".into()));
    }
    let mut model = exposed.clone();
    let kappa = |r: f64| usefulness_ratio(baseline_risk, r).map(|u| u.kappa);
    let exposed_risk = risk(&model, &task.eval, task.loss);
    let mut curve = vec![RestorePoint { epoch: 0, risk: exposed_risk, kappa: kappa(exposed_risk)? }];
    for epoch in 1..=epochs {
        gradient_step(&mut model, &task.public, task.loss, lr);
        let r = risk(&model, &task.eval, task.loss);
        curve.push(RestorePoint { epoch, risk: r, kappa: kappa(r)? });
    }
    let last = *curve.last().expect("epoch 0 recorded");
    Ok(RestorationReport {
        baseline_risk,
        exposed_risk,
        restored_risk: last.risk,
        kappa: last.kappa,
        curve,
        note: "surrogate for safety: full gradient descent on public data, toy scale".into(),
    })
}
