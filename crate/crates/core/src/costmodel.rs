//! Closed-form FLOP, transfer and latency model for an edge/cloud split of a
//! feed-forward stack, with a per-phase breakdown.
//!
//! Counting convention: one multiply-add is 2 FLOPs. Edge is David, cloud is
//! Charlie.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> CostError {
    CostError::Invalid { field, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub flops_per_sec: f64,
    pub utilization: f64,
}

impl HardwareSpec {
    pub fn validate(&self) -> Result<(), CostError> {
        if !(self.flops_per_sec.is_finite() && self.flops_per_sec > 0.0) {
            return Err(invalid("flops_per_sec", "must be positive"));
        }
        if !(self.utilization > 0.0 && self.utilization <= 1.0) {
            return Err(invalid("utilization", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub bandwidth_bytes_per_sec: f64,
    /// One-way network delay λ_a in seconds.
    pub delay_sec: f64,
    pub bytes_per_value: u64,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), CostError> {
        if !(self.bandwidth_bytes_per_sec.is_finite() && self.bandwidth_bytes_per_sec > 0.0) {
            return Err(invalid("bandwidth_bytes_per_sec", "must be positive"));
        }
        if !(self.delay_sec.is_finite() && self.delay_sec >= 0.0) {
            return Err(invalid("delay_sec", "must be non-negative"));
        }
        if self.bytes_per_value == 0 {
            return Err(invalid("bytes_per_value", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Total layers.
    pub l: u64,
    /// Decomposed layers.
    pub l_d: u64,
    pub n: u64,
    pub m: u64,
    /// Batch size (tokens).
    pub b: u64,
    /// Singular components kept by the cloud.
    pub k: u64,
    /// Sampled noise vectors per decomposed layer.
    pub l_v: u64,
}

impl ModelShape {
    pub fn validate(&self) -> Result<(), CostError> {
        for (f, v) in [("l", self.l), ("n", self.n), ("m", self.m), ("b", self.b), ("k", self.k)] {
            if v == 0 {
                return Err(invalid(f, "must be positive"));
            }
        }
        if self.l_d > self.l {
            return Err(invalid("l_d", format!("{} decomposed layers exceed {} total", self.l_d, self.l)));
        }
        Ok(())
    }
}

/// How the network delay is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayMode {
    /// λ_a once for the whole transfer volume.
    #[default]
    Aggregate,
    /// λ_a for the input upload and once more per decomposed layer.
    PerRoundTrip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpType {
    Compute,
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Edge,
    Cloud,
    Link,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub phase: String,
    pub op_type: OpType,
    pub side: Side,
    /// How many times the phase runs.
    pub frequency: u64,
    /// FLOPs (compute) or values (transfer) per occurrence.
    pub per_occurrence: u64,
    pub total: u64,
}

/// Phase list of one inference.
pub fn phase_table(s: &ModelShape) -> Vec<PhaseRow> {
    let (n, m, b, k, l_v, l_d) = (s.n, s.m, s.b, s.k, s.l_v, s.l_d);
    let row = |phase: &str, op_type, side, frequency: u64, per: u64| PhaseRow {
        phase: phase.to_string(),
        op_type,
        side,
        frequency,
        per_occurrence: per,
        total: frequency * per,
    };
    use OpType::{Compute, Transfer};
    vec![
        row("upload_input", Transfer, Side::Link, 1, n * b),
        row("edge_only_compute", Compute, Side::Edge, s.l - l_d, 2 * m * n * b + n * b),
        row("edge_partial_compute", Compute, Side::Edge, l_d, 2 * m * n * b),
        row("cloud_partial_compute", Compute, Side::Cloud, l_d, 2 * k * b * (m + n)),
        row("upload_edge_to_cloud", Transfer, Side::Link, l_d, n * b),
        row("cloud_activation_function", Compute, Side::Cloud, l_d, 2 * n * b * (l_v + 1)),
        row("cloud_noise_vector_generation", Compute, Side::Cloud, l_d, 2 * n * b * l_v),
        row("cloud_noise_addition", Compute, Side::Cloud, l_d, n * b),
        row("activation_data_download", Transfer, Side::Link, l_d, n * b),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub flops_edge: u64,
    pub flops_cloud: u64,
    pub flops_full: u64,
    pub transfer_values: u64,
}

/// Closed forms for the edge, cloud and full-model FLOPs and the number of
/// transferred values.
pub fn flops_breakdown(s: &ModelShape) -> FlopsBreakdown {
    let (l, l_d, n, m, b, k, l_v) = (s.l, s.l_d, s.n, s.m, s.b, s.k, s.l_v);
    FlopsBreakdown {
        flops_edge: 2 * m * n * b * l + n * b * (l - l_d),
        flops_full: 2 * m * n * b * l + n * b * l,
        // 2 l_d b (mk + nk + 2 n l_v + 1.5 n), kept in integers
        flops_cloud: l_d * b * (2 * m * k + 2 * n * k + 4 * n * l_v + 3 * n),
        transfer_values: n * b * (2 * l_d + 1),
    }
}

pub fn t_compute(flops: u64, hw: &HardwareSpec) -> f64 {
    flops as f64 / (hw.flops_per_sec * hw.utilization)
}

/// `λ_a + N · s / B`, or with λ_a charged per round trip.
pub fn t_transfer(values: u64, s: &ModelShape, net: &NetworkSpec, mode: DelayMode) -> f64 {
    let delays = match mode {
        DelayMode::Aggregate => 1,
        DelayMode::PerRoundTrip => s.l_d + 1,
    };
    delays as f64 * net.delay_sec + (values * net.bytes_per_value) as f64 / net.bandwidth_bytes_per_sec
}

/// One row of the comparison against published figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedComparison {
    pub metric: String,
    pub computed: f64,
    pub published: f64,
    pub unit: String,
    pub relative_deviation: f64,
    pub tolerance: f64,
    /// The published figure does not follow from the stated formulas.
    pub discrepancy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub shape: ModelShape,
    pub flops_full: u64,
    pub flops_edge: u64,
    pub flops_cloud: u64,
    pub transfer_values: u64,
    pub t_edge: f64,
    pub t_cloud: f64,
    pub t_transfer: f64,
    pub t_total: f64,
    /// `flops_cloud / flops_full`.
    pub offload_fraction: f64,
    pub delay_mode: DelayMode,
    pub phases: Vec<PhaseRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub published: Vec<PublishedComparison>,
}

pub fn total_latency(
    shape: &ModelShape,
    edge: &HardwareSpec,
    cloud: &HardwareSpec,
    net: &NetworkSpec,
    mode: DelayMode,
) -> Result<CostReport, CostError> {
    shape.validate()?;
    edge.validate()?;
    cloud.validate()?;
    net.validate()?;
    let f = flops_breakdown(shape);
    let t_edge = t_compute(f.flops_edge, edge);
    let t_cloud = t_compute(f.flops_cloud, cloud);
    let t_transfer = t_transfer(f.transfer_values, shape, net, mode);
    Ok(CostReport {
        shape: *shape,
        flops_full: f.flops_full,
        flops_edge: f.flops_edge,
        flops_cloud: f.flops_cloud,
        transfer_values: f.transfer_values,
        t_edge,
        t_cloud,
        t_transfer,
        t_total: t_edge + t_cloud + t_transfer,
        offload_fraction: f.flops_cloud as f64 / f.flops_full as f64,
        delay_mode: mode,
        phases: phase_table(shape),
        published: vec![],
    })
}

/// The published parameter set: 224 layers of 4096×4096, 70 decomposed,
/// 32 tokens, k = l_v = 50, fp32 values, a 4 TFLOP/s edge, a 14 TFLOP/s cloud,
/// 40% utilization, 25 MB/s and 35 ms.
pub struct PublishedPreset;

impl PublishedPreset {
    pub const SHAPE: ModelShape = ModelShape { l: 224, l_d: 70, n: 4096, m: 4096, b: 32, k: 50, l_v: 50 };
    pub const EDGE: HardwareSpec = HardwareSpec { flops_per_sec: 4e12, utilization: 0.4 };
    pub const CLOUD: HardwareSpec = HardwareSpec { flops_per_sec: 14e12, utilization: 0.4 };
    pub const NET: NetworkSpec = NetworkSpec { bandwidth_bytes_per_sec: 25e6, delay_sec: 0.035, bytes_per_value: 4 };

    /// Published performance figures with the tolerance each is checked at;
    /// `None` marks figures that the formulas do not reproduce.
    pub const PUBLISHED: [(&'static str, f64, &'static str, Option<f64>); 9] = [
        ("flops_full", 240.547e9, "FLOP", Some(1e-3)),
        ("flops_edge", 240.538e9, "FLOP", Some(1e-3)),
        ("flops_cloud", 3.697e9, "FLOP", Some(1e-3)),
        ("transfer_values", 1.848e6, "values", None),
        ("t_edge", 150.34e-3, "s", Some(5e-3)),
        ("t_cloud", 0.66e-3, "s", Some(5e-2)),
        ("t_transfer", 71.31e-3, "s", None),
        ("t_total", 222.31e-3, "s", None),
        ("offload_fraction", 0.015, "ratio", None),
    ];

    pub fn report(mode: DelayMode) -> CostReport {
        let mut r = total_latency(&Self::SHAPE, &Self::EDGE, &Self::CLOUD, &Self::NET, mode).expect("preset is valid");
        r.published = Self::PUBLISHED
            .iter()
            .map(|&(metric, published, unit, tol)| {
                let computed = match metric {
                    "flops_full" => r.flops_full as f64,
                    "flops_edge" => r.flops_edge as f64,
                    "flops_cloud" => r.flops_cloud as f64,
                    "transfer_values" => r.transfer_values as f64,
                    "t_edge" => r.t_edge,
                    "t_cloud" => r.t_cloud,
                    "t_transfer" => r.t_transfer,
                    "t_total" => r.t_total,
                    _ => r.offload_fraction,
                };
                let relative_deviation = (computed - published).abs() / published.abs();
                // the offload fraction is quoted as a rounded percentage: ±0.2 pp
                let tolerance = tol.unwrap_or(if metric == "offload_fraction" { 0.002 / published } else { 0.0 });
                let discrepancy = tol.is_none() && metric != "offload_fraction" || relative_deviation > tolerance;
                PublishedComparison {
                    metric: metric.to_string(),
                    computed,
                    published,
                    unit: unit.to_string(),
                    relative_deviation,
                    tolerance,
                    discrepancy,
                }
            })
            .collect();
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flops_take_zero_time() {
        assert_eq!(t_compute(0, &PublishedPreset::EDGE), 0.0);
    }

    #[test]
    fn compute_latency_examples() {
        assert!((t_compute(240_538_000_000, &PublishedPreset::EDGE) - 0.150_34).abs() < 1e-5);
        assert!((t_compute(3_697_000_000, &PublishedPreset::CLOUD) - 0.66e-3).abs() < 1e-5);
    }

    #[test]
    fn no_decomposed_layers() {
        let s = ModelShape { l_d: 0, ..PublishedPreset::SHAPE };
        let f = flops_breakdown(&s);
        assert_eq!(f.flops_cloud, 0);
        assert_eq!(f.transfer_values, s.n * s.b);
        assert_eq!(f.flops_edge, f.flops_full);
    }

    #[test]
    fn phase_rows_add_up_to_closed_forms() {
        for s in [PublishedPreset::SHAPE, ModelShape { l: 4, l_d: 2, n: 8, m: 8, b: 1, k: 2, l_v: 2 }] {
            let f = flops_breakdown(&s);
            let sum = |side| phase_table(&s).iter().filter(|r| r.side == side).map(|r| r.total).sum::<u64>();
            assert_eq!(sum(Side::Edge), f.flops_edge);
            assert_eq!(sum(Side::Cloud), f.flops_cloud);
            assert_eq!(sum(Side::Link), f.transfer_values);
        }
    }

    #[test]
    fn zero_delay_and_transfer_sum() {
        let net = NetworkSpec { bandwidth_bytes_per_sec: f64::INFINITY, ..PublishedPreset::NET };
        assert!(net.validate().is_err());
        let net = NetworkSpec { bandwidth_bytes_per_sec: 1e300, delay_sec: 0.0, bytes_per_value: 1 };
        let r = total_latency(
            &PublishedPreset::SHAPE,
            &PublishedPreset::EDGE,
            &PublishedPreset::CLOUD,
            &net,
            DelayMode::Aggregate,
        )
        .unwrap();
        assert!(r.t_transfer < 1e-280);
        assert_eq!(r.t_total, r.t_edge + r.t_cloud + r.t_transfer);
    }

    #[test]
    fn per_round_trip_charges_more_delay() {
        let a = PublishedPreset::report(DelayMode::Aggregate);
        let b = PublishedPreset::report(DelayMode::PerRoundTrip);
        assert!((b.t_transfer - a.t_transfer - 70.0 * 0.035).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ModelShape { l_d: 5, l: 4, ..PublishedPreset::SHAPE }.validate().is_err());
        assert!(HardwareSpec { flops_per_sec: 1.0, utilization: 1.5 }.validate().is_err());
    }
}
