use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use slip_core::costmodel::{
    total_latency, CostReport, DelayMode, HardwareSpec, ModelShape, NetworkSpec, PublishedPreset,
};

use crate::io::{read_json, require_files, write_json, Usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CostPreset {
    /// The published 224-layer parameter set.
    #[value(name = "paper-appendix-c")]
    Published,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Use a built-in parameter set instead of the four JSON files.
    #[arg(long, value_enum)]
    pub preset: Option<CostPreset>,
    #[arg(long, conflicts_with = "preset")]
    pub shape: Option<PathBuf>,
    #[arg(long, conflicts_with = "preset")]
    pub edge: Option<PathBuf>,
    #[arg(long, conflicts_with = "preset")]
    pub cloud: Option<PathBuf>,
    #[arg(long, conflicts_with = "preset")]
    pub net: Option<PathBuf>,
    /// Charge the network delay once per split layer instead of once overall.
    #[arg(long)]
    pub per_round_trip: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cost(a: &CostArgs) -> Result<()> {
    let mode = if a.per_round_trip { DelayMode::PerRoundTrip } else { DelayMode::Aggregate };
    let report = match a.preset {
        Some(CostPreset::Published) => PublishedPreset::report(mode),
        None => {
            let (Some(shape), Some(edge), Some(cloud), Some(net)) = (&a.shape, &a.edge, &a.cloud, &a.net) else {
                return Err(Usage("give --preset or all of --shape --edge --cloud --net".into()).into());
            };
            require_files([shape, edge, cloud, net])?;
            let shape: ModelShape = read_json(shape)?;
            let edge: HardwareSpec = read_json(edge)?;
            let cloud: HardwareSpec = read_json(cloud)?;
            let net: NetworkSpec = read_json(net)?;
            total_latency(&shape, &edge, &cloud, &net, mode)?
        }
    };
    print!("{}", summary(&report));
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn summary(r: &CostReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("flops_full        {}\n", r.flops_full));
    s.push_str(&format!("flops_edge        {}\n", r.flops_edge));
    s.push_str(&format!("flops_cloud       {}\n", r.flops_cloud));
    s.push_str(&format!("transfer_values   {}\n", r.transfer_values));
    s.push_str(&format!("t_edge_ms         {:.2}\n", r.t_edge * 1e3));
    s.push_str(&format!("t_cloud_ms        {:.2}\n", r.t_cloud * 1e3));
    s.push_str(&format!("t_transfer_ms     {:.2}\n", r.t_transfer * 1e3));
    s.push_str(&format!("t_total_ms        {:.2}\n", r.t_total * 1e3));
    s.push_str(&format!("offload_percent   {:.3}\n", r.offload_fraction * 100.0));
    if !r.published.is_empty() {
        s.push_str("\nmetric            computed          published         flag\n");
        for c in &r.published {
            let flag = if c.discrepancy { "DISCREPANCY" } else { "ok" };
            s.push_str(&format!("{:<17} {:<17.6e} {:<17.6e} {flag}\n", c.metric, c.computed, c.published));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_lists_flagged_rows() {
        let s = summary(&PublishedPreset::report(DelayMode::Aggregate));
        assert!(s.contains("t_edge_ms         150.34\n"));
        assert!(s.contains("t_cloud_ms        0.66\n"));
        let flagged: Vec<&str> =
            s.lines().filter(|l| l.ends_with("DISCREPANCY")).map(|l| l.split_whitespace().next().unwrap()).collect();
        assert_eq!(flagged, ["transfer_values", "t_transfer", "t_total"]);
    }

    #[test]
    fn custom_reports_have_no_comparison_table() {
        let r = total_latency(
            &PublishedPreset::SHAPE,
            &PublishedPreset::EDGE,
            &PublishedPreset::CLOUD,
            &PublishedPreset::NET,
            DelayMode::PerRoundTrip,
        )
        .unwrap();
        assert!(!summary(&r).contains("published"));
    }
}
