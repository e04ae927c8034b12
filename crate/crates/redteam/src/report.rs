use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Broken,
    Resisted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    LinearEquation,
    SubspaceK1,
    Sigma1Trace,
    Uniformity,
    MutualInformation,
    Restoration,
}

impl AttackKind {
    /// What `success_metric` measures for this attack.
    pub fn metric_name(self) -> &'static str {
        match self {
            AttackKind::LinearEquation => "relative_frobenius_error",
            AttackKind::SubspaceK1 => "min_abs_cosine",
            AttackKind::Sigma1Trace => "relative_error",
            AttackKind::Uniformity => "p_value",
            AttackKind::MutualInformation => "bits",
            AttackKind::Restoration => "kappa",
        }
    }

    fn metric_in_domain(self, m: f64) -> bool {
        match self {
            AttackKind::SubspaceK1 | AttackKind::Uniformity => (0.0..=1.0 + 1e-12).contains(&m),
            _ => m >= 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack_name: AttackKind,
    pub metric: String,
    pub success_metric: f64,
    pub queries_used: u64,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl AttackReport {
    /// Panics when the metric is outside the attack's domain; that is a bug
    /// in the attack, not an input error.
    pub fn new(kind: AttackKind, success_metric: f64, queries_used: u64, verdict: Verdict) -> Self {
        assert!(
            kind.metric_in_domain(success_metric),
            "{} = {success_metric} is outside its domain",
            kind.metric_name()
        );
        AttackReport {
            attack_name: kind,
            metric: kind.metric_name().to_string(),
            success_metric,
            queries_used,
            verdict,
            notes: vec![],
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let r = AttackReport::new(AttackKind::Uniformity, 0.3, 100, Verdict::Resisted);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["attack_name"], "uniformity");
        assert_eq!(v["metric"], "p_value");
        assert_eq!(v["verdict"], "resisted");
        assert_eq!(serde_json::from_str::<AttackReport>(&r.to_json()).unwrap(), r);
    }

    #[test]
    #[should_panic]
    fn cosine_above_one_is_a_bug() {
        AttackReport::new(AttackKind::SubspaceK1, 1.5, 0, Verdict::Broken);
    }
}
