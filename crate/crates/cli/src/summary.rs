//! Manifest-level artifacts assembled by the CLI from per-instance results.

use detail_core::data_io::{curve_csv, Artifact};
use detail_core::tasks::{AccuracyCurve, CurationPlan, DetectionReport, InstanceTrace, PerturbConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDetection {
    pub id: String,
    /// AUC against the same scores with the noisy mask shuffled.
    pub shuffled_auc: f64,
    pub report: DetectionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectSummary {
    pub median_auc: f64,
    pub shuffled_control_median_auc: f64,
    /// Per-step mean of the instances' fraction-detected curves.
    pub mean_fraction_detected: Vec<f64>,
    pub instances: Vec<InstanceDetection>,
}

impl Artifact for DetectSummary {
    fn to_csv(&self) -> String {
        curve_csv(&self.mean_fraction_detected)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceCuration {
    pub id: String,
    /// Whether the ridge classifier answers the instance's query, before and
    /// after removal; absent when the query is unlabelled.
    pub query_correct_before: Option<bool>,
    pub query_correct_after: Option<bool>,
    pub plan: CurationPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurateSummary {
    pub k: usize,
    pub validation_anchors: usize,
    pub accuracy_before: Option<f64>,
    pub accuracy_after: Option<f64>,
    pub instances: Vec<InstanceCuration>,
}

impl Artifact for CurateSummary {
    fn to_csv(&self) -> String {
        let mut out = String::from("id,position,index,score,removed\n");
        for inst in &self.instances {
            let plan = &inst.plan;
            for (p, &i) in plan.removal_order.iter().enumerate() {
                out.push_str(&format!(
                    "{},{p},{i},{},{}\n",
                    inst.id,
                    plan.summed_scores[i],
                    p < plan.k
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSummary {
    pub config: PerturbConfig,
    pub curve: AccuracyCurve,
    pub traces: Vec<InstanceTrace>,
}

impl Artifact for PerturbSummary {
    fn to_csv(&self) -> String {
        let mut out = String::from("step,mean,stderr\n");
        for (s, (m, e)) in self.curve.mean.iter().zip(&self.curve.stderr).enumerate() {
            out.push_str(&format!("{s},{m},{e}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub lambda: f64,
    pub spearman: f64,
    /// Test-mode scores.
    pub detail: Vec<f64>,
    /// Exact change in query loss when each demonstration is left out.
    pub oracle: Vec<f64>,
}

impl Artifact for OracleReport {
    fn to_csv(&self) -> String {
        let mut out = String::from("index,detail,oracle\n");
        for (i, (a, b)) in self.detail.iter().zip(&self.oracle).enumerate() {
            out.push_str(&format!("{i},{a},{b}\n"));
        }
        out
    }
}
