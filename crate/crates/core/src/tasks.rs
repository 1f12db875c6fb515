//! Applications built on attribution scores: noisy-demonstration detection,
//! reordering, curation, and perturbation experiments.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::{detail_scores, one_hot, ridge_beta, Attributor, IclInstance, ScoreMode, ScoreVector};
use crate::linalg::{project, Matrix, Projection};
use crate::metrics::{ascending_order, auc_roc, descending_order, mean, standard_error};
use crate::rng::DetRng;

macro_rules! text_enum {
    ($name:ident, $label:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::invalid(
                        $label,
                        format!("unknown value `{other}`, expected one of: {}", [$($text),+].join("|")),
                    )),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Ascending,
    Descending,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub basis: ScoreMode,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// `curve[k]` = fraction of noisy demonstrations among the top `k` by
    /// self-influence; `curve[0] = 0` and `curve[n] = 1`.
    pub fraction_detected_curve: Vec<f64>,
    pub auc_roc: f64,
    pub noisy_mask: Vec<bool>,
    /// Demonstration indices by descending self-influence.
    pub order: Vec<usize>,
}

fn require_self(scores: &ScoreVector, op: &'static str) -> Result<()> {
    if scores.mode != ScoreMode::SelfInfluence {
        return Err(Error::invalid(
            "mode",
            format!("{op} needs self-influence scores, got {}", scores.mode),
        ));
    }
    Ok(())
}

/// Ranks demonstrations by descending self-influence and measures how quickly
/// the noisy ones surface.
pub fn detect_noisy(scores: &ScoreVector, noisy_mask: &[bool]) -> Result<DetectionReport> {
    require_self(scores, "noisy detection")?;
    if noisy_mask.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            op: "detect_noisy",
            expected: format!("mask of length {}", scores.len()),
            actual: format!("length {}", noisy_mask.len()),
        });
    }
    let total = noisy_mask.iter().filter(|&&b| b).count();
    if total == 0 {
        return Err(Error::invalid(
            "noisy_mask",
            "no noisy demonstrations; AUC is undefined",
        ));
    }
    let order = descending_order(&scores.scores);
    let mut curve = Vec::with_capacity(order.len() + 1);
    curve.push(0.0);
    let mut found = 0usize;
    for &i in &order {
        found += usize::from(noisy_mask[i]);
        curve.push(found as f64 / total as f64);
    }
    Ok(DetectionReport {
        fraction_detected_curve: curve,
        auc_roc: auc_roc(&scores.scores, noisy_mask)?,
        noisy_mask: noisy_mask.to_vec(),
        order,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReorderPolicy {
    /// The two highest-scoring demonstrations first (higher first), then the
    /// rest by ascending score.
    #[default]
    Top2FrontThenAscending,
    Descending,
}

text_enum!(ReorderPolicy, "policy" {
    Top2FrontThenAscending => "top2_front_then_ascending",
    Descending => "descending",
});

pub fn reorder(scores: &ScoreVector, policy: ReorderPolicy) -> Result<Ranking> {
    require_self(scores, "reordering")?;
    let s = &scores.scores;
    let (order, direction) = match policy {
        ReorderPolicy::Descending => (descending_order(s), Direction::Descending),
        ReorderPolicy::Top2FrontThenAscending => {
            if s.len() < 2 {
                return Err(Error::invalid(
                    "policy",
                    format!(
                        "top2_front_then_ascending needs at least 2 demonstrations, got {}",
                        s.len()
                    ),
                ));
            }
            let top: Vec<usize> = descending_order(s).into_iter().take(2).collect();
            let rest = ascending_order(s).into_iter().filter(|i| !top.contains(i));
            (top.iter().copied().chain(rest).collect(), Direction::Ascending)
        }
    };
    Ok(Ranking {
        order,
        basis: ScoreMode::SelfInfluence,
        direction,
    })
}

/// A labelled point used as a test-mode anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub embedding: Matrix,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationPlan {
    /// Demonstrations by ascending summed validation influence.
    pub removal_order: Vec<usize>,
    /// `scores_per_validation[i][v]`: test-mode score of demonstration `i` against anchor `v`.
    pub scores_per_validation: Vec<Vec<f64>>,
    pub summed_scores: Vec<f64>,
    pub k: usize,
}

impl CurationPlan {
    /// The `k` demonstrations with the lowest summed influence.
    pub fn removed(&self) -> &[usize] {
        &self.removal_order[..self.k]
    }

    /// Surviving demonstration indices in their original relative order.
    pub fn survivors(&self) -> Vec<usize> {
        let removed = self.removed();
        (0..self.removal_order.len()).filter(|i| !removed.contains(i)).collect()
    }
}

/// Sums each demonstration's test-mode influence over the validation anchors and
/// plans removal of the `k` lowest. The instance's own query is ignored.
pub fn curate(
    instance: &IclInstance,
    validation: &[Anchor],
    lambda: f64,
    projection: Option<&Projection>,
    k: usize,
) -> Result<CurationPlan> {
    if validation.is_empty() {
        return Err(Error::invalid("validation", "needs at least one anchor"));
    }
    let n = instance.len();
    if k > n {
        return Err(Error::invalid("k", format!("cannot remove {k} of {n} demonstrations")));
    }
    let space = match projection {
        Some(p) => instance.project(p)?,
        None => instance.clone(),
    };
    let attributor = Attributor::new(&space, lambda)?;
    let mut per_validation = vec![Vec::with_capacity(validation.len()); n];
    for anchor in validation {
        let m = match projection {
            Some(p) => project(&anchor.embedding, p)?,
            None => anchor.embedding.clone(),
        };
        let y = one_hot(&[anchor.label], instance.num_classes())?;
        for (row, s) in per_validation.iter_mut().zip(attributor.anchor_scores(&m, &y)?) {
            row.push(s);
        }
    }
    let summed: Vec<f64> = per_validation.iter().map(|r| r.iter().sum()).collect();
    Ok(CurationPlan {
        removal_order: ascending_order(&summed),
        scores_per_validation: per_validation,
        summed_scores: summed,
        k,
    })
}

/// Prediction of the internal ridge classifier: `argmax_c (m_query β)_c`, first
/// class on ties. With no demonstrations left the prior is uniform, so class 0.
pub fn synthetic_downstream_eval(instance: &IclInstance, lambda: f64) -> Result<usize> {
    if instance.is_empty() {
        return Ok(0);
    }
    let beta = ridge_beta(
        instance.demo_embeddings(),
        instance.demo_labels(),
        instance.num_classes(),
        lambda,
    )?;
    let logits = instance.query_embedding().matmul(&beta)?;
    Ok(argmax(logits.row(0)))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    Remove,
    Corrupt,
}

text_enum!(PerturbMode, "mode" { Remove => "remove", Corrupt => "corrupt" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    High,
    Low,
    Random,
}

text_enum!(Which, "which" { High => "high", Low => "low", Random => "random" });

/// Identifies one perturbed variant of an instance for an [`Evaluator`].
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub instance_id: &'a str,
    pub mode: PerturbMode,
    pub which: Which,
    pub step: usize,
}

impl EvalContext<'_> {
    /// Key used by [`PredictionTable`]: `<instance_id>/<mode>/<which>/<step>`.
    pub fn key(&self) -> String {
        format!("{}/{}/{}/{}", self.instance_id, self.mode, self.which, self.step)
    }
}

/// Downstream predictor deciding whether a perturbed instance's query is answered.
pub trait Evaluator: Sync {
    fn predict(&self, ctx: &EvalContext<'_>, instance: &IclInstance) -> Result<usize>;
}

/// The internal ridge classifier as the downstream model.
#[derive(Debug, Clone, Copy)]
pub struct RidgeEvaluator {
    pub lambda: f64,
}

impl Evaluator for RidgeEvaluator {
    fn predict(&self, _ctx: &EvalContext<'_>, instance: &IclInstance) -> Result<usize> {
        synthetic_downstream_eval(instance, self.lambda)
    }
}

/// Externally produced predictions keyed by [`EvalContext::key`].
#[derive(Debug, Clone, Default)]
pub struct PredictionTable {
    predictions: BTreeMap<String, usize>,
}

impl PredictionTable {
    pub fn new(predictions: BTreeMap<String, usize>) -> Self {
        Self { predictions }
    }
}

impl Evaluator for PredictionTable {
    fn predict(&self, ctx: &EvalContext<'_>, instance: &IclInstance) -> Result<usize> {
        let key = ctx.key();
        let class = *self
            .predictions
            .get(&key)
            .ok_or_else(|| Error::invalid("predictions", format!("no prediction for `{key}`")))?;
        if class >= instance.num_classes() {
            return Err(Error::LabelOutOfRange {
                row: 0,
                label: class,
                num_classes: instance.num_classes(),
            });
        }
        Ok(class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub mode: PerturbMode,
    pub which: Which,
    pub k: usize,
    pub lambda: f64,
    pub seed: u64,
}

/// Per-instance outcome of a perturbation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTrace {
    pub id: String,
    /// Demonstrations in the order they get perturbed; step `s` touches the first `s`.
    pub sequence: Vec<usize>,
    /// Replacement labels for corrupt mode (one per demonstration), empty otherwise.
    pub corrupted_labels: Vec<usize>,
    /// `correct[s]` for steps `0..=k`.
    pub correct: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Stream ids used by perturbation randomness, offset per instance index.
const RANDOM_ORDER_STREAM: u64 = 1 << 32;
const CORRUPT_STREAM: u64 = 2 << 32;

/// Runs the sweep for one instance. `index` seeds its random streams so results
/// do not depend on which thread handles it.
pub fn perturb_instance(
    id: &str,
    index: usize,
    instance: &IclInstance,
    cfg: &PerturbConfig,
    projection: Option<&Projection>,
    evaluator: &dyn Evaluator,
) -> Result<InstanceTrace> {
    let n = instance.len();
    if cfg.k > n {
        return Err(Error::invalid(
            "k",
            format!("cannot perturb {} of {n} demonstrations", cfg.k),
        ));
    }
    let sequence = match cfg.which {
        Which::Random => DetRng::new(cfg.seed, RANDOM_ORDER_STREAM + index as u64).permutation(n),
        which => {
            let scores = detail_scores(instance, cfg.lambda, ScoreMode::Test, projection)?;
            match which {
                Which::High => descending_order(&scores.scores),
                _ => ascending_order(&scores.scores),
            }
        }
    };
    let corrupted_labels = match cfg.mode {
        PerturbMode::Remove => Vec::new(),
        PerturbMode::Corrupt => {
            let c = instance.num_classes();
            let mut rng = DetRng::new(cfg.seed, CORRUPT_STREAM + index as u64);
            instance
                .demo_labels()
                .iter()
                .map(|&y| (y + 1 + rng.below(c - 1)) % c)
                .collect()
        }
    };
    let truth = instance
        .query_label()
        .ok_or(Error::MissingQueryLabel("perturbation experiments"))?;
    let mut correct = Vec::with_capacity(cfg.k + 1);
    for step in 0..=cfg.k {
        let touched = &sequence[..step];
        let variant = match cfg.mode {
            PerturbMode::Remove => instance.remove_demos(touched),
            PerturbMode::Corrupt => {
                let mut labels = instance.demo_labels().to_vec();
                for &i in touched {
                    labels[i] = corrupted_labels[i];
                }
                instance.with_demo_labels(labels)?
            }
        };
        let ctx = EvalContext {
            instance_id: id,
            mode: cfg.mode,
            which: cfg.which,
            step,
        };
        correct.push(evaluator.predict(&ctx, &variant)? == truth);
    }
    Ok(InstanceTrace {
        id: id.to_string(),
        sequence,
        corrupted_labels,
        correct,
    })
}

/// Mean and standard error of accuracy per step; every trace must have the same length.
pub fn aggregate_accuracy(traces: &[InstanceTrace]) -> Result<AccuracyCurve> {
    let steps = traces.first().map_or(0, |t| t.correct.len());
    if traces.iter().any(|t| t.correct.len() != steps) {
        return Err(Error::invalid("traces", "traces have different step counts"));
    }
    let (mut mu, mut se) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    for s in 0..steps {
        let column: Vec<f64> = traces.iter().map(|t| f64::from(u8::from(t.correct[s]))).collect();
        mu.push(mean(&column));
        se.push(standard_error(&column));
    }
    Ok(AccuracyCurve { mean: mu, stderr: se })
}

/// Perturbs every instance sequentially and aggregates the accuracy curve.
pub fn perturb_experiment(
    dataset: &[(String, IclInstance)],
    cfg: &PerturbConfig,
    projection: Option<&Projection>,
    evaluator: &dyn Evaluator,
) -> Result<(AccuracyCurve, Vec<InstanceTrace>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "no instances"));
    }
    let traces = dataset
        .iter()
        .enumerate()
        .map(|(i, (id, inst))| perturb_instance(id, i, inst, cfg, projection, evaluator))
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate_accuracy(&traces)?, traces))
}
