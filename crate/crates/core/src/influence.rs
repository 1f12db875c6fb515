//! Influence of in-context demonstrations under the internal kernel ridge regression.
//!
//! A transformer reading `n` demonstrations is modelled as fitting a ridge
//! regression `β` on their hidden states `m(x_i)` against one-hot labels.
//! A demonstration's attribution score is the inner product between the loss
//! gradient at an anchor point (the query, or the demonstration itself) and the
//! demonstration's influence on `β`, `(K + λI)⁻¹ ∇_β L(x_i, y_i)`, where
//! `K = mᵀm` is the feature-space Gram matrix.
//!
//! Constant factors (`n`, the 2 of the squared loss) are dropped throughout.
//! Every downstream consumer uses ranks only, and positive scaling does not
//! change ranks.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gram, project, Cholesky, GramMode, Matrix, Projection};

/// One demonstration set plus its query.
#[derive(Debug, Clone, PartialEq)]
pub struct IclInstance {
    demo_embeddings: Matrix,
    demo_labels: Vec<usize>,
    query_embedding: Matrix,
    query_label: Option<usize>,
    num_classes: usize,
}

impl IclInstance {
    pub fn new(
        demo_embeddings: Matrix,
        demo_labels: Vec<usize>,
        query_embedding: Matrix,
        query_label: Option<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(
                "num_classes",
                format!("must be >= 2, got {num_classes}"),
            ));
        }
        if demo_labels.len() != demo_embeddings.rows() {
            return Err(Error::DimensionMismatch {
                op: "IclInstance::new",
                expected: format!("{} labels", demo_embeddings.rows()),
                actual: format!("{} labels", demo_labels.len()),
            });
        }
        if query_embedding.rows() != 1 || query_embedding.cols() != demo_embeddings.cols() {
            return Err(Error::DimensionMismatch {
                op: "IclInstance::new",
                expected: format!("query of shape 1x{}", demo_embeddings.cols()),
                actual: format!("{}x{}", query_embedding.rows(), query_embedding.cols()),
            });
        }
        for (row, &label) in demo_labels.iter().enumerate() {
            check_label(row, label, num_classes)?;
        }
        if let Some(label) = query_label {
            check_label(demo_labels.len(), label, num_classes)?;
        }
        demo_embeddings.check_finite("demonstration embeddings")?;
        query_embedding.check_finite("query embedding")?;
        Ok(Self {
            demo_embeddings,
            demo_labels,
            query_embedding,
            query_label,
            num_classes,
        })
    }

    pub fn demo_embeddings(&self) -> &Matrix {
        &self.demo_embeddings
    }

    pub fn demo_labels(&self) -> &[usize] {
        &self.demo_labels
    }

    pub fn query_embedding(&self) -> &Matrix {
        &self.query_embedding
    }

    pub fn query_label(&self) -> Option<usize> {
        self.query_label
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of demonstrations.
    pub fn len(&self) -> usize {
        self.demo_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demo_labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.demo_embeddings.cols()
    }

    /// Projects demonstrations and query through `p`.
    pub fn project(&self, p: &Projection) -> Result<IclInstance> {
        Ok(IclInstance {
            demo_embeddings: project(&self.demo_embeddings, p)?,
            demo_labels: self.demo_labels.clone(),
            query_embedding: project(&self.query_embedding, p)?,
            query_label: self.query_label,
            num_classes: self.num_classes,
        })
    }

    /// Keeps the listed demonstrations in the given order.
    pub fn select_demos(&self, keep: &[usize]) -> IclInstance {
        IclInstance {
            demo_embeddings: self.demo_embeddings.select_rows(keep),
            demo_labels: keep.iter().map(|&i| self.demo_labels[i]).collect(),
            query_embedding: self.query_embedding.clone(),
            query_label: self.query_label,
            num_classes: self.num_classes,
        }
    }

    /// Drops the listed demonstrations; survivors keep their relative order.
    pub fn remove_demos(&self, remove: &[usize]) -> IclInstance {
        let keep: Vec<usize> = (0..self.len()).filter(|i| !remove.contains(i)).collect();
        self.select_demos(&keep)
    }

    pub fn with_demo_labels(&self, labels: Vec<usize>) -> Result<IclInstance> {
        IclInstance::new(
            self.demo_embeddings.clone(),
            labels,
            self.query_embedding.clone(),
            self.query_label,
            self.num_classes,
        )
    }

    pub fn with_query(&self, embedding: Matrix, label: Option<usize>) -> Result<IclInstance> {
        IclInstance::new(
            self.demo_embeddings.clone(),
            self.demo_labels.clone(),
            embedding,
            label,
            self.num_classes,
        )
    }
}

fn check_label(row: usize, label: usize, num_classes: usize) -> Result<()> {
    if label >= num_classes {
        return Err(Error::LabelOutOfRange {
            row,
            label,
            num_classes,
        });
    }
    Ok(())
}

/// Rows of the identity indexed by `labels`.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Matrix> {
    let mut y = Matrix::zeros(labels.len(), num_classes);
    for (row, &label) in labels.iter().enumerate() {
        check_label(row, label, num_classes)?;
        y.set(row, label, 1.0);
    }
    Ok(y)
}

/// Fitted internal ridge regression.
#[derive(Debug, Clone)]
pub struct RidgeFit {
    /// width x C weight matrix.
    pub beta: Matrix,
    pub lambda: f64,
    /// `K_ℐ = mᵀm`, width x width.
    pub gram_feature: Matrix,
    /// `K_β = m mᵀ`, n x n.
    pub gram_sample: Matrix,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid(
            "lambda",
            format!("must be finite and >= 0, got {lambda}"),
        ));
    }
    Ok(())
}

/// Dual-form ridge weights `mᵀ (m mᵀ + λI)⁻¹ Y`. Also returns the sample Gram matrix.
fn dual_beta(demos: &Matrix, targets: &Matrix, lambda: f64) -> Result<(Matrix, Matrix)> {
    check_lambda(lambda)?;
    let gram_sample = gram(demos, GramMode::Sample)?;
    let alpha = Cholesky::factor(&gram_sample, lambda)?.solve(targets)?;
    Ok((demos.t_matmul(&alpha)?, gram_sample))
}

/// Ridge weights for `demos` against one-hot `labels`; an empty demonstration
/// set yields `β = 0`.
pub fn ridge_beta(demos: &Matrix, labels: &[usize], num_classes: usize, lambda: f64) -> Result<Matrix> {
    if labels.is_empty() {
        check_lambda(lambda)?;
        return Ok(Matrix::zeros(demos.cols(), num_classes));
    }
    let y = one_hot(labels, num_classes)?;
    Ok(dual_beta(demos, &y, lambda)?.0)
}

pub fn fit_ridge(instance: &IclInstance, lambda: f64) -> Result<RidgeFit> {
    let y = one_hot(&instance.demo_labels, instance.num_classes)?;
    let (beta, gram_sample) = dual_beta(&instance.demo_embeddings, &y, lambda)?;
    beta.check_finite("ridge weights")?;
    let gram_feature = gram(&instance.demo_embeddings, GramMode::Feature)?;
    Ok(RidgeFit {
        beta,
        lambda,
        gram_feature,
        gram_sample,
    })
}

/// `mᵀ(mβ − y) + λβ` for a single point `m` (1 x width) with one-hot target `y` (1 x C).
pub fn grad_loss(m: &Matrix, y_onehot: &Matrix, fit: &RidgeFit) -> Result<Matrix> {
    if m.rows() != 1 || m.cols() != fit.beta.rows() {
        return Err(Error::DimensionMismatch {
            op: "grad_loss",
            expected: format!("embedding of shape 1x{}", fit.beta.rows()),
            actual: format!("{}x{}", m.rows(), m.cols()),
        });
    }
    if y_onehot.shape() != (1, fit.beta.cols()) {
        return Err(Error::DimensionMismatch {
            op: "grad_loss",
            expected: format!("target of shape 1x{}", fit.beta.cols()),
            actual: format!("{}x{}", y_onehot.rows(), y_onehot.cols()),
        });
    }
    let residual = m.matmul(&fit.beta)?.sub(y_onehot)?;
    let mut grad = m.t_matmul(&residual)?;
    grad.add_scaled(fit.lambda, &fit.beta)?;
    Ok(grad)
}

/// `(K_ℐ + λI)⁻¹ ∇_β L(m_i, y_i)`: the demonstration's effect on `β`, with the
/// leading `n` dropped.
pub fn influence_reg(m_i: &Matrix, y_i_onehot: &Matrix, fit: &RidgeFit) -> Result<Matrix> {
    let hessian = Cholesky::factor(&fit.gram_feature, fit.lambda)?;
    hessian.solve(&grad_loss(m_i, y_i_onehot, fit)?)
}

/// Squared error `‖mβ − y‖²_F` without the regularizer.
pub fn squared_error(m: &Matrix, y_onehot: &Matrix, beta: &Matrix) -> Result<f64> {
    let r = m.matmul(beta)?.sub(y_onehot)?;
    r.frobenius_dot(&r)
}

/// Regularized loss `‖mβ − y‖²_F + λ‖β‖²_F`.
pub fn ridge_loss(m: &Matrix, y_onehot: &Matrix, beta: &Matrix, lambda: f64) -> Result<f64> {
    Ok(squared_error(m, y_onehot, beta)? + lambda * beta.frobenius_dot(beta)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Test,
    #[serde(rename = "self")]
    SelfInfluence,
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreMode::Test => "test",
            ScoreMode::SelfInfluence => "self",
        })
    }
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(ScoreMode::Test),
            "self" => Ok(ScoreMode::SelfInfluence),
            other => Err(Error::invalid("mode", format!("expected test|self, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub mode: ScoreMode,
    pub lambda: f64,
    pub projection_seed: Option<u64>,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Cached state for scoring one demonstration set against any number of anchors.
///
/// The Hessian is factorized once and every demonstration's `ℐ_reg` is
/// precomputed, so each additional anchor costs one gradient and `n` inner
/// products.
#[derive(Debug, Clone)]
pub struct Attributor {
    fit: RidgeFit,
    demos: Matrix,
    targets: Matrix,
    influences: Vec<Matrix>,
}

impl Attributor {
    /// `instance` must already live in the space scoring happens in (projected, if at all).
    pub fn new(instance: &IclInstance, lambda: f64) -> Result<Self> {
        let fit = fit_ridge(instance, lambda)?;
        let hessian = Cholesky::factor(&fit.gram_feature, lambda)?;
        let targets = one_hot(&instance.demo_labels, instance.num_classes)?;
        let demos = instance.demo_embeddings.clone();
        let influences = (0..instance.len())
            .map(|i| {
                let g = grad_loss(&demos.row_matrix(i), &targets.row_matrix(i), &fit)?;
                hessian.solve(&g)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            fit,
            demos,
            targets,
            influences,
        })
    }

    pub fn fit(&self) -> &RidgeFit {
        &self.fit
    }

    pub fn influence_reg(&self, i: usize) -> &Matrix {
        &self.influences[i]
    }

    /// Scores every demonstration against the anchor `(m, y)`.
    pub fn anchor_scores(&self, m: &Matrix, y_onehot: &Matrix) -> Result<Vec<f64>> {
        let g = grad_loss(m, y_onehot, &self.fit)?;
        self.influences.iter().map(|infl| g.frobenius_dot(infl)).collect()
    }

    /// Anchor of demonstration `i` is its own in-context embedding and label.
    pub fn self_score(&self, i: usize) -> Result<f64> {
        let g = grad_loss(&self.demos.row_matrix(i), &self.targets.row_matrix(i), &self.fit)?;
        g.frobenius_dot(&self.influences[i])
    }

    pub fn self_scores(&self) -> Result<Vec<f64>> {
        (0..self.influences.len()).map(|i| self.self_score(i)).collect()
    }
}

fn maybe_project<'a>(instance: &'a IclInstance, projection: Option<&Projection>) -> Result<Cow<'a, IclInstance>> {
    match projection {
        None => Ok(Cow::Borrowed(instance)),
        Some(p) => {
            if p.source_dim() != instance.width() {
                return Err(Error::DimensionMismatch {
                    op: "detail_scores projection",
                    expected: format!("projection from {} dims", instance.width()),
                    actual: format!("projection from {} dims", p.source_dim()),
                });
            }
            Ok(Cow::Owned(instance.project(p)?))
        }
    }
}

/// DETAIL scores for every demonstration of `instance`.
///
/// With a projection, embeddings are projected before `β` is fit.
pub fn detail_scores(
    instance: &IclInstance,
    lambda: f64,
    mode: ScoreMode,
    projection: Option<&Projection>,
) -> Result<ScoreVector> {
    if mode == ScoreMode::Test && instance.query_label.is_none() {
        return Err(Error::MissingQueryLabel("test-mode scoring"));
    }
    let space = maybe_project(instance, projection)?;
    let attributor = Attributor::new(&space, lambda)?;
    let scores = match mode {
        ScoreMode::Test => {
            let label = instance.query_label.expect("checked above");
            let y = one_hot(&[label], instance.num_classes)?;
            attributor.anchor_scores(&space.query_embedding, &y)?
        }
        ScoreMode::SelfInfluence => attributor.self_scores()?,
    };
    if let Some(p) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            what: "scores",
            row: p,
            col: 0,
        });
    }
    Ok(ScoreVector {
        scores,
        mode,
        lambda,
        projection_seed: projection.map(Projection::seed),
    })
}

/// Exact leave-one-out change in query loss: refit without demonstration `i`
/// and report `L(query; β₋ᵢ) − L(query; β)` under squared error.
pub fn exact_loo_oracle(instance: &IclInstance, lambda: f64) -> Result<Vec<f64>> {
    let n = instance.len();
    if n < 2 {
        return Err(Error::invalid(
            "instance",
            format!("leave-one-out needs n >= 2, got {n}"),
        ));
    }
    let label = instance
        .query_label
        .ok_or(Error::MissingQueryLabel("leave-one-out oracle"))?;
    let yq = one_hot(&[label], instance.num_classes)?;
    let c = instance.num_classes;
    let full = ridge_beta(&instance.demo_embeddings, &instance.demo_labels, c, lambda)?;
    let base = squared_error(&instance.query_embedding, &yq, &full)?;
    (0..n)
        .map(|i| {
            let reduced = instance.remove_demos(&[i]);
            let beta = ridge_beta(&reduced.demo_embeddings, &reduced.demo_labels, c, lambda)?;
            Ok(squared_error(&instance.query_embedding, &yq, &beta)? - base)
        })
        .collect()
}
