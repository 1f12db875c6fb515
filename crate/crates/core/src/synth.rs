//! Seeded synthetic in-context instances: class-clustered embeddings with
//! optional label corruption.
//!
//! Each instance draws fresh class means (standard Gaussian, scaled to unit
//! norm); demonstrations and the query sit at their class mean plus isotropic
//! Gaussian noise with per-coordinate standard deviation `cluster_spread`.
//! Instance `i` depends only on `(seed, i)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::IclInstance;
use crate::linalg::Matrix;
use crate::rng::DetRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    /// Demonstrations per instance.
    pub n: usize,
    /// Embedding width.
    pub d: usize,
    pub num_classes: usize,
    pub cluster_spread: f64,
    #[serde(default)]
    pub corrupt_count: usize,
    pub instances: usize,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n", "must be >= 1"));
        }
        if self.d == 0 {
            return Err(Error::invalid("d", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid(
                "num_classes",
                format!("must be >= 2, got {}", self.num_classes),
            ));
        }
        if !(self.cluster_spread.is_finite() && self.cluster_spread > 0.0) {
            return Err(Error::invalid(
                "cluster_spread",
                format!("must be finite and > 0, got {}", self.cluster_spread),
            ));
        }
        if self.corrupt_count > self.n {
            return Err(Error::invalid(
                "corrupt_count",
                format!("{} exceeds n = {}", self.corrupt_count, self.n),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthInstance {
    /// Carries the possibly corrupted demonstration labels.
    pub instance: IclInstance,
    pub noisy_mask: Vec<bool>,
    pub true_labels: Vec<usize>,
}

fn gaussian_row(rng: &mut DetRng, center: &[f64], spread: f64) -> Vec<f64> {
    center.iter().map(|c| c + spread * rng.standard_normal()).collect()
}

/// Generates instance number `index` of `cfg`.
pub fn gen_instance(cfg: &SynthConfig, index: usize) -> Result<SynthInstance> {
    cfg.validate()?;
    let (n, d, c) = (cfg.n, cfg.d, cfg.num_classes);
    let mut rng = DetRng::new(cfg.seed, index as u64);

    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();

    let true_labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let mut demos = Vec::with_capacity(n * d);
    for &y in &true_labels {
        demos.extend(gaussian_row(&mut rng, &means[y], cfg.cluster_spread));
    }
    let query_label = rng.below(c);
    let query = gaussian_row(&mut rng, &means[query_label], cfg.cluster_spread);

    let mut labels = true_labels.clone();
    let mut noisy_mask = vec![false; n];
    if cfg.corrupt_count > 0 {
        for &i in &rng.permutation(n)[..cfg.corrupt_count] {
            labels[i] = (labels[i] + 1 + rng.below(c - 1)) % c;
            noisy_mask[i] = true;
        }
    }

    let instance = IclInstance::new(
        Matrix::from_vec(n, d, demos)?,
        labels,
        Matrix::from_vec(1, d, query)?,
        Some(query_label),
        c,
    )?;
    Ok(SynthInstance {
        instance,
        noisy_mask,
        true_labels,
    })
}

pub fn gen_instances(cfg: &SynthConfig) -> Result<Vec<SynthInstance>> {
    cfg.validate()?;
    (0..cfg.instances).map(|i| gen_instance(cfg, i)).collect()
}
