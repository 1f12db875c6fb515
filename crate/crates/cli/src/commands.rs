use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use detail_core::data_io::{
    load_manifest_instances, read_dump, read_predictions, write_dump, write_json, write_manifest, write_scores,
    EmbeddingSet, Manifest, ManifestEntry,
};
use detail_core::metrics::{mean, median, spearman};
use detail_core::rng::DetRng;
use detail_core::synth::{gen_instance, SynthConfig};
use detail_core::tasks::{
    aggregate_accuracy, curate as curate_instance, detect_noisy, perturb_instance, reorder as reorder_scores,
    synthetic_downstream_eval, Evaluator, PerturbConfig, RidgeEvaluator,
};
use detail_core::{
    detail_scores, exact_loo_oracle, make_projection, Error, IclInstance, Projection, ScoreMode, ScoreVector,
    DEFAULT_LAMBDA_DETECT, DEFAULT_LAMBDA_TEST,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::summary::{CurateSummary, DetectSummary, InstanceCuration, InstanceDetection, OracleReport, PerturbSummary};
use crate::{
    CliError, CliResult, Context, CurateArgs, DetectArgs, JobsArgs, OracleArgs, PerturbArgs, ProjectionArgs,
    ReorderArgs, ScoreArgs, SynthArgs,
};

/// Stream for shuffling noisy masks in the detection control.
const CONTROL_STREAM: u64 = 3 << 32;

fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        name,
        reason: reason.into(),
    }
}

fn flag(name: &str) -> String {
    format!("flag --{name}")
}

fn file(path: &Path) -> String {
    format!("file {}", path.display())
}

fn resolve_lambda(value: Option<f64>, default: f64) -> CliResult<f64> {
    let lambda = value.unwrap_or(default);
    if lambda.is_finite() && lambda > 0.0 {
        Ok(lambda)
    } else {
        Err(CliError::new(
            flag("lambda"),
            invalid("lambda", format!("must be finite and > 0, got {lambda}")),
        ))
    }
}

/// `None` when the projection would not reduce the width.
fn projection_for(args: &ProjectionArgs, width: usize) -> CliResult<Option<Projection>> {
    if args.proj_dim == 0 || args.proj_dim >= width {
        return Ok(None);
    }
    make_projection(args.seed, width, args.proj_dim)
        .map(Some)
        .context(|| flag("proj-dim"))
}

/// One projection per distinct width in a dataset, built up front so that
/// workers share them.
fn projections_by_width<'a>(
    args: &ProjectionArgs,
    instances: impl Iterator<Item = &'a IclInstance>,
) -> CliResult<BTreeMap<usize, Option<Projection>>> {
    let mut out = BTreeMap::new();
    for inst in instances {
        let w = inst.width();
        if let std::collections::btree_map::Entry::Vacant(slot) = out.entry(w) {
            slot.insert(projection_for(args, w)?);
        }
    }
    Ok(out)
}

fn pool(jobs: &JobsArgs) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.jobs)
        .build()
        .map_err(|e| CliError::new(flag("jobs"), invalid("jobs", e.to_string())))
}

/// Maps instances in parallel; results come back in input order and the first
/// failure (by index) wins, so errors are as deterministic as outputs.
fn par_map<T, U, F>(pool: &rayon::ThreadPool, items: &[T], f: F) -> CliResult<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> CliResult<U> + Sync,
{
    let results: Vec<CliResult<U>> = pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect());
    results.into_iter().collect()
}

fn sidecar_path(output: &Path) -> PathBuf {
    let normalized: PathBuf = output.components().collect();
    let mut name = OsString::from(normalized.as_os_str());
    name.push(".run.json");
    PathBuf::from(name)
}

/// Writes `<output>.run.json`: the resolved configuration, crate version, and wall time.
fn write_run_metadata<A: Serialize>(
    command: &str,
    args: &A,
    resolved: &[(&str, Value)],
    output: &Path,
    started: Instant,
) -> CliResult<()> {
    let mut config = serde_json::to_value(args).expect("arguments serialize");
    if let Value::Object(map) = &mut config {
        for (k, v) in resolved {
            map.insert((*k).to_string(), v.clone());
        }
    }
    let meta = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "output": output,
        "wall_time_s": started.elapsed().as_secs_f64(),
    });
    let path = sidecar_path(output);
    write_json(&meta, &path).context(|| file(&path))
}

fn load_instance(path: &Path) -> CliResult<IclInstance> {
    read_dump(path).and_then(|set| set.to_instance()).context(|| file(path))
}

pub fn score(args: &ScoreArgs) -> CliResult<()> {
    let started = Instant::now();
    let default = match args.mode {
        ScoreMode::Test => DEFAULT_LAMBDA_TEST,
        ScoreMode::SelfInfluence => DEFAULT_LAMBDA_DETECT,
    };
    let lambda = resolve_lambda(args.lambda, default)?;
    let instance = load_instance(&args.input)?;
    let projection = projection_for(&args.projection, instance.width())?;
    let scores = detail_scores(&instance, lambda, args.mode, projection.as_ref())
        .context(|| format!("score {}", file(&args.input)))?;
    write_scores(&scores, &args.out.output, args.out.format).context(|| file(&args.out.output))?;
    write_run_metadata(
        "score",
        args,
        &[("lambda", lambda.into()), ("projected", projection.is_some().into())],
        &args.out.output,
        started,
    )
}

pub fn detect(args: &DetectArgs) -> CliResult<()> {
    let started = Instant::now();
    let lambda = resolve_lambda(args.lambda, DEFAULT_LAMBDA_DETECT)?;
    let (_, dataset) = load_manifest_instances(&args.manifest).context(|| file(&args.manifest))?;
    if dataset.is_empty() {
        return Err(CliError::new(
            file(&args.manifest),
            invalid("instances", "manifest lists no instances"),
        ));
    }
    let n = dataset[0].1.len();
    if let Some((entry, _)) = dataset.iter().find(|(_, inst)| inst.len() != n) {
        return Err(CliError::new(
            format!("instance {}", entry.id),
            invalid(
                "instances",
                format!("every instance needs {n} demonstrations to average curves"),
            ),
        ));
    }
    let projections = projections_by_width(&args.projection, dataset.iter().map(|(_, i)| i))?;
    let pool = pool(&args.jobs)?;
    let seed = args.projection.seed;
    let instances = par_map(&pool, &dataset, |index, (entry, inst)| {
        let ctx = || format!("instance {}", entry.id);
        let mask = entry
            .noisy_mask
            .as_ref()
            .ok_or_else(|| CliError::new(ctx(), invalid("noisy_mask", "detection needs a noisy mask")))?;
        let scores = detail_scores(
            inst,
            lambda,
            ScoreMode::SelfInfluence,
            projections[&inst.width()].as_ref(),
        )
        .context(ctx)?;
        let report = detect_noisy(&scores, mask).context(ctx)?;
        let perm = DetRng::new(seed, CONTROL_STREAM + index as u64).permutation(mask.len());
        let shuffled: Vec<bool> = perm.iter().map(|&j| mask[j]).collect();
        let shuffled_auc = detect_noisy(&scores, &shuffled).context(ctx)?.auc_roc;
        Ok(InstanceDetection {
            id: entry.id.clone(),
            shuffled_auc,
            report,
        })
    })?;
    let aucs: Vec<f64> = instances.iter().map(|i| i.report.auc_roc).collect();
    let controls: Vec<f64> = instances.iter().map(|i| i.shuffled_auc).collect();
    let mean_curve = (0..=n)
        .map(|s| {
            mean(
                &instances
                    .iter()
                    .map(|i| i.report.fraction_detected_curve[s])
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let summary = DetectSummary {
        median_auc: median(&aucs),
        shuffled_control_median_auc: median(&controls),
        mean_fraction_detected: mean_curve,
        instances,
    };
    write_scores(&summary, &args.out.output, args.out.format).context(|| file(&args.out.output))?;
    write_run_metadata(
        "detect",
        args,
        &[("lambda", lambda.into()), ("jobs", pool.current_num_threads().into())],
        &args.out.output,
        started,
    )
}

pub fn reorder(args: &ReorderArgs) -> CliResult<()> {
    let started = Instant::now();
    let lambda = resolve_lambda(args.lambda, DEFAULT_LAMBDA_TEST)?;
    let scores = match (&args.input, &args.scores) {
        (_, Some(path)) => {
            let bytes = fs::read(path).map_err(|e| {
                CliError::new(
                    file(path),
                    Error::Io {
                        path: path.clone(),
                        source: e,
                    },
                )
            })?;
            serde_json::from_slice::<ScoreVector>(&bytes).map_err(|source| {
                CliError::new(
                    file(path),
                    Error::Json {
                        path: path.clone(),
                        source,
                    },
                )
            })?
        }
        (Some(path), None) => {
            let instance = load_instance(path)?;
            let projection = projection_for(&args.projection, instance.width())?;
            detail_scores(&instance, lambda, ScoreMode::SelfInfluence, projection.as_ref())
                .context(|| format!("score {}", file(path)))?
        }
        (None, None) => unreachable!("clap requires --input or --scores"),
    };
    let ranking = reorder_scores(&scores, args.policy).context(|| flag("policy"))?;
    write_scores(&ranking, &args.out.output, args.out.format).context(|| file(&args.out.output))?;
    write_run_metadata("reorder", args, &[("lambda", lambda.into())], &args.out.output, started)
}

pub fn curate(args: &CurateArgs) -> CliResult<()> {
    let started = Instant::now();
    let lambda = resolve_lambda(args.lambda, DEFAULT_LAMBDA_TEST)?;
    let (_, dataset) = load_manifest_instances(&args.manifest).context(|| file(&args.manifest))?;
    let validation = read_dump(&args.validation).context(|| file(&args.validation))?;
    let anchors = validation.anchors();
    let projections = projections_by_width(&args.projection, dataset.iter().map(|(_, i)| i))?;
    let pool = pool(&args.jobs)?;
    let instances = par_map(&pool, &dataset, |_, (entry, inst)| {
        let ctx = || format!("instance {}", entry.id);
        if validation.dim() != inst.width() {
            return Err(CliError::new(
                file(&args.validation),
                Error::DimensionMismatch {
                    op: "curate",
                    expected: format!("{} columns", inst.width()),
                    actual: format!("{} columns", validation.dim()),
                },
            ));
        }
        let plan = curate_instance(inst, &anchors, lambda, projections[&inst.width()].as_ref(), args.k).context(ctx)?;
        let (before, after) = match inst.query_label() {
            Some(truth) => {
                let kept = inst.select_demos(&plan.survivors());
                (
                    Some(synthetic_downstream_eval(inst, lambda).context(ctx)? == truth),
                    Some(synthetic_downstream_eval(&kept, lambda).context(ctx)? == truth),
                )
            }
            None => (None, None),
        };
        Ok(InstanceCuration {
            id: entry.id.clone(),
            query_correct_before: before,
            query_correct_after: after,
            plan,
        })
    })?;
    let accuracy = |pick: fn(&InstanceCuration) -> Option<bool>| {
        let flags: Option<Vec<f64>> = instances
            .iter()
            .map(|i| pick(i).map(|b| f64::from(u8::from(b))))
            .collect();
        flags.filter(|f| !f.is_empty()).map(|f| mean(&f))
    };
    let summary = CurateSummary {
        k: args.k,
        validation_anchors: anchors.len(),
        accuracy_before: accuracy(|i| i.query_correct_before),
        accuracy_after: accuracy(|i| i.query_correct_after),
        instances,
    };
    write_scores(&summary, &args.out.output, args.out.format).context(|| file(&args.out.output))?;
    write_run_metadata(
        "curate",
        args,
        &[("lambda", lambda.into()), ("jobs", pool.current_num_threads().into())],
        &args.out.output,
        started,
    )
}

pub fn perturb(args: &PerturbArgs) -> CliResult<()> {
    let started = Instant::now();
    let lambda = resolve_lambda(args.lambda, DEFAULT_LAMBDA_TEST)?;
    let (manifest, dataset) = load_manifest_instances(&args.manifest).context(|| file(&args.manifest))?;
    if dataset.is_empty() {
        return Err(CliError::new(
            file(&args.manifest),
            invalid("instances", "manifest lists no instances"),
        ));
    }
    let evaluator: Box<dyn Evaluator> = match &args.predictions {
        Some(path) => Box::new(read_predictions(path, manifest.num_classes).context(|| file(path))?),
        None => Box::new(RidgeEvaluator { lambda }),
    };
    let cfg = PerturbConfig {
        mode: args.mode,
        which: args.which,
        k: args.k,
        lambda,
        seed: args.projection.seed,
    };
    let projections = projections_by_width(&args.projection, dataset.iter().map(|(_, i)| i))?;
    let pool = pool(&args.jobs)?;
    let traces = par_map(&pool, &dataset, |index, (entry, inst)| {
        perturb_instance(
            &entry.id,
            index,
            inst,
            &cfg,
            projections[&inst.width()].as_ref(),
            evaluator.as_ref(),
        )
        .context(|| format!("instance {}", entry.id))
    })?;
    let curve = aggregate_accuracy(&traces).context(|| "aggregate".to_string())?;
    let summary = PerturbSummary {
        config: cfg,
        curve,
        traces,
    };
    write_scores(&summary, &args.out.output, args.out.format).context(|| file(&args.out.output))?;
    write_run_metadata(
        "perturb",
        args,
        &[("lambda", lambda.into()), ("jobs", pool.current_num_threads().into())],
        &args.out.output,
        started,
    )
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let started = Instant::now();
    let ctx = || file(&args.config);
    let bytes = fs::read(&args.config).map_err(|e| {
        CliError::new(
            ctx(),
            Error::Io {
                path: args.config.clone(),
                source: e,
            },
        )
    })?;
    let cfg: SynthConfig = serde_json::from_slice(&bytes).map_err(|source| {
        CliError::new(
            ctx(),
            Error::Json {
                path: args.config.clone(),
                source,
            },
        )
    })?;
    cfg.validate().context(ctx)?;
    fs::create_dir_all(&args.output).map_err(|e| {
        CliError::new(
            file(&args.output),
            Error::Io {
                path: args.output.clone(),
                source: e,
            },
        )
    })?;
    let mut entries = Vec::with_capacity(cfg.instances);
    for index in 0..cfg.instances {
        let generated = gen_instance(&cfg, index).context(ctx)?;
        let id = format!("instance_{index:04}");
        let rel = format!("{id}.dtld");
        let path = args.output.join(&rel);
        write_dump(
            &EmbeddingSet::from_instance(&generated.instance, "synthetic", None),
            &path,
        )
        .context(|| file(&path))?;
        entries.push(ManifestEntry {
            path: rel,
            id,
            noisy_mask: Some(generated.noisy_mask),
        });
    }
    let manifest = Manifest {
        instances: entries,
        num_classes: cfg.num_classes,
    };
    let mpath = args.output.join("manifest.json");
    write_manifest(&manifest, &mpath).context(|| file(&mpath))?;
    write_run_metadata(
        "synth",
        args,
        &[("synth", serde_json::to_value(&cfg).expect("config serializes"))],
        &args.output,
        started,
    )
}

pub fn oracle(args: &OracleArgs) -> CliResult<()> {
    let started = Instant::now();
    let lambda = resolve_lambda(args.lambda, DEFAULT_LAMBDA_TEST)?;
    let instance = load_instance(&args.input)?;
    let ctx = || format!("oracle {}", file(&args.input));
    let detail = detail_scores(&instance, lambda, ScoreMode::Test, None).context(ctx)?;
    let loo = exact_loo_oracle(&instance, lambda).context(ctx)?;
    let rho = spearman(&detail.scores, &loo).context(ctx)?;
    let report = OracleReport {
        lambda,
        spearman: rho,
        detail: detail.scores,
        oracle: loo,
    };
    write_scores(&report, &args.out.output, args.out.format).context(|| file(&args.out.output))?;
    println!("spearman {rho}");
    write_run_metadata("oracle", args, &[("lambda", lambda.into())], &args.out.output, started)
}
