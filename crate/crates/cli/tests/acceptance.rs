//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below.
//! Exits nonzero if any criterion fails. Criteria run sequentially so the
//! timing checks are not disturbed by each other.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use detail_core::data_io::{read_dump, write_dump, EmbeddingSet};
use detail_core::influence::{one_hot, ridge_loss};
use detail_core::metrics::{median, spearman};
use detail_core::rng::DetRng;
use detail_core::synth::{gen_instance, gen_instances, SynthConfig};
use detail_core::tasks::{perturb_experiment, PerturbConfig, PerturbMode, RidgeEvaluator, Which};
use detail_core::{
    detail_scores, exact_loo_oracle, fit_ridge, grad_loss, make_projection, project, IclInstance, Matrix, RidgeFit,
    ScoreMode,
};
use nalgebra::DMatrix;
use serde_json::Value;

// Criterion 1
const PRIMAL_DUAL_TOL: f64 = 1e-8;
const PRIMAL_DUAL_BUDGET: Duration = Duration::from_secs(1);
// Criterion 2
const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;
const FD_POINTS: u64 = 50;
// Criterion 3
const ORACLE_MIN_SPEARMAN: f64 = 0.9;
const ORACLE_BUDGET: Duration = Duration::from_secs(30);
// Criterion 4
const DETECT_MIN_AUC: f64 = 0.8;
const CONTROL_CENTER: f64 = 0.5;
const CONTROL_BAND: f64 = 0.1;
const DETECT_BUDGET: Duration = Duration::from_secs(60);
// Criterion 5
const PERTURB_MIN_GAP: f64 = 0.15;
const PERTURB_BUDGET: Duration = Duration::from_secs(60);
// Criterion 6
const JL_EPSILON: f64 = 0.2;
const JL_MIN_FRACTION: f64 = 0.95;
// Criterion 7
const MIN_SPEEDUP: f64 = 5.0;
const PROJECTED_BUDGET: Duration = Duration::from_secs(2);
// Criterion 9
const ROUND_TRIP_DUMPS: u64 = 1000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn synth_cfg(seed: u64, n: usize, d: usize, corrupt: usize, instances: usize) -> SynthConfig {
    SynthConfig {
        seed,
        n,
        d,
        num_classes: 2,
        cluster_spread: 0.3,
        corrupt_count: corrupt,
        instances,
    }
}

fn random_matrix(rng: &mut DetRng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.standard_normal()).collect()).unwrap()
}

fn random_instance(rng: &mut DetRng, n: usize, d: usize, c: usize) -> IclInstance {
    let labels = (0..n).map(|_| rng.below(c)).collect();
    let demos = random_matrix(rng, n, d);
    let query = random_matrix(rng, 1, d);
    let q = rng.below(c);
    IclInstance::new(demos, labels, query, Some(q), c).unwrap()
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Primal weights by QR of the augmented least-squares system `[m; √λI] β = [Y; 0]`.
fn primal_beta(inst: &IclInstance, lambda: f64) -> DMatrix<f64> {
    let m = to_na(inst.demo_embeddings());
    let y = to_na(&one_hot(inst.demo_labels(), inst.num_classes()).unwrap());
    let (n, d) = m.shape();
    let mut a = DMatrix::zeros(n + d, d);
    a.view_mut((0, 0), (n, d)).copy_from(&m);
    for i in 0..d {
        a[(n + i, i)] = lambda.sqrt();
    }
    let mut b = DMatrix::zeros(n + d, y.ncols());
    b.view_mut((0, 0), (n, y.ncols())).copy_from(&y);
    let qr = a.qr();
    qr.r().solve_upper_triangular(&(qr.q().transpose() * b)).unwrap()
}

fn primal_dual() -> Outcome {
    let mut rng = DetRng::new(1, 0);
    let instances: Vec<(IclInstance, f64)> = [2, 4]
        .into_iter()
        .flat_map(|c| [1e-9, 1.0, 10.0].into_iter().map(move |l| (c, l)))
        .flat_map(|(c, l)| (0..10).map(move |_| (c, l)))
        .map(|(c, l)| (random_instance(&mut rng, 20, 64, c), l))
        .collect();
    let started = Instant::now();
    let duals: Vec<Matrix> = instances
        .iter()
        .map(|(inst, l)| fit_ridge(inst, *l).unwrap().beta)
        .collect();
    let elapsed = started.elapsed();
    let worst = instances
        .iter()
        .zip(&duals)
        .map(|((inst, l), dual)| {
            let primal = primal_beta(inst, *l);
            (to_na(dual) - &primal).norm() / primal.norm()
        })
        .fold(0.0, f64::max);
    outcome(
        worst <= PRIMAL_DUAL_TOL && elapsed < PRIMAL_DUAL_BUDGET,
        format!(
            "primal-dual ridge equivalence: max relative |Δβ| {worst:.2e} (<= {PRIMAL_DUAL_TOL:e}) over {} fits, \
             {:.3} s (< {} s)",
            instances.len(),
            elapsed.as_secs_f64(),
            PRIMAL_DUAL_BUDGET.as_secs()
        ),
    )
}

/// `grad_loss` omits the factor 2 of the squared error, so the finite
/// difference of the regularized loss is compared with `2 · grad_loss`.
fn gradient_check() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..FD_POINTS {
        let mut rng = DetRng::new(seed, 2);
        let c = 2 + rng.below(3);
        let inst = random_instance(&mut rng, 20, 64, c);
        let lambda = [1e-9, 1e-2, 1.0, 10.0][rng.below(4)];
        let base = fit_ridge(&inst, lambda).unwrap();
        let fit = RidgeFit {
            beta: base.beta.add(&random_matrix(&mut rng, 64, c).scale(0.1)).unwrap(),
            ..base
        };
        let m = random_matrix(&mut rng, 1, 64);
        let y = one_hot(&[rng.below(c)], c).unwrap();
        let analytic = grad_loss(&m, &y, &fit).unwrap().scale(2.0);
        let mut numeric = Matrix::zeros(64, c);
        for i in 0..64 {
            for j in 0..c {
                let mut plus = fit.beta.clone();
                plus.set(i, j, fit.beta[(i, j)] + FD_STEP);
                let mut minus = fit.beta.clone();
                minus.set(i, j, fit.beta[(i, j)] - FD_STEP);
                let diff = ridge_loss(&m, &y, &plus, lambda).unwrap() - ridge_loss(&m, &y, &minus, lambda).unwrap();
                numeric.set(i, j, diff / (2.0 * FD_STEP));
            }
        }
        let err = analytic.sub(&numeric).unwrap().frobenius_norm() / analytic.frobenius_norm();
        worst = worst.max(err);
    }
    outcome(
        worst <= FD_TOL,
        format!("gradient vs central differences (h = {FD_STEP:e}): max relative error {worst:.2e} (<= {FD_TOL:e}) on {FD_POINTS} points"),
    )
}

fn oracle_agreement() -> Outcome {
    let started = Instant::now();
    // 10% label noise: 2 of 20 demonstrations flipped
    let rhos: Vec<f64> = gen_instances(&synth_cfg(1, 20, 50, 2, 100))
        .unwrap()
        .iter()
        .map(|s| {
            let detail = detail_scores(&s.instance, 1.0, ScoreMode::Test, None).unwrap();
            let loo = exact_loo_oracle(&s.instance, 1.0).unwrap();
            spearman(&detail.scores, &loo).unwrap()
        })
        .collect();
    let elapsed = started.elapsed();
    let rho = median(&rhos);
    outcome(
        rho >= ORACLE_MIN_SPEARMAN && elapsed < ORACLE_BUDGET,
        format!(
            "oracle agreement: median Spearman {rho:.3} (>= {ORACLE_MIN_SPEARMAN}) over 100 instances with 10% \
             label noise, {:.2} s (< {} s)",
            elapsed.as_secs_f64(),
            ORACLE_BUDGET.as_secs()
        ),
    )
}

fn detail_bin(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_detail"))
        .args(args)
        .env("DETAIL_JOBS", "1")
        .output()
        .expect("detail binary runs");
    assert!(
        out.status.success(),
        "detail {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_synth_config(path: &Path, cfg: &SynthConfig) {
    fs::write(path, serde_json::to_vec(cfg).unwrap()).unwrap();
}

/// Through the CLI: synthesize a noisy manifest, then detect.
fn noisy_detection(dir: &Path) -> Outcome {
    let cfg_path = dir.join("detect-cfg.json");
    write_synth_config(&cfg_path, &synth_cfg(1, 20, 64, 4, 100));
    let data = dir.join("detect-data");
    let report = dir.join("detect.json");
    let started = Instant::now();
    detail_bin(&["synth", "-c", s(&cfg_path), "-o", s(&data)]);
    detail_bin(&[
        "detect",
        "-m",
        s(&data.join("manifest.json")),
        "--lambda",
        "1e-9",
        "-o",
        s(&report),
    ]);
    let elapsed = started.elapsed();
    let summary: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let auc = summary["median_auc"].as_f64().unwrap();
    let control = summary["shuffled_control_median_auc"].as_f64().unwrap();
    let control_ok = (control - CONTROL_CENTER).abs() <= CONTROL_BAND;
    outcome(
        auc >= DETECT_MIN_AUC && auc > control && control_ok && elapsed < DETECT_BUDGET,
        format!(
            "noisy detection: median AUC {auc:.3} (>= {DETECT_MIN_AUC}), shuffled control {control:.3} \
             ({CONTROL_CENTER} ± {CONTROL_BAND}, must be below AUC), {:.2} s (< {} s)",
            elapsed.as_secs_f64(),
            DETECT_BUDGET.as_secs()
        ),
    )
}

fn perturbation_gap() -> Outcome {
    let started = Instant::now();
    let dataset: Vec<(String, IclInstance)> = (0..100)
        .map(|seed| {
            let inst = gen_instance(&synth_cfg(seed, 20, 64, 0, 1), 0).unwrap().instance;
            (format!("seed{seed}"), inst)
        })
        .collect();
    let eval = RidgeEvaluator { lambda: 1.0 };
    let at_k = |which| {
        let cfg = PerturbConfig {
            mode: PerturbMode::Remove,
            which,
            k: 10,
            lambda: 1.0,
            seed: 0,
        };
        perturb_experiment(&dataset, &cfg, None, &eval).unwrap().0.mean[10]
    };
    let (high, low, random) = (at_k(Which::High), at_k(Which::Low), at_k(Which::Random));
    let elapsed = started.elapsed();
    let gap = low - high;
    outcome(
        gap >= PERTURB_MIN_GAP && high < random && random < low && elapsed < PERTURB_BUDGET,
        format!(
            "perturbation gap: accuracy after removing 10 low {low:.2}, random {random:.2}, high {high:.2}; \
             gap {gap:.2} (>= {PERTURB_MIN_GAP}, random strictly between), {:.2} s (< {} s)",
            elapsed.as_secs_f64(),
            PERTURB_BUDGET.as_secs()
        ),
    )
}

fn jl_projection() -> Outcome {
    let s = gen_instance(&synth_cfg(6, 20, 4096, 0, 1), 0).unwrap();
    let mut data = s.instance.demo_embeddings().as_slice().to_vec();
    data.extend_from_slice(s.instance.query_embedding().as_slice());
    let points = Matrix::from_vec(21, 4096, data).unwrap();
    let (mut within, mut total) = (0usize, 0usize);
    for seed in 0..10 {
        let p = make_projection(seed, 4096, 1000).unwrap();
        let projected = project(&points, &p).unwrap();
        for a in 0..21 {
            for b in a + 1..21 {
                let sq = |m: &Matrix| -> f64 { m.row(a).iter().zip(m.row(b)).map(|(x, y)| (x - y) * (x - y)).sum() };
                let ratio = sq(&projected) / sq(&points);
                total += 1;
                within += usize::from((ratio - 1.0).abs() <= JL_EPSILON);
            }
        }
    }
    let fraction = within as f64 / total as f64;
    outcome(
        fraction >= JL_MIN_FRACTION,
        format!(
            "JL projection 4096 -> 1000: {:.1}% of {total} pairwise squared distances within ε = {JL_EPSILON} \
             (>= {:.0}%)",
            100.0 * fraction,
            100.0 * JL_MIN_FRACTION
        ),
    )
}

/// Both timings run the CLI `score` command, which is single-threaded.
fn projection_speedup(dir: &Path) -> Outcome {
    let cfg_path = dir.join("speed-cfg.json");
    write_synth_config(&cfg_path, &synth_cfg(7, 20, 4096, 0, 1));
    let data = dir.join("speed-data");
    detail_bin(&["synth", "-c", s(&cfg_path), "-o", s(&data)]);
    let dump = data.join("instance_0000.dtld");
    let time = |proj_dim: &str| {
        let out = dir.join(format!("speed-{proj_dim}.json"));
        let started = Instant::now();
        detail_bin(&["score", "-i", s(&dump), "-o", s(&out), "--proj-dim", proj_dim]);
        started.elapsed()
    };
    let projected = time("1000");
    let full = time("0");
    let speedup = full.as_secs_f64() / projected.as_secs_f64();
    outcome(
        speedup >= MIN_SPEEDUP && projected < PROJECTED_BUDGET,
        format!(
            "projection speedup (n = 20, d = 4096): projected {:.3} s (< {} s), unprojected {:.3} s, \
             speedup {speedup:.1}x (>= {MIN_SPEEDUP}x)",
            projected.as_secs_f64(),
            PROJECTED_BUDGET.as_secs(),
            full.as_secs_f64()
        ),
    )
}

/// Bytes of every file under `root`, keyed by relative path.
fn snapshot(root: &Path, files: &[&Path]) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for f in files {
        if f.is_dir() {
            for e in fs::read_dir(f).unwrap() {
                let p = e.unwrap().path();
                out.insert(
                    p.strip_prefix(root).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        } else {
            let bytes = fs::read(f).unwrap();
            let bytes = if f.to_string_lossy().ends_with(".run.json") {
                // wall time is the one field allowed to differ between runs
                let mut v: Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_s");
                serde_json::to_vec(&v).unwrap()
            } else {
                bytes
            };
            out.insert(f.strip_prefix(root).unwrap().display().to_string(), bytes);
        }
    }
    out
}

fn cli_determinism(dir: &Path) -> Outcome {
    let root = dir.join("det");
    fs::create_dir_all(&root).unwrap();
    let cfg_path = root.join("cfg.json");
    write_synth_config(
        &cfg_path,
        &SynthConfig {
            num_classes: 3,
            ..synth_cfg(11, 16, 48, 3, 12)
        },
    );
    let data = root.join("data");
    let manifest = data.join("manifest.json");
    let dump = data.join("instance_0000.dtld");
    let validation = data.join("instance_0011.dtld");
    let o = |name: &str| root.join(name);
    let (score_t, score_s, det, reo, cur, per_r, per_h, orc) = (
        o("score-test.csv"),
        o("score-self.json"),
        o("detect.json"),
        o("reorder.csv"),
        o("curate.json"),
        o("perturb-random.json"),
        o("perturb-high.csv"),
        o("oracle.json"),
    );
    let commands: Vec<Vec<&str>> = vec![
        vec!["synth", "-c", s(&cfg_path), "-o", s(&data)],
        vec![
            "score",
            "-i",
            s(&dump),
            "-o",
            s(&score_t),
            "--format",
            "csv",
            "--proj-dim",
            "20",
            "--seed",
            "3",
        ],
        vec!["score", "-i", s(&dump), "-o", s(&score_s), "--mode", "self"],
        vec!["detect", "-m", s(&manifest), "-o", s(&det), "--jobs", "4"],
        vec!["reorder", "-i", s(&dump), "-o", s(&reo), "--format", "csv"],
        vec![
            "curate",
            "-m",
            s(&manifest),
            "--validation",
            s(&validation),
            "-k",
            "4",
            "-o",
            s(&cur),
        ],
        vec![
            "perturb",
            "-m",
            s(&manifest),
            "--mode",
            "corrupt",
            "--which",
            "random",
            "-k",
            "6",
            "--seed",
            "9",
            "-o",
            s(&per_r),
        ],
        vec![
            "perturb",
            "-m",
            s(&manifest),
            "--which",
            "high",
            "-k",
            "6",
            "-o",
            s(&per_h),
            "--format",
            "csv",
        ],
        vec!["oracle", "-i", s(&dump), "-o", s(&orc)],
    ];
    let outputs: Vec<&Path> = vec![&data, &score_t, &score_s, &det, &reo, &cur, &per_r, &per_h, &orc];
    let sidecars: Vec<std::path::PathBuf> = outputs
        .iter()
        .map(|p| std::path::PathBuf::from(format!("{}.run.json", p.display())))
        .collect();
    let mut all: Vec<&Path> = outputs.clone();
    all.extend(sidecars.iter().map(|p| p.as_path()));

    let mut runs = Vec::new();
    for _ in 0..2 {
        for args in &commands {
            detail_bin(args);
        }
        runs.push(snapshot(&root, &all));
    }
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(k, v)| runs[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    outcome(
        differing.is_empty() && runs[0].len() == runs[1].len(),
        format!(
            "CLI determinism: {} commands rerun, {} artifacts compared, {} differ{}",
            commands.len(),
            runs[0].len(),
            differing.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(" ({differing:?})")
            }
        ),
    )
}

fn random_dump(seed: u64) -> EmbeddingSet {
    let mut rng = DetRng::new(seed, 9);
    let rows = 1 + rng.below(24);
    let cols = 1 + rng.below(48);
    let classes = 2 + rng.below(4);
    let data = (0..rows * cols)
        .map(|_| {
            let v = match rng.below(20) {
                0 => 0.0,
                1 => -0.0,
                2 => f32::MAX,
                3 => f32::MIN_POSITIVE / 8.0,
                _ => (rng.standard_normal() * 10f64.powi(rng.below(9) as i32 - 4)) as f32,
            };
            f64::from(v)
        })
        .collect();
    let query_index = (rng.below(4) != 0).then(|| rng.below(rows));
    let labels = (0..rows)
        .map(|i| {
            if query_index == Some(i) && rng.below(2) == 0 {
                None
            } else {
                Some(rng.below(classes))
            }
        })
        .collect();
    let mut extra = BTreeMap::new();
    for k in 0..rng.below(3) {
        extra.insert(format!("note_{k}"), Value::from(rng.standard_normal()));
    }
    EmbeddingSet {
        embeddings: Matrix::from_vec(rows, cols, data).unwrap(),
        labels,
        num_classes: classes,
        query_index,
        layer: (rng.below(2) == 0).then(|| rng.below(80) as u64),
        source: format!("model-{}", rng.below(1000)),
        target_positions: (rng.below(2) == 0).then(|| (0..rows as u64).map(|i| 7 * i + 3).collect()),
        extra,
    }
}

fn format_round_trip(dir: &Path) -> Outcome {
    let root = dir.join("dumps");
    fs::create_dir_all(&root).unwrap();
    let mut failures = 0usize;
    for seed in 0..ROUND_TRIP_DUMPS {
        let set = random_dump(seed);
        let (a, b) = (root.join("a.dtld"), root.join("b.dtld"));
        write_dump(&set, &a).unwrap();
        let back = read_dump(&a).unwrap();
        write_dump(&back, &b).unwrap();
        if back != set || fs::read(&a).unwrap() != fs::read(&b).unwrap() {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("dump format round trip: {failures} of {ROUND_TRIP_DUMPS} random dumps changed across write -> read -> write"),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(u32, Box<dyn Fn() -> Outcome>)> = vec![
        (1, Box::new(primal_dual)),
        (2, Box::new(gradient_check)),
        (3, Box::new(oracle_agreement)),
        (4, Box::new(|| noisy_detection(dir.path()))),
        (5, Box::new(perturbation_gap)),
        (6, Box::new(jl_projection)),
        (7, Box::new(|| projection_speedup(dir.path()))),
        (8, Box::new(|| cli_determinism(dir.path()))),
        (9, Box::new(|| format_round_trip(dir.path()))),
    ];
    let mut failed = 0;
    for (id, check) in &criteria {
        let result = check();
        failed += usize::from(!result.pass);
        println!(
            "acceptance criterion {id}: {} - {}",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
