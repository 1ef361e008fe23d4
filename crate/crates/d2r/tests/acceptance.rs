//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to stderr,
//! bypassing output capture, and the tests run one at a time so that the
//! measured runtimes are not inflated by each other.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use d2r::checkpoint::{encode, load_checkpoint};
use d2r::config::RunConfig;
use d2r::metrics::read_metrics;
use d2r_core::attacks::{cag_gen, cag_trace, fgsm, kl_to_reference, pgd_trace, trades_gen, trades_trace};
use d2r_core::losses::{d2r_loss, kl_divergence, symmetric_kl_gap};
use d2r_core::train::train;
use d2r_core::{
    AttackConfig, GapSign, InitMode, LossWeights, ModelSpec, ModelState, Role, Tape, Tensor, TrainOutcome,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: usize, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("acceptance {criterion} {verdict} {title}: {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn d2r(args: &[&str], output_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_d2r"));
    cmd.args(args).env_remove("D2R_SEED").env_remove("D2R_OUTPUT_DIR");
    if let Some(dir) = output_dir {
        cmd.env("D2R_OUTPUT_DIR", dir);
    }
    cmd.output().unwrap()
}

fn load_config(name: &str, seed: u64, output: Option<PathBuf>) -> RunConfig {
    let path = repo_root().join("configs").join(name);
    let text = fs::read_to_string(&path).unwrap();
    RunConfig::from_toml(&text, &path, path.parent().unwrap(), Some(&seed.to_string()), output).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - max - log_sum).collect()
}

/// Batch-mean cross-entropy plus the mean over all logits of the squared
/// difference, by direct summation.
fn ce_plus_mse(g: &Tensor, t: &Tensor, labels: &[usize]) -> f64 {
    let k = g.shape()[1];
    let n = labels.len() as f64;
    let ce: f64 = g
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| -log_softmax_row(row)[y])
        .sum::<f64>()
        / n;
    let mse: f64 = g.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (n * k as f64);
    ce + mse
}

fn scalar(tape: &Tape, v: d2r_core::Var) -> f64 {
    tape.value(v).data()[0]
}

#[test]
fn criterion_1_gradient_check() {
    let _guard = serial();
    let start = Instant::now();
    let out = d2r(&["gradcheck"], None);
    let elapsed = start.elapsed();
    let report_text = String::from_utf8_lossy(&out.stdout);
    let worst: f64 = report_text
        .lines()
        .last()
        .and_then(|l| l.split_whitespace().nth(3))
        .and_then(|w| w.parse().ok())
        .unwrap_or(f64::INFINITY);
    let composed = report_text.lines().any(|l| l.starts_with("d2r_objective") && l.ends_with("ok"));
    let checks = report_text.lines().filter(|l| l.contains("worst rel err")).count();
    let pass = out.status.code() == Some(0) && worst < 1e-4 && composed && elapsed < Duration::from_secs(60);
    report(
        1,
        "gradient correctness",
        pass,
        &format!("{checks} checks, worst relative error {worst:.3e}, composed objective ok: {composed}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_2_loss_identities() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut reduction, mut recompose, mut kl_self, mut gap_self) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut kl_min = f64::INFINITY;
    for _ in 0..100 {
        let n = rng.random_range(1..9);
        let k = rng.random_range(2..7);
        let g = random_tensor(&mut rng, &[n, k], -4.0, 4.0);
        let tc = random_tensor(&mut rng, &[n, k], -4.0, 4.0);
        let ta = random_tensor(&mut rng, &[n, k], -4.0, 4.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();

        let mut tape = Tape::new();
        let (vg, vtc, vta) = (tape.constant(g.clone()), tape.constant(tc.clone()), tape.constant(ta.clone()));
        let base = d2r_loss(&mut tape, vg, vtc, vta, &labels, &LossWeights::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        reduction = reduction.max((base.breakdown.total - ce_plus_mse(&g, &ta, &labels)).abs());

        let w = LossWeights::new(rng.random_range(0.0..3.0), rng.random_range(0.0..40.0), rng.random_range(0.0..40.0))
            .unwrap();
        let full = d2r_loss(&mut tape, vg, vtc, vta, &labels, &w).unwrap();
        recompose = recompose.max((full.breakdown.recompose(&w) - full.breakdown.total).abs());

        let same = kl_divergence(&mut tape, vg, vg).unwrap();
        kl_self = kl_self.max(scalar(&tape, same).abs());
        let cross = kl_divergence(&mut tape, vg, vta).unwrap();
        kl_min = kl_min.min(scalar(&tape, cross));
        let (gap, _) = symmetric_kl_gap(&mut tape, vg, vg).unwrap();
        gap_self = gap_self.max(scalar(&tape, gap).abs());
    }

    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_rows(&[[0.5f64.ln(), 0.5f64.ln()]]).unwrap());
    let q = tape.constant(Tensor::from_rows(&[[0.25f64.ln(), 0.75f64.ln()]]).unwrap());
    let pq = kl_divergence(&mut tape, p, q).unwrap();
    let qp = kl_divergence(&mut tape, q, p).unwrap();
    let (witness, sign) = symmetric_kl_gap(&mut tape, p, q).unwrap();
    let (pq, qp, witness) = (scalar(&tape, pq), scalar(&tape, qp), scalar(&tape, witness));
    let witness_ok = (pq - 0.143841).abs() < 1e-6
        && (qp - 0.130812).abs() < 1e-6
        && (witness - 0.013029).abs() < 1e-6
        && sign == GapSign::Positive;

    let pass = reduction <= 1e-12 && recompose <= 1e-12 && kl_self == 0.0 && kl_min >= -1e-12 && gap_self == 0.0 && witness_ok;
    report(
        2,
        "loss identities",
        pass,
        &format!(
            "reduction err {reduction:.1e}, recompose err {recompose:.1e}, KL(p,p) max {kl_self:.1e}, KL min {kl_min:.3e}, gap(p,p) max {gap_self:.1e}, witness {pq:.6} / {qp:.6} / {witness:.6}"
        ),
    );
}

fn model(widths: &[usize], seed: u64, role: Role) -> ModelState {
    ModelState::init(&ModelSpec::new(widths.to_vec(), seed).unwrap(), role).unwrap()
}

fn feasible(x: &Tensor, adv: &Tensor, eps: f64) -> bool {
    x.data()
        .iter()
        .zip(adv.data())
        .all(|(&c, &a)| (a - c).abs() <= eps + 1e-9 && (0.0..=1.0).contains(&a))
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn criterion_3_attack_invariants() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut batches, mut violations, mut fgsm_mismatch, mut cag_mismatch) = (0, 0, 0, 0);
    for trial in 0..250u64 {
        let dim = rng.random_range(2..6);
        let classes = rng.random_range(2..5);
        let guide = model(&[dim, 8, classes], trial, Role::Guide);
        let target = model(&[dim, 16, 16, classes], trial + 1000, Role::Target);
        let rows = rng.random_range(1..9);
        let x = random_tensor(&mut rng, &[rows, dim], 0.0, 1.0);
        let y: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let epsilon = rng.random_range(0.01..0.3);
        let cfg = AttackConfig {
            epsilon,
            eta: epsilon * rng.random_range(0.05..=1.0),
            iterations: rng.random_range(1..8),
            init: if trial % 2 == 0 { InitMode::UniformBall } else { InitMode::Zero },
            seed: trial,
            ..AttackConfig::default()
        };
        let traces = [
            vec![fgsm(&target, &x, &y, &cfg).unwrap().x_adv],
            pgd_trace(&target, &x, &y, &cfg).unwrap(),
            trades_trace(&target, &x, &cfg).unwrap(),
            cag_trace(&guide, &target, &x, &cfg).unwrap(),
        ];
        for trace in &traces {
            batches += 1;
            violations += trace.iter().filter(|adv| !feasible(&x, adv, cfg.epsilon)).count();
        }

        let one_step = AttackConfig {
            eta: cfg.epsilon,
            iterations: 1,
            init: InitMode::Zero,
            ..cfg
        };
        let pgd_last = pgd_trace(&target, &x, &y, &one_step).unwrap().pop().unwrap();
        fgsm_mismatch += usize::from(bits(&fgsm(&target, &x, &y, &cfg).unwrap().x_adv) != bits(&pgd_last));
        let same = cag_gen(&target, &target, &x, &cfg).unwrap().x_adv;
        cag_mismatch += usize::from(bits(&same) != bits(&trades_gen(&target, &x, &cfg).unwrap().x_adv));
    }
    let elapsed = start.elapsed();
    let pass = batches == 1000
        && violations == 0
        && fgsm_mismatch == 0
        && cag_mismatch == 0
        && elapsed < Duration::from_secs(60);
    report(
        3,
        "attack invariants",
        pass,
        &format!(
            "{batches} batches, {violations} infeasible iterates, fgsm/pgd mismatches {fgsm_mismatch}, cag/trades mismatches {cag_mismatch}, {elapsed:.2?}"
        ),
    );
}

#[test]
fn criterion_4_cag_ascent() {
    let _guard = serial();
    let guide = model(&[2, 32, 2], 40, Role::Guide);
    let target = model(&[2, 128, 128, 2], 41, Role::Target);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ascended = 0;
    for seed in 0..100 {
        let x = random_tensor(&mut rng, &[16, 2], 0.0, 1.0);
        let cfg = AttackConfig {
            epsilon: 0.1,
            eta: 0.02,
            iterations: 10,
            seed,
            ..AttackConfig::default()
        };
        let reference = guide.predict(&x).unwrap();
        let trace = cag_trace(&guide, &target, &x, &cfg).unwrap();
        let initial = kl_to_reference(&target, &trace[0], &reference).unwrap();
        let last = kl_to_reference(&target, trace.last().unwrap(), &reference).unwrap();
        ascended += usize::from(last >= initial);
    }
    report(4, "cag ascent", ascended >= 90, &format!("{ascended}/100 trials ascended"));
}

struct MoonsExperiment {
    d2r: Vec<TrainOutcome>,
    pgd_at: Vec<TrainOutcome>,
    elapsed: Duration,
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn moons_experiment() -> &'static MoonsExperiment {
    static RUNS: OnceLock<MoonsExperiment> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let run = |name: &str, seed: u64| {
            let c = load_config(name, seed, None);
            let dataset = c.dataset.load().unwrap();
            train(&c.guide, &c.target, &dataset, &c.train).unwrap()
        };
        let d2r = SEEDS.iter().map(|&s| run("moons_d2r.toml", s)).collect();
        let pgd_at = SEEDS.iter().map(|&s| run("moons_pgd_at.toml", s)).collect();
        MoonsExperiment {
            d2r,
            pgd_at,
            elapsed: start.elapsed(),
        }
    })
}

fn final_target(outcome: &TrainOutcome) -> (f64, f64) {
    let last = outcome.records.last().unwrap();
    (last.target.clean, last.target.robust)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_5_two_moons_robustness() {
    let _guard = serial();
    let exp = moons_experiment();
    let d2r_robust = mean(exp.d2r.iter().map(|o| final_target(o).1));
    let d2r_clean = mean(exp.d2r.iter().map(|o| final_target(o).0));
    let pgd_robust = mean(exp.pgd_at.iter().map(|o| final_target(o).1));
    let per_seed: Vec<String> = exp
        .d2r
        .iter()
        .zip(&exp.pgd_at)
        .map(|(d, p)| {
            let ((dc, dr), (pc, pr)) = (final_target(d), final_target(p));
            format!("[{dc:.3}/{dr:.3} vs {pc:.3}/{pr:.3}]")
        })
        .collect();
    let pass = d2r_robust >= pgd_robust - 0.02 && d2r_clean >= 0.85 && exp.elapsed < Duration::from_secs(300);
    report(
        5,
        "two-moons robustness",
        pass,
        &format!(
            "d2r robust {d2r_robust:.4} clean {d2r_clean:.4}, pgd-at robust {pgd_robust:.4}, per seed clean/robust {}, {:.1?}",
            per_seed.join(" "),
            exp.elapsed
        ),
    );
}

#[test]
fn criterion_6_dynamic_gap_sign() {
    let _guard = serial();
    let exp = moons_experiment();
    let steps: Vec<f64> = exp
        .d2r
        .iter()
        .map(|o| o.records.iter().map(|r| r.steps as f64).sum())
        .collect();
    let total: f64 = steps.iter().sum();
    let positive = exp.d2r.iter().zip(&steps).map(|(o, s)| o.gap_sign_positive_fraction() * s).sum::<f64>() / total;
    let negative = exp.d2r.iter().zip(&steps).map(|(o, s)| o.gap_sign_negative_fraction() * s).sum::<f64>() / total;
    let per_seed: Vec<String> = exp
        .d2r
        .iter()
        .map(|o| format!("{:.3}", o.gap_sign_positive_fraction()))
        .collect();
    let pass = positive > 0.05 && positive < 0.95 && negative > 0.0;
    report(
        6,
        "dynamic gap sign",
        pass,
        &format!(
            "positive fraction {positive:.3}, negative fraction {negative:.3} over {total} steps, per seed positive {}",
            per_seed.join(" ")
        ),
    );
}

#[test]
fn criterion_7_ablation_comparison() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let configs = ["ablation_a0_b0", "ablation_a5_b0", "ablation_a5_b20"];
    let mut metrics = Vec::new();
    let mut keys = Vec::new();
    let mut completed = 0;
    for name in configs {
        let out_dir = dir.path().join(name);
        let config = repo_root().join(format!("configs/{name}.toml"));
        let out = d2r(&["train", "--config", config.to_str().unwrap()], Some(&out_dir));
        completed += usize::from(out.status.code() == Some(0));
        let path = out_dir.join("metrics.csv");
        if let Ok(rows) = read_metrics(&path) {
            let mut k: Vec<_> = rows.iter().map(|r| (r.epoch, r.role.clone(), r.metric.clone())).collect();
            k.sort();
            keys.push(k);
        }
        metrics.push(path);
    }
    let plots = dir.path().join("plots");
    let mut args = vec!["export-plots", "--out", plots.to_str().unwrap()];
    args.extend(metrics.iter().map(|m| m.to_str().unwrap()));
    let exported = d2r(&args, None).status.code() == Some(0);
    let comparison = fs::read_to_string(plots.join("comparison.csv")).unwrap_or_default();
    let compared: Vec<&str> = configs
        .iter()
        .copied()
        .filter(|run| {
            comparison
                .lines()
                .any(|l| l.starts_with(&format!("{run},target,robust_acc@pgd20,")))
        })
        .collect();
    let comparable = keys.len() == 3 && keys.windows(2).all(|w| w[0] == w[1]);
    let pass = completed == 3 && comparable && exported && compared.len() == 3;
    let finals: Vec<String> = comparison
        .lines()
        .filter(|l| l.contains(",target,robust_acc@pgd20,"))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            format!("{}={}", f[0], f[4])
        })
        .collect();
    report(
        7,
        "ablation comparison",
        pass,
        &format!(
            "{completed}/3 runs completed, comparable metrics: {comparable}, comparison rows for {}/3 runs, final target robust {}",
            compared.len(),
            finals.join(" ")
        ),
    );
}

const SMALL: &str = r#"
[run]
id = "small"
seed = 8

[dataset]
kind = "two_moons"
n = 400

[guide]
layers = [2, 16, 2]

[target]
layers = [2, 32, 32, 2]

[train]
epochs = 4
batch_size = 64
lr = 0.01
alpha = 5.0
beta = 20.0
generator = "cag"

[train.attack]
epsilon = 0.1
eta = 0.02
iterations = 5

[[eval]]
generator = "pgd"
epsilon = 0.1
eta = 0.02

[[eval]]
generator = "trades"
epsilon = 0.1
eta = 0.02

[output]
dir = "out"
"#;

#[test]
fn criterion_8_determinism() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let c = config.to_str().unwrap();
    let mut files = Vec::new();
    for attempt in ["first", "second"] {
        let out_dir = dir.path().join(attempt);
        let trained = d2r(&["train", "--config", c], Some(&out_dir)).status.code() == Some(0);
        let after_train = fs::read(out_dir.join("metrics.csv")).unwrap_or_default();
        let ckpt = out_dir.join("target_final.ckpt");
        let evaluated =
            d2r(&["evaluate", "--config", c, "--checkpoint", ckpt.to_str().unwrap()], Some(&out_dir)).status.code()
                == Some(0);
        let after_eval = fs::read(out_dir.join("metrics.csv")).unwrap_or_default();
        files.push((trained && evaluated, after_train, after_eval));
    }
    let ok = files.iter().all(|f| f.0);
    let train_same = files[0].1 == files[1].1 && !files[0].1.is_empty();
    let eval_same = files[0].2 == files[1].2 && files[0].2.len() > files[0].1.len();
    report(
        8,
        "determinism",
        ok && train_same && eval_same,
        &format!(
            "train metrics identical: {train_same} ({} bytes), after evaluate identical: {eval_same} ({} bytes)",
            files[0].1.len(),
            files[0].2.len()
        ),
    );
}

#[test]
fn criterion_9_checkpoint_integrity() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("small.toml");
    fs::write(&config_path, SMALL).unwrap();
    let c = config_path.to_str().unwrap();
    let out_dir = dir.path().join("out");
    let trained = d2r(&["train", "--config", c], Some(&out_dir)).status.code() == Some(0);

    let config = RunConfig::from_toml(SMALL, &config_path, dir.path(), None, Some(out_dir.clone())).unwrap();
    let dataset = config.dataset.load().unwrap();
    let outcome = train(&config.guide, &config.target, &dataset, &config.train).unwrap();
    let x = dataset.features().clone();

    let mut bitwise = true;
    for (name, in_memory) in [("guide_final", &outcome.guide), ("target_final", &outcome.target)] {
        let path = out_dir.join(format!("{name}.ckpt"));
        let Ok(loaded) = load_checkpoint(&path) else {
            bitwise = false;
            continue;
        };
        let (a, b) = (in_memory.predict(&x).unwrap(), loaded.predict(&x).unwrap());
        bitwise &= bits(&a) == bits(&b) && encode(&loaded) == fs::read(&path).unwrap();
    }

    let good = fs::read(out_dir.join("target_final.ckpt")).unwrap_or_default();
    let mut corruptions = Vec::new();
    if good.len() > 64 {
        let mut flipped = good.clone();
        flipped[good.len() / 2] ^= 0x10;
        let mut version = good.clone();
        version[4..6].copy_from_slice(&255u16.to_le_bytes());
        let mut magic = good.clone();
        magic[0] = b'X';
        corruptions = vec![
            ("checksum", flipped),
            ("version", version),
            ("magic", magic),
            ("truncated", good[..good.len() - 12].to_vec()),
        ];
    }
    let mut rejected = 0;
    for (name, bytes) in &corruptions {
        let path = dir.path().join(format!("{name}.ckpt"));
        fs::write(&path, bytes).unwrap();
        let code = d2r(&["evaluate", "--config", c, "--checkpoint", path.to_str().unwrap()], Some(&out_dir))
            .status
            .code();
        rejected += usize::from(code == Some(3));
    }
    let pass = trained && bitwise && corruptions.len() == 4 && rejected == 4;
    report(
        9,
        "checkpoint integrity",
        pass,
        &format!("forward outputs bitwise equal: {bitwise}, corrupted files rejected with exit 3: {rejected}/4"),
    );
}
