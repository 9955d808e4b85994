//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Artifacts stay under the cargo target tmpdir for
//! inspection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use gxssl_cli::config::{parse_config, ExperimentConfig};
use gxssl_cli::sweep::{median, median_hm, read_summary, SUMMARY_FILE};
use gxssl_core::checkpoint::{load_meta, INDEX_FILE, MANIFEST_FILE, PARAMS_FILE};
use gxssl_core::evaluate::{classify_patient, compute_metrics};
use gxssl_core::manifest::DatasetManifest;
use gxssl_core::nn::{Module, ParamSet};
use gxssl_core::patcher::{extract_labeled_patches, load_manifest_patches, tile_positions, TilingSpec};
use gxssl_core::ssl::gradcheck::{gradient_check, GradcheckConfig};
use gxssl_core::ssl::pretrain::{pretrain, teacher_ema, ssl_inputs, PretrainSetup, CHECKPOINT_DIR, LOSSES_FILE};
use gxssl_core::ssl::{cross_model_loss, cross_view_loss, EncoderConfig, MlpConfig, SslHyperparams, SslModel, Teacher};
use gxssl_core::synthgen::{generate_patient, SynthConfig};
use gxssl_core::types::{GrayImage, PatchLabel, PatientLabel};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HM_TOLERANCE: f64 = 1e-3;
const LOSS_TOLERANCE: f64 = 1e-6;
const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_COORDINATES: usize = 200;
const EMA_STEP_TOLERANCE: f64 = 1e-7;
const EMA_CLOSED_FORM_TOLERANCE: f64 = 1e-6;
const MIN_EMBEDDING_STD: f64 = 0.01;
const SSL_MARGIN_AT_10: f64 = 0.05;
const SWEEP_SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

/// Paths shared by the end-to-end criteria.
struct Workspace {
    root: PathBuf,
    data: PathBuf,
}

impl Workspace {
    fn new() -> Result<Self> {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        if root.exists() {
            std::fs::remove_dir_all(&root)?;
        }
        let data = root.join("data");
        std::fs::create_dir_all(&data)?;
        Ok(Self { root, data })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn gxssl(&self, args: &[&str]) -> Result<()> {
        let out = Command::new(env!("CARGO_BIN_EXE_gxssl"))
            .args(args)
            .env("GXSSL_DATA_DIR", &self.data)
            .env("RUST_LOG", "warn")
            .output()
            .context("running gxssl")?;
        if !out.status.success() {
            bail!("gxssl {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
        }
        Ok(())
    }

    fn write_json(&self, name: &str, value: &impl serde::Serialize) -> Result<PathBuf> {
        let path = self.data.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
        Ok(path)
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

// 1
fn metric_formula() -> Result<Outcome> {
    let published = [
        (0.957, 0.806, 0.875),
        (0.964, 0.863, 0.911),
        (0.936, 0.895, 0.915),
        (0.964, 0.901, 0.931),
    ];
    let mut worst: f64 = 0.0;
    for (sen, spe, hm) in published {
        let tp = (sen * 1000.0_f64).round() as usize;
        let tn = (spe * 1000.0_f64).round() as usize;
        let mut pairs = vec![(1u8, 1u8); tp];
        pairs.extend(vec![(1, 0); 1000 - tp]);
        pairs.extend(vec![(0, 0); tn]);
        pairs.extend(vec![(0, 1); 1000 - tn]);
        let r = compute_metrics(&pairs, 0.5)?;
        worst = worst.max((r.hm - hm).abs());
    }
    outcome(worst <= HM_TOLERANCE, format!("max |HM - published| {worst:.5} (tol {HM_TOLERANCE})"))
}

// 2
fn loss_suite() -> Result<Outcome> {
    let cases: [(&[f64], &[f64], f64); 3] = [
        (&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], 0.0),
        (&[1.0, 0.0, 0.0], &[0.0, 3.0, 0.0], 2.0),
        (&[1.0, -2.0, 0.5], &[-1.0, 2.0, -0.5], 4.0),
    ];
    let mut fixed_err: f64 = 0.0;
    for (a, b, want) in cases {
        fixed_err = fixed_err.max((cross_view_loss(a, b) - want).abs());
        fixed_err = fixed_err.max((cross_model_loss(a, b) - want).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..10_000 {
        let d = rng.random_range(1..64);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        if a.iter().all(|&v| v == 0.0) || b.iter().all(|&v| v == 0.0) {
            continue;
        }
        let c = rng.random_range(0.01..100.0);
        let ab = cross_view_loss(&a, &b);
        let scaled: Vec<f64> = a.iter().map(|v| c * v).collect();
        let ok = (-LOSS_TOLERANCE..=4.0 + LOSS_TOLERANCE).contains(&ab)
            && (ab - cross_view_loss(&b, &a)).abs() <= LOSS_TOLERANCE
            && (ab - cross_view_loss(&scaled, &b)).abs() <= LOSS_TOLERANCE
            && (ab - cross_model_loss(&a, &b)).abs() <= LOSS_TOLERANCE;
        violations += usize::from(!ok);
    }
    outcome(
        fixed_err <= LOSS_TOLERANCE && violations == 0,
        format!("collinear/orthogonal/antipodal max err {fixed_err:.1e}; {violations} violations in 10000 pairs"),
    )
}

// 3
fn gradcheck() -> Result<Outcome> {
    let r = gradient_check(&GradcheckConfig {
        tolerance: GRADCHECK_TOLERANCE,
        coordinates: GRADCHECK_COORDINATES,
        ..GradcheckConfig::default()
    })?;
    outcome(
        r.passed() && r.checked >= GRADCHECK_COORDINATES,
        format!(
            "{} coordinates, max rel err {:.2e} (tol {GRADCHECK_TOLERANCE:e}), teacher max |grad| {}",
            r.checked, r.max_rel_error, r.teacher_max_abs_grad
        ),
    )
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        channels: vec![4, 8],
        ..EncoderConfig::small_conv()
    }
}

fn tiny_mlp() -> MlpConfig {
    MlpConfig {
        hidden_size: 8,
        output_size: 4,
    }
}

fn flat_values(m: &impl Module<f64>) -> Vec<f64> {
    m.named_params("").into_iter().flat_map(|(_, p)| p.value.clone()).collect()
}

// 4
fn ema_suite() -> Result<Outcome> {
    let hyper = SslHyperparams {
        batch_size: 4,
        ..SslHyperparams::default()
    };
    let model = |seed| SslModel::<f64>::new(&tiny_encoder(), &tiny_mlp(), &hyper, seed);
    let (mut a, b) = (model(1)?, model(2)?);
    let theta = flat_values(&Teacher::from_student(&b.student));

    let psi0 = flat_values(&a.teacher);
    let tau = 0.996;
    teacher_ema(&mut a.teacher, &b.student, tau)?;
    let one_step = psi0
        .iter()
        .zip(&theta)
        .zip(flat_values(&a.teacher))
        .map(|((p, t), p1)| (p1 - (tau * p + (1.0 - tau) * t)).abs())
        .fold(0.0, f64::max);

    let mut a = model(1)?;
    let tau: f64 = 0.97;
    for _ in 0..100 {
        teacher_ema(&mut a.teacher, &b.student, tau)?;
    }
    let decay = tau.powi(100);
    let closed = psi0
        .iter()
        .zip(&theta)
        .zip(flat_values(&a.teacher))
        .map(|((p, t), pk)| (pk - (decay * p + (1.0 - decay) * t)).abs())
        .fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let patches: Vec<GrayImage> = (0..8)
        .map(|_| GrayImage::new(16, 16, (0..256).map(|_| rng.random::<f32>()).collect(), 16))
        .collect::<std::result::Result<_, _>>()?;
    let frozen_hyper = SslHyperparams {
        epochs: 25,
        batch_size: 4,
        tau: 1.0,
        ..SslHyperparams::default()
    };
    let augment = gxssl_core::augment::AugmentConfig {
        view_size: 8,
        ..Default::default()
    };
    let setup = PretrainSetup {
        encoder: &tiny_encoder(),
        mlp: &tiny_mlp(),
        augment: &augment,
        hyper: &frozen_hyper,
        seed: 5,
        config_echo: serde_json::Value::Null,
    };
    let out = pretrain(&patches, &setup, None)?;
    let init = SslModel::<f32>::new(&tiny_encoder(), &tiny_mlp(), &frozen_hyper, 5)?;
    let teacher = |m: &SslModel<f32>| -> Result<ParamSet> {
        let mut set = ParamSet::new();
        m.teacher.export("", &mut set)?;
        Ok(set)
    };
    let (t0, t1) = (teacher(&init)?, teacher(&out.model)?);
    let frozen = t0.iter().zip(t1.iter()).all(|(a, b)| {
        a.name == b.name && a.data.len() == b.data.len() && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let steps = out.history.len();
    outcome(
        one_step <= EMA_STEP_TOLERANCE && closed <= EMA_CLOSED_FORM_TOLERANCE && frozen && steps == 50,
        format!(
            "one-step err {one_step:.1e} (tol {EMA_STEP_TOLERANCE:e}); k=100 err {closed:.1e} (tol {EMA_CLOSED_FORM_TOLERANCE:e}); tau=1 teacher unchanged over {steps} steps: {frozen}"
        ),
    )
}

// 5
fn tiling_oracle() -> Result<Outcome> {
    let spec = |patch_size, stride| TilingSpec {
        patch_size,
        stride,
        ..TilingSpec::synthetic()
    };
    let paper = tile_positions(2048, 2048, &TilingSpec::paper())?.len();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..200 {
        let p = rng.random_range(1..120);
        let st = rng.random_range(1..=p);
        let (w, h) = (rng.random_range(p..300), rng.random_range(p..300));
        let mut brute = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if x % st == 0 && y % st == 0 && x + p <= w && y + p <= h {
                    brute.push((x, y));
                }
            }
        }
        mismatches += usize::from(tile_positions(w, h, &spec(p, st))? != brute);
    }

    let cfg = SynthConfig {
        image_size: 160,
        ..SynthConfig::default()
    };
    let tiling = spec(32, 16);
    let mut partition_failures = 0;
    for i in 0..50u64 {
        let label = if i % 2 == 0 { PatientLabel::Negative } else { PatientLabel::Positive };
        let patient = generate_patient(&cfg, rng.random(), label)?;
        let records = extract_labeled_patches("p", &patient.image, &patient.mask, label, &tiling)?;
        let fraction = |x: usize, y: usize| {
            let mut inside = 0;
            for yy in y..y + 32 {
                for xx in x..x + 32 {
                    inside += usize::from(patient.mask.get(xx, yy));
                }
            }
            inside as f64 / 1024.0
        };
        let mut expected = Vec::new();
        for (x, y) in tile_positions(160, 160, &tiling)? {
            let f = fraction(x, y);
            if f < 0.01 {
                expected.push((x, y, PatchLabel::O));
            } else if f >= 0.85 {
                expected.push((x, y, PatchLabel::inside(label)));
            }
        }
        let got: Vec<(usize, usize, PatchLabel)> =
            records.iter().map(|r| (r.grid_x, r.grid_y, r.label.expect("labelled"))).collect();
        partition_failures += usize::from(got != expected);
    }
    outcome(
        paper == 1225 && mismatches == 0 && partition_failures == 0,
        format!("2048/299/50 -> {paper} positions; {mismatches}/200 grid mismatches; {partition_failures}/50 partition failures"),
    )
}

// 6
fn aggregation_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut non_monotone = 0;
    for i in 0..1000 {
        let len = rng.random_range(1..200);
        let preds: Vec<PatchLabel> = (0..len).map(|_| PatchLabel::ALL[rng.random_range(0..3)]).collect();
        let sigma = rng.random::<f64>();
        let (mut o, mut n, mut p) = (0, 0, 0);
        for l in &preds {
            match l {
                PatchLabel::O => o += 1,
                PatchLabel::N => n += 1,
                PatchLabel::P => p += 1,
            }
        }
        let y = if n + p == 0 { 0 } else { u8::from(p as f64 / (n + p) as f64 >= sigma) };
        let got = classify_patient(&format!("p{i}"), &preds, sigma)?;
        mismatches += usize::from((got.count_o, got.count_n, got.count_p, got.y) != (o, n, p, y));
        let ys = (0..=1000)
            .map(|k| classify_patient("s", &preds, k as f64 / 1000.0).map(|r| r.y))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        non_monotone += usize::from(ys.windows(2).any(|w| w[1] > w[0]));
    }
    use PatchLabel::*;
    let boundary = classify_patient("b", &[N, P, O, O], 0.5)?.y == 1 && classify_patient("c", &[N, N, N, P], 0.25)?.y == 1;
    outcome(
        mismatches == 0 && non_monotone == 0 && boundary,
        format!("{mismatches}/1000 recount mismatches; {non_monotone} non-monotone sigma sweeps; ratio = sigma gives y=1: {boundary}"),
    )
}

/// Files of a pretraining run that must match bit for bit.
fn run_bytes(dir: &Path) -> Result<Vec<Vec<u8>>> {
    let ckpt = dir.join(CHECKPOINT_DIR);
    [ckpt.join(PARAMS_FILE), ckpt.join(INDEX_FILE), ckpt.join(MANIFEST_FILE), dir.join(LOSSES_FILE)]
        .iter()
        .map(|p| std::fs::read(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

/// Synthesizes the pool and the test cohort and tiles the pool.
fn build_fixture(ws: &Workspace) -> Result<()> {
    ws.write_json("synth.json", &SynthConfig::fixture())?;
    ws.write_json("experiment.json", &ExperimentConfig::synthetic().to_json())?;
    let short = ExperimentConfig {
        hyper: SslHyperparams {
            epochs: 3,
            ..ExperimentConfig::synthetic().hyper
        },
        ..ExperimentConfig::synthetic()
    };
    ws.write_json("short.json", &short.to_json())?;
    ws.gxssl(&["synth", "--config", "synth.json", "--out", s(&ws.data.join("pool")), "--patients", "200", "--seed", "11"])?;
    ws.gxssl(&[
        "synth", "--config", "synth.json", "--out", s(&ws.data.join("test")), "--patients", "40", "--seed", "12", "--split", "test",
    ])?;
    ws.gxssl(&["patch", "--manifest", "pool/manifest.json", "--config", "experiment.json", "--out", s(&ws.data.join("patches")), "--packed"])
}

// 7
fn determinism(ws: &Workspace) -> Result<Outcome> {
    for run in ["short_a", "short_b"] {
        ws.gxssl(&[
            "pretrain", "--manifest", "patches/manifest.json", "--config", "short.json", "--out", s(&ws.path(run)), "--deterministic",
        ])?;
    }
    let same = run_bytes(&ws.path("short_a"))? == run_bytes(&ws.path("short_b"))?;
    outcome(same, format!("losses.csv and checkpoint archive bit-identical across two 3-epoch runs: {same}"))
}

// 8
fn no_collapse(ws: &Workspace) -> Result<Outcome> {
    ws.gxssl(&[
        "pretrain", "--manifest", "patches/manifest.json", "--config", "experiment.json", "--out", s(&ws.path("ssl")), "--deterministic",
    ])?;
    let mut rdr = csv::Reader::from_path(ws.path("ssl").join(LOSSES_FILE))?;
    let rows: Vec<BTreeMap<String, f64>> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    let (first, last) = (rows.first().context("empty losses.csv")?, rows.last().context("empty losses.csv")?);
    let (std, loss0, loss) = (last["embedding_std"], first["loss_total"], last["loss_total"]);
    outcome(
        std > MIN_EMBEDDING_STD && loss < loss0,
        format!("{} steps; final embedding_std {std:.4} (> {MIN_EMBEDDING_STD}); loss {loss0:.4} -> {loss:.4}", rows.len()),
    )
}

/// Best validation patch accuracy recorded in a sweep cell's checkpoint.
fn cell_val_accuracy(sweep: &Path, seed: u64, k: usize, init: &str) -> Result<f64> {
    let meta = load_meta(&sweep.join("cells").join(format!("s{seed}_k{k}_{init}")).join("checkpoint"))?;
    ensure!(meta.epoch >= 1, "cell s{seed}_k{k}_{init} kept no epoch");
    Ok(meta.val_accuracy_history[meta.epoch - 1])
}

// 9
fn ssl_benefit(ws: &Workspace) -> Result<Outcome> {
    let plan = serde_json::json!({
        "name": "acceptance",
        "seeds": SWEEP_SEEDS,
        "fewshot_grid": [10, 20, 30, 40],
        "pool_manifest": "patches/manifest.json",
        "test_manifest": "test/manifest.json",
        "ssl_checkpoint": ws.path("ssl"),
    });
    ws.write_json("plan.json", &plan)?;
    let sweep = ws.path("sweep");
    ws.gxssl(&["sweep", "--plan", "plan.json", "--config", "experiment.json", "--out", s(&sweep), "--deterministic"])?;
    let rows = read_summary(&sweep.join(SUMMARY_FILE))?;
    ensure!(rows.len() == 24, "summary has {} rows, expected 24", rows.len());
    let medians = median_hm(&rows);
    let (ssl, scratch) = (&medians["ssl_checkpoint"], &medians["scratch"]);
    let margin = ssl[&10] - scratch[&10];
    let non_inferior = ssl.iter().all(|(k, v)| *v >= scratch[k]);
    let curve = |m: &BTreeMap<usize, f64>| m.values().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/");
    let mut val_gap: Vec<f64> = SWEEP_SEEDS
        .iter()
        .map(|&seed| Ok(cell_val_accuracy(&sweep, seed, 10, "ssl_checkpoint")? - cell_val_accuracy(&sweep, seed, 10, "scratch")?))
        .collect::<Result<_>>()?;
    outcome(
        margin >= SSL_MARGIN_AT_10 && non_inferior,
        format!(
            "median HM ssl {} vs scratch {} at k=10/20/30/40; k=10 margin {margin:+.3} (need >= {SSL_MARGIN_AT_10}); non-inferior everywhere: {non_inferior}; median k=10 val accuracy gap {:+.3}",
            curve(ssl),
            curve(scratch),
            median(&mut val_gap)
        ),
    )
}

// 10
fn label_blindness(ws: &Workspace) -> Result<Outcome> {
    let cfg = parse_config(&ws.data.join("short.json"))?;
    let manifest = DatasetManifest::load(&ws.data.join("patches/manifest.json"))?;
    let mut records = load_manifest_patches(&manifest, &cfg.tiling)?;
    let mut labels: Vec<Option<PatchLabel>> = records.iter().map(|r| r.label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(10));
    let mut patient_labels: Vec<PatientLabel> = records.iter().map(|r| r.patient_label).collect();
    patient_labels.shuffle(&mut ChaCha8Rng::seed_from_u64(11));
    let changed = records.iter().zip(&labels).filter(|(r, l)| r.label != **l).count();
    for ((r, l), pl) in records.iter_mut().zip(labels).zip(patient_labels) {
        r.label = l;
        r.patient_label = pl;
    }
    let setup = PretrainSetup {
        encoder: &cfg.encoder,
        mlp: &cfg.mlp,
        augment: &cfg.augment,
        hyper: &cfg.hyper,
        seed: cfg.seed,
        config_echo: cfg.to_json(),
    };
    let out = ws.path("short_permuted");
    pretrain(&ssl_inputs(&records), &setup, Some(&out))?;
    let same = run_bytes(&out)? == run_bytes(&ws.path("short_a"))?;
    outcome(same, format!("{changed} patch labels permuted; archive bit-identical to the deterministic run: {same}"))
}

fn main() {
    // Tolerate the libtest flags cargo passes to every test target.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let started = Instant::now();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, budget: Duration, f: &mut dyn FnMut() -> Result<Outcome>| {
        let t = Instant::now();
        let r = f();
        let elapsed = t.elapsed();
        let (passed, detail) = match r {
            Ok(o) if elapsed > budget => (false, format!("{}; over the {:?} budget", o.detail, budget)),
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        failed += usize::from(!passed);
        println!(
            "criterion {n:>2} {name:<22} {}  {detail}  [{:.1}s]",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    };
    let min = |m: u64| Duration::from_secs(60 * m);
    report(1, "metric formula", Duration::from_secs(1), &mut metric_formula);
    report(2, "loss suite", Duration::from_secs(10), &mut loss_suite);
    report(3, "gradient check", min(2), &mut gradcheck);
    report(4, "ema / stop-gradient", min(1), &mut ema_suite);
    report(5, "tiling oracle", min(1), &mut tiling_oracle);
    report(6, "aggregation oracle", Duration::from_secs(30), &mut aggregation_oracle);

    let ws = match Workspace::new().and_then(|ws| build_fixture(&ws).map(|_| ws)) {
        Ok(ws) => Some(ws),
        Err(e) => {
            println!("fixture setup failed: {e:#}");
            None
        }
    };
    let needs = |f: fn(&Workspace) -> Result<Outcome>| {
        let ws = ws.as_ref();
        move || match ws {
            Some(ws) => f(ws),
            None => bail!("no fixture"),
        }
    };
    report(7, "determinism", min(10), &mut needs(determinism));
    report(8, "no collapse", min(45), &mut needs(no_collapse));
    report(9, "ssl benefit", min(120), &mut needs(ssl_benefit));
    report(10, "label blindness", min(10), &mut needs(label_blindness));

    println!("{} of 10 criteria passed in {:.0}s", 10 - failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
