//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any criterion fails. Tolerances and budgets are
//! pinned below.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dwc::config::{load_checkpoint, save_checkpoint, RunConfig};
use dwc::data::render::{render, RenderConfig};
use dwc::data::{Dataset, DatasetParams};
use dwc::emd::{self, EditorParams};
use dwc::eval::{recall_at_k, EvalReport, Evaluator, Integration, CURVE_MAX_K};
use dwc::gradcheck::{self, DEFAULT_TOLERANCE};
use dwc::losses::{self, Kernel, LabelMatrix};
use dwc::model::{DwcModel, ModelConfig};
use dwc::params::ParamStore;
use dwc::trainer::{train, EpochMetrics, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};
use dwc::{Result, Tape, Tensor};

const GRADIENT_SECONDS: f64 = 120.0;
const ORACLE_TOLERANCE: f64 = 1e-10;
const ORACLE_BATCHES: usize = 20;
const ORACLE_BATCH: usize = 8;
const SUM_TOLERANCE: f64 = 1e-12;
const INVARIANT_TRIALS: usize = 50;
const TRAIN_SECONDS: f64 = 15.0 * 60.0;
const BASELINE_MULTIPLE: f64 = 10.0;
const ABLATION_SEEDS: u64 = 5;
const ABLATION_WINS: usize = 4;
const DETERMINISM_EPOCHS: usize = 3;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn report(n: usize, name: &str, outcome: Result<Outcome>) -> bool {
    let (pass, detail) = match outcome {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "criterion {n} {name}: {} | {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// ---- 1: gradients --------------------------------------------------------

fn gradients() -> Result<Outcome> {
    let start = Instant::now();
    let cases = gradcheck::suite(0)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = cases
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .expect("non-empty suite");
    let failing: Vec<&str> = cases
        .iter()
        .filter(|c| !c.report.passes(DEFAULT_TOLERANCE) || c.report.checked == 0)
        .map(|c| c.name)
        .collect();
    Ok(Outcome::new(
        failing.is_empty() && secs < GRADIENT_SECONDS,
        format!(
            "{} cases, worst {} rel {:.2e} (< {DEFAULT_TOLERANCE:e}), failing {failing:?}, {secs:.1}s (< {GRADIENT_SECONDS}s)",
            cases.len(),
            worst.name,
            worst.report.max_rel_error
        ),
    ))
}

// ---- 2: loss oracles -----------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn oracle_labels(t: &Tensor, tau: f64) -> Vec<Vec<f64>> {
    let b = t.shape()[0];
    let mut y = vec![vec![0.0; b]; b];
    for i in 0..b {
        let mut z = 0.0;
        for m in 0..b {
            z += (dot(t.row(i), t.row(m)) / tau).exp();
        }
        for j in 0..b {
            y[i][j] = if i == j {
                1.0
            } else {
                (dot(t.row(i), t.row(j)) / tau).exp() / z
            };
        }
    }
    y
}

fn oracle_probs(q: &Tensor, t: &Tensor, tau: f64) -> Vec<Vec<f64>> {
    let b = q.shape()[0];
    let mut p = vec![vec![0.0; b]; b];
    for i in 0..b {
        let mut z = 0.0;
        for m in 0..b {
            z += (dot(q.row(i), t.row(m)) / tau).exp();
        }
        for j in 0..b {
            p[i][j] = (dot(q.row(i), t.row(j)) / tau).exp() / z;
        }
    }
    p
}

fn oracle_mmc(p: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> f64 {
    let b = p.len() as f64;
    let mut hard = 0.0;
    let mut soft = 0.0;
    for i in 0..p.len() {
        hard -= p[i][i].ln();
        for j in 0..p.len() {
            soft -= y[i][j] * p[i][j].ln();
        }
    }
    lambda * hard / b + (1.0 - lambda) * soft / (b * b)
}

fn oracle_kl(t: &[Vec<f64>], s: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..t.len() {
        for j in 0..t.len() {
            total += t[i][j] * (t[i][j] / s[i][j]).ln();
        }
    }
    total / t.len() as f64
}

fn loss_oracles() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 4];
    for _ in 0..ORACLE_BATCHES {
        let tau = rng.random_range(0.5..2.0);
        let lambda = rng.random_range(0.1..1.0);
        let (q, t, q2) = (
            random(&[ORACLE_BATCH, 6], &mut rng),
            random(&[ORACLE_BATCH, 6], &mut rng),
            random(&[ORACLE_BATCH, 6], &mut rng),
        );
        let labels = losses::soft_labels(&t, tau, Kernel::Dot)?;
        let mut tape = Tape::new();
        let (qv, tv, q2v) = (
            tape.constant(q.clone()),
            tape.constant(t.clone()),
            tape.constant(q2.clone()),
        );
        let p = losses::predict_probs(&mut tape, qv, tv, tau)?;
        let teacher = losses::predict_probs(&mut tape, q2v, tv, tau)?;
        let mmc = losses::mmc_loss(&mut tape, &p, &labels, lambda)?;
        let teacher_probs = tape.value(teacher.probs).clone();
        let kl = losses::distill_loss(&mut tape, &teacher_probs, &p)?;

        let y = oracle_labels(&t, tau);
        let po = oracle_probs(&q, &t, tau);
        let to = oracle_probs(&q2, &t, tau);
        let flat = |m: &[Vec<f64>]| m.concat();
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst[0] = worst[0].max(diff(labels.values.data(), &flat(&y)));
        worst[1] = worst[1].max(diff(tape.value(p.probs).data(), &flat(&po)));
        worst[2] = worst[2].max((tape.value(mmc).item() - oracle_mmc(&po, &y, lambda)).abs());
        worst[3] = worst[3].max((tape.value(kl).item() - oracle_kl(&to, &po)).abs());
    }
    Ok(Outcome::new(
        worst.iter().all(|&w| w < ORACLE_TOLERANCE),
        format!(
            "{ORACLE_BATCHES} batches of B={ORACLE_BATCH}; max |diff| labels {:.1e}, probs {:.1e}, contrastive {:.1e}, distill {:.1e} (< {ORACLE_TOLERANCE:e})",
            worst[0], worst[1], worst[2], worst[3]
        ),
    ))
}

// ---- 3: structural invariants --------------------------------------------

fn invariants() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations: Vec<String> = Vec::new();
    let mut note = |ok: bool, what: &str| {
        if !ok && !violations.iter().any(|v| v == what) {
            violations.push(what.to_string());
        }
    };
    let schema = dwc::data::AttributeSchema::default();
    let catalog = dwc::data::generate_catalog(&schema, 0);
    let vocab_words = ["replace", "red", "with", "blue", "and", "circle", "to", "star"];
    for trial in 0..INVARIANT_TRIALS {
        let b = rng.random_range(2..10);
        let tau = rng.random_range(0.3..3.0);
        let kernel = [Kernel::Dot, Kernel::Euclidean, Kernel::Sigmoid][trial % 3];
        let t = random(&[b, 5], &mut rng);
        let LabelMatrix { values, .. } = losses::soft_labels(&t, tau, kernel)?;
        for i in 0..b {
            for j in 0..b {
                let v = values.data()[i * b + j];
                note(if i == j { v == 1.0 } else { v > 0.0 && v < 1.0 }, "soft-label range");
            }
        }

        let mut tape = Tape::new();
        let (qv, tv) = (tape.constant(random(&[b, 5], &mut rng)), tape.constant(t.clone()));
        let p = losses::predict_probs(&mut tape, qv, tv, tau)?;
        let probs = tape.value(p.probs).clone();
        for i in 0..b {
            note(
                (probs.row(i).iter().sum::<f64>() - 1.0).abs() < SUM_TOLERANCE,
                "probability rows",
            );
        }
        let same = losses::distill_loss(&mut tape, &probs, &p)?;
        note(tape.value(same).item().abs() < SUM_TOLERANCE, "distill(P, P) = 0");
        let other_q = tape.constant(random(&[b, 5], &mut rng));
        let other = losses::predict_probs(&mut tape, other_q, tv, tau)?;
        let other = tape.value(other.probs).clone();
        let kl = losses::distill_loss(&mut tape, &other, &p)?;
        note(tape.value(kl).item() >= 0.0, "distill >= 0");

        // A model with a random combiner, on a real render and sentence.
        let m = DwcModel::new(
            &schema,
            ModelConfig {
                dim: 8,
                seed: trial as u64,
                ..Default::default()
            },
        )?;
        let item = &catalog[rng.random_range(0..catalog.len())];
        let img = render(&schema, item, RenderConfig::default());
        let len = rng.random_range(1..=vocab_words.len());
        let tokens = m.encode_tokens(&vocab_words[..len])?;
        let mut tape = Tape::new();
        let bind = m.bind(&mut tape, None);
        let q = m.query(&mut tape, &bind, &img, &tokens)?;
        let alpha = tape.value(q.alpha.expect("editor")).item();
        note(alpha > 0.0 && alpha < 1.0, "alpha range");
        let spatial: f64 = tape.value(q.spatial.expect("editor")).data().iter().sum();
        let word: f64 = tape.value(q.word.expect("editor")).data().iter().sum();
        note((spatial - 1.0).abs() < SUM_TOLERANCE, "spatial attention sum");
        note((word - 1.0).abs() < SUM_TOLERANCE, "word attention sum");

        // Zero-initialized editors leave both modalities untouched.
        let mut store = ParamStore::new();
        let editor = EditorParams::new(&mut store, 4, &mut rng);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, |_| false);
        let f_ref = tape.constant(random(&[4, 3, 3], &mut rng));
        let f_txt = tape.constant(random(&[4, len], &mut rng));
        let a_sp = emd::spatial_attention(&mut tape, f_ref, f_txt, 3.0)?;
        let a_w = emd::word_attention(&mut tape, f_txt, f_ref, 3.0)?;
        let ei = emd::edit_image(&mut tape, f_ref, a_sp, &bind, &editor)?;
        let et = emd::edit_text(&mut tape, f_txt, a_w, &bind, &editor)?;
        note(tape.value(ei) == tape.value(f_ref), "zero image editor is identity");
        note(tape.value(et) == tape.value(f_txt), "zero text editor is identity");
    }
    Ok(Outcome::new(
        violations.is_empty(),
        format!("{INVARIANT_TRIALS} random instances, violations {violations:?}"),
    ))
}

// ---- shared training runs ------------------------------------------------

struct Run {
    model: DwcModel,
    metrics: Vec<EpochMetrics>,
    report: EvalReport,
    seconds: f64,
}

fn run(dataset: &Dataset, config: &TrainConfig) -> Result<Run> {
    let start = Instant::now();
    let out = train(config, dataset, None)?;
    let seconds = start.elapsed().as_secs_f64();
    let (report, _) = Evaluator::new(&out.model, dataset)?.evaluate(&dataset.val, Integration::Mean)?;
    Ok(Run {
        model: out.model,
        metrics: out.metrics,
        report,
        seconds,
    })
}

fn trainable_losses(metrics: &[EpochMetrics]) -> Vec<f64> {
    metrics
        .iter()
        .filter(|m| m.stream == "trainable")
        .map(|m| m.l_total)
        .collect()
}

/// Mean loss per tenth of training.
fn decile_means(losses: &[f64]) -> Vec<f64> {
    let n = losses.len();
    (0..10)
        .map(|d| {
            let (lo, hi) = (d * n / 10, ((d + 1) * n / 10).max(d * n / 10 + 1).min(n));
            losses[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

// ---- 4: learning liveness ------------------------------------------------

fn liveness(reference: &Run, gallery: usize) -> Result<Outcome> {
    let deciles = decile_means(&trainable_losses(&reference.metrics));
    let monotone = deciles.windows(2).all(|w| w[1] < w[0]);
    let baseline = 100.0 * 10.0 / gallery as f64;
    let needed = BASELINE_MULTIPLE * baseline;
    let r10 = reference.report.r_at_10;
    let shown: Vec<String> = deciles.iter().map(|d| format!("{d:.5}")).collect();
    Ok(Outcome::new(
        monotone && r10 >= needed && reference.seconds < TRAIN_SECONDS,
        format!(
            "decile losses [{}] monotone {monotone}; val R@10 {r10:.2} (need >= {needed:.2}); train {:.0}s (< {TRAIN_SECONDS}s)",
            shown.join(", "),
            reference.seconds
        ),
    ))
}

// ---- 5: ablation direction -----------------------------------------------

fn ablations(dataset: &Dataset, reference: &Run, base: &TrainConfig) -> Result<Outcome> {
    let mut rows = Vec::new();
    let (mut emd_wins, mut distill_wins) = (0, 0);
    for seed in 0..ABLATION_SEEDS {
        let full = if seed == base.seed {
            reference.report.r_at_10
        } else {
            run(dataset, &TrainConfig { seed, ..base.clone() })?.report.r_at_10
        };
        let sum = run(
            dataset,
            &TrainConfig {
                seed,
                no_emd: true,
                ..base.clone()
            },
        )?
        .report
        .r_at_10;
        let nod = run(
            dataset,
            &TrainConfig {
                seed,
                no_distill: true,
                ..base.clone()
            },
        )?
        .report
        .r_at_10;
        emd_wins += usize::from(full > sum);
        distill_wins += usize::from(full > nod);
        rows.push(format!("s{seed} {full:.2}/{sum:.2}/{nod:.2}"));
    }
    Ok(Outcome::new(
        emd_wins >= ABLATION_WINS && distill_wins >= ABLATION_WINS,
        format!(
            "val R@10 full/no_emd/no_distill [{}]; full beats no_emd {emd_wins}/{ABLATION_SEEDS}, no_distill {distill_wins}/{ABLATION_SEEDS} (need >= {ABLATION_WINS})",
            rows.join(", ")
        ),
    ))
}

// ---- 6: modality importance ----------------------------------------------

fn modality_importance(reference: &Run) -> Result<Outcome> {
    let a = &reference.report.alpha;
    Ok(match (a.image_dominant, a.text_dominant) {
        (Some(img), Some(txt)) => Outcome::new(
            img > txt,
            format!("mean alpha image-dominant {img:.4} vs text-dominant {txt:.4}"),
        ),
        _ => Outcome::new(false, format!("a dominance subset is empty: {a:?}")),
    })
}

// ---- 7: determinism ------------------------------------------------------

fn determinism(dataset: &Dataset, reference: &Run, base: &TrainConfig) -> Result<Outcome> {
    let short = TrainConfig {
        epochs: DETERMINISM_EPOCHS,
        log_wall_time: false,
        ..base.clone()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&short, dataset, Some(a.path()))?;
    train(&short, dataset, Some(b.path()))?;
    let read = |dir: &std::path::Path, f: &str| fs::read(dir.join(f)).unwrap_or_default();
    let files = [METRICS_FILE, CHECKPOINT_FILE, "model.bin"];
    let identical = files.iter().all(|f| {
        let x = read(a.path(), f);
        !x.is_empty() && x == read(b.path(), f)
    });

    let ck = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        train: base.clone(),
        dataset: dataset.params.clone(),
        ..Default::default()
    };
    save_checkpoint(ck.path(), &cfg, &reference.model)?;
    let (_, restored) = load_checkpoint(ck.path(), None)?;
    let (again, _) = Evaluator::new(&restored, dataset)?.evaluate(&dataset.val, Integration::Mean)?;
    let preserved = again.r_at_10 == reference.report.r_at_10 && again == reference.report;
    Ok(Outcome::new(
        identical && preserved,
        format!(
            "two {DETERMINISM_EPOCHS}-epoch runs byte-identical {identical}; checkpoint round-trip R@10 {:.4} -> {:.4}",
            reference.report.r_at_10, again.r_at_10
        ),
    ))
}

// ---- 8: recall curve -----------------------------------------------------

fn recall_curve(dataset: &Dataset, reference: &Run) -> Result<Outcome> {
    let ev = Evaluator::new(&reference.model, dataset)?;
    let outputs = dataset.val.iter().map(|t| ev.query(t)).collect::<Result<Vec<_>>>()?;
    let results = dataset
        .val
        .iter()
        .zip(&outputs)
        .enumerate()
        .map(|(i, (t, o))| ev.score(i, t, o, Integration::Mean))
        .collect::<Result<Vec<_>>>()?;
    let curve = &reference.report.curve;
    let monotone = curve.len() == CURVE_MAX_K && curve.windows(2).all(|w| w[1] >= w[0]);
    let at_gallery = recall_at_k(&results, ev.gallery_size());
    Ok(Outcome::new(
        monotone && at_gallery == 100.0,
        format!(
            "R@1 {:.2}, R@100 {:.2}, nondecreasing over k=1..{CURVE_MAX_K} {monotone}; R@{} = {at_gallery}",
            curve[0],
            curve[CURVE_MAX_K - 1],
            ev.gallery_size()
        ),
    ))
}

fn main() -> ExitCode {
    let mut all = true;
    all &= report(1, "gradient suite", gradients());
    all &= report(2, "loss oracles", loss_oracles());
    all &= report(3, "structural invariants", invariants());

    let dataset = Dataset::generate(DatasetParams::default()).expect("reference dataset");
    let base = TrainConfig::default();
    println!(
        "reference run: {} train / {} val triplets, gallery {}, {} epochs at lr {} (several minutes)",
        dataset.train.len(),
        dataset.val.len(),
        dataset.catalog.len(),
        base.epochs,
        base.learning_rate
    );
    match run(&dataset, &base) {
        Ok(reference) => {
            all &= report(4, "learning liveness", liveness(&reference, dataset.catalog.len()));
            all &= report(5, "ablation direction", ablations(&dataset, &reference, &base));
            all &= report(6, "modality importance", modality_importance(&reference));
            all &= report(7, "determinism", determinism(&dataset, &reference, &base));
            all &= report(8, "recall curve", recall_curve(&dataset, &reference));
        }
        Err(e) => {
            for (n, name) in [
                (4, "learning liveness"),
                (5, "ablation direction"),
                (6, "modality importance"),
                (7, "determinism"),
                (8, "recall curve"),
            ] {
                all &= report(n, name, Err(dwc::Error::Contract(format!("reference run failed: {e}"))));
            }
        }
    }
    if all {
        println!("acceptance: all criteria PASS");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: at least one criterion FAILED");
        ExitCode::FAILURE
    }
}
