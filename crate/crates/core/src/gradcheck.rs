//! Central-difference gradient oracle.
//!
//! The function under test is rebuilt from scratch on a fresh tape for every
//! perturbation, so the numeric estimate never touches the backward rules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{rng_for, Dataset, DatasetParams};
use crate::emd::{self, ClipEditorParams, EditorParams};
use crate::error::{Error, Result};
use crate::losses::{self, Kernel, ProbMatrix};
use crate::model::{DwcModel, ModelConfig, Stream};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Denominator floor for the relative error, so that entries where both
/// gradients are ~0 compare on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input index, element index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the tape gradient of `f` with respect to each of `inputs` against
/// central differences with step `h`.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_selected(inputs, &vec![true; inputs.len()], h, f)
}

/// Like [`check`], but only the inputs flagged in `wrt` are differentiated;
/// the rest enter as constants.
pub fn check_selected<F>(inputs: &[Tensor], wrt: &[bool], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().zip(wrt).map(|(t, &g)| tape.leaf(t.clone(), g)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&mut t, &vs)?;
        Ok(t.value(y).item())
    };

    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        if !wrt[i] {
            continue;
        }
        let zeros = vec![0.0; inputs[i].numel()];
        let analytic = tape.grad(v).unwrap_or(&zeros).to_vec();
        for k in 0..inputs[i].numel() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            if !numeric.is_finite() || !analytic[k].is_finite() {
                return Err(Error::Contract(format!(
                    "non-finite gradient at input {i}, element {k}"
                )));
            }
            let err = relative_error(analytic[k], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, k, analytic[k], numeric));
            }
        }
    }
    Ok(report)
}

/// One named case of the gradient suite.
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheck,
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<GradCheck>;

/// Central-difference checks of every differentiable op, the editors and
/// both streams' full training losses on a seeded `B = 4` instance.
pub fn suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let cases: &[(&'static str, CaseFn)] = &[
        ("add", |r| binary(r, |t, a, b| t.add(a, b))),
        ("sub", |r| binary(r, |t, a, b| t.sub(a, b))),
        ("mul", |r| binary(r, |t, a, b| t.mul(a, b))),
        ("affine", |r| unary(r, &[3, 4], |t, x| Ok(t.affine(x, -1.7, 0.3)))),
        ("sigmoid", |r| unary(r, &[3, 4], |t, x| Ok(t.sigmoid(x)))),
        ("tanh", |r| unary(r, &[3, 4], |t, x| Ok(t.tanh(x)))),
        ("relu", |r| unary(r, &[3, 4], |t, x| Ok(t.relu(x)))),
        ("exp", |r| unary(r, &[3, 4], |t, x| Ok(t.exp(x)))),
        ("log", |r| {
            let x = positive(&[3, 4], r);
            weighted(r, vec![x], |t, v| Ok(t.log(v[0])))
        }),
        ("clamp_min", |r| unary(r, &[3, 4], |t, x| Ok(t.clamp_min(x, 0.05)))),
        ("matmul", |r| {
            let (a, b) = (uniform(&[3, 5], r), uniform(&[5, 2], r));
            weighted(r, vec![a, b], |t, v| t.matmul(v[0], v[1]))
        }),
        ("transpose", |r| unary(r, &[3, 5], |t, x| t.transpose(x))),
        ("reshape", |r| unary(r, &[3, 4], |t, x| t.reshape(x, &[2, 6]))),
        ("conv_1x1", |r| {
            let (x, w, b) = (uniform(&[3, 6], r), uniform(&[4, 3], r), uniform(&[4], r));
            weighted(r, vec![x, w, b], |t, v| t.conv_1x1(v[0], v[1], v[2]))
        }),
        ("conv3x3_s2", |r| {
            let (x, w, b) = (uniform(&[2, 7, 6], r), uniform(&[3, 2, 3, 3], r), uniform(&[3], r));
            weighted(r, vec![x, w, b], |t, v| t.conv3x3_s2(v[0], v[1], v[2]))
        }),
        ("softmax_rows", |r| unary(r, &[3, 4], |t, x| t.softmax(x, 1))),
        ("softmax_cols", |r| unary(r, &[3, 4], |t, x| t.softmax(x, 0))),
        ("log_softmax", |r| unary(r, &[3, 4], |t, x| t.log_softmax(x, 1))),
        ("gem", |r| {
            let x = positive(&[3, 5], r);
            weighted(r, vec![x], |t, v| t.gem(v[0], 3.0))
        }),
        ("concat", |r| {
            let (a, b) = (uniform(&[2, 3], r), uniform(&[2, 2], r));
            weighted(r, vec![a, b], |t, v| t.concat(&[v[0], v[1]], 1))
        }),
        ("narrow", |r| unary(r, &[3, 5], |t, x| t.narrow(x, 1, 1, 3))),
        ("gather_rows", |r| {
            unary(r, &[4, 3], |t, x| t.gather_rows(x, &[2, 0, 2, 3]))
        }),
        ("mean", |r| unary(r, &[3, 4], |t, x| Ok(t.mean(x)))),
        ("editor", editor_case),
        ("frozen_editor", frozen_editor_case),
        ("contrastive_loss", contrastive_case),
        ("distillation_loss", distill_case),
        ("trainable_stream_loss", |r| stream_case(r, Stream::Trainable)),
        ("frozen_stream_loss", |r| stream_case(r, Stream::Frozen)),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(i, &(name, case))| {
            let mut rng = rng_for(seed, 100 + i as u64);
            Ok(SuiteCase {
                name,
                report: case(&mut rng)?,
            })
        })
        .collect()
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.2..1.5)).collect()).expect("shape")
}

/// Checks `sum(w * f(inputs))` with a fixed random `w`, so that ops whose
/// plain sum is constant (softmax) still get a nontrivial gradient.
fn weighted<F>(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let probe = {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&mut t, &vs)?;
        t.shape(y).to_vec()
    };
    let w = uniform(&probe, rng);
    check(&inputs, DEFAULT_STEP, |t, v| {
        let y = f(t, v)?;
        let wv = t.constant(w.clone());
        let prod = t.mul(y, wv)?;
        Ok(t.sum(prod))
    })
}

fn unary<F>(rng: &mut ChaCha8Rng, shape: &[usize], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let x = uniform(shape, rng);
    weighted(rng, vec![x], |t, v| f(t, v[0]))
}

fn binary<F>(rng: &mut ChaCha8Rng, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var, Var) -> Result<Var>,
{
    let (a, b) = (uniform(&[3, 4], rng), uniform(&[3, 4], rng));
    weighted(rng, vec![a, b], |t, v| f(t, v[0], v[1]))
}

/// Inputs are the listed params followed by `extra`; the closure receives
/// bindings that point at the perturbable copies.
fn with_params<F>(store: &ParamStore, ids: &[ParamId], extra: Vec<Tensor>, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &Bindings, &[Var]) -> Result<Var>,
{
    let mut inputs: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
    inputs.extend(extra);
    check(&inputs, DEFAULT_STEP, |t, v| {
        let mut b = store.bind(t, |_| false);
        for (&id, &var) in ids.iter().zip(v) {
            b.set(id, var);
        }
        f(t, &b, &v[ids.len()..])
    })
}

fn randomize(store: &mut ParamStore, ids: &[ParamId], rng: &mut ChaCha8Rng) {
    for &id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

fn editor_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let width = 4;
    let mut store = ParamStore::new();
    let params = EditorParams::new(&mut store, width, rng);
    let ids = params.params();
    // Non-zero editors, so every gate and transform weight matters.
    randomize(&mut store, &ids, rng);
    let (f_ref, f_txt) = (uniform(&[width, 3, 3], rng), uniform(&[width, 5], rng));
    let w = uniform(&[width], rng);
    with_params(&store, &ids, vec![f_ref, f_txt], |t, b, x| {
        let out = emd::forward(t, x[0], x[1], b, &params, 3.0)?;
        let wv = t.constant(w.clone());
        let prod = t.mul(out.f_comb, wv)?;
        let s = t.sum(prod);
        t.add(s, out.alpha)
    })
}

fn frozen_editor_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let width = 4;
    let mut store = ParamStore::new();
    let params = ClipEditorParams::new(&mut store, width, rng);
    let (f_ref, f_txt) = (uniform(&[width], rng), uniform(&[width], rng));
    let w = uniform(&[width], rng);
    with_params(&store, &params.params(), vec![f_ref, f_txt], |t, b, x| {
        let y = emd::clip_edit_combine(t, x[0], x[1], b, &params)?;
        let wv = t.constant(w.clone());
        let prod = t.mul(y, wv)?;
        Ok(t.sum(prod))
    })
}

const SUITE_BATCH: usize = 4;

fn contrastive_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (q, g) = (uniform(&[SUITE_BATCH, 6], rng), uniform(&[SUITE_BATCH, 6], rng));
    let labels = losses::soft_labels(&g, 0.7, Kernel::Dot)?;
    check(&[q, g], DEFAULT_STEP, |t, v| {
        let p = losses::predict_probs(t, v[0], v[1], 0.7)?;
        losses::mmc_loss(t, &p, &labels, 0.8)
    })
}

fn distill_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (q, g) = (uniform(&[SUITE_BATCH, 6], rng), uniform(&[SUITE_BATCH, 6], rng));
    let mut teacher = positive(&[SUITE_BATCH, SUITE_BATCH], rng);
    for i in 0..SUITE_BATCH {
        let z: f64 = teacher.row(i).iter().sum();
        for j in 0..SUITE_BATCH {
            teacher.data_mut()[i * SUITE_BATCH + j] /= z;
        }
    }
    check(&[q, g], DEFAULT_STEP, |t, v| {
        let p = losses::predict_probs(t, v[0], v[1], 1.0)?;
        losses::distill_loss(t, &teacher, &p)
    })
}

fn stack(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    let rows = rows
        .iter()
        .map(|&v| {
            let n = tape.shape(v)[0];
            tape.reshape(v, &[1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&rows, 0)
}

/// In-batch probabilities of one stream of `model`, built from `b`.
fn stream_probs(
    tape: &mut Tape,
    b: &Bindings,
    model: &DwcModel,
    data: &Dataset,
    images: &[Tensor],
    stream: Stream,
    tau: f64,
) -> Result<ProbMatrix> {
    let batch = &data.train[..SUITE_BATCH];
    let (queries, targets) = match stream {
        Stream::Trainable => {
            let mut qs = Vec::new();
            let mut ts = Vec::new();
            for tr in batch {
                let tokens = model.encode_tokens(&tr.tokens)?;
                qs.push(model.query(tape, b, &images[tr.query], &tokens)?.f_comb);
                ts.push(model.target(tape, b, &images[tr.target])?);
            }
            (stack(tape, &qs)?, stack(tape, &ts)?)
        }
        Stream::Frozen => {
            let mut qs = Vec::new();
            let mut ts = Vec::new();
            for tr in batch {
                let r = model.frozen_image(&images[tr.query])?;
                let x = model.frozen_text(&tr.tokens)?;
                qs.push(model.frozen_query(tape, b, &r, &x)?);
                let g = model.frozen_image(&images[tr.target])?;
                ts.push(tape.constant(Tensor::vector(g)));
            }
            (stack(tape, &qs)?, stack(tape, &ts)?)
        }
    };
    losses::predict_probs(tape, queries, targets, tau)
}

/// Full loss of one stream (contrastive with soft labels plus distillation
/// from the other stream) with respect to every parameter that stream trains.
/// Labels and teacher probabilities are detached constants in training, so
/// they are computed once here and held fixed under perturbation.
fn stream_case(rng: &mut ChaCha8Rng, stream: Stream) -> Result<GradCheck> {
    let data = Dataset::generate(DatasetParams {
        n: 16,
        seed: rng.random(),
        ..Default::default()
    })?;
    let images = data.images();
    let config = ModelConfig {
        dim: 6,
        seed: rng.random(),
        ..Default::default()
    };
    let mut model = DwcModel::new(data.schema(), config)?;
    // Move the editor off its zero init so every weight carries gradient.
    if let Some(e) = &model.editor {
        let ids = e.params();
        randomize(&mut model.store, &ids, rng);
    }
    let tau = 1.0;
    let other = match stream {
        Stream::Trainable => Stream::Frozen,
        Stream::Frozen => Stream::Trainable,
    };
    let (labels, teacher) = {
        let mut t = Tape::new();
        let b = model.bind(&mut t, None);
        let targets = target_rows(&model, &data, &images, stream)?;
        let q = stream_probs(&mut t, &b, &model, &data, &images, other, tau)?;
        (
            losses::soft_labels(&targets, tau, Kernel::Dot)?,
            t.value(q.probs).clone(),
        )
    };
    let ids = model.stream_params(stream);
    with_params(&model.store, &ids, Vec::new(), |t, b, _| {
        let p = stream_probs(t, b, &model, &data, &images, stream, tau)?;
        let mmc = losses::mmc_loss(t, &p, &labels, 0.8)?;
        let d = losses::distill_loss(t, &teacher, &p)?;
        losses::total_loss(t, mmc, Some(d))
    })
}

/// Target features of the suite batch as a `[B, C]` tensor.
fn target_rows(model: &DwcModel, data: &Dataset, images: &[Tensor], stream: Stream) -> Result<Tensor> {
    let batch = &data.train[..SUITE_BATCH];
    let mut rows = Vec::new();
    for tr in batch {
        match stream {
            Stream::Trainable => {
                let mut t = Tape::new();
                let b = model.bind(&mut t, None);
                let v = model.target(&mut t, &b, &images[tr.target])?;
                rows.extend_from_slice(t.value(v).data());
            }
            Stream::Frozen => rows.extend(model.frozen_image(&images[tr.target])?),
        }
    }
    Tensor::new(&[batch.len(), rows.len() / batch.len()], rows)
}
