//! Soft similarity labels, the mixed hard/soft contrastive loss and the KL
//! distillation term between the two streams.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::tape::{self, Tape, Var};
use crate::tensor::Tensor;

/// Similarity used to build soft labels between targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Kernel {
    #[default]
    Dot,
    /// Negative squared Euclidean distance.
    Euclidean,
    /// Sigmoid of the dot product.
    Sigmoid,
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Dot => "dot",
            Kernel::Euclidean => "euclidean",
            Kernel::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Kernel::Dot),
            "euclidean" => Ok(Kernel::Euclidean),
            "sigmoid" => Ok(Kernel::Sigmoid),
            _ => Err(Error::Config(format!("unknown soft-label kernel `{s}`"))),
        }
    }
}

impl Kernel {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let dot = || a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        match self {
            Kernel::Dot => dot(),
            Kernel::Euclidean => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
            Kernel::Sigmoid => tape::sigmoid(dot()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    pub values: Tensor,
    pub kernel: Kernel,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Param(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

fn batch_rows(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [b, c] if b > 0 => Ok((b, c)),
        ref s => shape_err(format!("expected a non-empty [B, C] batch, got {s:?}")),
    }
}

/// Diagonal 1; `y_ij = exp(k(t_i, t_j)/tau) / sum_m exp(k(t_i, t_m)/tau)`
/// off the diagonal, where the sum includes `m = i`. Plain numbers: labels
/// never carry gradient.
pub fn soft_labels(targets: &Tensor, tau: f64, kernel: Kernel) -> Result<LabelMatrix> {
    check_tau(tau)?;
    let (b, _) = batch_rows(targets)?;
    let mut y = vec![0.0; b * b];
    for i in 0..b {
        let logits: Vec<f64> = (0..b)
            .map(|j| kernel.eval(targets.row(i), targets.row(j)) / tau)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for j in 0..b {
            y[i * b + j] = if i == j { 1.0 } else { (logits[j] - max).exp() / z };
        }
    }
    Ok(LabelMatrix {
        values: Tensor::new(&[b, b], y)?,
        kernel,
    })
}

/// Row-softmax of `f_comb f_tgt^T / tau`, kept alongside its logarithm.
#[derive(Clone, Copy, Debug)]
pub struct ProbMatrix {
    pub probs: Var,
    pub log_probs: Var,
}

pub fn predict_probs(tape: &mut Tape, f_comb: Var, f_tgt: Var, tau: f64) -> Result<ProbMatrix> {
    check_tau(tau)?;
    let (sc, st) = (tape.shape(f_comb), tape.shape(f_tgt));
    match (sc, st) {
        (&[b, c], &[b2, c2]) if b == b2 && c == c2 && b > 0 => {}
        _ => return shape_err(format!("query batch {sc:?} and target batch {st:?} disagree")),
    }
    let tt = tape.transpose(f_tgt)?;
    let sim = tape.matmul(f_comb, tt)?;
    let logits = tape.scale(sim, 1.0 / tau);
    Ok(ProbMatrix {
        probs: tape.softmax(logits, 1)?,
        log_probs: tape.log_softmax(logits, 1)?,
    })
}

/// `(rows, cols)` of a probability matrix with no all-zero row.
fn rows_of(tape: &Tape, p: &ProbMatrix) -> Result<(usize, usize)> {
    let t = tape.value(p.probs);
    let &[b, n] = t.shape() else {
        return shape_err(format!("probability matrix must be 2-D, got {:?}", t.shape()));
    };
    if b == 0 || (0..b).any(|i| t.row(i).iter().sum::<f64>() <= 0.0) {
        return Err(Error::Contract("probability matrix has an all-zero row".into()));
    }
    Ok((b, n))
}

/// `-(lambda/B) sum_i log p_ii - ((1-lambda)/B^2) sum_ij y_ij log p_ij`.
pub fn mmc_loss(tape: &mut Tape, p: &ProbMatrix, labels: &LabelMatrix, lambda: f64) -> Result<Var> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Param(format!("lambda must be in (0, 1], got {lambda}")));
    }
    let (b, n) = rows_of(tape, p)?;
    if b != n {
        return shape_err(format!("in-batch probabilities must be square, got {b}x{n}"));
    }
    if labels.values.shape() != [b, b] {
        return shape_err(format!("labels {:?} do not match batch {b}", labels.values.shape()));
    }
    let bf = b as f64;
    let eye = tape.constant(identity(b));
    let diag = tape.mul(p.log_probs, eye)?;
    let hard = tape.sum(diag);
    let hard = tape.scale(hard, -lambda / bf);
    if lambda == 1.0 {
        return Ok(hard);
    }
    let y = tape.constant(labels.values.clone());
    let weighted = tape.mul(p.log_probs, y)?;
    let soft = tape.sum(weighted);
    let soft = tape.scale(soft, -(1.0 - lambda) / (bf * bf));
    tape.add(hard, soft)
}

/// `(1/B) sum_i KL(teacher_i || student_i)`. The teacher is a plain matrix.
pub fn distill_loss(tape: &mut Tape, teacher: &Tensor, student: &ProbMatrix) -> Result<Var> {
    let (b, n) = rows_of(tape, student)?;
    if teacher.shape() != [b, n] {
        return shape_err(format!("teacher {:?} does not match student {b}x{n}", teacher.shape()));
    }
    if teacher.data().iter().any(|&v| !(v > 0.0)) || tape.value(student.probs).data().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Contract(
            "distillation needs strictly positive probabilities".into(),
        ));
    }
    let neg_entropy: f64 = teacher.data().iter().map(|t| t * t.ln()).sum();
    let t = tape.constant(teacher.clone());
    let cross = tape.mul(student.log_probs, t)?;
    let cross = tape.sum(cross);
    let bf = b as f64;
    Ok(tape.affine(cross, -1.0 / bf, neg_entropy / bf))
}

pub fn total_loss(tape: &mut Tape, mmc: Var, distill: Option<Var>) -> Result<Var> {
    match distill {
        Some(d) => tape.add(mmc, d),
        None => Ok(mmc),
    }
}

fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn label_cases() {
        let one = soft_labels(&Tensor::new(&[1, 3], vec![1., 2., 3.]).unwrap(), 1.0, Kernel::Dot).unwrap();
        assert_eq!(one.values.data(), &[1.0]);
        let same = soft_labels(&Tensor::full(&[4, 2], 0.3), 0.5, Kernel::Dot).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.25 };
                assert!((same.values.data()[i * 4 + j] - want).abs() < 1e-15);
            }
        }
        let y = soft_labels(&Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap(), 1.0, Kernel::Dot).unwrap();
        let want = 1.0 / (1.0 + 1f64.exp());
        assert!((y.values.data()[1] - want).abs() < 1e-15);
        assert!((want - 0.26894).abs() < 1e-5);
        assert!(matches!(
            soft_labels(&Tensor::zeros(&[2, 2]), 0.0, Kernel::Dot),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn labels_match_direct_formula_for_every_kernel() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let t = random(&[5, 3], &mut r);
        for kernel in [Kernel::Dot, Kernel::Euclidean, Kernel::Sigmoid] {
            let y = soft_labels(&t, 0.7, kernel).unwrap();
            for i in 0..5 {
                let k = |j: usize| {
                    let (a, b) = (t.row(i), t.row(j));
                    let dot: f64 = (0..3).map(|c| a[c] * b[c]).sum();
                    let v = match kernel {
                        Kernel::Dot => dot,
                        Kernel::Euclidean => -(0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>(),
                        Kernel::Sigmoid => 1.0 / (1.0 + (-dot).exp()),
                    };
                    (v / 0.7).exp()
                };
                let z: f64 = (0..5).map(k).sum();
                for j in 0..5 {
                    let v = y.values.data()[i * 5 + j];
                    if i == j {
                        assert_eq!(v, 1.0);
                    } else {
                        assert!((v - k(j) / z).abs() < 1e-12);
                        assert!(v > 0.0 && v < 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_names_roundtrip() {
        for k in [Kernel::Dot, Kernel::Euclidean, Kernel::Sigmoid] {
            assert_eq!(k.to_string().parse::<Kernel>().unwrap(), k);
        }
        assert!("cosine".parse::<Kernel>().is_err());
    }

    #[test]
    fn prob_cases() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap());
        let p = predict_probs(&mut tape, eye, eye, 1.0).unwrap();
        let row = tape.value(p.probs).row(0).to_vec();
        assert!((row[0] - 0.73106).abs() < 1e-5 && (row[1] - 0.26894).abs() < 1e-5);
        let flat = tape.constant(Tensor::full(&[3, 2], 0.5));
        let p = predict_probs(&mut tape, flat, flat, 1.0).unwrap();
        assert!(tape
            .value(p.probs)
            .data()
            .iter()
            .all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let bad = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(predict_probs(&mut tape, flat, bad, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn mmc_singleton_and_hard_only() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![0.3, 0.9]).unwrap());
        let p = predict_probs(&mut tape, x, x, 1.0).unwrap();
        let y = soft_labels(tape.value(x), 1.0, Kernel::Dot).unwrap();
        let l = mmc_loss(&mut tape, &p, &y, 0.8).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);

        // lambda = 1: plain batch cross-entropy against the identity.
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let (q, t) = (random(&[6, 4], &mut r), random(&[6, 4], &mut r));
        let (vq, vt) = (tape.constant(q.clone()), tape.constant(t.clone()));
        let p = predict_probs(&mut tape, vq, vt, 1.0).unwrap();
        let y = soft_labels(&t, 1.0, Kernel::Dot).unwrap();
        let l = mmc_loss(&mut tape, &p, &y, 1.0).unwrap();
        let l = tape.value(l).item();
        let mut ce = 0.0;
        for i in 0..6 {
            let s: Vec<f64> = (0..6)
                .map(|j| (0..4).map(|c| q.row(i)[c] * t.row(j)[c]).sum())
                .collect();
            let lse = s.iter().map(|v| v.exp()).sum::<f64>().ln();
            ce += lse - s[i];
        }
        assert!((l - ce / 6.0).abs() < 1e-12);
        assert!(matches!(mmc_loss(&mut tape, &p, &y, 0.0), Err(Error::Param(_))));
    }

    #[test]
    fn distill_cases() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        let student = ProbMatrix {
            probs: tape.softmax(logits, 1).unwrap(),
            log_probs: tape.log_softmax(logits, 1).unwrap(),
        };
        let teacher = Tensor::new(&[1, 2], vec![0.75, 0.25]).unwrap();
        let l = distill_loss(&mut tape, &teacher, &student).unwrap();
        let l = tape.value(l).item();
        assert!((l - 0.13081).abs() < 1e-5);
        assert!((l - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-15);

        let logits = tape.constant(Tensor::zeros(&[2, 2]));
        let student = ProbMatrix {
            probs: tape.softmax(logits, 1).unwrap(),
            log_probs: tape.log_softmax(logits, 1).unwrap(),
        };
        let teacher = Tensor::new(&[2, 2], vec![0.75, 0.25, 0.5, 0.5]).unwrap();
        let l = distill_loss(&mut tape, &teacher, &student).unwrap();
        let l = tape.value(l).item();
        assert!((l - 0.13081 / 2.0).abs() < 1e-5);

        let same = tape.value(student.probs).clone();
        let l = distill_loss(&mut tape, &same, &student).unwrap();
        let l = tape.value(l).item();
        assert!(l.abs() < 1e-12);

        let zero = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        assert!(matches!(
            distill_loss(&mut tape, &zero, &student),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn distill_is_nonnegative() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let a = tape.constant(random(&[4, 4], &mut r));
            let b = tape.constant(random(&[4, 4], &mut r));
            let pa = ProbMatrix {
                probs: tape.softmax(a, 1).unwrap(),
                log_probs: tape.log_softmax(a, 1).unwrap(),
            };
            let pb = tape.softmax(b, 1).unwrap();
            let teacher = tape.value(pb).clone();
            let l = distill_loss(&mut tape, &teacher, &pa).unwrap();
            assert!(tape.value(l).item() >= 0.0);
        }
    }

    #[test]
    fn total_is_sum() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.5));
        let b = tape.constant(Tensor::scalar(0.2));
        let t = total_loss(&mut tape, a, Some(b)).unwrap();
        assert!((tape.value(t).item() - 0.7).abs() < 1e-15);
        let z = tape.constant(Tensor::scalar(0.0));
        let t = total_loss(&mut tape, a, Some(z)).unwrap();
        assert_eq!(tape.value(t).item(), 0.5);
    }

    #[test]
    fn mmc_gradient_wrt_queries() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let q = random(&[4, 3], &mut r);
        let t = random(&[4, 3], &mut r);
        let y = soft_labels(&t, 1.0, Kernel::Dot).unwrap();
        let report = gradcheck::check(&[q, t], gradcheck::DEFAULT_STEP, |tape, v| {
            let p = predict_probs(tape, v[0], v[1], 1.0)?;
            mmc_loss(tape, &p, &y, 0.8)
        })
        .unwrap();
        assert!(report.passes(gradcheck::DEFAULT_TOLERANCE), "{report:?}");
    }

    #[test]
    fn labels_carry_no_gradient() {
        // Gradients are the same whether labels come from a cache or are
        // rebuilt from the live targets on the tape.
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let q = random(&[4, 3], &mut r);
        let t = random(&[4, 3], &mut r);
        let cached = soft_labels(&t, 1.0, Kernel::Dot).unwrap();
        let grads = |fresh: bool| {
            let mut tape = Tape::new();
            let (vq, vt) = (tape.param(q.clone()), tape.param(t.clone()));
            let y = if fresh {
                soft_labels(tape.value(vt), 1.0, Kernel::Dot).unwrap()
            } else {
                cached.clone()
            };
            let p = predict_probs(&mut tape, vq, vt, 1.0).unwrap();
            let l = mmc_loss(&mut tape, &p, &y, 0.5).unwrap();
            tape.backward(l).unwrap();
            (tape.grad(vq).unwrap().to_vec(), tape.grad(vt).unwrap().to_vec())
        };
        assert_eq!(grads(true), grads(false));
    }
}
