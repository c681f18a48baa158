//! Alternating two-stream SGD with per-epoch metrics.
//!
//! Each step trains one stream. The other stream's in-batch probability
//! matrix is computed on a separate gradient-free tape and enters the KL term
//! as a constant teacher.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{rng_for, Dataset, Triplet};
use crate::error::{io_err, Error, Result};
use crate::losses::{self, Kernel, ProbMatrix};
use crate::model::{DwcModel, ModelConfig, Stream};
use crate::params::Bindings;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.manifest";

/// Which stream is active at a given step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Alternation {
    /// Even steps train the trainable stream, odd steps the frozen-stream head.
    #[default]
    Step,
    /// Even epochs train the trainable stream, odd epochs the head.
    Epoch,
}

impl Alternation {
    pub fn as_str(self) -> &'static str {
        match self {
            Alternation::Step => "step",
            Alternation::Epoch => "epoch",
        }
    }
}

impl FromStr for Alternation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Alternation::Step),
            "epoch" => Ok(Alternation::Epoch),
            _ => Err(Error::Config(format!("unknown alternation `{s}` (step|epoch)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gem_p: f64,
    pub dim: usize,
    pub seed: u64,
    pub no_emd: bool,
    /// Hard labels only: lambda is forced to 1.
    pub no_ssg: bool,
    pub no_distill: bool,
    pub single_stream: bool,
    pub kernel: Kernel,
    pub alternation: Alternation,
    /// When false every `seconds` field is 0, so logs compare byte-for-byte.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            tau: 1.0,
            learning_rate: 1e-4,
            epochs: 50,
            batch_size: 32,
            gem_p: 3.0,
            dim: 32,
            seed: 0,
            no_emd: false,
            no_ssg: false,
            no_distill: false,
            single_stream: false,
            kernel: Kernel::Dot,
            alternation: Alternation::Step,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda must be in (0, 1], got {}", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.gem_p > 0.0 && self.gem_p.is_finite()) {
            return bad(format!("gem_p must be > 0, got {}", self.gem_p));
        }
        if self.dim == 0 {
            return bad("dim must be >= 1".into());
        }
        Ok(())
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.no_ssg {
            1.0
        } else {
            self.lambda
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            gem_p: self.gem_p,
            no_emd: self.no_emd,
            single_stream: self.single_stream,
            seed: self.seed,
        }
    }
}

/// Losses of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub stream: Stream,
    pub l_mmc: f64,
    pub l_distill: f64,
    pub l_total: f64,
    /// Batch mean of the trainable stream's image weight; absent without the editor.
    pub mean_alpha: Option<f64>,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stream: String,
    pub l_mmc: f64,
    pub l_distill: f64,
    pub l_total: f64,
    pub mean_alpha: Option<f64>,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

struct Forward {
    probs: ProbMatrix,
    targets: Var,
    alphas: Vec<f64>,
    bindings: Bindings,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: DwcModel,
    dataset: &'a Dataset,
    images: Vec<Tensor>,
    frozen_images: Vec<Vec<f64>>,
    dump_dir: PathBuf,
    epoch: usize,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let model = DwcModel::new(dataset.schema(), config.model_config())?;
        Self::with_model(config, model, dataset)
    }

    pub fn with_model(config: TrainConfig, model: DwcModel, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let images = dataset.images();
        let frozen_images = if model.has_frozen_stream() {
            images
                .iter()
                .map(|img| model.frozen_image(img))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            model,
            dataset,
            images,
            frozen_images,
            dump_dir: std::env::temp_dir(),
            epoch: 0,
            step: 0,
        })
    }

    /// Directory that receives the batch dump on a non-finite loss.
    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = dir.into();
    }

    pub fn into_model(self) -> DwcModel {
        self.model
    }

    fn use_distill(&self) -> bool {
        self.model.has_frozen_stream() && !self.config.no_distill
    }

    /// Stream trained at global step `step` of epoch `epoch`.
    pub fn stream_for(&self, epoch: usize, step: usize) -> Stream {
        if !self.model.has_frozen_stream() {
            return Stream::Trainable;
        }
        let phase = match self.config.alternation {
            Alternation::Step => step,
            Alternation::Epoch => epoch,
        };
        if phase % 2 == 0 {
            Stream::Trainable
        } else {
            Stream::Frozen
        }
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

    /// In-batch probabilities of the trainable stream, its target batch and alphas.
    fn trainable_forward(&self, tape: &mut Tape, active: bool, batch: &[Triplet]) -> Result<Forward> {
        let b = self.model.bind(tape, active.then_some(Stream::Trainable));
        let mut queries = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut alphas = Vec::new();
        for t in batch {
            let tokens = self.model.encode_tokens(&t.tokens)?;
            let q = self.model.query(tape, &b, &self.images[t.query], &tokens)?;
            if let Some(a) = q.alpha {
                alphas.push(tape.value(a).item());
            }
            queries.push(q.f_comb);
            targets.push(self.model.target(tape, &b, &self.images[t.target])?);
        }
        let fq = Self::stack(tape, &queries)?;
        let ft = Self::stack(tape, &targets)?;
        Ok(Forward {
            probs: losses::predict_probs(tape, fq, ft, self.config.tau)?,
            targets: ft,
            alphas,
            bindings: b,
        })
    }

    fn frozen_forward(&self, tape: &mut Tape, active: bool, batch: &[Triplet]) -> Result<Forward> {
        let b = self.model.bind(tape, active.then_some(Stream::Frozen));
        let mut queries = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len() * self.config.dim);
        for t in batch {
            let txt = self.model.frozen_text(&t.tokens)?;
            queries.push(self.model.frozen_query(tape, &b, &self.frozen_images[t.query], &txt)?);
            targets.extend_from_slice(&self.frozen_images[t.target]);
        }
        let fq = Self::stack(tape, &queries)?;
        let ft = tape.constant(Tensor::new(&[batch.len(), self.config.dim], targets)?);
        Ok(Forward {
            probs: losses::predict_probs(tape, fq, ft, self.config.tau)?,
            targets: ft,
            alphas: Vec::new(),
            bindings: b,
        })
    }

    /// Forward both streams, backward through the active one, one SGD update.
    pub fn train_step(&mut self, batch: &[Triplet], stream: Stream) -> Result<StepMetrics> {
        if batch.is_empty() || batch.len() > self.config.batch_size {
            return Err(Error::Param(format!(
                "batch of {} outside 1..={}",
                batch.len(),
                self.config.batch_size
            )));
        }
        if stream == Stream::Frozen && !self.model.has_frozen_stream() {
            return Err(Error::Contract("single-stream model has no frozen stream".into()));
        }
        let mut tape = Tape::new();
        let mut teacher_tape = Tape::new();
        let (student, teacher_fwd) = match stream {
            Stream::Trainable => {
                let student = self.trainable_forward(&mut tape, true, batch)?;
                let teacher = self
                    .use_distill()
                    .then(|| self.frozen_forward(&mut teacher_tape, false, batch))
                    .transpose()?;
                (student, teacher)
            }
            Stream::Frozen => {
                let student = self.frozen_forward(&mut tape, true, batch)?;
                let teacher = self.trainable_forward(&mut teacher_tape, false, batch)?;
                (student, Some(teacher))
            }
        };
        let alphas = match stream {
            Stream::Trainable => &student.alphas,
            Stream::Frozen => &teacher_fwd.as_ref().expect("teacher forward").alphas,
        };
        let mean_alpha = (!alphas.is_empty()).then(|| alphas.iter().sum::<f64>() / alphas.len() as f64);
        let teacher = teacher_fwd
            .filter(|_| self.use_distill())
            .map(|f| teacher_tape.value(f.probs.probs).clone());
        let p = student.probs;
        let ft = student.targets;
        // Diverged parameters can underflow a probability to 0, which the
        // KL term rejects; report that as the numeric failure it is.
        let positive = |t: &Tensor| t.data().iter().all(|&v| v > 0.0 && v.is_finite());
        if !positive(tape.value(p.probs)) || teacher.as_ref().is_some_and(|t| !positive(t)) {
            return Err(self.nonfinite(batch)?);
        }
        let labels = losses::soft_labels(tape.value(ft), self.config.tau, self.config.kernel)?;
        let mmc = losses::mmc_loss(&mut tape, &p, &labels, self.config.effective_lambda())?;
        let distill = teacher.map(|t| losses::distill_loss(&mut tape, &t, &p)).transpose()?;
        let total = losses::total_loss(&mut tape, mmc, distill)?;
        let metrics = StepMetrics {
            stream,
            l_mmc: tape.value(mmc).item(),
            l_distill: distill.map_or(0.0, |d| tape.value(d).item()),
            l_total: tape.value(total).item(),
            mean_alpha,
        };
        if ![metrics.l_mmc, metrics.l_distill, metrics.l_total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(self.nonfinite(batch)?);
        }
        let ids = self.model.stream_params(stream);
        if !ids.is_empty() {
            tape.backward(total)?;
            self.model
                .store
                .sgd_step(&tape, &student.bindings, &ids, self.config.learning_rate);
        }
        Ok(metrics)
    }

    fn nonfinite(&self, batch: &[Triplet]) -> Result<Error> {
        Ok(Error::NonFinite {
            epoch: self.epoch,
            step: self.step,
            dump: self.dump_batch(batch)?,
        })
    }

    fn dump_batch(&self, batch: &[Triplet]) -> Result<PathBuf> {
        fs::create_dir_all(&self.dump_dir).map_err(io_err(&self.dump_dir))?;
        let path = self
            .dump_dir
            .join(format!("nonfinite_e{}_s{}.tsv", self.epoch, self.step));
        let mut out = String::from("query_id\ttarget_id\tdominance\ttokens\n");
        for t in batch {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                t.query,
                t.target,
                t.dominance.as_str(),
                t.tokens.join(" ")
            )
            .expect("write to string");
        }
        fs::write(&path, out).map_err(io_err(&path))?;
        Ok(path)
    }

    /// One pass over the shuffled training set; the batch remainder is dropped.
    pub fn run_epoch(&mut self, epoch: usize, order: &[usize]) -> Result<Vec<EpochMetrics>> {
        self.epoch = epoch;
        let train = &self.dataset.train;
        let bs = self.config.batch_size;
        #[derive(Default)]
        struct Acc {
            n: usize,
            mmc: f64,
            distill: f64,
            total: f64,
            alpha: f64,
            alpha_n: usize,
            seconds: f64,
        }
        let mut acc = [Acc::default(), Acc::default()];
        for chunk in order.chunks_exact(bs) {
            let batch: Vec<Triplet> = chunk.iter().map(|&i| train[i].clone()).collect();
            let stream = self.stream_for(epoch, self.step);
            let start = Instant::now();
            let m = self.train_step(&batch, stream)?;
            let a = &mut acc[stream as usize];
            a.seconds += start.elapsed().as_secs_f64();
            a.n += 1;
            a.mmc += m.l_mmc;
            a.distill += m.l_distill;
            a.total += m.l_total;
            if let Some(al) = m.mean_alpha {
                a.alpha += al;
                a.alpha_n += 1;
            }
            self.step += 1;
        }
        Ok([Stream::Trainable, Stream::Frozen]
            .into_iter()
            .zip(acc)
            .filter(|(_, a)| a.n > 0)
            .map(|(s, a)| {
                let n = a.n as f64;
                EpochMetrics {
                    epoch,
                    stream: s.as_str().to_string(),
                    l_mmc: a.mmc / n,
                    l_distill: a.distill / n,
                    l_total: a.total / n,
                    mean_alpha: (a.alpha_n > 0).then(|| a.alpha / a.alpha_n as f64),
                    seconds: if self.config.log_wall_time { a.seconds } else { 0.0 },
                }
            })
            .collect())
    }
}

pub struct TrainOutcome {
    pub model: DwcModel,
    pub metrics: Vec<EpochMetrics>,
}

/// Full training run. With `run_dir`, metrics are appended to
/// `metrics.jsonl` as each epoch finishes and the final parameters are
/// written to `model.manifest` + `model.bin`.
pub fn train(config: &TrainConfig, dataset: &Dataset, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), dataset)?;
    if dataset.train.len() < config.batch_size {
        return Err(Error::Param(format!(
            "training split has {} triplets, fewer than one batch of {}",
            dataset.train.len(),
            config.batch_size
        )));
    }
    let mut log = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            trainer.set_dump_dir(dir);
            let path = dir.join(METRICS_FILE);
            Some((fs::File::create(&path).map_err(io_err(&path))?, path))
        }
        None => None,
    };
    let mut rng = rng_for(config.seed, 3);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut metrics = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let records = trainer.run_epoch(epoch, &order)?;
        if let Some((file, path)) = log.as_mut() {
            for r in &records {
                writeln!(file, "{}", r.to_json_line()).map_err(io_err(&*path))?;
            }
            file.flush().map_err(io_err(&*path))?;
        }
        metrics.extend(records);
    }
    let model = trainer.into_model();
    if let Some(dir) = run_dir {
        model.store.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome { model, metrics })
}
