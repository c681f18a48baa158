//! Flat `key = value` run configuration and checkpoint directories.
//!
//! A run directory holds `config.kv` (the fully resolved configuration),
//! `metrics.jsonl`, `model.manifest` + `model.bin`, and any reports written
//! by evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{AttributeSchema, DatasetParams};
use crate::error::{io_err, Error, Result};
use crate::eval::Integration;
use crate::kv::KvMap;
use crate::model::DwcModel;
use crate::trainer::{TrainConfig, CHECKPOINT_FILE};

pub const CONFIG_FILE: &str = "config.kv";

/// Every accepted key with a one-line description. Defaults are those of
/// [`RunConfig::default`].
pub const KEYS: &[(&str, &str)] = &[
    ("lambda", "hard/soft trade-off of the contrastive loss, in (0, 1]"),
    (
        "tau",
        "temperature shared by soft labels, probabilities and distillation",
    ),
    ("learning_rate", "plain SGD step size"),
    ("epochs", "passes over the training split"),
    ("batch_size", "triplets per step; the remainder of an epoch is dropped"),
    ("gem_p", "generalized-mean pooling exponent"),
    ("dim", "shared feature width C = D"),
    ("seed", "model initialization and shuffling seed"),
    (
        "no_emd",
        "replace editors and weighted combiner with a sum of pooled features",
    ),
    ("no_ssg", "hard labels only (lambda forced to 1)"),
    ("no_distill", "drop the KL term between streams"),
    ("single_stream", "drop the frozen stream entirely"),
    ("kernel", "soft-label similarity: dot | euclidean | sigmoid"),
    (
        "alternation",
        "active stream switches every step or every epoch: step | epoch",
    ),
    (
        "log_wall_time",
        "record seconds per epoch; false writes 0 for byte-stable logs",
    ),
    ("integration", "inference score: mean of per-stream cosines | concat"),
    ("schema", "attribute schema: default or name=v1,v2;name2=..."),
    ("n", "number of triplets to generate"),
    (
        "text_dominant_fraction",
        "share of multi-attribute (text-dominant) triplets",
    ),
    ("val_fraction", "share of triplets held out for validation"),
    ("label_noise", "probability of corrupting one value word per text"),
    ("pixel_sigma", "standard deviation of render noise"),
    ("get_clause", "append `and get <target values>` to text-dominant texts"),
    ("data_seed", "dataset generation seed"),
    ("data", "dataset directory; empty generates one from the dataset keys"),
    ("out", "run directory"),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub integration: Integration,
    pub dataset: DatasetParams,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn path_key(kv: &KvMap, key: &str) -> Option<PathBuf> {
    kv.get(key).filter(|v| !v.is_empty()).map(PathBuf::from)
}

impl RunConfig {
    /// Missing keys take their defaults; unknown keys are rejected.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let allowed: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
        kv.reject_unknown(&allowed)?;
        let d = Self::default();
        let t = &d.train;
        let p = &d.dataset;
        let train = TrainConfig {
            lambda: kv.parsed("lambda")?.unwrap_or(t.lambda),
            tau: kv.parsed("tau")?.unwrap_or(t.tau),
            learning_rate: kv.parsed("learning_rate")?.unwrap_or(t.learning_rate),
            epochs: kv.parsed("epochs")?.unwrap_or(t.epochs),
            batch_size: kv.parsed("batch_size")?.unwrap_or(t.batch_size),
            gem_p: kv.parsed("gem_p")?.unwrap_or(t.gem_p),
            dim: kv.parsed("dim")?.unwrap_or(t.dim),
            seed: kv.parsed("seed")?.unwrap_or(t.seed),
            no_emd: kv.parsed("no_emd")?.unwrap_or(t.no_emd),
            no_ssg: kv.parsed("no_ssg")?.unwrap_or(t.no_ssg),
            no_distill: kv.parsed("no_distill")?.unwrap_or(t.no_distill),
            single_stream: kv.parsed("single_stream")?.unwrap_or(t.single_stream),
            kernel: kv.parsed("kernel")?.unwrap_or(t.kernel),
            alternation: kv.parsed("alternation")?.unwrap_or(t.alternation),
            log_wall_time: kv.parsed("log_wall_time")?.unwrap_or(t.log_wall_time),
        };
        train.validate()?;
        let schema = match kv.get("schema") {
            Some(s) => AttributeSchema::parse(s)?,
            None => p.schema.clone(),
        };
        let dataset = DatasetParams {
            schema,
            n: kv.parsed("n")?.unwrap_or(p.n),
            text_dominant_fraction: kv.parsed("text_dominant_fraction")?.unwrap_or(p.text_dominant_fraction),
            val_fraction: kv.parsed("val_fraction")?.unwrap_or(p.val_fraction),
            label_noise: kv.parsed("label_noise")?.unwrap_or(p.label_noise),
            pixel_sigma: kv.parsed("pixel_sigma")?.unwrap_or(p.pixel_sigma),
            get_clause: kv.parsed("get_clause")?.unwrap_or(p.get_clause),
            seed: kv.parsed("data_seed")?.unwrap_or(p.seed),
        };
        Ok(Self {
            train,
            integration: kv.parsed("integration")?.unwrap_or_default(),
            dataset,
            data: path_key(kv, "data"),
            out: path_key(kv, "out"),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvMap::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every key, in [`KEYS`] order.
    pub fn to_kv(&self) -> KvMap {
        let (t, p) = (&self.train, &self.dataset);
        let mut kv = KvMap::new();
        kv.set("lambda", t.lambda);
        kv.set("tau", t.tau);
        kv.set("learning_rate", t.learning_rate);
        kv.set("epochs", t.epochs);
        kv.set("batch_size", t.batch_size);
        kv.set("gem_p", t.gem_p);
        kv.set("dim", t.dim);
        kv.set("seed", t.seed);
        kv.set("no_emd", t.no_emd);
        kv.set("no_ssg", t.no_ssg);
        kv.set("no_distill", t.no_distill);
        kv.set("single_stream", t.single_stream);
        kv.set("kernel", t.kernel);
        kv.set("alternation", t.alternation.as_str());
        kv.set("log_wall_time", t.log_wall_time);
        kv.set("integration", self.integration.as_str());
        kv.set("schema", p.schema.to_spec());
        kv.set("n", p.n);
        kv.set("text_dominant_fraction", p.text_dominant_fraction);
        kv.set("val_fraction", p.val_fraction);
        kv.set("label_noise", p.label_noise);
        kv.set("pixel_sigma", p.pixel_sigma);
        kv.set("get_clause", p.get_clause);
        kv.set("data_seed", p.seed);
        let show = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        kv.set("data", show(&self.data));
        kv.set("out", show(&self.out));
        kv
    }

    pub fn render(&self) -> String {
        self.to_kv().render()
    }
}

/// Writes `config.kv` and the model parameters into `dir`.
pub fn save_checkpoint(dir: &Path, config: &RunConfig, model: &DwcModel) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let cfg = dir.join(CONFIG_FILE);
    fs::write(&cfg, config.render()).map_err(io_err(&cfg))?;
    model.store.save(&dir.join(CHECKPOINT_FILE))
}

/// Rebuilds a model from a run directory or a manifest path. The model is
/// shaped by `config` when given, otherwise by the run's own `config.kv`.
pub fn load_checkpoint(path: &Path, config: Option<&RunConfig>) -> Result<(RunConfig, DwcModel)> {
    let (dir, manifest) = if path.is_dir() {
        (path.to_path_buf(), path.join(CHECKPOINT_FILE))
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (dir, path.to_path_buf())
    };
    let config = match config {
        Some(c) => c.clone(),
        None => RunConfig::load(&dir.join(CONFIG_FILE))?,
    };
    let mut model = DwcModel::new(&config.dataset.schema, config.train.model_config())?;
    model.store.load(&manifest)?;
    Ok((config, model))
}
