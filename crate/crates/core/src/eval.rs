//! Gallery ranking, recall at k, image-weight statistics and attention export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Dominance, Triplet};
use crate::error::{io_err, Error, Result};
use crate::model::DwcModel;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const CURVE_MAX_K: usize = 100;

/// How per-stream similarities become one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Integration {
    /// Mean of the per-stream cosine similarities.
    #[default]
    Mean,
    /// Cosine between concatenations of the L2-normalized per-stream vectors.
    Concat,
}

impl Integration {
    pub fn as_str(self) -> &'static str {
        match self {
            Integration::Mean => "mean",
            Integration::Concat => "concat",
        }
    }
}

impl FromStr for Integration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Integration::Mean),
            "concat" => Ok(Integration::Concat),
            _ => Err(Error::Config(format!("unknown integration `{s}` (mean|concat)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankingResult {
    pub query: usize,
    /// Gallery ids by descending score, ties by ascending id.
    pub order: Vec<usize>,
    /// 1-based position of the target in `order`.
    pub target_rank: usize,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Orders gallery ids `0..scores.len()` and locates `target`.
pub fn rank(query: usize, scores: &[f64], target: usize) -> Result<RankingResult> {
    if scores.is_empty() {
        return Err(Error::Param("empty gallery".into()));
    }
    if target >= scores.len() {
        return Err(Error::Param(format!(
            "target {target} outside a gallery of {}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let target_rank = order.iter().position(|&g| g == target).expect("target in gallery") + 1;
    Ok(RankingResult {
        query,
        order,
        target_rank,
    })
}

/// Integrated scores of one query against every gallery item.
/// `query[s]` is the query vector of stream `s`, `gallery[s][g]` the
/// embedding of item `g` in that stream.
pub fn integrated_scores(query: &[Vec<f64>], gallery: &[Vec<Vec<f64>>], integration: Integration) -> Result<Vec<f64>> {
    if query.is_empty() || query.len() != gallery.len() {
        return Err(Error::Param(format!(
            "{} query streams against {} gallery streams",
            query.len(),
            gallery.len()
        )));
    }
    let n = gallery[0].len();
    if n == 0 || gallery.iter().any(|g| g.len() != n) {
        return Err(Error::Param("empty or ragged gallery".into()));
    }
    let streams = query.len() as f64;
    Ok((0..n)
        .map(|g| match integration {
            Integration::Mean => query.iter().zip(gallery).map(|(q, gs)| cosine(q, &gs[g])).sum::<f64>() / streams,
            Integration::Concat => {
                let q: Vec<f64> = query.iter().flat_map(|v| normalized(v)).collect();
                let t: Vec<f64> = gallery.iter().flat_map(|gs| normalized(&gs[g])).collect();
                cosine(&q, &t)
            }
        })
        .collect())
}

/// Percentage of results whose target is within the top `k`.
pub fn recall_at_k(results: &[RankingResult], k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results.iter().filter(|r| r.target_rank <= k).count();
    100.0 * hits as f64 / results.len() as f64
}

/// Per-query outputs of the model at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutput {
    /// One combined vector per stream: trainable first, then frozen.
    pub streams: Vec<Vec<f64>>,
    pub alpha: Option<f64>,
    pub spatial: Option<Vec<f64>>,
    pub word: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlphaStats {
    pub image_dominant: Option<f64>,
    pub text_dominant: Option<f64>,
}

/// Mean image weight per dominance subset; a subset without any alpha is absent.
pub fn alpha_stats(queries: &[Triplet], outputs: &[QueryOutput]) -> AlphaStats {
    let mean = |d: Dominance| {
        let v: Vec<f64> = queries
            .iter()
            .zip(outputs)
            .filter(|(t, _)| t.dominance == d)
            .filter_map(|(_, o)| o.alpha)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    AlphaStats {
        image_dominant: mean(Dominance::ImageDominant),
        text_dominant: mean(Dominance::TextDominant),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_at_1: f64,
    pub r_at_10: f64,
    pub r_at_50: f64,
    pub mean: f64,
    /// `curve[k - 1]` is R@k for k = 1..=100.
    pub curve: Vec<f64>,
    pub alpha: AlphaStats,
    pub num_queries: usize,
    pub gallery_size: usize,
    pub integration: String,
}

impl EvalReport {
    pub fn from_results(
        results: &[RankingResult],
        alpha: AlphaStats,
        gallery_size: usize,
        integration: Integration,
    ) -> Self {
        let (r1, r10, r50) = (
            recall_at_k(results, 1),
            recall_at_k(results, 10),
            recall_at_k(results, 50),
        );
        Self {
            r_at_1: r1,
            r_at_10: r10,
            r_at_50: r50,
            mean: (r1 + r10 + r50) / 3.0,
            curve: (1..=CURVE_MAX_K).map(|k| recall_at_k(results, k)).collect(),
            alpha,
            num_queries: results.len(),
            gallery_size,
            integration: integration.as_str().to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize") + "\n"
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("k,percentage\n");
        for (i, v) in self.curve.iter().enumerate() {
            writeln!(out, "{},{}", i + 1, v).expect("write to string");
        }
        out
    }
}

/// A model paired with precomputed gallery embeddings of the whole catalog.
pub struct Evaluator<'m> {
    model: &'m DwcModel,
    images: Vec<Tensor>,
    gallery: Vec<Vec<Vec<f64>>>,
}

impl<'m> Evaluator<'m> {
    pub fn new(model: &'m DwcModel, dataset: &Dataset) -> Result<Self> {
        Self::from_parts(model, dataset.images())
    }

    /// Gallery of the given renders, indexed by item id.
    pub fn from_parts(model: &'m DwcModel, images: Vec<Tensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Param("empty gallery".into()));
        }
        let mut trainable = Vec::with_capacity(images.len());
        for img in &images {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, None);
            let t = model.target(&mut tape, &b, img)?;
            trainable.push(tape.value(t).data().to_vec());
        }
        let mut gallery = vec![trainable];
        if model.has_frozen_stream() {
            gallery.push(
                images
                    .iter()
                    .map(|img| model.frozen_image(img))
                    .collect::<Result<_>>()?,
            );
        }
        Ok(Self { model, images, gallery })
    }

    pub fn gallery_size(&self) -> usize {
        self.images.len()
    }

    pub fn query(&self, t: &Triplet) -> Result<QueryOutput> {
        let m = self.model;
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, None);
        let tokens = m.encode_tokens(&t.tokens)?;
        let q = m.query(&mut tape, &b, &self.images[t.query], &tokens)?;
        let mut streams = vec![tape.value(q.f_comb).data().to_vec()];
        if m.has_frozen_stream() {
            let r = m.frozen_image(&self.images[t.query])?;
            let x = m.frozen_text(&t.tokens)?;
            let f = m.frozen_query(&mut tape, &b, &r, &x)?;
            streams.push(tape.value(f).data().to_vec());
        }
        let grab = |v: Option<crate::tape::Var>| v.map(|v| tape.value(v).data().to_vec());
        Ok(QueryOutput {
            alpha: q.alpha.map(|a| tape.value(a).item()),
            spatial: grab(q.spatial),
            word: grab(q.word),
            streams,
        })
    }

    /// Ranks the whole catalog for one query. The query's own item can never
    /// be the target, so it is scored `-inf` and ranked last.
    pub fn score(
        &self,
        index: usize,
        t: &Triplet,
        out: &QueryOutput,
        integration: Integration,
    ) -> Result<RankingResult> {
        let mut scores = integrated_scores(&out.streams, &self.gallery, integration)?;
        if let Some(s) = scores.get_mut(t.query) {
            *s = f64::NEG_INFINITY;
        }
        rank(index, &scores, t.target)
    }

    pub fn evaluate(&self, queries: &[Triplet], integration: Integration) -> Result<(EvalReport, Vec<QueryOutput>)> {
        let outputs = queries.iter().map(|t| self.query(t)).collect::<Result<Vec<_>>>()?;
        let results = queries
            .iter()
            .zip(&outputs)
            .enumerate()
            .map(|(i, (t, o))| self.score(i, t, o, integration))
            .collect::<Result<Vec<_>>>()?;
        let report = EvalReport::from_results(
            &results,
            alpha_stats(queries, &outputs),
            self.gallery_size(),
            integration,
        );
        Ok((report, outputs))
    }
}

/// `query_id,kind,index,weight` rows: spatial weights over H*W positions,
/// word weights over L tokens, then the image weight as `alpha,0`.
/// `query_id` is the position of the query in `queries`.
pub fn attention_csv(outputs: &[QueryOutput]) -> String {
    let mut out = String::from("query_id,kind,index,weight\n");
    for (q, o) in outputs.iter().enumerate() {
        let rows = [("spatial", &o.spatial), ("word", &o.word)];
        for (kind, weights) in rows {
            for (i, w) in weights.iter().flatten().enumerate() {
                writeln!(out, "{q},{kind},{i},{w}").expect("write to string");
            }
        }
        if let Some(a) = o.alpha {
            writeln!(out, "{q},alpha,0,{a}").expect("write to string");
        }
    }
    out
}

pub fn export_attention(outputs: &[QueryOutput], path: &Path) -> Result<()> {
    fs::write(path, attention_csv(outputs)).map_err(io_err(path))
}
