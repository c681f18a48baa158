//! Browser demo: draw catalog renders, compare soft labels across kernels
//! and temperatures, and inspect one query's attention, image weight and
//! top matches.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dwc::data::render::{render, RenderConfig, IMAGE_CHANNELS, IMAGE_SIZE};
use dwc::data::{generate_catalog, AttributeSchema, Dominance, Item, Triplet};
use dwc::eval::{Evaluator, Integration};
use dwc::losses::{soft_labels, Kernel};
use dwc::model::{DwcModel, ModelConfig};
use dwc::Tensor;

/// Errors cross into JavaScript as plain strings, which also keeps the
/// API callable from native tests.
fn js_err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Serialize)]
struct QueryView {
    alpha: Option<f64>,
    /// Row-major 4x4 weights over the image feature map.
    spatial: Vec<f64>,
    words: Vec<(String, f64)>,
    /// Best matches as `(item id, description)`, query item excluded.
    top: Vec<(usize, String)>,
    target_rank: Option<usize>,
}

#[wasm_bindgen]
pub struct Demo {
    schema: AttributeSchema,
    catalog: Vec<Item>,
    images: Vec<Tensor>,
    model: DwcModel,
}

#[wasm_bindgen]
impl Demo {
    /// Untrained model with the given seed over the default catalog.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, String> {
        let schema = AttributeSchema::default();
        let catalog = generate_catalog(&schema, 0);
        let cfg = RenderConfig::default();
        let images = catalog.iter().map(|it| render(&schema, it, cfg)).collect();
        let model = DwcModel::new(
            &schema,
            ModelConfig {
                seed: u64::from(seed),
                ..Default::default()
            },
        )
        .map_err(js_err)?;
        Ok(Demo {
            schema,
            catalog,
            images,
            model,
        })
    }

    pub fn catalog_size(&self) -> usize {
        self.catalog.len()
    }

    /// Space-separated attribute values of an item.
    pub fn describe(&self, id: usize) -> Result<String, String> {
        let item = self.catalog.get(id).ok_or_else(|| js_err(format!("no item {id}")))?;
        Ok(describe(&self.schema, item))
    }

    /// Known words, one per vocabulary entry.
    pub fn vocabulary(&self) -> Vec<String> {
        (0..self.model.vocab.len())
            .map(|i| self.model.vocab.token(i).to_string())
            .collect()
    }

    /// 16x16 RGBA pixels of an item rendered with noise `sigma`.
    pub fn render_rgba(&self, id: usize, sigma: f64, seed: u32) -> Result<Vec<u8>, String> {
        let item = self.catalog.get(id).ok_or_else(|| js_err(format!("no item {id}")))?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(js_err(format!("sigma must be >= 0, got {sigma}")));
        }
        let img = render(
            &self.schema,
            item,
            RenderConfig {
                pixel_sigma: sigma,
                seed: u64::from(seed),
            },
        );
        Ok(to_rgba(&img))
    }

    /// Row-major soft-label matrix for the listed items, built from their
    /// frozen-stream image embeddings.
    pub fn soft_labels(&self, ids: Vec<u32>, tau: f64, kernel: &str) -> Result<Vec<f64>, String> {
        let kernel: Kernel = kernel.parse().map_err(js_err)?;
        let mut rows = Vec::new();
        for &id in &ids {
            let img = self
                .images
                .get(id as usize)
                .ok_or_else(|| js_err(format!("no item {id}")))?;
            rows.extend(self.model.frozen_image(img).map_err(js_err)?);
        }
        let width = rows.len() / ids.len().max(1);
        let t = Tensor::new(&[ids.len(), width], rows).map_err(js_err)?;
        Ok(soft_labels(&t, tau, kernel).map_err(js_err)?.values.data().to_vec())
    }

    /// JSON view of one query: image weight, attention and top matches.
    /// `target` may be negative when no target is known.
    pub fn query(&self, id: usize, text: &str, target: i64, top_k: usize) -> Result<String, String> {
        if id >= self.catalog.len() {
            return Err(js_err(format!("no item {id}")));
        }
        let tokens: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        self.model.encode_tokens(&tokens).map_err(js_err)?;
        let target = usize::try_from(target).ok().filter(|&t| t < self.catalog.len());
        let triplet = Triplet {
            query: id,
            target: target.unwrap_or(id),
            tokens: tokens.clone(),
            dominance: Dominance::ImageDominant,
        };
        let ev = Evaluator::from_parts(&self.model, self.images.clone()).map_err(js_err)?;
        let out = ev.query(&triplet).map_err(js_err)?;
        let ranking = ev.score(0, &triplet, &out, Integration::Mean).map_err(js_err)?;
        let view = QueryView {
            alpha: out.alpha,
            spatial: out.spatial.clone().unwrap_or_default(),
            words: tokens.into_iter().zip(out.word.clone().unwrap_or_default()).collect(),
            top: ranking
                .order
                .iter()
                .take(top_k)
                .map(|&i| (i, describe(&self.schema, &self.catalog[i])))
                .collect(),
            target_rank: target.map(|_| ranking.target_rank),
        };
        serde_json::to_string(&view).map_err(js_err)
    }
}

fn describe(schema: &AttributeSchema, item: &Item) -> String {
    item.values
        .iter()
        .enumerate()
        .map(|(a, &v)| schema.token(a, v))
        .collect::<Vec<_>>()
        .join(" ")
}

fn to_rgba(img: &Tensor) -> Vec<u8> {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut out = Vec::with_capacity(plane * 4);
    for p in 0..plane {
        for c in 0..IMAGE_CHANNELS {
            out.push((img.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}
