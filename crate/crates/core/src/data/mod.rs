//! Synthetic attribute-grid retrieval benchmark.
//!
//! The catalog is the full Cartesian product of a schema's vocabularies.
//! Triplets pair a query item with a target that differs in one attribute
//! (image-dominant: the query picture still carries most of the answer) or
//! in two or more (text-dominant). Modification texts are rendered from fixed
//! templates: `replace <old> with <new>` for the first edit and
//! `and change <old> to <new>` for each further one.

mod io;
pub mod render;
pub mod schema;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use io::{Dataset, DatasetParams};
pub use render::{render, RenderConfig};
pub use schema::{AttributeSchema, Vocab};

use crate::error::{Error, Result};

/// Longest token sequence the text encoder accepts.
pub const MAX_TEXT_LEN: usize = 16;

/// Seeded generator for an independent sub-stream of `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    pub id: usize,
    /// Value index per schema attribute.
    pub values: Vec<usize>,
}

/// Full Cartesian product of the schema, ids in lexicographic order. The
/// product is fixed, so `seed` does not change the result.
pub fn generate_catalog(schema: &AttributeSchema, _seed: u64) -> Vec<Item> {
    (0..schema.catalog_size())
        .map(|id| Item {
            id,
            values: schema.values_of(id),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dominance {
    ImageDominant,
    TextDominant,
}

impl Dominance {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ImageDominant => "image",
            Self::TextDominant => "text",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Self::ImageDominant),
            "text" => Ok(Self::TextDominant),
            _ => Err(Error::Format(format!("unknown dominance tag `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub query: usize,
    pub target: usize,
    pub tokens: Vec<String>,
    pub dominance: Dominance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletOptions {
    /// Probability of swapping one value token for another of the same attribute.
    pub label_noise: f64,
    /// Append `and get <target values>` to every text.
    pub get_clause: bool,
}

impl Default for TripletOptions {
    fn default() -> Self {
        Self {
            label_noise: 0.0,
            get_clause: false,
        }
    }
}

fn text_len(edits: usize, n_attrs: usize, get_clause: bool) -> usize {
    4 * edits + if get_clause { 2 + n_attrs } else { 0 }
}

/// Renders the modification text for changing `query` into `target`.
pub fn describe(schema: &AttributeSchema, query: &Item, target: &Item, get_clause: bool) -> Vec<String> {
    let mut tokens = Vec::new();
    for (a, (&old, &new)) in query.values.iter().zip(&target.values).enumerate() {
        if old == new {
            continue;
        }
        let (verb, link) = if tokens.is_empty() {
            ("replace", "with")
        } else {
            ("change", "to")
        };
        if !tokens.is_empty() {
            tokens.push("and".to_string());
        }
        tokens.push(verb.to_string());
        tokens.push(schema.token(a, old).to_string());
        tokens.push(link.to_string());
        tokens.push(schema.token(a, new).to_string());
    }
    if get_clause {
        tokens.push("and".to_string());
        tokens.push("get".to_string());
        tokens.extend(
            target
                .values
                .iter()
                .enumerate()
                .map(|(a, &v)| schema.token(a, v).to_string()),
        );
    }
    tokens
}

/// Generates `n` triplets of which `round(n * text_dominant_fraction)` are
/// text-dominant (two or more edits) and the rest image-dominant (one edit).
pub fn make_triplets(
    schema: &AttributeSchema,
    catalog: &[Item],
    n: usize,
    text_dominant_fraction: f64,
    opts: TripletOptions,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if n == 0 {
        return Err(Error::Param("need at least one triplet".into()));
    }
    if !(0.0..=1.0).contains(&text_dominant_fraction) {
        return Err(Error::Param(format!(
            "text-dominant fraction must lie in [0, 1], got {text_dominant_fraction}"
        )));
    }
    if !(0.0..=1.0).contains(&opts.label_noise) {
        return Err(Error::Param(format!(
            "label noise must lie in [0, 1], got {}",
            opts.label_noise
        )));
    }
    let changeable: Vec<usize> = (0..schema.len())
        .filter(|&a| schema.attributes()[a].values.len() > 1)
        .collect();
    let max_edits = (1..=changeable.len())
        .take_while(|&k| text_len(k, schema.len(), opts.get_clause) <= MAX_TEXT_LEN)
        .last()
        .unwrap_or(0);
    let n_text = (n as f64 * text_dominant_fraction).round() as usize;
    if max_edits == 0 || (n_text > 0 && max_edits < 2) {
        return Err(Error::Param(format!(
            "schema allows at most {max_edits} edits per text; cannot build the requested triplets"
        )));
    }

    let mut rng = rng_for(seed, 1);
    let mut tags = vec![Dominance::TextDominant; n_text];
    tags.resize(n, Dominance::ImageDominant);
    tags.shuffle(&mut rng);

    let mut out = Vec::with_capacity(n);
    for dominance in tags {
        let query = &catalog[rng.random_range(0..catalog.len())];
        let edits = match dominance {
            Dominance::ImageDominant => 1,
            Dominance::TextDominant => rng.random_range(2..=max_edits),
        };
        let mut chosen: Vec<usize> = index::sample(&mut rng, changeable.len(), edits)
            .into_iter()
            .map(|i| changeable[i])
            .collect();
        chosen.sort_unstable();
        let mut values = query.values.clone();
        for &a in &chosen {
            let k = schema.attributes()[a].values.len();
            values[a] = (values[a] + rng.random_range(1..k)) % k;
        }
        let target = &catalog[schema.id_of(&values)];
        let mut tokens = describe(schema, query, target, opts.get_clause);
        if opts.label_noise > 0.0 && rng.random_bool(opts.label_noise) {
            corrupt_one(schema, &mut tokens, &mut rng);
        }
        out.push(Triplet {
            query: query.id,
            target: target.id,
            tokens,
            dominance,
        });
    }
    Ok(out)
}

fn corrupt_one(schema: &AttributeSchema, tokens: &mut [String], rng: &mut ChaCha8Rng) {
    let slots: Vec<usize> = (0..tokens.len())
        .filter(|&i| schema.lookup(&tokens[i]).is_some())
        .collect();
    let Some(&slot) = slots.get(rng.random_range(0..slots.len().max(1))) else {
        return;
    };
    let (a, v) = schema.lookup(&tokens[slot]).expect("value token");
    let k = schema.attributes()[a].values.len();
    if k > 1 {
        tokens[slot] = schema.token(a, (v + rng.random_range(1..k)) % k).to_string();
    }
}

/// Seeded partition into (train, validation). Each side keeps the input order.
pub fn split(triplets: &[Triplet], val_fraction: f64, seed: u64) -> Result<(Vec<Triplet>, Vec<Triplet>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Param(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n_val = (triplets.len() as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == triplets.len() {
        return Err(Error::Param(format!(
            "splitting {} triplets at {val_fraction} leaves one side empty",
            triplets.len()
        )));
    }
    let mut rng = rng_for(seed, 2);
    let mut is_val = vec![false; triplets.len()];
    for i in index::sample(&mut rng, triplets.len(), n_val) {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (t, v) in triplets.iter().zip(is_val) {
        if v {
            val.push(t.clone())
        } else {
            train.push(t.clone())
        }
    }
    Ok((train, val))
}
