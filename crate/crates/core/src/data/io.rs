//! Dataset directory: `catalog.tsv`, `triplets_train.tsv`, `triplets_val.tsv`
//! and `meta.kv`. Images are never stored; they are re-rendered from the
//! catalog and the seed recorded in `meta.kv`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::render::{self, RenderConfig};
use super::schema::AttributeSchema;
use super::{generate_catalog, make_triplets, split, Dominance, Item, Triplet, TripletOptions};
use crate::error::{io_err, Error, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetParams {
    pub schema: AttributeSchema,
    pub n: usize,
    pub text_dominant_fraction: f64,
    pub val_fraction: f64,
    pub label_noise: f64,
    pub pixel_sigma: f64,
    pub get_clause: bool,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            schema: AttributeSchema::default(),
            n: 4096,
            text_dominant_fraction: 0.5,
            val_fraction: 0.25,
            label_noise: 0.0,
            pixel_sigma: render::DEFAULT_PIXEL_SIGMA,
            get_clause: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub params: DatasetParams,
    pub catalog: Vec<Item>,
    pub train: Vec<Triplet>,
    pub val: Vec<Triplet>,
}

impl Dataset {
    pub fn generate(params: DatasetParams) -> Result<Self> {
        if !(params.pixel_sigma >= 0.0 && params.pixel_sigma.is_finite()) {
            return Err(Error::Param(format!(
                "pixel sigma must be >= 0, got {}",
                params.pixel_sigma
            )));
        }
        let catalog = generate_catalog(&params.schema, params.seed);
        let opts = TripletOptions {
            label_noise: params.label_noise,
            get_clause: params.get_clause,
        };
        let all = make_triplets(
            &params.schema,
            &catalog,
            params.n,
            params.text_dominant_fraction,
            opts,
            params.seed,
        )?;
        let (train, val) = split(&all, params.val_fraction, params.seed)?;
        Ok(Self {
            params,
            catalog,
            train,
            val,
        })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.params.schema
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            pixel_sigma: self.params.pixel_sigma,
            seed: self.params.seed,
        }
    }

    /// Renders of every catalog item, indexed by item id.
    pub fn images(&self) -> Vec<Tensor> {
        let cfg = self.render_config();
        self.catalog
            .iter()
            .map(|item| render::render(&self.params.schema, item, cfg))
            .collect()
    }

    pub fn meta(&self) -> KvMap {
        let p = &self.params;
        let mut kv = KvMap::new();
        kv.set("schema", p.schema.to_spec());
        kv.set("num_items", self.catalog.len());
        kv.set("n", p.n);
        kv.set("text_dominant_fraction", p.text_dominant_fraction);
        kv.set("val_fraction", p.val_fraction);
        kv.set("label_noise", p.label_noise);
        kv.set("pixel_sigma", p.pixel_sigma);
        kv.set("get_clause", p.get_clause);
        kv.set("seed", p.seed);
        kv.set("num_train", self.train.len());
        kv.set("num_val", self.val.len());
        kv
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            fs::write(&path, body).map_err(io_err(path))
        };
        write("catalog.tsv", catalog_tsv(&self.params.schema, &self.catalog))?;
        write("triplets_train.tsv", triplets_tsv(&self.train))?;
        write("triplets_val.tsv", triplets_tsv(&self.val))?;
        write("meta.kv", self.meta().render())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(io_err(path))
        };
        let meta = KvMap::parse(&read("meta.kv")?)?;
        let schema = AttributeSchema::parse(
            meta.get("schema")
                .ok_or_else(|| Error::Format("meta.kv lacks schema".into()))?,
        )?;
        let params = DatasetParams {
            schema,
            n: meta.required("n")?,
            text_dominant_fraction: meta.required("text_dominant_fraction")?,
            val_fraction: meta.required("val_fraction")?,
            label_noise: meta.required("label_noise")?,
            pixel_sigma: meta.required("pixel_sigma")?,
            get_clause: meta.required("get_clause")?,
            seed: meta.required("seed")?,
        };
        let catalog = parse_catalog(&params.schema, &read("catalog.tsv")?)?;
        let train = parse_triplets(&read("triplets_train.tsv")?, catalog.len())?;
        let val = parse_triplets(&read("triplets_val.tsv")?, catalog.len())?;
        Ok(Self {
            params,
            catalog,
            train,
            val,
        })
    }
}

fn catalog_tsv(schema: &AttributeSchema, catalog: &[Item]) -> String {
    let mut out = String::from("id");
    for a in schema.attributes() {
        out.push('\t');
        out.push_str(&a.name);
    }
    out.push('\n');
    for item in catalog {
        write!(out, "{}", item.id).expect("write to string");
        for (a, &v) in item.values.iter().enumerate() {
            out.push('\t');
            out.push_str(schema.token(a, v));
        }
        out.push('\n');
    }
    out
}

fn triplets_tsv(triplets: &[Triplet]) -> String {
    let mut out = String::from("query_id\ttarget_id\tdominance\ttokens\n");
    for t in triplets {
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
    out
}

fn parse_catalog(schema: &AttributeSchema, text: &str) -> Result<Vec<Item>> {
    let expected = generate_catalog(schema, 0);
    let mut lines = text.lines();
    lines.next().ok_or_else(|| Error::Format("empty catalog.tsv".into()))?;
    let mut items = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != schema.len() + 1 {
            return Err(Error::Format(format!(
                "catalog row `{line}` has {} fields",
                fields.len()
            )));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad id in `{line}`")))?;
        let values = fields[1..]
            .iter()
            .enumerate()
            .map(|(a, tok)| match schema.lookup(tok) {
                Some((owner, v)) if owner == a => Ok(v),
                _ => Err(Error::Format(format!("`{tok}` is not a value of attribute {a}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        items.push(Item { id, values });
    }
    if items != expected {
        return Err(Error::Format(
            "catalog.tsv does not match the schema's product order".into(),
        ));
    }
    Ok(items)
}

fn parse_triplets(text: &str, n_items: usize) -> Result<Vec<Triplet>> {
    text.lines()
        .skip(1)
        .map(|line| {
            let fields: Vec<&str> = line.splitn(4, '\t').collect();
            let [q, t, d, toks] = fields[..] else {
                return Err(Error::Format(format!("malformed triplet row `{line}`")));
            };
            let parse_id = |s: &str| -> Result<usize> {
                let id: usize = s.parse().map_err(|_| Error::Format(format!("bad item id `{s}`")))?;
                if id >= n_items {
                    return Err(Error::Format(format!("item id {id} outside the catalog")));
                }
                Ok(id)
            };
            Ok(Triplet {
                query: parse_id(q)?,
                target: parse_id(t)?,
                dominance: Dominance::parse(d)?,
                tokens: toks.split_whitespace().map(str::to_string).collect(),
            })
        })
        .collect()
}
