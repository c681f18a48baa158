use std::collections::HashMap;

use crate::error::{Error, Result};

/// Words used by the modification-text templates.
pub const FUNCTION_WORDS: [&str; 6] = ["replace", "with", "and", "change", "to", "get"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<String>,
}

/// Ordered attributes, each with a non-empty vocabulary. Value tokens are
/// unique across the whole schema and never collide with template words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
}

pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple"];
pub const SHAPES: [&str; 8] = [
    "circle", "square", "triangle", "diamond", "cross", "ring", "bar", "star",
];
pub const PATTERNS: [&str; 4] = ["solid", "striped", "dotted", "checkered"];

impl Default for AttributeSchema {
    /// color (8) x shape (8) x pattern (4) = 256 items.
    fn default() -> Self {
        let attr = |name: &str, vals: &[&str]| Attribute {
            name: name.to_string(),
            values: vals.iter().map(|s| s.to_string()).collect(),
        };
        Self::new(vec![
            attr("color", &COLORS),
            attr("shape", &SHAPES),
            attr("pattern", &PATTERNS),
        ])
        .expect("default schema is valid")
    }
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Param("schema needs at least one attribute".into()));
        }
        let mut owner: HashMap<&str, &str> = FUNCTION_WORDS.iter().map(|w| (*w, "<template>")).collect();
        for a in &attributes {
            if a.values.is_empty() {
                return Err(Error::Param(format!("attribute `{}` has an empty vocabulary", a.name)));
            }
            if attributes.iter().filter(|b| b.name == a.name).count() > 1 {
                return Err(Error::Param(format!("attribute `{}` listed twice", a.name)));
            }
            for v in &a.values {
                if v.is_empty() || v.contains(char::is_whitespace) {
                    return Err(Error::Param(format!("bad token `{v}` in `{}`", a.name)));
                }
                if let Some(prev) = owner.insert(v, &a.name) {
                    return Err(Error::Param(format!(
                        "token `{v}` used by both `{prev}` and `{}`",
                        a.name
                    )));
                }
            }
        }
        Ok(Self { attributes })
    }

    /// Parses `default` or `name=v1,v2;name2=...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec == "default" {
            return Ok(Self::default());
        }
        let attributes = spec
            .split(';')
            .map(|part| {
                let (name, vals) = part
                    .split_once('=')
                    .ok_or_else(|| Error::Param(format!("schema entry `{part}` lacks `=`")))?;
                Ok(Attribute {
                    name: name.trim().to_string(),
                    values: vals.split(',').map(|v| v.trim().to_string()).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(attributes)
    }

    pub fn to_spec(&self) -> String {
        self.attributes
            .iter()
            .map(|a| format!("{}={}", a.name, a.values.join(",")))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Number of items in the full Cartesian product.
    pub fn catalog_size(&self) -> usize {
        self.attributes.iter().map(|a| a.values.len()).product()
    }

    /// Lexicographic (mixed-radix) id of a value assignment.
    pub fn id_of(&self, values: &[usize]) -> usize {
        values
            .iter()
            .zip(&self.attributes)
            .fold(0, |acc, (&v, a)| acc * a.values.len() + v)
    }

    pub fn values_of(&self, mut id: usize) -> Vec<usize> {
        let mut out = vec![0; self.attributes.len()];
        for (slot, a) in out.iter_mut().zip(&self.attributes).rev() {
            *slot = id % a.values.len();
            id /= a.values.len();
        }
        out
    }

    /// (attribute index, value index) for a value token.
    pub fn lookup(&self, token: &str) -> Option<(usize, usize)> {
        self.attributes
            .iter()
            .enumerate()
            .find_map(|(ai, a)| a.values.iter().position(|v| v == token).map(|vi| (ai, vi)))
    }

    pub fn token(&self, attr: usize, value: usize) -> &str {
        &self.attributes[attr].values[value]
    }
}

/// Closed token vocabulary: template words first, then value tokens in schema order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(schema: &AttributeSchema) -> Self {
        let tokens: Vec<String> = FUNCTION_WORDS
            .iter()
            .map(|s| s.to_string())
            .chain(schema.attributes().iter().flat_map(|a| a.values.iter().cloned()))
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocab(token.to_string()))
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }
}
