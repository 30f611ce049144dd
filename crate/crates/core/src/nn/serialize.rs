//! Plain-text model files.
//!
//! ```text
//! causal-bounds-model 1
//! kind mlp
//! net.input_dim 2
//! net.hidden_sizes 64 32 16
//! net.output_dim 1
//! net.layer0.weight 64 2 <64*2 row-major values>
//! net.layer0.bias 1 64 <64 values>
//! ...
//! ```
//!
//! The first line is a magic word and format version. Every other line is a
//! key followed by whitespace-separated values; tensors are written as
//! `rows cols v0 v1 ...` in row-major order. Floats use the shortest
//! representation that round-trips exactly. Composite models (flows, the
//! η-model) store several networks under distinct key prefixes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{Layer, Mlp, MlpConfig};

pub const MAGIC: &str = "causal-bounds-model";
pub const VERSION: u32 = 1;

/// Ordered key/value document backing the model file format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelDoc {
    entries: BTreeMap<String, Vec<String>>,
    order: Vec<String>,
}

impl ModelDoc {
    pub fn new(kind: &str) -> Self {
        let mut doc = Self::default();
        doc.put("kind", [kind]);
        doc
    }

    pub fn put<I, S>(&mut self, key: &str, values: I)
    where
        I: IntoIterator<Item = S>,
        S: ToString,
    {
        if !self.entries.contains_key(key) {
            self.order.push(key.to_string());
        }
        self.entries
            .insert(key.to_string(), values.into_iter().map(|v| v.to_string()).collect());
    }

    pub fn put_tensor(&mut self, key: &str, t: &Tensor) {
        let mut values = vec![t.rows().to_string(), t.cols().to_string()];
        values.extend(t.data().iter().map(|v| v.to_string()));
        self.put(key, values);
    }

    pub fn get(&self, key: &str) -> Result<&[String]> {
        self.entries
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::parse(format!("missing key `{key}`")))
    }

    pub fn kind(&self) -> Result<&str> {
        Ok(self.get("kind")?.first().map(String::as_str).unwrap_or(""))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        let found = self.kind()?;
        if found != kind {
            return Err(Error::parse(format!("expected model kind `{kind}`, found `{found}`")));
        }
        Ok(())
    }

    pub fn get_one<T: FromStr>(&self, key: &str) -> Result<T> {
        let vals = self.get(key)?;
        match vals {
            [v] => v.parse().map_err(|_| Error::parse(format!("bad value for `{key}`: {v}"))),
            _ => Err(Error::parse(format!("`{key}` expects one value, got {}", vals.len()))),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)?
            .iter()
            .map(|v| v.parse().map_err(|_| Error::parse(format!("bad value for `{key}`: {v}"))))
            .collect()
    }

    pub fn get_tensor(&self, key: &str) -> Result<Tensor> {
        let vals: Vec<f64> = self.get_list(key)?;
        if vals.len() < 2 {
            return Err(Error::parse(format!("`{key}` is not a tensor")));
        }
        let (r, c) = (vals[0] as usize, vals[1] as usize);
        Tensor::new(r, c, vals[2..].to_vec()).map_err(|e| Error::parse(format!("`{key}`: {e}")))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION}\n");
        for key in &self.order {
            let vals = &self.entries[key];
            let _ = write!(out, "{key}");
            for v in vals {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse("empty model file"))?;
        let mut head = header.split_whitespace();
        if head.next() != Some(MAGIC) {
            return Err(Error::parse("not a causal-bounds model file"));
        }
        let version: u32 = head
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse("missing format version"))?;
        if version != VERSION {
            return Err(Error::parse(format!("unsupported model format version {version}")));
        }
        let mut doc = Self::default();
        for line in lines {
            let mut parts = line.split_whitespace();
            let Some(key) = parts.next() else { continue };
            doc.put(key, parts);
        }
        Ok(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

pub fn put_mlp(doc: &mut ModelDoc, prefix: &str, mlp: &Mlp) {
    let cfg = mlp.config();
    doc.put(&format!("{prefix}.input_dim"), [cfg.input_dim]);
    doc.put(&format!("{prefix}.hidden_sizes"), cfg.hidden_sizes.iter());
    doc.put(&format!("{prefix}.output_dim"), [cfg.output_dim]);
    for (i, layer) in mlp.layers().iter().enumerate() {
        doc.put_tensor(&format!("{prefix}.layer{i}.weight"), &layer.weight);
        doc.put_tensor(&format!("{prefix}.layer{i}.bias"), &layer.bias);
    }
}

pub fn get_mlp(doc: &ModelDoc, prefix: &str) -> Result<Mlp> {
    let config = MlpConfig {
        input_dim: doc.get_one(&format!("{prefix}.input_dim"))?,
        hidden_sizes: doc.get_list(&format!("{prefix}.hidden_sizes"))?,
        output_dim: doc.get_one(&format!("{prefix}.output_dim"))?,
    };
    let layers = (0..config.hidden_sizes.len() + 1)
        .map(|i| {
            Ok(Layer {
                weight: doc.get_tensor(&format!("{prefix}.layer{i}.weight"))?,
                bias: doc.get_tensor(&format!("{prefix}.layer{i}.bias"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Mlp::from_layers(config, layers)
}

impl Mlp {
    pub fn to_doc(&self) -> ModelDoc {
        let mut doc = ModelDoc::new("mlp");
        put_mlp(&mut doc, "net", self);
        doc
    }

    pub fn from_doc(doc: &ModelDoc) -> Result<Self> {
        doc.expect_kind("mlp")?;
        get_mlp(doc, "net")
    }
}
