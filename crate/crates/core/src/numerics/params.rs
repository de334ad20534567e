use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{elvt, Tensor, Var};
use crate::error::{bail, Error, Result};

/// A named collection of trainable tensors, visited in a fixed order.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }
}

/// Turns parameter tensors into graph leaves for one forward pass and
/// collects their gradients afterwards.
#[derive(Default)]
pub struct Binder {
    vars: Vec<(String, Var)>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &str, t: &Tensor) -> Var {
        let v = Var::param(t.clone());
        self.vars.push((name.to_string(), v.clone()));
        v
    }

    /// Gradients by parameter name; parameters the loss never reached get zeros.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(n, v)| {
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()));
                (n.clone(), g)
            })
            .collect()
    }

    /// Whether backward reached `name` at all.
    pub fn reached(&self, name: &str) -> bool {
        self.vars
            .iter()
            .any(|(n, v)| n == name && v.grad().is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn file_name(name: &str) -> String {
    format!("{}.elvt", name.replace('/', "."))
}

/// Writes every tensor as `<name>.elvt` under `dir` plus `manifest.json`.
pub fn save_dir(dir: &Path, params: &dyn Parameters, config: serde_json::Value) -> Result<ParamManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    let mut first_err = None;
    params.visit(&mut |name, t| {
        let file = file_name(name);
        if first_err.is_none() {
            if let Err(e) = elvt::write(&dir.join(&file), t) {
                first_err = Some(e);
            }
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    let manifest = ParamManifest { config, tensors };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<ParamManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads tensors into already-shaped `params`; names and shapes must match.
pub fn load_dir(dir: &Path, params: &mut dyn Parameters) -> Result<ParamManifest> {
    let manifest = read_manifest(dir)?;
    let by_name: BTreeMap<&str, &TensorEntry> =
        manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut first_err: Option<Error> = None;
    let mut seen = 0;
    params.visit_mut(&mut |name, t| {
        if first_err.is_some() {
            return;
        }
        let Some(entry) = by_name.get(name) else {
            first_err = Some(Error::Format(format!("manifest lacks tensor {name}")));
            return;
        };
        match elvt::read(&dir.join(&entry.file)) {
            Ok(loaded) if loaded.shape() == t.shape() => {
                *t = loaded;
                seen += 1;
            }
            Ok(loaded) => {
                first_err = Some(Error::Format(format!(
                    "tensor {name}: file shape {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )))
            }
            Err(e) => first_err = Some(e),
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    if seen != manifest.tensors.len() {
        bail!(Format, "manifest lists {} tensors, model has {seen}", manifest.tensors.len());
    }
    Ok(manifest)
}
