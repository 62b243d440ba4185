//! Named parameter containers and the checkpoint file format.
//!
//! Checkpoints are plain text: a header line carrying the config hash, then
//! one `name<TAB>shape<TAB>values` line per tensor. Reals are written with
//! round-trip-exact formatting so save/load is the identity.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::tape::{Gradients, Tape, Var};
use super::{KernelError, Tensor};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing checkpoint header")]
    MissingHeader,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Ordered, name-addressed collection of learnable tensors.
///
/// Order is insertion order and is part of the determinism contract: init,
/// optimizer steps, and checkpoints all walk parameters in this order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter `{name}`"
        );
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.by_name.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Leaf variables for a whole [`ParamSet`] on one tape.
pub struct ParamBinding {
    vars: Vec<(String, Var)>,
    by_name: HashMap<String, Var>,
}

impl ParamBinding {
    pub fn bind(tape: &Tape, params: &ParamSet) -> Result<Self, KernelError> {
        let mut vars = Vec::with_capacity(params.len());
        let mut by_name = HashMap::with_capacity(params.len());
        for (name, tensor) in params.iter() {
            let v = tape.leaf(tensor.clone())?;
            vars.push((name.to_string(), v));
            by_name.insert(name.to_string(), v);
        }
        Ok(ParamBinding { vars, by_name })
    }

    pub fn var(&self, name: &str) -> Result<Var, KernelError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| KernelError::UnknownParam(name.to_string()))
    }

    /// Gradients in parameter order; parameters the loss never touched get
    /// zero gradients.
    pub fn collect(
        &self,
        params: &ParamSet,
        grads: &Gradients,
    ) -> Vec<(String, Tensor)> {
        self.vars
            .iter()
            .map(|(name, v)| {
                let g = match grads.get(*v) {
                    Some(t) => t.clone(),
                    None => Tensor::zeros(params.get(name).unwrap().shape()),
                };
                (name.clone(), g)
            })
            .collect()
    }
}

fn format_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn format_values(data: &[f64]) -> String {
    let mut s = String::with_capacity(data.len() * 8);
    for (i, v) in data.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format!("{v}"));
    }
    s
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet,
    config_hash: u64,
) -> Result<(), CheckpointError> {
    let mut out = String::new();
    out.push_str(&format!("# cir-checkpoint config_hash={config_hash:016x}\n"));
    for (name, tensor) in params.iter() {
        out.push_str(&format!(
            "{name}\t{}\t{}\n",
            format_shape(tensor.shape()),
            format_values(tensor.data())
        ));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, u64), CheckpointError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(CheckpointError::MissingHeader)?;
    let hash_hex = header
        .strip_prefix("# cir-checkpoint config_hash=")
        .ok_or(CheckpointError::MissingHeader)?;
    let config_hash = u64::from_str_radix(hash_hex.trim(), 16)
        .map_err(|e| CheckpointError::Parse { line: 1, msg: format!("bad config hash: {e}") })?;

    let mut params = ParamSet::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (name, shape_s, values_s) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(CheckpointError::Parse {
                    line: lineno,
                    msg: "expected 3 tab-separated fields".into(),
                })
            }
        };
        let shape: Vec<usize> = shape_s
            .split(',')
            .map(|d| {
                d.parse::<usize>().map_err(|e| CheckpointError::Parse {
                    line: lineno,
                    msg: format!("bad shape `{shape_s}`: {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        let data: Vec<f64> = values_s
            .split(',')
            .map(|v| {
                v.parse::<f64>().map_err(|e| CheckpointError::Parse {
                    line: lineno,
                    msg: format!("bad value `{v}`: {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        params.insert(name, tensor);
    }
    Ok((params, config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut params = ParamSet::new();
        params.insert("a.w", Tensor::matrix(2, 3, vec![0.1, -2.5e-7, 3.0, 1.0 / 3.0, 5.5, -0.0]).unwrap());
        params.insert("a.b", Tensor::vector(vec![1e-300, 7.25]));
        let dir = std::env::temp_dir().join(format!("cir-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");
        save_checkpoint(&path, &params, 0xdead_beef).unwrap();
        let (loaded, hash) = load_checkpoint(&path).unwrap();
        assert_eq!(hash, 0xdead_beef);
        assert_eq!(loaded.len(), 2);
        for (name, t) in params.iter() {
            assert_eq!(loaded.get(name).unwrap(), t, "{name}");
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_rejects_malformed_rows() {
        let dir = std::env::temp_dir().join(format!("cir-ckpt-bad-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        fs::write(&path, "# cir-checkpoint config_hash=0\nw\t2,2\t1,2,3\n").unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn binding_collects_zero_grads_for_untouched_params() {
        let mut params = ParamSet::new();
        params.insert("used", Tensor::vector(vec![1.0, 2.0]));
        params.insert("unused", Tensor::vector(vec![3.0]));
        let tape = Tape::new();
        let bind = ParamBinding::bind(&tape, &params).unwrap();
        let loss = tape.sum(bind.var("used").unwrap()).unwrap();
        let grads = tape.backward(loss).unwrap();
        let collected = bind.collect(&params, &grads);
        assert_eq!(collected[0].1.data(), &[1.0, 1.0]);
        assert_eq!(collected[1].1.data(), &[0.0]);
    }
}
