//! Named parameter storage, per-tape bindings, and the training optimizer.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Learned tensors addressed by name. Iteration order is always the sorted
/// name order, so gradient application and serialization are deterministic.
#[derive(Default, Clone)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.values.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Kaiming-style uniform init scaled by fan-in.
    pub fn init_linear(&mut self, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, w).unwrap());
        self.insert(format!("{name}.b"), Tensor::row(vec![0.0; fan_out]));
    }

    /// Bind all parameters as leaves on a fresh tape.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let mut vars = BTreeMap::new();
        for (name, tensor) in &self.values {
            vars.insert(name.clone(), tape.leaf(tensor.clone()));
        }
        Binding { vars }
    }

    /// Checkpoint format: magic `FMCK`, u32 param count, then per parameter
    /// (sorted by name): u16 name length, name bytes, u8 rank, u32 dims,
    /// f64 data. All integers and floats little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"FMCK");
        buf.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (name, tensor) in &self.values {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let bad = |msg: &str| Error::Format {
            path: path.display().to_string(),
            msg: msg.to_string(),
        };
        if bytes.len() < 8 || &bytes[0..4] != b"FMCK" {
            return Err(bad("missing FMCK magic"));
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut off = 8;
        let mut store = ParamStore::new();
        for _ in 0..count {
            if off + 2 > bytes.len() {
                return Err(bad("truncated name length"));
            }
            let nlen = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
            off += 2;
            if off + nlen > bytes.len() {
                return Err(bad("truncated name"));
            }
            let name = String::from_utf8(bytes[off..off + nlen].to_vec())
                .map_err(|_| bad("non-utf8 name"))?;
            off += nlen;
            if off + 1 > bytes.len() {
                return Err(bad("truncated rank"));
            }
            let rank = bytes[off] as usize;
            off += 1;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                if off + 4 > bytes.len() {
                    return Err(bad("truncated dims"));
                }
                shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
                off += 4;
            }
            let numel: usize = shape.iter().product();
            if off + numel * 8 > bytes.len() {
                return Err(bad("truncated data"));
            }
            let data: Vec<f64> = bytes[off..off + numel * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += numel * 8;
            store.insert(name, Tensor::new(shape, data).map_err(|_| bad("bad shape"))?);
        }
        Ok(store)
    }
}

/// Parameter leaves for one tape.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Gradient-descent with classical momentum.
pub struct MomentumSgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        MomentumSgd {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Apply one update from the gradients accumulated on `tape`.
    pub fn step(&mut self, params: &mut ParamStore, tape: &Tape, binding: &Binding) {
        for (name, var) in binding.iter() {
            let grad = tape.grad(var).expect("backward not run before step");
            let vel = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let value = params.get_mut(name);
            for ((v, g), p) in vel.iter_mut().zip(grad).zip(value.data_mut()) {
                *v = self.momentum * *v - self.learning_rate * g;
                *p += *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-9, 7.0]).unwrap());
        store.insert("a.b", Tensor::row(vec![0.25, -0.5]));
        let dir = std::env::temp_dir().join("fms_params_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.bin");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.get("a.w"), store.get("a.w"));
        assert_eq!(loaded.get("a.b"), store.get("a.b"));
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::row(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let p = binding.var("p");
        let y = tape.mul(p, p).unwrap();
        let root = tape.sum(y);
        tape.backward(root).unwrap();
        let mut opt = MomentumSgd::new(0.0, 0.9);
        opt.step(&mut store, &tape, &binding);
        assert_eq!(store.get("p").data(), &[1.0, 2.0]);
    }
}
