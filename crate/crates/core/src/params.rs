//! Named parameter storage, the Adam optimizer, and the binary checkpoint
//! format.
//!
//! Checkpoint layout (little-endian, all f64 payloads stored as raw IEEE
//! bits so round trips are bit-exact):
//!
//! ```text
//! magic    4 bytes  "BFCK"
//! version  u32      currently 1
//! step     u64      training step counter
//! config   u32 len + JSON bytes (UTF-8 snapshot of the train config)
//! params   u32 count, then per tensor:
//!            u32 name len + UTF-8 name
//!            u32 ndim, u64 dims...
//!            f64 data (row-major)
//! opt      u8 flag; when 1: u64 adam step t, then first/second moment
//!          tensor data in parameter order (shapes match the parameters)
//! ```

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

/// Ordered collection of named parameter tensors.
///
/// Iteration order is insertion order everywhere (init, lift, update,
/// serialization), which keeps every phase of training deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).copied().map(move |i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// Copy every tensor onto a tape as a parameter leaf.
    pub fn lift<'t>(&self, tape: &'t Tape) -> LiftedParams<'t> {
        let mut vars = Vec::with_capacity(self.names.len());
        let mut by_name = HashMap::with_capacity(self.names.len());
        for (i, (name, tensor)) in self.iter().enumerate() {
            let v = tape.param(tensor.clone());
            vars.push(v);
            by_name.insert(name.to_string(), i);
        }
        LiftedParams { vars, by_name }
    }
}

/// Tape handles for a lifted `ParamStore`, addressable by name.
pub struct LiftedParams<'t> {
    vars: Vec<Var<'t>>,
    by_name: HashMap<String, usize>,
}

impl<'t> LiftedParams<'t> {
    /// Assemble from existing tape handles (gradient-check harnesses).
    pub fn from_pairs(pairs: impl Iterator<Item = (String, Var<'t>)>) -> Self {
        let mut vars = Vec::new();
        let mut by_name = HashMap::new();
        for (name, var) in pairs {
            by_name.insert(name, vars.len());
            vars.push(var);
        }
        LiftedParams { vars, by_name }
    }

    pub fn var(&self, name: &str) -> Var<'t> {
        self.vars[*self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn try_var(&self, name: &str) -> Option<Var<'t>> {
        self.by_name.get(name).map(|&i| self.vars[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.by_name
            .iter()
            .map(move |(name, &i)| (name.as_str(), self.vars[i]))
    }

    /// Handles in the order the parameters were lifted (store order).
    pub fn ordered_vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Deterministic per-tensor initializers driven by one master seed.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform(-bound, bound) with the He/Kaiming bound for the given fan-in.
    pub fn linear_weight(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        Tensor::new(&[fan_in, fan_out], data).unwrap()
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| self.rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data).unwrap()
    }
}

/// Adam with optional exponential learning-rate decay, moments stored per
/// parameter in store order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. `grads` must be in store order; missing gradients are
    /// treated as zero (the parameter still decays its moments).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(grads.len(), params.tensors.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, tensor) in params.tensors.iter_mut().enumerate() {
            let zero = Tensor::zeros(tensor.shape());
            let g = grads[i].as_ref().unwrap_or(&zero);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..tensor.numel() {
                let gj = g.data()[j];
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                tensor.data_mut()[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Exponentially decay from `lr0` at step 0 to `lr1` at step `total`.
pub fn lr_schedule(lr0: f64, lr1: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = step as f64 / total as f64;
    lr0 * (lr1 / lr0).powf(frac)
}

const MAGIC: &[u8; 4] = b"BFCK";
const VERSION: u32 = 1;

/// Everything needed to resume training or render: parameters, optimizer
/// moments, step counter, and the config snapshot that produced them.
pub struct Checkpoint {
    pub step: u64,
    pub config_json: String,
    pub params: ParamStore,
    pub opt: Option<Adam>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        let cfg = self.config_json.as_bytes();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, tensor) in self.params.iter() {
            write_tensor(&mut w, name, tensor)?;
        }
        match &self.opt {
            Some(adam) => {
                w.write_all(&[1u8])?;
                w.write_all(&adam.t.to_le_bytes())?;
                for t in adam.m.iter().chain(adam.v.iter()) {
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            None => w.write_all(&[0u8])?,
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let step = read_u64(&mut r)?;
        let cfg_len = read_u32(&mut r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)?;
        let config_json = String::from_utf8(cfg)
            .map_err(|e| CheckpointError::Format(format!("config utf8: {e}")))?;
        let count = read_u32(&mut r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let (name, tensor) = read_tensor(&mut r)?;
            params.insert(&name, tensor);
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let opt = if flag[0] == 1 {
            let t = read_u64(&mut r)?;
            let mut read_moments = || -> Result<Vec<Tensor>, CheckpointError> {
                params
                    .tensors
                    .iter()
                    .map(|p| {
                        let mut data = vec![0.0; p.numel()];
                        for v in data.iter_mut() {
                            *v = read_f64(&mut r)?;
                        }
                        Ok(Tensor::new(p.shape(), data).unwrap())
                    })
                    .collect()
            };
            let m = read_moments()?;
            let v = read_moments()?;
            Some(Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t,
                m,
                v,
            })
        } else {
            None
        };
        Ok(Checkpoint {
            step,
            config_json,
            params,
            opt,
        })
    }
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor), CheckpointError> {
    let name_len = read_u32(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name =
        String::from_utf8(name).map_err(|e| CheckpointError::Format(format!("name utf8: {e}")))?;
    let ndim = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = vec![0.0; numel];
    for v in data.iter_mut() {
        *v = read_f64(r)?;
    }
    Ok((
        name,
        Tensor::new(&shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?,
    ))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::col(&[1.0, -2.0, 3.0]));
        let before = store.get("w").unwrap().clone();
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Some(Tensor::zeros(&[3, 1]))], 1e-2);
        assert_eq!(store.get("w").unwrap().data(), before.data());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::new(&[2, 2], vec![1.0, -0.5, 3.25, f64::MIN_POSITIVE]).unwrap());
        params.insert("b", Tensor::col(&[0.1 + 0.2, 1e-300]));
        let mut adam = Adam::new(&params);
        let grads = vec![
            Some(Tensor::filled(&[2, 2], 0.3)),
            Some(Tensor::col(&[0.7, -0.1])),
        ];
        adam.step(&mut params, &grads, 1e-3);
        let ck = Checkpoint {
            step: 42,
            config_json: "{\"seed\":7}".into(),
            params: params.clone(),
            opt: Some(adam.clone()),
        };
        let dir = std::env::temp_dir().join("bonefield-ck-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ck");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.config_json, ck.config_json);
        for ((n1, t1), (n2, t2)) in ck.params.iter().zip(loaded.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "tensor {n1} not bit-exact");
        }
        let (o1, o2) = (ck.opt.unwrap(), loaded.opt.unwrap());
        assert_eq!(o1.t, o2.t);
        for (m1, m2) in o1.m.iter().zip(o2.m.iter()) {
            assert_eq!(m1.data(), m2.data());
        }
        std::fs::remove_file(path).ok();
    }
}
