//! Minimal dense neural-network substrate: tensors, a small layer set with
//! exact analytic gradients, categorical losses, AdamW, and checkpoint I/O.
//!
//! Everything is f64 and sequential, so forward passes are bit-deterministic
//! and every gradient can be checked against central finite differences.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rngutil::fnv1a;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-parameter AdamW state.
#[derive(Debug, Clone, Default, PartialEq)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Named parameter tensors plus optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    opt: BTreeMap<String, AdamState>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.opt.insert(
            name.clone(),
            AdamState {
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
                step: 0,
            },
        );
        self.params.insert(name, t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Merge another store under this one; duplicate names are a bug.
    pub fn absorb(&mut self, other: ParamStore) {
        for (name, t) in other.params {
            assert!(
                !self.params.contains_key(&name),
                "duplicate parameter {name}"
            );
            self.insert(name, t);
        }
    }

    /// Content hash over the serialized checkpoint bytes.
    pub fn hash(&self) -> u64 {
        fnv1a(&self.to_bytes())
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let count = cur.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name_bytes = cur.take(name_len)?;
            let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| Error::Checkpoint {
                offset: cur.pos as u64,
                msg: "parameter name is not UTF-8".into(),
            })?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(cur.f64()?);
            }
            store.insert(name, Tensor::from_vec(&shape, data));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint {
                offset: cur.pos as u64,
                msg: "trailing bytes after final entry".into(),
            });
        }
        Ok(store)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CPLN";
const CHECKPOINT_VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                offset: self.pos as u64,
                msg: format!("truncated: wanted {n} bytes"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Accumulated gradients, keyed like the parameter store.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    map: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accum(&mut self, name: &str, shape: &[usize], delta: &[f64]) {
        let t = self
            .map
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape));
        debug_assert_eq!(t.data.len(), delta.len(), "gradient shape for {name}");
        for (g, d) in t.data.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.map.values_mut() {
            for g in &mut t.data {
                *g *= factor;
            }
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (name, t) in &other.map {
            self.accum(name, &t.shape, &t.data);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One decoupled-weight-decay Adam step over every parameter in the store.
/// Parameters without an entry in `grads` see a zero gradient.
pub fn adam_update(store: &mut ParamStore, grads: &Grads, cfg: &AdamConfig) {
    let names: Vec<String> = store.params.keys().cloned().collect();
    for name in names {
        let g = grads.map.get(&name);
        let t = store.params.get_mut(&name).unwrap();
        let st = store.opt.get_mut(&name).unwrap();
        st.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(st.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(st.step as i32);
        for i in 0..t.data.len() {
            let gi = g.map(|gt| gt.data[i]).unwrap_or(0.0);
            st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * gi;
            st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = st.m[i] / bc1;
            let vhat = st.v[i] / bc2;
            t.data[i] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * t.data[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// Layer primitives
// ---------------------------------------------------------------------------

/// Numerically stable softmax; output strictly positive, sums to 1.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Given y = softmax(z) and dL/dy, return dL/dz.
pub fn softmax_backward(y: &[f64], gy: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
    y.iter().zip(gy).map(|(&yi, &gi)| yi * (gi - dot)).collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_backward(x: &[f64], g: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
        .collect()
}

/// y = W x + b with W stored [out, in].
#[allow(clippy::needless_range_loop)] // indexed math over parallel buffers
pub fn linear_forward(w: &Tensor, b: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
    if x.len() != in_dim {
        return Err(Error::ShapeMismatch {
            layer: "linear".into(),
            msg: format!("input {} vs weight columns {in_dim}", x.len()),
        });
    }
    let mut y = b.data.clone();
    for o in 0..out_dim {
        let row = &w.data[o * in_dim..(o + 1) * in_dim];
        let mut acc = 0.0;
        for i in 0..in_dim {
            acc += row[i] * x[i];
        }
        y[o] += acc;
    }
    Ok(y)
}

/// Accumulates dW, db into `grads` under `w_name`/`b_name`; returns dx.
#[allow(clippy::needless_range_loop)] // indexed math over parallel buffers
pub fn linear_backward(
    w: &Tensor,
    w_name: &str,
    b_name: &str,
    x: &[f64],
    gy: &[f64],
    grads: &mut Grads,
) -> Vec<f64> {
    let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
    let mut dw = vec![0.0; out_dim * in_dim];
    for o in 0..out_dim {
        for i in 0..in_dim {
            dw[o * in_dim + i] = gy[o] * x[i];
        }
    }
    grads.accum(w_name, &[out_dim, in_dim], &dw);
    grads.accum(b_name, &[out_dim], gy);
    let mut dx = vec![0.0; in_dim];
    for o in 0..out_dim {
        let row = &w.data[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            dx[i] += row[i] * gy[o];
        }
    }
    dx
}

pub fn mean_pool(xs: &[Vec<f64>]) -> Vec<f64> {
    debug_assert!(!xs.is_empty());
    let d = xs[0].len();
    let mut out = vec![0.0; d];
    for x in xs {
        for (o, v) in out.iter_mut().zip(x) {
            *o += v;
        }
    }
    let n = xs.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

pub fn mean_pool_backward(n: usize, g: &[f64]) -> Vec<f64> {
    g.iter().map(|&v| v / n as f64).collect()
}

/// Cache for the single-head scaled dot-product attention block.
pub struct AttnCache {
    xs: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    attn: Vec<Vec<f64>>,
}

/// Single-head scaled dot-product self-attention over a short sequence.
/// Weight tensors are [d, d]; no output projection, no layer norm.
#[allow(clippy::needless_range_loop)] // indexed math over parallel buffers
pub fn attention_forward(
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    xs: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, AttnCache)> {
    let d = wq.shape[0];
    let mut q = Vec::with_capacity(xs.len());
    let mut k = Vec::with_capacity(xs.len());
    let mut v = Vec::with_capacity(xs.len());
    for x in xs {
        q.push(linear_no_bias(wq, x)?);
        k.push(linear_no_bias(wk, x)?);
        v.push(linear_no_bias(wv, x)?);
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = Vec::with_capacity(xs.len());
    let mut ys = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let scores: Vec<f64> = (0..xs.len()).map(|j| scale * dot(&q[i], &k[j])).collect();
        let a = softmax(&scores);
        let mut y = vec![0.0; d];
        for (j, aj) in a.iter().enumerate() {
            for (yo, vv) in y.iter_mut().zip(&v[j]) {
                *yo += aj * vv;
            }
        }
        attn.push(a);
        ys.push(y);
    }
    Ok((
        ys,
        AttnCache {
            xs: xs.to_vec(),
            q,
            k,
            v,
            attn,
        },
    ))
}

/// Backward pass matching [`attention_forward`]; accumulates weight grads
/// and returns per-element input gradients.
#[allow(clippy::needless_range_loop)] // indexed math over parallel buffers
pub fn attention_backward(
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    names: [&str; 3],
    cache: &AttnCache,
    gys: &[Vec<f64>],
    grads: &mut Grads,
) -> Vec<Vec<f64>> {
    let n = cache.xs.len();
    let d = wq.shape[0];
    let scale = 1.0 / (d as f64).sqrt();

    let mut dq = vec![vec![0.0; d]; n];
    let mut dk = vec![vec![0.0; d]; n];
    let mut dv = vec![vec![0.0; d]; n];

    for i in 0..n {
        let mut da = vec![0.0; n];
        for j in 0..n {
            let aij = cache.attn[i][j];
            for (dvj, g) in dv[j].iter_mut().zip(&gys[i]) {
                *dvj += aij * g;
            }
            da[j] = dot(&gys[i], &cache.v[j]);
        }
        // softmax jacobian over row i
        let dot_ad: f64 = cache.attn[i].iter().zip(&da).map(|(a, d)| a * d).sum();
        for j in 0..n {
            let ds = cache.attn[i][j] * (da[j] - dot_ad);
            for t in 0..d {
                dq[i][t] += ds * scale * cache.k[j][t];
                dk[j][t] += ds * scale * cache.q[i][t];
            }
        }
    }

    let mut dxs = vec![vec![0.0; d]; n];
    let mut dwq = vec![0.0; d * d];
    let mut dwk = vec![0.0; d * d];
    let mut dwv = vec![0.0; d * d];
    for i in 0..n {
        let x = &cache.xs[i];
        for o in 0..d {
            for t in 0..d {
                dwq[o * d + t] += dq[i][o] * x[t];
                dwk[o * d + t] += dk[i][o] * x[t];
                dwv[o * d + t] += dv[i][o] * x[t];
            }
        }
        for t in 0..d {
            let mut acc = 0.0;
            for o in 0..d {
                acc += wq.data[o * d + t] * dq[i][o];
                acc += wk.data[o * d + t] * dk[i][o];
                acc += wv.data[o * d + t] * dv[i][o];
            }
            dxs[i][t] = acc;
        }
    }
    grads.accum(names[0], &[d, d], &dwq);
    grads.accum(names[1], &[d, d], &dwk);
    grads.accum(names[2], &[d, d], &dwv);
    dxs
}

#[allow(clippy::needless_range_loop)] // indexed math over parallel buffers
fn linear_no_bias(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
    if x.len() != in_dim {
        return Err(Error::ShapeMismatch {
            layer: "attention projection".into(),
            msg: format!("input {} vs weight columns {in_dim}", x.len()),
        });
    }
    let mut y = vec![0.0; out_dim];
    for o in 0..out_dim {
        let row = &w.data[o * in_dim..(o + 1) * in_dim];
        y[o] = dot(row, x);
    }
    Ok(y)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// MLP stacks
// ---------------------------------------------------------------------------

/// Layer kinds the substrate provides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Linear { input: usize, output: usize },
    Relu,
    Softmax,
    Embedding { vocab: usize, dim: usize },
    MeanPool,
    SelfAttention { dim: usize },
}

/// A named sequential stack of fully-connected layers (the workhorse MLP).
/// Linear parameters live in the store as `{prefix}.w{i}` / `{prefix}.b{i}`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
    /// Apply ReLU after the final linear too (used by set encoders).
    pub relu_output: bool,
}

pub struct MlpCache {
    xs: Vec<Vec<f64>>,
    zs: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: &[usize], relu_output: bool) -> Self {
        assert!(dims.len() >= 2);
        Self {
            prefix: prefix.into(),
            dims: dims.to_vec(),
            relu_output,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, zero_last: bool) {
        for i in 0..self.dims.len() - 1 {
            let (fan_in, fan_out) = (self.dims[i], self.dims[i + 1]);
            let last = i == self.dims.len() - 2;
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    if zero_last && last {
                        0.0
                    } else {
                        rng.random_range(-a..a)
                    }
                })
                .collect();
            store.insert(
                format!("{}.w{i}", self.prefix),
                Tensor::from_vec(&[fan_out, fan_in], data),
            );
            store.insert(format!("{}.b{i}", self.prefix), Tensor::zeros(&[fan_out]));
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let mut xs = Vec::new();
        let mut zs = Vec::new();
        let mut cur = x.to_vec();
        for i in 0..self.dims.len() - 1 {
            let w = store.get(&format!("{}.w{i}", self.prefix));
            let b = store.get(&format!("{}.b{i}", self.prefix));
            xs.push(cur.clone());
            let z = linear_forward(w, b, &cur).map_err(|e| match e {
                Error::ShapeMismatch { msg, .. } => Error::ShapeMismatch {
                    layer: format!("{}.w{i}", self.prefix),
                    msg,
                },
                other => other,
            })?;
            zs.push(z.clone());
            let activate = i < self.dims.len() - 2 || self.relu_output;
            cur = if activate { relu(&z) } else { z };
        }
        Ok((cur, MlpCache { xs, zs }))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &MlpCache,
        gout: &[f64],
        grads: &mut Grads,
    ) -> Vec<f64> {
        let n_layers = self.dims.len() - 1;
        let mut g = gout.to_vec();
        for i in (0..n_layers).rev() {
            let activate = i < n_layers - 1 || self.relu_output;
            if activate {
                g = relu_backward(&cache.zs[i], &g);
            }
            let w = store.get(&format!("{}.w{i}", self.prefix));
            g = linear_backward(
                w,
                &format!("{}.w{i}", self.prefix),
                &format!("{}.b{i}", self.prefix),
                &cache.xs[i],
                &g,
                grads,
            );
        }
        g
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Cross-entropy of a categorical distribution at `target`.
/// Returns (loss, gradient w.r.t. the logits that produced `dist`, clamped).
pub fn cross_entropy(dist: &[f64], target: usize) -> (f64, Vec<f64>, bool) {
    debug_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let p = dist[target];
    let clamped = p < 1e-12;
    let loss = -p.max(1e-12).ln();
    let mut grad = dist.to_vec();
    grad[target] -= 1.0;
    (loss, grad, clamped)
}

/// KL(p || q) with q clamped at 1e-12 and 0 ln 0 = 0.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            kl += pi * (pi / qi.max(1e-12)).ln();
        }
    }
    kl
}

/// Logistic sigmoid.
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary cross-entropy on a logistic output.
/// Returns (loss, gradient w.r.t. the pre-sigmoid logit).
pub fn binary_cross_entropy(prob: f64, label: f64) -> (f64, f64) {
    let p = prob.clamp(1e-12, 1.0 - 1e-12);
    let loss = -(label * p.ln() + (1.0 - label) * (1.0 - p).ln());
    (loss, prob - label)
}

/// Save a checkpoint plus a sidecar `<path>.meta.json` recording the
/// vocabulary hash, so models cannot be loaded against the wrong vocabulary.
pub fn save_checkpoint_with_meta(store: &ParamStore, path: &Path, vocab_hash: u64) -> Result<()> {
    store.save(path)?;
    let meta = serde_json::json!({ "vocab_hash": format!("{vocab_hash:016x}") });
    let meta_path = meta_path_for(path);
    std::fs::write(meta_path, serde_json::to_string(&meta)?)?;
    Ok(())
}

/// Load a checkpoint, verifying the sidecar vocabulary hash when expected.
pub fn load_checkpoint_checked(
    path: &Path,
    expected_vocab_hash: Option<u64>,
) -> Result<ParamStore> {
    if let Some(expected) = expected_vocab_hash {
        let meta_path = meta_path_for(path);
        let text = std::fs::read_to_string(&meta_path).map_err(|_| {
            Error::VocabMismatch(format!(
                "missing sidecar {} for vocabulary verification",
                meta_path.display()
            ))
        })?;
        let meta: serde_json::Value = serde_json::from_str(&text)?;
        let found = meta["vocab_hash"].as_str().unwrap_or_default().to_string();
        let want = format!("{expected:016x}");
        if found != want {
            return Err(Error::VocabMismatch(format!(
                "checkpoint {} was trained against vocabulary {found}, expected {want}",
                path.display()
            )));
        }
    }
    ParamStore::load(path)
}

fn meta_path_for(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

pub mod fdcheck {
    //! Central finite-difference gradient checking shared by unit tests and
    //! the acceptance suite.

    use super::*;

    pub const FD_EPS: f64 = 1e-4;
    pub const FD_REL_TOL: f64 = 1e-3;

    /// Relative error with denominator max(1e-8, |a|+|n|).
    pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
    }

    /// Check d loss / d params against central differences for every
    /// parameter the analytic gradient touched.
    pub fn check_param_grads(
        store: &mut ParamStore,
        grads: &Grads,
        loss_fn: impl FnMut(&ParamStore) -> f64,
    ) {
        check_param_grads_sampled(store, grads, loss_fn, usize::MAX);
    }

    /// Like [`check_param_grads`] but probes at most `max_per_tensor`
    /// evenly-strided elements of each tensor. A ReLU kink can bias one
    /// epsilon, so a mismatch is retried at eps/10 before failing.
    pub fn check_param_grads_sampled(
        store: &mut ParamStore,
        grads: &Grads,
        mut loss_fn: impl FnMut(&ParamStore) -> f64,
        max_per_tensor: usize,
    ) {
        let names: Vec<String> = grads.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let n_elems = store.get(&name).numel();
            let probes = n_elems.min(max_per_tensor);
            for k in 0..probes {
                let idx = k * n_elems / probes;
                let analytic = grads.get(&name).unwrap().data[idx];
                let mut ok = false;
                for eps in [FD_EPS, FD_EPS / 10.0] {
                    let orig = store.get(&name).data[idx];
                    store.get_mut(&name).data[idx] = orig + eps;
                    let up = loss_fn(store);
                    store.get_mut(&name).data[idx] = orig - eps;
                    let down = loss_fn(store);
                    store.get_mut(&name).data[idx] = orig;
                    let numeric = (up - down) / (2.0 * eps);
                    if rel_err(analytic, numeric) < FD_REL_TOL
                        || (analytic.abs() < 1e-8 && numeric.abs() < 1e-7)
                    {
                        ok = true;
                        break;
                    }
                    if eps == FD_EPS / 10.0 {
                        panic!(
                            "grad mismatch at {name}[{idx}]: analytic {analytic} vs numeric {numeric}"
                        );
                    }
                }
                assert!(ok);
            }
        }
    }
}
