//! Small transformer building blocks over candle tensors.
//!
//! Parameters live in a [`ParamStore`] so that every trainable tensor is
//! seeded from this crate's own random streams and can be grouped into
//! optimizer partitions.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Large negative additive bias used for masked attention logits.
const MASKED: f64 = -1e9;

/// Named trainable tensors of one parameter partition.
#[derive(Debug, Clone)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

/// Deep copy of a store's values.
#[derive(Debug, Clone)]
pub struct Snapshot(BTreeMap<String, Tensor>);

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            device,
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_owned(), var);
        Ok(handle)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.insert(name, t)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::ones(shape, self.dtype, &self.device)?;
        self.insert(name, t)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().copy()?);
        }
        Ok(Snapshot(out))
    }

    pub fn restore(&self, snap: &Snapshot) -> Result<()> {
        for (k, v) in &self.vars {
            let t = snap
                .0
                .get(k)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {k}")))?;
            v.set(t)?;
        }
        Ok(())
    }

    /// Exports values under `prefix.name`.
    pub fn export(&self, prefix: &str, out: &mut HashMap<String, Tensor>) {
        for (k, v) in &self.vars {
            out.insert(format!("{prefix}.{k}"), v.as_tensor().clone());
        }
    }

    /// Overwrites values from `prefix.name` entries, checking shapes.
    pub fn import(&self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.vars {
            let key = format!("{prefix}.{k}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {key}")))?;
            if t.dims() != v.dims() {
                return Err(Error::CheckpointMismatch(format!(
                    "{key} has shape {:?}, expected {:?}",
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

impl Snapshot {
    /// Exact equality of every value.
    pub fn bit_equal(&self, other: &Snapshot) -> Result<bool> {
        if self.0.len() != other.0.len() {
            return Ok(false);
        }
        for (k, a) in &self.0 {
            let Some(b) = other.0.get(k) else {
                return Ok(false);
            };
            if a.dims() != b.dims() {
                return Ok(false);
            }
            let a: Vec<f64> = a.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            let b: Vec<f64> = b.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }
}

/// Forward-pass context: train/eval switch and the dropout stream.
pub struct Ctx {
    train: bool,
    rng: RefCell<Option<Rng>>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: RefCell::new(None),
        }
    }

    pub fn train(rng: Rng) -> Self {
        Self {
            train: true,
            rng: RefCell::new(Some(rng)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn dropout(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.train || p <= 0.0 {
            return Ok(x.clone());
        }
        let mut guard = self.rng.borrow_mut();
        let rng = guard.as_mut().expect("training context carries a rng");
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale as f32 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let std = (2.0 / (d_in + d_out) as f64).sqrt();
        let weight = store.normal(&format!("{name}.weight"), &[d_out, d_in], std, rng)?;
        let bias = if bias {
            Some(store.zeros(&format!("{name}.bias"), &[d_out])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let d_in = dims[dims.len() - 1];
        let rows = x.elem_count() / d_in.max(1);
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().expect("at least one dimension") = self.weight.dims()[0];
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?.reshape(out_dims)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.ones(&format!("{name}.gain"), &[d])?,
            bias: store.zeros(&format!("{name}.bias"), &[d])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::layer_norm_slow(x, &self.gain, &self.bias, 1e-5)?)
    }
}

/// Gathers rows of a `(V, d)` table for `(B, T)` ids.
pub fn lookup(table: &Tensor, ids: &Tensor) -> Result<Tensor> {
    let (b, t) = ids.dims2()?;
    let d = table.dim(1)?;
    Ok(table.index_select(&ids.flatten_all()?, 0)?.reshape((b, t, d))?)
}

/// Sinusoidal position table of shape `(len, d)`.
pub fn sinusoidal(len: usize, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f64; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::from_vec(data, (len, d), device)?.to_dtype(dtype)?)
}

/// Additive key-padding bias `(B, 1, 1, T)` from a `(B, T)` 0/1 mask.
pub fn padding_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, t) = mask.dims2()?;
    Ok(mask.affine(-MASKED, MASKED)?.reshape((b, 1, 1, t))?)
}

/// Additive causal bias `(1, 1, T, T)`: position `i` sees keys `j ≤ i`.
pub fn causal_bias(t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..t * t)
        .map(|idx| if idx % t > idx / t { MASKED } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(data, (1, 1, t, t), device)?.to_dtype(dtype)?)
}

/// Mean over positions with a `(B, T)` 0/1 mask: `(B, T, d) → (B, d)`.
pub fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let weights = mask.unsqueeze(2)?;
    let sum = x.broadcast_mul(&weights)?.sum(1)?;
    let count = mask.sum_keepdim(1)?;
    Ok(sum.broadcast_div(&count)?)
}

#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dropout: f64,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.d_model % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model = {}",
                cfg.heads, cfg.d_model
            )));
        }
        let d = cfg.d_model;
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng)?,
            heads: cfg.heads,
            dropout: cfg.dropout,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `bias` must broadcast to `(B, heads, Tq, Tk)`.
    pub fn forward(&self, query: &Tensor, memory: &Tensor, bias: Option<&Tensor>, ctx: &Ctx) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(memory)?)?;
        let v = self.split_heads(&self.v.forward(memory)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let attn = ctx.dropout(&attn, self.dropout)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, d))?;
        self.out.forward(&y)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
    dropout: f64,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), cfg.d_model, cfg.ffn, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), cfg.ffn, cfg.d_model, true, rng)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = ctx.dropout(&self.up.forward(x)?.relu()?, self.dropout)?;
        self.down.forward(&h)
    }
}

/// Post-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    ff: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
    dropout: f64,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg, rng)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>, ctx: &Ctx) -> Result<Tensor> {
        let a = self.attn.forward(x, x, bias, ctx)?;
        let x = self.norm1.forward(&(x + ctx.dropout(&a, self.dropout)?)?)?;
        let f = self.ff.forward(&x, ctx)?;
        self.norm2.forward(&(x + ctx.dropout(&f, self.dropout)?)?)
    }
}

/// Post-norm decoder block: causal self-attention, cross-attention, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ff: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
    norm3: LayerNorm,
    dropout: f64,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), cfg, rng)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), cfg, rng)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), cfg.d_model)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        memory: &Tensor,
        self_bias: &Tensor,
        memory_bias: Option<&Tensor>,
        ctx: &Ctx,
    ) -> Result<Tensor> {
        let a = self.self_attn.forward(x, x, Some(self_bias), ctx)?;
        let x = self.norm1.forward(&(x + ctx.dropout(&a, self.dropout)?)?)?;
        let c = self.cross_attn.forward(&x, memory, memory_bias, ctx)?;
        let x = self.norm2.forward(&(x + ctx.dropout(&c, self.dropout)?)?)?;
        let f = self.ff.forward(&x, ctx)?;
        self.norm3.forward(&(x + ctx.dropout(&f, self.dropout)?)?)
    }
}

/// Row-major `Vec<f64>` view of any float tensor.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
}
