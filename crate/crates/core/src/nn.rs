//! Small network building blocks over candle tensors.
//!
//! Parameters are initialized from explicit seeded RNGs and dropout masks are
//! drawn from the caller's RNG, so a forward/backward pass is a deterministic
//! function of the seed.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW, SGD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::OptimizerKind;
use crate::error::{Error, Result};
use crate::types::Image;

pub fn device() -> Device {
    Device::Cpu
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn add(&mut self, name: String, values: Vec<f32>, shape: &[usize]) -> Result<Var> {
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Shape(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &device())?)?;
        self.entries.push((name, var.clone()));
        Ok(var)
    }

    /// Uniform in ±`bound`.
    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| rng.random_range(-bound..=bound) as f32)
            .collect();
        self.add(name, values, shape)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f32) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.add(name, vec![value; n], shape)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.entries
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Overwrites one parameter; the shape must match.
    pub fn set(&self, name: &str, values: &[f32]) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Shape(format!("no parameter `{name}`")))?;
        let t = Tensor::from_slice(values, var.shape(), &device())?;
        var.set(&t)?;
        Ok(())
    }

    pub fn snapshot(&self) -> Result<Vec<NamedTensor>> {
        self.entries
            .iter()
            .map(|(name, var)| {
                Ok(NamedTensor {
                    name: name.clone(),
                    shape: var.dims().to_vec(),
                    data: var.as_tensor().flatten_all()?.to_vec1::<f32>()?,
                })
            })
            .collect()
    }

    pub fn restore(&self, params: &[NamedTensor]) -> Result<()> {
        if params.len() != self.entries.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model has {}",
                params.len(),
                self.entries.len()
            )));
        }
        for p in params {
            let var = self
                .get(&p.name)
                .ok_or_else(|| Error::Shape(format!("unexpected parameter `{}`", p.name)))?;
            if var.dims() != p.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "`{}`: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    p.shape,
                    var.dims()
                )));
            }
            self.set(&p.name, &p.data)?;
        }
        Ok(())
    }
}

/// Forward-pass mode. Training carries the RNG used for dropout masks.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng, dropout: f64 },
}

impl Mode<'_> {
    pub fn dropout(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            Mode::Eval => Ok(x.clone()),
            Mode::Train { dropout, .. } if *dropout == 0.0 => Ok(x.clone()),
            Mode::Train { rng, dropout } => {
                let keep = 1.0 - *dropout;
                let scale = (1.0 / keep) as f32;
                let mask: Vec<f32> = (0..x.elem_count())
                    .map(|_| if rng.random_bool(keep) { scale } else { 0.0 })
                    .collect();
                let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
                Ok(x.mul(&mask)?)
            }
        }
    }
}

/// Affine map applied to the last dimension; weight is stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, dim_in: usize, dim_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = (6.0 / dim_in as f64).sqrt();
        Ok(Self {
            weight: store.uniform(format!("{name}.weight"), &[dim_in, dim_out], bound, rng)?,
            bias: store.constant(format!("{name}.bias"), &[dim_out], 0.0)?,
        })
    }

    /// Weights in ±1/√in, suited to output layers without a following ReLU.
    pub fn new_head(store: &mut ParamStore, name: &str, dim_in: usize, dim_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = (1.0 / dim_in as f64).sqrt();
        Ok(Self {
            weight: store.uniform(format!("{name}.weight"), &[dim_in, dim_out], bound, rng)?,
            bias: store.constant(format!("{name}.bias"), &[dim_out], 0.0)?,
        })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, dim_in: usize, dim_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(format!("{name}.weight"), &[dim_in, dim_out], 0.0)?,
            bias: store.constant(format!("{name}.bias"), &[dim_out], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?)
    }

    pub fn dim_out(&self) -> usize {
        self.bias.dims()[0]
    }
}

/// Stack of 3×3 conv → ReLU → 2×2 max-pool stages, flattened and projected
/// to a `feature_dim` ReLU feature vector.
#[derive(Debug, Clone)]
pub struct ConvBackbone {
    convs: Vec<(Var, Var)>,
    proj: Linear,
    pub feature_dim: usize,
}

impl ConvBackbone {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        image_size: usize,
        widths: &[usize],
        feature_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(widths.len());
        let mut c_in = 3;
        let mut side = image_size;
        for (i, &c_out) in widths.iter().enumerate() {
            let bound = (6.0 / (c_in * 9) as f64).sqrt();
            let w = store.uniform(format!("{name}.conv{i}.weight"), &[c_out, c_in, 3, 3], bound, rng)?;
            let b = store.constant(format!("{name}.conv{i}.bias"), &[c_out], 0.0)?;
            convs.push((w, b));
            c_in = c_out;
            side /= 2;
        }
        if side == 0 {
            return Err(Error::config("backbone_channels", "too many pooling stages for the image size"));
        }
        let proj = Linear::new(store, &format!("{name}.proj"), c_in * side * side, feature_dim, rng)?;
        Ok(Self {
            convs,
            proj,
            feature_dim,
        })
    }

    /// `images` is `N × 3 × H × W`; returns `N × feature_dim`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        for (w, b) in &self.convs {
            x = x.conv2d(w.as_tensor(), 1, 1, 1, 1)?;
            let c = b.dims()[0];
            x = x.broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)?.relu()?;
            x = x.max_pool2d(2)?;
        }
        let x = x.flatten_from(1)?;
        Ok(self.proj.forward(&x)?.relu()?)
    }
}

/// Layer normalization over the last dimension with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.constant(format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerBlockConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub feedforward_dim: usize,
    pub positional_encoding: bool,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

/// Post-norm transformer encoder with optional sinusoidal positions added at
/// the block input.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    layers: Vec<EncoderLayer>,
    pub config: TransformerBlockConfig,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, config: TransformerBlockConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = config.model_dim;
        if config.heads == 0 || !d.is_multiple_of(config.heads) {
            return Err(Error::config(
                "transformer_heads",
                format!("model dim {d} not divisible by {} heads", config.heads),
            ));
        }
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                Ok(EncoderLayer {
                    q: Linear::new_head(store, &format!("{p}.q"), d, d, rng)?,
                    k: Linear::new_head(store, &format!("{p}.k"), d, d, rng)?,
                    v: Linear::new_head(store, &format!("{p}.v"), d, d, rng)?,
                    out: Linear::new_head(store, &format!("{p}.out"), d, d, rng)?,
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d)?,
                    ff1: Linear::new(store, &format!("{p}.ff1"), d, config.feedforward_dim, rng)?,
                    ff2: Linear::new_head(store, &format!("{p}.ff2"), config.feedforward_dim, d, rng)?,
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, config })
    }

    /// `x` is `B × T × D`; `key_mask` is `B × T` with 1 for valid positions.
    pub fn forward(&self, x: &Tensor, key_mask: Option<&Tensor>, mode: &mut Mode) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let mut h = x.clone();
        if self.config.positional_encoding {
            let pe = sinusoidal_encoding(t, d)?;
            h = h.broadcast_add(&pe)?;
        }
        let heads = self.config.heads;
        let dh = d / heads;
        let bias = match key_mask {
            Some(m) => Some(((m.ones_like()? - m)? * -1e9)?.reshape((b, 1, 1, t))?),
            None => None,
        };
        for layer in &self.layers {
            let split = |y: Tensor| -> Result<Tensor> {
                Ok(y.reshape((b, t, heads, dh))?.transpose(1, 2)?.contiguous()?)
            };
            let q = split(layer.q.forward(&h)?)?;
            let k = split(layer.k.forward(&h)?)?;
            let v = split(layer.v.forward(&h)?)?;
            let mut scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
            if let Some(bias) = &bias {
                scores = scores.broadcast_add(bias)?;
            }
            let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
            let ctx = attn
                .matmul(&v)?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((b, t, d))?;
            let attended = mode.dropout(&layer.out.forward(&ctx)?)?;
            h = layer.norm1.forward(&(h + attended)?)?;
            let ff = layer.ff2.forward(&layer.ff1.forward(&h)?.relu()?)?;
            let ff = mode.dropout(&ff)?;
            h = layer.norm2.forward(&(h + ff)?)?;
        }
        Ok(h)
    }
}

/// `T × D` sinusoidal position table.
pub fn sinusoidal_encoding(t: usize, d: usize) -> Result<Tensor> {
    let mut table = vec![0f32; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            table[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    Ok(Tensor::from_vec(table, (t, d), &device())?)
}

/// Stacks HWC images into an `N × 3 × H × W` tensor.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("no images to stack".into()));
    };
    let (h, w, c) = first.dim();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.dim() != (h, w, c) {
            return Err(Error::Shape(format!("image {:?} vs {:?}", img.dim(), (h, w, c))));
        }
        data.extend(img.iter().copied());
    }
    let t = Tensor::from_vec(data, (images.len(), h, w, c), &device())?;
    Ok(t.permute((0, 3, 1, 2))?.contiguous()?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn to_array2(t: &Tensor) -> Result<ndarray::Array2<f64>> {
    let (r, c) = t.dims2()?;
    ndarray::Array2::from_shape_vec((r, c), to_f64_vec(t)?).map_err(|e| Error::Shape(e.to_string()))
}

/// Backpropagates a loss gradient computed outside the graph: returns the
/// parameter gradients of `Σ output ⊙ grad`.
pub fn backward_from(terms: &[(&Tensor, Vec<f64>)]) -> Result<GradStore> {
    let mut total: Option<Tensor> = None;
    for (output, grad) in terms {
        let g: Vec<f32> = grad.iter().map(|&v| v as f32).collect();
        let g = Tensor::from_vec(g, output.shape(), output.device())?;
        let s = output.mul(&g)?.sum_all()?;
        total = Some(match total {
            Some(t) => (t + s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::Shape("no gradient terms".into()))?;
    Ok(total.backward()?)
}

pub enum Optim {
    Adam(AdamW),
    Sgd(SGD),
}

impl Optim {
    pub fn new(kind: OptimizerKind, vars: Vec<Var>, lr: f64) -> Result<Self> {
        Ok(match kind {
            // decoupled weight decay of zero reduces AdamW to Adam
            OptimizerKind::Adam => Optim::Adam(AdamW::new(
                vars,
                ParamsAdamW {
                    lr,
                    weight_decay: 0.0,
                    ..ParamsAdamW::default()
                },
            )?),
            OptimizerKind::Sgd => Optim::Sgd(SGD::new(vars, lr)?),
        })
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        match self {
            Optim::Adam(o) => o.step(grads)?,
            Optim::Sgd(o) => o.step(grads)?,
        }
        Ok(())
    }
}

/// Shuffled mini-batches of `0..n`; a trailing batch smaller than `min_len`
/// is merged into its predecessor.
pub fn batches(n: usize, batch_size: usize, min_len: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_len) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

/// Per-epoch training losses plus any degenerate-input warnings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    pub epoch_losses: Vec<f64>,
    /// Per-epoch validation metric, when a validation split is monitored.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub val_metric: Vec<f64>,
    pub warnings: Vec<String>,
}

impl TrainCurve {
    pub fn warn(&mut self, message: String) {
        log::warn!("{message}");
        if !self.warnings.contains(&message) {
            self.warnings.push(message);
        }
    }
}
