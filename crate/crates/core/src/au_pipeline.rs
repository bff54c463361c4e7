//! Action-unit model: a shared frame backbone feeding three temporal
//! pipelines (transformer; resample + linear; resample + transformer) whose
//! logits are fused per frame.

use candle_core::{Tensor, Var};
use ndarray::Array2;

use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::config::{ExperimentConfig, FusionMode};
use crate::dataio::DatasetSplit;
use crate::error::{Error, Result};
use crate::losses::focal_loss_with_grad;
use crate::nn::{
    self, batches, images_to_tensor, ConvBackbone, Linear, Mode, Optim, ParamStore, TrainCurve, TransformerBlock,
    TransformerBlockConfig,
};
use crate::seed;
use crate::types::{FrameRecord, Image, Prediction, PredictionSet, Task, VideoSequence, N_AUS};

/// Linear-interpolation upsampling by `up` followed by stride-`down`
/// decimation, as a `T × T` matrix acting on the time axis.
pub fn resample_matrix(t: usize, up: usize, down: usize) -> Result<Array2<f64>> {
    if up == 0 || down == 0 {
        return Err(Error::config("resample_up", "resampling factors must be >= 1"));
    }
    let long = t * up;
    let out_len = long.div_ceil(down);
    if out_len != t {
        return Err(Error::config(
            "resample_down",
            format!("{t} frames resample to {out_len} with up {up} / down {down}"),
        ));
    }
    let mut m = Array2::zeros((t, t));
    for (row, j) in (0..long).step_by(down).enumerate() {
        // upsampled sample j sits at source position j / up; past the last
        // frame the final value is held
        let pos = j as f64 / up as f64;
        let i0 = (pos.floor() as usize).min(t - 1);
        let i1 = (i0 + 1).min(t - 1);
        let frac = pos - i0 as f64;
        m[[row, i0]] += 1.0 - frac;
        m[[row, i1]] += frac;
    }
    Ok(m)
}

/// Resamples a `T × D` feature sequence along time; the output keeps length `T`.
pub fn resample(features: &Array2<f64>, up: usize, down: usize) -> Result<Array2<f64>> {
    Ok(resample_matrix(features.nrows(), up, down)?.dot(features))
}

pub struct AuModel {
    pub store: ParamStore,
    backbone: ConvBackbone,
    pipeline1: (TransformerBlock, Linear),
    pipeline2: Linear,
    pipeline3: (TransformerBlock, Linear),
    fusion_weights: Option<Var>,
    config: ExperimentConfig,
    seed: u64,
}

/// Logits for a batch of windows, each `B × T × 12`.
pub struct AuForward {
    pub fused: Tensor,
    pub pipelines: [Tensor; 3],
}

impl AuModel {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed, "init");
        let backbone = ConvBackbone::new(
            &mut store,
            "backbone",
            config.image_size,
            &config.backbone_channels[0],
            config.backbone_feature_dims[0],
            &mut rng,
        )?;
        let d = backbone.feature_dim;
        let block = TransformerBlockConfig {
            layers: config.transformer_layers,
            heads: config.transformer_heads,
            model_dim: d,
            feedforward_dim: d * config.transformer_ff_mult,
            positional_encoding: config.positional_encoding,
        };
        let pipeline1 = (
            TransformerBlock::new(&mut store, "pipeline1.transformer", block, &mut rng)?,
            Linear::new_head(&mut store, "pipeline1.head", d, N_AUS, &mut rng)?,
        );
        let pipeline2 = Linear::new_head(&mut store, "pipeline2.head", d, N_AUS, &mut rng)?;
        let pipeline3 = (
            TransformerBlock::new(&mut store, "pipeline3.transformer", block, &mut rng)?,
            Linear::new_head(&mut store, "pipeline3.head", d, N_AUS, &mut rng)?,
        );
        let fusion_weights = match config.fusion {
            FusionMode::Mean => None,
            FusionMode::Learned => Some(store.constant("fusion.weights".into(), &[3], 0.0)?),
        };
        Ok(Self {
            store,
            backbone,
            pipeline1,
            pipeline2,
            pipeline3,
            fusion_weights,
            config: config.clone(),
            seed,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim
    }

    /// Backbone features of `B·T` images reshaped to `B × T × D`, with padded
    /// rows zeroed.
    fn features(&self, images: &Tensor, b: usize, t: usize, mask: &Tensor) -> Result<Tensor> {
        let d = self.backbone.feature_dim;
        let feats = self.backbone.forward(images)?.reshape((b, t, d))?;
        Ok(feats.broadcast_mul(&mask.unsqueeze(2)?)?)
    }

    /// Temporal pipelines over `B × T × D` features; `mask` is `B × T`.
    pub fn forward_features(&self, feats: &Tensor, mask: Option<&Tensor>, mode: &mut Mode) -> Result<AuForward> {
        let (b, t, _) = feats.dims3()?;
        let feats = mode.dropout(feats)?;
        let h1 = self.pipeline1.0.forward(&feats, mask, mode)?;
        let l1 = self.pipeline1.1.forward(&mode.dropout(&h1)?)?;
        let m = resample_matrix(t, self.config.resample_up, self.config.resample_down)?;
        let m: Vec<f32> = m.iter().map(|&v| v as f32).collect();
        let m = Tensor::from_vec(m, (1, t, t), feats.device())?
            .broadcast_as((b, t, t))?
            .contiguous()?;
        let resampled = m.matmul(&feats.contiguous()?)?;
        let l2 = self.pipeline2.forward(&resampled)?;
        let h3 = self.pipeline3.0.forward(&resampled, mask, mode)?;
        let l3 = self.pipeline3.1.forward(&mode.dropout(&h3)?)?;
        let fused = match &self.fusion_weights {
            None => fuse_mean(&l1, &l2, &l3)?,
            Some(w) => {
                let w = candle_nn::ops::softmax(w.as_tensor(), 0)?;
                let mut acc = l1.broadcast_mul(&w.get(0)?)?;
                acc = (acc + l2.broadcast_mul(&w.get(1)?)?)?;
                (acc + l3.broadcast_mul(&w.get(2)?)?)?
            }
        };
        Ok(AuForward {
            fused,
            pipelines: [l1, l2, l3],
        })
    }

    fn forward_windows(&self, windows: &[Window], mode: &mut Mode) -> Result<AuForward> {
        let t = self.config.sequence_length;
        let (images, mask) = stack_windows(windows, t, self.config.image_size)?;
        let feats = self.features(&images, windows.len(), t, &mask)?;
        self.forward_features(&feats, Some(&mask), mode)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            task: Task::Au,
            role: "au".into(),
            stage: "final".into(),
            config_hash: self.config.hash(),
            config: self.config.clone(),
            arch_id: None,
            seed: self.seed,
            params: self.store.snapshot()?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect(Task::Au, "au")?;
        let model = Self::new(&ckpt.config, ckpt.seed)?;
        model.store.restore(&ckpt.params)?;
        Ok(model)
    }
}

/// Unweighted mean of the pipeline logits, `(l1 + l2 + l3) · (1/3)`.
pub fn fuse_mean(l1: &Tensor, l2: &Tensor, l3: &Tensor) -> Result<Tensor> {
    Ok(((l1 + l2)? + l3)?.affine(1.0 / 3.0, 0.0)?)
}

/// Consecutive frames of one video; at most `sequence_length` long.
#[derive(Debug, Clone)]
pub struct Window<'a> {
    pub frames: Vec<&'a FrameRecord>,
}

/// Non-overlapping windows of length `t` covering every frame once.
pub fn tile_windows(seq: &VideoSequence, t: usize) -> Vec<Window<'_>> {
    seq.frames
        .chunks(t.max(1))
        .map(|c| Window { frames: c.iter().collect() })
        .collect()
}

fn stack_windows(windows: &[Window], t: usize, image_size: usize) -> Result<(Tensor, Tensor)> {
    let blank = Image::zeros((image_size, image_size, 3));
    let mut images: Vec<&Image> = Vec::with_capacity(windows.len() * t);
    let mut mask = Vec::with_capacity(windows.len() * t);
    for w in windows {
        if w.frames.len() > t {
            return Err(Error::Shape(format!("window of {} frames exceeds {t}", w.frames.len())));
        }
        for i in 0..t {
            match w.frames.get(i) {
                Some(f) => {
                    images.push(&f.image);
                    mask.push(1f32);
                }
                None => {
                    images.push(&blank);
                    mask.push(0.0);
                }
            }
        }
    }
    let mask = Tensor::from_vec(mask, (windows.len(), t), &nn::device())?;
    Ok((images_to_tensor(&images)?, mask))
}

/// `T × D` backbone features of one window in eval mode, and the validity of
/// each row (padded rows are zero).
pub fn extract_sequence_features(model: &AuModel, window: &Window) -> Result<(Array2<f64>, Vec<bool>)> {
    let t = model.config.sequence_length;
    let (images, mask) = stack_windows(std::slice::from_ref(window), t, model.config.image_size)?;
    let feats = model.features(&images, 1, t, &mask)?.squeeze(0)?;
    let valid = (0..t).map(|i| i < window.frames.len()).collect();
    Ok((nn::to_array2(&feats)?, valid))
}

fn sigmoid_rows(fused: &Tensor) -> Result<Array2<f64>> {
    let (b, t, k) = fused.dims3()?;
    let probs = candle_nn::ops::sigmoid(fused)?.reshape((b * t, k))?;
    nn::to_array2(&probs)
}

/// Focal loss on the sigmoid of the fused logits, SGD/Adam per config, with
/// dropout masks drawn from the seed's `dropout` stream.
pub fn train_au(model: &mut AuModel, split: &DatasetSplit) -> Result<TrainCurve> {
    let cfg = model.config.clone();
    let t = cfg.sequence_length;
    let windows: Vec<Window> = split
        .sequences
        .iter()
        .flat_map(|s| tile_windows(s, t))
        .filter(|w| w.frames.iter().any(|f| f.aus.is_some()))
        .collect();
    if windows.is_empty() {
        return Err(Error::config("data", "AU training split is empty"));
    }
    let mut opt = Optim::new(cfg.optimizer, model.store.vars(), cfg.learning_rate)?;
    let mut shuffle = seed::rng(model.seed, "shuffle");
    let mut dropout_rng = seed::rng(model.seed, "dropout");
    let mut curve = TrainCurve::default();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut weight = 0usize;
        for idx in batches(windows.len(), cfg.batch_size, 1, &mut shuffle) {
            let batch: Vec<Window> = idx.iter().map(|&i| windows[i].clone()).collect();
            let mut mode = Mode::Train {
                rng: &mut dropout_rng,
                dropout: cfg.dropout,
            };
            let out = model.forward_windows(&batch, &mut mode)?;
            let probs = candle_nn::ops::sigmoid(&out.fused)?;
            let (labels, mask) = window_targets(&batch, t);
            let p = sigmoid_rows(&out.fused)?;
            let (loss, grad) = match focal_loss_with_grad(p.view(), labels.view(), mask.view(), cfg.focal_alpha, cfg.focal_gamma) {
                Ok(x) => x,
                Err(Error::DegenerateInput(msg)) => {
                    curve.warn(format!("epoch {epoch}: {msg}"));
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !loss.value.is_finite() {
                return Err(Error::Training(format!("non-finite AU loss at epoch {epoch}")));
            }
            let grads = nn::backward_from(&[(&probs, grad.into_iter().collect())])?;
            opt.step(&grads)?;
            let cells = mask.iter().filter(|&&m| m == 1.0).count();
            total += loss.value * cells as f64;
            weight += cells;
        }
        curve
            .epoch_losses
            .push(if weight == 0 { f64::NAN } else { total / weight as f64 });
    }
    Ok(curve)
}

/// Targets and loss mask, `(B·T) × 12`; padded rows and unannotated cells are masked.
fn window_targets(windows: &[Window], t: usize) -> (Array2<f64>, Array2<f64>) {
    let mut labels = Array2::zeros((windows.len() * t, N_AUS));
    let mut mask = Array2::zeros((windows.len() * t, N_AUS));
    for (b, w) in windows.iter().enumerate() {
        for (i, f) in w.frames.iter().enumerate() {
            if let Some(a) = &f.aus {
                let row = b * t + i;
                for (j, (y, m)) in a.targets().iter().zip(a.mask()).enumerate() {
                    labels[[row, j]] = *y;
                    mask[[row, j]] = m;
                }
            }
        }
    }
    (labels, mask)
}

pub fn train_au_model(config: &ExperimentConfig, split: &DatasetSplit) -> Result<(AuModel, TrainCurve)> {
    let mut model = AuModel::new(config, config.seed)?;
    let curve = train_au(&mut model, split)?;
    Ok((model, curve))
}

/// Per-frame probabilities and decisions (probability ≥ `threshold` is
/// positive) over non-overlapping windows; padded positions are dropped.
pub fn predict_au(model: &AuModel, split: &DatasetSplit, threshold: f64) -> Result<PredictionSet> {
    let t = model.config.sequence_length;
    let mut set = PredictionSet::new(Task::Au);
    for seq in &split.sequences {
        for w in tile_windows(seq, t) {
            let out = model.forward_windows(std::slice::from_ref(&w), &mut Mode::Eval)?;
            let probs = sigmoid_rows(&out.fused)?;
            for (i, f) in w.frames.iter().enumerate() {
                let mut probabilities = [0.0; N_AUS];
                let mut decisions = [0u8; N_AUS];
                for j in 0..N_AUS {
                    probabilities[j] = probs[[i, j]];
                    decisions[j] = u8::from(probs[[i, j]] >= threshold);
                }
                set.insert(
                    &f.video_id,
                    f.frame_index,
                    Prediction::Au {
                        probabilities,
                        decisions,
                    },
                )?;
            }
        }
    }
    Ok(set)
}
