//! Valence/arousal model: three fused backbones, per-dimension polarity heads
//! that gate exact ±1 outputs, and coupled regressors.

use candle_core::Tensor;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::config::ExperimentConfig;
use crate::dataio::DatasetSplit;
use crate::error::{Error, Result};
use crate::losses::{ccc_loss_with_grad, polarity_cross_entropy_with_grad, softmax_rows};
use crate::nn::{self, batches, images_to_tensor, ConvBackbone, Linear, Optim, ParamStore, TrainCurve};
use crate::seed;
use crate::types::{FeatureVector, FrameRecord, Image, Polarity, Prediction, PredictionSet, Task};

/// Interior outputs are kept this far inside ±1 so that only gating emits the
/// exact extremes.
pub const INTERIOR_MARGIN: f64 = 1e-6;

const EVAL_BATCH: usize = 64;

pub struct VaModel {
    pub store: ParamStore,
    backbones: Vec<ConvBackbone>,
    polarity_valence: Linear,
    polarity_arousal: Linear,
    valence_hidden: Linear,
    valence_out: Linear,
    arousal_hidden: Linear,
    arousal_out: Linear,
    config: ExperimentConfig,
    seed: u64,
}

/// Batched forward results. Regressor outputs are pre-gating.
pub struct VaBatch {
    pub fused: Tensor,
    pub polarity_valence: Tensor,
    pub polarity_arousal: Tensor,
    pub valence: Tensor,
    pub arousal: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaOutput {
    pub valence: f64,
    pub arousal: f64,
    pub gating: (Polarity, Polarity),
}

const BACKBONE_PREFIX: &str = "backbone";
const POLARITY_PREFIX: &str = "polarity_";
const REGRESSOR_PREFIXES: [&str; 2] = ["valence_head", "arousal_head"];

impl VaModel {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed, "init");
        let backbones = (0..config.n_backbones)
            .map(|k| {
                ConvBackbone::new(
                    &mut store,
                    &format!("{BACKBONE_PREFIX}{k}"),
                    config.image_size,
                    &config.backbone_channels[k],
                    config.backbone_feature_dims[k],
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fused: usize = backbones.iter().map(|b| b.feature_dim).sum();
        let h = config.head_hidden;
        Ok(Self {
            polarity_valence: Linear::zeros(&mut store, "polarity_valence", fused, 3)?,
            polarity_arousal: Linear::zeros(&mut store, "polarity_arousal", fused, 3)?,
            valence_hidden: Linear::new(&mut store, "valence_head.hidden", fused, h, &mut rng)?,
            valence_out: Linear::zeros(&mut store, "valence_head.out", h, 1)?,
            arousal_hidden: Linear::new(&mut store, "arousal_head.hidden", fused + h, h, &mut rng)?,
            arousal_out: Linear::zeros(&mut store, "arousal_head.out", h, 1)?,
            backbones,
            store,
            config: config.clone(),
            seed,
        })
    }

    pub fn fused_dim(&self) -> usize {
        self.backbones.iter().map(|b| b.feature_dim).sum()
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    fn fuse(&self, images: &Tensor) -> Result<Tensor> {
        let parts = self
            .backbones
            .iter()
            .map(|b| b.forward(images))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 1)?)
    }

    fn heads(&self, fused: Tensor) -> Result<VaBatch> {
        let valence_features = self.valence_hidden.forward(&fused)?.relu()?;
        let valence = self.valence_out.forward(&valence_features)?.tanh()?.squeeze(1)?;
        let coupled = Tensor::cat(&[&fused, &valence_features], 1)?;
        let arousal = self
            .arousal_out
            .forward(&self.arousal_hidden.forward(&coupled)?.relu()?)?
            .tanh()?
            .squeeze(1)?;
        Ok(VaBatch {
            polarity_valence: self.polarity_valence.forward(&fused)?,
            polarity_arousal: self.polarity_arousal.forward(&fused)?,
            valence,
            arousal,
            fused,
        })
    }

    /// `images` is `N × 3 × H × W`.
    pub fn forward_batch(&self, images: &Tensor) -> Result<VaBatch> {
        self.heads(self.fuse(images)?)
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.config.image_size;
        if image.dim() != (s, s, 3) {
            return Err(Error::Shape(format!("image {:?}, model expects ({s}, {s}, 3)", image.dim())));
        }
        Ok(())
    }

    pub fn fuse_features(&self, image: &Image) -> Result<FeatureVector> {
        self.check_image(image)?;
        let fused = self.fuse(&images_to_tensor(&[image])?)?;
        Ok(FeatureVector(fused.flatten_all()?.to_vec1::<f32>()?))
    }

    /// Valence and arousal polarity probabilities, ordered as [`Polarity::index`].
    pub fn predict_polarity(&self, fused: &FeatureVector) -> Result<([f64; 3], [f64; 3])> {
        if fused.dim() != self.fused_dim() {
            return Err(Error::Shape(format!(
                "fused vector has {} dims, model expects {}",
                fused.dim(),
                self.fused_dim()
            )));
        }
        let x = Tensor::from_slice(&fused.0, (1, fused.dim()), &nn::device())?;
        let v = softmax_rows(nn::to_array2(&self.polarity_valence.forward(&x)?)?.view());
        let a = softmax_rows(nn::to_array2(&self.polarity_arousal.forward(&x)?)?.view());
        Ok((probs3(&v, 0), probs3(&a, 0)))
    }

    pub fn forward_va(&self, image: &Image) -> Result<VaOutput> {
        self.check_image(image)?;
        Ok(self.forward_images(&[image])?[0])
    }

    fn forward_images(&self, images: &[&Image]) -> Result<Vec<VaOutput>> {
        let out = self.forward_batch(&images_to_tensor(images)?)?;
        let pv = softmax_rows(nn::to_array2(&out.polarity_valence)?.view());
        let pa = softmax_rows(nn::to_array2(&out.polarity_arousal)?.view());
        let v = nn::to_f64_vec(&out.valence)?;
        let a = nn::to_f64_vec(&out.arousal)?;
        Ok((0..images.len())
            .map(|i| {
                let gv = gate_decision(&probs3(&pv, i));
                let ga = gate_decision(&probs3(&pa, i));
                VaOutput {
                    valence: gated_value(gv, v[i]),
                    arousal: gated_value(ga, a[i]),
                    gating: (gv, ga),
                }
            })
            .collect())
    }

    pub fn predict(&self, split: &DatasetSplit) -> Result<PredictionSet> {
        let frames: Vec<&FrameRecord> = split.frames().collect();
        let mut set = PredictionSet::new(Task::Va);
        for chunk in frames.chunks(EVAL_BATCH) {
            let images: Vec<&Image> = chunk.iter().map(|f| &f.image).collect();
            for (f, o) in chunk.iter().zip(self.forward_images(&images)?) {
                set.insert(
                    &f.video_id,
                    f.frame_index,
                    Prediction::Va {
                        valence: o.valence,
                        arousal: o.arousal,
                    },
                )?;
            }
        }
        Ok(set)
    }

    pub fn to_checkpoint(&self, stage: &str) -> Result<Checkpoint> {
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            task: Task::Va,
            role: "va".into(),
            stage: stage.into(),
            config_hash: self.config.hash(),
            config: self.config.clone(),
            arch_id: None,
            seed: self.seed,
            params: self.store.snapshot()?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect(Task::Va, "va")?;
        let model = Self::new(&ckpt.config, ckpt.seed)?;
        model.store.restore(&ckpt.params)?;
        Ok(model)
    }
}

fn probs3(m: &Array2<f64>, row: usize) -> [f64; 3] {
    [m[[row, 0]], m[[row, 1]], m[[row, 2]]]
}

/// Argmax over polarity probabilities. Ties resolve to INTERIOR, then to the
/// negative extreme.
pub fn gate_decision(probs: &[f64; 3]) -> Polarity {
    let mut best = Polarity::Interior;
    for p in [Polarity::NegExtreme, Polarity::PosExtreme] {
        if probs[p.index()] > probs[best.index()] {
            best = p;
        }
    }
    best
}

/// Exact ±1 for extreme decisions, otherwise the regressor output kept
/// strictly inside (−1, 1).
pub fn gated_value(decision: Polarity, regressed: f64) -> f64 {
    match decision {
        Polarity::NegExtreme => -1.0,
        Polarity::PosExtreme => 1.0,
        Polarity::Interior => regressed.clamp(-1.0 + INTERIOR_MARGIN, 1.0 - INTERIOR_MARGIN),
    }
}

struct Labelled<'a> {
    frames: Vec<&'a FrameRecord>,
    valence: Vec<f64>,
    arousal: Vec<f64>,
    pol_valence: Vec<Polarity>,
    pol_arousal: Vec<Polarity>,
}

fn labelled(split: &DatasetSplit) -> Result<Labelled<'_>> {
    let mut out = Labelled {
        frames: Vec::new(),
        valence: Vec::new(),
        arousal: Vec::new(),
        pol_valence: Vec::new(),
        pol_arousal: Vec::new(),
    };
    for f in split.frames() {
        let Some(l) = f.va.filter(|l| !l.is_sentinel()) else {
            continue;
        };
        let p = l.polarity()?;
        out.frames.push(f);
        out.valence.push(l.valence);
        out.arousal.push(l.arousal);
        out.pol_valence.push(p.valence);
        out.pol_arousal.push(p.arousal);
    }
    if out.frames.is_empty() {
        return Err(Error::config("data", "VA training split has no labelled frames"));
    }
    Ok(out)
}

fn batch_images(data: &Labelled, idx: &[usize]) -> Result<Tensor> {
    let images: Vec<&Image> = idx.iter().map(|&i| &data.frames[i].image).collect();
    images_to_tensor(&images)
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Stage 1: trains the backbones and both polarity heads on the summed
/// three-way cross-entropies. Regressor heads are untouched.
pub fn train_polarity(model: &mut VaModel, split: &DatasetSplit, rng: &mut ChaCha8Rng) -> Result<TrainCurve> {
    let cfg = model.config.clone();
    let data = labelled(split)?;
    let mut curve = TrainCurve::default();
    for (name, labels) in [("valence", &data.pol_valence), ("arousal", &data.pol_arousal)] {
        if labels.iter().all(|p| *p == Polarity::Interior) {
            curve.warn(format!(
                "{name}: no extreme labels in the training split, polarity head only sees INTERIOR"
            ));
        }
    }
    let vars = model.store.vars_with_prefix(&[BACKBONE_PREFIX, POLARITY_PREFIX]);
    let mut opt = Optim::new(cfg.optimizer, vars, cfg.learning_rate)?;
    for _ in 0..cfg.polarity_epochs {
        let mut total = 0.0;
        for idx in batches(data.frames.len(), cfg.batch_size, 1, rng) {
            let out = model.forward_batch(&batch_images(&data, &idx)?)?;
            let lv = nn::to_array2(&out.polarity_valence)?;
            let la = nn::to_array2(&out.polarity_arousal)?;
            let (loss_v, gv) = polarity_cross_entropy_with_grad(lv.view(), &pick(&data.pol_valence, &idx))?;
            let (loss_a, ga) = polarity_cross_entropy_with_grad(la.view(), &pick(&data.pol_arousal, &idx))?;
            let grads = nn::backward_from(&[
                (&out.polarity_valence, gv.into_iter().collect()),
                (&out.polarity_arousal, ga.into_iter().collect()),
            ])?;
            opt.step(&grads)?;
            total += (loss_v.value + loss_a.value) * idx.len() as f64;
        }
        curve.epoch_losses.push(total / data.frames.len() as f64);
    }
    Ok(curve)
}

/// Stage 2: CCC loss per dimension on the batch's INTERIOR-labelled frames.
/// Backbones stay frozen unless `va_finetune_backbones` is set.
pub fn train_va(model: &mut VaModel, split: &DatasetSplit, rng: &mut ChaCha8Rng) -> Result<TrainCurve> {
    let cfg = model.config.clone();
    let data = labelled(split)?;
    if data.frames.len() < 2 {
        return Err(Error::config("batch_size", "CCC batches need at least 2 frames"));
    }
    let mut curve = TrainCurve::default();
    let mut prefixes = REGRESSOR_PREFIXES.to_vec();
    if cfg.va_finetune_backbones {
        prefixes.push(BACKBONE_PREFIX);
    }
    let mut opt = Optim::new(cfg.optimizer, model.store.vars_with_prefix(&prefixes), cfg.learning_rate)?;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut counted = 0usize;
        for idx in batches(data.frames.len(), cfg.batch_size, 2, rng) {
            if idx.len() < 2 {
                return Err(Error::config("batch_size", "CCC batches need at least 2 frames"));
            }
            let images = batch_images(&data, &idx)?;
            let out = if cfg.va_finetune_backbones {
                model.forward_batch(&images)?
            } else {
                model.heads(model.fuse(&images)?.detach())?
            };
            let mut terms = Vec::new();
            let mut batch_loss = 0.0;
            for (name, pred, targets, pols) in [
                ("valence", &out.valence, &data.valence, &data.pol_valence),
                ("arousal", &out.arousal, &data.arousal, &data.pol_arousal),
            ] {
                let interior: Vec<usize> = (0..idx.len())
                    .filter(|&j| pols[idx[j]] == Polarity::Interior)
                    .collect();
                if interior.len() < 2 {
                    curve.warn(format!("{name}: batch with fewer than 2 interior frames skipped"));
                    continue;
                }
                let all = nn::to_f64_vec(pred)?;
                let p: Vec<f64> = interior.iter().map(|&j| all[j]).collect();
                let t: Vec<f64> = interior.iter().map(|&j| targets[idx[j]]).collect();
                let (loss, g) = match ccc_loss_with_grad(&p, &t) {
                    Ok(x) => x,
                    Err(Error::DegenerateInput(msg)) => {
                        curve.warn(format!("{name} (epoch {epoch}): {msg}"));
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let mut grad = vec![0.0; idx.len()];
                for (&j, gj) in interior.iter().zip(g) {
                    grad[j] = gj;
                }
                batch_loss += loss.value;
                terms.push((pred, grad));
            }
            if terms.is_empty() {
                continue;
            }
            let grads = nn::backward_from(&terms)?;
            opt.step(&grads)?;
            total += batch_loss;
            counted += 1;
        }
        curve
            .epoch_losses
            .push(if counted == 0 { f64::NAN } else { total / counted as f64 });
    }
    Ok(curve)
}

/// Both training stages with the configured epoch counts.
pub fn train_va_model(
    config: &ExperimentConfig,
    split: &DatasetSplit,
) -> Result<(VaModel, TrainCurve, TrainCurve)> {
    let mut model = VaModel::new(config, config.seed)?;
    let mut rng = seed::rng(config.seed, "shuffle");
    let polarity = train_polarity(&mut model, split, &mut rng)?;
    let regression = train_va(&mut model, split, &mut rng)?;
    Ok((model, polarity, regression))
}
