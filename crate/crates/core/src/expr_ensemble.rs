//! Expression ensemble: bootstrap-trained sub-classifiers with distinct
//! backbones, the optional threshold rule for class 7, and a parameter-free
//! priority/majority vote over their decisions.

use candle_core::Tensor;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::config::{ExperimentConfig, ExprScheme};
use crate::dataio::{augment, AugmentationConfig, DatasetSplit};
use crate::error::{Error, Result};
use crate::losses::{composite_classification_loss_with_grad, softmax_rows};
use crate::metrics::f1_final_expr;
use crate::nn::{self, batches, images_to_tensor, ConvBackbone, Linear, Optim, ParamStore, TrainCurve};
use crate::seed;
use crate::types::{FrameRecord, Image, Prediction, PredictionSet, Task, EXPR_OTHER, N_EXPR_CLASSES};

/// Priority among the classes that override the majority vote, highest first.
pub const PRIORITY: [usize; 4] = [2, 3, 5, 1];

const EVAL_BATCH: usize = 64;

pub struct SubClassifier {
    pub store: ParamStore,
    backbone: ConvBackbone,
    head: Linear,
    pub arch_id: usize,
    pub seed: u64,
    config: ExperimentConfig,
}

pub fn head_size(scheme: ExprScheme) -> usize {
    match scheme {
        ExprScheme::SevenAsClass => N_EXPR_CLASSES,
        ExprScheme::SevenByThreshold => N_EXPR_CLASSES - 1,
    }
}

impl SubClassifier {
    pub fn new(config: &ExperimentConfig, arch_id: usize, seed: u64) -> Result<Self> {
        if arch_id >= config.backbone_channels.len() {
            return Err(Error::config(
                "backbone_channels",
                format!("no backbone variant {arch_id}"),
            ));
        }
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed, "init");
        let backbone = ConvBackbone::new(
            &mut store,
            "backbone",
            config.image_size,
            &config.backbone_channels[arch_id],
            config.backbone_feature_dims[arch_id],
            &mut rng,
        )?;
        let head = Linear::new_head(
            &mut store,
            "head",
            backbone.feature_dim,
            head_size(config.expr_scheme),
            &mut rng,
        )?;
        Ok(Self {
            store,
            backbone,
            head,
            arch_id,
            seed,
            config: config.clone(),
        })
    }

    pub fn scheme(&self) -> ExprScheme {
        self.config.expr_scheme
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.backbone.forward(images)?)
    }

    /// Softmax rows over the head's classes.
    pub fn probabilities(&self, images: &[&Image]) -> Result<Array2<f64>> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            let logits = nn::to_array2(&self.logits(&images_to_tensor(chunk)?)?)?;
            rows.push(softmax_rows(logits.view()));
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            task: Task::Expr,
            role: "expr_sub".into(),
            stage: "best_val".into(),
            config_hash: self.config.hash(),
            config: self.config.clone(),
            arch_id: Some(self.arch_id),
            seed: self.seed,
            params: self.store.snapshot()?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect(Task::Expr, "expr_sub")?;
        let arch_id = ckpt.arch_id.ok_or_else(|| Error::IncompatibleCheckpoint {
            path: Default::default(),
            reason: "ensemble member without arch_id".into(),
        })?;
        let model = Self::new(&ckpt.config, arch_id, ckpt.seed)?;
        model.store.restore(&ckpt.params)?;
        Ok(model)
    }
}

/// Turns one row of head probabilities into a decision and an 8-class
/// probability vector. Under the threshold scheme class 7 carries probability
/// 0 and is chosen when the top probability is below `tau`.
pub fn decide(probs: &[f64], scheme: ExprScheme, tau: f64) -> (usize, [f64; N_EXPR_CLASSES]) {
    let mut full = [0.0; N_EXPR_CLASSES];
    full[..probs.len()].copy_from_slice(probs);
    let (arg, max) = probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    let class = match scheme {
        ExprScheme::SevenAsClass => arg,
        ExprScheme::SevenByThreshold if max >= tau => arg,
        ExprScheme::SevenByThreshold => EXPR_OTHER,
    };
    (class, full)
}

pub fn predict_sub(model: &SubClassifier, image: &Image, tau: f64) -> Result<(usize, [f64; N_EXPR_CLASSES])> {
    let probs = model.probabilities(&[image])?;
    Ok(decide(probs.row(0).as_slice().expect("contiguous"), model.scheme(), tau))
}

/// Frames drawn with replacement; `use_all` returns every frame once in split order.
pub fn bootstrap_sample(
    split: &DatasetSplit,
    fraction: f64,
    use_all: bool,
    seed: u64,
) -> Result<Vec<&FrameRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("bootstrap_fraction", format!("{fraction} not in (0, 1]")));
    }
    let frames: Vec<&FrameRecord> = split.frames().collect();
    if use_all {
        return Ok(frames);
    }
    let n = ((fraction * frames.len() as f64).round() as usize).max(1);
    let mut rng = seed::rng(seed, "bootstrap");
    Ok((0..n).map(|_| frames[rng.random_range(0..frames.len())]).collect())
}

fn training_class(frame: &FrameRecord, scheme: ExprScheme) -> Option<usize> {
    let c = frame.expr?.class()?;
    (scheme == ExprScheme::SevenAsClass || c != EXPR_OTHER).then_some(c)
}

/// Predicted classes for `frames`, for monitoring and evaluation.
pub fn decisions_for(model: &SubClassifier, frames: &[&FrameRecord], tau: f64) -> Result<Vec<usize>> {
    let images: Vec<&Image> = frames.iter().map(|f| &f.image).collect();
    let probs = model.probabilities(&images)?;
    Ok(probs
        .rows()
        .into_iter()
        .map(|r| decide(r.as_slice().expect("contiguous"), model.scheme(), tau).0)
        .collect())
}

fn expr_labels(frames: &[&FrameRecord]) -> Vec<usize> {
    frames.iter().filter_map(|f| f.expr.and_then(|l| l.class())).collect()
}

/// Trains one member on `train` with CE + λ·Dice, keeping the parameters of
/// the epoch with the best validation F1-final when `val` is given.
pub fn train_subclassifier(
    train: &[&FrameRecord],
    val: Option<&[&FrameRecord]>,
    config: &ExperimentConfig,
    arch_id: usize,
    seed: u64,
) -> Result<(SubClassifier, TrainCurve)> {
    let scheme = config.expr_scheme;
    let data: Vec<(&Image, usize)> = train
        .iter()
        .filter_map(|f| training_class(f, scheme).map(|c| (&f.image, c)))
        .collect();
    if data.is_empty() {
        return Err(Error::config("data", "expression training split is empty"));
    }
    let val: Option<Vec<&FrameRecord>> = val.map(|v| {
        v.iter()
            .copied()
            .filter(|f| f.expr.and_then(|l| l.class()).is_some())
            .collect()
    });
    let val_labels = val.as_deref().map(expr_labels);
    let model = SubClassifier::new(config, arch_id, seed)?;
    let mut opt = Optim::new(config.optimizer, model.store.vars(), config.learning_rate)?;
    let mut shuffle = seed::rng(seed, "shuffle");
    let mut aug_rng = seed::rng(seed, "augmentation");
    let aug = AugmentationConfig::from(config);
    let mut curve = TrainCurve::default();
    let mut best: Option<(f64, Vec<nn::NamedTensor>)> = None;
    for _ in 0..config.epochs {
        let mut total = 0.0;
        for idx in batches(data.len(), config.batch_size, 1, &mut shuffle) {
            let images = batch_images(&data, &idx, config.augment.then_some(&aug), &mut aug_rng)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data[i].1).collect();
            let logits = model.logits(&images)?;
            let (loss, grad) =
                composite_classification_loss_with_grad(nn::to_array2(&logits)?.view(), &labels, config.lambda_dice)?;
            let grads = nn::backward_from(&[(&logits, grad.into_iter().collect())])?;
            opt.step(&grads)?;
            total += loss.value * idx.len() as f64;
        }
        curve.epoch_losses.push(total / data.len() as f64);
        if let (Some(v), Some(labels)) = (&val, &val_labels) {
            if v.is_empty() {
                continue;
            }
            let f1 = f1_final_expr(&decisions_for(&model, v, config.other_threshold)?, labels)?;
            curve.val_metric.push(f1);
            if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                best = Some((f1, model.store.snapshot()?));
            }
        }
    }
    if let Some((_, params)) = best {
        model.store.restore(&params)?;
    }
    Ok((model, curve))
}

fn batch_images(
    data: &[(&Image, usize)],
    idx: &[usize],
    aug: Option<&AugmentationConfig>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    match aug {
        None => images_to_tensor(&idx.iter().map(|&i| data[i].0).collect::<Vec<_>>()),
        Some(cfg) => {
            let owned: Vec<Image> = idx.iter().map(|&i| augment(data[i].0, cfg, rng)).collect();
            images_to_tensor(&owned.iter().collect::<Vec<_>>())
        }
    }
}

/// Resolves a majority tie among classes with equal vote counts.
#[derive(Debug, Clone, Copy)]
pub enum TieBreaker<'a> {
    /// Highest mean sub-classifier probability, then smallest class index.
    MeanProbability(&'a [[f64; N_EXPR_CLASSES]]),
    SmallestIndex,
}

/// Parameter-free fusion of sub-classifier decisions: the highest-priority
/// class among {2, 3, 5, 1} if any member chose one, otherwise the majority.
pub fn meta_vote(decisions: &[usize], tie_breaker: TieBreaker) -> Result<usize> {
    if decisions.is_empty() {
        return Err(Error::validation("decisions", "at least one decision is required"));
    }
    if let Some(bad) = decisions.iter().find(|&&d| d >= N_EXPR_CLASSES) {
        return Err(Error::validation("decisions", format!("class {bad} out of range")));
    }
    if let Some(&p) = PRIORITY.iter().find(|p| decisions.contains(p)) {
        return Ok(p);
    }
    let mut counts = [0usize; N_EXPR_CLASSES];
    for &d in decisions {
        counts[d] += 1;
    }
    let top = *counts.iter().max().expect("non-empty");
    let tied: Vec<usize> = (0..N_EXPR_CLASSES).filter(|&c| counts[c] == top).collect();
    if tied.len() == 1 {
        return Ok(tied[0]);
    }
    match tie_breaker {
        TieBreaker::SmallestIndex => Ok(tied[0]),
        TieBreaker::MeanProbability(rows) => {
            let mut best = tied[0];
            let mut best_score = f64::NEG_INFINITY;
            for &c in &tied {
                // summing sorted values keeps the score independent of member order
                let mut values: Vec<f64> = rows.iter().map(|r| r[c]).collect();
                values.sort_by(f64::total_cmp);
                let score = values.iter().sum::<f64>() / values.len().max(1) as f64;
                if score > best_score {
                    best = c;
                    best_score = score;
                }
            }
            Ok(best)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub decisions: Vec<usize>,
    pub probabilities: Vec<[f64; N_EXPR_CLASSES]>,
    pub final_class: usize,
}

pub fn predict_ensemble(models: &[SubClassifier], image: &Image, tau: f64) -> Result<EnsemblePrediction> {
    let mut members = Vec::with_capacity(models.len());
    for m in models {
        members.push(m.probabilities(&[image])?);
    }
    fuse_rows(models, &members, 0, tau)
}

fn fuse_rows(
    models: &[SubClassifier],
    member_probs: &[Array2<f64>],
    row: usize,
    tau: f64,
) -> Result<EnsemblePrediction> {
    if models.is_empty() {
        return Err(Error::validation("models", "ensemble needs at least one member"));
    }
    let (decisions, probabilities): (Vec<usize>, Vec<[f64; N_EXPR_CLASSES]>) = models
        .iter()
        .zip(member_probs)
        .map(|(m, p)| decide(p.row(row).as_slice().expect("contiguous"), m.scheme(), tau))
        .unzip();
    let final_class = meta_vote(&decisions, TieBreaker::MeanProbability(&probabilities))?;
    Ok(EnsemblePrediction {
        decisions,
        probabilities,
        final_class,
    })
}

/// Member probabilities for every frame of a split, computed once so that
/// several thresholds can be applied without re-running the networks.
pub struct EnsembleScores<'a> {
    models: &'a [SubClassifier],
    frames: Vec<&'a FrameRecord>,
    member_probs: Vec<Array2<f64>>,
}

impl<'a> EnsembleScores<'a> {
    pub fn compute(models: &'a [SubClassifier], split: &'a DatasetSplit) -> Result<Self> {
        let frames: Vec<&FrameRecord> = split.frames().collect();
        let images: Vec<&Image> = frames.iter().map(|f| &f.image).collect();
        let member_probs = if images.is_empty() {
            Vec::new()
        } else {
            models
                .iter()
                .map(|m| m.probabilities(&images))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            models,
            frames,
            member_probs,
        })
    }

    /// Fused predictions plus one prediction set per member. Fused
    /// probabilities are the member mean.
    pub fn predict(&self, tau: f64) -> Result<(PredictionSet, Vec<PredictionSet>)> {
        let mut fused = PredictionSet::new(Task::Expr);
        let mut members = vec![PredictionSet::new(Task::Expr); self.models.len()];
        for (row, f) in self.frames.iter().enumerate() {
            let e = fuse_rows(self.models, &self.member_probs, row, tau)?;
            let mut mean = [0.0; N_EXPR_CLASSES];
            for p in &e.probabilities {
                for (m, v) in mean.iter_mut().zip(p) {
                    *m += v / e.probabilities.len() as f64;
                }
            }
            fused.insert(
                &f.video_id,
                f.frame_index,
                Prediction::Expr {
                    class: e.final_class,
                    probabilities: mean,
                },
            )?;
            for ((set, &class), probs) in members.iter_mut().zip(&e.decisions).zip(&e.probabilities) {
                set.insert(
                    &f.video_id,
                    f.frame_index,
                    Prediction::Expr {
                        class,
                        probabilities: *probs,
                    },
                )?;
            }
        }
        Ok((fused, members))
    }
}

/// F1-final of the fused ensemble on `split` for each threshold.
pub fn threshold_sweep(models: &[SubClassifier], split: &DatasetSplit, taus: &[f64]) -> Result<Vec<(f64, f64)>> {
    let scores = EnsembleScores::compute(models, split)?;
    let labels = expr_labels(&scores.frames);
    taus.iter()
        .map(|&tau| {
            let (fused, _) = scores.predict(tau)?;
            let preds: Vec<usize> = fused
                .iter()
                .map(|(_, _, p)| match p {
                    Prediction::Expr { class, .. } => *class,
                    _ => unreachable!("expression prediction set"),
                })
                .collect();
            Ok((tau, f1_final_expr(&preds, &labels)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SynthOptions};
    use proptest::prelude::*;

    #[test]
    fn meta_vote_examples() {
        let vote = |d: &[usize]| meta_vote(d, TieBreaker::SmallestIndex).unwrap();
        assert_eq!(vote(&[7, 7, 2]), 2);
        assert_eq!(vote(&[3, 5, 0, 1]), 3);
        assert_eq!(vote(&[0, 0, 4]), 0);
        assert_eq!(vote(&[4, 4, 6, 6]), 4);
        assert_eq!(vote(&[0, 0, 0, 0, 5]), 5);
        assert_eq!(vote(&[6]), 6);
        assert!(meta_vote(&[], TieBreaker::SmallestIndex).is_err());
    }

    #[test]
    fn mean_probability_breaks_majority_ties() {
        let mut a = [0.0; 8];
        a[4] = 0.6;
        a[6] = 0.4;
        let mut b = [0.0; 8];
        b[4] = 0.1;
        b[6] = 0.9;
        let rows = [a, a, b, b];
        // mean p(4) = 0.35, mean p(6) = 0.65
        assert_eq!(meta_vote(&[4, 4, 6, 6], TieBreaker::MeanProbability(&rows)).unwrap(), 6);
    }

    #[test]
    fn threshold_rule() {
        let mut p = vec![0.0; 7];
        p[3] = 0.9;
        p[0] = 0.1;
        assert_eq!(decide(&p, ExprScheme::SevenByThreshold, 0.5).0, 3);
        let q = vec![0.3, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1];
        let (c, full) = decide(&q, ExprScheme::SevenByThreshold, 0.5);
        assert_eq!(c, 7);
        assert_eq!(full[7], 0.0);
        let r = vec![0.3, 0.2, 0.1, 0.1, 0.1, 0.1, 0.05, 0.05];
        assert_eq!(
            decide(&r, ExprScheme::SevenAsClass, 0.1),
            decide(&r, ExprScheme::SevenAsClass, 0.9)
        );
    }

    fn synth(n_videos: usize, frames: usize, seed: u64) -> DatasetSplit {
        let opts = SynthOptions {
            image_size: 16,
            ..SynthOptions::default()
        };
        generate_synthetic(seed, n_videos, frames, Task::Expr, &opts).unwrap()
    }

    #[test]
    fn bootstrap_use_all_is_identity_and_seeds_differ() {
        let split = synth(2, 10, 1);
        let all = bootstrap_sample(&split, 1.0, true, 3).unwrap();
        assert_eq!(all, split.frames().collect::<Vec<_>>());

        let big = synth(4, 250, 2);
        let key = |v: Vec<&FrameRecord>| {
            let mut k: Vec<(String, usize)> = v.iter().map(|f| (f.video_id.clone(), f.frame_index)).collect();
            k.sort();
            k
        };
        let a = bootstrap_sample(&big, 1.0, false, 1).unwrap();
        assert_eq!(a.len(), 1000);
        let distinct = key(a.clone()).windows(2).filter(|w| w[0] != w[1]).count() + 1;
        assert!(distinct < 1000, "sampling with replacement repeats frames");
        let b = bootstrap_sample(&big, 1.0, false, 2).unwrap();
        assert_ne!(key(a.clone()), key(b));
        assert_eq!(key(a), key(bootstrap_sample(&big, 1.0, false, 1).unwrap()));
        assert_eq!(bootstrap_sample(&big, 0.25, false, 1).unwrap().len(), 250);
        assert!(bootstrap_sample(&big, 0.0, false, 1).is_err());
    }

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(Task::Expr);
        cfg.image_size = 16;
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.augment = false;
        cfg
    }

    #[test]
    fn training_is_deterministic_and_dice_is_wired_in() {
        let split = synth(1, 24, 4);
        let frames: Vec<&FrameRecord> = split.frames().collect();
        let cfg = tiny_config();
        let (a, ca) = train_subclassifier(&frames, None, &cfg, 0, 9).unwrap();
        let (b, cb) = train_subclassifier(&frames, None, &cfg, 0, 9).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.store.snapshot().unwrap(), b.store.snapshot().unwrap());
        let mut no_dice = cfg.clone();
        no_dice.lambda_dice = 0.0;
        let (c, _) = train_subclassifier(&frames, None, &no_dice, 0, 9).unwrap();
        assert_ne!(a.store.snapshot().unwrap(), c.store.snapshot().unwrap());
    }

    #[test]
    fn threshold_scheme_uses_seven_outputs_and_skips_class_seven() {
        let mut cfg = tiny_config();
        cfg.expr_scheme = ExprScheme::SevenByThreshold;
        cfg.epochs = 1;
        let split = synth(1, 30, 5);
        let frames: Vec<&FrameRecord> = split.frames().collect();
        let (m, _) = train_subclassifier(&frames, Some(&frames), &cfg, 1, 1).unwrap();
        assert_eq!(m.probabilities(&[&frames[0].image]).unwrap().ncols(), 7);
        let only_other: Vec<&FrameRecord> = frames
            .iter()
            .copied()
            .filter(|f| f.expr.unwrap().class() == Some(EXPR_OTHER))
            .collect();
        assert!(matches!(
            train_subclassifier(&only_other, None, &cfg, 1, 1),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn ensemble_paths_agree() {
        let cfg = tiny_config();
        let split = synth(1, 12, 6);
        let frames: Vec<&FrameRecord> = split.frames().collect();
        let models: Vec<SubClassifier> = (0..3)
            .map(|k| train_subclassifier(&frames, None, &cfg, k, k as u64).unwrap().0)
            .collect();
        let scores = EnsembleScores::compute(&models, &split).unwrap();
        let (fused, members) = scores.predict(0.5).unwrap();
        assert_eq!(members.len(), 3);
        for f in &frames[..3] {
            let single = predict_ensemble(&models, &f.image, 0.5).unwrap();
            match fused.get(&f.video_id, f.frame_index).unwrap() {
                Prediction::Expr { class, .. } => assert_eq!(*class, single.final_class),
                _ => unreachable!(),
            }
        }
        let one = predict_ensemble(&models[..1], &frames[0].image, 0.5).unwrap();
        assert_eq!(one.final_class, one.decisions[0]);
        let ckpt = models[2].to_checkpoint().unwrap();
        let back = SubClassifier::from_checkpoint(&ckpt).unwrap();
        assert_eq!(back.arch_id, 2);
        assert_eq!(
            predict_sub(&back, &frames[0].image, 0.5).unwrap(),
            predict_sub(&models[2], &frames[0].image, 0.5).unwrap()
        );
    }

    proptest! {
        #[test]
        fn meta_vote_output_is_a_member_decision(d in prop::collection::vec(0usize..8, 1..9)) {
            let out = meta_vote(&d, TieBreaker::SmallestIndex).unwrap();
            prop_assert!(d.contains(&out));
        }

        #[test]
        fn meta_vote_ignores_order(
            d in prop::collection::vec(0usize..8, 1..9),
            seed in any::<u64>(),
        ) {
            let rows: Vec<[f64; 8]> = d
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let mut r = [0.0; 8];
                    let mut x = seed.wrapping_add(i as u64);
                    for v in r.iter_mut() {
                        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        *v = (x >> 11) as f64 / (1u64 << 53) as f64;
                    }
                    r
                })
                .collect();
            let base = meta_vote(&d, TieBreaker::MeanProbability(&rows)).unwrap();
            let mut pairs: Vec<(usize, [f64; 8])> = d.iter().copied().zip(rows.iter().copied()).collect();
            pairs.reverse();
            let shift = seed as usize % pairs.len();
            pairs.rotate_left(shift);
            let (d2, r2): (Vec<usize>, Vec<[f64; 8]>) = pairs.into_iter().unzip();
            prop_assert_eq!(meta_vote(&d2, TieBreaker::MeanProbability(&r2)).unwrap(), base);
        }
    }
}
