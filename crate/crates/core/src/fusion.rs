//! Mask-gated joint training: the segmenter's soft mask multiplies the
//! classifier input, and both networks learn from `L_s + λ·L_c`.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, stack, AugmentConfig, LesionSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::fewshot::{self, ClassSplit, Episode, EpisodeSampler, Metric, SplitSide};
use crate::kv::{self, KeyValues};
use crate::nets::{self, EncoderConfig, SegNetConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{Bound, ParamRegistry};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// RNG stream of the training episode sampler; stream 0 initialises weights.
const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    /// Segmenter fully frozen.
    E1,
    /// Segmenter head trained jointly.
    #[default]
    E2,
    /// No segmentation: the encoder alone on raw images, trained on `L_c`.
    Baseline,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "E1" | "e1" => Ok(Mode::E1),
            "E2" | "e2" => Ok(Mode::E2),
            "baseline" => Ok(Mode::Baseline),
            _ => Err(Error::Config(format!("unknown mode `{s}` (E1|E2|baseline)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::E1 => "E1",
            Mode::E2 => "E2",
            Mode::Baseline => "baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub mode: Mode,
    pub lambda: f64,
    pub metric: Metric,
    pub k: usize,
    pub n: usize,
    pub q: usize,
    pub epochs: usize,
    pub tasks: usize,
    pub lr_seg: f64,
    pub lr_cls: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub segnet: SegNetConfig,
    /// `None` disables training-time augmentation.
    pub augment: Option<AugmentConfig>,
    /// Segmenter groups trained in E2.
    pub seg_trainable: Vec<String>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: Mode::E2,
            lambda: 2.0,
            metric: Metric::Cosine,
            k: 2,
            n: 5,
            q: 15,
            epochs: 10,
            tasks: 100,
            lr_seg: 1e-3,
            lr_cls: 1e-6,
            seed: 0,
            encoder: EncoderConfig::default(),
            segnet: SegNetConfig::default(),
            augment: Some(AugmentConfig::default()),
            seg_trainable: vec![nets::SEG_HEAD.to_string()],
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        // λ = 0 is allowed for the pure-segmentation degenerate case
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.epochs == 0 || self.tasks == 0 {
            return Err(Error::Config("epochs and tasks must be at least 1".into()));
        }
        if self.k < 2 || self.n == 0 || self.q == 0 {
            return Err(Error::Config(format!(
                "need k >= 2, n >= 1, q >= 1 (got k={}, n={}, q={})",
                self.k, self.n, self.q
            )));
        }
        for (name, lr) in [("lr_seg", self.lr_seg), ("lr_cls", self.lr_cls)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.encoder.side != self.segnet.side {
            return Err(Error::Config(format!(
                "encoder side {} differs from segmenter side {}",
                self.encoder.side, self.segnet.side
            )));
        }
        if self.seg_trainable.is_empty() {
            return Err(Error::Config("seg_trainable needs at least one group".into()));
        }
        self.encoder.validate()?;
        self.segnet.validate()
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("mode", self.mode.to_string());
        put("lambda", self.lambda.to_string());
        put("metric", self.metric.to_string());
        put("k", self.k.to_string());
        put("n", self.n.to_string());
        put("q", self.q.to_string());
        put("epochs", self.epochs.to_string());
        put("tasks", self.tasks.to_string());
        put("lr_seg", self.lr_seg.to_string());
        put("lr_cls", self.lr_cls.to_string());
        put("seed", self.seed.to_string());
        put("side", self.encoder.side.to_string());
        put("encoder.widths", kv::join(&self.encoder.widths));
        put("encoder.dim", self.encoder.embedding_dim.to_string());
        put("segnet.widths", kv::join(&self.segnet.widths));
        put("segnet.skip", self.segnet.skip.to_string());
        put("augment", self.augment.is_some().to_string());
        let aug = self.augment.unwrap_or_default();
        put("augment.flip_prob", aug.flip_prob.to_string());
        put("augment.jitter", aug.jitter.to_string());
        put("segnet.trainable", self.seg_trainable.join(","));
        kv
    }

    /// Applies recognised keys on top of `self`; returns the keys it did not
    /// recognise.
    pub fn apply_key_values(&mut self, kv: &KeyValues) -> Result<Vec<String>> {
        let mut unknown = Vec::new();
        let mut aug_on = self.augment.is_some();
        let mut aug = self.augment.unwrap_or_default();
        for (key, v) in kv {
            let v = v.as_str();
            match key.as_str() {
                "mode" => self.mode = v.parse()?,
                "lambda" => self.lambda = kv::parse_f64(key, v)?,
                "metric" => self.metric = v.parse()?,
                "k" => self.k = kv::parse_usize(key, v)?,
                "n" => self.n = kv::parse_usize(key, v)?,
                "q" => self.q = kv::parse_usize(key, v)?,
                "epochs" => self.epochs = kv::parse_usize(key, v)?,
                "tasks" => self.tasks = kv::parse_usize(key, v)?,
                "lr_seg" => self.lr_seg = kv::parse_f64(key, v)?,
                "lr_cls" => self.lr_cls = kv::parse_f64(key, v)?,
                "seed" => self.seed = kv::parse_u64(key, v)?,
                "side" => {
                    let s = kv::parse_usize(key, v)?;
                    self.encoder.side = s;
                    self.segnet.side = s;
                }
                "encoder.widths" => self.encoder.widths = kv::parse_list(key, v, kv::parse_usize)?,
                "encoder.dim" => self.encoder.embedding_dim = kv::parse_usize(key, v)?,
                "segnet.widths" => self.segnet.widths = kv::parse_list(key, v, kv::parse_usize)?,
                "segnet.skip" => self.segnet.skip = kv::parse_bool(key, v)?,
                "augment" => aug_on = kv::parse_bool(key, v)?,
                "augment.flip_prob" => aug.flip_prob = kv::parse_f64(key, v)?,
                "augment.jitter" => aug.jitter = kv::parse_f64(key, v)?,
                "segnet.trainable" => {
                    self.seg_trainable = v
                        .split(',')
                        .map(|g| g.trim().to_string())
                        .filter(|g| !g.is_empty())
                        .collect();
                }
                _ => unknown.push(key.clone()),
            }
        }
        self.augment = aug_on.then_some(aug);
        Ok(unknown)
    }
}

/// Segmenter and encoder parameters with their architectures.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedModel {
    pub segnet: ParamRegistry,
    pub encoder: ParamRegistry,
    pub segnet_config: SegNetConfig,
    pub encoder_config: EncoderConfig,
}

impl FusedModel {
    /// Fresh He-initialised networks; the segmenter draws first.
    pub fn init(config: &FusionConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let segnet = nets::build_segnet(&config.segnet, &mut rng)?;
        let encoder = nets::build_encoder(&config.encoder, &mut rng)?;
        Ok(FusedModel {
            segnet,
            encoder,
            segnet_config: config.segnet.clone(),
            encoder_config: config.encoder.clone(),
        })
    }

    /// Both registries in one, for checkpointing.
    pub fn to_registry(&self) -> Result<ParamRegistry> {
        let mut all = self.segnet.clone();
        all.extend(&self.encoder)?;
        Ok(all)
    }

    /// Overwrites parameter values from a combined checkpoint registry.
    pub fn load_registry(&mut self, all: &ParamRegistry) -> Result<()> {
        if all.len() != self.segnet.len() + self.encoder.len() {
            if let Some(extra) = all
                .names()
                .find(|n| self.segnet.get(n).is_none() && self.encoder.get(n).is_none())
            {
                return Err(Error::Parameter {
                    name: extra.to_string(),
                    reason: "not part of the configured networks".into(),
                });
            }
        }
        self.segnet.load_values(all)?;
        self.encoder.load_values(all)
    }

    pub fn checksum(&self) -> u64 {
        self.segnet.checksum().rotate_left(1) ^ self.encoder.checksum()
    }

    /// Predicted soft masks `[B,1,S,S]`, no gradients.
    pub fn masks(&self, images: &Tensor) -> Result<Tensor> {
        nets::segment(&self.segnet, &self.segnet_config, images.clone())
    }

    /// Embeddings of (optionally) mask-gated images, no gradients.
    pub fn embed(&self, images: &Tensor, use_fusion: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let seg = self.segnet.bind_with_grad(&mut tape, false);
        let enc = self.encoder.bind_with_grad(&mut tape, false);
        let x = tape.constant(images.clone());
        let input = if use_fusion {
            let m = nets::segnet_forward(&mut tape, &seg, &self.segnet_config, x)?;
            tape.mask_channels(x, m)?
        } else {
            x
        };
        let e = nets::encoder_forward(&mut tape, &enc, &self.encoder_config, input)?;
        Ok(tape.value(e).clone())
    }
}

/// Pixel-wise gating of each image channel by the soft mask.
pub fn apply_mask(tape: &mut Tape, images: Var, masks: Var) -> Result<Var> {
    tape.mask_channels(images, masks)
}

/// `L_s + λ·L_c`.
pub fn total_loss(tape: &mut Tape, l_s: Var, l_c: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(l_c, lambda);
    tape.add(l_s, weighted)
}

/// Graph handles produced by [`fused_graph`].
#[derive(Clone, Copy, Debug)]
pub struct FusedVars {
    pub l_s: Var,
    pub l_c: Var,
    pub l_total: Var,
    pub log_probs: Var,
    pub masks: Var,
}

/// Records the fused pipeline for a stacked episode batch (support rows
/// first) given an already-computed mask prediction.
#[allow(clippy::too_many_arguments)]
pub fn fused_losses(
    tape: &mut Tape,
    encoder: &Bound,
    encoder_config: &EncoderConfig,
    images: Var,
    pred_masks: Var,
    true_masks: Var,
    episode: &Episode,
    metric: Metric,
    lambda: f64,
) -> Result<FusedVars> {
    let l_s = tape.bce_loss(pred_masks, true_masks)?;
    let gated = apply_mask(tape, images, pred_masks)?;
    let emb = nets::encoder_forward(tape, encoder, encoder_config, gated)?;
    let (log_probs, l_c) = prototype_loss(tape, emb, episode, metric)?;
    let l_total = total_loss(tape, l_s, l_c, lambda)?;
    Ok(FusedVars {
        l_s,
        l_c,
        l_total,
        log_probs,
        masks: pred_masks,
    })
}

/// Query log-probabilities and their NLL for episode embeddings `[B,D]`
/// (support rows first).
pub fn prototype_loss(tape: &mut Tape, emb: Var, episode: &Episode, metric: Metric) -> Result<(Var, Var)> {
    let ns = episode.support.len();
    let total = ns + episode.query.len();
    let support_rows: Vec<usize> = (0..ns).collect();
    let query_rows: Vec<usize> = (ns..total).collect();
    let s = tape.select_rows(emb, &support_rows)?;
    let q = tape.select_rows(emb, &query_rows)?;
    let protos = tape.class_mean(s, &episode.support_labels, episode.k)?;
    let log_probs = fewshot::log_probabilities(tape, q, protos, metric)?;
    let l_c = fewshot::nll_loss(tape, log_probs, &episode.query_labels)?;
    Ok((log_probs, l_c))
}

/// Segmenter forward followed by [`fused_losses`].
#[allow(clippy::too_many_arguments)]
pub fn fused_graph(
    tape: &mut Tape,
    segnet: &Bound,
    encoder: &Bound,
    model: &FusedModel,
    images: Tensor,
    true_masks: Tensor,
    episode: &Episode,
    metric: Metric,
    lambda: f64,
) -> Result<FusedVars> {
    let x = tape.constant(images);
    let y = tape.constant(true_masks);
    let m = nets::segnet_forward(tape, segnet, &model.segnet_config, x)?;
    fused_losses(tape, encoder, &model.encoder_config, x, m, y, episode, metric, lambda)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedOutput {
    pub l_s: f64,
    pub l_c: f64,
    pub l_total: f64,
    /// `[k·q, k]` query class probabilities.
    pub probabilities: Tensor,
    /// `[B,1,S,S]` predicted masks, support rows first.
    pub masks: Tensor,
}

/// Gradient-free fused forward pass over one episode.
pub fn forward_fused(
    episode: &Episode,
    dataset: &[LesionSample],
    model: &FusedModel,
    metric: Metric,
    lambda: f64,
) -> Result<FusedOutput> {
    let samples: Vec<&LesionSample> = episode.all_samples().iter().map(|&i| &dataset[i]).collect();
    let (images, masks) = stack(&samples)?;
    let mut tape = Tape::new();
    let seg = model.segnet.bind_with_grad(&mut tape, false);
    let enc = model.encoder.bind_with_grad(&mut tape, false);
    let v = fused_graph(&mut tape, &seg, &enc, model, images, masks, episode, metric, lambda)?;
    let probs = tape.exp(v.log_probs);
    Ok(FusedOutput {
        l_s: tape.value(v.l_s).item(),
        l_c: tape.value(v.l_c).item(),
        l_total: tape.value(v.l_total).item(),
        probabilities: tape.value(probs).clone(),
        masks: tape.value(v.masks).clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub task: usize,
    pub l_s: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub lambda: f64,
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,task,L_s,L_c,L_total,accuracy";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{:?},{:?}",
                r.epoch, r.task, r.l_s, r.l_c, r.l_total, r.accuracy
            );
        }
        out
    }

    pub fn epoch_records(&self, epoch: usize) -> impl Iterator<Item = &TrainRecord> {
        self.records.iter().filter(move |r| r.epoch == epoch)
    }

    pub fn epoch_mean_accuracy(&self, epoch: usize) -> Option<f64> {
        mean(self.epoch_records(epoch).map(|r| r.accuracy))
    }

    pub fn epoch_mean_seg_loss(&self, epoch: usize) -> Option<f64> {
        mean(self.epoch_records(epoch).map(|r| r.l_s))
    }

    pub fn last_epoch(&self) -> Option<usize> {
        self.records.last().map(|r| r.epoch)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Trains a freshly initialised model.
pub fn train(
    dataset: &[LesionSample],
    split: &ClassSplit,
    config: &FusionConfig,
) -> Result<(FusedModel, TrainLog)> {
    let model = FusedModel::init(config)?;
    train_from(model, dataset, split, config, |_, _| Ok(()))
}

/// Trains `model` on episodes from the seen classes. `on_epoch` runs after
/// every epoch (used for checkpointing).
pub fn train_from<F>(
    mut model: FusedModel,
    dataset: &[LesionSample],
    split: &ClassSplit,
    config: &FusionConfig,
    mut on_epoch: F,
) -> Result<(FusedModel, TrainLog)>
where
    F: FnMut(usize, &FusedModel) -> Result<()>,
{
    config.validate()?;
    model.segnet = match config.mode {
        Mode::E1 | Mode::Baseline => nets::freeze_all(model.segnet),
        Mode::E2 if config.seg_trainable == [nets::SEG_HEAD] => {
            nets::freeze_all_but_head(model.segnet)?
        }
        Mode::E2 => {
            let mut seg = nets::freeze_all(model.segnet);
            for group in &config.seg_trainable {
                seg.set_group_trainable(group, true)?;
            }
            seg
        }
    };
    model.encoder.set_all_trainable(true);

    let sampler = EpisodeSampler::new(dataset, split.side(SplitSide::Seen));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut seg_state = AdamState::new(AdamConfig::with_lr(config.lr_seg));
    let mut enc_state = AdamState::new(AdamConfig::with_lr(config.lr_cls));
    let mut log = TrainLog {
        lambda: config.lambda,
        records: Vec::with_capacity(config.epochs * config.tasks),
    };

    for epoch in 0..config.epochs {
        for task in 0..config.tasks {
            let episode = sampler.sample(config.k, config.n, config.q, &mut rng)?;
            let batch: Vec<LesionSample> = episode
                .all_samples()
                .iter()
                .map(|&i| match &config.augment {
                    Some(a) => augment(&dataset[i], a, &mut rng),
                    None => dataset[i].clone(),
                })
                .collect();
            let refs: Vec<&LesionSample> = batch.iter().collect();
            let (images, masks) = stack(&refs)?;

            let mut tape = Tape::new();
            let seg = model.segnet.bind(&mut tape);
            let enc = model.encoder.bind(&mut tape);
            // the baseline has no segmentation term; its L_s is logged as 0
            let (l_s, l_c, objective, log_probs) = if config.mode == Mode::Baseline {
                let x = tape.constant(images);
                let emb = nets::encoder_forward(&mut tape, &enc, &model.encoder_config, x)?;
                let (log_probs, l_c) = prototype_loss(&mut tape, emb, &episode, config.metric)?;
                (0.0, l_c, l_c, log_probs)
            } else {
                let v = fused_graph(
                    &mut tape, &seg, &enc, &model, images, masks, &episode, config.metric, config.lambda,
                )?;
                (tape.value(v.l_s).item(), v.l_c, v.l_total, v.log_probs)
            };
            let l_total = tape.value(objective).item();
            if !l_total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, task });
            }
            let probs = tape.exp(log_probs);
            let record = TrainRecord {
                epoch,
                task,
                l_s,
                l_c: tape.value(l_c).item(),
                l_total,
                accuracy: fewshot::episode_accuracy(tape.value(probs), &episode.query_labels),
            };
            tape.backward(objective)?;
            let seg_grads = seg.grads(&tape);
            let enc_grads = enc.grads(&tape);
            adam_step(&mut model.segnet, &seg_grads, &mut seg_state)?;
            adam_step(&mut model.encoder, &enc_grads, &mut enc_state)?;
            log.records.push(record);
        }
        on_epoch(epoch, &model)?;
    }
    Ok((model, log))
}

/// One row of the λ ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub lambda: f64,
    pub report: EvalReport,
}

/// Train-then-evaluate at every λ with the same seed. Evaluation uses the
/// unseen classes with `episodes` tasks.
pub fn ablate_lambda(
    dataset: &[LesionSample],
    split: &ClassSplit,
    base: &FusionConfig,
    lambdas: &[f64],
    episodes: usize,
) -> Result<Vec<AblationRow>> {
    if let Some(bad) = lambdas.iter().find(|&&l| l.is_nan() || l <= 0.0) {
        return Err(Error::Config(format!("ablation lambdas must be positive, got {bad}")));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let config = FusionConfig {
                lambda,
                ..base.clone()
            };
            let (model, _) = train(dataset, split, &config)?;
            let report = evaluate(
                &model,
                dataset,
                split.side(SplitSide::Unseen),
                config.k,
                config.n,
                config.q,
                config.metric,
                episodes,
                config.seed,
            )?;
            Ok(AblationRow { lambda, report })
        })
        .collect()
}

/// Table with one row per λ: mean accuracy and its 95% margin.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("lambda,mean_accuracy,margin95\n");
    for r in rows {
        let _ = writeln!(out, "{},{:?},{:?}", r.lambda, r.report.mean, r.report.margin(95));
    }
    out
}
