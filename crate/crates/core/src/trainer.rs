//! Training loop: smoothed labels, intra-modality mixup, summed head
//! losses, Adam with L2 weight decay, and per-iteration classifier
//! integration, with cosine schedules evaluated once per epoch.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use tensornet::{Adam, AdamConfig, Graph, Precision, Tensor, Var};

use crate::error::{Error, Result};
use crate::glosslex::{language_aware_soft_label, vanilla_soft_label, GlossLexicon, SoftLabel};
use crate::heads::imm_targets;
use crate::heatmap::{scaled_sigma, HeatmapConfig};
use crate::model::{
    save_checkpoint, CheckpointKind, CheckpointMeta, ClipBatch, HeadsConfig, Model, ModelConfig,
};
use crate::synthdata::{
    extract_clips, sample_crop_rect, temporal_crop, ClipPair, CropMode, Dataset, RawSample,
};
use crate::vknet::{default_blocks, BlockConfig, InputShapes, LateralConfig, VkNetConfig};

/// `μ = 1 - (1-μ_base)·(cos(πm/M)+1)/2`.
pub fn mu_schedule(epoch: usize, epochs: usize, mu_base: f64) -> f64 {
    1.0 - (1.0 - mu_base) * cosine_factor(epoch, epochs)
}

/// `γ = (cos(πm/M)+1)/2`.
pub fn gamma_schedule(epoch: usize, epochs: usize) -> f64 {
    cosine_factor(epoch, epochs)
}

/// `η = η0·(cos(πm/M)+1)/2`.
pub fn cosine_lr(epoch: usize, epochs: usize, lr0: f64) -> f64 {
    lr0 * cosine_factor(epoch, epochs)
}

/// `(cos(πm/M)+1)/2`, pinned to exactly 1 and 0 at the endpoints.
fn cosine_factor(epoch: usize, epochs: usize) -> f64 {
    if epoch == 0 || epochs == 0 {
        1.0
    } else if epoch >= epochs {
        0.0
    } else {
        ((PI * epoch as f64 / epochs as f64).cos() + 1.0) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSchedule {
    pub lr: f64,
    pub gamma: f64,
    pub mu: f64,
}

impl EpochSchedule {
    pub fn at(epoch: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cosine_lr(epoch, cfg.epochs, cfg.learning_rate),
            gamma: gamma_schedule(epoch, cfg.epochs),
            mu: mu_schedule(epoch, cfg.epochs, cfg.mu_base),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Uniform mass on the negatives.
    Vanilla,
    /// Negatives weighted by gloss similarity.
    Language,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub smoothing: Smoothing,
    pub epsilon: f64,
    pub tau: f64,
    /// Train the inter-modality mixing branch (and integrate fc1 with fc2).
    pub mixing: bool,
    /// Intra-modality mixup of inputs and labels.
    pub mixup: bool,
    pub mixup_alpha: f64,
    pub mu_base: f64,
    /// Area fraction range of the random spatial crop.
    pub crop_scale: [f64; 2],
    /// Defaults to the reference width scaled to the heatmap size.
    pub heatmap_sigma: Option<f64>,
    /// Defaults to the dataset's long clip length.
    pub long_len: Option<usize>,
    /// Precision of the matrix products.
    pub precision: Precision,
    pub seed: u64,
    pub blocks: Vec<BlockConfig>,
    pub laterals: LateralConfig,
    pub heads: HeadsConfig,
    /// Also write a checkpoint every this many epochs.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            smoothing: Smoothing::Language,
            epsilon: 0.2,
            tau: 0.5,
            mixing: true,
            mixup: true,
            mixup_alpha: 0.8,
            mu_base: 0.99,
            crop_scale: [0.7, 1.0],
            heatmap_sigma: None,
            long_len: None,
            precision: Precision::F64,
            seed: 0,
            blocks: default_blocks(),
            laterals: LateralConfig::all(),
            heads: HeadsConfig::default(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("learning rate must be positive and weight decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return fail(format!("epsilon must lie in [0, 1), got {}", self.epsilon));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidTemperature(self.tau));
        }
        if !(self.mixup_alpha > 0.0) {
            return fail(format!(
                "mixup alpha must be positive, got {}",
                self.mixup_alpha
            ));
        }
        if !(0.0..=1.0).contains(&self.mu_base) {
            return fail(format!("mu_base must lie in [0, 1], got {}", self.mu_base));
        }
        if let Some(s) = self.heatmap_sigma {
            if !(s > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "heatmap sigma must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn long_len(&self, ds: &Dataset) -> usize {
        self.long_len.unwrap_or(ds.spec.long_len)
    }

    pub fn heatmap(&self, ds: &Dataset) -> HeatmapConfig {
        let [h, w] = ds.spec.heatmap_size;
        HeatmapConfig::new(
            h,
            w,
            self.heatmap_sigma.unwrap_or_else(|| scaled_sigma(h.min(w))),
        )
    }

    /// Model layout for `ds` under this config.
    pub fn model_config(&self, ds: &Dataset) -> ModelConfig {
        let mut heads = self.heads.clone();
        if !self.mixing {
            heads.mixing.clear();
        }
        ModelConfig {
            vknet: VkNetConfig {
                blocks: self.blocks.clone(),
                laterals: self.laterals.clone(),
                inputs: InputShapes {
                    long_len: self.long_len(ds),
                    video_size: ds.spec.video_size,
                    heatmap_size: ds.spec.heatmap_size,
                    keypoints: ds.spec.keypoints,
                },
            },
            heads,
            num_classes: ds.lexicon.len(),
            gloss_dim: ds.lexicon.dim(),
        }
    }

    pub fn smooth(&self, lexicon: &GlossLexicon, label: usize) -> Result<SoftLabel> {
        match self.smoothing {
            Smoothing::Vanilla => vanilla_soft_label(lexicon.len(), label, self.epsilon),
            Smoothing::Language => {
                language_aware_soft_label(lexicon, label, self.epsilon, self.tau)
            }
        }
    }
}

/// One training example after augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub clips: ClipPair,
    pub label: Vec<f64>,
    /// Convex combination of hard classes the item represents.
    pub classes: Vec<(usize, f64)>,
}

/// Mixing coefficient and partner permutation for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupDraw {
    pub lambda: f64,
    pub partners: Vec<usize>,
}

pub fn sample_mixup<R: Rng + ?Sized>(rng: &mut R, alpha: f64, batch: usize) -> Result<MixupDraw> {
    let beta =
        Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup alpha {alpha}: {e}")))?;
    let lambda = beta.sample(rng);
    let mut partners: Vec<usize> = (0..batch).collect();
    partners.shuffle(rng);
    Ok(MixupDraw { lambda, partners })
}

fn mix(a: &Tensor, b: &Tensor, lambda: f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    Tensor::new(a.shape(), data).expect("mixup partners share shapes")
}

/// `x' = λ·x_a + (1-λ)·x_partner(a)` for all four inputs and the label of
/// every item, with one λ and one pairing for the whole batch.
pub fn apply_mixup(items: &[TrainItem], draw: &MixupDraw) -> Vec<TrainItem> {
    let l = draw.lambda;
    items
        .iter()
        .zip(&draw.partners)
        .map(|(a, &p)| {
            let b = &items[p];
            let mut classes: Vec<(usize, f64)> =
                a.classes.iter().map(|&(c, w)| (c, l * w)).collect();
            classes.extend(b.classes.iter().map(|&(c, w)| (c, (1.0 - l) * w)));
            TrainItem {
                clips: ClipPair {
                    video_long: mix(&a.clips.video_long, &b.clips.video_long, l),
                    heat_long: mix(&a.clips.heat_long, &b.clips.heat_long, l),
                    video_short: mix(&a.clips.video_short, &b.clips.video_short, l),
                    heat_short: mix(&a.clips.heat_short, &b.clips.heat_short, l),
                },
                label: a
                    .label
                    .iter()
                    .zip(&b.label)
                    .map(|(x, y)| l * x + (1.0 - l) * y)
                    .collect(),
                classes,
            }
        })
        .collect()
}

/// Mixes the batch when mixup applies; batches of one are left unchanged.
pub fn intra_modality_mixup<R: Rng + ?Sized>(
    items: Vec<TrainItem>,
    rng: &mut R,
    alpha: f64,
) -> Result<Vec<TrainItem>> {
    if items.len() < 2 {
        log::info!("mixup skipped for a batch of {} item(s)", items.len());
        return Ok(items);
    }
    let draw = sample_mixup(rng, alpha, items.len())?;
    Ok(apply_mixup(&items, &draw))
}

/// Tensors consumed by one optimizer step.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub batch: ClipBatch,
    /// `[B, N]`.
    pub labels: Tensor,
    /// `[B·N, N]` mixing-branch labels.
    pub mixing_labels: Option<Tensor>,
    /// Class with the largest weight per item, used for training accuracy.
    pub dominant: Vec<usize>,
}

impl StepInputs {
    pub fn new(items: &[TrainItem], num_classes: usize, with_mixing: bool) -> Result<Self> {
        let clips: Vec<ClipPair> = items.iter().map(|i| i.clips.clone()).collect();
        let labels = Tensor::new(
            &[items.len(), num_classes],
            items.iter().flat_map(|i| i.label.iter().copied()).collect(),
        )?;
        let mixing_labels = if with_mixing {
            let rows: Vec<Tensor> = items
                .iter()
                .map(|i| imm_targets(num_classes, &i.classes))
                .collect::<Result<_>>()?;
            let data: Vec<f64> = rows.iter().flat_map(|t| t.data().iter().copied()).collect();
            Some(Tensor::new(
                &[items.len() * num_classes, num_classes],
                data,
            )?)
        } else {
            None
        };
        let dominant = items
            .iter()
            .map(|i| dominant_class(&i.classes, num_classes))
            .collect();
        Ok(Self {
            batch: ClipBatch::from_clips(&clips)?,
            labels,
            mixing_labels,
            dominant,
        })
    }
}

fn dominant_class(classes: &[(usize, f64)], n: usize) -> usize {
    let mut w = vec![0.0; n];
    for &(c, x) in classes {
        w[c] += x;
    }
    crate::eval::top_k(&w, 1)[0]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_imm: f64,
    pub correct: usize,
}

/// One iteration: summed head losses, backward, Adam on every parameter,
/// then `fc1 ← μ·fc1 + (1-μ)·fc2` on heads with a mixing branch.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    inputs: &StepInputs,
    embeddings: &Tensor,
    sched: &EpochSchedule,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let mut g = Graph::new(cfg.precision);
    let params = model.store().bind(&mut g);
    let bundle = model.forward(&mut g, &params, &inputs.batch)?;
    let mixing = inputs.mixing_labels.as_ref().map(|l| (embeddings, l));
    let loss = model.loss(
        &mut g,
        &params,
        &bundle,
        &inputs.labels,
        mixing,
        sched.gamma,
    )?;
    let sum = |vs: &[Var]| vs.iter().map(|&v| g.value(v).item()).sum::<f64>();
    let stats = StepStats {
        loss_total: g.value(loss.total).item(),
        loss_cls: sum(&loss.cls),
        loss_imm: sum(&loss.imm),
        correct: model
            .combine_logits(&g, &loss.logits)
            .iter()
            .zip(&inputs.dominant)
            .filter(|(p, &d)| crate::eval::top_k(p, 1)[0] == d)
            .count(),
    };
    if !stats.loss_total.is_finite() {
        return Err(Error::Numerical(format!("loss is {}", stats.loss_total)));
    }
    let grads = g.backward(loss.total)?;
    let updates: Vec<_> = model
        .store()
        .ids()
        .zip(&params)
        .map(|(id, &v)| (id, grads.get_or_zero(v)))
        .collect();
    if let Some((id, _)) = updates.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient for {}",
            model.store().name(*id)
        )));
    }
    adam.step(model.store_mut(), &updates, sched.lr, cfg.weight_decay)?;
    model.integrate(sched.mu)?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub gamma: f64,
    pub mu: f64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_imm: f64,
    pub train_top1: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,gamma,mu,loss_total,loss_cls,loss_imm,train_top1";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.lr, r.gamma, r.mu, r.loss_total, r.loss_cls, r.loss_imm, r.train_top1
        );
    }
    out
}

/// Augmented, smoothed training item for `sample`.
pub fn prepare_item<R: Rng + ?Sized>(
    sample: &RawSample,
    lexicon: &GlossLexicon,
    heatmap: &HeatmapConfig,
    long_len: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainItem> {
    let window = temporal_crop(sample.raw_len(), long_len, CropMode::Train, rng)?;
    let rect = sample_crop_rect(rng, cfg.crop_scale)?;
    Ok(TrainItem {
        clips: extract_clips(sample, &window, heatmap, &rect)?,
        label: cfg.smooth(lexicon, sample.label)?.probs,
        classes: vec![(sample.label, 1.0)],
    })
}

pub struct TrainOutcome {
    pub model: Model,
    pub adam: Adam,
    pub history: Vec<EpochMetrics>,
}

/// Where [`train`] writes its artifacts.
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.tnc";
pub const METRICS_FILE: &str = "metrics.csv";

fn checkpoint_meta(
    model: &Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    adam: &Adam,
) -> CheckpointMeta {
    CheckpointMeta {
        kind: CheckpointKind::Training,
        model: model.config().clone(),
        glosses: ds.lexicon.glosses().to_vec(),
        heatmap: cfg.heatmap(ds),
        precision: cfg.precision,
        epoch,
        optimizer_step: adam.step,
        seed: cfg.seed,
        train: serde_json::to_value(cfg).ok(),
    }
}

/// Trains a fresh model on `ds.train`. All randomness (initialization,
/// shuffling, crops, mixup) derives from `cfg.seed`.
pub fn train(
    cfg: &TrainConfig,
    ds: &Dataset,
    out: Option<TrainOutput>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut model = Model::build(cfg.model_config(ds), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(AdamConfig::default());
    let heatmap = cfg.heatmap(ds);
    let long_len = cfg.long_len(ds);
    let with_mixing = model.heads().iter().any(|h| h.mixing.is_some());
    let embeddings = ds.lexicon.embeddings().clone();
    let n = ds.lexicon.len();
    if let Some(o) = &out {
        fs::create_dir_all(o.dir).map_err(|e| Error::io(o.dir, e))?;
    }

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let sched = EpochSchedule::at(epoch, cfg);
        order.shuffle(&mut rng);
        let (mut total, mut cls, mut imm, mut correct, mut batches) =
            (0.0, 0.0, 0.0, 0usize, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items = chunk
                .iter()
                .map(|&i| {
                    prepare_item(&ds.train[i], &ds.lexicon, &heatmap, long_len, cfg, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let items = if cfg.mixup {
                intra_modality_mixup(items, &mut rng, cfg.mixup_alpha)?
            } else {
                items
            };
            let inputs = StepInputs::new(&items, n, with_mixing)?;
            let stats = train_step(&mut model, &mut adam, &inputs, &embeddings, &sched, cfg)
                .map_err(|e| match e {
                    Error::Numerical(_) => Error::NonFiniteLoss {
                        epoch,
                        batch: bi,
                        samples: chunk.iter().map(|&i| ds.train[i].id.clone()).collect(),
                    },
                    other => other,
                })?;
            total += stats.loss_total;
            cls += stats.loss_cls;
            imm += stats.loss_imm;
            correct += stats.correct;
            batches += 1;
        }
        let b = batches as f64;
        let m = EpochMetrics {
            epoch,
            lr: sched.lr,
            gamma: sched.gamma,
            mu: sched.mu,
            loss_total: total / b,
            loss_cls: cls / b,
            loss_imm: imm / b,
            train_top1: correct as f64 / ds.train.len() as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (cls {:.4}, imm {:.4}) train top-1 {:.3}",
            m.loss_total,
            m.loss_cls,
            m.loss_imm,
            m.train_top1
        );
        on_epoch(&m);
        history.push(m);
        if let Some(o) = &out {
            let done = epoch + 1;
            if cfg
                .checkpoint_every
                .is_some_and(|k| k > 0 && done % k == 0 && done < cfg.epochs)
            {
                let meta = checkpoint_meta(&model, ds, cfg, done, &adam);
                save_checkpoint(
                    &o.dir.join(format!("checkpoint-epoch{done:03}.tnc")),
                    &model,
                    &meta,
                )?;
            }
        }
    }
    if let Some(o) = &out {
        let meta = checkpoint_meta(&model, ds, cfg, cfg.epochs, &adam);
        save_checkpoint(&o.dir.join(CHECKPOINT_FILE), &model, &meta)?;
        let path = o.dir.join(METRICS_FILE);
        fs::write(&path, metrics_csv(&history)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome {
        model,
        adam,
        history,
    })
}
