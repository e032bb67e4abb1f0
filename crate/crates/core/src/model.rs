//! Backbone plus heads, input batching, and checkpoint (de)serialization.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensornet::{Checkpoint, Graph, ParamId, ParamStore, Precision, Tensor, Var};

use crate::error::{Error, Result};
use crate::heads::{head_loss, Head, MixingTargets};
use crate::heatmap::HeatmapConfig;
use crate::synthdata::ClipPair;
use crate::vknet::{Feature, FeatureBundle, VkNet, VkNetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsConfig {
    /// Features that get a head.
    pub features: Vec<Feature>,
    /// Heads that also train the inter-modality mixing branch.
    pub mixing: Vec<Feature>,
    /// Heads whose softmax outputs are averaged at inference.
    pub inference: Vec<Feature>,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            features: Feature::ALL.to_vec(),
            mixing: Feature::ALL.to_vec(),
            inference: Feature::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vknet: VkNetConfig,
    pub heads: HeadsConfig,
    pub num_classes: usize,
    pub gloss_dim: usize,
}

/// Inputs for a batch of clips, one `[B,T,H,W,C]` tensor per stream in
/// [`crate::vknet::Stream::ALL`] order. Video values are centered and
/// scaled from `[0, 1]` to `[-2, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBatch {
    pub inputs: [Tensor; 4],
}

const VIDEO_MEAN: f64 = 0.5;
const VIDEO_SCALE: f64 = 4.0;

impl ClipBatch {
    pub fn from_clips(clips: &[ClipPair]) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let stack = |f: &dyn Fn(&ClipPair) -> &Tensor| -> Result<Tensor> {
            let items: Vec<&Tensor> = clips.iter().map(f).collect();
            Ok(Tensor::stack(&items)?)
        };
        let normalize = |t: Tensor| t.map(|v| (v - VIDEO_MEAN) * VIDEO_SCALE);
        Ok(Self {
            inputs: [
                normalize(stack(&|c| &c.video_long)?),
                stack(&|c| &c.heat_long)?,
                normalize(stack(&|c| &c.video_short)?),
                stack(&|c| &c.heat_short)?,
            ],
        })
    }

    pub fn len(&self) -> usize {
        self.inputs[0].shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Summed losses over all heads.
#[derive(Debug, Clone)]
pub struct ModelLoss {
    pub total: Var,
    pub cls: Vec<Var>,
    pub imm: Vec<Var>,
    /// `(feature, fc1 logits)` per head.
    pub logits: Vec<(Feature, Var)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    net: VkNet,
    heads: Vec<Head>,
}

fn validate_heads(h: &HeadsConfig) -> Result<()> {
    if h.features.is_empty() {
        return Err(Error::Config("at least one head is required".into()));
    }
    for (what, list) in [("mixing", &h.mixing), ("inference", &h.inference)] {
        if let Some(f) = list.iter().find(|f| !h.features.contains(f)) {
            return Err(Error::Config(format!(
                "{what} head {} has no head (heads: {:?})",
                f.name(),
                h.features
            )));
        }
    }
    if h.inference.is_empty() {
        return Err(Error::Config(
            "at least one inference head is required".into(),
        ));
    }
    let mut seen = h.features.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != h.features.len() {
        return Err(Error::Config(format!(
            "duplicate heads in {:?}",
            h.features
        )));
    }
    Ok(())
}

impl Model {
    /// Fresh model; parameter values are a pure function of `(config, seed)`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        validate_heads(&config.heads)?;
        if config.num_classes < 2 {
            return Err(Error::InvalidVocabulary(format!(
                "need at least 2 classes, got {}",
                config.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = VkNet::build(config.vknet.clone(), &mut store, &mut rng)?;
        let heads = config
            .heads
            .features
            .iter()
            .map(|&f| {
                let gloss = config.heads.mixing.contains(&f).then_some(config.gloss_dim);
                Head::new(
                    &mut store,
                    f,
                    net.feature_dim(f),
                    config.num_classes,
                    gloss,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            store,
            net,
            heads,
        })
    }

    /// Model with parameter values (and optimizer moments) taken by name
    /// from `values`, which must provide every parameter of `config`.
    pub fn from_store(config: ModelConfig, values: &ParamStore) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let src = values
                .by_name(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {name}")))?;
            let dst = model.store.get_mut(id);
            if src.value.shape() != dst.value.shape() {
                return Err(Error::Data(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.value.shape(),
                    dst.value.shape()
                )));
            }
            *dst = src.clone();
        }
        if values.len() != model.store.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} parameters, model expects {}",
                values.len(),
                model.store.len()
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn net(&self) -> &VkNet {
        &self.net
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        batch: &ClipBatch,
    ) -> Result<FeatureBundle> {
        let inputs = [0, 1, 2, 3].map(|i| g.constant(batch.inputs[i].clone()));
        self.net.forward(g, params, inputs)
    }

    /// Sum over heads of `L_cls + γ·L_imm`. `labels` is `[B, N]`; `mixing`
    /// carries the gloss embeddings `[N, d_e]` and mixing labels `[B·N, N]`.
    pub fn loss(
        &self,
        g: &mut Graph,
        params: &[Var],
        bundle: &FeatureBundle,
        labels: &Tensor,
        mixing: Option<(&Tensor, &Tensor)>,
        gamma: f64,
    ) -> Result<ModelLoss> {
        let targets = match mixing {
            Some((emb, labels)) => Some(MixingTargets {
                embeddings: g.constant(emb.clone()),
                labels,
            }),
            None => None,
        };
        let mut total: Option<Var> = None;
        let mut out = ModelLoss {
            total: bundle.joint,
            cls: Vec::new(),
            imm: Vec::new(),
            logits: Vec::new(),
        };
        for head in &self.heads {
            let l = head_loss(
                g,
                params,
                head,
                bundle.get(head.feature),
                labels,
                targets.as_ref(),
                gamma,
            )?;
            total = Some(match total {
                Some(t) => g.add(t, l.total)?,
                None => l.total,
            });
            out.cls.push(l.cls);
            out.imm.extend(l.imm);
            out.logits.push((head.feature, l.logits));
        }
        out.total = total.expect("at least one head");
        Ok(out)
    }

    /// Mean of the inference heads' softmax outputs, from already computed
    /// fc1 logits.
    pub fn combine_logits(&self, g: &Graph, logits: &[(Feature, Var)]) -> Vec<Vec<f64>> {
        let n = self.config.num_classes;
        let chosen: Vec<Var> = logits
            .iter()
            .filter(|(f, _)| self.config.heads.inference.contains(f))
            .map(|&(_, v)| v)
            .collect();
        let rows = g.shape(chosen[0])[0];
        let mut probs = vec![vec![0.0; n]; rows];
        for &v in &chosen {
            for (r, z) in g.value(v).data().chunks(n).enumerate() {
                let mut p = z.to_vec();
                tensornet::softmax_in_place(&mut p);
                for (acc, x) in probs[r].iter_mut().zip(p) {
                    *acc += x;
                }
            }
        }
        let k = chosen.len() as f64;
        for row in probs.iter_mut() {
            for p in row.iter_mut() {
                *p /= k;
            }
        }
        probs
    }

    /// Class probabilities for every clip in `batch`: the mean over the
    /// inference heads of `softmax(fc1(feature))`.
    pub fn predict(&self, batch: &ClipBatch, precision: Precision) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(precision);
        let params: Vec<Var> = self
            .store
            .iter()
            .map(|(_, _, p)| g.constant(p.value.clone()))
            .collect();
        let bundle = self.forward(&mut g, &params, batch)?;
        let mut logits = Vec::new();
        for head in self
            .heads
            .iter()
            .filter(|h| self.config.heads.inference.contains(&h.feature))
        {
            let z = head.fc1.apply(&mut g, &params, bundle.get(head.feature))?;
            logits.push((head.feature, z));
        }
        Ok(self.combine_logits(&g, &logits))
    }

    /// `θ1 ← μθ1 + (1-μ)θ2` on every head with a mixing branch.
    pub fn integrate(&mut self, mu: f64) -> Result<()> {
        for head in &self.heads {
            if let Some(b) = &head.mixing {
                crate::heads::integrate_classifiers(&mut self.store, &head.fc1, &b.fc2, mu)?;
            }
        }
        Ok(())
    }

    /// Copy keeping only the backbone and the inference heads' `fc1`.
    pub fn to_inference(&self) -> Result<Self> {
        let mut config = self.config.clone();
        config.heads.features = config.heads.inference.clone();
        config.heads.mixing.clear();
        let mut store = self.store.clone();
        let keep: Vec<String> = config
            .heads
            .features
            .iter()
            .map(|f| format!("heads/{}/fc1/", f.name()))
            .collect();
        store.retain(|name| name.starts_with("vknet/") || keep.iter().any(|k| name.starts_with(k)));
        let mut model = Self::from_store(config, &store)?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let p = model.store.get_mut(id);
            p.first_moment.iter_mut().for_each(|m| *m = 0.0);
            p.second_moment.iter_mut().for_each(|m| *m = 0.0);
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Training,
    Inference,
}

/// JSON metadata stored inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub glosses: Vec<String>,
    /// Heatmap rendering used during training; inference must match it.
    pub heatmap: HeatmapConfig,
    pub precision: Precision,
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer_step: u64,
    pub seed: u64,
    #[serde(default)]
    pub train: Option<serde_json::Value>,
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let json = serde_json::to_string(meta).map_err(|e| Error::format(path, e))?;
    let with_moments = meta.kind == CheckpointKind::Training;
    let ckpt = Checkpoint::from_store(model.store(), json, with_moments, Precision::F64);
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::read_from(bytes.as_slice())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&ckpt.metadata).map_err(|e| Error::format(path, e))?;
    let model = Model::from_store(meta.model.clone(), &ckpt.to_store()?)?;
    Ok((model, meta))
}

/// Inference-only copy of a checkpoint: backbone and retained `fc1` layers,
/// no optimizer moments.
pub fn export_inference(model: &Model, meta: &CheckpointMeta) -> Result<(Model, CheckpointMeta)> {
    let inference = model.to_inference()?;
    let meta = CheckpointMeta {
        kind: CheckpointKind::Inference,
        model: inference.config().clone(),
        ..meta.clone()
    };
    Ok((inference, meta))
}
