//! Per-feature head networks.
//!
//! Each head owns a classifier (`fc1`) trained on smoothed labels. Heads
//! with the inter-modality branch also own an auxiliary classifier (`fc2`)
//! and a gloss mapping layer that projects gloss embeddings into the
//! feature space. The auxiliary classifier sees every visual feature summed
//! with every mapped gloss and is supervised with half-half labels; after
//! each optimizer step `fc1` is pulled towards `fc2` by an exponential
//! moving average. Only `fc1` is used at inference.

use rand::Rng;
use tensornet::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::glosslex::SoftLabel;
use crate::vknet::Feature;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// `din → dout` layer with uniform `±1/√din` weights and zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert_uniform(format!("{prefix}/weight"), &[din, dout], din, rng)?;
        let bias = store.insert(format!("{prefix}/bias"), Tensor::zeros(&[dout]))?;
        Ok(Self { weight, bias })
    }

    pub fn apply(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        Ok(g.linear(x, params[self.weight.0], Some(params[self.bias.0]))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub feature: Feature,
    pub fc1: Linear,
    /// Auxiliary classifier and gloss mapping, present when the head trains
    /// the inter-modality branch.
    pub mixing: Option<MixingBranch>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingBranch {
    pub fc2: Linear,
    pub gloss_map: Linear,
}

impl Head {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        feature: Feature,
        feature_dim: usize,
        num_classes: usize,
        gloss_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let prefix = format!("heads/{}", feature.name());
        let fc1 = Linear::new(
            store,
            &format!("{prefix}/fc1"),
            feature_dim,
            num_classes,
            rng,
        )?;
        let mixing = match gloss_dim {
            Some(d) => Some(MixingBranch {
                fc2: Linear::new(
                    store,
                    &format!("{prefix}/fc2"),
                    feature_dim,
                    num_classes,
                    rng,
                )?,
                gloss_map: Linear::new(store, &format!("{prefix}/gloss_map"), d, feature_dim, rng)?,
            }),
            None => None,
        };
        Ok(Self {
            feature,
            fc1,
            mixing,
        })
    }
}

/// Label for the mix of class `b` with gloss `n`: half on each, or one-hot
/// when they coincide.
pub fn imm_label(n_classes: usize, b: usize, n: usize) -> Result<SoftLabel> {
    if n_classes == 0 {
        return Err(Error::InvalidVocabulary("no classes".into()));
    }
    if b >= n_classes || n >= n_classes {
        return Err(Error::InvalidParameter(format!(
            "class {b} / gloss {n} out of range for {n_classes} classes"
        )));
    }
    let mut probs = vec![0.0; n_classes];
    probs[b] += 0.5;
    probs[n] += 0.5;
    Ok(SoftLabel { probs, target: b })
}

/// `[N, N]` targets for one sample whose label is the convex mix `mix` of
/// classes: row `n` is `Σ w · imm_label(b, n)`.
pub fn imm_targets(n_classes: usize, mix: &[(usize, f64)]) -> Result<Tensor> {
    let mut data = vec![0.0; n_classes * n_classes];
    for &(b, w) in mix {
        for n in 0..n_classes {
            let y = imm_label(n_classes, b, n)?;
            for (d, p) in data[n * n_classes..(n + 1) * n_classes]
                .iter_mut()
                .zip(&y.probs)
            {
                *d += w * p;
            }
        }
    }
    Ok(Tensor::new(&[n_classes, n_classes], data)?)
}

/// `F[b·N + n] = f[b] + gloss_map(E)[n]` for `f: [B, D]` and constant
/// gloss embeddings `E: [N, d_e]`.
pub fn inter_modality_features(
    g: &mut Graph,
    params: &[Var],
    f: Var,
    embeddings: Var,
    gloss_map: &Linear,
) -> Result<Var> {
    let mapped = gloss_map.apply(g, params, embeddings)?;
    Ok(g.broadcast_rows(f, mapped)?)
}

/// Mean soft cross entropy of `fc2` over all mixed rows.
pub fn imm_loss(
    g: &mut Graph,
    params: &[Var],
    mixed: Var,
    fc2: &Linear,
    targets: &Tensor,
) -> Result<Var> {
    if targets.rank() != 2 || targets.shape()[1] == 0 {
        return Err(Error::InvalidVocabulary(format!(
            "mixing targets of shape {:?} have no classes",
            targets.shape()
        )));
    }
    let logits = fc2.apply(g, params, mixed)?;
    Ok(g.soft_cross_entropy(logits, targets)?)
}

#[derive(Debug, Clone, Copy)]
pub struct HeadLosses {
    pub cls: Var,
    pub imm: Option<Var>,
    pub total: Var,
    pub logits: Var,
}

/// Targets for the mixing branch: constant gloss embeddings `[N, d_e]` and
/// per-row labels `[B·N, N]`.
pub struct MixingTargets<'a> {
    pub embeddings: Var,
    pub labels: &'a Tensor,
}

/// `L_cls + γ·L_imm` for one head. The mixing term is skipped when the head
/// has no mixing branch or `mixing` is `None`.
pub fn head_loss(
    g: &mut Graph,
    params: &[Var],
    head: &Head,
    f: Var,
    labels: &Tensor,
    mixing: Option<&MixingTargets>,
    gamma: f64,
) -> Result<HeadLosses> {
    let logits = head.fc1.apply(g, params, f)?;
    let cls = g.soft_cross_entropy(logits, labels)?;
    let (imm, total) = match (head.mixing.as_ref(), mixing) {
        (Some(branch), Some(t)) => {
            let mixed = inter_modality_features(g, params, f, t.embeddings, &branch.gloss_map)?;
            let imm = imm_loss(g, params, mixed, &branch.fc2, t.labels)?;
            let weighted = g.scale(imm, gamma);
            (Some(imm), g.add(cls, weighted)?)
        }
        _ => (None, cls),
    };
    Ok(HeadLosses {
        cls,
        imm,
        total,
        logits,
    })
}

/// `θ1 ← μ·θ1 + (1-μ)·θ2` for weights and biases.
pub fn integrate_classifiers(
    store: &mut ParamStore,
    fc1: &Linear,
    fc2: &Linear,
    mu: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::InvalidParameter(format!(
            "mu must lie in [0, 1], got {mu}"
        )));
    }
    for (dst, src) in [(fc1.weight, fc2.weight), (fc1.bias, fc2.bias)] {
        if store.get(dst).value.shape() != store.get(src).value.shape() {
            return Err(Error::Shape(format!(
                "cannot integrate {} {:?} with {} {:?}",
                store.name(dst),
                store.get(dst).value.shape(),
                store.name(src),
                store.get(src).value.shape()
            )));
        }
        let theta2 = store.get(src).value.data().to_vec();
        for (a, b) in store.get_mut(dst).value.data_mut().iter_mut().zip(theta2) {
            // Equal entries are left untouched so that θ1 = θ2 is an exact fixed point.
            if *a != b {
                *a = mu * *a + (1.0 - mu) * b;
            }
        }
    }
    Ok(())
}

/// Class probabilities from `fc1` alone.
pub fn head_predict(g: &mut Graph, params: &[Var], f: Var, fc1: &Linear) -> Result<Var> {
    let logits = fc1.apply(g, params, f)?;
    Ok(g.softmax(logits)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imm_label_reference_values() {
        assert_eq!(imm_label(4, 1, 3).unwrap().probs, vec![0.0, 0.5, 0.0, 0.5]);
        assert_eq!(imm_label(4, 1, 1).unwrap().probs, vec![0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            imm_label(0, 0, 0),
            Err(Error::InvalidVocabulary(_))
        ));
    }

    #[test]
    fn imm_label_matrix_structure() {
        for n in 1..=100 {
            let b = n / 3;
            for row in 0..n {
                let y = imm_label(n, b, row).unwrap();
                assert!(y.probs[b] >= 0.5);
                assert_eq!(y.probs.iter().sum::<f64>(), 1.0);
                if row == b {
                    assert_eq!(y.probs[b], 1.0);
                }
            }
        }
    }

    #[test]
    fn integration_endpoints() {
        let mut store = ParamStore::new();
        let mk = |store: &mut ParamStore, p: &str, v: f64| Linear {
            weight: store
                .insert(format!("{p}/w"), Tensor::full(&[1, 1], v))
                .unwrap(),
            bias: store
                .insert(format!("{p}/b"), Tensor::full(&[1], v))
                .unwrap(),
        };
        let fc1 = mk(&mut store, "a", 1.0);
        let fc2 = mk(&mut store, "b", 0.0);
        integrate_classifiers(&mut store, &fc1, &fc2, 0.99).unwrap();
        assert_eq!(store.get(fc1.weight).value.item(), 0.99);
        assert_eq!(store.get(fc1.bias).value.item(), 0.99);
        integrate_classifiers(&mut store, &fc1, &fc2, 1.0).unwrap();
        assert_eq!(store.get(fc1.weight).value.item(), 0.99);
        integrate_classifiers(&mut store, &fc1, &fc2, 0.0).unwrap();
        assert_eq!(store.get(fc1.weight).value.item(), 0.0);
        assert!(integrate_classifiers(&mut store, &fc1, &fc2, 1.5).is_err());
    }
}
