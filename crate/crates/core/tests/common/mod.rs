#![allow(dead_code)]

use nla_slr::model::{ClipBatch, HeadsConfig, Model, ModelConfig};
use nla_slr::synthdata::{generate_dataset, Dataset, SynthSpec};
use nla_slr::trainer::TrainConfig;
use nla_slr::vknet::{BlockConfig, InputShapes, LateralConfig, Stream, VkNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensornet::Tensor;

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn tiny_blocks() -> Vec<BlockConfig> {
    vec![
        BlockConfig::new(2, 2, 1),
        BlockConfig::new(3, 1, 1),
        BlockConfig::new(2, 1, 1),
        BlockConfig::new(3, 1, 1),
        BlockConfig::new(2, 1, 1),
    ]
}

pub fn tiny_inputs() -> InputShapes {
    InputShapes {
        long_len: 4,
        video_size: [8, 8],
        heatmap_size: [4, 4],
        keypoints: 2,
    }
}

pub fn tiny_vknet(laterals: LateralConfig) -> VkNetConfig {
    VkNetConfig {
        blocks: tiny_blocks(),
        laterals,
        inputs: tiny_inputs(),
    }
}

pub fn tiny_model_config(num_classes: usize, gloss_dim: usize) -> ModelConfig {
    ModelConfig {
        vknet: tiny_vknet(LateralConfig::all()),
        heads: HeadsConfig::default(),
        num_classes,
        gloss_dim,
    }
}

pub fn tiny_model(seed: u64) -> Model {
    Model::build(tiny_model_config(4, 5), seed).unwrap()
}

/// Random inputs matching [`tiny_inputs`].
pub fn random_batch(rng: &mut impl Rng, batch: usize) -> ClipBatch {
    let inputs = tiny_inputs();
    ClipBatch {
        inputs: Stream::ALL.map(|s| {
            let [t, h, w, c] = s.input_shape(&inputs);
            rand_tensor(rng, &[batch, t, h, w, c])
        }),
    }
}

pub fn tiny_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        num_classes: 6,
        similar_pairs: 1,
        distinct_pairs: 1,
        train_per_class: 2,
        dev_per_class: 1,
        test_per_class: 2,
        raw_len: 6,
        long_len: 4,
        video_size: [8, 8],
        heatmap_size: [4, 4],
        keypoints: 2,
        embedding_dim: 8,
        seed,
        ..SynthSpec::default()
    }
}

pub fn tiny_dataset(seed: u64) -> Dataset {
    generate_dataset(&tiny_spec(seed)).unwrap()
}

pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        blocks: tiny_blocks(),
        ..TrainConfig::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference check of the summed training loss of a tiny model
/// (backbone with all laterals, every head with its mixing branch) with
/// respect to every parameter.
pub fn composite_gradcheck(seed: u64, entries_per_param: usize) -> tensornet::GradCheckReport {
    use nla_slr::heads::imm_targets;
    use tensornet::{finite_difference_check, GradCheckOptions};

    let model = tiny_model(seed);
    let mut rng = rng(seed + 1);
    let batch = random_batch(&mut rng, 2);
    let n = 4;
    let labels = Tensor::new(&[2, n], vec![0.7, 0.1, 0.1, 0.1, 0.05, 0.05, 0.3, 0.6]).unwrap();
    let embeddings = rand_tensor(&mut rng, &[n, 5]);
    let mix_rows: Vec<f64> = [vec![(0, 0.6), (2, 0.4)], vec![(3, 1.0)]]
        .iter()
        .flat_map(|m| imm_targets(n, m).unwrap().data().to_vec())
        .collect();
    let mixing = Tensor::new(&[2 * n, n], mix_rows).unwrap();
    let values: Vec<Tensor> = model
        .store()
        .iter()
        .map(|(_, _, p)| p.value.clone())
        .collect();
    finite_difference_check(
        &values,
        |g, params| {
            let bundle = model.forward(g, params, &batch).map_err(to_tensor_err)?;
            let loss = model
                .loss(
                    g,
                    params,
                    &bundle,
                    &labels,
                    Some((&embeddings, &mixing)),
                    0.7,
                )
                .map_err(to_tensor_err)?;
            Ok(loss.total)
        },
        GradCheckOptions {
            seed,
            max_entries_per_input: Some(entries_per_param),
            ..Default::default()
        },
    )
    .unwrap()
}

fn to_tensor_err(e: nla_slr::Error) -> tensornet::TensorError {
    match e {
        nla_slr::Error::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

pub struct TraceReport {
    pub loss_error: f64,
    pub fc1_grad_error: f64,
    pub param_error: f64,
    pub params_checked: usize,
}

fn affine_rows(x: &[f64], din: usize, w: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let dout = b.len();
    x.chunks(din)
        .map(|row| {
            (0..dout)
                .map(|o| {
                    b[o] + row
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * w[i * dout + o])
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn mean_cross_entropy(logits: &[Vec<f64>], targets: &[f64], n: usize) -> f64 {
    logits
        .iter()
        .enumerate()
        .map(|(r, z)| {
            let p = softmax_row(z);
            -(0..n).map(|c| targets[r * n + c] * p[c].ln()).sum::<f64>()
        })
        .sum::<f64>()
        / logits.len() as f64
}

/// Runs one warm-up step and then one traced training step on a mixed
/// two-sample batch, and compares the trainer against a hand evaluation:
/// loss from the backbone features, `fc1` gradients in closed form, the
/// Adam recurrence, and the classifier integration.
pub fn single_step_trace() -> TraceReport {
    use nla_slr::heads::imm_label;
    use nla_slr::synthdata::ClipPair;
    use nla_slr::trainer::{
        apply_mixup, train_step, EpochSchedule, MixupDraw, StepInputs, TrainItem,
    };
    use tensornet::{Adam, AdamConfig, Graph, Precision};

    let n = 4;
    let de = 5;
    let mut model = tiny_model(11);
    let mut rng = rng(12);
    let shapes = tiny_inputs();
    let clip = |rng: &mut ChaCha8Rng| {
        let [a, b, c, d] = Stream::ALL.map(|s| {
            let sh = s.input_shape(&shapes);
            Tensor::from_fn(&sh, |_| rng.gen_range(0.0..1.0))
        });
        ClipPair {
            video_long: a,
            heat_long: b,
            video_short: c,
            heat_short: d,
        }
    };
    let items = vec![
        TrainItem {
            clips: clip(&mut rng),
            label: vec![0.8, 0.1, 0.06, 0.04],
            classes: vec![(0, 1.0)],
        },
        TrainItem {
            clips: clip(&mut rng),
            label: vec![0.02, 0.03, 0.15, 0.8],
            classes: vec![(3, 1.0)],
        },
    ];
    let draw = MixupDraw {
        lambda: 0.3,
        partners: vec![1, 0],
    };
    let mixed = apply_mixup(&items, &draw);
    let inputs = StepInputs::new(&mixed, n, true).unwrap();
    let embeddings = rand_tensor(&mut rng, &[n, de]);
    let cfg = TrainConfig {
        precision: Precision::F64,
        weight_decay: 1e-3,
        ..TrainConfig::default()
    };
    let sched = EpochSchedule {
        lr: 1e-3,
        gamma: 0.6,
        mu: 0.99,
    };
    let mut adam = Adam::new(AdamConfig::default());
    train_step(&mut model, &mut adam, &inputs, &embeddings, &sched, &cfg).unwrap();

    // State before the traced step.
    let before = model.store().clone();
    let step_before = adam.step;

    // Loss by hand from the backbone features; gradients from the tape.
    let mut g = Graph::new(Precision::F64);
    let params = before.bind(&mut g);
    let bundle = model.forward(&mut g, &params, &inputs.batch).unwrap();
    let mut hand_loss = 0.0;
    let mut fc1_grads = Vec::new();
    let labels = inputs.labels.data();
    let mix_labels = inputs.mixing_labels.as_ref().unwrap().data();
    // Mixing labels must equal the λ-blend of the two partners' imm labels.
    for (i, classes) in [
        (0usize, [(0usize, 0.3), (3, 0.7)]),
        (1, [(3, 0.3), (0, 0.7)]),
    ] {
        for m in 0..n {
            for c in 0..n {
                let want: f64 = classes
                    .iter()
                    .map(|&(b, w)| w * imm_label(n, b, m).unwrap().probs[c])
                    .sum();
                assert!((mix_labels[(i * n + m) * n + c] - want).abs() < 1e-15);
            }
        }
    }
    for head in model.heads() {
        let f = g.value(bundle.get(head.feature)).data().to_vec();
        let dim = f.len() / 2;
        let w1 = before.get(head.fc1.weight).value.data();
        let b1 = before.get(head.fc1.bias).value.data();
        let z = affine_rows(&f, dim, w1, b1);
        let cls = mean_cross_entropy(&z, labels, n);
        // dL/dW1[i][o] = Σ_r f[r][i] (p[r][o] - y[r][o]) / B
        let mut gw = vec![0.0; dim * n];
        for (r, zr) in z.iter().enumerate() {
            let p = softmax_row(zr);
            for i in 0..dim {
                for o in 0..n {
                    gw[i * n + o] += f[r * dim + i] * (p[o] - labels[r * n + o]) / 2.0;
                }
            }
        }
        fc1_grads.push((head.fc1.weight, gw));
        let branch = head.mixing.unwrap();
        let wm = before.get(branch.gloss_map.weight).value.data();
        let bm = before.get(branch.gloss_map.bias).value.data();
        let mapped = affine_rows(embeddings.data(), de, wm, bm);
        let mut rows = Vec::new();
        for r in 0..2 {
            for m in mapped.iter() {
                rows.extend((0..dim).map(|i| f[r * dim + i] + m[i]));
            }
        }
        let w2 = before.get(branch.fc2.weight).value.data();
        let b2 = before.get(branch.fc2.bias).value.data();
        let imm = mean_cross_entropy(&affine_rows(&rows, dim, w2, b2), mix_labels, n);
        hand_loss += cls + sched.gamma * imm;
    }
    let loss = model
        .loss(
            &mut g,
            &params,
            &bundle,
            &inputs.labels,
            Some((&embeddings, inputs.mixing_labels.as_ref().unwrap())),
            sched.gamma,
        )
        .unwrap();
    let grads = g.backward(loss.total).unwrap();
    let mut fc1_grad_error: f64 = 0.0;
    for (id, gw) in &fc1_grads {
        let tape = grads.get_or_zero(params[id.0]);
        for (a, b) in tape.data().iter().zip(gw) {
            fc1_grad_error = fc1_grad_error.max((a - b).abs());
        }
    }

    // Hand Adam recurrence followed by the integration.
    let AdamConfig { beta1, beta2, eps } = AdamConfig::default();
    let t = (step_before + 1) as i32;
    let mut expected = before.clone();
    for (k, id) in before.ids().enumerate() {
        let grad = grads.get_or_zero(params[k]);
        let p = expected.get_mut(id);
        for e in 0..p.value.len() {
            let theta = p.value.data()[e];
            let gi = grad.data()[e] + cfg.weight_decay * theta;
            let m = beta1 * p.first_moment[e] + (1.0 - beta1) * gi;
            let v = beta2 * p.second_moment[e] + (1.0 - beta2) * gi * gi;
            let m_hat = m / (1.0 - beta1.powi(t));
            let v_hat = v / (1.0 - beta2.powi(t));
            p.first_moment[e] = m;
            p.second_moment[e] = v;
            p.value.data_mut()[e] = theta - sched.lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    for head in model.heads() {
        let branch = head.mixing.unwrap();
        for (a, b) in [
            (head.fc1.weight, branch.fc2.weight),
            (head.fc1.bias, branch.fc2.bias),
        ] {
            let theta2 = expected.get(b).value.clone();
            let p = expected.get_mut(a);
            for (x, y) in p.value.data_mut().iter_mut().zip(theta2.data()) {
                *x = sched.mu * *x + (1.0 - sched.mu) * y;
            }
        }
    }

    let stats = train_step(&mut model, &mut adam, &inputs, &embeddings, &sched, &cfg).unwrap();
    let mut param_error: f64 = 0.0;
    let mut params_checked = 0;
    for ((_, name, got), (_, _, want)) in model.store().iter().zip(expected.iter()) {
        for (a, b) in got.value.data().iter().zip(want.value.data()) {
            let d = (a - b).abs();
            assert!(d.is_finite(), "{name}");
            param_error = param_error.max(d);
            params_checked += 1;
        }
    }
    TraceReport {
        loss_error: (stats.loss_total - hand_loss).abs(),
        fc1_grad_error,
        param_error,
        params_checked,
    }
}

/// Rank of the true class under "higher probability first, lower index
/// on ties", counted by brute force.
fn brute_rank(p: &[f64], label: usize) -> usize {
    (0..p.len())
        .filter(|&c| p[c] > p[label] || (p[c] == p[label] && c < label))
        .count()
}

/// `(per-instance, per-class)` top-k accuracy by explicit loops.
pub fn brute_force_accuracy(preds: &[Vec<f64>], labels: &[usize], k: usize) -> (f64, f64) {
    let hits: Vec<bool> = preds
        .iter()
        .zip(labels)
        .map(|(p, &l)| brute_rank(p, l) < k)
        .collect();
    let instance = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
    let n = preds[0].len();
    let mut class_sum = 0.0;
    let mut classes = 0;
    for c in 0..n {
        let mut total = 0;
        let mut ok = 0;
        for (i, &l) in labels.iter().enumerate() {
            if l == c {
                total += 1;
                if hits[i] {
                    ok += 1;
                }
            }
        }
        if total > 0 {
            class_sum += ok as f64 / total as f64;
            classes += 1;
        }
    }
    (instance, class_sum / classes as f64)
}

/// Random prediction set with deliberate ties and some absent classes.
pub fn random_predictions(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = rng(seed);
    let n = rng.gen_range(2..12);
    let m = rng.gen_range(1..40);
    let preds = (0..m)
        .map(|_| {
            let raw: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..6) as f64) + 0.5).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    let labels = (0..m).map(|_| rng.gen_range(0..n)).collect();
    (preds, labels)
}
