//! Synthetic sign dataset with controllable visual confusability and gloss
//! embedding similarity.
//!
//! Every class owns a motion program: `K` keypoints following smooth
//! sinusoidal trajectories. Classes that form a visually indistinguishable
//! pair share one program and differ only by a constant per-keypoint offset
//! of length `confusability`. The RGB video draws each keypoint as a colored
//! disc over a textured background; the keypoint stream records the same
//! coordinates with jitter and occasional detection dropouts.

mod crop;
mod io;

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tensornet::Tensor;

use crate::error::{Error, Result};
use crate::glosslex::GlossLexicon;
use crate::heatmap::KeypointFrame;

pub use crop::{
    crop_resize, extract_clips, sample_crop_rect, spatial_crop_pair, temporal_crop,
    three_crop_windows, ClipPair, CropMode, CropRect, TemporalWindow,
};
pub use io::{
    load_dataset, read_raw_tensor, save_dataset, write_raw_tensor, Manifest, SampleRecord,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// Confusable pairs whose glosses are semantically similar.
    pub similar_pairs: usize,
    /// Confusable pairs whose glosses are semantically distinct.
    pub distinct_pairs: usize,
    pub train_per_class: usize,
    pub dev_per_class: usize,
    pub test_per_class: usize,
    pub raw_len: usize,
    pub long_len: usize,
    /// `[height, width]` of the RGB frames.
    pub video_size: [usize; 2],
    /// `[height, width]` of the keypoint heatmaps.
    pub heatmap_size: [usize; 2],
    pub keypoints: usize,
    pub embedding_dim: usize,
    pub similar_cosine: f64,
    pub distinct_cosine: f64,
    /// Target cosine between glosses outside a pair.
    pub background_cosine: f64,
    /// Half-width of the uniform jitter applied to background cosines.
    pub cosine_jitter: f64,
    /// Offset (normalized image units) separating the two members of a pair.
    pub confusability: f64,
    /// Minimum mean trajectory distance between unrelated motion programs.
    pub separation: f64,
    pub disc_radius: f64,
    /// Per-frame keypoint noise (normalized units, standard deviation).
    pub frame_jitter: f64,
    /// Per-sample global translation (normalized units, standard deviation).
    pub sample_shift: f64,
    /// Per-sample phase perturbation (radians, half-width).
    pub phase_jitter: f64,
    /// Per-sample tempo perturbation (relative, half-width).
    pub tempo_jitter: f64,
    pub pixel_noise: f64,
    /// Probability that a keypoint detection is marked invalid.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            similar_pairs: 4,
            distinct_pairs: 4,
            train_per_class: 10,
            dev_per_class: 2,
            test_per_class: 10,
            raw_len: 24,
            long_len: 16,
            video_size: [32, 32],
            heatmap_size: [16, 16],
            keypoints: 8,
            embedding_dim: 300,
            similar_cosine: 0.8,
            distinct_cosine: 0.1,
            background_cosine: 0.0,
            cosine_jitter: 0.05,
            confusability: 0.05,
            separation: 0.15,
            disc_radius: 0.07,
            frame_jitter: 0.01,
            sample_shift: 0.03,
            phase_jitter: 0.3,
            tempo_jitter: 0.1,
            pixel_noise: 0.03,
            dropout: 0.02,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if 2 * (self.similar_pairs + self.distinct_pairs) > self.num_classes {
            return fail(format!(
                "{} pairs need {} classes but only {} exist",
                self.similar_pairs + self.distinct_pairs,
                2 * (self.similar_pairs + self.distinct_pairs),
                self.num_classes
            ));
        }
        if self.long_len < 2 || self.long_len % 2 != 0 {
            return fail(format!(
                "long clip length must be even and >= 2, got {}",
                self.long_len
            ));
        }
        if self.raw_len < self.long_len {
            return fail(format!(
                "raw length {} is shorter than the long clip {}",
                self.raw_len, self.long_len
            ));
        }
        if self.video_size.contains(&0) || self.heatmap_size.contains(&0) || self.keypoints == 0 {
            return fail("video size, heatmap size and keypoint count must be positive".into());
        }
        if self.embedding_dim == 0 {
            return fail("embedding dimension must be positive".into());
        }
        if self.train_per_class == 0 {
            return fail("every class needs at least one training sample".into());
        }
        for (name, c) in [
            ("similar_cosine", self.similar_cosine),
            ("distinct_cosine", self.distinct_cosine),
        ] {
            if !(-1.0..=1.0).contains(&c) {
                return fail(format!("{name} = {c} is not a cosine"));
            }
        }
        let lo = self.background_cosine - self.cosine_jitter;
        let hi = self.background_cosine + self.cosine_jitter;
        if lo < -1.0 || hi > 1.0 || self.cosine_jitter < 0.0 {
            return fail(format!("background cosines [{lo}, {hi}] leave [-1, 1]"));
        }
        if self.similar_pairs > 0 && self.similar_cosine < SIMILARITY_THRESHOLD {
            return fail(format!(
                "similar pairs need cosine >= {SIMILARITY_THRESHOLD}, got {}",
                self.similar_cosine
            ));
        }
        if self.distinct_pairs > 0 && self.distinct_cosine >= SIMILARITY_THRESHOLD {
            return fail(format!(
                "distinct pairs need cosine < {SIMILARITY_THRESHOLD}, got {}",
                self.distinct_cosine
            ));
        }
        for (name, v) in [
            ("confusability", self.confusability),
            ("separation", self.separation),
            ("disc_radius", self.disc_radius),
            ("frame_jitter", self.frame_jitter),
            ("sample_shift", self.sample_shift),
            ("phase_jitter", self.phase_jitter),
            ("tempo_jitter", self.tempo_jitter),
            ("pixel_noise", self.pixel_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Cosine similarity at or above which two glosses count as semantically similar.
pub const SIMILARITY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisignCategory {
    /// Visually confusable with its partner, similar meaning.
    Similar,
    /// Visually confusable with its partner, distinct meaning.
    Distinct,
    /// Not part of a confusable pair.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub gloss: String,
    pub category: VisignCategory,
    pub partner: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub id: String,
    pub label: usize,
    /// `[T_raw, H, W, 3]`, values in `[0, 1]`.
    pub video: Vec<f32>,
    pub video_shape: [usize; 4],
    pub keypoints: Vec<KeypointFrame>,
}

impl RawSample {
    pub fn raw_len(&self) -> usize {
        self.video_shape[0]
    }

    /// Frames `[start, start+len)` of the video as a `[len, H, W, 3]` tensor.
    pub fn video_frames(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.raw_len() {
            return Err(Error::Length {
                needed: start + len,
                available: self.raw_len(),
            });
        }
        let [_, h, w, c] = self.video_shape;
        let per = h * w * c;
        let data = self.video[start * per..(start + len) * per]
            .iter()
            .map(|&v| v as f64)
            .collect();
        Ok(Tensor::new(&[len, h, w, c], data)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub lexicon: GlossLexicon,
    pub classes: Vec<ClassInfo>,
    pub train: Vec<RawSample>,
    pub dev: Vec<RawSample>,
    pub test: Vec<RawSample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[RawSample]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

/// Keypoint trajectory parameters in normalized image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointMotion {
    pub center: [f64; 2],
    pub amplitude: [f64; 2],
    /// Cycles over the raw sample length.
    pub frequency: f64,
    pub phase: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionProgram {
    pub keypoints: Vec<KeypointMotion>,
    /// Constant per-keypoint displacement applied on top of the shared motion.
    pub offsets: Vec<[f64; 2]>,
}

const MARGIN: f64 = 0.08;

impl MotionProgram {
    /// Normalized position of keypoint `k` at continuous time `t` (in raw
    /// frames), before clamping to the image.
    pub fn position(&self, k: usize, t: f64, raw_len: usize, phase_shift: f64) -> [f64; 2] {
        let m = &self.keypoints[k];
        let arg = 2.0 * PI * m.frequency * t / raw_len as f64 + phase_shift;
        let o = self.offsets[k];
        [
            m.center[0] + o[0] + m.amplitude[0] * (arg + m.phase[0]).sin(),
            m.center[1] + o[1] + m.amplitude[1] * (arg + m.phase[1]).sin(),
        ]
    }

    /// Mean Euclidean distance between the noiseless trajectories of two
    /// programs over all keypoints and raw frames.
    pub fn distance(&self, other: &MotionProgram, raw_len: usize) -> f64 {
        let k = self.keypoints.len();
        let mut total = 0.0;
        for t in 0..raw_len {
            for i in 0..k {
                let a = self.position(i, t as f64, raw_len, 0.0);
                let b = other.position(i, t as f64, raw_len, 0.0);
                total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            }
        }
        total / (raw_len * k) as f64
    }
}

/// Background texture: a tilted sinusoidal grating with per-channel phase.
#[derive(Debug, Clone, PartialEq)]
struct Texture {
    freq: [f64; 2],
    phase: [f64; 3],
    base: [f64; 3],
}

const TEXTURE_AMPLITUDE: f64 = 0.12;

const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.1, 0.1],
    [0.1, 1.0, 0.1],
    [0.1, 0.2, 1.0],
    [1.0, 1.0, 0.1],
    [1.0, 0.1, 1.0],
    [0.1, 1.0, 1.0],
    [1.0, 0.6, 0.1],
    [0.95, 0.95, 0.95],
];

fn keypoint_color(k: usize) -> [f64; 3] {
    let c = PALETTE[k % PALETTE.len()];
    if k < PALETTE.len() {
        c
    } else {
        let f = 0.5 + 0.5 / (1 + k / PALETTE.len()) as f64;
        [c[0] * f, c[1] * f, c[2] * f]
    }
}

fn random_program<R: Rng>(rng: &mut R, keypoints: usize) -> MotionProgram {
    let kp = (0..keypoints)
        .map(|_| {
            let amp = [rng.gen_range(0.06..0.16), rng.gen_range(0.06..0.16)];
            KeypointMotion {
                center: [
                    rng.gen_range(MARGIN + amp[0]..1.0 - MARGIN - amp[0]),
                    rng.gen_range(MARGIN + amp[1]..1.0 - MARGIN - amp[1]),
                ],
                amplitude: amp,
                frequency: rng.gen_range(0.6..1.6),
                phase: [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)],
            }
        })
        .collect();
    MotionProgram {
        keypoints: kp,
        offsets: vec![[0.0; 2]; keypoints],
    }
}

fn random_texture<R: Rng>(rng: &mut R) -> Texture {
    Texture {
        freq: [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
        phase: [
            rng.gen_range(0.0..2.0 * PI),
            rng.gen_range(0.0..2.0 * PI),
            rng.gen_range(0.0..2.0 * PI),
        ],
        base: [
            rng.gen_range(0.25..0.45),
            rng.gen_range(0.25..0.45),
            rng.gen_range(0.25..0.45),
        ],
    }
}

/// Class layout: similar pairs first, then distinct pairs, then singletons.
fn class_layout(spec: &SynthSpec) -> Vec<ClassInfo> {
    (0..spec.num_classes)
        .map(|c| {
            let paired = 2 * (spec.similar_pairs + spec.distinct_pairs);
            let (category, partner) = if c < 2 * spec.similar_pairs {
                (VisignCategory::Similar, Some(c ^ 1))
            } else if c < paired {
                (VisignCategory::Distinct, Some(c ^ 1))
            } else {
                (VisignCategory::None, None)
            };
            ClassInfo {
                gloss: format!("gloss_{c:02}"),
                category,
                partner,
            }
        })
        .collect()
}

/// Target cosine matrix for the class layout.
pub fn target_cosines<R: Rng>(
    spec: &SynthSpec,
    classes: &[ClassInfo],
    rng: &mut R,
) -> DMatrix<f64> {
    let n = classes.len();
    let mut c = DMatrix::identity(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = if classes[i].partner == Some(j) {
                match classes[i].category {
                    VisignCategory::Similar => spec.similar_cosine,
                    _ => spec.distinct_cosine,
                }
            } else {
                spec.background_cosine + rng.gen_range(-1.0..=1.0) * spec.cosine_jitter
            };
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

/// Embeddings whose pairwise cosines equal `target` (up to round-off).
///
/// Factorizes the target Gram matrix, places the factor in a random
/// orthonormal basis of the embedding space, and rescales every row by a
/// random positive factor (cosines are scale invariant).
pub fn realize_embeddings<R: Rng>(
    target: &DMatrix<f64>,
    dim: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let n = target.nrows();
    if target.iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::Spec("target cosines must lie in [-1, 1]".into()));
    }
    let eig = target.clone().symmetric_eigen();
    let scale = n as f64 * 1e-10;
    if let Some(&min) = eig.eigenvalues.iter().min_by(|a, b| a.total_cmp(b)) {
        if min < -scale {
            return Err(Error::Spec(format!(
                "target cosine matrix is not positive semidefinite (eigenvalue {min:.3e})"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let rank = dim.min(n);
    if let Some(&dropped) = order.get(rank) {
        if eig.eigenvalues[dropped] > scale {
            return Err(Error::Spec(format!(
                "embedding dimension {dim} cannot represent the target cosine matrix of rank > {dim}"
            )));
        }
    }
    // factor: n × rank
    let mut factor = DMatrix::zeros(n, rank);
    for (col, &e) in order.iter().take(rank).enumerate() {
        let s = eig.eigenvalues[e].max(0.0).sqrt();
        for row in 0..n {
            factor[(row, col)] = eig.eigenvectors[(row, e)] * s;
        }
    }
    let gauss = DMatrix::from_fn(dim, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    let basis = gauss.qr().q(); // dim × rank, orthonormal columns
    let mut emb = factor * basis.transpose();
    for mut row in emb.row_iter_mut() {
        let s = rng.gen_range(0.5..2.0);
        row *= s;
    }
    let data = (0..n)
        .flat_map(|i| (0..dim).map(move |j| (i, j)))
        .map(|(i, j)| emb[(i, j)])
        .collect();
    Ok(Tensor::new(&[n, dim], data)?)
}

struct ClassGenerator<'a> {
    spec: &'a SynthSpec,
    programs: Vec<MotionProgram>,
    textures: Vec<Texture>,
}

impl ClassGenerator<'_> {
    fn sample(&self, id: String, label: usize, stream: u64) -> RawSample {
        let spec = self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let program = &self.programs[label];
        let texture = &self.textures[label];
        let (t_raw, k) = (spec.raw_len, spec.keypoints);
        let [hv, wv] = spec.video_size;
        let [hk, wk] = spec.heatmap_size;

        let normal = |sd: f64| Normal::new(0.0, sd).expect("non-negative standard deviation");
        let shift_d = normal(spec.sample_shift);
        let jitter_d = normal(spec.frame_jitter);
        let pixel_d = normal(spec.pixel_noise);
        let shift = [shift_d.sample(&mut rng), shift_d.sample(&mut rng)];
        let phase = rng.gen_range(-1.0..=1.0) * spec.phase_jitter;
        let tempo = 1.0 + rng.gen_range(-1.0..=1.0) * spec.tempo_jitter;

        let lo = [0.5 / wk as f64, 0.5 / hk as f64];
        let hi = [1.0 - lo[0], 1.0 - lo[1]];
        let mut frames = Vec::with_capacity(t_raw);
        let mut norm_points = Vec::with_capacity(t_raw);
        for t in 0..t_raw {
            let mut points = Vec::with_capacity(k);
            let mut valid = Vec::with_capacity(k);
            let mut norm = Vec::with_capacity(k);
            for kp in 0..k {
                let p = program.position(kp, t as f64 * tempo, t_raw, phase);
                let x = (p[0] + shift[0] + jitter_d.sample(&mut rng)).clamp(lo[0], hi[0]);
                let y = (p[1] + shift[1] + jitter_d.sample(&mut rng)).clamp(lo[1], hi[1]);
                norm.push([x, y]);
                points.push([x * wk as f64 - 0.5, y * hk as f64 - 0.5]);
                valid.push(rng.gen::<f64>() >= spec.dropout);
            }
            frames.push(KeypointFrame { points, valid });
            norm_points.push(norm);
        }

        let mut video = Vec::with_capacity(t_raw * hv * wv * 3);
        let radius = spec.disc_radius * wv.min(hv) as f64;
        for norm in &norm_points {
            for j in 0..hv {
                for i in 0..wv {
                    let (u, v) = ((i as f64 + 0.5) / wv as f64, (j as f64 + 0.5) / hv as f64);
                    let arg = 2.0 * PI * (texture.freq[0] * u + texture.freq[1] * v);
                    let mut rgb = [0.0; 3];
                    for (ch, px) in rgb.iter_mut().enumerate() {
                        *px =
                            texture.base[ch] + TEXTURE_AMPLITUDE * (arg + texture.phase[ch]).sin();
                    }
                    for (kp, p) in norm.iter().enumerate() {
                        let dx = i as f64 - (p[0] * wv as f64 - 0.5);
                        let dy = j as f64 - (p[1] * hv as f64 - 0.5);
                        let alpha = (radius + 0.5 - (dx * dx + dy * dy).sqrt()).clamp(0.0, 1.0);
                        if alpha > 0.0 {
                            let col = keypoint_color(kp);
                            for ch in 0..3 {
                                rgb[ch] = (1.0 - alpha) * rgb[ch] + alpha * col[ch];
                            }
                        }
                    }
                    for px in rgb {
                        video.push((px + pixel_d.sample(&mut rng)).clamp(0.0, 1.0) as f32);
                    }
                }
            }
        }
        RawSample {
            id,
            label,
            video,
            video_shape: [t_raw, hv, wv, 3],
            keypoints: frames,
        }
    }
}

/// Motion programs per class: one independent program per pair or
/// singleton, redrawn until it keeps `separation` from every earlier one.
fn motion_programs<R: Rng>(
    spec: &SynthSpec,
    classes: &[ClassInfo],
    rng: &mut R,
) -> Result<Vec<MotionProgram>> {
    let mut programs: Vec<Option<MotionProgram>> = vec![None; classes.len()];
    let mut groups: Vec<MotionProgram> = Vec::new();
    const ATTEMPTS: usize = 1000;
    for c in 0..classes.len() {
        if programs[c].is_some() {
            continue;
        }
        let mut accepted = None;
        for _ in 0..ATTEMPTS {
            let cand = random_program(rng, spec.keypoints);
            if groups
                .iter()
                .all(|g| g.distance(&cand, spec.raw_len) >= spec.separation)
            {
                accepted = Some(cand);
                break;
            }
        }
        let base = accepted.ok_or_else(|| {
            Error::Spec(format!(
                "could not place {} motion programs at separation {}",
                classes.len(),
                spec.separation
            ))
        })?;
        groups.push(base.clone());
        if let Some(p) = classes[c].partner {
            let mut partner = base.clone();
            for o in partner.offsets.iter_mut() {
                let a = rng.gen_range(0.0..2.0 * PI);
                *o = [spec.confusability * a.cos(), spec.confusability * a.sin()];
            }
            programs[p] = Some(partner);
        }
        programs[c] = Some(base);
    }
    Ok(programs
        .into_iter()
        .map(|p| p.expect("every class assigned"))
        .collect())
}

/// Motion programs that [`generate_dataset`] uses for `spec`, exposed for
/// measuring trajectory distances.
pub fn class_programs(spec: &SynthSpec) -> Result<Vec<MotionProgram>> {
    spec.validate()?;
    let classes = class_layout(spec);
    let mut rng = master_rng(spec.seed);
    let _ = target_cosines(spec, &classes, &mut rng);
    motion_programs(spec, &classes, &mut rng)
}

fn master_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generates the lexicon and the train/dev/test splits for `spec`.
/// Deterministic in `spec` (including its seed).
pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let classes = class_layout(spec);
    let mut rng = master_rng(spec.seed);
    let target = target_cosines(spec, &classes, &mut rng);
    let programs = motion_programs(spec, &classes, &mut rng)?;
    let embeddings = realize_embeddings(&target, spec.embedding_dim, &mut rng)?;
    let lexicon = GlossLexicon::new(
        classes.iter().map(|c| c.gloss.clone()).collect(),
        embeddings,
    )?;

    // Pair partners share a texture so that only the motion separates them.
    let mut textures: Vec<Option<Texture>> = vec![None; classes.len()];
    for c in 0..classes.len() {
        if textures[c].is_none() {
            let t = random_texture(&mut rng);
            if let Some(p) = classes[c].partner {
                textures[p] = Some(t.clone());
            }
            textures[c] = Some(t);
        }
    }
    let gen = ClassGenerator {
        spec,
        programs,
        textures: textures.into_iter().map(|t| t.expect("assigned")).collect(),
    };

    let mut jobs = Vec::new();
    for (split, per_class) in [
        ("train", spec.train_per_class),
        ("dev", spec.dev_per_class),
        ("test", spec.test_per_class),
    ] {
        for c in 0..spec.num_classes {
            for i in 0..per_class {
                jobs.push((split, format!("{split}-{c:03}-{i:03}"), c));
            }
        }
    }
    let samples: Vec<(&str, RawSample)> = jobs
        .into_par_iter()
        .enumerate()
        .map(|(n, (split, id, label))| (split, gen.sample(id, label, n as u64 + 1)))
        .collect();
    let mut ds = Dataset {
        spec: spec.clone(),
        lexicon,
        classes,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for (split, s) in samples {
        match split {
            "train" => ds.train.push(s),
            "dev" => ds.dev.push(s),
            _ => ds.test.push(s),
        }
    }
    Ok(ds)
}
