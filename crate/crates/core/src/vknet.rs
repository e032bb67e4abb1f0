//! Four-encoder video/keypoint backbone with lateral connections.
//!
//! Streams: RGB and heatmap encoders for a long clip and for a half-length
//! short clip. Each encoder is five blocks of `[avg pool] → conv3d → relu`.
//! After blocks 1–4, lateral layers computed from the pre-fusion block
//! outputs are added to the partner stream's block output:
//!
//! | direction                | layer                                 |
//! |--------------------------|---------------------------------------|
//! | video → keypoint         | per-frame 3×3 conv, spatial stride 2  |
//! | keypoint → video         | per-frame 3×3 transposed conv, ×2     |
//! | long → short             | per-position temporal conv (3), stride 2 |
//! | short → long             | per-position temporal transposed conv, ×2 |
//!
//! The video frames must therefore be twice the heatmap size and the long
//! clip twice the short clip at every fusion point.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensornet::{ConvGeometry, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub kernel: usize,
    pub stride: [usize; 3],
    /// Non-overlapping average pooling window applied before the conv.
    pub pool: [usize; 3],
}

impl BlockConfig {
    pub fn new(channels: usize, stride: usize, pool: usize) -> Self {
        Self {
            channels,
            kernel: 3,
            stride: [stride; 3],
            pool: [pool; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LateralConfig {
    pub video_to_keypoint: bool,
    pub keypoint_to_video: bool,
    pub long_to_short_video: bool,
    pub short_to_long_video: bool,
    pub long_to_short_keypoint: bool,
    pub short_to_long_keypoint: bool,
    /// 1-based indices of the blocks followed by a fusion point.
    pub blocks: Vec<usize>,
}

impl Default for LateralConfig {
    fn default() -> Self {
        Self::all()
    }
}

impl LateralConfig {
    pub fn all() -> Self {
        Self {
            video_to_keypoint: true,
            keypoint_to_video: true,
            long_to_short_video: true,
            short_to_long_video: true,
            long_to_short_keypoint: true,
            short_to_long_keypoint: true,
            blocks: vec![1, 2, 3, 4],
        }
    }

    pub fn none() -> Self {
        Self {
            video_to_keypoint: false,
            keypoint_to_video: false,
            long_to_short_video: false,
            short_to_long_video: false,
            long_to_short_keypoint: false,
            short_to_long_keypoint: false,
            blocks: vec![1, 2, 3, 4],
        }
    }
}

/// Per-sample input extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputShapes {
    pub long_len: usize,
    pub video_size: [usize; 2],
    pub heatmap_size: [usize; 2],
    pub keypoints: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VkNetConfig {
    pub blocks: Vec<BlockConfig>,
    pub laterals: LateralConfig,
    pub inputs: InputShapes,
}

pub const BLOCK_COUNT: usize = 5;

/// Small default: the first block downsamples by striding, blocks 2 and 3
/// pool first, the last two keep resolution.
pub fn default_blocks() -> Vec<BlockConfig> {
    vec![
        BlockConfig::new(8, 2, 1),
        BlockConfig::new(16, 1, 2),
        BlockConfig::new(16, 1, 2),
        BlockConfig::new(32, 1, 1),
        BlockConfig::new(48, 1, 1),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    VideoLong,
    KeypointLong,
    VideoShort,
    KeypointShort,
}

impl Stream {
    pub const ALL: [Stream; 4] = [
        Stream::VideoLong,
        Stream::KeypointLong,
        Stream::VideoShort,
        Stream::KeypointShort,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stream::VideoLong => "video_long",
            Stream::KeypointLong => "keypoint_long",
            Stream::VideoShort => "video_short",
            Stream::KeypointShort => "keypoint_short",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    fn is_video(self) -> bool {
        matches!(self, Stream::VideoLong | Stream::VideoShort)
    }

    fn is_long(self) -> bool {
        matches!(self, Stream::VideoLong | Stream::KeypointLong)
    }

    /// Per-sample input extent `[T, H, W, C]`.
    pub fn input_shape(self, inputs: &InputShapes) -> [usize; 4] {
        let t = if self.is_long() {
            inputs.long_len
        } else {
            inputs.long_len / 2
        };
        if self.is_video() {
            [t, inputs.video_size[0], inputs.video_size[1], 3]
        } else {
            [
                t,
                inputs.heatmap_size[0],
                inputs.heatmap_size[1],
                inputs.keypoints,
            ]
        }
    }
}

/// Features produced by the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    LongVideo,
    LongKeypoint,
    ShortVideo,
    ShortKeypoint,
    /// Long video and long keypoint features concatenated.
    LongJoint,
    /// Short video and short keypoint features concatenated.
    ShortJoint,
    /// Short joint and long joint features concatenated.
    Joint,
}

impl Feature {
    pub const ALL: [Feature; 7] = [
        Feature::LongVideo,
        Feature::LongKeypoint,
        Feature::ShortVideo,
        Feature::ShortKeypoint,
        Feature::LongJoint,
        Feature::ShortJoint,
        Feature::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::LongVideo => "long_video",
            Feature::LongKeypoint => "long_keypoint",
            Feature::ShortVideo => "short_video",
            Feature::ShortKeypoint => "short_keypoint",
            Feature::LongJoint => "long_joint",
            Feature::ShortJoint => "short_joint",
            Feature::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureBundle {
    pub long_video: Var,
    pub long_keypoint: Var,
    pub short_video: Var,
    pub short_keypoint: Var,
    pub long_joint: Var,
    pub short_joint: Var,
    pub joint: Var,
}

impl FeatureBundle {
    pub fn get(&self, f: Feature) -> Var {
        match f {
            Feature::LongVideo => self.long_video,
            Feature::LongKeypoint => self.long_keypoint,
            Feature::ShortVideo => self.short_video,
            Feature::ShortKeypoint => self.short_keypoint,
            Feature::LongJoint => self.long_joint,
            Feature::ShortJoint => self.short_joint,
            Feature::Joint => self.joint,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    geom: ConvGeometry,
    transpose: bool,
}

impl ConvLayer {
    fn apply(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let (w, b) = (params[self.weight.0], Some(params[self.bias.0]));
        Ok(if self.transpose {
            g.conv_transpose3d(x, w, b, self.geom)?
        } else {
            g.conv3d(x, w, b, self.geom)?
        })
    }
}

#[derive(Debug, Clone)]
struct Block {
    pool: [usize; 3],
    conv: ConvLayer,
}

#[derive(Debug, Clone)]
struct Lateral {
    /// 0-based block index.
    block: usize,
    from: Stream,
    to: Stream,
    layer: ConvLayer,
}

#[derive(Debug, Clone)]
pub struct VkNet {
    config: VkNetConfig,
    encoders: Vec<Vec<Block>>,
    laterals: Vec<Lateral>,
    widths: [usize; 4],
}

fn uniform<R: Rng>(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    bound: f64,
    rng: &mut R,
) -> Result<ParamId> {
    let value = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
    Ok(store.insert(name, value)?)
}

/// Weight and bias for a conv whose kernel is `[kt,kh,kw,a,b]`; `fan_in`
/// selects the scaling, `gain` 6 suits a following relu.
fn conv_params<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    kernel_shape: [usize; 5],
    fan_in: usize,
    bias_len: usize,
    gain: f64,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let bound = (gain / fan_in as f64).sqrt();
    let w = uniform(store, format!("{prefix}/weight"), &kernel_shape, bound, rng)?;
    let b = store.insert(format!("{prefix}/bias"), Tensor::zeros(&[bias_len]))?;
    Ok((w, b))
}

fn extent_after_pool(ext: [usize; 3], pool: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if pool[a] == 0 || ext[a] % pool[a] != 0 {
            return Err(Error::Config(format!(
                "pooling window {pool:?} does not tile extent {ext:?}"
            )));
        }
        out[a] = ext[a] / pool[a];
    }
    Ok(out)
}

impl VkNet {
    /// Per-sample output extent `[T, H, W, C]` of every block of every
    /// stream, indexed `[stream][block]`.
    pub fn block_shapes(config: &VkNetConfig) -> Result<Vec<Vec<[usize; 4]>>> {
        if config.blocks.len() != BLOCK_COUNT {
            return Err(Error::Config(format!(
                "expected {BLOCK_COUNT} blocks, got {}",
                config.blocks.len()
            )));
        }
        if config.inputs.long_len < 2 || config.inputs.long_len % 2 != 0 {
            return Err(Error::Config(format!(
                "long clip length must be even and >= 2, got {}",
                config.inputs.long_len
            )));
        }
        Stream::ALL
            .iter()
            .map(|s| {
                let [t, h, w, _] = s.input_shape(&config.inputs);
                let mut ext = [t, h, w];
                config
                    .blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| {
                        if b.channels == 0 || b.kernel == 0 || b.stride.contains(&0) {
                            return Err(Error::Config(format!(
                                "block {} is degenerate: {b:?}",
                                i + 1
                            )));
                        }
                        ext = extent_after_pool(ext, b.pool)?;
                        ext = block_geometry(b).forward_extent(ext).map_err(|e| {
                            Error::Config(format!("{} block {}: {e}", s.name(), i + 1))
                        })?;
                        Ok([ext[0], ext[1], ext[2], b.channels])
                    })
                    .collect()
            })
            .collect()
    }

    pub fn build<R: Rng>(config: VkNetConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let shapes = Self::block_shapes(&config)?;
        let lat = &config.laterals;
        if let Some(&b) = lat.blocks.iter().find(|&&b| b == 0 || b >= BLOCK_COUNT) {
            return Err(Error::Config(format!(
                "lateral connections may only follow blocks 1-{}, got {b}",
                BLOCK_COUNT - 1
            )));
        }
        let mut encoders = Vec::with_capacity(4);
        for s in Stream::ALL {
            let mut cin = s.input_shape(&config.inputs)[3];
            let mut blocks = Vec::with_capacity(BLOCK_COUNT);
            for (i, b) in config.blocks.iter().enumerate() {
                let geom = block_geometry(b);
                let k = geom.kernel;
                let (weight, bias) = conv_params(
                    store,
                    &format!("vknet/{}/b{}/conv", s.name(), i + 1),
                    [k[0], k[1], k[2], cin, b.channels],
                    geom.kernel_volume() * cin,
                    b.channels,
                    6.0,
                    rng,
                )?;
                blocks.push(Block {
                    pool: b.pool,
                    conv: ConvLayer {
                        weight,
                        bias,
                        geom,
                        transpose: false,
                    },
                });
                cin = b.channels;
            }
            encoders.push(blocks);
        }

        use Stream::*;
        let plan: [(bool, Stream, Stream, &str); 8] = [
            (
                lat.video_to_keypoint,
                VideoLong,
                KeypointLong,
                "video_to_keypoint_long",
            ),
            (
                lat.video_to_keypoint,
                VideoShort,
                KeypointShort,
                "video_to_keypoint_short",
            ),
            (
                lat.keypoint_to_video,
                KeypointLong,
                VideoLong,
                "keypoint_to_video_long",
            ),
            (
                lat.keypoint_to_video,
                KeypointShort,
                VideoShort,
                "keypoint_to_video_short",
            ),
            (
                lat.long_to_short_video,
                VideoLong,
                VideoShort,
                "video_long_to_short",
            ),
            (
                lat.short_to_long_video,
                VideoShort,
                VideoLong,
                "video_short_to_long",
            ),
            (
                lat.long_to_short_keypoint,
                KeypointLong,
                KeypointShort,
                "keypoint_long_to_short",
            ),
            (
                lat.short_to_long_keypoint,
                KeypointShort,
                KeypointLong,
                "keypoint_short_to_long",
            ),
        ];
        let mut blocks: Vec<usize> = lat.blocks.clone();
        blocks.sort_unstable();
        blocks.dedup();
        let mut laterals = Vec::new();
        for &b1 in &blocks {
            let b = b1 - 1;
            for &(on, from, to, name) in &plan {
                if !on {
                    continue;
                }
                let src = shapes[from.index()][b];
                let dst = shapes[to.index()][b];
                let (geom, transpose) = lateral_geometry(from, to);
                let ext = [src[0], src[1], src[2]];
                let got = if transpose {
                    geom.transpose_extent(ext)
                } else {
                    geom.forward_extent(ext)
                };
                if got.as_ref().ok() != Some(&[dst[0], dst[1], dst[2]]) {
                    return Err(Error::Config(format!(
                        "lateral {name} after block {b1} maps {src:?} to {got:?}, but {} has {dst:?}",
                        to.name()
                    )));
                }
                let k = geom.kernel;
                let (cin, cout) = (src[3], dst[3]);
                // Transposed kernels are stored [.., Cout, Cin].
                let kernel_shape = if transpose {
                    [k[0], k[1], k[2], cout, cin]
                } else {
                    [k[0], k[1], k[2], cin, cout]
                };
                let (weight, bias) = conv_params(
                    store,
                    &format!("vknet/lateral/b{b1}/{name}"),
                    kernel_shape,
                    geom.kernel_volume() * cin,
                    cout,
                    1.0,
                    rng,
                )?;
                laterals.push(Lateral {
                    block: b,
                    from,
                    to,
                    layer: ConvLayer {
                        weight,
                        bias,
                        geom,
                        transpose,
                    },
                });
            }
        }
        let widths = [0, 1, 2, 3].map(|s| shapes[s][BLOCK_COUNT - 1][3]);
        Ok(Self {
            config,
            encoders,
            laterals,
            widths,
        })
    }

    pub fn config(&self) -> &VkNetConfig {
        &self.config
    }

    pub fn lateral_count(&self) -> usize {
        self.laterals.len()
    }

    pub fn feature_dim(&self, f: Feature) -> usize {
        let [lv, lk, sv, sk] = self.widths;
        match f {
            Feature::LongVideo => lv,
            Feature::LongKeypoint => lk,
            Feature::ShortVideo => sv,
            Feature::ShortKeypoint => sk,
            Feature::LongJoint => lv + lk,
            Feature::ShortJoint => sv + sk,
            Feature::Joint => lv + lk + sv + sk,
        }
    }

    /// Runs the four encoders. `inputs` are `[B,T,H,W,C]` in [`Stream::ALL`]
    /// order; `params` are the store's bound variables.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        inputs: [Var; 4],
    ) -> Result<FeatureBundle> {
        let batch = g.shape(inputs[0])[0];
        for (s, &x) in Stream::ALL.iter().zip(&inputs) {
            let want = s.input_shape(&self.config.inputs);
            let got = g.shape(x);
            if got.len() != 5 || got[0] != batch || got[1..] != want {
                return Err(Error::Shape(format!(
                    "{} input has shape {got:?}, expected [{batch}, {}, {}, {}, {}]",
                    s.name(),
                    want[0],
                    want[1],
                    want[2],
                    want[3]
                )));
            }
        }
        let mut x = inputs;
        for b in 0..BLOCK_COUNT {
            let mut out = [x[0]; 4];
            for s in 0..4 {
                let block = &self.encoders[s][b];
                let mut h = x[s];
                if block.pool != [1, 1, 1] {
                    h = g.avg_pool3d(h, block.pool)?;
                }
                h = block.conv.apply(g, params, h)?;
                out[s] = g.relu(h);
            }
            let mut fused = out;
            for lat in self.laterals.iter().filter(|l| l.block == b) {
                let add = lat.layer.apply(g, params, out[lat.from.index()])?;
                let t = lat.to.index();
                fused[t] = g.add(fused[t], add)?;
            }
            x = fused;
        }
        let [lv, lk, sv, sk] = x
            .map(|v| g.global_avg_pool(v))
            .map(|r| r.map_err(Error::from));
        let (lv, lk, sv, sk) = (lv?, lk?, sv?, sk?);
        let long_joint = g.concat(&[lv, lk])?;
        let short_joint = g.concat(&[sv, sk])?;
        let joint = g.concat(&[short_joint, long_joint])?;
        Ok(FeatureBundle {
            long_video: lv,
            long_keypoint: lk,
            short_video: sv,
            short_keypoint: sk,
            long_joint,
            short_joint,
            joint,
        })
    }
}

fn block_geometry(b: &BlockConfig) -> ConvGeometry {
    let k = b.kernel;
    ConvGeometry::new([k; 3], b.stride, [k / 2; 3])
}

fn lateral_geometry(from: Stream, to: Stream) -> (ConvGeometry, bool) {
    if from.is_video() != to.is_video() {
        let g = ConvGeometry::spatial(3, 2);
        if from.is_video() {
            (g, false)
        } else {
            (g.with_exact_upsampling(), true)
        }
    } else {
        let g = ConvGeometry::temporal(3, 2);
        if from.is_long() {
            (g, false)
        } else {
            (g.with_exact_upsampling(), true)
        }
    }
}
