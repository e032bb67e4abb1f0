//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json      splits, classes and keypoints
//! <dir>/lexicon.vec        gloss embeddings (word-vector text format)
//! <dir>/videos/<id>.nlat   one raw tensor per sample
//! ```
//!
//! A raw tensor file is `b"NLAT"`, a little-endian `u32` rank, `u64` dims,
//! then the values as little-endian `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClassInfo, Dataset, RawSample, SynthSpec};
use crate::error::{Error, Result};
use crate::glosslex::load_word_vectors;
use crate::heatmap::KeypointFrame;

const MAGIC: &[u8; 4] = b"NLAT";
const FORMAT_VERSION: u32 = 1;

pub fn write_raw_tensor(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::Shape(format!(
            "shape {shape:?} does not hold {} values",
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(8 + 8 * shape.len() + 4 * data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_raw_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("not a raw tensor file"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header = 8 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let count: usize = shape.iter().product();
    if bytes.len() != header + 4 * count {
        return Err(bad(&format!(
            "expected {count} values for shape {shape:?}, file holds {} bytes of data",
            bytes.len() - header
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((shape, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: usize,
    pub gloss: String,
    /// Path of the raw video tensor, relative to the manifest.
    pub video: String,
    pub keypoints: Vec<KeypointFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SynthSpec,
    pub lexicon: String,
    pub classes: Vec<ClassInfo>,
    pub train: Vec<SampleRecord>,
    pub dev: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let videos = dir.join("videos");
    fs::create_dir_all(&videos).map_err(|e| Error::io(&videos, e))?;
    ds.lexicon.save(dir.join("lexicon.vec"))?;
    let records = |split: &[RawSample]| -> Result<Vec<SampleRecord>> {
        split
            .iter()
            .map(|s| {
                let rel = format!("videos/{}.nlat", s.id);
                write_raw_tensor(&dir.join(&rel), &s.video_shape, &s.video)?;
                Ok(SampleRecord {
                    id: s.id.clone(),
                    label: s.label,
                    gloss: ds.classes[s.label].gloss.clone(),
                    video: rel,
                    keypoints: s.keypoints.clone(),
                })
            })
            .collect()
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: ds.spec.clone(),
        lexicon: "lexicon.vec".into(),
        classes: ds.classes.clone(),
        train: records(&ds.train)?,
        dev: records(&ds.dev)?,
        test: records(&ds.test)?,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string(&manifest).map_err(|e| Error::format(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn load_split(
    dir: &Path,
    records: Vec<SampleRecord>,
    ds_classes: &[ClassInfo],
) -> Result<Vec<RawSample>> {
    records
        .into_iter()
        .map(|r| {
            let class = ds_classes.get(r.label).ok_or_else(|| {
                Error::Data(format!(
                    "sample {} has label {} out of range",
                    r.id, r.label
                ))
            })?;
            if class.gloss != r.gloss {
                return Err(Error::Data(format!(
                    "sample {} names gloss {:?} but label {} is {:?}",
                    r.id, r.gloss, r.label, class.gloss
                )));
            }
            let path: PathBuf = dir.join(&r.video);
            let (shape, video) = read_raw_tensor(&path)?;
            let video_shape: [usize; 4] = shape.as_slice().try_into().map_err(|_| {
                Error::Data(format!(
                    "{}: expected a rank-4 video, got {shape:?}",
                    path.display()
                ))
            })?;
            if video_shape[3] != 3 || r.keypoints.len() != video_shape[0] {
                return Err(Error::Data(format!(
                    "sample {}: video {video_shape:?} vs {} keypoint frames",
                    r.id,
                    r.keypoints.len()
                )));
            }
            Ok(RawSample {
                id: r.id,
                label: r.label,
                video,
                video_shape,
                keypoints: r.keypoints,
            })
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported manifest version {}",
            m.format_version
        )));
    }
    let lexicon = load_word_vectors(dir.join(&m.lexicon))?;
    let glosses: Vec<String> = m.classes.iter().map(|c| c.gloss.clone()).collect();
    // Class order defines label indices; the lexicon may list extra words.
    let lexicon = lexicon.select(&glosses)?;
    Ok(Dataset {
        train: load_split(dir, m.train, &m.classes)?,
        dev: load_split(dir, m.dev, &m.classes)?,
        test: load_split(dir, m.test, &m.classes)?,
        spec: m.spec,
        lexicon,
        classes: m.classes,
    })
}
