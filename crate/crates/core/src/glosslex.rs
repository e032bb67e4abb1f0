//! Gloss embeddings, their cosine similarities, and soft classification labels.
//!
//! Word vectors use the common text format: a header line `N d`, then one
//! line per token with `d` space-separated decimal numbers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensornet::Tensor;

use crate::error::{Error, Result};

/// Vocabulary of glosses with their embedding rows and pairwise cosine
/// similarities. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GlossLexicon {
    glosses: Vec<String>,
    index: HashMap<String, usize>,
    embeddings: Tensor,
    sim: Vec<f64>,
}

impl GlossLexicon {
    /// Builds a lexicon from tokens and an `N×d` embedding matrix. Rejects
    /// duplicate tokens, `N < 2`, and zero-norm rows.
    pub fn new(glosses: Vec<String>, embeddings: Tensor) -> Result<Self> {
        let n = glosses.len();
        if embeddings.rank() != 2 || embeddings.shape()[0] != n {
            return Err(Error::Shape(format!(
                "{n} glosses but embedding matrix has shape {:?}",
                embeddings.shape()
            )));
        }
        if n < 2 {
            return Err(Error::InvalidVocabulary(format!(
                "need at least 2 glosses, got {n}"
            )));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, g) in glosses.iter().enumerate() {
            if index.insert(g.clone(), i).is_some() {
                return Err(Error::DuplicateToken {
                    token: g.clone(),
                    line: i + 2,
                });
            }
        }
        let d = embeddings.shape()[1];
        let norms: Vec<f64> = embeddings
            .data()
            .chunks(d.max(1))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        if let Some(i) = norms.iter().position(|&v| v == 0.0 || !v.is_finite()) {
            return Err(Error::DegenerateEmbedding {
                index: i,
                token: glosses[i].clone(),
            });
        }
        let mut sim = vec![0.0; n * n];
        let e = embeddings.data();
        for i in 0..n {
            for j in i..n {
                let dot: f64 = e[i * d..(i + 1) * d]
                    .iter()
                    .zip(&e[j * d..(j + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum();
                let s = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                sim[i * n + j] = s;
                sim[j * n + i] = s;
            }
        }
        Ok(Self {
            glosses,
            index,
            embeddings,
            sim,
        })
    }

    pub fn len(&self) -> usize {
        self.glosses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glosses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn glosses(&self) -> &[String] {
        &self.glosses
    }

    /// Raw (unnormalized) `N×d` embedding matrix.
    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        self.sim[i * self.len() + j]
    }

    pub fn similarity_row(&self, b: usize) -> &[f64] {
        let n = self.len();
        &self.sim[b * n..(b + 1) * n]
    }

    pub fn index_of(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownGloss(token.to_string()))
    }

    /// Sub-lexicon in the order of `tokens`; every token must resolve.
    pub fn select(&self, tokens: &[String]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for t in tokens {
            let i = self.index_of(t)?;
            data.extend_from_slice(&self.embeddings.data()[i * d..(i + 1) * d]);
        }
        Self::new(tokens.to_vec(), Tensor::new(&[tokens.len(), d], data)?)
    }

    /// Serializes in the word-vector text format with round-trip precision.
    pub fn to_word_vectors(&self) -> String {
        let d = self.dim();
        let mut out = format!("{} {}\n", self.len(), d);
        for (i, g) in self.glosses.iter().enumerate() {
            out.push_str(g);
            for v in &self.embeddings.data()[i * d..(i + 1) * d] {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_word_vectors()).map_err(|e| Error::io(path, e))
    }
}

/// Parses the word-vector text format. Errors name the 1-based line.
pub fn parse_word_vectors(text: &str) -> Result<GlossLexicon> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let head: Vec<&str> = header.split_whitespace().collect();
    let parse_count = |s: &str| {
        s.parse::<usize>().map_err(|_| Error::Parse {
            line: 1,
            message: format!("malformed header {header:?}: expected \"N d\""),
        })
    };
    if head.len() != 2 {
        return Err(Error::Parse {
            line: 1,
            message: format!("malformed header {header:?}: expected \"N d\""),
        });
    }
    let (n, d) = (parse_count(head[0])?, parse_count(head[1])?);
    if d == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "embedding dimension must be positive".into(),
        });
    }

    let mut glosses = Vec::with_capacity(n);
    let mut seen = HashMap::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for (idx, line) in lines {
        let line_no = idx + 1;
        if glosses.len() == n {
            return Err(Error::Parse {
                line: line_no,
                message: format!("header declares {n} tokens but more lines follow"),
            });
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap_or_default().to_string();
        let values: Vec<&str> = fields.collect();
        if values.len() != d {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {d} values for {token:?}, found {}", values.len()),
            });
        }
        for v in values {
            let x: f64 = v.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid number {v:?}"),
            })?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("non-finite value {v:?}"),
                });
            }
            data.push(x);
        }
        if seen.insert(token.clone(), line_no).is_some() {
            return Err(Error::DuplicateToken {
                token,
                line: line_no,
            });
        }
        glosses.push(token);
    }
    if glosses.len() != n {
        return Err(Error::Parse {
            line: text.lines().count().max(1),
            message: format!("header declares {n} tokens, found {}", glosses.len()),
        });
    }
    GlossLexicon::new(glosses, Tensor::new(&[n, d], data)?)
}

pub fn load_word_vectors(path: impl AsRef<Path>) -> Result<GlossLexicon> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_word_vectors(&text)
}

/// Cosine similarities between row `b` of `embeddings` and every row.
pub fn cosine_similarities(embeddings: &Tensor, b: usize) -> Result<Vec<f64>> {
    if embeddings.rank() != 2 || b >= embeddings.shape()[0] {
        return Err(Error::Shape(format!(
            "row {b} not available in embeddings of shape {:?}",
            embeddings.shape()
        )));
    }
    let d = embeddings.shape()[1];
    let rows: Vec<&[f64]> = embeddings.data().chunks(d).collect();
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = norm(rows[b]);
    if nb == 0.0 {
        return Err(Error::DegenerateEmbedding {
            index: b,
            token: String::new(),
        });
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let ni = norm(r);
            if ni == 0.0 {
                return Err(Error::DegenerateEmbedding {
                    index: i,
                    token: String::new(),
                });
            }
            let dot: f64 = r.iter().zip(rows[b]).map(|(x, y)| x * y).sum();
            Ok(dot / (nb * ni))
        })
        .collect()
}

/// Cosine similarity row of gloss `b`.
pub fn cosine_row(lexicon: &GlossLexicon, b: usize) -> Result<Vec<f64>> {
    if b >= lexicon.len() {
        return Err(Error::InvalidParameter(format!(
            "gloss index {b} out of range for {} glosses",
            lexicon.len()
        )));
    }
    Ok(lexicon.similarity_row(b).to_vec())
}

/// Probability vector over `N` classes with its ground-truth index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub probs: Vec<f64>,
    pub target: usize,
}

fn check_label_args(n: usize, b: usize, epsilon: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidVocabulary(format!(
            "need at least 2 classes, got {n}"
        )));
    }
    if b >= n {
        return Err(Error::InvalidParameter(format!(
            "target {b} out of range for {n} classes"
        )));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must lie in [0, 1), got {epsilon}"
        )));
    }
    Ok(())
}

/// Uniform smoothing: `1-ε` on the target, `ε/(N-1)` elsewhere.
pub fn vanilla_soft_label(n: usize, b: usize, epsilon: f64) -> Result<SoftLabel> {
    check_label_args(n, b, epsilon)?;
    let mut probs = vec![epsilon / (n - 1) as f64; n];
    probs[b] = 1.0 - epsilon;
    Ok(SoftLabel { probs, target: b })
}

/// Similarity-weighted smoothing: the target keeps `1-ε`; the remaining mass
/// is split over the other classes by a temperature softmax of their
/// similarity to the target.
pub fn language_aware_soft_label(
    lexicon: &GlossLexicon,
    b: usize,
    epsilon: f64,
    tau: f64,
) -> Result<SoftLabel> {
    if b >= lexicon.len() {
        return Err(Error::InvalidParameter(format!(
            "target {b} out of range for {} classes",
            lexicon.len()
        )));
    }
    smoothed_from_similarities(lexicon.similarity_row(b), b, epsilon, tau)
}

/// Same as [`language_aware_soft_label`] for an explicit similarity row.
pub fn smoothed_from_similarities(
    sims: &[f64],
    b: usize,
    epsilon: f64,
    tau: f64,
) -> Result<SoftLabel> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    let n = sims.len();
    check_label_args(n, b, epsilon)?;
    let max = sims
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != b)
        .map(|(_, &s)| s / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = sims
        .iter()
        .enumerate()
        .map(|(i, &s)| if i == b { 0.0 } else { (s / tau - max).exp() })
        .collect();
    let z: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p *= epsilon / z;
    }
    probs[b] = 1.0 - epsilon;
    Ok(SoftLabel { probs, target: b })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(rows: &[&[f64]]) -> GlossLexicon {
        let d = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let names = (0..rows.len()).map(|i| format!("w{i}")).collect();
        GlossLexicon::new(names, Tensor::new(&[rows.len(), d], data).unwrap()).unwrap()
    }

    #[test]
    fn parses_reference_file() {
        let l = parse_word_vectors("3 4\na 1 0 0 0\nb 0 1 0 0\nc 0 0 1 0").unwrap();
        assert_eq!(l.glosses(), ["a", "b", "c"]);
        assert_eq!(l.embeddings().shape(), &[3, 4]);
        assert_eq!(l.embeddings().data()[5], 1.0);
    }

    #[test]
    fn short_line_reports_its_line_number() {
        let err = parse_word_vectors("3 4\na 1 0 0 0\nb 0 1 0\nc 0 0 1 0").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn duplicate_token_is_rejected() {
        let err = parse_word_vectors("3 2\na 1 0\nb 0 1\na 1 1").unwrap_err();
        assert!(
            matches!(&err, Error::DuplicateToken { token, line: 4 } if token == "a"),
            "{err:?}"
        );
    }

    #[test]
    fn malformed_header_and_counts() {
        assert!(matches!(
            parse_word_vectors("three 4\n").unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
        assert!(matches!(
            parse_word_vectors("3 2\na 1 0\nb 0 1\n").unwrap_err(),
            Error::Parse { .. }
        ));
        assert!(matches!(
            parse_word_vectors("2 2\na 1 0\nb 0 0\n").unwrap_err(),
            Error::DegenerateEmbedding { index: 1, .. }
        ));
    }

    #[test]
    fn cosine_reference_values() {
        let l = lex(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let s = cosine_row(&l, 0).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!((s[1] - 1.0).abs() < 1e-12);
        assert!(s[2].abs() < 1e-12);
        assert!((s[3] - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn cosine_of_zero_row_is_degenerate() {
        let e = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(
            cosine_similarities(&e, 0).unwrap_err(),
            Error::DegenerateEmbedding { index: 0, .. }
        ));
    }

    #[test]
    fn vanilla_reference_values() {
        let l = vanilla_soft_label(5, 2, 0.2).unwrap();
        let want = [0.05, 0.05, 0.8, 0.05, 0.05];
        for (a, b) in l.probs.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(vanilla_soft_label(2, 0, 0.2).unwrap().probs, vec![0.8, 0.2]);
        assert_eq!(
            vanilla_soft_label(3, 1, 0.0).unwrap().probs,
            vec![0.0, 1.0, 0.0]
        );
        assert!(matches!(
            vanilla_soft_label(1, 0, 0.2).unwrap_err(),
            Error::InvalidVocabulary(_)
        ));
    }

    #[test]
    fn language_aware_reference_values() {
        let l = smoothed_from_similarities(&[1.0, 0.5, -0.5], 0, 0.2, 0.5).unwrap();
        let want = [0.8, 0.17616, 0.02384];
        for (a, b) in l.probs.iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{:?}", l.probs);
        }
    }

    #[test]
    fn equal_similarities_reduce_to_vanilla() {
        let l = smoothed_from_similarities(&[0.3, 0.9, 1.0, 0.3, 0.3], 2, 0.2, 0.5).unwrap();
        let want = smoothed_from_similarities(&[0.3, 0.3, 1.0, 0.3, 0.3], 2, 0.2, 0.5).unwrap();
        let v = vanilla_soft_label(5, 2, 0.2).unwrap();
        assert_ne!(l, want);
        for (a, b) in want.probs.iter().zip(&v.probs) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_temperature_approaches_vanilla() {
        let l = smoothed_from_similarities(&[1.0, 0.9, -0.7, 0.1], 0, 0.2, 1e6).unwrap();
        let v = vanilla_soft_label(4, 0, 0.2).unwrap();
        for (a, b) in l.probs.iter().zip(&v.probs) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        for tau in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                smoothed_from_similarities(&[1.0, 0.0], 0, 0.2, tau).unwrap_err(),
                Error::InvalidTemperature(_)
            ));
        }
    }

    #[test]
    fn word_vector_round_trip() {
        let l = lex(&[&[0.1, -2.5e-7], &[3.0, 1.0 / 3.0]]);
        assert_eq!(parse_word_vectors(&l.to_word_vectors()).unwrap(), l);
    }

    #[test]
    fn select_requires_every_gloss() {
        let l = lex(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let sub = l.select(&["w2".into(), "w0".into()]).unwrap();
        assert_eq!(sub.glosses(), ["w2", "w0"]);
        assert!((sub.similarity(0, 1) - l.similarity(2, 0)).abs() < 1e-15);
        assert!(matches!(
            l.select(&["w9".into(), "w0".into()]).unwrap_err(),
            Error::UnknownGloss(_)
        ));
    }
}
