//! Exact cosine top-k search over labeled, unit-normalized embeddings and
//! the label-statistics sentences injected into prompts.
//!
//! Vectors are kept twice: the canonical `f32` values that go to disk, and
//! their `f64` renormalization used for scoring. Loading a saved index
//! rebuilds the second from the first, so a round-trip reproduces every
//! query result bit for bit.

use std::cmp::Ordering;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Label;

pub const INDEX_MAGIC: &[u8; 4] = b"RDXI";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("build error: {0}")]
    Build(String),
    #[error("query error: {0}")]
    Query(String),
    #[error("summary error: {0}")]
    Summary(String),
    #[error("index format error: {0}")]
    Format(String),
    #[error("index i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    stored: Vec<f32>,
    unit: Vec<f64>,
    labels: Vec<Label>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: Option<usize>,
    pub neighbors: Vec<Neighbor>,
    pub n_r: usize,
    pub n_f: usize,
}

impl RetrievalResult {
    pub fn k(&self) -> usize {
        self.neighbors.len()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.neighbors.iter().map(|n| n.id).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub text: String,
    pub k: usize,
    pub n_r: usize,
    pub n_f: usize,
}

fn unit_from_f32(v: &[f32]) -> Vec<f64> {
    let w: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
    let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    w.into_iter().map(|x| x / n).collect()
}

impl EmbeddingIndex {
    /// Normalizes each embedding and stores it under its input position.
    pub fn build(embeddings: &[Vec<f64>], labels: &[Label]) -> Result<Self, RetrievalError> {
        if embeddings.is_empty() {
            return Err(RetrievalError::Build("no embeddings".into()));
        }
        if embeddings.len() != labels.len() {
            return Err(RetrievalError::Build(format!(
                "{} embeddings but {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        let dim = embeddings[0].len();
        if dim == 0 {
            return Err(RetrievalError::Build("zero-dimensional embeddings".into()));
        }
        let mut stored = Vec::with_capacity(embeddings.len() * dim);
        for (i, v) in embeddings.iter().enumerate() {
            if v.len() != dim {
                return Err(RetrievalError::Build(format!(
                    "embedding {i} has dim {}, expected {dim}",
                    v.len()
                )));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(RetrievalError::Build(format!(
                    "embedding {i} is zero or non-finite"
                )));
            }
            stored.extend(v.iter().map(|x| (x / norm) as f32));
        }
        Self::from_stored(dim, stored, labels.to_vec())
    }

    fn from_stored(dim: usize, stored: Vec<f32>, labels: Vec<Label>) -> Result<Self, RetrievalError> {
        let mut unit = Vec::with_capacity(stored.len());
        for (i, chunk) in stored.chunks(dim).enumerate() {
            let u = unit_from_f32(chunk);
            if !u.iter().all(|x| x.is_finite()) {
                return Err(RetrievalError::Build(format!(
                    "embedding {i} underflows at single precision"
                )));
            }
            unit.extend(u);
        }
        Ok(Self {
            dim,
            stored,
            unit,
            labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// Unit-length vector of entry `id`.
    pub fn vector(&self, id: usize) -> &[f64] {
        &self.unit[id * self.dim..(id + 1) * self.dim]
    }

    /// Exact top-k by cosine similarity; ties go to the smaller id.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<RetrievalResult, RetrievalError> {
        self.search(query, k, &[])
    }

    /// Like [`top_k`](Self::top_k) but never returns `exclude`. Used when a
    /// training image queries the index built from its own split.
    pub fn top_k_excluding(
        &self,
        query: &[f64],
        k: usize,
        exclude: usize,
    ) -> Result<RetrievalResult, RetrievalError> {
        let mut r = self.search(query, k, &[exclude])?;
        r.query_id = Some(exclude);
        Ok(r)
    }

    /// Like [`top_k_excluding`](Self::top_k_excluding) but also skips every
    /// id in `related`, e.g. near-duplicates of the query image.
    pub fn top_k_excluding_related(
        &self,
        query: &[f64],
        k: usize,
        query_id: usize,
        related: &[usize],
    ) -> Result<RetrievalResult, RetrievalError> {
        let mut skip = related.to_vec();
        skip.push(query_id);
        skip.sort_unstable();
        skip.dedup();
        let mut r = self.search(query, k, &skip)?;
        r.query_id = Some(query_id);
        Ok(r)
    }

    fn search(
        &self,
        query: &[f64],
        k: usize,
        skip: &[usize],
    ) -> Result<RetrievalResult, RetrievalError> {
        let available = self.len() - skip.iter().filter(|&&e| e < self.len()).count();
        if k == 0 || k > available {
            return Err(RetrievalError::Query(format!(
                "k={k} outside 1..={available}"
            )));
        }
        if query.len() != self.dim {
            return Err(RetrievalError::Query(format!(
                "query dim {} does not match index dim {}",
                query.len(),
                self.dim
            )));
        }
        let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !qn.is_finite() || qn == 0.0 {
            return Err(RetrievalError::Query("zero or non-finite query".into()));
        }
        let q: Vec<f64> = query.iter().map(|x| x / qn).collect();

        let better = |a: &Neighbor, b: &Neighbor| -> Ordering {
            b.similarity
                .partial_cmp(&a.similarity)
                .unwrap_or(Ordering::Equal)
                .then(a.id.cmp(&b.id))
        };
        // Single pass keeping a sorted buffer of the best k.
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        for id in 0..self.len() {
            if skip.binary_search(&id).is_ok() {
                continue;
            }
            let s: f64 = self.vector(id).iter().zip(&q).map(|(a, b)| a * b).sum();
            let cand = Neighbor { id, similarity: s };
            if best.len() == k && better(&cand, &best[k - 1]) != Ordering::Less {
                continue;
            }
            let pos = best.partition_point(|n| better(n, &cand) == Ordering::Less);
            best.insert(pos, cand);
            best.truncate(k);
        }
        let n_f = best
            .iter()
            .filter(|n| self.labels[n.id] == Label::Fake)
            .count();
        Ok(RetrievalResult {
            query_id: None,
            n_r: k - n_f,
            n_f,
            neighbors: best,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.stored.len() * 4 + self.len());
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.stored {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.labels.iter().map(|l| l.to_byte()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let fmt_err = |m: &str| RetrievalError::Format(m.to_string());
        if bytes.len() < 20 {
            return Err(fmt_err("file shorter than header"));
        }
        if &bytes[0..4] != INDEX_MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(RetrievalError::Format(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if dim == 0 || n == 0 {
            return Err(fmt_err("empty index"));
        }
        let n = usize::try_from(n).map_err(|_| fmt_err("entry count overflows"))?;
        let body = n
            .checked_mul(dim)
            .and_then(|c| c.checked_mul(4))
            .and_then(|c| c.checked_add(n))
            .ok_or_else(|| fmt_err("entry count overflows"))?;
        if bytes.len() - 20 != body {
            return Err(RetrievalError::Format(format!(
                "expected {body} payload bytes, found {}",
                bytes.len() - 20
            )));
        }
        let vec_end = 20 + n * dim * 4;
        let stored: Vec<f32> = bytes[20..vec_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = bytes[vec_end..]
            .iter()
            .map(|&b| Label::from_byte(b).ok_or_else(|| fmt_err("label byte out of range")))
            .collect::<Result<Vec<_>, _>>()?;
        for (i, chunk) in stored.chunks(dim).enumerate() {
            let norm = chunk.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-3 {
                return Err(RetrievalError::Format(format!("entry {i} is not unit length")));
            }
        }
        Self::from_stored(dim, stored, labels).map_err(|e| RetrievalError::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn build_index(embeddings: &[Vec<f64>], labels: &[Label]) -> Result<EmbeddingIndex, RetrievalError> {
    EmbeddingIndex::build(embeddings, labels)
}

pub fn save_index(index: &EmbeddingIndex, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
    index.save(path)
}

pub fn load_index(path: impl AsRef<Path>) -> Result<EmbeddingIndex, RetrievalError> {
    EmbeddingIndex::load(path)
}

pub fn summarize(result: &RetrievalResult) -> RetrievalSummary {
    let (k, n_r, n_f) = (result.k(), result.n_r, result.n_f);
    RetrievalSummary {
        text: format!("Among the {k} retrieved images, {n_r} are REAL and {n_f} are FAKE."),
        k,
        n_r,
        n_f,
    }
}

/// Query-independent sentence for the static-prompt arm.
pub fn static_summary(
    k: usize,
    real_count: usize,
    fake_count: usize,
) -> Result<RetrievalSummary, RetrievalError> {
    if real_count + fake_count != k {
        return Err(RetrievalError::Summary(format!(
            "{real_count} + {fake_count} != {k}"
        )));
    }
    Ok(RetrievalSummary {
        text: format!(
            "Reference information: Among the {k} reference images most similar to the \
             current image, {real_count} are labeled as REAL, and {fake_count} are labeled as FAKE."
        ),
        k,
        n_r: real_count,
        n_f: fake_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> EmbeddingIndex {
        build_index(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]],
            &[Label::Fake, Label::Real, Label::Fake],
        )
        .unwrap()
    }

    #[test]
    fn normalizes_on_build() {
        let idx = build_index(&[vec![3.0, 4.0]], &[Label::Real]).unwrap();
        assert!((idx.vector(0)[0] - 0.6).abs() < 1e-7);
        assert!((idx.vector(0)[1] - 0.8).abs() < 1e-7);
        let n: f64 = idx.vector(0).iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn build_errors() {
        assert!(build_index(&[], &[]).is_err());
        assert!(build_index(&[vec![0.0, 0.0]], &[Label::Real]).is_err());
        assert!(build_index(&[vec![1.0], vec![1.0, 2.0]], &[Label::Real, Label::Fake]).is_err());
        assert!(build_index(&[vec![1.0]], &[Label::Real, Label::Fake]).is_err());
    }

    #[test]
    fn small_query() {
        let r = toy().top_k(&[1.0, 0.0], 2).unwrap();
        assert_eq!(r.ids(), vec![0, 2]);
        assert!((r.neighbors[0].similarity - 1.0).abs() < 1e-7);
        assert!((r.neighbors[1].similarity - 0.6).abs() < 1e-7);
        assert_eq!((r.n_r, r.n_f), (0, 2));
    }

    #[test]
    fn ties_break_by_id() {
        let idx = build_index(
            &[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]],
            &[Label::Real, Label::Real, Label::Fake],
        )
        .unwrap();
        assert_eq!(idx.top_k(&[1.0, 0.0], 2).unwrap().ids(), vec![1, 2]);
        assert_eq!(idx.top_k_excluding(&[1.0, 0.0], 2, 1).unwrap().ids(), vec![2, 0]);
    }

    #[test]
    fn related_ids_are_skipped() {
        let r = toy().top_k_excluding_related(&[1.0, 0.0], 1, 0, &[2, 2]).unwrap();
        assert_eq!(r.ids(), vec![1]);
        assert_eq!(r.query_id, Some(0));
        assert!(toy().top_k_excluding_related(&[1.0, 0.0], 2, 0, &[2]).is_err());
        assert_eq!(toy().top_k_excluding_related(&[1.0, 0.0], 2, 1, &[]).unwrap().ids(), vec![0, 2]);
    }

    #[test]
    fn k_out_of_range() {
        assert!(toy().top_k(&[1.0, 0.0], 0).is_err());
        assert!(toy().top_k(&[1.0, 0.0], 4).is_err());
        assert!(toy().top_k(&[1.0, 0.0, 0.0], 1).is_err());
    }

    #[test]
    fn summaries() {
        let r = RetrievalResult {
            query_id: None,
            neighbors: vec![Neighbor { id: 0, similarity: 1.0 }],
            n_r: 1,
            n_f: 0,
        };
        assert_eq!(summarize(&r).text, "Among the 1 retrieved images, 1 are REAL and 0 are FAKE.");
        let s = static_summary(10, 5, 5).unwrap();
        assert_eq!(
            s.text,
            "Reference information: Among the 10 reference images most similar to the current \
             image, 5 are labeled as REAL, and 5 are labeled as FAKE."
        );
        assert!(static_summary(10, 7, 2).is_err());
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut bytes = toy().to_bytes();
        assert!(EmbeddingIndex::from_bytes(&[]).is_err());
        assert!(EmbeddingIndex::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(EmbeddingIndex::from_bytes(&bytes), Err(RetrievalError::Format(_))));
    }

    #[test]
    fn roundtrip_bytes() {
        let idx = toy();
        assert_eq!(EmbeddingIndex::from_bytes(&idx.to_bytes()).unwrap(), idx);
    }

    proptest! {
        #[test]
        fn counts_add_up(
            vecs in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 1..30),
            q in proptest::collection::vec(-1.0f64..1.0, 4),
            kf in 0.0f64..1.0,
        ) {
            let vecs: Vec<Vec<f64>> = vecs.into_iter().filter(|v| v.iter().any(|x| x.abs() > 1e-3)).collect();
            prop_assume!(!vecs.is_empty() && q.iter().any(|x| x.abs() > 1e-3));
            let labels: Vec<Label> = (0..vecs.len()).map(|i| if i % 3 == 0 { Label::Fake } else { Label::Real }).collect();
            let idx = build_index(&vecs, &labels).unwrap();
            let k = 1 + ((vecs.len() - 1) as f64 * kf) as usize;
            let r = idx.top_k(&q, k).unwrap();
            prop_assert_eq!(r.n_r + r.n_f, k);
            for w in r.neighbors.windows(2) {
                prop_assert!(w[0].similarity > w[1].similarity
                    || (w[0].similarity == w[1].similarity && w[0].id < w[1].id));
            }
            let s = summarize(&r);
            prop_assert_eq!((s.k, s.n_r, s.n_f), (k, r.n_r, r.n_f));
        }
    }
}
