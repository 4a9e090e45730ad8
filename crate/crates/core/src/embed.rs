//! Text embeddings for the fusion block, behind a provider interface so real
//! precomputed vectors can replace the deterministic stand-ins.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::dtf::{read_tensor, write_atomic, write_tensor};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EMBED_DIM: usize = 768;

#[derive(Clone, Debug, PartialEq)]
pub struct TextRecord {
    pub sample_id: String,
    pub text: String,
    pub embedding: Option<Vec<f32>>,
}

impl TextRecord {
    pub fn new(sample_id: impl Into<String>, text: impl Into<String>) -> Self {
        TextRecord { sample_id: sample_id.into(), text: text.into(), embedding: None }
    }
}

#[derive(Clone, Debug)]
pub enum EmbeddingProvider {
    /// Vectors looked up by sample id: first the record's own embedding,
    /// then the table loaded from an embedding file.
    File { dim: usize, source: Option<PathBuf>, rows: HashMap<String, Vec<f32>> },
    /// Seeded digest of the text bytes expanded to `dim` values in `[-1, 1]`.
    Hash { dim: usize, seed: u64 },
    Constant { dim: usize, value: Vec<f32> },
}

impl EmbeddingProvider {
    pub fn hash(dim: usize, seed: u64) -> Self {
        EmbeddingProvider::Hash { dim, seed }
    }

    pub fn constant(dim: usize, value: f32) -> Self {
        EmbeddingProvider::Constant { dim, value: vec![value; dim] }
    }

    /// Provider that only uses embeddings carried by the records.
    pub fn precomputed(dim: usize) -> Self {
        EmbeddingProvider::File { dim, source: None, rows: HashMap::new() }
    }

    /// Loads an embedding file `[N, dim]` and its `.index` sidecar.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let table: Tensor<f32> = read_tensor(path)?;
        let [n, dim] = <[usize; 2]>::try_from(table.shape())
            .map_err(|_| Error::Data(format!("{}: embedding table must be [N, dim]", path.display())))?;
        let index_path = index_path(path);
        let index = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let ids: Vec<&str> = index.lines().collect();
        if ids.len() != n {
            return Err(Error::Data(format!("{}: {} ids for {n} rows", index_path.display(), ids.len())));
        }
        let rows = ids
            .iter()
            .zip(table.data().chunks(dim))
            .map(|(id, row)| (id.to_string(), row.to_vec()))
            .collect();
        Ok(EmbeddingProvider::File { dim, source: Some(path.to_path_buf()), rows })
    }

    /// `hash[:seed]`, `constant[:value]`, `precomputed`, or `file:<path>`.
    pub fn parse(desc: &str, dim: usize) -> Result<Self> {
        let (kind, arg) = desc.split_once(':').map_or((desc, None), |(k, a)| (k, Some(a)));
        let num_err = || Error::Config(format!("bad provider argument in `{desc}`"));
        match (kind, arg) {
            ("hash", a) => Ok(Self::hash(dim, a.map(str::parse).transpose().map_err(|_| num_err())?.unwrap_or(0))),
            ("constant", a) => Ok(Self::constant(dim, a.map(str::parse).transpose().map_err(|_| num_err())?.unwrap_or(0.0))),
            ("precomputed", None) => Ok(Self::precomputed(dim)),
            ("file", Some(p)) => {
                let p = Self::from_file(p)?;
                if p.dim() != dim {
                    return Err(Error::Config(format!("embedding file has dim {}, model expects {dim}", p.dim())));
                }
                Ok(p)
            }
            _ => Err(Error::Config(format!("unknown embedding provider `{desc}`"))),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::File { dim, .. } | EmbeddingProvider::Hash { dim, .. } | EmbeddingProvider::Constant { dim, .. } => *dim,
        }
    }

    pub fn vector(&self, rec: &TextRecord) -> Result<Vec<f32>> {
        let v = match self {
            EmbeddingProvider::Hash { dim, seed } => hash_embedding(&rec.text, *dim, *seed),
            EmbeddingProvider::Constant { value, .. } => value.clone(),
            EmbeddingProvider::File { rows, .. } => rec
                .embedding
                .clone()
                .or_else(|| rows.get(&rec.sample_id).cloned())
                .ok_or_else(|| Error::Lookup(rec.sample_id.clone()))?,
        };
        if v.len() != self.dim() {
            return Err(shape_err!("embedding for `{}` has {} values, expected {}", rec.sample_id, v.len(), self.dim()));
        }
        Ok(v)
    }

    /// `[B, 1, dim]`, one [CLS]-style token per record.
    pub fn embed<T: Real>(&self, records: &[TextRecord]) -> Result<Tensor<T>> {
        if records.is_empty() {
            return Err(Error::Contract("embed needs at least one record".into()));
        }
        let mut data = Vec::with_capacity(records.len() * self.dim());
        for r in records {
            data.extend(self.vector(r)?.into_iter().map(|v| T::from_f32(v).unwrap_or_else(T::nan)));
        }
        Tensor::new(&[records.len(), 1, self.dim()], data)
    }
}

/// Each coordinate is the mean of three uniforms on `[-1, 1]` drawn from a
/// ChaCha stream keyed by SHA-256 of `(seed, text)`.
pub fn hash_embedding(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    (0..dim)
        .map(|_| {
            let s: f64 = (0..3).map(|_| rng.gen_range(-1.0..=1.0)).sum();
            (s / 3.0) as f32
        })
        .collect()
}

/// First token of `seq [B, S, D]`, keeping the token axis: `[B, 1, D]`.
pub fn cls_extract<T: Real>(seq: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, s, d] = <[usize; 3]>::try_from(seq.shape()).map_err(|_| shape_err!("expected [B, S, D], got {:?}", seq.shape()))?;
    if s == 0 {
        return Err(shape_err!("sequence has no tokens"));
    }
    let data = (0..b).flat_map(|i| seq.data()[i * s * d..i * s * d + d].iter().copied()).collect();
    Tensor::new(&[b, 1, d], data)
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".index");
    PathBuf::from(s)
}

/// Writes an embedding table `[N, dim]` plus a sidecar listing one sample id
/// per row.
pub fn write_embedding_file(path: impl AsRef<Path>, ids: &[String], rows: &[Vec<f32>]) -> Result<()> {
    let path = path.as_ref();
    let dim = rows.first().map_or(0, Vec::len);
    if ids.len() != rows.len() || rows.iter().any(|r| r.len() != dim) || ids.iter().any(|i| i.contains('\n')) {
        return Err(Error::Contract("embedding ids and rows must align and rows share one dim".into()));
    }
    let t = Tensor::new(&[rows.len(), dim], rows.concat())?;
    write_tensor(path, &t)?;
    write_atomic(&index_path(path), ids.join("\n").as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(texts: &[&str]) -> Vec<TextRecord> {
        texts.iter().enumerate().map(|(i, t)| TextRecord::new(format!("s{i}"), *t)).collect()
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn constant_is_shared() {
        let p = EmbeddingProvider::constant(768, 0.25);
        let e: Tensor<f32> = p.embed(&recs(&["a", "b", "c"])).unwrap();
        assert_eq!(e.shape(), &[3, 1, 768]);
        assert!(e.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn hash_is_deterministic_and_sensitive() {
        let p = EmbeddingProvider::hash(768, 7);
        let a: Tensor<f32> = p.embed(&recs(&["Grantor: Acme LLC", "Grantor: Acme LLC"])).unwrap();
        assert_eq!(a.data()[..768], a.data()[768..]);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        let mut total = 0.0;
        for i in 0..100 {
            let t = format!("State of Texas, County {i}");
            let u = format!("State of Texas, County {i}.");
            total += cosine(&hash_embedding(&t, 768, 7), &hash_embedding(&u, 768, 7));
        }
        assert!(total / 100.0 < 0.5, "{}", total / 100.0);
        assert_ne!(hash_embedding("x", 8, 1), hash_embedding("x", 8, 2));
    }

    #[test]
    fn hash_coordinates_are_centered() {
        let mut sum = vec![0f64; 768];
        for i in 0..1000 {
            let v = hash_embedding(&format!("random text {i} {}", i * 7919), 768, 3);
            sum.iter_mut().zip(&v).for_each(|(s, &x)| *s += x as f64);
        }
        let worst = sum.iter().map(|s| (s / 1000.0).abs()).fold(0.0, f64::max);
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.dtf");
        let ids = vec!["doc-a".to_string(), "doc-b".to_string()];
        let rows = vec![hash_embedding("a", 16, 1), vec![f32::MIN_POSITIVE, -0.0, 1e-30, 3.5, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, -1.0, 2.0]];
        write_embedding_file(&path, &ids, &rows).unwrap();
        let p = EmbeddingProvider::from_file(&path).unwrap();
        assert_eq!(p.dim(), 16);
        let e: Tensor<f32> = p.embed(&[TextRecord::new("doc-b", ""), TextRecord::new("doc-a", "")]).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&e.data()[..16]), bits(&rows[1]));
        assert_eq!(bits(&e.data()[16..]), bits(&rows[0]));
        match p.embed::<f32>(&[TextRecord::new("doc-z", "")]) {
            Err(Error::Lookup(id)) => assert_eq!(id, "doc-z"),
            other => panic!("{other:?}"),
        }
        let desc = format!("file:{}", path.display());
        assert!(EmbeddingProvider::parse(&desc, 16).is_ok());
        assert!(EmbeddingProvider::parse(&desc, 768).is_err());
    }

    #[test]
    fn provider_specs() {
        assert!(matches!(EmbeddingProvider::parse("hash:5", 4).unwrap(), EmbeddingProvider::Hash { seed: 5, dim: 4 }));
        assert!(matches!(EmbeddingProvider::parse("constant:0.5", 4).unwrap(), EmbeddingProvider::Constant { .. }));
        assert!(EmbeddingProvider::parse("bert", 4).is_err());
        assert!(EmbeddingProvider::parse("hash:x", 4).is_err());
        let mut rec = TextRecord::new("id", "t");
        assert!(matches!(EmbeddingProvider::precomputed(2).vector(&rec), Err(Error::Lookup(_))));
        rec.embedding = Some(vec![1.0, 2.0]);
        assert_eq!(EmbeddingProvider::precomputed(2).vector(&rec).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn cls_extraction() {
        let single = Tensor::<f32>::create(&[2, 1, 4], crate::tensor::Fill::Uniform { bound: 1.0, seed: 1 }).unwrap();
        assert_eq!(cls_extract(&single).unwrap(), single);
        let mut v = vec![0.0f32; 2 * 3 * 4];
        for b in 0..2 {
            v[b * 12..b * 12 + 4].iter_mut().for_each(|x| *x = 1.0);
            v[b * 12 + 4..b * 12 + 12].iter_mut().enumerate().for_each(|(i, x)| *x = i as f32 + 10.0 * b as f32);
        }
        let seq = Tensor::new(&[2, 3, 4], v.clone()).unwrap();
        let cls = cls_extract(&seq).unwrap();
        assert_eq!(cls.shape(), &[2, 1, 4]);
        assert!(cls.data().iter().all(|&x| x == 1.0));
        v[4..12].iter_mut().for_each(|x| *x = -99.0);
        assert_eq!(cls_extract(&Tensor::new(&[2, 3, 4], v).unwrap()).unwrap(), cls);
        assert!(matches!(cls_extract(&Tensor::<f32>::zeros(&[3, 4]).unwrap()), Err(Error::Shape(_))));
    }

    #[test]
    fn repeat_calls_are_bitwise_equal() {
        let p = EmbeddingProvider::hash(32, 11);
        let r = recs(&["one", "two"]);
        let a: Tensor<f64> = p.embed(&r).unwrap();
        let b: Tensor<f64> = p.embed(&r).unwrap();
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
