//! Text embedding provider contract, deterministic providers, and an on-disk
//! embedding cache.
//!
//! Providers return unit-norm vectors of a fixed dimension. Cosine similarity
//! between two provider outputs is therefore their dot product.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::{Mutex, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::text::{normalize, stable_hash};
use crate::{Error, Result};

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>>;

    /// Providers that cannot take concurrent `embed` calls return true; the
    /// cache wrapper then serializes calls.
    fn serialized(&self) -> bool {
        false
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for &P {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        (**self).embed(text)
    }
    fn serialized(&self) -> bool {
        (**self).serialized()
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<P> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        (**self).embed(text)
    }
    fn serialized(&self) -> bool {
        (**self).serialized()
    }
}

/// Dot product accumulated in f64. Equals cosine similarity for unit vectors.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// Scales `v` to unit length. Leaves a zero vector untouched.
pub fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
}

pub fn check_dimension(provider: &dyn EmbeddingProvider, v: &[f32]) -> Result<()> {
    if v.len() != provider.dimension() {
        return Err(Error::Config(format!(
            "provider `{}` declared dimension {} but returned {}",
            provider.name(),
            provider.dimension(),
            v.len()
        )));
    }
    Ok(())
}

/// Seeded pseudo-random unit vector per distinct normalized text.
///
/// Unrelated texts get near-orthogonal vectors, identical texts identical
/// ones. Used wherever tests need a contract-compliant provider with no
/// semantic structure.
#[derive(Clone, Debug)]
pub struct HashingProvider {
    name: String,
    dimension: usize,
    seed: u64,
}

impl HashingProvider {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self {
            name: format!("hash-stub-d{dimension}-s{seed}"),
            dimension,
            seed,
        }
    }
}

impl EmbeddingProvider for HashingProvider {
    fn name(&self) -> &str {
        &self.name
    }
    fn dimension(&self) -> usize {
        self.dimension
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let key = normalize(text);
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[&self.seed.to_le_bytes(), key.as_bytes()]));
        let mut v: Vec<f32> = (0..self.dimension)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            })
            .collect();
        l2_normalize(&mut v);
        Ok(v)
    }
}

/// Signed feature hashing over character trigrams and word unigrams.
///
/// Texts sharing words or word fragments get positive similarity, which makes
/// this provider useful for demos and distractor selection without a neural
/// encoder.
#[derive(Clone, Debug)]
pub struct CharNgramProvider {
    name: String,
    dimension: usize,
}

impl CharNgramProvider {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self {
            name: format!("char-ngram-d{dimension}"),
            dimension,
        }
    }

    fn add_feature(&self, v: &mut [f32], feature: &str, weight: f32) {
        let h = stable_hash(&[feature.as_bytes()]);
        let idx = (h % self.dimension as u64) as usize;
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        v[idx] += sign * weight;
    }
}

impl Default for CharNgramProvider {
    fn default() -> Self {
        Self::new(256)
    }
}

impl EmbeddingProvider for CharNgramProvider {
    fn name(&self) -> &str {
        &self.name
    }
    fn dimension(&self) -> usize {
        self.dimension
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let key = normalize(text);
        let mut v = vec![0.0f32; self.dimension];
        for word in key.split_whitespace() {
            self.add_feature(&mut v, &format!("w:{word}"), 1.0);
            let padded: Vec<char> = format!(" {word} ").chars().collect();
            for gram in padded.windows(3) {
                let g: String = gram.iter().collect();
                self.add_feature(&mut v, &format!("c:{g}"), 0.5);
            }
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        l2_normalize(&mut v);
        Ok(v)
    }
}

/// Fixed vectors for listed texts (normalized keys), falling back to another
/// provider for everything else. Vectors are normalized on insertion.
pub struct LookupProvider<P> {
    name: String,
    table: HashMap<String, Vec<f32>>,
    fallback: P,
}

impl<P: EmbeddingProvider> LookupProvider<P> {
    pub fn new(fallback: P) -> Self {
        Self {
            name: format!("lookup+{}", fallback.name()),
            table: HashMap::new(),
            fallback,
        }
    }

    pub fn insert(&mut self, text: &str, mut vector: Vec<f32>) -> Result<()> {
        check_dimension(&self.fallback, &vector)?;
        l2_normalize(&mut vector);
        self.table.insert(normalize(text), vector);
        Ok(())
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for LookupProvider<P> {
    fn name(&self) -> &str {
        &self.name
    }
    fn dimension(&self) -> usize {
        self.fallback.dimension()
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        match self.table.get(&normalize(text)) {
            Some(v) => Ok(v.clone()),
            None => self.fallback.embed(text),
        }
    }
}

const CACHE_MAGIC: &[u8; 8] = b"CLBDEMB1";

type TextHash = [u8; 32];

fn text_hash(text: &str) -> TextHash {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(text.as_bytes());
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

/// Memoizing wrapper keyed by (provider name, SHA-256 of the text).
///
/// File layout: the 8-byte magic `CLBDEMB1`, a little-endian `u32` name
/// length, the UTF-8 provider name, a little-endian `u32` dimension, then
/// records of a 32-byte text hash followed by `dimension` little-endian
/// `f32` values, until end of file.
pub struct CachedProvider<P> {
    inner: P,
    entries: RwLock<HashMap<TextHash, Vec<f32>>>,
    gate: Mutex<()>,
}

impl<P: EmbeddingProvider> CachedProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            entries: RwLock::new(HashMap::new()),
            gate: Mutex::new(()),
        }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads a cache file. A file written by a different provider (name or
    /// dimension) is ignored and the cache starts empty.
    pub fn load(inner: P, path: impl AsRef<Path>) -> Result<Self> {
        let cache = Self::new(inner);
        let path = path.as_ref();
        if !path.exists() {
            return Ok(cache);
        }
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Parse {
                line: 0,
                message: format!("{} is not an embedding cache", path.display()),
            });
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let mut name = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut name)?;
        r.read_exact(&mut word)?;
        let dim = u32::from_le_bytes(word) as usize;
        if name != cache.inner.name().as_bytes() || dim != cache.inner.dimension() {
            log::warn!(
                "embedding cache {} belongs to another provider; starting empty",
                path.display()
            );
            return Ok(cache);
        }
        let mut entries = HashMap::new();
        let mut hash = [0u8; 32];
        let mut raw = vec![0u8; dim * 4];
        loop {
            match r.read_exact(&mut hash) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            r.read_exact(&mut raw)?;
            let v = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.insert(hash, v);
        }
        *cache.entries.write().expect("cache lock") = entries;
        Ok(cache)
    }

    /// Writes every cached vector; records are ordered by hash.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        let name = self.inner.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(self.inner.dimension() as u32).to_le_bytes())?;
        let entries = self.entries.read().expect("cache lock");
        let mut keys: Vec<&TextHash> = entries.keys().collect();
        keys.sort();
        for k in keys {
            w.write_all(k)?;
            for x in &entries[k] {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedProvider<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let key = text_hash(text);
        if let Some(v) = self.entries.read().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let v = if self.inner.serialized() {
            let _guard = self.gate.lock().expect("provider gate");
            self.inner.embed(text)?
        } else {
            self.inner.embed(text)?
        };
        check_dimension(&self.inner, &v)?;
        self.entries.write().expect("cache lock").insert(key, v.clone());
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f32]) -> f64 {
        dot(v, v).sqrt()
    }

    #[test]
    fn hashing_provider_is_unit_and_deterministic() {
        let p = HashingProvider::new(64, 7);
        let a = p.embed("Machine Translation").unwrap();
        let b = p.embed(" machine translation ").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert!((norm(&a) - 1.0).abs() < 1e-6);
        let c = p.embed("parsing").unwrap();
        assert!(dot(&a, &c).abs() < 0.6);
    }

    #[test]
    fn char_ngram_rewards_shared_fragments() {
        let p = CharNgramProvider::new(256);
        let truth = p.embed("hierarchy-aware logical form").unwrap();
        let near = p.embed("hierarchical structure").unwrap();
        let far = p.embed("bleu").unwrap();
        assert!(dot(&truth, &near) > dot(&truth, &far));
        assert!((norm(&p.embed("").unwrap()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lookup_overrides_listed_texts() {
        let mut p = LookupProvider::new(HashingProvider::new(2, 0));
        p.insert("a", vec![3.0, 4.0]).unwrap();
        assert_eq!(p.embed("A").unwrap(), vec![0.6, 0.8]);
        assert!(p.insert("b", vec![1.0]).is_err());
    }

    #[test]
    fn cache_round_trips_and_invalidates_on_provider_change() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let cache = CachedProvider::new(HashingProvider::new(8, 1));
        let v = cache.embed("hello").unwrap();
        cache.embed("world").unwrap();
        cache.save(&path).unwrap();

        let reloaded = CachedProvider::load(HashingProvider::new(8, 1), &path).unwrap();
        assert_eq!(reloaded.len(), 2);
        assert_eq!(reloaded.embed("hello").unwrap(), v);

        let other = CachedProvider::load(HashingProvider::new(8, 2), &path).unwrap();
        assert!(other.is_empty());
    }

    #[test]
    fn cache_file_layout_is_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let cache = CachedProvider::new(HashingProvider::new(2, 3));
        let v = cache.embed("x").unwrap();
        cache.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let name = cache.name().as_bytes();
        let header = 8 + 4 + name.len() + 4;
        assert_eq!(&bytes[..8], CACHE_MAGIC);
        assert_eq!(bytes.len(), header + 32 + 8);
        assert_eq!(&bytes[header..header + 32], &text_hash("x"));
        let first = f32::from_le_bytes(bytes[header + 32..header + 36].try_into().unwrap());
        assert_eq!(first, v[0]);
    }
}
