//! Sentence-embedding similarity and the cross-dataset similarity filter.
//!
//! A candidate sentence's similarity to a dataset is its best cosine match
//! among the dataset's reference sentences. The dataset's threshold is
//! `sigma` times the mean leave-one-out similarity of its own references;
//! candidates at or above the threshold are kept.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Example;
use crate::scalar::Real;

pub const DEFAULT_SIGMA: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine is undefined for an all-zero vector")]
    ZeroVector,
    #[error("embedding has no components")]
    EmptyVector,
    #[error("embedding has a non-finite component")]
    NonFinite,
    #[error("reference set is empty")]
    EmptyReferenceSet,
    #[error("leave-one-out threshold needs at least 2 references, got {0}")]
    TooFewReferences(usize),
    #[error("sigma must be positive and finite")]
    InvalidSigma,
    #[error("embedding provider: {0}")]
    Provider(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Real> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    fn unit(&self) -> Result<Vec<T>, EmbedError> {
        let norm = self.values.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm == T::zero() {
            return Err(EmbedError::ZeroVector);
        }
        Ok(self.values.iter().map(|&v| v / norm).collect())
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn clamp_unit<T: Real>(x: T) -> T {
    x.max(-T::one()).min(T::one())
}

pub fn cosine<T: Real>(a: &EmbeddingVector<T>, b: &EmbeddingVector<T>) -> Result<T, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(clamp_unit(dot(&a.unit()?, &b.unit()?)))
}

/// Unit-normalized copies of a vector set, all of one dimension.
struct UnitSet<T> {
    vectors: Vec<Vec<T>>,
}

impl<T: Real> UnitSet<T> {
    fn new(vs: &[EmbeddingVector<T>], dim: usize) -> Result<Self, EmbedError> {
        let vectors = vs
            .iter()
            .map(|v| {
                if v.dim() != dim {
                    return Err(EmbedError::DimensionMismatch(dim, v.dim()));
                }
                v.unit()
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { vectors })
    }

    fn best_match(&self, query: &[T], skip: Option<usize>) -> T {
        self.vectors
            .iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != skip)
            .map(|(_, r)| clamp_unit(dot(query, r)))
            .fold(T::neg_infinity(), T::max)
    }
}

/// Highest cosine between `sent` and any reference.
pub fn sim_to_dataset<T: Real>(sent: &EmbeddingVector<T>, refs: &[EmbeddingVector<T>]) -> Result<T, EmbedError> {
    if refs.is_empty() {
        return Err(EmbedError::EmptyReferenceSet);
    }
    let set = UnitSet::new(refs, sent.dim())?;
    Ok(set.best_match(&sent.unit()?, None))
}

fn threshold_of<T: Real>(set: &UnitSet<T>, sigma: T) -> T {
    let total: T = (0..set.vectors.len())
        .into_par_iter()
        .map(|i| set.best_match(&set.vectors[i], Some(i)))
        .collect::<Vec<T>>()
        .into_iter()
        .sum();
    sigma * total / T::from_count(set.vectors.len())
}

/// `sigma` times the mean, over references, of each reference's best match
/// among the others.
pub fn dataset_threshold<T: Real>(refs: &[EmbeddingVector<T>], sigma: T) -> Result<T, EmbedError> {
    if refs.len() < 2 {
        return Err(EmbedError::TooFewReferences(refs.len()));
    }
    let set = UnitSet::new(refs, refs[0].dim())?;
    Ok(threshold_of(&set, sigma))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig<T> {
    pub sigma: T,
    /// Identifier of the embedding provider that produced the vectors.
    pub provider: String,
    pub batch_size: usize,
}

impl<T: Real> FilterConfig<T> {
    pub fn new(sigma: T, provider: impl Into<String>, batch_size: usize) -> Result<Self, EmbedError> {
        if !(sigma > T::zero() && sigma.is_finite()) {
            return Err(EmbedError::InvalidSigma);
        }
        Ok(Self {
            sigma,
            provider: provider.into(),
            batch_size: batch_size.max(1),
        })
    }
}

impl<T: Real> Default for FilterConfig<T> {
    fn default() -> Self {
        Self {
            sigma: T::lit(DEFAULT_SIGMA),
            provider: HashEmbedder::default().id(),
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome<T> {
    pub kept: Vec<Example>,
    pub total: usize,
    pub threshold: T,
}

/// Keeps, in input order, the candidates whose similarity to `target_refs`
/// reaches the target's threshold.
pub fn filter_similar<T: Real>(
    candidates: &[(Example, EmbeddingVector<T>)],
    target_refs: &[EmbeddingVector<T>],
    config: &FilterConfig<T>,
) -> Result<FilterOutcome<T>, EmbedError> {
    if config.sigma.is_nan() || config.sigma <= T::zero() {
        return Err(EmbedError::InvalidSigma);
    }
    if target_refs.len() < 2 {
        return Err(EmbedError::TooFewReferences(target_refs.len()));
    }
    let set = UnitSet::new(target_refs, target_refs[0].dim())?;
    let threshold = threshold_of(&set, config.sigma);
    let kept = keep_at_or_above(&set, candidates, threshold)?;
    Ok(FilterOutcome {
        kept,
        total: candidates.len(),
        threshold,
    })
}

/// Filter against a precomputed threshold value.
pub fn filter_with_threshold<T: Real>(
    candidates: &[(Example, EmbeddingVector<T>)],
    target_refs: &[EmbeddingVector<T>],
    threshold: T,
) -> Result<Vec<Example>, EmbedError> {
    if target_refs.is_empty() {
        return Err(EmbedError::EmptyReferenceSet);
    }
    let set = UnitSet::new(target_refs, target_refs[0].dim())?;
    keep_at_or_above(&set, candidates, threshold)
}

fn keep_at_or_above<T: Real>(
    set: &UnitSet<T>,
    candidates: &[(Example, EmbeddingVector<T>)],
    threshold: T,
) -> Result<Vec<Example>, EmbedError> {
    let dim = set.vectors[0].len();
    let keep: Vec<bool> = candidates
        .par_iter()
        .map(|(_, v)| {
            if v.dim() != dim {
                return Err(EmbedError::DimensionMismatch(dim, v.dim()));
            }
            Ok(set.best_match(&v.unit()?, None) >= threshold)
        })
        .collect::<Result<_, _>>()?;
    Ok(candidates
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|((e, _), _)| e.clone())
        .collect())
}

/// One TSV row per filtered pair: candidate-dataset, target-dataset, kept, total.
pub fn filter_report_tsv(rows: &[(String, String, usize, usize)]) -> String {
    let mut out = String::from("candidate-dataset\ttarget-dataset\tkept\ttotal\n");
    for (c, t, kept, total) in rows {
        out.push_str(&format!("{c}\t{t}\t{kept}\t{total}\n"));
    }
    out
}

/// Text batch to vectors. Implementations must be deterministic per text.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier, part of every cache key.
    fn id(&self) -> String;

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>, EmbedError>;
}

/// Embeds `texts` in batches of `batch_size`, preserving order.
pub fn embed_all<P: EmbeddingProvider + ?Sized>(
    provider: &P,
    texts: &[String],
    batch_size: usize,
) -> Result<Vec<EmbeddingVector<f64>>, EmbedError> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(batch_size.max(1)) {
        let got = provider.embed(chunk)?;
        if got.len() != chunk.len() {
            return Err(EmbedError::Provider(format!(
                "asked for {} embeddings, got {}",
                chunk.len(),
                got.len()
            )));
        }
        out.extend(got);
    }
    Ok(out)
}

/// Offline provider: hashed bag-of-words vectors. Each lowercased token maps
/// to a fixed pseudo-random vector and a sentence is the sum of its tokens,
/// so sentences sharing words land close together.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }

    fn token_vector(&self, token: &str, acc: &mut [f64]) {
        let digest = Sha256::digest(token.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        for v in acc.iter_mut() {
            *v += rng.gen_range(-1.0..1.0);
        }
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector<f64> {
        let mut acc = vec![0.0; self.dim];
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        if tokens.is_empty() {
            self.token_vector(text, &mut acc);
        }
        for t in &tokens {
            self.token_vector(t, &mut acc);
        }
        EmbeddingVector::new(acc).expect("finite sums of finite values")
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-bow-{}", self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Split, Task};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> EmbeddingVector<f64> {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    fn ex(i: usize) -> Example {
        Example::new(format!("c{i}"), format!("s{i}"), Task::Ner, vec![], Split::Train).unwrap()
    }

    #[test]
    fn cosine_cases() {
        let a = v(&[0.3, -2.0, 5.0]);
        assert_abs_diff_eq!(cosine(&a, &a).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        assert_eq!(
            cosine(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(EmbedError::DimensionMismatch(1, 2))
        );
        assert_eq!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(EmbedError::ZeroVector));
        assert!(EmbeddingVector::new(vec![f64::NAN]).is_err());
        assert!(EmbeddingVector::<f64>::new(vec![]).is_err());
        let f: f32 = cosine(
            &EmbeddingVector::new(vec![1.0f32, 1.0]).unwrap(),
            &EmbeddingVector::new(vec![1.0f32, 0.0]).unwrap(),
        )
        .unwrap();
        assert!((f - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn best_match_over_references() {
        let s = v(&[1.0, 1.0]);
        assert_abs_diff_eq!(
            sim_to_dataset(&s, std::slice::from_ref(&s)).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            sim_to_dataset(&v(&[1.0, 0.0]), &[v(&[0.0, 1.0]), v(&[1.0, 0.0])]).unwrap(),
            1.0
        );
        assert_abs_diff_eq!(
            sim_to_dataset(&s, &[v(&[1.0, 0.0]), v(&[0.0, 1.0])]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        assert_eq!(sim_to_dataset(&s, &[]), Err(EmbedError::EmptyReferenceSet));
    }

    #[test]
    fn thresholds() {
        let same = vec![v(&[1.0, 2.0]); 4];
        assert_abs_diff_eq!(dataset_threshold(&same, 0.7).unwrap(), 0.7, epsilon = 1e-12);
        assert_eq!(dataset_threshold(&[v(&[1.0, 0.0]), v(&[0.0, 1.0])], 0.7).unwrap(), 0.0);
        assert_eq!(
            dataset_threshold(&[v(&[1.0])], 0.7),
            Err(EmbedError::TooFewReferences(1))
        );
    }

    #[test]
    fn three_vector_threshold() {
        // pairwise cosines: (a,b)=0.8, (a,c)=0.28, (b,c)=0.8
        let refs = vec![v(&[1.0, 0.0]), v(&[0.8, 0.6]), v(&[0.28, 0.96])];
        assert_abs_diff_eq!(dataset_threshold(&refs, 0.7).unwrap(), 0.56, epsilon = 1e-12);
        let dup = vec![v(&[1.0, 0.0, 0.0]), v(&[0.6, 0.8, 0.0]), v(&[1.0, 0.0, 0.0])];
        assert_abs_diff_eq!(
            dataset_threshold(&dup, 1.0).unwrap(),
            (1.0 + 0.6 + 1.0) / 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn filter_edge_cases() {
        let refs = vec![v(&[1.0, 0.0, 0.0]), v(&[1.0, 0.1, 0.0])];
        let cands = vec![(ex(0), v(&[1.0, 0.0, 0.0])), (ex(1), v(&[0.0, 0.0, 1.0]))];
        for sigma in [0.1, 0.5, 1.0] {
            let cfg = FilterConfig::new(sigma, "test", 8).unwrap();
            let out = filter_similar(&cands, &refs, &cfg).unwrap();
            assert_eq!(out.kept, vec![ex(0)], "sigma {sigma}");
            assert_eq!(out.total, 2);
        }
        let orth_refs = vec![v(&[1.0, 1.0, 0.0]), v(&[1.0, 0.9, 0.0])];
        let orth = vec![(ex(2), v(&[0.0, 0.0, 1.0])), (ex(3), v(&[0.0, 0.0, -2.0]))];
        let out = filter_similar(&orth, &orth_refs, &FilterConfig::new(0.7, "t", 8).unwrap()).unwrap();
        assert!(out.threshold > 0.0);
        assert!(out.kept.is_empty());
        assert!(FilterConfig::new(0.0, "t", 1).is_err());
    }

    #[test]
    fn hash_embedder_is_deterministic_and_lexical() {
        let e = HashEmbedder::new(32);
        let a = e.embed_one("John lives in Paris");
        assert_eq!(a, e.embed_one("john lives in paris!"));
        let near = cosine(&a, &e.embed_one("John lives in Rome")).unwrap();
        let far = cosine(&a, &e.embed_one("Quarterly revenue fell sharply")).unwrap();
        assert!(near > far);
        assert_eq!(e.embed_one("").dim(), 32);
        let batch = embed_all(&e, &["a".into(), "b".into(), "c".into()], 2).unwrap();
        assert_eq!(batch.len(), 3);
        assert_eq!(batch[2], e.embed_one("c"));
    }

    fn arb_vec(dim: usize) -> impl Strategy<Value = EmbeddingVector<f64>> {
        prop::collection::vec(-1.0f64..1.0, dim)
            .prop_filter("nonzero", |xs| xs.iter().any(|x| x.abs() > 1e-3))
            .prop_map(|xs| EmbeddingVector::new(xs).unwrap())
    }

    proptest! {
        #[test]
        fn cosine_bounded_and_symmetric(a in arb_vec(5), b in arb_vec(5)) {
            let ab = cosine(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, cosine(&b, &a).unwrap());
        }

        #[test]
        fn sim_monotone_in_references(s in arb_vec(4), refs in prop::collection::vec(arb_vec(4), 1..6), extra in arb_vec(4)) {
            let before = sim_to_dataset(&s, &refs).unwrap();
            let mut grown = refs.clone();
            grown.push(extra);
            prop_assert!(sim_to_dataset(&s, &grown).unwrap() >= before);
        }

        #[test]
        fn threshold_homogeneous_in_sigma(refs in prop::collection::vec(arb_vec(4), 2..8), c in 0.1f64..3.0) {
            let base = dataset_threshold(&refs, 0.7).unwrap();
            let scaled = dataset_threshold(&refs, 0.7 * c).unwrap();
            prop_assert!((scaled - c * base).abs() < 1e-12);
        }

        #[test]
        fn filtering_is_idempotent_and_monotone(
            refs in prop::collection::vec(arb_vec(3), 2..8),
            cands in prop::collection::vec(arb_vec(3), 0..12),
        ) {
            let cands: Vec<_> = cands.into_iter().enumerate().map(|(i, v)| (ex(i), v)).collect();
            let low = filter_similar(&cands, &refs, &FilterConfig::new(0.5, "t", 4).unwrap()).unwrap();
            let high = filter_similar(&cands, &refs, &FilterConfig::new(0.9, "t", 4).unwrap()).unwrap();
            // a larger sigma only raises the bar when the reference set is
            // self-similar on average
            prop_assume!(low.threshold >= 0.0);
            prop_assert!(high.kept.iter().all(|e| low.kept.contains(e)));
            let kept: Vec<_> = cands.iter().filter(|(e, _)| low.kept.contains(e)).cloned().collect();
            let again = filter_with_threshold(&kept, &refs, low.threshold).unwrap();
            prop_assert_eq!(again, low.kept);
        }
    }
}
