//! Shared domain types and elementary vector math.
//!
//! Vectors are held in `f64` throughout; the bank stores them as `f32`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MpaError, Result};

/// A finite, non-empty embedding vector.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(MpaError::EmptyInput("embedding vector"));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(MpaError::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "dim must be positive");
        Self(vec![0.0; dim])
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `weight * self + (1 - weight) * other`.
    pub fn lerp(&self, other: &Self, weight: f64) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        let values = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| weight * a + (1.0 - weight) * b)
            .collect();
        Self::new(values)
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.len() <= 8 {
            write!(f, "EmbeddingVector({:?})", self.0)
        } else {
            write!(f, "EmbeddingVector(dim={}, head={:?})", self.0.len(), &self.0[..4])
        }
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = MpaError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(MpaError::DimMismatch { expected, got });
    }
    Ok(())
}

/// Provenance tag of an embedding record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    VisualRaw,
    VisualNatural,
    VisualGeometric,
    Semantic,
    Uncertain,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::VisualRaw,
        Modality::VisualNatural,
        Modality::VisualGeometric,
        Modality::Semantic,
        Modality::Uncertain,
    ];

    pub fn code(self) -> u8 {
        match self {
            Modality::VisualRaw => 0,
            Modality::VisualNatural => 1,
            Modality::VisualGeometric => 2,
            Modality::Semantic => 3,
            Modality::Uncertain => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code)).copied()
    }

    pub fn is_visual(self) -> bool {
        matches!(
            self,
            Modality::VisualRaw | Modality::VisualNatural | Modality::VisualGeometric
        )
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Modality::VisualRaw => "raw",
            Modality::VisualNatural => "natural",
            Modality::VisualGeometric => "geometric",
            Modality::Semantic => "semantic",
            Modality::Uncertain => "uncertain",
        };
        f.write_str(name)
    }
}

/// Unique key of a record inside a bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub class_id: u32,
    pub item_id: u32,
    pub view_id: u16,
    pub modality: Modality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledEmbedding {
    pub class_id: u32,
    /// Source image index, or 0 for class-level semantic records.
    pub item_id: u32,
    /// 0 is the raw/original view.
    pub view_id: u16,
    pub modality: Modality,
    pub vector: EmbeddingVector,
}

impl LabeledEmbedding {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            class_id: self.class_id,
            item_id: self.item_id,
            view_id: self.view_id,
            modality: self.modality,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub class_id: u32,
    pub vector: EmbeddingVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            q_queries: 15,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(MpaError::InvalidConfig(format!(
                "n_way must be at least 2, got {}",
                self.n_way
            )));
        }
        if self.k_shot == 0 || self.q_queries == 0 {
            return Err(MpaError::InvalidConfig(
                "k_shot and q_queries must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which support features feed a class prototype.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrototypeSource {
    /// Every enriched support row of the class.
    #[default]
    Enriched,
    VisualRawOnly,
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(MpaError::ZeroNormVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Element-wise arithmetic mean.
pub fn mean_prototype<'a, I>(members: I) -> Result<EmbeddingVector>
where
    I: IntoIterator<Item = &'a EmbeddingVector>,
{
    let mut iter = members.into_iter();
    let first = iter.next().ok_or(MpaError::EmptyClass)?;
    let mut sum = first.as_slice().to_vec();
    let mut count = 1usize;
    for member in iter {
        check_dim(sum.len(), member.dim())?;
        for (s, v) in sum.iter_mut().zip(member.as_slice()) {
            *s += v;
        }
        count += 1;
    }
    let n = count as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    EmbeddingVector::new(sum)
}

pub fn l2_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    let norm = v.norm();
    if norm == 0.0 {
        return Err(MpaError::ZeroNormVector);
    }
    EmbeddingVector::new(v.as_slice().iter().map(|x| x / norm).collect())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn ev(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let v = ev(&[0.3, -2.0, 5.5]);
        assert_abs_diff_eq!(cosine_similarity(&v, &v).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            cosine_similarity(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(
            cosine_similarity(&ev(&[1.0, 2.0]), &ev(&[2.0, 1.0])).unwrap(),
            0.8,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cosine_rejects_zero_norm_and_mismatch() {
        assert!(matches!(
            cosine_similarity(&ev(&[0.0, 0.0]), &ev(&[1.0, 0.0])),
            Err(MpaError::ZeroNormVector)
        ));
        assert!(matches!(
            cosine_similarity(&ev(&[1.0]), &ev(&[1.0, 0.0])),
            Err(MpaError::DimMismatch { .. })
        ));
    }

    #[test]
    fn mean_prototype_examples() {
        assert_eq!(mean_prototype([&ev(&[2.0, 4.0])]).unwrap(), ev(&[2.0, 4.0]));
        assert_eq!(
            mean_prototype([&ev(&[0.0, 0.0]), &ev(&[2.0, 2.0])]).unwrap(),
            ev(&[1.0, 1.0])
        );
        let m = mean_prototype([&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0]), &ev(&[1.0, 1.0])]).unwrap();
        assert_abs_diff_eq!(m.as_slice()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.as_slice()[1], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn mean_prototype_errors() {
        let empty: Vec<EmbeddingVector> = Vec::new();
        assert!(matches!(mean_prototype(&empty), Err(MpaError::EmptyClass)));
        assert!(matches!(
            mean_prototype([&ev(&[1.0]), &ev(&[1.0, 2.0])]),
            Err(MpaError::DimMismatch { .. })
        ));
    }

    #[test]
    fn l2_normalize_examples() {
        let n = l2_normalize(&ev(&[3.0, 4.0])).unwrap();
        assert_abs_diff_eq!(n.as_slice()[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(n.as_slice()[1], 0.8, epsilon = 1e-12);
        assert_eq!(l2_normalize(&ev(&[1.0, 0.0, 0.0])).unwrap(), ev(&[1.0, 0.0, 0.0]));
        assert!(matches!(
            l2_normalize(&ev(&[0.0, 0.0])),
            Err(MpaError::ZeroNormVector)
        ));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            EmbeddingVector::new(vec![1.0, f64::NAN]),
            Err(MpaError::NonFinite { index: 1 })
        ));
        assert!(EmbeddingVector::new(vec![]).is_err());
    }

    #[test]
    fn modality_codes_round_trip() {
        for m in Modality::ALL {
            assert_eq!(Modality::from_code(m.code()), Some(m));
        }
        assert_eq!(Modality::from_code(5), None);
    }

    fn nonzero_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..12).prop_flat_map(|d| {
            (
                prop::collection::vec(-100.0f64..100.0, d),
                prop::collection::vec(-100.0f64..100.0, d),
            )
        })
        .prop_filter("nonzero norms", |(a, b)| {
            a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3)
        })
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant((a, b) in nonzero_pair(), c in 0.01f64..100.0) {
            let (a, b) = (ev(&a), ev(&b));
            let ab = cosine_similarity(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine_similarity(&b, &a).unwrap());
            let scaled = ev(&a.as_slice().iter().map(|v| v * c).collect::<Vec<_>>());
            prop_assert!((cosine_similarity(&scaled, &b).unwrap() - ab).abs() < 1e-6);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn mean_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..8),
            rotate in 0usize..8,
        ) {
            let members: Vec<_> = rows.iter().map(|r| ev(r)).collect();
            let mut shuffled = members.clone();
            shuffled.reverse();
            let k = rotate % shuffled.len();
            shuffled.rotate_left(k);
            let a = mean_prototype(&members).unwrap();
            let b = mean_prototype(&shuffled).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn l2_normalize_idempotent((a, _) in nonzero_pair()) {
            let once = l2_normalize(&ev(&a)).unwrap();
            prop_assert!((once.norm() - 1.0).abs() < 1e-6);
            let twice = l2_normalize(&once).unwrap();
            for (x, y) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
