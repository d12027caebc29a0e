//! Binary fingerprints and the finite chemical space they span.
//!
//! A compound is a bit vector of fixed length `kappa`; the similarity between
//! two compounds is the Tanimoto coefficient `|a ∧ b| / |a ∨ b|` and the
//! distance is `1 - S`. The distance itself is not Euclidean, but its square
//! root is, which is what licenses the isotropic kernels in [`crate::kernel`].

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

const WORD: usize = 64;

/// Relative tolerance on the smallest eigenvalue of `S`.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// A packed bit vector. Unlike [`Fingerprint`] it may be all zero, which is
/// what the genetic operators need while they shuffle bits around.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Bits {
    words: Vec<u64>,
    len: usize,
}

impl Bits {
    pub fn zeros(len: usize) -> Self {
        Bits {
            words: vec![0; len.div_ceil(WORD)],
            len,
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut out = Bits::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                out.set(i, true);
            }
        }
        out
    }

    /// Builds the `kappa`-bit vector whose bit `i` is bit `i` of `code`.
    pub fn from_index(code: u64, kappa: usize) -> Self {
        assert!(kappa <= 64, "from_index supports at most 64 bits");
        let mut out = Bits::zeros(kappa);
        for i in 0..kappa {
            if code >> i & 1 == 1 {
                out.set(i, true);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        self.words[i / WORD] >> (i % WORD) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        let mask = 1u64 << (i % WORD);
        if value {
            self.words[i / WORD] |= mask;
        } else {
            self.words[i / WORD] &= !mask;
        }
    }

    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        self.words[i / WORD] ^= 1u64 << (i % WORD);
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn hamming(&self, other: &Bits) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    /// Exchanges every bit at positions `>= from` with `other`.
    pub fn swap_suffix(&mut self, other: &mut Bits, from: usize) {
        debug_assert_eq!(self.len, other.len);
        for i in from..self.len {
            let (a, b) = (self.get(i), other.get(i));
            if a != b {
                self.set(i, b);
                other.set(i, a);
            }
        }
    }

    /// Tanimoto similarity of two equal-length, non-zero bit vectors.
    fn tanimoto(&self, other: &Bits) -> f64 {
        let (mut common, mut either) = (0u32, 0u32);
        for (a, b) in self.words.iter().zip(&other.words) {
            common += (a & b).count_ones();
            either += (a | b).count_ones();
        }
        f64::from(common) / f64::from(either)
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.iter() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bits({self})")
    }
}

impl FromStr for Bits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let mut out = Bits::zeros(s.len());
        for (i, c) in s.chars().enumerate() {
            match c {
                '0' => {}
                '1' => out.set(i, true),
                other => {
                    return Err(Error::InvalidFingerprint(format!(
                        "unexpected character {other:?} at position {i}"
                    )))
                }
            }
        }
        Ok(out)
    }
}

impl Serialize for Bits {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Bits {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A compound: a non-empty bit vector with at least one feature present.
#[derive(Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct Fingerprint(Bits);

impl Fingerprint {
    pub fn new(bits: Bits) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidFingerprint("fingerprint has no features".into()));
        }
        if bits.is_zero() {
            return Err(Error::InvalidFingerprint(
                "all-zero fingerprint is not a compound".into(),
            ));
        }
        Ok(Fingerprint(bits))
    }

    pub fn from_bools(bits: &[bool]) -> Result<Self> {
        Fingerprint::new(Bits::from_bools(bits))
    }

    pub fn kappa(&self) -> usize {
        self.0.len()
    }

    pub fn bits(&self) -> &Bits {
        &self.0
    }

    pub fn into_bits(self) -> Bits {
        self.0
    }

    pub fn get(&self, i: usize) -> bool {
        self.0.get(i)
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.0)
    }
}

impl FromStr for Fingerprint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Fingerprint::new(s.parse()?)
    }
}

impl TryFrom<Bits> for Fingerprint {
    type Error = Error;

    fn try_from(bits: Bits) -> Result<Self> {
        Fingerprint::new(bits)
    }
}

impl<'de> Deserialize<'de> for Fingerprint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let bits = Bits::deserialize(d)?;
        Fingerprint::new(bits).map_err(serde::de::Error::custom)
    }
}

/// Tanimoto similarity: shared features over features present in either.
pub fn tanimoto_similarity(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    if a.kappa() != b.kappa() {
        return Err(Error::InvalidFingerprint(format!(
            "length mismatch: {} vs {}",
            a.kappa(),
            b.kappa()
        )));
    }
    Ok(a.0.tanimoto(&b.0))
}

pub fn tanimoto_distance(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    Ok(1.0 - tanimoto_similarity(a, b)?)
}

/// The `m` distinct compounds under study, with cached pairwise similarity.
#[derive(Clone, Debug)]
pub struct ChemicalSpace {
    compounds: Vec<Fingerprint>,
    ids: Vec<String>,
    similarity: DMatrix<f64>,
    distance: DMatrix<f64>,
    index: HashMap<Bits, usize>,
}

impl ChemicalSpace {
    pub fn len(&self) -> usize {
        self.compounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compounds.is_empty()
    }

    pub fn kappa(&self) -> usize {
        self.compounds[0].kappa()
    }

    pub fn compounds(&self) -> &[Fingerprint] {
        &self.compounds
    }

    pub fn compound(&self, r: usize) -> &Fingerprint {
        &self.compounds[r]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn similarity(&self) -> &DMatrix<f64> {
        &self.similarity
    }

    pub fn distance(&self) -> &DMatrix<f64> {
        &self.distance
    }

    /// Position of `fp` in the space, if present.
    pub fn position(&self, fp: &Fingerprint) -> Option<usize> {
        self.index.get(fp.bits()).copied()
    }

    pub fn position_of_id(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Tanimoto distances from `candidate` to every compound of the space.
    pub fn distances_to(&self, candidate: &Fingerprint) -> Result<Vec<f64>> {
        if candidate.kappa() != self.kappa() {
            return Err(Error::InvalidFingerprint(format!(
                "candidate has {} features, space has {}",
                candidate.kappa(),
                self.kappa()
            )));
        }
        Ok(self
            .compounds
            .iter()
            .map(|c| 1.0 - c.0.tanimoto(&candidate.0))
            .collect())
    }

    /// Restriction to the compounds at `rows`, in that order. Reuses the
    /// cached similarities.
    pub fn subset(&self, rows: &[usize]) -> ChemicalSpace {
        let m = rows.len();
        let similarity = DMatrix::from_fn(m, m, |r, s| self.similarity[(rows[r], rows[s])]);
        let distance = DMatrix::from_fn(m, m, |r, s| self.distance[(rows[r], rows[s])]);
        let compounds: Vec<_> = rows.iter().map(|&r| self.compounds[r].clone()).collect();
        let ids = rows.iter().map(|&r| self.ids[r].clone()).collect();
        let index = compounds
            .iter()
            .enumerate()
            .map(|(i, c)| (c.bits().clone(), i))
            .collect();
        ChemicalSpace {
            compounds,
            ids,
            similarity,
            distance,
            index,
        }
    }
}

/// Builds the space with default ids `c1..cm`.
pub fn build_space(compounds: Vec<Fingerprint>) -> Result<ChemicalSpace> {
    let ids = (1..=compounds.len()).map(|i| format!("c{i}")).collect();
    build_space_with_ids(compounds, ids)
}

pub fn build_space_with_ids(compounds: Vec<Fingerprint>, ids: Vec<String>) -> Result<ChemicalSpace> {
    if compounds.is_empty() {
        return Err(Error::Data("chemical space needs at least one compound".into()));
    }
    if ids.len() != compounds.len() {
        return Err(Error::Data("one id per compound required".into()));
    }
    let kappa = compounds[0].kappa();
    let mut index = HashMap::with_capacity(compounds.len());
    for (r, c) in compounds.iter().enumerate() {
        if c.kappa() != kappa {
            return Err(Error::InvalidFingerprint(format!(
                "compound {} has {} features, expected {kappa}",
                ids[r],
                c.kappa()
            )));
        }
        if let Some(&first) = index.get(c.bits()) {
            return Err(Error::DuplicateCompound { first, second: r });
        }
        index.insert(c.bits().clone(), r);
    }

    let m = compounds.len();
    let mut similarity = DMatrix::identity(m, m);
    for r in 0..m {
        for s in (r + 1)..m {
            let v = compounds[r].0.tanimoto(&compounds[s].0);
            similarity[(r, s)] = v;
            similarity[(s, r)] = v;
        }
    }
    let distance = similarity.map(|s| 1.0 - s);

    let eig = SymmetricEigen::new(similarity.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= -PSD_TOLERANCE * max {
        return Err(Error::NumericalDegeneracy(format!(
            "similarity matrix has eigenvalue {min:e} (largest {max:e})"
        )));
    }

    Ok(ChemicalSpace {
        compounds,
        ids,
        similarity,
        distance,
        index,
    })
}

/// `B = ½ H S H` with the centring matrix `H = I - J/m`; positive
/// semi-definite exactly when `√T` embeds isometrically in Euclidean space.
pub fn embeddability_gram(space: &ChemicalSpace) -> DMatrix<f64> {
    let m = space.len();
    let h = DMatrix::identity(m, m) - DMatrix::from_element(m, m, 1.0 / m as f64);
    (&h * space.similarity() * &h) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmbeddingCheck {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// Number of eigenvalues above `1e-10 * max(1, max_eigenvalue)`.
    pub rank: usize,
}

impl EmbeddingCheck {
    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_eigenvalue >= -tol
    }
}

pub fn eigen_summary(matrix: &DMatrix<f64>) -> EmbeddingCheck {
    let eig = SymmetricEigen::new(matrix.clone());
    let max = eig.eigenvalues.max();
    let cutoff = 1e-10 * max.max(1.0);
    EmbeddingCheck {
        min_eigenvalue: eig.eigenvalues.min(),
        max_eigenvalue: max,
        rank: eig.eigenvalues.iter().filter(|&&v| v > cutoff).count(),
    }
}

pub fn embedding_check(space: &ChemicalSpace) -> EmbeddingCheck {
    eigen_summary(&embeddability_gram(space))
}

/// The four compounds `(0,1,1), (1,0,1), (1,1,0), (1,1,1)`.
pub fn four_compound_space() -> ChemicalSpace {
    let compounds = ["011", "101", "110", "111"]
        .iter()
        .map(|s| s.parse().expect("static fingerprint"))
        .collect();
    build_space(compounds).expect("static space is valid")
}

/// Gaussian kernel applied to the raw Tanimoto distance, `exp(-T²)`, on the
/// four-compound space, with its smallest eigenvalue. The matrix is not
/// positive definite.
pub fn naive_gaussian_counterexample() -> (DMatrix<f64>, f64) {
    let space = four_compound_space();
    let r = space.distance().map(|t| (-t * t).exp());
    let min = SymmetricEigen::new(r.clone()).eigenvalues.min();
    (r, min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fp(s: &str) -> Fingerprint {
        s.parse().unwrap()
    }

    #[test]
    fn tanimoto_examples() {
        let s = tanimoto_similarity(&fp("011"), &fp("101")).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-15);
        assert!((tanimoto_distance(&fp("011"), &fp("101")).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let s = tanimoto_similarity(&fp("111"), &fp("011")).unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(tanimoto_similarity(&fp("10110"), &fp("10110")).unwrap(), 1.0);
    }

    #[test]
    fn invalid_fingerprints_rejected() {
        assert!(matches!("000".parse::<Fingerprint>(), Err(Error::InvalidFingerprint(_))));
        assert!(matches!("".parse::<Fingerprint>(), Err(Error::InvalidFingerprint(_))));
        assert!(matches!("01x".parse::<Fingerprint>(), Err(Error::InvalidFingerprint(_))));
        assert!(tanimoto_similarity(&fp("01"), &fp("011")).is_err());
    }

    #[test]
    fn packed_words_cross_boundary() {
        let mut s = "0".repeat(130);
        s.replace_range(63..65, "11");
        s.replace_range(129..130, "1");
        let a: Fingerprint = s.parse().unwrap();
        assert_eq!(a.bits().count_ones(), 3);
        assert!(a.get(63) && a.get(64) && a.get(129) && !a.get(65));
        assert_eq!(a.to_string(), s);
    }

    #[test]
    fn four_compound_distances() {
        let space = four_compound_space();
        let t = space.distance();
        let third = 1.0 / 3.0;
        let expected = [
            [0.0, 2.0 * third, 2.0 * third, third],
            [2.0 * third, 0.0, 2.0 * third, third],
            [2.0 * third, 2.0 * third, 0.0, third],
            [third, third, third, 0.0],
        ];
        for r in 0..4 {
            for s in 0..4 {
                assert!((t[(r, s)] - expected[r][s]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_compound_space() {
        let space = build_space(vec![fp("101")]).unwrap();
        assert_eq!(space.similarity()[(0, 0)], 1.0);
        assert_eq!(space.distance()[(0, 0)], 0.0);
        let b = embeddability_gram(&space);
        assert_eq!(b[(0, 0)], 0.0);
    }

    #[test]
    fn duplicates_and_mixed_lengths_rejected() {
        let err = build_space(vec![fp("101"), fp("011"), fp("101")]).unwrap_err();
        assert!(matches!(err, Error::DuplicateCompound { first: 0, second: 2 }));
        let err = build_space(vec![fp("101"), fp("0111")]).unwrap_err();
        assert!(matches!(err, Error::InvalidFingerprint(_)));
        assert!(build_space(vec![]).is_err());
    }

    #[test]
    fn gram_of_four_compound_space_is_psd_rank_three() {
        let check = embedding_check(&four_compound_space());
        assert!(check.min_eigenvalue > -1e-12);
        assert_eq!(check.rank, 3);
    }

    #[test]
    fn counterexample_matches_published_matrix() {
        let (r, min) = naive_gaussian_counterexample();
        assert!(((r[(0, 1)] * 1e4).round() / 1e4 - 0.6412).abs() < 1e-12);
        assert!(((r[(0, 3)] * 1e4).round() / 1e4 - 0.8948).abs() < 1e-12);
        for i in 0..4 {
            assert_eq!(r[(i, i)], 1.0);
        }
        assert!((min + 0.036).abs() < 0.001, "min eigenvalue {min}");
    }

    #[test]
    fn subset_reuses_similarities() {
        let space = four_compound_space();
        let sub = space.subset(&[3, 1]);
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.compound(0), space.compound(3));
        assert!((sub.similarity()[(0, 1)] - space.similarity()[(3, 1)]).abs() < 1e-15);
        assert_eq!(sub.position(space.compound(1)), Some(1));
        assert_eq!(sub.position(space.compound(0)), None);
    }

    #[test]
    fn swap_suffix_exchanges_tail() {
        let mut a: Bits = "111000".parse().unwrap();
        let mut b: Bits = "000111".parse().unwrap();
        a.swap_suffix(&mut b, 3);
        assert_eq!(a.to_string(), "111111");
        assert_eq!(b.to_string(), "000000");
    }
}
