//! Compression operators for gossip messages.
//!
//! Every operator maps a dense vector to a [`SparseUpdate`]. `rand_k` and
//! `top_k` keep `k` coordinates and satisfy
//! `E ||Q(x) - x||² <= (1 - k/d) ||x||²`; identity keeps everything.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, RngStream};

/// Bytes per transmitted sparse coordinate: a u32 index and an f64 value.
pub const SPARSE_ENTRY_BYTES: u64 = 4 + 8;
/// Bytes per coordinate of a dense message.
pub const DENSE_ENTRY_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Sparse,
    Dense,
}

/// A compressed vector: strictly increasing `(index, value)` pairs with
/// zero values dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    dim: usize,
    entries: Vec<(usize, f64)>,
    encoding: Encoding,
}

impl SparseUpdate {
    pub fn empty(dim: usize) -> Self {
        SparseUpdate {
            dim,
            entries: Vec::new(),
            encoding: Encoding::Sparse,
        }
    }

    /// Keeps `x[i]` for every `i` in `kept`, which must be strictly increasing.
    fn from_kept(x: &[f64], kept: impl IntoIterator<Item = usize>, encoding: Encoding) -> Self {
        let entries = kept
            .into_iter()
            .filter(|&i| x[i] != 0.0)
            .map(|i| (i, x[i]))
            .collect();
        SparseUpdate {
            dim: x.len(),
            entries,
            encoding,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn densify(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }

    /// `target += self`, touching only the transmitted coordinates.
    pub fn add_to(&self, target: &mut [f64]) {
        debug_assert_eq!(target.len(), self.dim);
        for &(i, v) in &self.entries {
            target[i] += v;
        }
    }
}

/// Wire size of a message: 12 bytes per sparse entry, 8 bytes per
/// coordinate for dense messages.
pub fn message_bytes(u: &SparseUpdate) -> u64 {
    match u.encoding {
        Encoding::Sparse => u.entries.len() as u64 * SPARSE_ENTRY_BYTES,
        Encoding::Dense => u.dim as u64 * DENSE_ENTRY_BYTES,
    }
}

fn check_k(k: usize, dim: usize) -> Result<()> {
    if k == 0 || k > dim {
        return Err(Error::InvalidParameter(format!(
            "k = {k} outside [1, {dim}]"
        )));
    }
    Ok(())
}

/// Samples a uniform `k`-subset by partial Fisher–Yates, returned sorted.
pub fn sample_subset<R: Rng + ?Sized>(dim: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dim).collect();
    for i in 0..k {
        let j = rng.random_range(i..dim);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

pub fn compress_rand_k<R: Rng + ?Sized>(x: &[f64], k: usize, rng: &mut R) -> Result<SparseUpdate> {
    check_k(k, x.len())?;
    let kept = sample_subset(x.len(), k, rng);
    Ok(SparseUpdate::from_kept(x, kept, Encoding::Sparse))
}

/// Indices of the `k` largest magnitudes, ties toward the lower index,
/// returned sorted.
pub fn top_k_indices(x: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    let by_magnitude = |&a: &usize, &b: &usize| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, by_magnitude);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

pub fn compress_top_k(x: &[f64], k: usize) -> Result<SparseUpdate> {
    check_k(k, x.len())?;
    Ok(SparseUpdate::from_kept(
        x,
        top_k_indices(x, k),
        Encoding::Sparse,
    ))
}

pub fn compress_identity(x: &[f64]) -> SparseUpdate {
    SparseUpdate::from_kept(x, 0..x.len(), Encoding::Dense)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressorKind {
    Identity,
    RandK,
    TopK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressorSpec {
    #[serde(rename = "compressor")]
    pub kind: CompressorKind,
    /// Kept coordinates; ignored for identity.
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    1
}

impl CompressorSpec {
    pub fn identity() -> Self {
        CompressorSpec {
            kind: CompressorKind::Identity,
            k: 1,
        }
    }

    pub fn rand_k(k: usize) -> Self {
        CompressorSpec {
            kind: CompressorKind::RandK,
            k,
        }
    }

    pub fn top_k(k: usize) -> Self {
        CompressorSpec {
            kind: CompressorKind::TopK,
            k,
        }
    }

    /// Contract parameter δ once the dimension is known.
    pub fn delta(&self, dim: usize) -> Result<f64> {
        match self.kind {
            CompressorKind::Identity => Ok(1.0),
            _ => {
                check_k(self.k, dim)?;
                Ok(self.k as f64 / dim as f64)
            }
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        self.delta(dim).map(|_| ())
    }

    pub fn compress<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<SparseUpdate> {
        match self.kind {
            CompressorKind::Identity => Ok(compress_identity(x)),
            CompressorKind::RandK => compress_rand_k(x, self.k, rng),
            CompressorKind::TopK => compress_top_k(x, self.k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractReport {
    pub trials: usize,
    pub max_ratio: f64,
    pub mean_ratio: f64,
    /// Standard error of `mean_ratio`.
    pub std_error: f64,
    /// `1 - δ`.
    pub bound: f64,
}

/// Rounding slack for the pointwise `top_k` bound.
const POINTWISE_SLACK: f64 = 1e-12;

/// Samples standard normal vectors and measures `||Q(x) - x||² / ||x||²`.
///
/// Each trial's vector comes from its own seed drawn from `rng`, so an
/// offending vector can be regenerated from the seed in the error. The
/// `top_k` (and identity) bound is checked per trial; `rand_k` is checked
/// on the mean, within three standard errors.
pub fn contract_check(
    spec: &CompressorSpec,
    dim: usize,
    trials: usize,
    rng: &mut RngStream,
) -> Result<ContractReport> {
    if trials == 0 {
        return Err(Error::InvalidParameter(
            "contract check needs at least one trial".into(),
        ));
    }
    let delta = spec.delta(dim)?;
    let bound = 1.0 - delta;
    let mut x = vec![0.0; dim];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut max_ratio = 0.0f64;
    let mut max_seed = 0;
    for _ in 0..trials {
        let seed = rng.next_u64();
        let mut vrng = rng::stream(seed);
        for v in x.iter_mut() {
            *v = vrng.sample(StandardNormal);
        }
        let norm_sq: f64 = x.iter().map(|v| v * v).sum();
        if norm_sq == 0.0 {
            continue;
        }
        let q = spec.compress(&x, &mut vrng)?;
        let kept_sq: f64 = q.entries().iter().map(|(_, v)| v * v).sum();
        // ||Q(x) - x||² is the energy on dropped coordinates.
        let ratio = ((norm_sq - kept_sq) / norm_sq).max(0.0);
        if spec.kind != CompressorKind::RandK && ratio > bound + POINTWISE_SLACK {
            return Err(Error::ContractViolation {
                seed,
                detail: format!("ratio {ratio} exceeds 1 - delta = {bound}"),
            });
        }
        if ratio > max_ratio {
            max_ratio = ratio;
            max_seed = seed;
        }
        sum += ratio;
        sum_sq += ratio * ratio;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = if trials > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    let std_error = (var / n).sqrt();
    if spec.kind == CompressorKind::RandK
        && (mean - bound).abs() > 3.0 * std_error + POINTWISE_SLACK
    {
        return Err(Error::ContractViolation {
            seed: max_seed,
            detail: format!(
                "mean ratio {mean} not within 3 standard errors ({std_error}) of {bound}"
            ),
        });
    }
    Ok(ContractReport {
        trials,
        max_ratio,
        mean_ratio: mean,
        std_error,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rand_k_edge_cases() {
        let mut r = rng::stream(1);
        let x = [1.0, -2.0, 3.0, 0.5];
        assert_eq!(
            compress_rand_k(&x, 4, &mut r).unwrap().densify(),
            x.to_vec()
        );
        assert_eq!(compress_rand_k(&[0.0; 5], 2, &mut r).unwrap().nnz(), 0);
        assert!(compress_rand_k(&x, 0, &mut r).is_err());
        assert!(compress_rand_k(&x, 5, &mut r).is_err());
    }

    #[test]
    fn rand_k_expected_error_over_all_subsets() {
        // All C(4,2) subsets of x = (1,1,1,1): each leaves error 2.
        let x = [1.0; 4];
        let mut total = 0.0;
        let mut count = 0;
        for a in 0..4 {
            for b in a + 1..4 {
                let err: f64 = (0..4)
                    .filter(|&i| i != a && i != b)
                    .map(|i| x[i] * x[i])
                    .sum();
                total += err;
                count += 1;
            }
        }
        assert_eq!(count, 6);
        assert_eq!(total / count as f64, (1.0 - 2.0 / 4.0) * 4.0);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(
            compress_top_k(&[3.0, -5.0, 1.0], 1).unwrap().entries(),
            &[(1, -5.0)]
        );
        assert_eq!(
            compress_top_k(&[2.0, -2.0, 0.0], 1).unwrap().entries(),
            &[(0, 2.0)]
        );
        let x = [1.0, 2.0, 3.0, 4.0];
        let q = compress_top_k(&x, 2).unwrap().densify();
        let err: f64 = x.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum();
        assert_eq!(err, 5.0);
        assert!(err <= 0.5 * 30.0);
    }

    #[test]
    fn identity_examples() {
        let q = compress_identity(&[1.0, 0.0, 2.0]);
        assert_eq!(q.entries(), &[(0, 1.0), (2, 2.0)]);
        assert_eq!(message_bytes(&q), 24);
        assert_eq!(compress_identity(&[0.0; 3]).nnz(), 0);
    }

    #[test]
    fn message_sizes() {
        assert_eq!(message_bytes(&SparseUpdate::empty(10)), 0);
        let x: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(message_bytes(&compress_top_k(&x, 100).unwrap()), 1200);
        assert_eq!(message_bytes(&compress_identity(&x)), 8000);
    }

    #[test]
    fn contract_check_exact_cases() {
        let mut r = rng::stream(5);
        let rep = contract_check(&CompressorSpec::identity(), 17, 50, &mut r).unwrap();
        assert_eq!(rep.max_ratio, 0.0);
        let rep = contract_check(&CompressorSpec::top_k(10), 10, 50, &mut r).unwrap();
        assert_eq!(rep.max_ratio, 0.0);
        assert!(contract_check(&CompressorSpec::top_k(3), 10, 0, &mut r).is_err());
    }

    #[test]
    fn top_k_is_deterministic() {
        let x: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        assert_eq!(
            compress_top_k(&x, 9).unwrap(),
            compress_top_k(&x, 9).unwrap()
        );
    }

    proptest! {
        #[test]
        fn rand_k_reproducible_and_keeps_values(
            x in prop::collection::vec(-10.0f64..10.0, 1..40),
            seed in any::<u64>(),
            kfrac in 0.0f64..1.0,
        ) {
            let k = 1 + ((x.len() - 1) as f64 * kfrac) as usize;
            let a = compress_rand_k(&x, k, &mut rng::stream(seed)).unwrap();
            let b = compress_rand_k(&x, k, &mut rng::stream(seed)).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.nnz() <= k);
            let dense = a.densify();
            for &(i, v) in a.entries() {
                prop_assert_eq!(v.to_bits(), x[i].to_bits());
                prop_assert_eq!(dense[i].to_bits(), x[i].to_bits());
            }
            prop_assert!(a.entries().windows(2).all(|w| w[0].0 < w[1].0));
        }

        #[test]
        fn top_k_within_contract(x in prop::collection::vec(-10.0f64..10.0, 1..40), kfrac in 0.0f64..1.0) {
            let d = x.len();
            let k = 1 + ((d - 1) as f64 * kfrac) as usize;
            let q = compress_top_k(&x, k).unwrap();
            let dense = q.densify();
            let err: f64 = x.iter().zip(&dense).map(|(a, b)| (a - b).powi(2)).sum();
            let norm: f64 = x.iter().map(|a| a * a).sum();
            prop_assert!(err <= (1.0 - k as f64 / d as f64) * norm * (1.0 + 1e-12) + 1e-300);
        }
    }
}
