//! Training-set emissions and exhaustive nearest-neighbour search.
//!
//! Distances are Euclidean. The scan uses `‖q‖² − 2q·f + ‖f‖²` over
//! precomputed row norms so a block of queries becomes one matrix product;
//! rows within rounding distance of the best candidate are then rescored
//! with the direct difference so the reported distance and tie-break are
//! exact.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImageSet;
use crate::nn::CnnModel;
use crate::tensor::matmul_abt;
use crate::{Error, Result, Tensor};

pub const STORE_MAGIC: &[u8; 4] = b"RQF1";

/// Queries scored per matrix product.
const QUERY_BLOCK: usize = 64;
/// Images per forward pass during extraction.
const EXTRACT_CHUNK: usize = 100;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Raw,
    UnitL2,
}

impl NormMode {
    pub fn code(self) -> u8 {
        match self {
            NormMode::Raw => 0,
            NormMode::UnitL2 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(NormMode::Raw),
            1 => Some(NormMode::UnitL2),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NormMode::Raw => "raw",
            NormMode::UnitL2 => "l2",
        }
    }

    /// Normalize a row in place. Returns `false` for a zero row under
    /// `UnitL2`.
    pub fn apply(self, row: &mut [f64]) -> bool {
        match self {
            NormMode::Raw => true,
            NormMode::UnitL2 => {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return false;
                }
                for v in row {
                    *v /= norm;
                }
                true
            }
        }
    }
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(NormMode::Raw),
            "l2" | "unit_l2" => Ok(NormMode::UnitL2),
            other => Err(Error::invalid(format!(
                "unknown norm mode {other:?} (expected raw or l2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NnResult {
    pub distance: f64,
    pub label: u8,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<u8>,
    norm_mode: NormMode,
    sq_norms: Vec<f64>,
    max_sq_norm: f64,
}

impl FeatureStore {
    /// Wrap already-normalized rows.
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<u8>,
        norm_mode: NormMode,
    ) -> Result<Self> {
        if labels.is_empty() || dim == 0 {
            return Err(Error::invalid(
                "feature store needs at least one non-empty row",
            ));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::dim(format!(
                "{} values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        let sq_norms: Vec<f64> = features
            .chunks_exact(dim)
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        for (i, (row, &n)) in features.chunks_exact(dim).zip(&sq_norms).enumerate() {
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("feature row {i} is not finite")));
            }
            if norm_mode == NormMode::UnitL2 && (n.sqrt() - 1.0).abs() > 1e-9 {
                if n == 0.0 {
                    return Err(Error::DegenerateFeature { index: i });
                }
                return Err(Error::invalid(format!(
                    "row {i} has norm {} in a unit-norm store",
                    n.sqrt()
                )));
            }
        }
        let max_sq_norm = sq_norms.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            features,
            dim,
            labels,
            norm_mode,
            sq_norms,
            max_sq_norm,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn norm_mode(&self) -> NormMode {
        self.norm_mode
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Nearest stored row to `query`; lowest index wins ties.
    pub fn nn_query(&self, query: &[f64]) -> Result<NnResult> {
        let mut out = self.nn_query_batch(query)?;
        if out.len() != 1 {
            return Err(Error::dim(format!(
                "query has {} values, store rows have {}",
                query.len(),
                self.dim
            )));
        }
        Ok(out.pop().unwrap())
    }

    /// Nearest neighbours for row-major `queries`, in query order.
    pub fn nn_query_batch(&self, queries: &[f64]) -> Result<Vec<NnResult>> {
        if queries.is_empty() || !queries.len().is_multiple_of(self.dim) {
            return Err(Error::dim(format!(
                "{} query values are not whole rows of width {}",
                queries.len(),
                self.dim
            )));
        }
        let blocks: Vec<Vec<NnResult>> = queries
            .par_chunks(QUERY_BLOCK * self.dim)
            .map(|block| self.query_block(block))
            .collect();
        Ok(blocks.into_iter().flatten().collect())
    }

    fn query_block(&self, block: &[f64]) -> Vec<NnResult> {
        let (m, n, k) = (block.len() / self.dim, self.len(), self.dim);
        let mut dots = vec![0.0; m * n];
        matmul_abt(block, &self.features, &mut dots, m, k, n);
        block
            .chunks_exact(k)
            .zip(dots.chunks_exact(n))
            .map(|(q, dot)| self.refine(q, dot))
            .collect()
    }

    fn refine(&self, q: &[f64], dot: &[f64]) -> NnResult {
        let qn: f64 = q.iter().map(|v| v * v).sum();
        let approx = |j: usize| qn - 2.0 * dot[j] + self.sq_norms[j];
        let best = (0..self.len()).map(approx).fold(f64::INFINITY, f64::min);
        // Expansion rounding is relative to the operand norms.
        let band = 1e-10 * (qn + self.max_sq_norm) + f64::MIN_POSITIVE;

        let mut winner = (usize::MAX, f64::INFINITY);
        for j in 0..self.len() {
            if approx(j) <= best + band {
                let d2 = squared_distance(q, self.row(j));
                if d2 < winner.1 {
                    winner = (j, d2);
                }
            }
        }
        NnResult {
            distance: winner.1.sqrt(),
            label: self.labels[winner.0],
            index: winner.0,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(STORE_MAGIC)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u64::<LittleEndian>(self.dim as u64)?;
        w.write_u8(self.norm_mode.code())?;
        for &v in &self.features {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_all(&self.labels)?;
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let eof = |e: io::Error| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                Error::Truncated("feature store ends early".into())
            } else {
                Error::Io(e)
            }
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != STORE_MAGIC {
            return Err(Error::format(format!(
                "bad feature store magic {magic:?}, expected {STORE_MAGIC:?}"
            )));
        }
        let n = r.read_u64::<LittleEndian>().map_err(eof)? as usize;
        let dim = r.read_u64::<LittleEndian>().map_err(eof)? as usize;
        let code = r.read_u8().map_err(eof)?;
        let norm_mode = NormMode::from_code(code)
            .ok_or_else(|| Error::format(format!("unknown norm mode code {code}")))?;
        let count = n
            .checked_mul(dim)
            .filter(|&c| c <= (1 << 34))
            .ok_or_else(|| Error::format(format!("implausible store size {n}×{dim}")))?;
        let mut features = vec![0.0; count];
        r.read_f64_into::<LittleEndian>(&mut features)
            .map_err(eof)?;
        let mut labels = vec![0u8; n];
        r.read_exact(&mut labels).map_err(eof)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after feature store payload"));
        }
        Self::new(features, dim, labels, norm_mode).map_err(|e| match e {
            Error::Dimension(m) | Error::Validation(m) => Error::format(m),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(21 + self.features.len() * 8 + self.len());
        self.write(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read(bytes.as_slice())
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Raw emissions for every image in `set`, `[N, emission_dim]`.
pub fn emissions(model: &CnnModel, images: &Tensor) -> Result<Tensor> {
    let n = images.shape()[0];
    let starts: Vec<usize> = (0..n).step_by(EXTRACT_CHUNK).collect();
    let chunks: Vec<Tensor> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + EXTRACT_CHUNK).min(n)).collect();
            model
                .forward(&images.select_rows(&idx)?)
                .map(|o| o.emission)
        })
        .collect::<Result<_>>()?;
    let dim = model.emission_dim();
    let mut data = Vec::with_capacity(n * dim);
    for c in chunks {
        data.extend_from_slice(c.data());
    }
    Tensor::new(vec![n, dim], data)
}

/// Apply `mode` to every row, reporting the first zero row.
pub fn normalize_rows(data: &mut [f64], dim: usize, mode: NormMode) -> Result<()> {
    for (i, row) in data.chunks_exact_mut(dim).enumerate() {
        if !mode.apply(row) {
            return Err(Error::DegenerateFeature { index: i });
        }
    }
    Ok(())
}

/// Emissions of `set` normalized per `norm_mode`, with labels carried over.
pub fn extract_features(
    model: &CnnModel,
    set: &LabeledImageSet,
    norm_mode: NormMode,
) -> Result<FeatureStore> {
    let em = emissions(model, set.images())?;
    let dim = em.shape()[1];
    let mut data = em.into_data();
    normalize_rows(&mut data, dim, norm_mode)?;
    FeatureStore::new(data, dim, set.labels().to_vec(), norm_mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(store: &FeatureStore, q: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for j in 0..store.len() {
            let mut s = 0.0;
            for k in 0..store.dim() {
                let d = q[k] - store.row(j)[k];
                s += d * d;
            }
            if s < best.1 {
                best = (j, s);
            }
        }
        (best.0, best.1.sqrt())
    }

    fn random_store(n: usize, dim: usize, seed: u64) -> FeatureStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l = (0..n).map(|i| (i % 10) as u8).collect();
        FeatureStore::new(f, dim, l, NormMode::Raw).unwrap()
    }

    #[test]
    fn two_point_store() {
        let s = FeatureStore::new(vec![0.0, 0.0, 3.0, 4.0], 2, vec![1, 2], NormMode::Raw).unwrap();
        let r = s.nn_query(&[0.0, 0.0]).unwrap();
        assert_eq!((r.index, r.distance, r.label), (0, 0.0, 1));
        let r = s.nn_query(&[3.0, 0.0]).unwrap();
        assert_eq!((r.index, r.distance), (0, 3.0));
        let r = s.nn_query(&[3.0, 3.9]).unwrap();
        assert_eq!(r.index, 1);
    }

    #[test]
    fn self_match_is_exact_in_both_modes() {
        let s = random_store(50, 16, 1);
        for k in [0, 17, 49] {
            let r = s.nn_query(s.row(k)).unwrap();
            assert_eq!((r.index, r.distance), (k, 0.0));
        }
        let mut f = s.features().to_vec();
        normalize_rows(&mut f, 16, NormMode::UnitL2).unwrap();
        let u = FeatureStore::new(f, 16, s.labels().to_vec(), NormMode::UnitL2).unwrap();
        let r = u.nn_query(u.row(23)).unwrap();
        assert_eq!((r.index, r.distance), (23, 0.0));
    }

    #[test]
    fn duplicate_rows_lower_index_wins() {
        let mut f = vec![5.0, 5.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        f.extend_from_slice(&[9.0, 9.0]);
        let s = FeatureStore::new(f, 2, vec![0, 1, 2, 3, 4], NormMode::Raw).unwrap();
        assert_eq!(s.nn_query(&[1.1, 2.0]).unwrap().index, 1);
    }

    #[test]
    fn matches_naive_scan() {
        let s = random_store(1000, 256, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q: Vec<f64> = (0..100 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = s.nn_query_batch(&q).unwrap();
        for (r, qi) in got.iter().zip(q.chunks(256)) {
            let (idx, d) = naive(&s, qi);
            assert_eq!(r.index, idx);
            assert!((r.distance - d).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_of_one_and_permutation() {
        let s = random_store(200, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q: Vec<f64> = (0..10 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let all = s.nn_query_batch(&q).unwrap();
        assert_eq!(
            s.nn_query_batch(&q[..8]).unwrap()[0],
            s.nn_query(&q[..8]).unwrap()
        );
        let mut rev = Vec::new();
        for row in q.chunks(8).rev() {
            rev.extend_from_slice(row);
        }
        let mut back = s.nn_query_batch(&rev).unwrap();
        back.reverse();
        assert_eq!(all, back);
    }

    #[test]
    fn dimension_and_degenerate_errors() {
        let s = random_store(5, 4, 0);
        assert!(matches!(s.nn_query(&[0.0; 3]), Err(Error::Dimension(_))));
        assert!(matches!(s.nn_query(&[0.0; 8]), Err(Error::Dimension(_))));
        let mut rows = vec![1.0, 0.0, 0.0, 0.0];
        assert!(matches!(
            normalize_rows(&mut rows, 2, NormMode::UnitL2),
            Err(Error::DegenerateFeature { index: 1 })
        ));
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let s = random_store(7, 3, 2);
        let mut buf = Vec::new();
        s.write(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 8 + 8 + 1 + 7 * 3 * 8 + 7);
        assert_eq!(FeatureStore::read(buf.as_slice()).unwrap(), s);
        assert!(matches!(
            FeatureStore::read(&buf[..buf.len() - 1]),
            Err(Error::Truncated(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            FeatureStore::read(bad.as_slice()),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn reported_distance_is_minimal(seed in 0u64..1000, n in 1usize..40, dim in 1usize..12) {
            let s = random_store(n, dim, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let r = s.nn_query(&q).unwrap();
            prop_assert!(r.index < n && r.distance >= 0.0);
            for j in 0..n {
                prop_assert!(r.distance <= squared_distance(&q, s.row(j)).sqrt());
            }
        }
    }
}
