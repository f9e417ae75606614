//! Synthetic paired datasets with a controlled latent correlation.
//!
//! Latents are drawn from `N(0, Σ)` where `Σ` has identity diagonal blocks and
//! `ρ` on the pseudo-diagonal of the cross block; each modality is then
//! pushed through a fixed map and perturbed with isotropic noise.
//!
//! # File layout
//!
//! ```text
//! magic       8 bytes  "COVAEDS\0"
//! version     u32 LE   1
//! header_len  u64 LE
//! header      JSON {spec, x1_shape, x2_shape, z_shape}
//! payload     f64 LE: x1, x2, z_true, each row-major
//! ```

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky, Matrix};
use crate::par::{derive_seed, map_indexed, rng_stream, Exec};

pub const DATASET_MAGIC: &[u8; 8] = b"COVAEDS\0";
pub const DATASET_VERSION: u32 = 1;

const CHUNK: usize = 512;
const MLP_HIDDEN: usize = 32;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("rho must lie in [0, 1), got {0}")]
    InvalidRho(f64),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a dataset file")]
    BadMagic,
    #[error("dataset format version {found} is not supported (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("dataset file is truncated or has trailing bytes")]
    Truncated,
    #[error("bad dataset header: {0}")]
    Header(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    /// `x_k = z_k`; requires observation dim equal to latent dim.
    Identity,
    /// `x_k = z_k W_k` with `W_k` having orthonormal rows (or scaled Gaussian when `n_k < D_k`).
    Linear,
    /// One tanh hidden layer followed by a linear read-out.
    RandomMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub d1: usize,
    pub d2: usize,
    pub rho: f64,
    pub n: usize,
    pub map: MapKind,
    pub obs_dim1: usize,
    pub obs_dim2: usize,
    pub sigma_x: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(SynthError::InvalidRho(self.rho));
        }
        if self.n == 0 || self.d1 == 0 || self.d2 == 0 || self.obs_dim1 == 0 || self.obs_dim2 == 0 {
            return Err(SynthError::InvalidSpec("sizes must be positive".into()));
        }
        if !(self.sigma_x >= 0.0 && self.sigma_x.is_finite()) {
            return Err(SynthError::InvalidSpec(format!("sigma_x = {}", self.sigma_x)));
        }
        if self.map == MapKind::Identity && (self.obs_dim1 != self.d1 || self.obs_dim2 != self.d2) {
            return Err(SynthError::InvalidSpec("identity maps need obs_dim == latent dim".into()));
        }
        Ok(())
    }

    /// The fixed generative maps, derived from the seed.
    pub fn maps(&self) -> [GenerativeMap; 2] {
        [
            GenerativeMap::build(self.map, self.d1, self.obs_dim1, derive_seed(self.seed, 1)),
            GenerativeMap::build(self.map, self.d2, self.obs_dim2, derive_seed(self.seed, 2)),
        ]
    }
}

/// Fixed map from one latent block to observation space.
#[derive(Debug, Clone, PartialEq)]
pub enum GenerativeMap {
    Identity,
    Linear(Matrix),
    Mlp { w1: Matrix, b1: Vec<f64>, w2: Matrix },
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

impl GenerativeMap {
    fn build(kind: MapKind, latent: usize, obs: usize, seed: u64) -> Self {
        let mut rng = rng_stream(seed, 0);
        match kind {
            MapKind::Identity => Self::Identity,
            MapKind::Linear => {
                let mut w = gaussian_matrix(latent, obs, 1.0, &mut rng);
                if obs >= latent {
                    for r in 0..latent {
                        for p in 0..r {
                            let proj = crate::linalg::dot(w.row(r), w.row(p));
                            let prev = w.row(p).to_vec();
                            for (v, q) in w.row_mut(r).iter_mut().zip(prev) {
                                *v -= proj * q;
                            }
                        }
                        let norm = crate::linalg::dot(w.row(r), w.row(r)).sqrt();
                        w.row_mut(r).iter_mut().for_each(|v| *v /= norm);
                    }
                } else {
                    w = w.scale(1.0 / (obs as f64).sqrt());
                }
                Self::Linear(w)
            }
            MapKind::RandomMlp => Self::Mlp {
                w1: gaussian_matrix(latent, MLP_HIDDEN, 1.5 / (latent as f64).sqrt(), &mut rng),
                b1: (0..MLP_HIDDEN).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect(),
                w2: gaussian_matrix(MLP_HIDDEN, obs, 1.0 / (MLP_HIDDEN as f64).sqrt(), &mut rng),
            },
        }
    }

    pub fn apply(&self, z: &Matrix) -> Matrix {
        match self {
            Self::Identity => z.clone(),
            Self::Linear(w) => z.matmul(w).expect("map shape"),
            Self::Mlp { w1, b1, w2 } => {
                let mut h = z.matmul(w1).expect("map shape");
                for r in 0..h.rows() {
                    for (v, b) in h.row_mut(r).iter_mut().zip(b1) {
                        *v = (*v + b).tanh();
                    }
                }
                h.matmul(w2).expect("map shape")
            }
        }
    }

    /// Linear weight `latent x obs`, if the map is linear.
    pub fn linear_weight(&self, latent: usize) -> Option<Matrix> {
        match self {
            Self::Identity => Some(Matrix::identity(latent)),
            Self::Linear(w) => Some(w.clone()),
            Self::Mlp { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub x1: Matrix,
    pub x2: Matrix,
    pub z_true: Matrix,
    pub spec: SyntheticSpec,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.x1.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Observations of modality `k` (0 or 1).
    pub fn modality(&self, k: usize) -> &Matrix {
        match k {
            0 => &self.x1,
            1 => &self.x2,
            _ => panic!("modality {k} out of range"),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> PairedDataset {
        PairedDataset {
            x1: self.x1.select_rows(rows),
            x2: self.x2.select_rows(rows),
            z_true: self.z_true.select_rows(rows),
            spec: self.spec.clone(),
        }
    }

    /// First `n_train` rows and the rest.
    pub fn split(&self, n_train: usize) -> (PairedDataset, PairedDataset) {
        let n_train = n_train.min(self.len());
        let a: Vec<usize> = (0..n_train).collect();
        let b: Vec<usize> = (n_train..self.len()).collect();
        (self.select_rows(&a), self.select_rows(&b))
    }
}

/// Latent covariance with identity blocks and `ρ` on the cross pseudo-diagonal.
pub fn build_sigma(d1: usize, d2: usize, rho: f64) -> Result<Matrix> {
    if !(0.0..1.0).contains(&rho) {
        return Err(SynthError::InvalidRho(rho));
    }
    let mut s = Matrix::identity(d1 + d2);
    for i in 0..d1.min(d2) {
        s[(i, d1 + i)] = rho;
        s[(d1 + i, i)] = rho;
    }
    Ok(s)
}

pub fn generate(spec: &SyntheticSpec) -> Result<PairedDataset> {
    generate_with(spec, Exec::default())
}

/// Generation in fixed-size chunks, each with its own RNG stream, so the
/// result does not depend on `exec`.
pub fn generate_with(spec: &SyntheticSpec, exec: Exec) -> Result<PairedDataset> {
    spec.validate()?;
    let d = spec.d1 + spec.d2;
    let chol = cholesky(&build_sigma(spec.d1, spec.d2, spec.rho)?).expect("positive definite for rho < 1");
    let maps = spec.maps();
    let chunks = spec.n.div_ceil(CHUNK);
    let noise_seed = derive_seed(spec.seed, 3);
    let parts = map_indexed(exec, chunks, |c| {
        let rows = CHUNK.min(spec.n - c * CHUNK);
        let mut rng = rng_stream(noise_seed, c as u64);
        let eps = gaussian_matrix(rows, d, 1.0, &mut rng);
        let z = eps.matmul_t(chol.lower()).expect("shape");
        let xs: Vec<Matrix> = (0..2)
            .map(|k| {
                let zk = if k == 0 {
                    z.slice_cols(0, spec.d1)
                } else {
                    z.slice_cols(spec.d1, d)
                };
                let clean = maps[k].apply(&zk);
                let noise = gaussian_matrix(rows, clean.cols(), spec.sigma_x, &mut rng);
                clean.add(&noise).expect("shape")
            })
            .collect();
        (xs, z)
    });
    let stack = |get: &dyn Fn(&(Vec<Matrix>, Matrix)) -> &Matrix, cols: usize| {
        let data: Vec<f64> = parts.iter().flat_map(|p| get(p).as_slice().iter().copied()).collect();
        Matrix::from_vec(spec.n, cols, data).expect("row counts add up")
    };
    Ok(PairedDataset {
        x1: stack(&|p| &p.0[0], spec.obs_dim1),
        x2: stack(&|p| &p.0[1], spec.obs_dim2),
        z_true: stack(&|p| &p.1, d),
        spec: spec.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: SyntheticSpec,
    x1_shape: (usize, usize),
    x2_shape: (usize, usize),
    z_shape: (usize, usize),
}

pub fn to_bytes(ds: &PairedDataset) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        spec: ds.spec.clone(),
        x1_shape: ds.x1.shape(),
        x2_shape: ds.x2.shape(),
        z_shape: ds.z_true.shape(),
    })
    .expect("header serialises");
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for m in [&ds.x1, &ds.x2, &ds.z_true] {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<PairedDataset> {
    let take = |at: usize, len: usize| bytes.get(at..at + len).ok_or(SynthError::Truncated);
    if take(0, 8)? != DATASET_MAGIC {
        return Err(SynthError::BadMagic);
    }
    let version = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(SynthError::FormatVersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(take(12, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(20, header_len)?)?;
    let mut at = 20 + header_len;
    let mut read = |(r, c): (usize, usize)| -> Result<Matrix> {
        let raw = take(at, r * c * 8)?;
        at += r * c * 8;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(r, c, data).map_err(|_| SynthError::Truncated)
    };
    let x1 = read(header.x1_shape)?;
    let x2 = read(header.x2_shape)?;
    let z_true = read(header.z_shape)?;
    if at != bytes.len() {
        return Err(SynthError::Truncated);
    }
    Ok(PairedDataset {
        x1,
        x2,
        z_true,
        spec: header.spec,
    })
}

pub fn save(ds: &PairedDataset, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(ds))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PairedDataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigvals;

    fn spec(rho: f64, map: MapKind, n: usize) -> SyntheticSpec {
        SyntheticSpec {
            d1: 3,
            d2: 3,
            rho,
            n,
            map,
            obs_dim1: if map == MapKind::Identity { 3 } else { 6 },
            obs_dim2: if map == MapKind::Identity { 3 } else { 5 },
            sigma_x: 0.0,
            seed: 17,
        }
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let sab: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let saa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let sbb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn build_sigma_examples() {
        assert_eq!(build_sigma(3, 2, 0.0).unwrap(), Matrix::identity(5));
        assert_eq!(
            build_sigma(1, 1, 0.5).unwrap(),
            Matrix::from_rows(&[[1.0, 0.5], [0.5, 1.0]])
        );
        let ev = sym_eigvals(&build_sigma(10, 10, 0.9).unwrap()).unwrap();
        for (i, l) in ev.iter().enumerate() {
            let expected = if i < 10 { 1.9 } else { 0.1 };
            assert!((l - expected).abs() < 1e-10);
        }
        assert!(matches!(build_sigma(2, 2, 1.0), Err(SynthError::InvalidRho(_))));
        assert!(matches!(build_sigma(2, 2, -0.1), Err(SynthError::InvalidRho(_))));
    }

    #[test]
    fn build_sigma_unequal_dims() {
        let s = build_sigma(2, 3, 0.4).unwrap();
        assert_eq!(s[(0, 2)], 0.4);
        assert_eq!(s[(1, 3)], 0.4);
        assert_eq!(s[(1, 4)], 0.0);
        assert!(cholesky(&s).is_ok());
    }

    #[test]
    fn identity_maps_reproduce_rho() {
        let ds = generate(&spec(0.6, MapKind::Identity, 5000)).unwrap();
        for i in 0..3 {
            let r = corr(&ds.x1.col(i), &ds.x2.col(i));
            assert!((r - 0.6).abs() < 0.05, "{r}");
        }
    }

    #[test]
    fn latent_marginals_and_cross_correlation() {
        let n = 10_000;
        let rho = 0.5;
        let ds = generate(&spec(rho, MapKind::Linear, n)).unwrap();
        let z = &ds.z_true;
        for i in 0..6 {
            let c = z.col(i);
            let var = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
            // Var of a sample variance of N(0,1) is 2/n
            assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "{var}");
        }
        for i in 0..3 {
            for j in 0..3 {
                let r = corr(&z.col(i), &z.col(3 + j));
                let target = if i == j { rho } else { 0.0 };
                let se = (1.0 - target * target) / (n as f64).sqrt();
                assert!((r - target).abs() < 3.0 * se, "({i},{j}) {r}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_exec_independent() {
        let s = spec(0.3, MapKind::RandomMlp, 1300);
        let a = generate_with(&s, Exec::Sequential).unwrap();
        let b = generate_with(&s, Exec::Parallel).unwrap();
        assert_eq!(to_bytes(&a), to_bytes(&b));
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(generate(&other).unwrap().x1, a.x1);
    }

    #[test]
    fn linear_map_rows_are_orthonormal() {
        let [m1, _] = spec(0.3, MapKind::Linear, 1).maps();
        let w = m1.linear_weight(3).unwrap();
        assert!(w.matmul_t(&w).unwrap().max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn round_trip_and_corruption() {
        let mut s = spec(0.2, MapKind::Linear, 40);
        s.sigma_x = 0.1;
        let ds = generate(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save(&ds, &path).unwrap();
        assert_eq!(load(&path).unwrap(), ds);

        let bytes = to_bytes(&ds);
        for cut in [0, 5, 15, 30, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(
            from_bytes(&bad),
            Err(SynthError::FormatVersionMismatch { found: 2, expected: 1 })
        ));
        assert!(matches!(load(&dir.path().join("missing")), Err(SynthError::Io(_))));
    }

    #[test]
    fn spec_validation() {
        let mut s = spec(0.2, MapKind::Identity, 10);
        s.obs_dim1 = 4;
        assert!(generate(&s).is_err());
        let mut s = spec(0.2, MapKind::Linear, 0);
        assert!(generate(&s).is_err());
        s.n = 3;
        s.rho = 1.0;
        assert!(matches!(generate(&s), Err(SynthError::InvalidRho(_))));
    }
}
