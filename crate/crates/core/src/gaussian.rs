//! Multivariate Gaussian algebra over block-structured latent spaces.
//!
//! A latent vector is the concatenation of one block per modality, described
//! by a [`LatentLayout`]. [`BlockGaussian`] carries a mean and a Cholesky
//! factor of the full covariance; [`DiagonalGaussian`] is the per-modality
//! encoder output.
//!
//! Value-level routines work on plain vectors. The `*_batch` routines record
//! the same formulas on an autodiff [`Tape`] with one datum per row.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{tril_index, tril_len, AutodiffError, NodeId, Tape};
use crate::linalg::{cholesky, solve_triangular, sym_eigvals, CholeskyFactor, LinalgError, Matrix};

/// Diagonal jitter tried once when a derived covariance fails to factor.
pub const JITTER: f64 = 1e-6;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaussianError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("observed block covariance is not positive definite")]
    SingularObservedBlock,
    #[error("conditioning query has no observed modality")]
    EmptyObservedSet,
    #[error("invalid conditioning query: {0}")]
    InvalidQuery(String),
    #[error("expert list is empty")]
    EmptyExpertList,
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("invalid latent layout: {0}")]
    InvalidLayout(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, GaussianError>;

/// Per-modality latent block sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLayout {
    dims: Vec<usize>,
}

impl LatentLayout {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(GaussianError::InvalidLayout("no modalities".into()));
        }
        if dims.contains(&0) {
            return Err(GaussianError::InvalidLayout(format!("zero-sized block in {dims:?}")));
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of modalities.
    pub fn modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn dim(&self, k: usize) -> usize {
        self.dims[k]
    }

    /// Total latent dimension.
    pub fn total(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn offset(&self, k: usize) -> usize {
        self.dims[..k].iter().sum()
    }

    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        let o = self.offset(k);
        o..o + self.dims[k]
    }

    /// Flat latent indices covered by the given modalities, in the given order.
    pub fn indices(&self, modalities: &[usize]) -> Vec<usize> {
        modalities.iter().flat_map(|&k| self.range(k)).collect()
    }

    /// Layout restricted to a subset of modalities.
    pub fn restrict(&self, modalities: &[usize]) -> Result<Self> {
        Self::new(modalities.iter().map(|&k| self.dims[k]).collect())
    }
}

/// Gaussian over a block layout, stored as mean plus Cholesky factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGaussian {
    layout: LatentLayout,
    mean: Vec<f64>,
    chol: CholeskyFactor,
}

impl BlockGaussian {
    pub fn new(layout: LatentLayout, mean: Vec<f64>, chol: CholeskyFactor) -> Result<Self> {
        let d = layout.total();
        for got in [mean.len(), chol.dim()] {
            if got != d {
                return Err(GaussianError::DimensionMismatch { expected: d, got });
            }
        }
        Ok(Self { layout, mean, chol })
    }

    /// Factors `cov` without jitter.
    pub fn from_covariance(layout: LatentLayout, mean: Vec<f64>, cov: &Matrix) -> Result<Self> {
        let chol = cholesky(cov)?;
        Self::new(layout, mean, chol)
    }

    pub fn zero_mean(layout: LatentLayout, cov: &Matrix) -> Result<Self> {
        let d = layout.total();
        Self::from_covariance(layout, vec![0.0; d], cov)
    }

    pub fn standard(layout: LatentLayout) -> Self {
        let d = layout.total();
        Self {
            layout,
            mean: vec![0.0; d],
            chol: CholeskyFactor::identity(d),
        }
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn chol(&self) -> &CholeskyFactor {
        &self.chol
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> Matrix {
        self.chol.reconstruct()
    }

    /// Marginal over the given modalities (in the given order).
    pub fn marginal(&self, modalities: &[usize]) -> Result<BlockGaussian> {
        let idx = self.layout.indices(modalities);
        let cov = self.covariance().select(&idx, &idx);
        let mean = idx.iter().map(|&i| self.mean[i]).collect();
        Self::from_covariance(self.layout.restrict(modalities)?, mean, &cov)
    }
}

/// Independent-coordinate Gaussian parameterised by log-variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(GaussianError::DimensionMismatch {
                expected: mean.len(),
                got: log_var.len(),
            });
        }
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    pub fn var(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| lv.exp()).collect()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(self.std())
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(GaussianError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_var)
            .zip(x)
            .map(|((m, lv), xi)| -0.5 * ((xi - m).powi(2) * (-lv).exp() + lv + LN_2PI))
            .sum())
    }

    /// Same distribution as a full-covariance Gaussian.
    pub fn to_block(&self, layout: LatentLayout) -> Result<BlockGaussian> {
        let chol = CholeskyFactor::from_lower(Matrix::from_diag(&self.std()))?;
        BlockGaussian::new(layout, self.mean.clone(), chol)
    }
}

/// Which modalities are observed, and their latent values.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningQuery {
    observed: Vec<usize>,
    missing: Vec<usize>,
    observed_values: Vec<f64>,
}

impl ConditioningQuery {
    /// `observed_values` concatenates the observed blocks in `observed` order.
    pub fn new(layout: &LatentLayout, observed: Vec<usize>, observed_values: Vec<f64>) -> Result<Self> {
        if observed.is_empty() {
            return Err(GaussianError::EmptyObservedSet);
        }
        let k = layout.modalities();
        let mut seen = vec![false; k];
        for &o in &observed {
            if o >= k {
                return Err(GaussianError::InvalidQuery(format!("modality {o} out of range")));
            }
            if std::mem::replace(&mut seen[o], true) {
                return Err(GaussianError::InvalidQuery(format!("modality {o} listed twice")));
            }
        }
        let expected: usize = observed.iter().map(|&o| layout.dim(o)).sum();
        if observed_values.len() != expected {
            return Err(GaussianError::DimensionMismatch {
                expected,
                got: observed_values.len(),
            });
        }
        let missing = (0..k).filter(|&i| !seen[i]).collect();
        Ok(Self {
            observed,
            missing,
            observed_values,
        })
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn missing(&self) -> &[usize] {
        &self.missing
    }

    pub fn observed_values(&self) -> &[f64] {
        &self.observed_values
    }
}

fn cholesky_with_jitter(a: &Matrix) -> std::result::Result<CholeskyFactor, LinalgError> {
    cholesky(a).or_else(|_| cholesky(&a.add_diag(JITTER)))
}

/// Affine map `z_M = mean_M + gain·(z_O − mean_O) + chol·ε` for a fixed observed set.
///
/// Precomputing it lets callers draw many conditional samples without
/// refactoring the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMap {
    pub observed: Vec<usize>,
    pub missing: Vec<usize>,
    pub observed_mean: Vec<f64>,
    pub missing_mean: Vec<f64>,
    /// `Σ_MO Σ_OO⁻¹`, shape `|M| x |O|`.
    pub gain: Matrix,
    /// Factor of `Σ_MM − Σ_MO Σ_OO⁻¹ Σ_OM`. `None` when nothing is missing.
    pub chol: Option<CholeskyFactor>,
}

impl ConditionalMap {
    pub fn new(prior: &BlockGaussian, observed: &[usize]) -> Result<Self> {
        Self::from_covariance(prior.layout(), prior.mean(), &prior.covariance(), observed)
    }

    /// Builds the map from an explicit (possibly indefinite) covariance.
    pub fn from_covariance(layout: &LatentLayout, mean: &[f64], cov: &Matrix, observed: &[usize]) -> Result<Self> {
        if observed.is_empty() {
            return Err(GaussianError::EmptyObservedSet);
        }
        let d = layout.total();
        for got in [mean.len(), cov.rows(), cov.cols()] {
            if got != d {
                return Err(GaussianError::DimensionMismatch { expected: d, got });
            }
        }
        let query_dims: Vec<f64> = vec![0.0; observed.iter().map(|&o| layout.dim(o)).sum()];
        let q = ConditioningQuery::new(layout, observed.to_vec(), query_dims)?;
        let o_idx = layout.indices(q.observed());
        let m_idx = layout.indices(q.missing());
        let s_oo = cov.select(&o_idx, &o_idx);
        let s_mo = cov.select(&m_idx, &o_idx);
        let s_mm = cov.select(&m_idx, &m_idx);
        let l_oo = cholesky_with_jitter(&s_oo).map_err(|_| GaussianError::SingularObservedBlock)?;
        // gain = Σ_MO Σ_OO⁻¹ = (Σ_OO⁻¹ Σ_OM)ᵀ
        let gain = l_oo.solve(&s_mo.transpose())?.transpose();
        let chol = if m_idx.is_empty() {
            None
        } else {
            let mut c = s_mm.sub(&gain.matmul(&s_mo.transpose())?)?;
            c.symmetrize();
            Some(cholesky_with_jitter(&c)?)
        };
        Ok(Self {
            observed_mean: o_idx.iter().map(|&i| mean[i]).collect(),
            missing_mean: m_idx.iter().map(|&i| mean[i]).collect(),
            observed: q.observed,
            missing: q.missing,
            gain,
            chol,
        })
    }

    pub fn conditional_mean(&self, z_obs: &[f64]) -> Vec<f64> {
        let centred: Vec<f64> = z_obs.iter().zip(&self.observed_mean).map(|(z, m)| z - m).collect();
        (0..self.gain.rows())
            .map(|r| self.missing_mean[r] + crate::linalg::dot(self.gain.row(r), &centred))
            .collect()
    }

    /// One draw of the missing blocks given observed values and standard-normal noise.
    pub fn sample_with(&self, z_obs: &[f64], eps: &[f64]) -> Vec<f64> {
        let mut out = self.conditional_mean(z_obs);
        if let Some(l) = &self.chol {
            let lm = l.lower();
            for (r, o) in out.iter_mut().enumerate() {
                *o += crate::linalg::dot(&lm.row(r)[..=r], &eps[..=r]);
            }
        }
        out
    }

    pub fn sample(&self, z_obs: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.missing_mean.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.sample_with(z_obs, &eps)
    }
}

/// Distribution of the missing blocks given observed ones, under `prior`.
pub fn condition(prior: &BlockGaussian, q: &ConditioningQuery) -> Result<BlockGaussian> {
    if prior.layout().modalities() != q.observed.len() + q.missing.len() {
        return Err(GaussianError::InvalidQuery("query does not match prior layout".into()));
    }
    if q.missing.is_empty() {
        return Err(GaussianError::InvalidQuery("nothing left to condition".into()));
    }
    let map = ConditionalMap::new(prior, &q.observed)?;
    let mean = map.conditional_mean(&q.observed_values);
    let layout = prior.layout().restrict(&q.missing)?;
    BlockGaussian::new(layout, mean, map.chol.expect("missing set is non-empty"))
}

fn kl_with_factor(mean_q: &[f64], l_q: &Matrix, logdet_q: f64, p: &BlockGaussian) -> Result<f64> {
    let d = p.dim();
    if mean_q.len() != d {
        return Err(GaussianError::DimensionMismatch {
            expected: d,
            got: mean_q.len(),
        });
    }
    // tr(Σp⁻¹ Σq) = ‖Lp⁻¹ Lq‖²_F
    let w = solve_triangular(p.chol(), l_q, false)?;
    let trace = w.as_slice().iter().map(|v| v * v).sum::<f64>();
    let diff: Vec<f64> = mean_q.iter().zip(p.mean()).map(|(a, b)| a - b).collect();
    let u = solve_triangular(p.chol(), &Matrix::col_vector(&diff), false)?;
    let maha = u.as_slice().iter().map(|v| v * v).sum::<f64>();
    Ok(0.5 * (trace + maha - d as f64 + p.chol().logdet() - logdet_q))
}

/// `KL(q ‖ p)` between full-covariance Gaussians.
pub fn kl_full(q: &BlockGaussian, p: &BlockGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(GaussianError::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    kl_with_factor(q.mean(), q.chol().lower(), q.chol().logdet(), p)
}

/// `KL(q ‖ p)` for a diagonal `q` against one block marginal `p`.
pub fn kl_diag(q: &DiagonalGaussian, p_block: &BlockGaussian) -> Result<f64> {
    if q.dim() != p_block.dim() {
        return Err(GaussianError::DimensionMismatch {
            expected: p_block.dim(),
            got: q.dim(),
        });
    }
    let l_q = Matrix::from_diag(&q.std());
    kl_with_factor(&q.mean, &l_q, q.log_var.iter().sum(), p_block)
}

/// Reparameterised draw `μ + L·ε`.
pub fn sample_full(g: &BlockGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != g.dim() {
        return Err(GaussianError::DimensionMismatch {
            expected: g.dim(),
            got: eps.len(),
        });
    }
    let l = g.chol().lower();
    Ok((0..g.dim())
        .map(|r| g.mean()[r] + crate::linalg::dot(&l.row(r)[..=r], &eps[..=r]))
        .collect())
}

pub fn logpdf(g: &BlockGaussian, x: &[f64]) -> Result<f64> {
    if x.len() != g.dim() {
        return Err(GaussianError::DimensionMismatch {
            expected: g.dim(),
            got: x.len(),
        });
    }
    let diff: Vec<f64> = x.iter().zip(g.mean()).map(|(a, b)| a - b).collect();
    let u = solve_triangular(g.chol(), &Matrix::col_vector(&diff), false)?;
    let maha: f64 = u.as_slice().iter().map(|v| v * v).sum();
    Ok(-0.5 * (maha + g.chol().logdet() + g.dim() as f64 * LN_2PI))
}

/// Product of diagonal experts, optionally times a standard-normal prior expert.
pub fn fuse_poe(experts: &[DiagonalGaussian], include_prior: bool) -> Result<DiagonalGaussian> {
    let first = experts.first().ok_or(GaussianError::EmptyExpertList)?;
    let d = first.dim();
    let mut precision = vec![if include_prior { 1.0 } else { 0.0 }; d];
    let mut weighted = vec![0.0; d];
    for e in experts {
        if e.dim() != d {
            return Err(GaussianError::DimensionMismatch { expected: d, got: e.dim() });
        }
        for j in 0..d {
            let p = (-e.log_var[j]).exp();
            precision[j] += p;
            weighted[j] += p * e.mean[j];
        }
    }
    let mean = weighted.iter().zip(&precision).map(|(w, p)| w / p).collect();
    let log_var = precision.iter().map(|p| -p.ln()).collect();
    Ok(DiagonalGaussian { mean, log_var })
}

/// Log density of the equal-weight mixture of `experts` at `z`.
pub fn moe_logpdf(experts: &[DiagonalGaussian], z: &[f64]) -> Result<f64> {
    if experts.is_empty() {
        return Err(GaussianError::EmptyExpertList);
    }
    let logs = experts.iter().map(|e| e.logpdf(z)).collect::<Result<Vec<_>>>()?;
    Ok(log_mean_exp(&logs))
}

/// Draw from a uniformly chosen expert; returns the draw and its mixture log density.
pub fn fuse_moe(experts: &[DiagonalGaussian], rng: &mut impl Rng) -> Result<(Vec<f64>, f64)> {
    if experts.is_empty() {
        return Err(GaussianError::EmptyExpertList);
    }
    let pick = rng.random_range(0..experts.len());
    let z = experts[pick].sample(rng);
    let lp = moe_logpdf(experts, &z)?;
    Ok((z, lp))
}

/// `rows x cols` matrix of independent standard-normal draws, row-major order.
pub fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `ln((1/n) Σ exp(xᵢ))` without overflow.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + (s / xs.len() as f64).ln()
}

/// Effective dimensionality `(Σλ)² / Σλ²` of a covariance spectrum.
pub fn participation_ratio(sigma: &Matrix) -> Result<f64> {
    let tol = 1e-10 * sigma.frobenius_norm().max(1.0);
    sigma.require_symmetric(tol).map_err(|e| match e {
        LinalgError::NotSymmetric { .. } => GaussianError::NotSymmetric,
        other => other.into(),
    })?;
    let ev = sym_eigvals(sigma)?;
    let s: f64 = ev.iter().sum();
    let s2: f64 = ev.iter().map(|l| l * l).sum();
    Ok(s * s / s2)
}

/// Constant pieces of `KL(q ‖ N(0, Σp))` for a fixed prior, as used on the tape.
#[derive(Debug, Clone)]
pub struct FullPriorTerms {
    pub dim: usize,
    pub precision: Arc<Matrix>,
    /// Precision lifted to packed lower-triangle coordinates, so that
    /// `tr(Σp⁻¹ L Lᵀ) = vec(L)ᵀ · packed_precision · vec(L)`.
    pub packed_precision: Arc<Matrix>,
    pub logdet: f64,
    diag_positions: Vec<usize>,
}

impl FullPriorTerms {
    pub fn new(prior: &BlockGaussian) -> Self {
        let d = prior.dim();
        let precision = prior.chol().inverse();
        let t = tril_len(d);
        let mut packed = Matrix::zeros(t, t);
        for i in 0..d {
            for j in 0..d {
                for c in 0..=i.min(j) {
                    packed[(tril_index(i, c), tril_index(j, c))] = precision[(i, j)];
                }
            }
        }
        Self {
            dim: d,
            precision: Arc::new(precision),
            packed_precision: Arc::new(packed),
            logdet: prior.chol().logdet(),
            diag_positions: diag_positions(d),
        }
    }
}

/// Packed indices of the diagonal of a `dim x dim` lower triangle.
pub fn diag_positions(dim: usize) -> Vec<usize> {
    (0..dim).map(|i| tril_index(i, i)).collect()
}

/// Row-wise `μᵢ + Lᵢ·εᵢ` on the tape. `packed` holds each `Lᵢ` row-major.
pub fn sample_full_batch(tape: &mut Tape, mean: NodeId, packed: NodeId, eps: Arc<Matrix>) -> Result<NodeId> {
    let noise = tape.tril_matvec(packed, eps)?;
    Ok(tape.add(mean, noise)?)
}

/// Row-wise `KL(N(μᵢ, LᵢLᵢᵀ) ‖ N(0, Σp))`, `n x 1`. Diagonals of `Lᵢ` must be positive.
pub fn kl_full_batch(tape: &mut Tape, mean: NodeId, packed: NodeId, prior: &FullPriorTerms) -> Result<NodeId> {
    let tr = tape.quad_form(packed, prior.packed_precision.clone())?;
    let maha = tape.quad_form(mean, prior.precision.clone())?;
    let diag = tape.select_cols(packed, prior.diag_positions.clone())?;
    let log_diag = tape.log(diag)?;
    let logdet_q = tape.sum_cols(log_diag);
    let logdet_q = tape.scale(logdet_q, 2.0);
    let s = tape.add(tr, maha)?;
    let s = tape.sub(s, logdet_q)?;
    let s = tape.add_scalar(s, prior.logdet - prior.dim as f64);
    Ok(tape.scale(s, 0.5))
}

/// Row-wise `KL(N(μᵢ, diag e^{lvᵢ}) ‖ N(0, S))` for a constant block covariance `S`, `n x 1`.
pub fn kl_diag_batch(tape: &mut Tape, mean: NodeId, log_var: NodeId, block_cov: &Matrix) -> Result<NodeId> {
    let chol = cholesky(block_cov)?;
    let prec = chol.inverse();
    let d = prec.rows();
    let prec_diag = tape.constant(Matrix::col_vector(&prec.diag()));
    let var = tape.exp(log_var);
    let tr = tape.matmul(var, prec_diag)?;
    let maha = tape.quad_form(mean, Arc::new(prec))?;
    let sum_lv = tape.sum_cols(log_var);
    let s = tape.add(tr, maha)?;
    let s = tape.sub(s, sum_lv)?;
    let s = tape.add_scalar(s, chol.logdet() - d as f64);
    Ok(tape.scale(s, 0.5))
}

/// Row-wise diagonal-Gaussian log density of `z`, `n x 1`.
pub fn diag_logpdf_batch(tape: &mut Tape, z: NodeId, mean: NodeId, log_var: NodeId) -> Result<NodeId> {
    let d = tape.value(z).cols() as f64;
    let diff = tape.sub(z, mean)?;
    let sq = tape.square(diff);
    let neg_lv = tape.neg(log_var);
    let prec = tape.exp(neg_lv);
    let m = tape.mul(sq, prec)?;
    let s = tape.add(m, log_var)?;
    let s = tape.sum_cols(s);
    let s = tape.add_scalar(s, d * LN_2PI);
    Ok(tape.scale(s, -0.5))
}

/// Row-wise standard-normal log density, `n x 1`.
pub fn std_normal_logpdf_batch(tape: &mut Tape, z: NodeId) -> NodeId {
    let d = tape.value(z).cols() as f64;
    let sq = tape.square(z);
    let s = tape.sum_cols(sq);
    let s = tape.add_scalar(s, d * LN_2PI);
    tape.scale(s, -0.5)
}

/// Product of diagonal experts on the tape: returns `(mean, log_var)` nodes.
pub fn fuse_poe_batch(
    tape: &mut Tape,
    experts: &[(NodeId, NodeId)],
    include_prior: bool,
) -> Result<(NodeId, NodeId)> {
    let &(m0, _) = experts.first().ok_or(GaussianError::EmptyExpertList)?;
    let (n, d) = tape.value(m0).shape();
    let mut precision = None;
    let mut weighted = None;
    for &(m, lv) in experts {
        let neg = tape.neg(lv);
        let p = tape.exp(neg);
        let pm = tape.mul(p, m)?;
        precision = Some(match precision {
            None => p,
            Some(acc) => tape.add(acc, p)?,
        });
        weighted = Some(match weighted {
            None => pm,
            Some(acc) => tape.add(acc, pm)?,
        });
    }
    let mut precision = precision.expect("non-empty");
    if include_prior {
        let ones = tape.constant(Matrix::filled(n, d, 1.0));
        precision = tape.add(precision, ones)?;
    }
    let mean = tape.div(weighted.expect("non-empty"), precision)?;
    let log_p = tape.log(precision)?;
    let log_var = tape.neg(log_p);
    Ok((mean, log_var))
}
