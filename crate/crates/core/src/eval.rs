//! Metrics over trained models: IWAE likelihood bounds, decoder-input
//! correlation, conditional predictive spread, calibration against the
//! analytic conditional of linear data, and prior effective dimensionality.
//!
//! Every Monte-Carlo loop is split into fixed chunks with one RNG stream per
//! chunk, so results do not depend on the execution mode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covae::{BaselineKind, CovaeError, CovaeModel, TrainedModel};
use crate::gaussian::{
    fuse_poe, kl_diag, kl_full, log_mean_exp, participation_ratio, standard_normal_matrix, BlockGaussian,
    ConditionalMap, GaussianError, LatentLayout,
};
use crate::linalg::{cholesky, LinalgError, Matrix};
use crate::nets::NetsError;
use crate::par::{derive_seed, map_indexed, rng_stream, Exec};
use crate::stats::{cca, mean, pearson, std_error};
use crate::synthdata::{build_sigma, PairedDataset, SyntheticSpec};

/// Rows per RNG stream in the IWAE and ELBO loops.
const ROW_CHUNK: usize = 16;
/// Minimum number of latent pairs behind a correlation estimate.
pub const MIN_CORRELATION_SAMPLES: usize = 1000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("non-finite importance weight at row {0}")]
    NonFiniteWeight(usize),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("calibration needs a linear generative map")]
    NonLinearSpec,
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] CovaeError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IwaeConfig {
    /// Importance samples per data point.
    pub k: usize,
    /// Evaluate at most this many rows.
    pub max_rows: usize,
    pub seed: u64,
}

impl Default for IwaeConfig {
    fn default() -> Self {
        Self {
            k: 64,
            max_rows: 1000,
            seed: 0,
        }
    }
}

impl IwaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(EvalError::InvalidConfig("K must be at least 1".into()));
        }
        if self.max_rows == 0 {
            return Err(EvalError::InvalidConfig("max_rows must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IwaeMode {
    Joint,
    /// Observe modality `k`, score the others.
    Conditional(usize),
}

/// Per-sample log terms, `rows x K` each.
///
/// In conditional mode the proposal for the missing latents is the prior
/// conditional itself, so the prior and posterior terms cancel and are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct IwaeTerms {
    pub recon: Matrix,
    pub log_prior: Matrix,
    pub log_post: Matrix,
}

impl IwaeTerms {
    pub fn log_weights(&self) -> Matrix {
        Matrix::from_fn(self.recon.rows(), self.recon.cols(), |r, c| {
            self.recon[(r, c)] + self.log_prior[(r, c)] - self.log_post[(r, c)]
        })
    }

    /// Per-row bound `−log (1/K) Σ_k w_k`.
    pub fn bound_rows(&self) -> Vec<f64> {
        let w = self.log_weights();
        (0..w.rows()).map(|r| -log_mean_exp(w.row(r))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IwaeResult {
    pub nll: f64,
    pub stderr: f64,
    pub per_row: Vec<f64>,
    pub terms: IwaeTerms,
}

fn collect<T>(parts: Vec<Result<T>>) -> Result<Vec<T>> {
    parts.into_iter().collect()
}

fn chunk_rows(c: usize, n: usize, chunk: usize) -> std::ops::Range<usize> {
    c * chunk..((c + 1) * chunk).min(n)
}

fn stack_rows(parts: &[Matrix], cols: usize) -> Matrix {
    let data: Vec<f64> = parts.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    let rows = data.len() / cols.max(1);
    Matrix::from_vec(rows, cols, data).expect("chunks share a width")
}

fn check_modalities(model: &TrainedModel, xs: &[Matrix]) -> Result<usize> {
    if xs.len() < model.modalities() {
        return Err(CovaeError::MissingModality(xs.len()).into());
    }
    let n = xs[0].rows();
    if n == 0 {
        return Err(EvalError::InsufficientSamples("empty dataset".into()));
    }
    Ok(n)
}

/// Importance-weighted estimate of `−log p(x)` (joint) or `−log p(x_M | x_k)`
/// (conditional), averaged over rows.
pub fn iwae_nll(model: &TrainedModel, xs: &[Matrix], cfg: &IwaeConfig, mode: IwaeMode, exec: Exec) -> Result<IwaeResult> {
    cfg.validate()?;
    let n = check_modalities(model, xs)?.min(cfg.max_rows);
    if let IwaeMode::Conditional(k) = mode {
        if k >= model.modalities() {
            return Err(CovaeError::MissingModality(k).into());
        }
    }
    let kk = cfg.k;
    let chunks = n.div_ceil(ROW_CHUNK);
    let parts = collect(map_indexed(exec, chunks, |c| -> Result<[Matrix; 3]> {
        let rows: Vec<usize> = chunk_rows(c, n, ROW_CHUNK).flat_map(|r| std::iter::repeat_n(r, kk)).collect();
        let rep: Vec<Matrix> = xs.iter().take(model.modalities()).map(|x| x.select_rows(&rows)).collect();
        let mut rng = rng_stream(cfg.seed, c as u64);
        let len = rows.len();
        let mut recon = vec![0.0; len];
        let (lp, lq) = match mode {
            IwaeMode::Joint => {
                let refs: Vec<&Matrix> = rep.iter().collect();
                let draw = model.draw_joint(&refs, &mut rng)?;
                for (j, z) in draw.z_dec.iter().enumerate() {
                    let ll = model.log_lik(j, z, &rep[j])?;
                    recon.iter_mut().zip(ll).for_each(|(a, b)| *a += b);
                }
                (draw.log_prior, draw.log_post)
            }
            IwaeMode::Conditional(k) => {
                let zs = model.draw_conditional(&[(k, &rep[k])], &mut rng)?;
                for (j, z) in zs.iter().enumerate().filter(|(j, _)| *j != k) {
                    let ll = model.log_lik(j, z, &rep[j])?;
                    recon.iter_mut().zip(ll).for_each(|(a, b)| *a += b);
                }
                (vec![0.0; len], vec![0.0; len])
            }
        };
        let m = len / kk;
        let mk = |v: Vec<f64>| Matrix::from_vec(m, kk, v).expect("rows repeat K times");
        Ok([mk(recon), mk(lp), mk(lq)])
    }))?;
    let pick = |i: usize| stack_rows(&parts.iter().map(|p| p[i].clone()).collect::<Vec<_>>(), kk);
    let terms = IwaeTerms {
        recon: pick(0),
        log_prior: pick(1),
        log_post: pick(2),
    };
    let per_row = terms.bound_rows();
    if let Some(r) = per_row.iter().position(|v| !v.is_finite()) {
        return Err(EvalError::NonFiniteWeight(r));
    }
    Ok(IwaeResult {
        nll: mean(&per_row),
        stderr: std_error(&per_row),
        per_row,
        terms,
    })
}

/// Conditional NLL averaged over both conditioning directions of a bimodal model.
pub fn conditional_nll(model: &TrainedModel, xs: &[Matrix], cfg: &IwaeConfig, exec: Exec) -> Result<(f64, f64)> {
    let kk = model.modalities();
    let runs = (0..kk)
        .map(|k| iwae_nll(model, xs, cfg, IwaeMode::Conditional(k), exec))
        .collect::<Result<Vec<_>>>()?;
    let n = runs[0].per_row.len();
    let per_row: Vec<f64> = (0..n).map(|r| runs.iter().map(|x| x.per_row[r]).sum::<f64>() / kk as f64).collect();
    Ok((mean(&per_row), std_error(&per_row)))
}

/// Single-sample negative ELBO per row, with the KL term in closed form
/// where one exists (CoVAE, PoE) and estimated from the same sample for MoE.
pub fn negative_elbo(model: &TrainedModel, xs: &[Matrix], max_rows: usize, seed: u64, exec: Exec) -> Result<Vec<f64>> {
    let n = check_modalities(model, xs)?.min(max_rows);
    let chunks = n.div_ceil(ROW_CHUNK);
    let parts = collect(map_indexed(exec, chunks, |c| -> Result<Vec<f64>> {
        let rows: Vec<usize> = chunk_rows(c, n, ROW_CHUNK).collect();
        let sub: Vec<Matrix> = xs.iter().take(model.modalities()).map(|x| x.select_rows(&rows)).collect();
        let refs: Vec<&Matrix> = sub.iter().collect();
        let mut rng = rng_stream(seed, c as u64);
        let draw = model.draw_joint(&refs, &mut rng)?;
        let mut out = vec![0.0; rows.len()];
        for (j, z) in draw.z_dec.iter().enumerate() {
            let ll = model.log_lik(j, z, &sub[j])?;
            out.iter_mut().zip(ll).for_each(|(a, b)| *a -= b);
        }
        for (r, o) in out.iter_mut().enumerate() {
            *o += match model {
                TrainedModel::Covae(m) => covae_kl(m, &sub, r)?,
                TrainedModel::Baseline(b) if b.kind == BaselineKind::Poe => {
                    let experts = b
                        .experts
                        .iter()
                        .zip(&sub)
                        .map(|(e, x)| e.encode_one(x.row(r)))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    let fused = fuse_poe(&experts, true)?;
                    let prior = BlockGaussian::standard(LatentLayout::new(vec![b.latent_dim])?);
                    kl_diag(&fused, &prior)?
                }
                TrainedModel::Baseline(_) => draw.log_post[r] - draw.log_prior[r],
            };
        }
        Ok(out)
    }))?;
    Ok(parts.concat())
}

fn covae_kl(m: &CovaeModel, xs: &[Matrix], r: usize) -> Result<f64> {
    let row: Vec<f64> = xs.iter().flat_map(|x| x.row(r).iter().copied()).collect();
    let q = m.joint.encode_one(&row, m.layout())?;
    Ok(kl_full(&q, m.prior())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationMode {
    Joint,
    /// Condition on modality 0.
    Conditional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    /// Pearson correlation of matched decoder-input dimensions.
    pub per_pair: Vec<f64>,
    pub mean: f64,
    pub samples: usize,
}

/// Correlation between matched dimensions of the latents fed to decoders 0 and 1.
pub fn decoder_input_correlation(
    model: &TrainedModel,
    xs: &[Matrix],
    mode: CorrelationMode,
    seed: u64,
    exec: Exec,
) -> Result<CorrelationReport> {
    let n = check_modalities(model, xs)?;
    if model.modalities() < 2 {
        return Err(EvalError::InsufficientSamples("need two modalities".into()));
    }
    let total = n * MIN_CORRELATION_SAMPLES.div_ceil(n);
    let chunk = 256;
    let parts = collect(map_indexed(exec, total.div_ceil(chunk), |c| -> Result<(Matrix, Matrix)> {
        let rows: Vec<usize> = chunk_rows(c, total, chunk).map(|i| i % n).collect();
        let sub: Vec<Matrix> = xs.iter().take(model.modalities()).map(|x| x.select_rows(&rows)).collect();
        let mut rng = rng_stream(seed, c as u64);
        let zs = match mode {
            CorrelationMode::Joint => model.draw_joint(&sub.iter().collect::<Vec<_>>(), &mut rng)?.z_dec,
            CorrelationMode::Conditional => model.draw_conditional(&[(0, &sub[0])], &mut rng)?,
        };
        Ok((zs[0].clone(), zs[1].clone()))
    }))?;
    let a = stack_rows(&parts.iter().map(|p| p.0.clone()).collect::<Vec<_>>(), parts[0].0.cols());
    let b = stack_rows(&parts.iter().map(|p| p.1.clone()).collect::<Vec<_>>(), parts[0].1.cols());
    let per_pair: Vec<f64> = (0..a.cols().min(b.cols())).map(|i| pearson(&a.col(i), &b.col(i))).collect();
    Ok(CorrelationReport {
        mean: mean(&per_pair),
        per_pair,
        samples: a.rows(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpreadConfig {
    /// Conditional generations per test point.
    pub draws: usize,
    pub max_points: usize,
    pub seed: u64,
}

impl Default for SpreadConfig {
    fn default() -> Self {
        Self {
            draws: 100,
            max_points: 200,
            seed: 0,
        }
    }
}

/// Mean per-dimension std of decoder inputs under conditional generation,
/// with standard errors across test points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveStd {
    pub observed: f64,
    pub missing: f64,
    pub observed_se: f64,
    pub missing_se: f64,
    pub points: usize,
}

fn column_std_mean(z: &Matrix) -> f64 {
    let sds: Vec<f64> = (0..z.cols()).map(|c| crate::stats::variance(&z.col(c)).sqrt()).collect();
    mean(&sds)
}

/// Observes modality `k` and measures the spread of every decoder input.
pub fn predictive_std(
    model: &TrainedModel,
    xs: &[Matrix],
    k: usize,
    cfg: &SpreadConfig,
    exec: Exec,
) -> Result<PredictiveStd> {
    let n = check_modalities(model, xs)?.min(cfg.max_points);
    if cfg.draws < 2 {
        return Err(EvalError::InsufficientSamples("need at least two draws per point".into()));
    }
    if k >= model.modalities() {
        return Err(CovaeError::MissingModality(k).into());
    }
    let per_point = collect(map_indexed(exec, n, |p| -> Result<(f64, f64)> {
        let rep = xs[k].select_rows(&vec![p; cfg.draws]);
        let mut rng = rng_stream(cfg.seed, p as u64);
        let zs = model.draw_conditional(&[(k, &rep)], &mut rng)?;
        let missing: Vec<&Matrix> = zs.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, z)| z).collect();
        Ok((column_std_mean(&zs[k]), column_std_mean(&Matrix::hstack(&missing)?)))
    }))?;
    let obs: Vec<f64> = per_point.iter().map(|p| p.0).collect();
    let mis: Vec<f64> = per_point.iter().map(|p| p.1).collect();
    Ok(PredictiveStd {
        observed: mean(&obs),
        missing: mean(&mis),
        observed_se: std_error(&obs),
        missing_se: std_error(&mis),
        points: n,
    })
}

/// Draws `m` completions of one modality given an observation of another.
pub trait ConditionalSampler: Sync {
    fn sample(&self, x_obs: &[f64], m: usize, rng: &mut ChaCha8Rng) -> Result<Matrix>;
}

/// Exact `p(x₂ | x₁)` of a synthetic spec with linear maps.
#[derive(Debug, Clone)]
pub struct AnalyticConditional {
    map: ConditionalMap,
}

impl AnalyticConditional {
    pub fn from_spec(spec: &SyntheticSpec) -> Result<Self> {
        let [m1, m2] = spec.maps();
        let (w1, w2) = match (m1.linear_weight(spec.d1), m2.linear_weight(spec.d2)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(EvalError::NonLinearSpec),
        };
        let (p1, p2) = (w1.cols(), w2.cols());
        let sigma = build_sigma(spec.d1, spec.d2, spec.rho).map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
        let w = Matrix::from_fn(spec.d1 + spec.d2, p1 + p2, |r, c| match (r < spec.d1, c < p1) {
            (true, true) => w1[(r, c)],
            (false, false) => w2[(r - spec.d1, c - p1)],
            _ => 0.0,
        });
        let mut cov = w.t_matmul(&sigma.matmul(&w)?)?.add_diag(spec.sigma_x * spec.sigma_x);
        cov.symmetrize();
        let layout = LatentLayout::new(vec![p1, p2])?;
        let map = ConditionalMap::from_covariance(&layout, &vec![0.0; p1 + p2], &cov, &[0])?;
        Ok(Self { map })
    }

    pub fn mean(&self, x_obs: &[f64]) -> Vec<f64> {
        self.map.conditional_mean(x_obs)
    }
}

impl ConditionalSampler for AnalyticConditional {
    fn sample(&self, x_obs: &[f64], m: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
        let d = self.map.missing_mean.len();
        let mut out = Matrix::zeros(m, d);
        for r in 0..m {
            out.row_mut(r).copy_from_slice(&self.map.sample(x_obs, rng));
        }
        Ok(out)
    }
}

/// Conditional generation through a trained model, including observation noise.
pub struct ModelSampler<'a> {
    pub model: &'a TrainedModel,
    pub observed: usize,
    pub target: usize,
}

impl ConditionalSampler for ModelSampler<'_> {
    fn sample(&self, x_obs: &[f64], m: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
        let rep = Matrix::from_fn(m, x_obs.len(), |_, c| x_obs[c]);
        let zs = self.model.draw_conditional(&[(self.observed, &rep)], rng)?;
        let dec = &self.model.decoders()[self.target];
        let mean = dec.decode(&zs[self.target])?;
        let eps = standard_normal_matrix(m, mean.cols(), rng);
        Ok(Matrix::from_fn(m, mean.cols(), |r, c| mean[(r, c)] + dec.sigma_obs * eps[(r, c)]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Samples behind each interval; `draws + 1` should be a multiple of 20
    /// so the order-statistic intervals have exact nominal coverage.
    pub draws: usize,
    pub max_points: usize,
    pub levels: Vec<f64>,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            draws: 199,
            max_points: 300,
            levels: vec![0.5, 0.9],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub level: f64,
    pub coverage: f64,
    pub stderr: f64,
    pub abs_error: f64,
}

/// Fraction of exact conditional draws falling inside the sampler's central
/// intervals, per dimension, averaged over points.
pub fn calibration(
    sampler: &dyn ConditionalSampler,
    truth: &AnalyticConditional,
    x_obs: &Matrix,
    cfg: &CalibrationConfig,
    exec: Exec,
) -> Result<Vec<Coverage>> {
    let n = x_obs.rows().min(cfg.max_points);
    if n < 2 || cfg.draws < 2 {
        return Err(EvalError::InsufficientSamples("need two points and two draws".into()));
    }
    if cfg.levels.iter().any(|l| !(0.0..1.0).contains(l)) {
        return Err(EvalError::InvalidConfig("levels must lie in [0, 1)".into()));
    }
    let m = cfg.draws;
    let hits = collect(map_indexed(exec, n, |p| -> Result<Vec<f64>> {
        let mut rng = rng_stream(cfg.seed, p as u64);
        let x = x_obs.row(p);
        let samples = sampler.sample(x, m, &mut rng)?;
        let target = truth.sample(x, 1, &mut rng)?;
        let cols: Vec<Vec<f64>> = (0..samples.cols())
            .map(|c| {
                let mut v = samples.col(c);
                v.sort_by(f64::total_cmp);
                v
            })
            .collect();
        Ok(cfg
            .levels
            .iter()
            .map(|level| {
                let j = (((1.0 - level) / 2.0 * (m + 1) as f64).round() as usize).clamp(1, m.div_ceil(2));
                let inside = cols
                    .iter()
                    .enumerate()
                    .filter(|(c, v)| v[j - 1] <= target[(0, *c)] && target[(0, *c)] <= v[m - j])
                    .count();
                inside as f64 / cols.len() as f64
            })
            .collect())
    }))?;
    Ok(cfg
        .levels
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let v: Vec<f64> = hits.iter().map(|h| h[i]).collect();
            let coverage = mean(&v);
            Coverage {
                level,
                coverage,
                stderr: std_error(&v),
                abs_error: (coverage - level).abs(),
            }
        })
        .collect())
}

/// Calibration of a model's `x₂ | x₁` generations on linear synthetic data.
pub fn calibration_linear(
    model: &TrainedModel,
    spec: &SyntheticSpec,
    x1: &Matrix,
    cfg: &CalibrationConfig,
    exec: Exec,
) -> Result<Vec<Coverage>> {
    let truth = AnalyticConditional::from_spec(spec)?;
    let sampler = ModelSampler {
        model,
        observed: 0,
        target: 1,
    };
    calibration(&sampler, &truth, x1, cfg, exec)
}

/// Participation ratio of the model prior; baselines have a standard-normal prior.
pub fn prior_deff(model: &TrainedModel) -> Result<f64> {
    match model {
        TrainedModel::Covae(m) => Ok(participation_ratio(&m.prior().covariance())?),
        TrainedModel::Baseline(b) => Ok(b.latent_dim as f64),
    }
}

/// Mean canonical correlation between the two true latent blocks.
pub fn cca_ground_truth(ds: &PairedDataset) -> Result<f64> {
    let d1 = ds.spec.d1;
    let z1 = ds.z_true.slice_cols(0, d1);
    let z2 = ds.z_true.slice_cols(d1, ds.z_true.cols());
    Ok(cca(&z1, &z2)?.mean_corr())
}

/// Bimodal linear-Gaussian CoVAE whose encoders are the exact posteriors.
///
/// `z ~ N(0, [[1, ρ], [ρ, 1]])`, `x_k = a_k z_k + σ ε`. Every importance
/// weight equals `p(x)`, so the IWAE bound is exact for any `K`.
#[derive(Debug, Clone)]
pub struct LinearGaussianOracle {
    pub model: TrainedModel,
    pub gains: [f64; 2],
    pub rho: f64,
    pub sigma: f64,
}

impl LinearGaussianOracle {
    pub fn new(rho: f64, gains: [f64; 2], sigma: f64) -> Result<Self> {
        if !(rho.abs() < 1.0) || !(sigma > 0.0) {
            return Err(EvalError::InvalidConfig("need |rho| < 1 and sigma > 0".into()));
        }
        let arch = crate::covae::ArchConfig {
            latent_dims: vec![1, 1],
            hidden: Vec::new(),
            activation: crate::nets::Activation::Tanh,
            sigma_obs: sigma,
            seed: 0,
        };
        let mut m = CovaeModel::new(&[1, 1], &arch)?;
        let prior = Matrix::from_rows(&[[1.0, rho], [rho, 1.0]]);
        m.freeze_prior(&prior, vec![rho])?;
        let s2 = sigma * sigma;
        for (k, &a) in gains.iter().enumerate() {
            let dec = &mut m.decoders[k].net.layers[0];
            dec.weight = Matrix::from_rows(&[[a]]);
            dec.bias = Matrix::zeros(1, 1);
            let v = 1.0 / (1.0 + a * a / s2);
            let enc = &mut m.unimodal[k].net.layers[0];
            enc.weight = Matrix::from_rows(&[[v * a / s2, 0.0]]);
            enc.bias = Matrix::row_vector(&[0.0, v.ln()]);
        }
        let mut precision = crate::linalg::CholeskyFactor::from_lower(cholesky(&prior)?.into_lower())?.inverse();
        for (k, &a) in gains.iter().enumerate() {
            precision[(k, k)] += a * a / s2;
        }
        let post = cholesky(&precision)?.inverse();
        let w = Matrix::from_fn(2, 2, |i, j| gains[i] / s2 * post[(i, j)]);
        let l = cholesky(&post)?.into_lower();
        let inv_softplus = |y: f64| y.exp_m1().ln();
        let joint = &mut m.joint.net.layers[0];
        joint.weight = Matrix::from_fn(2, 5, |i, j| if j < 2 { w[(i, j)] } else { 0.0 });
        joint.bias = Matrix::row_vector(&[0.0, 0.0, inv_softplus(l[(0, 0)]), l[(1, 0)], inv_softplus(l[(1, 1)])]);
        Ok(Self {
            model: TrainedModel::Covae(m),
            gains,
            rho,
            sigma,
        })
    }

    fn evidence_cov(&self) -> Matrix {
        let [a, b] = self.gains;
        let s2 = self.sigma * self.sigma;
        Matrix::from_rows(&[[a * a + s2, a * b * self.rho], [a * b * self.rho, b * b + s2]])
    }

    /// Paired observations `[x1, x2]`, each `n x 1`.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<Matrix> {
        let l = cholesky(&self.evidence_cov()).expect("positive definite");
        let x = standard_normal_matrix(n, 2, rng).matmul_t(l.lower()).expect("shape");
        vec![x.slice_cols(0, 1), x.slice_cols(1, 2)]
    }

    /// Closed-form `−log p(x)` per row.
    pub fn neg_log_evidence(&self, xs: &[Matrix]) -> Vec<f64> {
        let g = BlockGaussian::zero_mean(LatentLayout::new(vec![2]).expect("dims"), &self.evidence_cov())
            .expect("positive definite");
        (0..xs[0].rows())
            .map(|r| -crate::gaussian::logpdf(&g, &[xs[0][(r, 0)], xs[1][(r, 0)]]).expect("dims"))
            .collect()
    }
}

/// One row of the metrics table. `replicate == None` marks a summary across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub rho: f64,
    pub replicate: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    /// Replicates behind the value.
    pub replicates: usize,
}

/// Mean and standard error across replicates for each `(model, rho, metric)`,
/// in order of first appearance.
pub fn summarize(rows: &[MetricReport]) -> Vec<MetricReport> {
    let mut keys: Vec<(String, f64, String)> = Vec::new();
    for r in rows.iter().filter(|r| r.replicate.is_some()) {
        let key = (r.model.clone(), r.rho, r.metric.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(model, rho, metric)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.replicate.is_some() && r.model == model && r.rho == rho && r.metric == metric)
                .map(|r| r.value)
                .collect();
            MetricReport {
                value: mean(&vals),
                stderr: if vals.len() > 1 { std_error(&vals) } else { 0.0 },
                replicates: vals.len(),
                model,
                rho,
                replicate: None,
                metric,
            }
        })
        .collect()
}

pub mod metric {
    pub const CORR_JOINT: &str = "corr_joint";
    pub const CORR_CONDITIONAL: &str = "corr_conditional";
    pub const STD_OBSERVED: &str = "std_observed";
    pub const STD_MISSING: &str = "std_missing";
    pub const NLL_JOINT: &str = "nll_joint";
    pub const NLL_CONDITIONAL: &str = "nll_conditional";
    pub const D_EFF: &str = "d_eff";
    pub const RHO_HAT: &str = "rho_hat";
    pub const RHO_CCA: &str = "rho_cca";
    pub const COVERAGE_50: &str = "coverage_50";
    pub const COVERAGE_90: &str = "coverage_90";
}

/// Settings for the full metric battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iwae: IwaeConfig,
    pub spread: SpreadConfig,
    pub calibration: CalibrationConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iwae: IwaeConfig::default(),
            spread: SpreadConfig::default(),
            calibration: CalibrationConfig::default(),
            seed: 0,
        }
    }
}

/// Every metric for one model on one test set, as `(name, value, stderr)`.
///
/// Calibration rows appear only for linear data.
pub fn evaluate(
    model: &TrainedModel,
    test: &PairedDataset,
    cfg: &EvalConfig,
    exec: Exec,
) -> Result<Vec<(&'static str, f64, f64)>> {
    let xs = [test.x1.clone(), test.x2.clone()];
    let seed = |salt: u64| derive_seed(cfg.seed, salt);
    let mut out = Vec::new();
    let cj = decoder_input_correlation(model, &xs, CorrelationMode::Joint, seed(1), exec)?;
    out.push((metric::CORR_JOINT, cj.mean, 0.0));
    let cc = decoder_input_correlation(model, &xs, CorrelationMode::Conditional, seed(2), exec)?;
    out.push((metric::CORR_CONDITIONAL, cc.mean, 0.0));
    let spread = SpreadConfig {
        seed: seed(3),
        ..cfg.spread
    };
    let ps = predictive_std(model, &xs, 0, &spread, exec)?;
    out.push((metric::STD_OBSERVED, ps.observed, ps.observed_se));
    out.push((metric::STD_MISSING, ps.missing, ps.missing_se));
    let iwae = IwaeConfig {
        seed: seed(4),
        ..cfg.iwae.clone()
    };
    let nj = iwae_nll(model, &xs, &iwae, IwaeMode::Joint, exec)?;
    out.push((metric::NLL_JOINT, nj.nll, nj.stderr));
    let (nc, nc_se) = conditional_nll(model, &xs, &IwaeConfig { seed: seed(5), ..iwae }, exec)?;
    out.push((metric::NLL_CONDITIONAL, nc, nc_se));
    out.push((metric::D_EFF, prior_deff(model)?, 0.0));
    if let TrainedModel::Covae(m) = model {
        out.push((metric::RHO_HAT, mean(m.rho_hat()), 0.0));
    }
    out.push((metric::RHO_CCA, cca_ground_truth(test)?, 0.0));
    match calibration_linear(
        model,
        &test.spec,
        &test.x1,
        &CalibrationConfig {
            seed: seed(6),
            ..cfg.calibration.clone()
        },
        exec,
    ) {
        Ok(cov) => {
            for c in cov {
                let name = if c.level == 0.5 {
                    metric::COVERAGE_50
                } else if c.level == 0.9 {
                    metric::COVERAGE_90
                } else {
                    continue;
                };
                out.push((name, c.coverage, c.stderr));
            }
        }
        Err(EvalError::NonLinearSpec) => {}
        Err(e) => return Err(e),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covae::{pseudo_diagonal_prior, ArchConfig, BaselineModel};
    use crate::synthdata::{generate, MapKind};
    use rand::SeedableRng;

    fn spec(rho: f64, map: MapKind) -> SyntheticSpec {
        SyntheticSpec {
            d1: 2,
            d2: 2,
            rho,
            n: 400,
            map,
            obs_dim1: 3,
            obs_dim2: 3,
            sigma_x: 0.3,
            seed: 5,
        }
    }

    fn untrained(kind: &str) -> TrainedModel {
        let arch = ArchConfig {
            latent_dims: vec![2, 2],
            hidden: vec![8],
            seed: 1,
            ..ArchConfig::default()
        };
        match kind {
            "poe" => TrainedModel::Baseline(BaselineModel::new(BaselineKind::Poe, &[3, 3], &arch).unwrap()),
            "moe" => TrainedModel::Baseline(BaselineModel::new(BaselineKind::Moe, &[3, 3], &arch).unwrap()),
            _ => {
                let mut m = CovaeModel::new(&[3, 3], &arch).unwrap();
                let cov = pseudo_diagonal_prior(m.layout(), &[0.6, 0.6]);
                m.freeze_prior(&cov, vec![0.6, 0.6]).unwrap();
                TrainedModel::Covae(m)
            }
        }
    }

    fn data(rho: f64) -> Vec<Matrix> {
        let ds = generate(&spec(rho, MapKind::Linear)).unwrap();
        vec![ds.x1, ds.x2]
    }

    #[test]
    fn decomposition_recombines_exactly() {
        let m = untrained("covae");
        let cfg = IwaeConfig {
            k: 8,
            max_rows: 40,
            seed: 2,
        };
        let r = iwae_nll(&m, &data(0.5), &cfg, IwaeMode::Joint, Exec::Sequential).unwrap();
        let w = r.terms.log_weights();
        for (row, v) in r.per_row.iter().enumerate() {
            let mx = w.row(row).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + w.row(row).iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            assert!((-(lse - (8f64).ln()) - v).abs() < 1e-10);
        }
    }

    #[test]
    fn iwae_is_execution_mode_invariant() {
        let m = untrained("moe");
        let cfg = IwaeConfig {
            k: 4,
            max_rows: 50,
            seed: 3,
        };
        let xs = data(0.3);
        let a = iwae_nll(&m, &xs, &cfg, IwaeMode::Conditional(1), Exec::Sequential).unwrap();
        let b = iwae_nll(&m, &xs, &cfg, IwaeMode::Conditional(1), Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exact_posterior_gives_exact_evidence() {
        let oracle = LinearGaussianOracle::new(0.7, [1.5, -0.8], 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xs = oracle.sample(64, &mut rng);
        let exact = oracle.neg_log_evidence(&xs);
        for k in [1, 5] {
            let cfg = IwaeConfig { k, max_rows: 64, seed: 1 };
            let r = iwae_nll(&oracle.model, &xs, &cfg, IwaeMode::Joint, Exec::Sequential).unwrap();
            for (a, b) in r.per_row.iter().zip(&exact) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shared_latent_correlation_is_one() {
        let m = untrained("poe");
        let xs = data(0.5);
        for mode in [CorrelationMode::Joint, CorrelationMode::Conditional] {
            let r = decoder_input_correlation(&m, &xs, mode, 0, Exec::Parallel).unwrap();
            assert_eq!(r.mean, 1.0);
            assert!(r.samples >= MIN_CORRELATION_SAMPLES);
        }
    }

    #[test]
    fn poe_spread_is_identical_across_blocks() {
        let m = untrained("poe");
        let cfg = SpreadConfig {
            draws: 20,
            max_points: 10,
            seed: 0,
        };
        let s = predictive_std(&m, &data(0.5), 0, &cfg, Exec::Sequential).unwrap();
        assert_eq!(s.observed, s.missing);
    }

    #[test]
    fn oracle_sampler_is_calibrated() {
        let sp = spec(0.5, MapKind::Linear);
        let truth = AnalyticConditional::from_spec(&sp).unwrap();
        let ds = generate(&sp).unwrap();
        let cfg = CalibrationConfig {
            max_points: 400,
            ..CalibrationConfig::default()
        };
        for c in calibration(&truth, &truth, &ds.x1, &cfg, Exec::Parallel).unwrap() {
            assert!(c.abs_error < 3.0 * c.stderr + 1e-3, "{c:?}");
        }
    }

    #[test]
    fn analytic_conditional_mean_matches_regression() {
        // the conditional mean is the population regression of x2 on x1
        let mut sp = spec(0.8, MapKind::Linear);
        sp.n = 20_000;
        let ds = generate(&sp).unwrap();
        let truth = AnalyticConditional::from_spec(&sp).unwrap();
        let pred = Matrix::from_fn(ds.len(), 3, |r, c| truth.mean(ds.x1.row(r))[c]);
        let resid = ds.x2.sub(&pred).unwrap();
        for c in 0..3 {
            for j in 0..3 {
                let corr = pearson(&resid.col(c), &ds.x1.col(j));
                assert!(corr.abs() < 0.03, "{corr}");
            }
        }
    }

    #[test]
    fn nonlinear_spec_rejected() {
        let sp = spec(0.5, MapKind::RandomMlp);
        assert!(matches!(AnalyticConditional::from_spec(&sp), Err(EvalError::NonLinearSpec)));
    }

    #[test]
    fn deff_examples() {
        let l = LatentLayout::new(vec![10, 10]).unwrap();
        let d = |r: f64| participation_ratio(&pseudo_diagonal_prior(&l, &[r; 10])).unwrap();
        assert!((d(0.0) - 20.0).abs() < 1e-10);
        // eigenvalues 1 ± ρ, ten of each
        let closed = |r: f64| 400.0 / (10.0 * (1.0 + r).powi(2) + 10.0 * (1.0 - r).powi(2));
        assert!((d(0.99) - closed(0.99)).abs() < 1e-9);
        assert!((closed(0.99) - 10.10).abs() < 0.01);
        assert!((d(0.9) - closed(0.9)).abs() < 1e-9);
        assert!((prior_deff(&untrained("poe")).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn summary_averages_replicates() {
        let row = |rep: usize, v: f64| MetricReport {
            model: "covae".into(),
            rho: 0.5,
            replicate: Some(rep),
            metric: "x".into(),
            value: v,
            stderr: 0.0,
            replicates: 1,
        };
        let s = summarize(&[row(0, 1.0), row(1, 3.0)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].value, 2.0);
        assert_eq!(s[0].replicates, 2);
        assert!((s[0].stderr - 1.0).abs() < 1e-15);
    }

    #[test]
    fn errors_on_bad_input() {
        let m = untrained("covae");
        let cfg = IwaeConfig { k: 0, ..IwaeConfig::default() };
        assert!(matches!(
            iwae_nll(&m, &data(0.1), &cfg, IwaeMode::Joint, Exec::Sequential),
            Err(EvalError::InvalidConfig(_))
        ));
        let empty = vec![Matrix::zeros(0, 3), Matrix::zeros(0, 3)];
        assert!(matches!(
            decoder_input_correlation(&m, &empty, CorrelationMode::Joint, 0, Exec::Sequential),
            Err(EvalError::InsufficientSamples(_))
        ));
    }
}
