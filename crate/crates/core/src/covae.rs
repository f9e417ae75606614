//! Correlated VAE: model, two-phase training and PoE/MoE baselines.
//!
//! Training runs in two phases. [`CovaeModel::pretrain_prior`] warm-trains
//! each unimodal encoder/decoder pair as a standalone VAE, measures the
//! canonical correlations of their latent means and assembles the prior
//! covariance from them. [`CovaeModel::train`] then minimises the joint loss
//! plus `λ` times the conditional loss averaged over conditioning modalities.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, AutodiffError, NodeId, Tape};
use crate::gaussian::{
    diag_logpdf_batch, fuse_poe, fuse_poe_batch, kl_diag_batch, kl_full_batch, logpdf, moe_logpdf,
    sample_full_batch, standard_normal_matrix, std_normal_logpdf_batch, BlockGaussian, ConditionalMap,
    DiagonalGaussian, FullPriorTerms, GaussianError, LatentLayout, LN_2PI,
};
use crate::linalg::{cholesky, LinalgError, Matrix};
use crate::nets::{
    read_checkpoint, restore_params, unpack_tril, write_checkpoint, Activation, CheckpointError, Decoder, DiagEncoder,
    JointEncoder, MlpNodes, NetsError,
};
use crate::par::derive_seed;
use crate::stats::{cca, covariance, CCA_RIDGE};

/// Canonical correlations are clipped to `[0, RHO_MAX]` before entering the prior.
pub const RHO_MAX: f64 = 0.995;
/// Lower clip for the initial cross correlation of a trainable prior.
pub const ONLINE_RHO_MIN: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum CovaeError {
    #[error("modality {0} is missing")]
    MissingModality(usize),
    #[error("no observed modality")]
    NoObservedModality,
    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("the prior is frozen")]
    PriorFrozen,
    #[error("the prior has not been pre-trained")]
    PriorNotReady,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CovaeError>;

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

/// Network shapes shared by every model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Latent dimension per modality.
    pub latent_dims: Vec<usize>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub sigma_obs: f64,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            latent_dims: vec![2, 2],
            hidden: default_hidden(),
            activation: Activation::Relu,
            sigma_obs: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    /// Epochs of standalone unimodal VAE training before the CCA step.
    pub pretrain_epochs: usize,
    /// Rotate unimodal latents onto canonical directions after the CCA step.
    pub cca_align: bool,
    /// Keep the prior cross correlations trainable during the main phase.
    pub online_prior: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda: 1.0,
            lr: 1e-3,
            epochs: 50,
            batch_size: 128,
            seed: 0,
            weight_decay: 0.01,
            plateau_patience: 30,
            plateau_factor: 0.1,
            min_lr: 1e-6,
            pretrain_epochs: 30,
            cca_align: true,
            online_prior: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CovaeError::InvalidConfig(m.into()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.plateau_factor) || self.plateau_factor == 0.0 {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Poe,
    Moe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_joint: f64,
    pub l_cond: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.l_joint + e.l_cond)
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    /// One update. Parameters with `decay[i] == false` skip weight decay.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], decay: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.into_iter().enumerate() {
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].as_mut_slice(), self.v[i].as_mut_slice());
            for (j, (w, g)) in p.as_mut_slice().iter_mut().zip(grads[i].as_slice()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w -= self.lr * (update + wd * *w);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// relative improvement of at least `1e-4`.
#[derive(Debug, Clone)]
pub struct ReduceOnPlateau {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(patience: usize, factor: f64, min_lr: f64) -> Self {
        Self {
            patience,
            factor,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, metric: f64, lr: &mut f64) {
        if !self.best.is_finite() || metric < self.best - 1e-4 * self.best.abs() {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                *lr = (*lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
    }
}

fn check_inputs(xs: &[Matrix], input_dims: &[usize]) -> Result<usize> {
    if xs.len() < input_dims.len() {
        return Err(CovaeError::MissingModality(xs.len()));
    }
    let n = xs[0].rows();
    for (k, (x, &d)) in xs.iter().zip(input_dims).enumerate() {
        if x.cols() != d {
            return Err(NetsError::ShapeMismatch { expected: d, got: x.cols() }.into());
        }
        if x.rows() != n {
            return Err(CovaeError::InvalidConfig(format!("modality {k} has {} rows, expected {n}", x.rows())));
        }
    }
    Ok(n)
}

/// Shared minibatch loop: shuffles, builds one tape per batch and applies AdamW.
///
/// `loss` returns `(objective, joint part, conditional part)`.
fn run_epochs<M>(
    model: &mut M,
    xs: &[Matrix],
    cfg: &TrainConfig,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    mut loss: impl FnMut(&M, &mut Tape, &[Arc<Matrix>], &mut ChaCha8Rng) -> Result<(NodeId, Vec<NodeId>, f64, f64)>,
    params: impl Fn(&mut M) -> Vec<&mut Matrix>,
    decay_mask: &[bool],
    mut after_step: impl FnMut(&mut M),
) -> Result<TrainTrace> {
    let n = xs[0].rows();
    let shapes: Vec<(usize, usize)> = params(model).iter().map(|p| p.shape()).collect();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, &shapes);
    let mut plateau = ReduceOnPlateau::new(cfg.plateau_patience, cfg.plateau_factor, cfg.min_lr);
    let mut trace = TrainTrace::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        let (mut sj, mut sc) = (0.0, 0.0);
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Arc<Matrix>> = xs.iter().map(|x| Arc::new(x.select_rows(rows))).collect();
            let mut tape = Tape::new();
            let (obj, ids, lj, lc) = loss(model, &mut tape, &batch, rng)?;
            let value = tape.scalar(obj);
            if !value.is_finite() {
                return Err(CovaeError::NonFiniteLoss { epoch, batch: b });
            }
            let grads = tape.backward(obj)?;
            let g: Vec<Matrix> = ids.iter().map(|&id| grads.wrt(id)).collect();
            opt.step(params(model), &g, decay_mask);
            after_step(model);
            sj += lj * rows.len() as f64;
            sc += lc * rows.len() as f64;
        }
        let (lj, lc) = (sj / n as f64, sc / n as f64);
        trace.epochs.push(EpochRecord {
            epoch,
            l_joint: lj,
            l_cond: lc,
            lr: opt.lr,
        });
        plateau.step(lj + cfg.lambda * lc, &mut opt.lr);
    }
    Ok(trace)
}

/// Row-wise `μ + exp(lv/2) ⊙ ε` on the tape.
fn reparam_diag(tape: &mut Tape, mean: NodeId, log_var: NodeId, rng: &mut impl Rng) -> Result<NodeId> {
    let (n, d) = tape.value(mean).shape();
    let half = tape.scale(log_var, 0.5);
    let std = tape.exp(half);
    let eps = tape.constant(standard_normal_matrix(n, d, rng));
    let noise = tape.mul(std, eps)?;
    Ok(tape.add(mean, noise)?)
}

/// Covariance with identity blocks and `rho[i]` linking dimension `i` of
/// modality 0 with dimension `i` of modality 1.
pub fn pseudo_diagonal_prior(layout: &LatentLayout, rho: &[f64]) -> Matrix {
    let d = layout.total();
    let mut s = Matrix::identity(d);
    if layout.modalities() == 2 {
        let off = layout.offset(1);
        for (i, &r) in rho.iter().enumerate().take(layout.dim(0).min(layout.dim(1))) {
            s[(i, off + i)] = r;
            s[(off + i, i)] = r;
        }
    }
    s
}

/// Tape handles for a bound [`CovaeModel`].
#[derive(Debug, Clone)]
pub struct CovaeNodes {
    pub unimodal: Vec<MlpNodes>,
    pub joint: MlpNodes,
    pub decoders: Vec<MlpNodes>,
    pub prior_logits: Option<NodeId>,
}

impl CovaeNodes {
    /// All parameter ids, in the order of [`CovaeModel::params_mut`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self.unimodal.iter().flat_map(|n| n.ids()).collect();
        out.extend(self.joint.ids());
        out.extend(self.decoders.iter().flat_map(|n| n.ids()));
        out.extend(self.prior_logits);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovaeModel {
    layout: LatentLayout,
    input_dims: Vec<usize>,
    pub arch: ArchConfig,
    pub unimodal: Vec<DiagEncoder>,
    pub joint: JointEncoder,
    pub decoders: Vec<Decoder>,
    prior: BlockGaussian,
    rho_hat: Vec<f64>,
    frozen: bool,
    prior_logits: Option<Matrix>,
}

impl CovaeModel {
    pub fn new(input_dims: &[usize], arch: &ArchConfig) -> Result<Self> {
        let layout = LatentLayout::new(arch.latent_dims.clone())?;
        if input_dims.len() != layout.modalities() {
            return Err(CovaeError::InvalidConfig(format!(
                "{} input dims for {} latent blocks",
                input_dims.len(),
                layout.modalities()
            )));
        }
        let k = input_dims.len();
        let seed = |salt: usize| derive_seed(arch.seed, salt as u64);
        let unimodal = (0..k)
            .map(|i| DiagEncoder::new(input_dims[i], &arch.hidden, layout.dim(i), arch.activation, seed(i)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let joint = JointEncoder::new(input_dims.iter().sum(), &arch.hidden, layout.total(), arch.activation, seed(k))?;
        let decoders = (0..k)
            .map(|i| {
                Decoder::new(
                    layout.dim(i),
                    &arch.hidden,
                    input_dims[i],
                    arch.activation,
                    arch.sigma_obs,
                    seed(k + 1 + i),
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            prior: BlockGaussian::standard(layout.clone()),
            layout,
            input_dims: input_dims.to_vec(),
            arch: arch.clone(),
            unimodal,
            joint,
            decoders,
            rho_hat: Vec::new(),
            frozen: false,
            prior_logits: None,
        })
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn prior(&self) -> &BlockGaussian {
        &self.prior
    }

    /// Cross correlations currently in the prior.
    pub fn rho_hat(&self) -> &[f64] {
        &self.rho_hat
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_online(&self) -> bool {
        self.prior_logits.is_some()
    }

    /// Installs a fixed prior and freezes it.
    pub fn freeze_prior(&mut self, cov: &Matrix, rho_hat: Vec<f64>) -> Result<()> {
        if self.frozen {
            return Err(CovaeError::PriorFrozen);
        }
        self.prior = BlockGaussian::zero_mean(self.layout.clone(), cov)?;
        self.rho_hat = rho_hat;
        self.prior_logits = None;
        self.frozen = true;
        Ok(())
    }

    fn online_pairs(&self) -> Result<usize> {
        let dims = self.layout.dims();
        if dims.len() != 2 || dims[0] != dims[1] {
            return Err(CovaeError::InvalidConfig(
                "a trainable prior needs two modalities with equal latent dims".into(),
            ));
        }
        Ok(dims[0])
    }

    /// Makes the cross correlations trainable, starting from `rho`.
    pub fn set_online_prior(&mut self, rho: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(CovaeError::PriorFrozen);
        }
        let d = self.online_pairs()?;
        if rho.len() != d {
            return Err(CovaeError::InvalidConfig(format!("expected {d} correlations, got {}", rho.len())));
        }
        let logits = rho
            .iter()
            .map(|r| {
                let r = r.clamp(ONLINE_RHO_MIN, RHO_MAX);
                (r / (1.0 - r)).ln()
            })
            .collect::<Vec<_>>();
        self.prior_logits = Some(Matrix::row_vector(&logits));
        self.sync_online_prior()
    }

    fn sync_online_prior(&mut self) -> Result<()> {
        if let Some(l) = &self.prior_logits {
            let rho: Vec<f64> = l.as_slice().iter().map(|&v| sigmoid(v)).collect();
            self.prior = BlockGaussian::zero_mean(self.layout.clone(), &pseudo_diagonal_prior(&self.layout, &rho))?;
            self.rho_hat = rho;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> CovaeNodes {
        CovaeNodes {
            unimodal: self.unimodal.iter().map(|e| e.net.bind(tape)).collect(),
            joint: self.joint.net.bind(tape),
            decoders: self.decoders.iter().map(|d| d.net.bind(tape)).collect(),
            prior_logits: self.prior_logits.as_ref().map(|l| tape.leaf(l.clone())),
        }
    }

    /// Trainable parameters, in the order of [`CovaeNodes::ids`].
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for e in &mut self.unimodal {
            out.extend(e.net.params_mut());
        }
        out.extend(self.joint.net.params_mut());
        for d in &mut self.decoders {
            out.extend(d.net.params_mut());
        }
        if let Some(l) = &mut self.prior_logits {
            out.push(l);
        }
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (k, e) in self.unimodal.iter().enumerate() {
            out.extend(e.net.named_params(&format!("unimodal{k}")));
        }
        out.extend(self.joint.net.named_params("joint"));
        for (k, d) in self.decoders.iter().enumerate() {
            out.extend(d.net.named_params(&format!("decoder{k}")));
        }
        if let Some(l) = &self.prior_logits {
            out.push(("prior_logits".into(), l));
        }
        out
    }

    fn decay_mask(&self) -> Vec<bool> {
        let n = self.named_params().len();
        let mut mask = vec![true; n];
        if self.prior_logits.is_some() {
            mask[n - 1] = false;
        }
        mask
    }

    /// `Σ_k log p(x_k | z_k)` per row, `n x 1`. `z[k]` feeds decoder `k`.
    fn recon(&self, tape: &mut Tape, nodes: &[MlpNodes], z: &[NodeId], xs: &[Arc<Matrix>]) -> Result<NodeId> {
        let mut total: Option<NodeId> = None;
        for (k, dec) in self.decoders.iter().enumerate() {
            let mean = dec.net.forward_tape(tape, &nodes[k], z[k])?;
            let ll = dec.log_lik_tape(tape, mean, &xs[k])?;
            total = Some(match total {
                None => ll,
                Some(t) => tape.add(t, ll)?,
            });
        }
        Ok(total.expect("at least one modality"))
    }

    fn blocks(&self, tape: &mut Tape, z: NodeId) -> Result<Vec<NodeId>> {
        (0..self.layout.modalities())
            .map(|k| {
                let r = self.layout.range(k);
                Ok(tape.slice_cols(z, r.start, r.end)?)
            })
            .collect()
    }

    /// Row-wise `KL(q ‖ p)` against the trainable pseudo-diagonal prior.
    fn online_kl(&self, tape: &mut Tape, mean: NodeId, packed: NodeId, logits: NodeId) -> Result<NodeId> {
        let d = self.online_pairs()?;
        let n = tape.value(mean).rows();
        let r = tape.sigmoid(logits);
        let pairs: Vec<(usize, usize)> = (0..d)
            .map(|i| (i, i))
            .chain((0..d).map(|i| (d + i, d + i)))
            .chain((0..d).map(|i| (i, d + i)))
            .collect();
        let g = tape.tril_gram(packed, pairs)?;
        let saa = tape.slice_cols(g, 0, d)?;
        let sbb = tape.slice_cols(g, d, 2 * d)?;
        let sab = tape.slice_cols(g, 2 * d, 3 * d)?;
        let ma = tape.slice_cols(mean, 0, d)?;
        let mb = tape.slice_cols(mean, d, 2 * d)?;
        let ma2 = tape.square(ma);
        let mb2 = tape.square(mb);
        let mab = tape.mul(ma, mb)?;
        let a = tape.add(saa, ma2)?;
        let b = tape.add(sbb, mb2)?;
        let c = tape.add(sab, mab)?;
        let rb = tape.broadcast_rows(r, n)?;
        let rc = tape.mul(rb, c)?;
        let rc2 = tape.scale(rc, 2.0);
        let ab = tape.add(a, b)?;
        let q = tape.sub(ab, rc2)?;
        let r2 = tape.square(r);
        let neg = tape.neg(r2);
        let one_minus = tape.add_scalar(neg, 1.0);
        let omb = tape.broadcast_rows(one_minus, n)?;
        let qn = tape.div(q, omb)?;
        let trace_maha = tape.sum_cols(qn);
        let log_om = tape.log(one_minus)?;
        let logdet_p = tape.sum(log_om);
        let logdet_p = tape.broadcast_rows(logdet_p, n)?;
        let diag = tape.select_cols(packed, crate::gaussian::diag_positions(2 * d))?;
        let log_diag = tape.log(diag)?;
        let logdet_q = tape.sum_cols(log_diag);
        let logdet_q = tape.scale(logdet_q, 2.0);
        let s = tape.add(trace_maha, logdet_p)?;
        let s = tape.sub(s, logdet_q)?;
        let s = tape.add_scalar(s, -((2 * d) as f64));
        Ok(tape.scale(s, 0.5))
    }

    /// Batch-averaged joint loss: reconstruction through the joint posterior plus `β·KL`.
    pub fn joint_loss(
        &self,
        tape: &mut Tape,
        nodes: &CovaeNodes,
        xs: &[Arc<Matrix>],
        cfg: &TrainConfig,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        if xs.len() < self.layout.modalities() {
            return Err(CovaeError::MissingModality(xs.len()));
        }
        let n = xs[0].rows();
        let parts: Vec<&Matrix> = xs.iter().map(|x| x.as_ref()).collect();
        let x = tape.constant(Matrix::hstack(&parts)?);
        let (mean, packed) = self.joint.encode_tape(tape, &nodes.joint, x)?;
        let eps = Arc::new(standard_normal_matrix(n, self.layout.total(), rng));
        let z = sample_full_batch(tape, mean, packed, eps)?;
        let zs = self.blocks(tape, z)?;
        let recon = self.recon(tape, &nodes.decoders, &zs, xs)?;
        let kl = match nodes.prior_logits {
            Some(l) => self.online_kl(tape, mean, packed, l)?,
            None => kl_full_batch(tape, mean, packed, &FullPriorTerms::new(&self.prior))?,
        };
        let kl = tape.scale(kl, cfg.beta);
        let per_row = tape.sub(kl, recon)?;
        Ok(tape.mean(per_row))
    }

    /// Batch-averaged conditional loss for conditioning modality `k`.
    ///
    /// The missing latents are drawn from the prior conditional given the
    /// unimodal sample; every modality is reconstructed.
    pub fn conditional_loss(
        &self,
        tape: &mut Tape,
        nodes: &CovaeNodes,
        xs: &[Arc<Matrix>],
        k: usize,
        cfg: &TrainConfig,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        let xk = xs.get(k).ok_or(CovaeError::MissingModality(k))?;
        let n = xk.rows();
        let x = tape.constant((**xk).clone());
        let (m, lv) = self.unimodal[k].encode_tape(tape, &nodes.unimodal[k], x)?;
        let zk = reparam_diag(tape, m, lv, rng)?;

        let mut zs: Vec<Option<NodeId>> = vec![None; self.layout.modalities()];
        zs[k] = Some(zk);
        match nodes.prior_logits {
            Some(logits) => {
                let d = self.online_pairs()?;
                let r = tape.sigmoid(logits);
                let rb = tape.broadcast_rows(r, n)?;
                let r2 = tape.square(r);
                let neg = tape.neg(r2);
                let om = tape.add_scalar(neg, 1.0);
                let s = tape.sqrt(om)?;
                let sb = tape.broadcast_rows(s, n)?;
                let eps = tape.constant(standard_normal_matrix(n, d, rng));
                let mean = tape.mul(zk, rb)?;
                let noise = tape.mul(sb, eps)?;
                zs[1 - k] = Some(tape.add(mean, noise)?);
            }
            None => {
                let map = ConditionalMap::new(&self.prior, &[k])?;
                let gain_t = tape.constant(map.gain.transpose());
                let mean = tape.matmul(zk, gain_t)?;
                let dm = map.missing_mean.len();
                let eps = standard_normal_matrix(n, dm, rng);
                let l = map.chol.as_ref().expect("at least two modalities");
                let noise = tape.constant(eps.matmul_t(l.lower())?);
                let zm = tape.add(mean, noise)?;
                let mut at = 0;
                for &j in &map.missing {
                    let dj = self.layout.dim(j);
                    zs[j] = Some(tape.slice_cols(zm, at, at + dj)?);
                    at += dj;
                }
            }
        }
        let zs: Vec<NodeId> = zs.into_iter().map(|z| z.expect("every block assigned")).collect();
        let recon = self.recon(tape, &nodes.decoders, &zs, xs)?;
        let block = self.prior.marginal(&[k])?.covariance();
        let kl = kl_diag_batch(tape, m, lv, &block)?;
        let kl = tape.scale(kl, cfg.beta);
        let per_row = tape.sub(kl, recon)?;
        Ok(tape.mean(per_row))
    }

    /// `L_joint + λ·mean_k L_cond,k`; returns `(objective, L_joint, L_cond)` nodes.
    pub fn objective(
        &self,
        tape: &mut Tape,
        nodes: &CovaeNodes,
        xs: &[Arc<Matrix>],
        cfg: &TrainConfig,
        rng: &mut impl Rng,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let lj = self.joint_loss(tape, nodes, xs, cfg, rng)?;
        let mut lc: Option<NodeId> = None;
        let kk = self.layout.modalities();
        for k in 0..kk {
            let l = self.conditional_loss(tape, nodes, xs, k, cfg, rng)?;
            lc = Some(match lc {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let lc = tape.scale(lc.expect("at least one modality"), 1.0 / kk as f64);
        let weighted = tape.scale(lc, cfg.lambda);
        let total = tape.add(lj, weighted)?;
        Ok((total, lj, lc))
    }

    /// Warm-trains unimodal VAEs, fits CCA on their latent means and installs
    /// the prior. Returns the cross correlations.
    pub fn pretrain_prior(&mut self, xs: &[Matrix], cfg: &TrainConfig) -> Result<Vec<f64>> {
        if self.frozen {
            return Err(CovaeError::PriorFrozen);
        }
        cfg.validate()?;
        check_inputs(xs, &self.input_dims)?;
        let kk = self.layout.modalities();
        for k in 0..kk {
            self.warm_train(k, &xs[k], cfg)?;
        }
        let means: Vec<Matrix> = (0..kk)
            .map(|k| Ok(self.unimodal[k].encode(&xs[k])?.0))
            .collect::<Result<_>>()?;
        for (k, m) in means.iter().enumerate() {
            let cov = covariance(m);
            if let Some(j) = cov.diag().iter().position(|v| !(*v > 1e-10)) {
                return Err(CovaeError::DegenerateCovariance(format!(
                    "latent mean {j} of modality {k} has no variance"
                )));
            }
        }

        let (cov, rho) = if kk == 2 {
            let c = cca(&means[0], &means[1])
                .map_err(|e| CovaeError::DegenerateCovariance(format!("CCA failed: {e}")))?;
            let rho: Vec<f64> = c.corrs.iter().map(|r| r.clamp(0.0, RHO_MAX)).collect();
            if cfg.cca_align && self.layout.dim(0) == self.layout.dim(1) {
                self.fold_alignment(0, &means[0], &c.x_dirs, &c.x_mean)?;
                self.fold_alignment(1, &means[1], &c.y_dirs, &c.y_mean)?;
            }
            (pseudo_diagonal_prior(&self.layout, &rho), rho)
        } else {
            self.pairwise_prior(&means)?
        };

        if cfg.online_prior {
            self.set_online_prior(&rho)?;
        } else {
            self.freeze_prior(&cov, rho.clone())?;
        }
        Ok(self.rho_hat.clone())
    }

    fn pairwise_prior(&self, means: &[Matrix]) -> Result<(Matrix, Vec<f64>)> {
        let kk = means.len();
        let mut cov = Matrix::identity(self.layout.total());
        let mut rho = Vec::new();
        for a in 0..kk {
            for b in a + 1..kk {
                let c = cca(&means[a], &means[b])
                    .map_err(|e| CovaeError::DegenerateCovariance(format!("CCA failed: {e}")))?;
                let r = c.mean_corr().clamp(0.0, RHO_MAX);
                rho.push(r);
                let (oa, ob) = (self.layout.offset(a), self.layout.offset(b));
                for i in 0..self.layout.dim(a).min(self.layout.dim(b)) {
                    cov[(oa + i, ob + i)] = r;
                    cov[(ob + i, oa + i)] = r;
                }
            }
        }
        let mut shrink = 1.0;
        while cholesky(&cov).is_err() {
            shrink *= 0.9;
            let base = Matrix::identity(cov.rows());
            cov = base.add(&cov.sub(&base)?.scale(0.9))?;
            if shrink < 1e-3 {
                return Err(CovaeError::DegenerateCovariance("pairwise prior is not positive definite".into()));
            }
        }
        Ok((cov, rho.iter().map(|r| r * shrink).collect()))
    }

    /// Rewrites encoder `k`'s head and decoder `k`'s input layer so the latent
    /// coordinates become (rescaled) canonical variates.
    ///
    /// With `u = s·(μ − m)·A`, `s² = tr Cov(μ) / d`, the mean head is mapped
    /// exactly; each new log-variance is the `A²`-weighted average of the old
    /// ones plus `ln(s² Σᵢ Aᵢⱼ²)`, a lower bound on the exact log of the
    /// rotated diagonal variance.
    fn fold_alignment(&mut self, k: usize, means: &Matrix, dirs: &Matrix, centre: &[f64]) -> Result<()> {
        let d = self.layout.dim(k);
        let cov = covariance(means);
        let s = (cov.trace()? / d as f64).sqrt();
        // Aᵀ (C + ridge) A = I, so A⁻¹ = Aᵀ (C + ridge)
        let a_inv = dirs.t_matmul(&cov.add_diag(CCA_RIDGE))?;
        let m_row = Matrix::row_vector(centre);

        let head = self.unimodal[k].net.layers.last_mut().expect("head layer");
        let w_mean = head.weight.slice_cols(0, d);
        let w_lv = head.weight.slice_cols(d, 2 * d);
        let b_mean = head.bias.slice_cols(0, d);
        let b_lv = head.bias.slice_cols(d, 2 * d);

        let new_w_mean = w_mean.matmul(dirs)?.scale(s);
        let new_b_mean = b_mean.sub(&m_row)?.matmul(dirs)?.scale(s);
        let sq = dirs.map(|v| v * v);
        let col_sums: Vec<f64> = (0..d).map(|j| sq.col(j).iter().sum()).collect();
        let weights = Matrix::from_fn(d, d, |i, j| sq[(i, j)] / col_sums[j]);
        let offset: Vec<f64> = col_sums.iter().map(|c| (s * s * c).ln()).collect();
        let new_w_lv = w_lv.matmul(&weights)?;
        let new_b_lv = b_lv.matmul(&weights)?.add(&Matrix::row_vector(&offset))?;
        head.weight = Matrix::hstack(&[&new_w_mean, &new_w_lv])?;
        head.bias = Matrix::hstack(&[&new_b_mean, &new_b_lv])?;

        let first = &mut self.decoders[k].net.layers[0];
        let w1 = first.weight.clone();
        first.weight = a_inv.matmul(&w1)?.scale(1.0 / s);
        first.bias = m_row.matmul(&w1)?.add(&first.bias)?;
        Ok(())
    }

    /// Standalone VAE on modality `k` against `N(0, I)`.
    fn warm_train(&mut self, k: usize, x: &Matrix, cfg: &TrainConfig) -> Result<TrainTrace> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5EED + k as u64));
        let d = self.layout.dim(k);
        let eye = Matrix::identity(d);
        let n_params = self.unimodal[k].net.layers.len() * 2 + self.decoders[k].net.layers.len() * 2;
        run_epochs(
            self,
            std::slice::from_ref(x),
            cfg,
            cfg.pretrain_epochs,
            &mut rng,
            |m, tape, batch, rng| {
                let enc = m.unimodal[k].net.bind(tape);
                let dec = m.decoders[k].net.bind(tape);
                let xn = tape.constant((*batch[0]).clone());
                let (mu, lv) = m.unimodal[k].encode_tape(tape, &enc, xn)?;
                let z = reparam_diag(tape, mu, lv, rng)?;
                let mean = m.decoders[k].net.forward_tape(tape, &dec, z)?;
                let ll = m.decoders[k].log_lik_tape(tape, mean, &batch[0])?;
                let kl = kl_diag_batch(tape, mu, lv, &eye)?;
                let kl = tape.scale(kl, cfg.beta);
                let per_row = tape.sub(kl, ll)?;
                let loss = tape.mean(per_row);
                let v = tape.scalar(loss);
                let ids = enc.ids().chain(dec.ids()).collect();
                Ok((loss, ids, v, 0.0))
            },
            |m| {
                let mut p = m.unimodal[k].net.params_mut();
                p.extend(m.decoders[k].net.params_mut());
                p
            },
            &vec![true; n_params],
            |_| {},
        )
    }

    /// Main training phase. Requires a pre-trained prior.
    pub fn train(&mut self, xs: &[Matrix], cfg: &TrainConfig) -> Result<TrainTrace> {
        if !self.frozen && self.prior_logits.is_none() {
            return Err(CovaeError::PriorNotReady);
        }
        cfg.validate()?;
        check_inputs(xs, &self.input_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7A11));
        let mask = self.decay_mask();
        run_epochs(
            self,
            xs,
            cfg,
            cfg.epochs,
            &mut rng,
            |m, tape, batch, rng| {
                let nodes = m.bind(tape);
                let (obj, lj, lc) = m.objective(tape, &nodes, batch, cfg, rng)?;
                let (vj, vc) = (tape.scalar(lj), tape.scalar(lc));
                Ok((obj, nodes.ids(), vj, vc))
            },
            |m| m.params_mut(),
            &mask,
            |m| {
                m.sync_online_prior().expect("sigmoid keeps the prior positive definite");
            },
        )
    }

    /// Conditional latents for decoders: observed blocks drawn from their
    /// unimodal posteriors, missing blocks from the prior conditional.
    fn draw_conditional(&self, observed: &[(usize, &Matrix)], rng: &mut impl Rng) -> Result<Vec<Matrix>> {
        let n = observed.first().ok_or(CovaeError::NoObservedModality)?.1.rows();
        let kk = self.layout.modalities();
        let mut zs: Vec<Option<Matrix>> = vec![None; kk];
        for &(k, x) in observed {
            if k >= kk {
                return Err(CovaeError::MissingModality(k));
            }
            let (m, lv) = self.unimodal[k].encode(x)?;
            let eps = standard_normal_matrix(n, m.cols(), rng);
            zs[k] = Some(Matrix::from_fn(n, m.cols(), |r, c| {
                m[(r, c)] + (0.5 * lv[(r, c)]).exp() * eps[(r, c)]
            }));
        }
        let obs: Vec<usize> = observed.iter().map(|o| o.0).collect();
        if obs.len() < kk {
            let map = ConditionalMap::new(&self.prior, &obs)?;
            let parts: Vec<&Matrix> = obs.iter().map(|&k| zs[k].as_ref().expect("observed")).collect();
            let zo = Matrix::hstack(&parts)?;
            let dm = map.missing_mean.len();
            let eps = standard_normal_matrix(n, dm, rng);
            let mut zm = Matrix::zeros(n, dm);
            for r in 0..n {
                zm.row_mut(r).copy_from_slice(&map.sample_with(zo.row(r), eps.row(r)));
            }
            let mut at = 0;
            for &j in &map.missing {
                let dj = self.layout.dim(j);
                zs[j] = Some(zm.slice_cols(at, at + dj));
                at += dj;
            }
        }
        Ok(zs.into_iter().map(|z| z.expect("all blocks filled")).collect())
    }

    fn draw_joint(&self, xs: &[&Matrix], rng: &mut impl Rng) -> Result<LatentDraw> {
        let n = xs[0].rows();
        let d = self.layout.total();
        let (mean, packed) = self.joint.encode(&Matrix::hstack(xs)?)?;
        let eps = standard_normal_matrix(n, d, rng);
        let mut z = Matrix::zeros(n, d);
        let mut log_post = Vec::with_capacity(n);
        let mut log_prior = Vec::with_capacity(n);
        for r in 0..n {
            let l = unpack_tril(packed.row(r), d);
            let er = eps.row(r);
            let mut logdet = 0.0;
            for i in 0..d {
                z[(r, i)] = mean[(r, i)] + crate::linalg::dot(&l.row(i)[..=i], &er[..=i]);
                logdet += l[(i, i)].ln();
            }
            let e2: f64 = er.iter().map(|e| e * e).sum();
            log_post.push(-0.5 * (e2 + d as f64 * LN_2PI) - logdet);
            log_prior.push(logpdf(&self.prior, z.row(r))?);
        }
        let z_dec = (0..self.layout.modalities())
            .map(|k| {
                let rg = self.layout.range(k);
                z.slice_cols(rg.start, rg.end)
            })
            .collect();
        Ok(LatentDraw {
            z_dec,
            log_prior,
            log_post,
        })
    }
}

/// Per-expert encoders over one shared latent consumed by every decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    input_dims: Vec<usize>,
    pub arch: ArchConfig,
    pub latent_dim: usize,
    pub experts: Vec<DiagEncoder>,
    pub decoders: Vec<Decoder>,
}

impl BaselineModel {
    /// The shared latent has the total dimension of `arch.latent_dims`.
    pub fn new(kind: BaselineKind, input_dims: &[usize], arch: &ArchConfig) -> Result<Self> {
        let layout = LatentLayout::new(arch.latent_dims.clone())?;
        if input_dims.len() != layout.modalities() {
            return Err(CovaeError::InvalidConfig("input dims do not match latent blocks".into()));
        }
        let d = layout.total();
        let k = input_dims.len();
        let seed = |salt: usize| derive_seed(arch.seed, 0xB000 + salt as u64);
        let experts = (0..k)
            .map(|i| DiagEncoder::new(input_dims[i], &arch.hidden, d, arch.activation, seed(i)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let decoders = (0..k)
            .map(|i| Decoder::new(d, &arch.hidden, input_dims[i], arch.activation, arch.sigma_obs, seed(k + i)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            kind,
            input_dims: input_dims.to_vec(),
            arch: arch.clone(),
            latent_dim: d,
            experts,
            decoders,
        })
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn bind(&self, tape: &mut Tape) -> (Vec<MlpNodes>, Vec<MlpNodes>) {
        (
            self.experts.iter().map(|e| e.net.bind(tape)).collect(),
            self.decoders.iter().map(|d| d.net.bind(tape)).collect(),
        )
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for e in &mut self.experts {
            out.extend(e.net.params_mut());
        }
        for d in &mut self.decoders {
            out.extend(d.net.params_mut());
        }
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (k, e) in self.experts.iter().enumerate() {
            out.extend(e.net.named_params(&format!("expert{k}")));
        }
        for (k, d) in self.decoders.iter().enumerate() {
            out.extend(d.net.named_params(&format!("decoder{k}")));
        }
        out
    }

    fn recon_shared(&self, tape: &mut Tape, dec: &[MlpNodes], z: NodeId, xs: &[Arc<Matrix>]) -> Result<NodeId> {
        let mut total: Option<NodeId> = None;
        for (k, d) in self.decoders.iter().enumerate() {
            let mean = d.net.forward_tape(tape, &dec[k], z)?;
            let ll = d.log_lik_tape(tape, mean, &xs[k])?;
            total = Some(match total {
                None => ll,
                Some(t) => tape.add(t, ll)?,
            });
        }
        Ok(total.expect("at least one modality"))
    }

    /// Batch-averaged negative ELBO with KL weight `β`.
    ///
    /// PoE fuses all experts with a standard-normal prior expert. MoE averages,
    /// over experts `m`, a single-sample estimate with `z ~ q_m` of
    /// `−log p(x|z) − β(log p(z) − log q_mix(z))`.
    pub fn elbo_loss(
        &self,
        tape: &mut Tape,
        enc: &[MlpNodes],
        dec: &[MlpNodes],
        xs: &[Arc<Matrix>],
        cfg: &TrainConfig,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        if xs.len() < self.experts.len() {
            return Err(CovaeError::MissingModality(xs.len()));
        }
        let experts: Vec<(NodeId, NodeId)> = self
            .experts
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let x = tape.constant((*xs[k]).clone());
                e.encode_tape(tape, &enc[k], x)
            })
            .collect::<std::result::Result<_, _>>()?;
        match self.kind {
            BaselineKind::Poe => {
                let (m, lv) = fuse_poe_batch(tape, &experts, true)?;
                let z = reparam_diag(tape, m, lv, rng)?;
                let recon = self.recon_shared(tape, dec, z, xs)?;
                let kl = kl_diag_batch(tape, m, lv, &Matrix::identity(self.latent_dim))?;
                let kl = tape.scale(kl, cfg.beta);
                let per_row = tape.sub(kl, recon)?;
                Ok(tape.mean(per_row))
            }
            BaselineKind::Moe => {
                let kk = experts.len();
                let mut total: Option<NodeId> = None;
                for &(m, lv) in &experts {
                    let z = reparam_diag(tape, m, lv, rng)?;
                    let recon = self.recon_shared(tape, dec, z, xs)?;
                    let comps: Vec<NodeId> = experts
                        .iter()
                        .map(|&(mj, lvj)| diag_logpdf_batch(tape, z, mj, lvj))
                        .collect::<std::result::Result<_, _>>()?;
                    let lse = tape.log_sum_exp(&comps)?;
                    let log_q = tape.add_scalar(lse, -(kk as f64).ln());
                    let log_p = std_normal_logpdf_batch(tape, z);
                    let gap = tape.sub(log_p, log_q)?;
                    let gap = tape.scale(gap, cfg.beta);
                    let neg = tape.add(recon, gap)?;
                    total = Some(match total {
                        None => neg,
                        Some(t) => tape.add(t, neg)?,
                    });
                }
                let avg = tape.scale(total.expect("at least one expert"), -1.0 / kk as f64);
                Ok(tape.mean(avg))
            }
        }
    }

    fn expert_posteriors(&self, observed: &[(usize, &Matrix)]) -> Result<Vec<(Matrix, Matrix)>> {
        observed
            .iter()
            .map(|&(k, x)| {
                let e = self.experts.get(k).ok_or(CovaeError::MissingModality(k))?;
                Ok(e.encode(x)?)
            })
            .collect()
    }

    /// Fused or mixture posterior draw over the observed modalities.
    fn draw(&self, observed: &[(usize, &Matrix)], rng: &mut impl Rng) -> Result<(Matrix, Vec<f64>)> {
        if observed.is_empty() {
            return Err(CovaeError::NoObservedModality);
        }
        let posts = self.expert_posteriors(observed)?;
        let n = posts[0].0.rows();
        let d = self.latent_dim;
        let mut z = Matrix::zeros(n, d);
        let mut log_q = Vec::with_capacity(n);
        for r in 0..n {
            let experts: Vec<DiagonalGaussian> = posts
                .iter()
                .map(|(m, lv)| DiagonalGaussian::new(m.row(r).to_vec(), lv.row(r).to_vec()))
                .collect::<std::result::Result<_, _>>()?;
            let (zr, lq) = match self.kind {
                BaselineKind::Poe => {
                    let f = fuse_poe(&experts, true)?;
                    let zr = f.sample(rng);
                    let lq = f.logpdf(&zr)?;
                    (zr, lq)
                }
                BaselineKind::Moe => {
                    let pick = rng.random_range(0..experts.len());
                    let zr = experts[pick].sample(rng);
                    let lq = moe_logpdf(&experts, &zr)?;
                    (zr, lq)
                }
            };
            z.row_mut(r).copy_from_slice(&zr);
            log_q.push(lq);
        }
        Ok((z, log_q))
    }
}

/// One latent draw per row, with the densities needed for importance weights.
#[derive(Debug, Clone)]
pub struct LatentDraw {
    /// Decoder input per modality.
    pub z_dec: Vec<Matrix>,
    pub log_prior: Vec<f64>,
    pub log_post: Vec<f64>,
}

/// A trained model of any family.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Covae(CovaeModel),
    Baseline(BaselineModel),
}

impl TrainedModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Covae(_) => "covae",
            Self::Baseline(b) => match b.kind {
                BaselineKind::Poe => "poe",
                BaselineKind::Moe => "moe",
            },
        }
    }

    pub fn modalities(&self) -> usize {
        self.decoders().len()
    }

    pub fn decoders(&self) -> &[Decoder] {
        match self {
            Self::Covae(m) => &m.decoders,
            Self::Baseline(m) => &m.decoders,
        }
    }

    pub fn input_dims(&self) -> &[usize] {
        match self {
            Self::Covae(m) => m.input_dims(),
            Self::Baseline(m) => m.input_dims(),
        }
    }

    /// Joint-posterior draw given every modality.
    pub fn draw_joint(&self, xs: &[&Matrix], rng: &mut impl Rng) -> Result<LatentDraw> {
        if xs.len() < self.modalities() {
            return Err(CovaeError::MissingModality(xs.len()));
        }
        match self {
            Self::Covae(m) => m.draw_joint(xs, rng),
            Self::Baseline(b) => {
                let observed: Vec<(usize, &Matrix)> = xs.iter().copied().enumerate().collect();
                let (z, log_post) = b.draw(&observed, rng)?;
                let d = b.latent_dim as f64;
                let log_prior = (0..z.rows())
                    .map(|r| -0.5 * (z.row(r).iter().map(|v| v * v).sum::<f64>() + d * LN_2PI))
                    .collect();
                Ok(LatentDraw {
                    z_dec: vec![z; b.decoders.len()],
                    log_prior,
                    log_post,
                })
            }
        }
    }

    /// Decoder inputs for every modality given only the `observed` ones.
    pub fn draw_conditional(&self, observed: &[(usize, &Matrix)], rng: &mut impl Rng) -> Result<Vec<Matrix>> {
        if observed.is_empty() {
            return Err(CovaeError::NoObservedModality);
        }
        match self {
            Self::Covae(m) => m.draw_conditional(observed, rng),
            Self::Baseline(b) => {
                let (z, _) = b.draw(observed, rng)?;
                Ok(vec![z; b.decoders.len()])
            }
        }
    }

    /// Row-wise `log p(x_k | z)` under decoder `k`.
    pub fn log_lik(&self, k: usize, z: &Matrix, x: &Matrix) -> Result<Vec<f64>> {
        let dec = &self.decoders()[k];
        Ok(dec.log_lik_rows(&dec.decode(z)?, x)?)
    }

    fn named_params(&self) -> Vec<(String, &Matrix)> {
        match self {
            Self::Covae(m) => m.named_params(),
            Self::Baseline(m) => m.named_params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Self::Covae(m) => m.params_mut(),
            Self::Baseline(m) => m.params_mut(),
        }
    }

    /// Writes the binary checkpoint to `path` and a JSON sidecar next to it.
    pub fn save(&self, path: &Path, config_hash: &str, train: &TrainConfig) -> Result<()> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.named_params())?;
        fs::write(path, buf)?;
        let sidecar = match self {
            Self::Covae(m) => Sidecar {
                kind: "covae".into(),
                input_dims: m.input_dims.clone(),
                arch: m.arch.clone(),
                layout: m.layout.dims().to_vec(),
                prior_covariance: Some(m.prior.covariance()),
                rho_hat: m.rho_hat.clone(),
                frozen: m.frozen,
                online: m.is_online(),
                config_hash: config_hash.into(),
                train: train.clone(),
            },
            Self::Baseline(b) => Sidecar {
                kind: self.kind_name().into(),
                input_dims: b.input_dims.clone(),
                arch: b.arch.clone(),
                layout: vec![b.latent_dim],
                prior_covariance: None,
                rho_hat: Vec::new(),
                frozen: true,
                online: false,
                config_hash: config_hash.into(),
                train: train.clone(),
            },
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Sidecar)> {
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        let stored = read_checkpoint(fs::File::open(path).map(std::io::BufReader::new)?)?;
        let mut model = match sidecar.kind.as_str() {
            "covae" => {
                let mut m = CovaeModel::new(&sidecar.input_dims, &sidecar.arch)?;
                let cov = sidecar
                    .prior_covariance
                    .as_ref()
                    .ok_or_else(|| CovaeError::InvalidConfig("sidecar lacks a prior".into()))?;
                if sidecar.online {
                    m.set_online_prior(&sidecar.rho_hat)?;
                } else if sidecar.frozen {
                    m.freeze_prior(cov, sidecar.rho_hat.clone())?;
                }
                Self::Covae(m)
            }
            "poe" => Self::Baseline(BaselineModel::new(BaselineKind::Poe, &sidecar.input_dims, &sidecar.arch)?),
            "moe" => Self::Baseline(BaselineModel::new(BaselineKind::Moe, &sidecar.input_dims, &sidecar.arch)?),
            other => return Err(CovaeError::InvalidConfig(format!("unknown model kind {other}"))),
        };
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        restore_params(&stored, names.into_iter().zip(model.params_mut()).collect())?;
        if let Self::Covae(m) = &mut model {
            m.sync_online_prior()?;
        }
        Ok((model, sidecar))
    }
}

/// Checkpoint metadata stored next to the parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: String,
    pub input_dims: Vec<usize>,
    pub arch: ArchConfig,
    pub layout: Vec<usize>,
    pub prior_covariance: Option<Matrix>,
    pub rho_hat: Vec<f64>,
    pub frozen: bool,
    pub online: bool,
    pub config_hash: String,
    pub train: TrainConfig,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Trains a PoE or MoE baseline on fully paired data.
pub fn train_baseline(
    kind: BaselineKind,
    xs: &[Matrix],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(BaselineModel, TrainTrace)> {
    cfg.validate()?;
    let input_dims: Vec<usize> = xs.iter().map(|x| x.cols()).collect();
    let mut model = BaselineModel::new(kind, &input_dims, arch)?;
    check_inputs(xs, &input_dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xBA5E));
    let n_params = model.named_params().len();
    let trace = run_epochs(
        &mut model,
        xs,
        cfg,
        cfg.epochs,
        &mut rng,
        |m, tape, batch, rng| {
            let (enc, dec) = m.bind(tape);
            let loss = m.elbo_loss(tape, &enc, &dec, batch, cfg, rng)?;
            let v = tape.scalar(loss);
            let ids = enc.iter().chain(&dec).flat_map(|n| n.ids()).collect();
            Ok((loss, ids, v, 0.0))
        },
        |m| m.params_mut(),
        &vec![true; n_params],
        |_| {},
    )?;
    Ok((model, trace))
}

/// Builds, pre-trains and trains a CoVAE on fully paired data.
pub fn train_covae(xs: &[Matrix], arch: &ArchConfig, cfg: &TrainConfig) -> Result<(CovaeModel, TrainTrace)> {
    let input_dims: Vec<usize> = xs.iter().map(|x| x.cols()).collect();
    let mut model = CovaeModel::new(&input_dims, arch)?;
    model.pretrain_prior(xs, cfg)?;
    let trace = model.train(xs, cfg)?;
    Ok((model, trace))
}

/// One imputed sample: decoder inputs and decoded means per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub latents: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

/// `n_draws` independent completions of a partially observed sample.
pub fn conditional_generate(
    model: &TrainedModel,
    observed: &[(usize, Vec<f64>)],
    n_draws: usize,
    rng: &mut impl Rng,
) -> Result<Vec<GeneratedSample>> {
    if observed.is_empty() {
        return Err(CovaeError::NoObservedModality);
    }
    let reps: Vec<(usize, Matrix)> = observed
        .iter()
        .map(|(k, x)| (*k, Matrix::from_fn(n_draws, x.len(), |_, c| x[c])))
        .collect();
    let refs: Vec<(usize, &Matrix)> = reps.iter().map(|(k, m)| (*k, m)).collect();
    let zs = model.draw_conditional(&refs, rng)?;
    let outs: Vec<Matrix> = zs
        .iter()
        .zip(model.decoders())
        .map(|(z, d)| d.decode(z))
        .collect::<std::result::Result<_, _>>()?;
    Ok((0..n_draws)
        .map(|r| GeneratedSample {
            latents: zs.iter().map(|z| z.row(r).to_vec()).collect(),
            outputs: outs.iter().map(|o| o.row(r).to_vec()).collect(),
        })
        .collect())
}
