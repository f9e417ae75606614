//! Fully-connected encoders and decoders.
//!
//! Every network is an [`Mlp`] whose hidden layers share one activation and
//! whose last layer is linear. Parameters live in plain matrices; to train,
//! a network is bound to a [`Tape`] as leaves, run forward on the tape, and
//! updated from the resulting gradients.
//!
//! # Checkpoint layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic    8 bytes  "COVAECKP"
//! version  u32      1
//! count    u32      number of parameters
//! count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rows u32, cols u32
//!   rows*cols f64, row-major
//! ```

use std::io::{self, Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softplus, tril_index, tril_len, AutodiffError, NodeId, Tape};
use crate::gaussian::{BlockGaussian, DiagonalGaussian, GaussianError, LatentLayout, LN_2PI};
use crate::linalg::{CholeskyFactor, Matrix};

/// Floor applied after softplus on the Cholesky diagonal.
pub const DIAG_FLOOR: f64 = 1e-4;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"COVAECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetsError {
    #[error("shape mismatch: expected {expected} columns, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("missing modality {0}")]
    MissingModality(usize),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

pub type Result<T> = std::result::Result<T, NetsError>;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("parameter name is not valid UTF-8")]
    BadName,
    #[error("parameter {0} missing from checkpoint")]
    MissingParameter(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Layer widths from input to output. Two entries give a purely linear map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        let spec = Self {
            widths,
            activation,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(NetsError::InvalidSpec("need input and output widths".into()));
        }
        if self.widths.contains(&0) {
            return Err(NetsError::InvalidSpec(format!("zero width in {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in x out`
    pub weight: Matrix,
    /// `1 x out`
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

/// Tape handles for one bound [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl MlpNodes {
    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

impl Mlp {
    /// Uniform fan-in initialisation with weight std `1/√fan_in`; zero biases.
    pub fn init(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let bound = (3.0 / w[0] as f64).sqrt();
                Linear {
                    weight: Matrix::from_fn(w[0], w[1], |_, _| rng.random_range(-bound..bound)),
                    bias: Matrix::zeros(1, w[1]),
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn zero_last_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.weight = Matrix::zeros(last.weight.rows(), last.weight.cols());
        last.bias = Matrix::zeros(1, last.bias.cols());
    }

    fn activate(&self, x: f64) -> f64 {
        match self.spec.activation {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Row-wise forward pass, `n x in -> n x out`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(NetsError::ShapeMismatch {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = h.matmul(&layer.weight).expect("widths chain");
            for r in 0..next.rows() {
                for (v, b) in next.row_mut(r).iter_mut().zip(layer.bias.as_slice()) {
                    *v += b;
                }
            }
            if i < last {
                next = next.map(|v| self.activate(v));
            }
            h = next;
        }
        Ok(h)
    }

    /// Registers parameters as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> MlpNodes {
        MlpNodes {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    /// Registers parameters as constants.
    pub fn bind_frozen(&self, tape: &mut Tape) -> MlpNodes {
        MlpNodes {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
                .collect(),
        }
    }

    pub fn forward_tape(&self, tape: &mut Tape, nodes: &MlpNodes, x: NodeId) -> Result<NodeId> {
        let cols = tape.value(x).cols();
        if cols != self.input_dim() {
            return Err(NetsError::ShapeMismatch {
                expected: self.input_dim(),
                got: cols,
            });
        }
        let mut h = x;
        let last = nodes.layers.len() - 1;
        for (i, &(w, b)) in nodes.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if i < last {
                h = match self.spec.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        Ok(h)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("{prefix}.{i}.weight"), &l.weight), (format!("{prefix}.{i}.bias"), &l.bias)])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Modality encoder emitting a diagonal Gaussian: outputs are `[mean | log_var]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagEncoder {
    pub net: Mlp,
    pub latent_dim: usize,
}

impl DiagEncoder {
    /// `hidden` lists hidden widths between the input and the `2·latent_dim` head.
    pub fn new(input_dim: usize, hidden: &[usize], latent_dim: usize, activation: Activation, seed: u64) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * latent_dim);
        Ok(Self {
            net: Mlp::init(MlpSpec::new(widths, activation, seed)?)?,
            latent_dim,
        })
    }

    /// `(mean, log_var)`, each `n x latent_dim`.
    pub fn encode(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let out = self.net.forward(x)?;
        let d = self.latent_dim;
        Ok((out.slice_cols(0, d), out.slice_cols(d, 2 * d)))
    }

    pub fn encode_one(&self, x: &[f64]) -> Result<DiagonalGaussian> {
        let (m, lv) = self.encode(&Matrix::row_vector(x))?;
        Ok(DiagonalGaussian::new(m.into_vec(), lv.into_vec())?)
    }

    pub fn encode_tape(&self, tape: &mut Tape, nodes: &MlpNodes, x: NodeId) -> Result<(NodeId, NodeId)> {
        let out = self.net.forward_tape(tape, nodes, x)?;
        let d = self.latent_dim;
        Ok((tape.slice_cols(out, 0, d)?, tape.slice_cols(out, d, 2 * d)?))
    }
}

/// Joint encoder over concatenated modalities with a full Cholesky head.
///
/// Outputs are `[mean (D) | packed L (D(D+1)/2)]`; diagonal entries of `L`
/// pass through `max(softplus(·), DIAG_FLOOR)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEncoder {
    pub net: Mlp,
    pub latent_dim: usize,
}

impl JointEncoder {
    pub fn new(input_dim: usize, hidden: &[usize], latent_dim: usize, activation: Activation, seed: u64) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(latent_dim + tril_len(latent_dim));
        Ok(Self {
            net: Mlp::init(MlpSpec::new(widths, activation, seed)?)?,
            latent_dim,
        })
    }

    fn is_diag(&self) -> Vec<bool> {
        let d = self.latent_dim;
        let mut flags = vec![false; tril_len(d)];
        for i in 0..d {
            flags[tril_index(i, i)] = true;
        }
        flags
    }

    /// `(mean n x D, packed L n x T)`.
    pub fn encode(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let out = self.net.forward(x)?;
        let d = self.latent_dim;
        let mean = out.slice_cols(0, d);
        let mut packed = out.slice_cols(d, d + tril_len(d));
        let flags = self.is_diag();
        for r in 0..packed.rows() {
            for (v, &diag) in packed.row_mut(r).iter_mut().zip(&flags) {
                if diag {
                    *v = softplus(*v).max(DIAG_FLOOR);
                }
            }
        }
        Ok((mean, packed))
    }

    pub fn encode_one(&self, x: &[f64], layout: &LatentLayout) -> Result<BlockGaussian> {
        let (m, p) = self.encode(&Matrix::row_vector(x))?;
        let l = unpack_tril(p.row(0), self.latent_dim);
        let chol = CholeskyFactor::from_lower(l).map_err(GaussianError::from)?;
        Ok(BlockGaussian::new(layout.clone(), m.into_vec(), chol)?)
    }

    pub fn encode_tape(&self, tape: &mut Tape, nodes: &MlpNodes, x: NodeId) -> Result<(NodeId, NodeId)> {
        let out = self.net.forward_tape(tape, nodes, x)?;
        let d = self.latent_dim;
        let t = tril_len(d);
        let mean = tape.slice_cols(out, 0, d)?;
        let raw = tape.slice_cols(out, d, d + t)?;
        let sp = tape.softplus(raw);
        let sp = tape.clamp_min(sp, DIAG_FLOOR);
        let both = tape.concat_cols(&[raw, sp])?;
        let pick = self
            .is_diag()
            .iter()
            .enumerate()
            .map(|(p, &diag)| if diag { t + p } else { p })
            .collect();
        let packed = tape.select_cols(both, pick)?;
        Ok((mean, packed))
    }
}

/// Row-major packing of the lower triangle.
pub fn pack_tril(l: &Matrix) -> Vec<f64> {
    let d = l.rows();
    (0..d).flat_map(|r| (0..=r).map(move |c| (r, c))).map(|(r, c)| l[(r, c)]).collect()
}

pub fn unpack_tril(packed: &[f64], dim: usize) -> Matrix {
    Matrix::from_fn(dim, dim, |r, c| if c <= r { packed[tril_index(r, c)] } else { 0.0 })
}

/// Decoder output: Gaussian mean with fixed observation std.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOut {
    pub mean: Vec<f64>,
    pub sigma_obs: f64,
}

impl DecoderOut {
    pub fn log_lik(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.mean.len() {
            return Err(NetsError::ShapeMismatch {
                expected: self.mean.len(),
                got: x.len(),
            });
        }
        let s2 = self.sigma_obs * self.sigma_obs;
        let c = LN_2PI + s2.ln();
        Ok(self
            .mean
            .iter()
            .zip(x)
            .map(|(m, xi)| -0.5 * ((xi - m).powi(2) / s2 + c))
            .sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub net: Mlp,
    pub sigma_obs: f64,
}

impl Decoder {
    pub fn new(
        latent_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
        sigma_obs: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(sigma_obs > 0.0 && sigma_obs.is_finite()) {
            return Err(NetsError::InvalidSpec(format!("sigma_obs must be positive, got {sigma_obs}")));
        }
        let mut widths = vec![latent_dim];
        widths.extend_from_slice(hidden);
        widths.push(output_dim);
        Ok(Self {
            net: Mlp::init(MlpSpec::new(widths, activation, seed)?)?,
            sigma_obs,
        })
    }

    pub fn decode(&self, z: &Matrix) -> Result<Matrix> {
        self.net.forward(z)
    }

    pub fn decode_one(&self, z: &[f64]) -> Result<DecoderOut> {
        Ok(DecoderOut {
            mean: self.decode(&Matrix::row_vector(z))?.into_vec(),
            sigma_obs: self.sigma_obs,
        })
    }

    /// Row-wise Gaussian log likelihood of `x` under decoded means.
    pub fn log_lik_rows(&self, mean: &Matrix, x: &Matrix) -> Result<Vec<f64>> {
        if mean.shape() != x.shape() {
            return Err(NetsError::ShapeMismatch {
                expected: mean.cols(),
                got: x.cols(),
            });
        }
        Ok((0..x.rows())
            .map(|r| {
                DecoderOut {
                    mean: mean.row(r).to_vec(),
                    sigma_obs: self.sigma_obs,
                }
                .log_lik(x.row(r))
                .expect("shapes checked")
            })
            .collect())
    }

    /// Row-wise log likelihood of constant data `x` given decoded means, `n x 1`.
    pub fn log_lik_tape(&self, tape: &mut Tape, mean: NodeId, x: &Arc<Matrix>) -> Result<NodeId> {
        let (n, p) = tape.value(mean).shape();
        if (n, p) != x.shape() {
            return Err(NetsError::ShapeMismatch {
                expected: p,
                got: x.cols(),
            });
        }
        let xc = tape.constant((**x).clone());
        let r = tape.sub(xc, mean)?;
        let sq = tape.square(r);
        let s = tape.sum_cols(sq);
        let s2 = self.sigma_obs * self.sigma_obs;
        let s = tape.scale(s, -0.5 / s2);
        Ok(tape.add_scalar(s, -0.5 * p as f64 * (LN_2PI + s2.ln())))
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &[(String, &Matrix)]) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, m) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> std::result::Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
        _ => CheckpointError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> std::result::Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> std::result::Result<Vec<(String, Matrix)>, CheckpointError> {
    let mut magic = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        read_exact_or_truncated(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::BadName)?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut payload = vec![0u8; rows * cols * 8];
        read_exact_or_truncated(&mut r, &mut payload)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Matrix::from_vec(rows, cols, data).expect("length matches")));
    }
    Ok(out)
}

/// Copies named checkpoint entries into `targets`, checking shapes.
pub fn restore_params(
    stored: &[(String, Matrix)],
    targets: Vec<(String, &mut Matrix)>,
) -> std::result::Result<(), CheckpointError> {
    for (name, target) in targets {
        let (_, m) = stored
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CheckpointError::MissingParameter(name.clone()))?;
        if m.shape() != target.shape() {
            return Err(CheckpointError::ParameterShape {
                name,
                found: m.shape(),
                expected: target.shape(),
            });
        }
        *target = m.clone();
    }
    Ok(())
}
