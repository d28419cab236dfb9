//! The bilinear QE network: parameters, deterministic forward pass, and
//! exact analytic gradients.
//!
//! Each input embedding (image, object labels, caption sentence) goes
//! through its own dense projection with a leaky-ReLU activation. Every
//! pair of projected modalities is combined by a bilinear layer
//! `b(x, y; B) = xᵀBy`, with a constant 1 appended to both sides so the
//! bilinear matrix also carries linear and bias terms. The scalar outputs
//! (one per label-image pair, one per label-sentence pair, one for
//! image-sentence) are concatenated and fed through a dense head with a
//! sigmoid, yielding a quality score in (0, 1).
//!
//! Parameters live in one flat `f64` buffer addressed through a block
//! layout, which keeps the optimizer, gradient checking, and checkpoint
//! serialization independent of the network's structure.

mod backward;
mod forward;

pub use backward::backward;
pub use forward::{forward, forward_logit, ForwardMode};
pub(crate) use forward::{run_forward, sample_masks, DropoutMasks, ForwardTrace};

use std::ops::Range;

use ndarray::{ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{IMAGE_DIM, LABEL_DIM, SENTENCE_DIM};

/// Architecture hyperparameters. `proj_dim` is the shared width of the
/// three dense projections; `num_labels` is the label budget K (samples
/// with fewer labels contribute exact zeros at the missing positions).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub proj_dim: usize,
    pub num_labels: usize,
    pub leaky_slope: f64,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            proj_dim: 64,
            num_labels: 16,
            leaky_slope: 0.01,
            dropout_rate: 0.2,
        }
    }
}

impl ModelConfig {
    /// Width of the concatenated bilinear output: K label-image terms,
    /// K label-sentence terms, one image-sentence term.
    pub fn z_len(&self) -> usize {
        2 * self.num_labels + 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.proj_dim == 0 {
            return Err(ModelError::BadConfig("proj_dim must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::BadConfig(format!(
                "dropout_rate {} must be in [0, 1)",
                self.dropout_rate
            )));
        }
        if !self.leaky_slope.is_finite() {
            return Err(ModelError::BadConfig("leaky_slope must be finite".into()));
        }
        Ok(())
    }
}

/// The trainable parameter blocks, in buffer order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    /// Image projection weights, P x 64.
    WImg,
    /// Image projection bias, P.
    BImg,
    /// Label projection weights, P x 256 (shared across label slots).
    WLbl,
    /// Label projection bias, P.
    BLbl,
    /// Sentence projection weights, P x 512.
    WSen,
    /// Sentence projection bias, P.
    BSen,
    /// Label-image bilinear matrix, (P+1) x (P+1).
    BilOi,
    /// Label-sentence bilinear matrix, (P+1) x (P+1).
    BilOs,
    /// Image-sentence bilinear matrix, (P+1) x (P+1).
    BilIs,
    /// Output head weights, 2K+1.
    WOut,
    /// Output head bias, scalar.
    BOut,
}

impl ParamBlock {
    pub const ALL: [Self; 11] = [
        Self::WImg,
        Self::BImg,
        Self::WLbl,
        Self::BLbl,
        Self::WSen,
        Self::BSen,
        Self::BilOi,
        Self::BilOs,
        Self::BilIs,
        Self::WOut,
        Self::BOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::WImg => "w_img",
            Self::BImg => "b_img",
            Self::WLbl => "w_lbl",
            Self::BLbl => "b_lbl",
            Self::WSen => "w_sen",
            Self::BSen => "b_sen",
            Self::BilOi => "bil_oi",
            Self::BilOs => "bil_os",
            Self::BilIs => "bil_is",
            Self::WOut => "w_out",
            Self::BOut => "b_out",
        }
    }
}

/// All trainable weights in one flat buffer.
///
/// [`Gradients`] shares this representation: a gradient is shape-congruent
/// with the parameters it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    proj_dim: usize,
    num_labels: usize,
    data: Vec<f64>,
}

/// Entrywise partial derivatives of a scalar loss, one per parameter.
pub type Gradients = ModelParams;

impl ModelParams {
    /// All-zero parameters for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut params = Self {
            proj_dim: config.proj_dim,
            num_labels: config.num_labels,
            data: Vec::new(),
        };
        params.data = vec![0.0; params.total_len()];
        params
    }

    /// Seeded random initialization: each weight matrix is uniform in
    /// ±1/sqrt(fan_in), biases start at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut params = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in ParamBlock::ALL {
            let scale = params.init_scale(block);
            if scale == 0.0 {
                continue;
            }
            let range = params.block_range(block);
            for value in &mut params.data[range] {
                *value = (rng.random::<f64>() * 2.0 - 1.0) * scale;
            }
        }
        params
    }

    /// Rebuild from a raw buffer, e.g. a checkpoint parameter block.
    pub fn from_raw(config: &ModelConfig, data: Vec<f64>) -> Result<Self, ModelError> {
        let expected = Self::zeros(config).total_len();
        if data.len() != expected {
            return Err(ModelError::ParamLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            proj_dim: config.proj_dim,
            num_labels: config.num_labels,
            data,
        })
    }

    /// Initialization half-width for a block (0 for biases).
    pub fn init_scale(&self, block: ParamBlock) -> f64 {
        let fan_in = match block {
            ParamBlock::WImg => IMAGE_DIM,
            ParamBlock::WLbl => LABEL_DIM,
            ParamBlock::WSen => SENTENCE_DIM,
            ParamBlock::BilOi | ParamBlock::BilOs | ParamBlock::BilIs => self.proj_dim + 1,
            ParamBlock::WOut => 2 * self.num_labels + 1,
            ParamBlock::BImg | ParamBlock::BLbl | ParamBlock::BSen | ParamBlock::BOut => {
                return 0.0
            }
        };
        1.0 / (fan_in as f64).sqrt()
    }

    /// (rows, cols) of a block; vectors report cols = 1.
    pub fn block_shape(&self, block: ParamBlock) -> (usize, usize) {
        let p = self.proj_dim;
        let k = self.num_labels;
        match block {
            ParamBlock::WImg => (p, IMAGE_DIM),
            ParamBlock::BImg => (p, 1),
            ParamBlock::WLbl => (p, LABEL_DIM),
            ParamBlock::BLbl => (p, 1),
            ParamBlock::WSen => (p, SENTENCE_DIM),
            ParamBlock::BSen => (p, 1),
            ParamBlock::BilOi | ParamBlock::BilOs | ParamBlock::BilIs => (p + 1, p + 1),
            ParamBlock::WOut => (2 * k + 1, 1),
            ParamBlock::BOut => (1, 1),
        }
    }

    /// Index range of a block inside the flat buffer.
    pub fn block_range(&self, block: ParamBlock) -> Range<usize> {
        let mut start = 0;
        for candidate in ParamBlock::ALL {
            let (rows, cols) = self.block_shape(candidate);
            let len = rows * cols;
            if candidate == block {
                return start..start + len;
            }
            start += len;
        }
        unreachable!("ParamBlock::ALL covers every block")
    }

    fn total_len(&self) -> usize {
        ParamBlock::ALL
            .iter()
            .map(|b| {
                let (rows, cols) = self.block_shape(*b);
                rows * cols
            })
            .sum()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when the buffer was laid out for this config's P and K.
    pub fn matches_config(&self, config: &ModelConfig) -> bool {
        self.proj_dim == config.proj_dim && self.num_labels == config.num_labels
    }

    pub fn proj_dim(&self) -> usize {
        self.proj_dim
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn block(&self, block: ParamBlock) -> &[f64] {
        &self.data[self.block_range(block)]
    }

    pub fn block_mut(&mut self, block: ParamBlock) -> &mut [f64] {
        let range = self.block_range(block);
        &mut self.data[range]
    }

    /// A weight block as a 2-D view.
    pub fn matrix(&self, block: ParamBlock) -> ArrayView2<'_, f64> {
        let (rows, cols) = self.block_shape(block);
        ArrayView2::from_shape((rows, cols), self.block(block))
            .expect("block layout matches its shape")
    }

    /// A bias/vector block as a 1-D view.
    pub fn vector(&self, block: ParamBlock) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.block(block))
    }

    pub fn b_out(&self) -> f64 {
        self.block(ParamBlock::BOut)[0]
    }
}

/// xᵀ B y: the scalar bilinear form of two vectors through a matrix.
pub fn bilinear(x: ArrayView1<f64>, y: ArrayView1<f64>, b: ArrayView2<f64>) -> Result<f64, ModelError> {
    if b.nrows() != x.len() || b.ncols() != y.len() {
        return Err(ModelError::BilinearShape {
            rows: b.nrows(),
            cols: b.ncols(),
            x_len: x.len(),
            y_len: y.len(),
        });
    }
    Ok(x.dot(&b.dot(&y)))
}

/// Dense layer with leaky-ReLU: elementwise max(h, slope*h) of h = Wx + b.
pub fn dense_forward(
    x: ArrayView1<f64>,
    w: ArrayView2<f64>,
    b: ArrayView1<f64>,
    slope: f64,
) -> Result<Vec<f64>, ModelError> {
    if w.ncols() != x.len() || w.nrows() != b.len() {
        return Err(ModelError::DenseShape {
            rows: w.nrows(),
            cols: w.ncols(),
            x_len: x.len(),
            b_len: b.len(),
        });
    }
    let h = w.dot(&x) + b;
    Ok(h.iter().map(|&v| leaky_relu(v, slope)).collect())
}

#[inline]
pub(crate) fn leaky_relu(h: f64, slope: f64) -> f64 {
    if h >= 0.0 {
        h
    } else {
        slope * h
    }
}

#[inline]
pub(crate) fn leaky_relu_grad(h: f64, slope: f64) -> f64 {
    if h >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// Numerically stable sigmoid, clamped into the open interval (0, 1).
#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("bilinear matrix is {rows}x{cols} but inputs have lengths {x_len} and {y_len}")]
    BilinearShape {
        rows: usize,
        cols: usize,
        x_len: usize,
        y_len: usize,
    },
    #[error("dense weights are {rows}x{cols} but x has length {x_len} and b has length {b_len}")]
    DenseShape {
        rows: usize,
        cols: usize,
        x_len: usize,
        b_len: usize,
    },
    #[error("params hold {got} values but the config needs {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("params were built for P={params_p}, K={params_k} but the config has P={cfg_p}, K={cfg_k}")]
    ConfigMismatch {
        params_p: usize,
        params_k: usize,
        cfg_p: usize,
        cfg_k: usize,
    },
    #[error("non-finite {stage} while scoring sample {sample_id}")]
    NonFiniteIntermediate {
        sample_id: String,
        stage: &'static str,
    },
    #[error("sample {0} has no target")]
    MissingTarget(String),
    #[error("batch is empty")]
    EmptyBatch,
}

pub(crate) fn ensure_config_match(
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(), ModelError> {
    if params.matches_config(config) {
        Ok(())
    } else {
        Err(ModelError::ConfigMismatch {
            params_p: params.proj_dim,
            params_k: params.num_labels,
            cfg_p: config.proj_dim,
            cfg_k: config.num_labels,
        })
    }
}
