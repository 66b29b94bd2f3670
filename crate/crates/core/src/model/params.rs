//! Model parameters, initialization, and flat-vector views.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::derive_seed;

use super::math::Mat;
use super::ModelError;

/// Architecture shape. Kept small by default; the verification paths
/// assume everything fits comfortably in 64-bit on one machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_pos: usize,
}

impl ModelDims {
    pub fn new(vocab: usize, d_model: usize, layers: usize, heads: usize, max_pos: usize) -> Self {
        Self { vocab, d_model, layers, heads, max_pos }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::BadDims(
                "d_model must be a positive multiple of heads",
            ));
        }
        if self.vocab == 0 || self.max_pos == 0 || self.layers == 0 {
            return Err(ModelError::BadDims("all dims must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w_up: Mat,
    pub w_down: Mat,
}

/// All trainable weights of the pre-norm decoder.
///
/// `revision` counts in-place optimizer updates; a forward cache remembers
/// the revision it was computed against so a gradient can refuse a stale
/// pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub layers: Vec<LayerParams>,
    pub ln_f_gamma: Vec<f64>,
    pub ln_f_beta: Vec<f64>,
    pub w_out: Mat,
    pub b_out: Vec<f64>,
    pub revision: u64,
}

impl ModelParams {
    /// Seeded Gaussian init (std 0.02); residual output projections start
    /// at zero so every block begins as the identity.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1217));
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut randn = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Mat::from_vec(rows, cols, data)
        };
        let d = dims.d_model;
        let layers = (0..dims.layers)
            .map(|_| LayerParams {
                ln1_gamma: vec![1.0; d],
                ln1_beta: vec![0.0; d],
                wq: randn(d, d),
                wk: randn(d, d),
                wv: randn(d, d),
                wo: Mat::zeros(d, d),
                ln2_gamma: vec![1.0; d],
                ln2_beta: vec![0.0; d],
                w_up: randn(d, 4 * d),
                w_down: Mat::zeros(4 * d, d),
            })
            .collect();
        Ok(Self {
            tok_emb: randn(dims.vocab, d),
            pos_emb: randn(dims.max_pos, d),
            layers,
            ln_f_gamma: vec![1.0; d],
            ln_f_beta: vec![0.0; d],
            w_out: randn(d, dims.vocab),
            b_out: vec![0.0; dims.vocab],
            dims,
            revision: 0,
        })
    }

    /// All-zero weights; useful for crafted fixtures (uniform logits).
    pub fn zeros(dims: ModelDims) -> Result<Self, ModelError> {
        dims.validate()?;
        let d = dims.d_model;
        let layers = (0..dims.layers)
            .map(|_| LayerParams {
                ln1_gamma: vec![1.0; d],
                ln1_beta: vec![0.0; d],
                wq: Mat::zeros(d, d),
                wk: Mat::zeros(d, d),
                wv: Mat::zeros(d, d),
                wo: Mat::zeros(d, d),
                ln2_gamma: vec![1.0; d],
                ln2_beta: vec![0.0; d],
                w_up: Mat::zeros(d, 4 * d),
                w_down: Mat::zeros(4 * d, d),
            })
            .collect();
        Ok(Self {
            tok_emb: Mat::zeros(dims.vocab, d),
            pos_emb: Mat::zeros(dims.max_pos, d),
            layers,
            ln_f_gamma: vec![1.0; d],
            ln_f_beta: vec![0.0; d],
            w_out: Mat::zeros(d, dims.vocab),
            b_out: vec![0.0; dims.vocab],
            dims,
            revision: 0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.to_flat_vec().len()
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat_vec().iter().all(|v| v.is_finite())
    }

    /// Flattens every array in the documented order: tok_emb, pos_emb,
    /// then per layer (ln1_gamma, ln1_beta, wq, wk, wv, wo, ln2_gamma,
    /// ln2_beta, w_up, w_down), then ln_f_gamma, ln_f_beta, w_out, b_out.
    /// The checkpoint format and the finite-difference checker both rely
    /// on this order.
    pub fn to_flat_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(|arr| out.extend_from_slice(arr));
        out
    }

    pub fn from_flat_vec(&self, flat: &[f64]) -> Result<ModelParams, ModelError> {
        let mut clone = self.clone();
        let mut offset = 0;
        clone.visit_mut(|arr| {
            arr.copy_from_slice(&flat[offset..offset + arr.len()]);
            offset += arr.len();
        });
        if offset != flat.len() {
            return Err(ModelError::BadDims("flat vector length mismatch"));
        }
        Ok(clone)
    }

    pub(crate) fn visit<'a>(&'a self, mut f: impl FnMut(&'a [f64])) {
        f(&self.tok_emb.data);
        f(&self.pos_emb.data);
        for l in &self.layers {
            f(&l.ln1_gamma);
            f(&l.ln1_beta);
            f(&l.wq.data);
            f(&l.wk.data);
            f(&l.wv.data);
            f(&l.wo.data);
            f(&l.ln2_gamma);
            f(&l.ln2_beta);
            f(&l.w_up.data);
            f(&l.w_down.data);
        }
        f(&self.ln_f_gamma);
        f(&self.ln_f_beta);
        f(&self.w_out.data);
        f(&self.b_out);
    }

    pub(crate) fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(&mut self.tok_emb.data);
        f(&mut self.pos_emb.data);
        for l in &mut self.layers {
            f(&mut l.ln1_gamma);
            f(&mut l.ln1_beta);
            f(&mut l.wq.data);
            f(&mut l.wk.data);
            f(&mut l.wv.data);
            f(&mut l.wo.data);
            f(&mut l.ln2_gamma);
            f(&mut l.ln2_beta);
            f(&mut l.w_up.data);
            f(&mut l.w_down.data);
        }
        f(&mut self.ln_f_gamma);
        f(&mut self.ln_f_beta);
        f(&mut self.w_out.data);
        f(&mut self.b_out);
    }
}

/// Gradient (or any parameter-shaped accumulator) mirroring ModelParams.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub ModelParams);

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let mut p = ModelParams::zeros(params.dims).expect("dims already validated");
        // ModelParams::zeros leaves the norm gains at 1; a gradient
        // accumulator must start at exactly zero everywhere
        p.visit_mut(|arr| arr.fill(0.0));
        Self(p)
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        let mut rhs = Vec::new();
        other.0.visit(|arr| rhs.push(arr));
        let mut i = 0;
        self.0.visit_mut(|arr| {
            for (a, b) in arr.iter_mut().zip(rhs[i]) {
                *a += b;
            }
            i += 1;
        });
    }

    pub fn scale(&mut self, s: f64) {
        self.0.visit_mut(|arr| {
            for v in arr {
                *v *= s;
            }
        });
    }

    pub fn to_flat_vec(&self) -> Vec<f64> {
        self.0.to_flat_vec()
    }
}
