use crate::diffuser::FeatureGrid;
use crate::error::{ensure, Error, Result};
use crate::metric::ConceptBasis;
use crate::rank1::{EditedProjection, PassMode};
use crate::textenc::EncodedPrompt;
use crate::Matrix;

/// One cross-attention block: queries from image features, keys and values
/// from the (possibly edited) text projections, residual output.
#[derive(Debug, Clone)]
pub struct CrossAttentionLayer {
    pub w_q: Matrix,
    pub w_k: EditedProjection,
    pub w_v: EditedProjection,
    pub w_out: Matrix,
    scale: f64,
}

impl CrossAttentionLayer {
    pub fn new(w_q: Matrix, w_k: EditedProjection, w_v: EditedProjection, w_out: Matrix) -> Result<Self> {
        let d_k = w_q.nrows();
        ensure(w_k.out_dim() == d_k, || format!("key projection emits {}, queries have {d_k}", w_k.out_dim()))?;
        ensure(w_out.ncols() == w_v.out_dim(), || {
            format!("output projection takes {}, values have {}", w_out.ncols(), w_v.out_dim())
        })?;
        ensure(w_out.nrows() == w_q.ncols(), || {
            format!("output projection emits {}, features have {}", w_out.nrows(), w_q.ncols())
        })?;
        ensure(w_k.in_dim() == w_v.in_dim(), || "key and value projections disagree on d_e".into())?;
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_out,
            scale: 1.0 / (d_k as f64).sqrt(),
        })
    }

    pub fn d_k(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.out_dim()
    }

    pub fn d_f(&self) -> usize {
        self.w_q.ncols()
    }

    /// `1/√d_k`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Scaled-dot-product attention of `features` (pixels × d_f) over the
    /// given key/value rows. Returns the residual output and the attention
    /// weights (pixels × tokens).
    pub fn attend(&self, features: &Matrix, keys: &Matrix, values: &Matrix) -> Result<(Matrix, Matrix)> {
        ensure(features.ncols() == self.d_f(), || format!("features have {} channels, layer expects {}", features.ncols(), self.d_f()))?;
        ensure(keys.ncols() == self.d_k() && values.ncols() == self.d_v() && keys.nrows() == values.nrows(), || {
            "key/value sequences do not match the layer".into()
        })?;
        ensure(keys.nrows() > 0, || "attention over an empty token sequence".into())?;
        let q = features * self.w_q.transpose();
        let attn = softmax_rows(&(q * keys.transpose() * self.scale));
        let out = features + (&attn * values) * self.w_out.transpose();
        Ok((out, attn))
    }
}

/// Which forward pass the layer's key/value projections run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Base,
    GatedSingle,
    GatedMulti,
}

/// Per-token attention maps of one layer: `weights[(pixel, token)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub height: usize,
    pub width: usize,
    pub weights: Matrix,
}

impl AttentionMaps {
    pub fn tokens(&self) -> usize {
        self.weights.ncols()
    }

    /// Spatial map of one token, pixel-major.
    pub fn map(&self, token: usize) -> Vec<f64> {
        self.weights.column(token).iter().copied().collect()
    }
}

/// Full cross-attention over a prompt: keys and values come from the
/// selected pass of the layer's edited projections.
pub fn cross_attention(
    layer: &CrossAttentionLayer,
    grid: &FeatureGrid,
    ep: &EncodedPrompt,
    mode: AttentionMode,
    basis: Option<&ConceptBasis>,
) -> Result<(FeatureGrid, AttentionMaps)> {
    let pass = match (mode, basis) {
        (AttentionMode::Base, _) => PassMode::Base,
        (AttentionMode::GatedSingle, None) => PassMode::Gated(None),
        (AttentionMode::GatedSingle, Some(_)) => {
            return Err(Error::Contract("single-concept attention takes no basis".into()))
        }
        (AttentionMode::GatedMulti, Some(b)) => PassMode::Gated(Some(b)),
        (AttentionMode::GatedMulti, None) => {
            return Err(Error::Contract("multi-concept attention requires a basis".into()))
        }
    };
    let keys = layer.w_k.prepare(pass)?.forward_rows(&ep.encodings);
    let values = layer.w_v.prepare(pass)?.forward_rows(&ep.encodings);
    let (out, attn) = layer.attend(grid.data(), &keys, &values)?;
    Ok((
        FeatureGrid::new(grid.height(), grid.width(), out)?,
        AttentionMaps {
            height: grid.height(),
            width: grid.width(),
            weights: attn,
        },
    ))
}

pub(crate) fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.apply(|x| *x = (*x - max).exp());
        let total: f64 = row.iter().sum();
        row /= total;
    }
    out
}

/// Normalized entropy `H(p)/log(H·W)` of a nonnegative spatial map.
pub fn attention_spread(map: &[f64]) -> Result<f64> {
    ensure(!map.is_empty(), || "empty attention map".into())?;
    ensure(map.iter().all(|&v| v >= 0.0 && v.is_finite()), || "attention map must be finite and nonnegative".into())?;
    let total: f64 = map.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("attention map sums to zero".into()));
    }
    if map.len() == 1 {
        return Ok(0.0);
    }
    let entropy: f64 = map
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy / (map.len() as f64).ln())
}
