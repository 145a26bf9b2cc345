//! Per-feature non-linear embedding and the encoder-only transformer.
//!
//! Every token of kind `x` with standardized magnitude `M` is embedded as
//! `GELU(w_x * M) + b_x`. The request token has no magnitude, so it embeds
//! to `b_x`; padding embeds to zeros. There is no positional encoding: the
//! encoder sees a set, and the hidden state at position 0 (the request) is
//! the conditioning vector for the diffusion head.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::{FeatureId, TokenizedRow};
use crate::error::{Error, Result};
use crate::numerics::{gelu, Graph, Var, MASK_FILL};
use crate::params::{normal_tensor, Binder, Linear, Norm, ParamStore, ParamValues};

/// `w` and `w_b` tables, one row per feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingTable {
    pub weight: crate::params::ParamId,
    pub bias: crate::params::ParamId,
    pub n_features: usize,
    pub width: usize,
}

impl EmbeddingTable {
    pub fn declare<R: Rng + ?Sized>(
        store: &mut ParamStore,
        n_features: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.push("embedding.weight", normal_tensor(alloc::vec![n_features, width], 1.0, rng))?,
            bias: store.push("embedding.bias", normal_tensor(alloc::vec![n_features, width], 1.0, rng))?,
            n_features,
            width,
        })
    }

    fn row<'v>(&self, values: &'v ParamValues, which: crate::params::ParamId, f: FeatureId) -> Result<&'v [f64]> {
        if f.0 >= self.n_features {
            return Err(Error::UnknownFeature(format!("#{}", f.0)));
        }
        Ok(&values.get(which)[f.0 * self.width..(f.0 + 1) * self.width])
    }

    /// `GELU(w_x * M) + w_b`.
    pub fn embed_token(&self, values: &ParamValues, feature: FeatureId, magnitude: f64) -> Result<Vec<f64>> {
        let w = self.row(values, self.weight, feature)?;
        let b = self.row(values, self.bias, feature)?;
        Ok(w.iter().zip(b).map(|(w, b)| gelu(w * magnitude) + b).collect())
    }

    /// Request tokens carry only the feature identity: `w_b`.
    pub fn embed_request(&self, values: &ParamValues, feature: FeatureId) -> Result<Vec<f64>> {
        Ok(self.row(values, self.bias, feature)?.to_vec())
    }

    pub fn embed_padding(&self) -> Vec<f64> {
        alloc::vec![0.0; self.width]
    }

    /// Embeds a whole sequence onto the graph as an `[L, D]` matrix.
    pub fn forward<'p>(&self, g: &mut Graph<'p>, b: &mut Binder<'p>, seq: &TokenizedRow) -> Result<Var> {
        let ids: Vec<Option<usize>> = seq
            .tokens
            .iter()
            .map(|t| match t {
                Some(f) if f.0 >= self.n_features => Err(Error::UnknownFeature(format!("#{}", f.0))),
                Some(f) => Ok(Some(f.0)),
                None => Ok(None),
            })
            .collect::<Result<_>>()?;
        let mags: Vec<f64> = seq
            .tokens
            .iter()
            .zip(&seq.magnitudes)
            .enumerate()
            .map(|(pos, (t, &m))| if pos == 0 || t.is_none() { 0.0 } else { m })
            .collect();
        let w = b.get(g, self.weight)?;
        let bias = b.get(g, self.bias)?;
        let w_rows = g.gather_rows(w, &ids)?;
        let b_rows = g.gather_rows(bias, &ids)?;
        let m = g.constant(&[ids.len(), 1], mags)?;
        let scaled = g.mul(w_rows, m)?;
        let act = g.gelu(scaled)?;
        g.add(act, b_rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ff_norm: Norm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// Pre-norm transformer blocks plus the final normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Option<Norm>,
    pub heads: usize,
    pub width: usize,
}

impl EncoderParams {
    pub fn declare<R: Rng + ?Sized>(
        store: &mut ParamStore,
        width: usize,
        heads: usize,
        n_layers: usize,
        ff_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {width} is not divisible by {heads} heads"
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = format!("encoder.layer{l}");
            layers.push(EncoderLayer {
                attn_norm: Norm::declare(store, &format!("{p}.attn_norm"), width)?,
                query: Linear::declare(store, &format!("{p}.attn.query"), width, width, rng)?,
                key: Linear::declare(store, &format!("{p}.attn.key"), width, width, rng)?,
                value: Linear::declare(store, &format!("{p}.attn.value"), width, width, rng)?,
                output: Linear::declare(store, &format!("{p}.attn.output"), width, width, rng)?,
                ff_norm: Norm::declare(store, &format!("{p}.ff_norm"), width)?,
                ff_in: Linear::declare(store, &format!("{p}.ff.in"), width, ff_width, rng)?,
                ff_out: Linear::declare(store, &format!("{p}.ff.out"), ff_width, width, rng)?,
            });
        }
        let final_norm = if n_layers > 0 {
            Some(Norm::declare(store, "encoder.final_norm", width)?)
        } else {
            None
        };
        Ok(Self {
            layers,
            final_norm,
            heads,
            width,
        })
    }

    /// Runs the blocks on `[L, D]` embeddings and returns the `[1, D]`
    /// hidden state of the request token. The last block only evaluates the
    /// request row; the other rows are never read afterwards.
    pub fn forward<'p>(&self, g: &mut Graph<'p>, b: &mut Binder<'p>, x: Var, mask: &[bool]) -> Result<Var> {
        if !mask.first().copied().unwrap_or(false) {
            return Err(Error::Contract("request position must be unmasked".into()));
        }
        let padding: Vec<bool> = mask.iter().map(|m| !m).collect();
        let mut x = x;
        let n_layers = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            x = self.block(g, b, layer, x, &padding, l + 1 == n_layers)?;
        }
        match &self.final_norm {
            Some(norm) => norm.forward(g, b, x),
            None => g.slice_rows(x, 0..1),
        }
    }

    fn block<'p>(
        &self,
        g: &mut Graph<'p>,
        b: &mut Binder<'p>,
        layer: &EncoderLayer,
        x: Var,
        padding: &[bool],
        request_only: bool,
    ) -> Result<Var> {
        let h = layer.attn_norm.forward(g, b, x)?;
        let (q_in, residual) = if request_only {
            (g.slice_rows(h, 0..1)?, g.slice_rows(x, 0..1)?)
        } else {
            (h, x)
        };
        let q = layer.query.forward(g, b, q_in)?;
        let k = layer.key.forward(g, b, h)?;
        let v = layer.value.forward(g, b, h)?;

        let head_dim = self.width / self.heads;
        let scale = 1.0 / libm::sqrt(head_dim as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let cols = head * head_dim..(head + 1) * head_dim;
            let qh = g.slice_cols(q, cols.clone())?;
            let kh = g.slice_cols(k, cols.clone())?;
            let vh = g.slice_cols(v, cols)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let scores = g.masked_fill(scores, padding, MASK_FILL)?;
            let weights = g.softmax(scores)?;
            outs.push(g.matmul_unordered(weights, vh)?);
        }
        let attn = if outs.len() == 1 { outs[0] } else { g.concat(&outs)? };
        let attn = layer.output.forward(g, b, attn)?;
        let x = g.add(residual, attn)?;

        let h = layer.ff_norm.forward(g, b, x)?;
        let h = layer.ff_in.forward(g, b, h)?;
        let h = g.gelu(h)?;
        let h = layer.ff_out.forward(g, b, h)?;
        g.add(x, h)
    }
}

/// Embeds `seq` and returns the request-token hidden state (`[1, D]`).
pub fn encode<'p>(
    g: &mut Graph<'p>,
    b: &mut Binder<'p>,
    embedding: &EmbeddingTable,
    encoder: &EncoderParams,
    seq: &TokenizedRow,
) -> Result<Var> {
    if seq.tokens.first().copied().flatten().is_none() {
        return Err(Error::Contract("position 0 must hold a request token".into()));
    }
    if seq.mask.len() != seq.tokens.len() || seq.magnitudes.len() != seq.tokens.len() {
        return Err(Error::Contract("token, magnitude, and mask lengths differ".into()));
    }
    let x = embedding.forward(g, b, seq)?;
    encoder.forward(g, b, x, &seq.mask)
}
