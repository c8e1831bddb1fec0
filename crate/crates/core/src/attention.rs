//! Scaled dot-product and multi-head attention, and the shallow transformer
//! stacks built from them.
//!
//! The encoder stack refines a set of support vectors against each other
//! (queries, keys and values are all the support rows). The decoder stack
//! aggregates query vectors against support vectors used as keys and values.
//! Neither stack uses positional encodings, so the encoder is equivariant to
//! the order of its input rows and the decoder is invariant to the order of
//! the supports.
//!
//! Layers are post-norm: `LayerNorm(x + Dropout(sublayer(x)))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{Forward, LayerNorm, Linear};
use crate::tensor::{ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub dropout_rate: f64,
    /// Self-attention over queries inside decoder layers. Off by default so
    /// every query row is aggregated independently.
    pub decoder_self_attention: bool,
    pub layer_norm_eps: f64,
    /// Start value projections as coordinate selectors (head `h` reads
    /// columns `h·d_h..(h+1)·d_h`) and the output projection as the
    /// identity, so attention initially returns a weighted mean of its
    /// inputs. Off gives uniform init for every projection.
    pub identity_value_init: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            model_dim: 256,
            heads: 2,
            layers: 2,
            mlp_hidden: 256,
            dropout_rate: 0.1,
            decoder_self_attention: false,
            layer_norm_eps: 1e-5,
            identity_value_init: true,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: format!("attention.{field}"),
                reason,
            })
        };
        if self.model_dim == 0 || self.heads == 0 || self.layers == 0 || self.mlp_hidden == 0 {
            return bad("model_dim", "all dimensions must be >= 1".into());
        }
        if self.model_dim % self.heads != 0 {
            return bad(
                "heads",
                format!("model_dim {} not divisible by {} heads", self.model_dim, self.heads),
            );
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate", format!("{} outside [0, 1)", self.dropout_rate));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps", "must be > 0".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// `softmax(Q·Kᵀ/√d)·V`, with `d` the width of `Q` and `K`.
pub fn scaled_dot_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return dim_err("attention inputs must be matrices");
    }
    if ks[0] == 0 || vs[0] == 0 {
        return Err(Error::EmptyInput("attention over zero keys".into()));
    }
    if qs[1] != ks[1] || ks[0] != vs[0] {
        return dim_err(format!("attention Q{qs:?} K{ks:?} V{vs:?}"));
    }
    let scale = 1.0 / (qs[1] as f64).sqrt();
    q.matmul_t(k)?.scale(scale)?.softmax_rows()?.matmul(v)
}

/// Projection names of one attention head. Keys carry no bias: a key bias
/// shifts every score of a query equally and cancels in the softmax.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    pub output: Linear,
}

impl MultiHeadParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let (d, dh) = (cfg.model_dim, cfg.head_dim());
        let heads: Vec<HeadParams> = (0..cfg.heads)
            .map(|h| HeadParams {
                query: Linear::init(store, &format!("{prefix}.head{h}.q"), d, dh, true, rng),
                key: Linear::init(store, &format!("{prefix}.head{h}.k"), d, dh, false, rng),
                value: Linear::init(store, &format!("{prefix}.head{h}.v"), d, dh, true, rng),
            })
            .collect();
        let output = Linear::init(store, &format!("{prefix}.out"), d, d, true, rng);
        if cfg.identity_value_init {
            for (h, head) in heads.iter().enumerate() {
                let mut w = Tensor::zeros(&[d, dh]);
                for j in 0..dh {
                    w.values_mut()[(h * dh + j) * dh + j] = 1.0;
                }
                store.insert(head.value.weight.clone(), w);
            }
            store.insert(output.weight.clone(), Tensor::eye(d));
        }
        MultiHeadParams { heads, output }
    }
}

/// Per-head projected attention, heads concatenated, then output-projected.
pub fn multi_head<'t>(
    fwd: &Forward<'t, '_>,
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    params: &MultiHeadParams,
) -> Result<Var<'t>> {
    let heads = params
        .heads
        .iter()
        .map(|h| {
            scaled_dot_attention(
                h.query.forward(fwd, q)?,
                h.key.forward(fwd, k)?,
                h.value.forward(fwd, v)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        Var::concat_cols(&heads)?
    };
    params.output.forward(fwd, joined)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        Mlp {
            hidden: Linear::init(store, &format!("{prefix}.fc1"), cfg.model_dim, cfg.mlp_hidden, true, rng),
            out: Linear::init(store, &format!("{prefix}.fc2"), cfg.mlp_hidden, cfg.model_dim, true, rng),
        }
    }

    pub fn forward<'t>(&self, fwd: &Forward<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        self.out.forward(fwd, self.hidden.forward(fwd, x)?.relu()?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn: MultiHeadParams,
    pub attn_norm: LayerNorm,
    pub mlp: Mlp,
    pub mlp_norm: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: Option<(MultiHeadParams, LayerNorm)>,
    pub cross_attn: MultiHeadParams,
    pub cross_norm: LayerNorm,
    pub mlp: Mlp,
    pub mlp_norm: LayerNorm,
}

/// Encoder stack; refines a set of vectors by self-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    pub cfg: AttentionConfig,
    pub layers: Vec<EncoderLayer>,
}

/// Decoder stack; aggregates queries against a memory set.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStack {
    pub cfg: AttentionConfig,
    pub layers: Vec<DecoderLayer>,
}

impl EncoderStack {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let eps = cfg.layer_norm_eps;
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                EncoderLayer {
                    attn: MultiHeadParams::init(store, &format!("{p}.self_attn"), cfg, rng),
                    attn_norm: LayerNorm::init(store, &format!("{p}.norm1"), cfg.model_dim, eps),
                    mlp: Mlp::init(store, &format!("{p}.mlp"), cfg, rng),
                    mlp_norm: LayerNorm::init(store, &format!("{p}.norm2"), cfg.model_dim, eps),
                }
            })
            .collect();
        Ok(EncoderStack {
            cfg: cfg.clone(),
            layers,
        })
    }

    pub fn forward<'t>(&self, fwd: &mut Forward<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let rate = self.cfg.dropout_rate;
        let mut h = x;
        for layer in &self.layers {
            let a = multi_head(fwd, h, h, h, &layer.attn)?;
            let a = fwd.dropout(a, rate)?;
            h = layer.attn_norm.forward(fwd, h.add(a)?)?;
            let m = layer.mlp.forward(fwd, h)?;
            let m = fwd.dropout(m, rate)?;
            h = layer.mlp_norm.forward(fwd, h.add(m)?)?;
        }
        Ok(h)
    }
}

impl DecoderStack {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let eps = cfg.layer_norm_eps;
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                let self_attn = cfg.decoder_self_attention.then(|| {
                    (
                        MultiHeadParams::init(store, &format!("{p}.self_attn"), cfg, rng),
                        LayerNorm::init(store, &format!("{p}.norm0"), cfg.model_dim, eps),
                    )
                });
                DecoderLayer {
                    self_attn,
                    cross_attn: MultiHeadParams::init(store, &format!("{p}.cross_attn"), cfg, rng),
                    cross_norm: LayerNorm::init(store, &format!("{p}.norm1"), cfg.model_dim, eps),
                    mlp: Mlp::init(store, &format!("{p}.mlp"), cfg, rng),
                    mlp_norm: LayerNorm::init(store, &format!("{p}.norm2"), cfg.model_dim, eps),
                }
            })
            .collect();
        Ok(DecoderStack {
            cfg: cfg.clone(),
            layers,
        })
    }

    pub fn forward<'t>(
        &self,
        fwd: &mut Forward<'t, '_>,
        queries: Var<'t>,
        memory: Var<'t>,
    ) -> Result<Var<'t>> {
        let rate = self.cfg.dropout_rate;
        let mut h = queries;
        for layer in &self.layers {
            if let Some((attn, norm)) = &layer.self_attn {
                let a = multi_head(fwd, h, h, h, attn)?;
                let a = fwd.dropout(a, rate)?;
                h = norm.forward(fwd, h.add(a)?)?;
            }
            let c = multi_head(fwd, h, memory, memory, &layer.cross_attn)?;
            let c = fwd.dropout(c, rate)?;
            h = layer.cross_norm.forward(fwd, h.add(c)?)?;
            let m = layer.mlp.forward(fwd, h)?;
            let m = fwd.dropout(m, rate)?;
            h = layer.mlp_norm.forward(fwd, h.add(m)?)?;
        }
        Ok(h)
    }
}

fn check_width(x: &Var<'_>, d: usize, what: &str) -> Result<usize> {
    let s = x.shape();
    match s.as_slice() {
        [r, c] if *c == d => Ok(*r),
        _ => dim_err(format!("{what} has shape {s:?}, expected [_, {d}]")),
    }
}

/// Refines `K` support vectors against each other (intra-support attention).
pub fn isam_refine<'t>(
    fwd: &mut Forward<'t, '_>,
    supports: Var<'t>,
    stack: &EncoderStack,
) -> Result<Var<'t>> {
    if check_width(&supports, stack.cfg.model_dim, "supports")? == 0 {
        return Err(Error::EmptyInput("no support vectors to refine".into()));
    }
    stack.forward(fwd, supports)
}

/// Aggregates query vectors with support vectors as keys and values
/// (query-support attention).
pub fn qsam_aggregate<'t>(
    fwd: &mut Forward<'t, '_>,
    queries: Var<'t>,
    supports: Var<'t>,
    stack: &DecoderStack,
) -> Result<Var<'t>> {
    let d = stack.cfg.model_dim;
    if check_width(&queries, d, "queries")? == 0 {
        return Err(Error::EmptyInput("no query vectors".into()));
    }
    if check_width(&supports, d, "supports")? == 0 {
        return Err(Error::EmptyInput("no support vectors".into()));
    }
    stack.forward(fwd, queries, supports)
}

/// Sets every projection of a multi-head block to the identity (single head)
/// and zeroes its biases. Test and diagnostics helper.
pub fn set_identity_projections(store: &mut ParamStore, params: &MultiHeadParams) -> Result<()> {
    let mut linears: Vec<&Linear> = params
        .heads
        .iter()
        .flat_map(|h| [&h.query, &h.key, &h.value])
        .collect();
    linears.push(&params.output);
    for lin in linears {
        let w = store
            .get_mut(&lin.weight)
            .ok_or_else(|| Error::Contract(format!("missing `{}`", lin.weight)))?;
        let (r, c) = w.dims2()?;
        if r != c {
            return dim_err("identity projection needs square weights (one head)");
        }
        *w = Tensor::eye(r).with_grad(true);
        if let Some(b) = &lin.bias {
            if let Some(t) = store.get_mut(b) {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok(())
}
