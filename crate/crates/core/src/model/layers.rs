//! Parameter handles and forward passes for the transformer building blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{AttnMask, Graph, ParamId, ParamStore, Tensor, Var};

/// Per-pass state threaded through every layer.
pub struct Ctx<'r> {
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl Ctx<'_> {
    pub fn eval() -> Ctx<'static> {
        Ctx {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn drop(&mut self, g: &mut Graph, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => g.dropout(x, self.dropout, rng),
            _ => x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let w = store.add_uniform(format!("{name}.weight"), &[din, dout], din, rng);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        Norm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, query: Var, memory: Var, mask: &AttnMask) -> Result<Var> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, memory)?;
        let v = self.v.forward(g, memory)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.o.forward(g, a)
    }

    /// Key and value projections of `memory`, reusable across decode steps.
    pub fn keys_values(&self, g: &mut Graph, memory: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(g, memory)?, self.v.forward(g, memory)?))
    }

    /// Unmasked attention of `query` onto already projected keys and values.
    pub fn attend(&self, g: &mut Graph, query: Var, k: Var, v: Var) -> Result<Var> {
        let q = self.q.forward(g, query)?;
        let a = g.attention(q, k, v, self.heads, &AttnMask::None)?;
        self.o.forward(g, a)
    }
}

/// Self-attention keys and values of the positions decoded so far, plus the
/// fixed cross-attention projections of the encoder output.
#[derive(Clone, Debug)]
pub struct StepCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    rows: usize,
    cross_keys: Tensor,
    cross_values: Tensor,
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        let h = ctx.drop(g, h);
        self.down.forward(g, h)
    }
}

/// Pointwise → GLU → depthwise conv → GELU → pointwise.
#[derive(Clone, Debug)]
pub struct ConvModule {
    expand: Linear,
    dw_weight: ParamId,
    dw_bias: ParamId,
    project: Linear,
    d: usize,
}

impl ConvModule {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, kernel: usize, rng: &mut R) -> Self {
        let expand = Linear::new(store, &format!("{name}.expand"), d, 2 * d, rng);
        let dw_weight = store.add_uniform(format!("{name}.depthwise.weight"), &[kernel, d], kernel, rng);
        let dw_bias = store.add(format!("{name}.depthwise.bias"), Tensor::zeros(&[d]));
        let project = Linear::new(store, &format!("{name}.project"), d, d, rng);
        ConvModule {
            expand,
            dw_weight,
            dw_bias,
            project,
            d,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.expand.forward(g, x)?;
        let a = g.slice_cols(h, 0, self.d)?;
        let b = g.slice_cols(h, self.d, 2 * self.d)?;
        let gate = g.sigmoid(b);
        let h = g.mul(a, gate)?;
        let (w, bias) = (g.param(self.dw_weight), g.param(self.dw_bias));
        let h = g.depthwise_conv1d(h, w, bias)?;
        let h = g.gelu(h);
        self.project.forward(g, h)
    }
}

/// Encoder layer: self-attention, convolution and feed-forward blocks, each
/// pre-normalized with a residual connection.
#[derive(Clone, Debug)]
pub struct ConformerLayer {
    attn_norm: Norm,
    attn: MultiHeadAttention,
    conv_norm: Norm,
    conv: ConvModule,
    ffn_norm: Norm,
    ffn: FeedForward,
}

impl ConformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        ConformerLayer {
            attn_norm: Norm::new(store, &format!("{name}.attn_norm"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            conv_norm: Norm::new(store, &format!("{name}.conv_norm"), d),
            conv: ConvModule::new(store, &format!("{name}.conv"), d, kernel, rng),
            ffn_norm: Norm::new(store, &format!("{name}.ffn_norm"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let n = self.attn_norm.forward(g, x)?;
        let a = self.attn.forward(g, n, n, &AttnMask::None)?;
        let a = ctx.drop(g, a);
        let x = g.add(x, a)?;
        let n = self.conv_norm.forward(g, x)?;
        let c = self.conv.forward(g, n)?;
        let c = ctx.drop(g, c);
        let x = g.add(x, c)?;
        let n = self.ffn_norm.forward(g, x)?;
        let f = self.ffn.forward(g, n, ctx)?;
        let f = ctx.drop(g, f);
        g.add(x, f)
    }
}

/// Decoder layer: self-attention (masked or not), cross-attention onto the
/// encoder output, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_norm: Norm,
    self_attn: MultiHeadAttention,
    cross_norm: Norm,
    cross_attn: MultiHeadAttention,
    ffn_norm: Norm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        DecoderLayer {
            self_norm: Norm::new(store, &format!("{name}.self_norm"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, heads, rng),
            cross_norm: Norm::new(store, &format!("{name}.cross_norm"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, heads, rng),
            ffn_norm: Norm::new(store, &format!("{name}.ffn_norm"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, hidden, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        memory: Var,
        mask: &AttnMask,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let n = self.self_norm.forward(g, x)?;
        let a = self.self_attn.forward(g, n, n, mask)?;
        let a = ctx.drop(g, a);
        let x = g.add(x, a)?;
        let n = self.cross_norm.forward(g, x)?;
        let c = self.cross_attn.forward(g, n, memory, &AttnMask::None)?;
        let c = ctx.drop(g, c);
        let x = g.add(x, c)?;
        let n = self.ffn_norm.forward(g, x)?;
        let f = self.ffn.forward(g, n, ctx)?;
        let f = ctx.drop(g, f);
        g.add(x, f)
    }

    /// Empty cache for incremental decoding against encoder output `memory`.
    pub fn start(&self, store: &ParamStore, memory: &Tensor) -> Result<StepCache> {
        let mut g = Graph::inference(store);
        let m = g.constant(memory.clone());
        let (k, v) = self.cross_attn.keys_values(&mut g, m)?;
        Ok(StepCache {
            keys: Vec::new(),
            values: Vec::new(),
            rows: 0,
            cross_keys: g.value(k).clone(),
            cross_values: g.value(v).clone(),
        })
    }

    /// Causal forward of one new row `x` (`[1, d]`). Equivalent to the last
    /// row of [`DecoderLayer::forward`] with a causal mask over every row
    /// seen so far.
    pub fn step(&self, g: &mut Graph, x: Var, cache: &mut StepCache) -> Result<Var> {
        let n = self.self_norm.forward(g, x)?;
        let (k, v) = self.self_attn.keys_values(g, n)?;
        cache.keys.extend_from_slice(g.value(k).data());
        cache.values.extend_from_slice(g.value(v).data());
        cache.rows += 1;
        let d = g.value(k).cols();
        let keys = g.constant(Tensor::new(&[cache.rows, d], cache.keys.clone())?);
        let values = g.constant(Tensor::new(&[cache.rows, d], cache.values.clone())?);
        let a = self.self_attn.attend(g, n, keys, values)?;
        let x = g.add(x, a)?;
        let n = self.cross_norm.forward(g, x)?;
        let ck = g.constant(cache.cross_keys.clone());
        let cv = g.constant(cache.cross_values.clone());
        let c = self.cross_attn.attend(g, n, ck, cv)?;
        let x = g.add(x, c)?;
        let n = self.ffn_norm.forward(g, x)?;
        let f = self.ffn.forward(g, n, &mut Ctx::eval())?;
        g.add(x, f)
    }
}
