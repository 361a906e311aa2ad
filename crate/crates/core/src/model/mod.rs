//! Decoder-only transformer equalizer.
//!
//! The model maps a token sequence to one complex symbol estimate, read at
//! the final (query) token position. Pre-norm residual blocks, causal
//! multi-head attention, GELU feed-forward with 4x expansion, learned
//! absolute positional embeddings, and a 2-way linear readout.
//!
//! Parameters live in one flat buffer with a named-tensor layout; training
//! runs in f32 and the identical code path runs in f64 for the
//! finite-difference gradient checks.

mod checkpoint;
mod net;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2};
use rand_distr::{Distribution, Normal};

use crate::prompt::TokenSequence;
use crate::seed::SeedStream;
use crate::{C64, CVec, Error, Result};

/// Float type the network runs in.
pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + Send
    + Sync
    + std::fmt::Debug
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub token_dim: usize,
    /// Feed-forward hidden width as a multiple of `embed_dim`.
    pub ffn_mult: usize,
}

impl ModelConfig {
    /// Reference architecture: 4 layers, width 64, 4 heads.
    pub fn reference(token_dim: usize, max_seq_len: usize) -> Self {
        Self { num_layers: 4, embed_dim: 64, num_heads: 4, max_seq_len, token_dim, ffn_mult: 4 }
    }

    /// Reduced architecture for the fast experiments: 2 layers, width 64.
    pub fn desk(token_dim: usize, max_seq_len: usize) -> Self {
        Self { num_layers: 2, embed_dim: 64, num_heads: 4, max_seq_len, token_dim, ffn_mult: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.embed_dim == 0
            || self.num_heads == 0
            || self.max_seq_len == 0
            || self.token_dim == 0
            || self.ffn_mult == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.embed_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Normal,
    /// Normal scaled by `1/sqrt(2 * num_layers)` (residual output projections).
    ResidualNormal,
    Zero,
    One,
}

/// One named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    init: InitKind,
}

impl TensorMeta {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        if self.cols == 1 {
            vec![self.rows]
        } else {
            vec![self.rows, self.cols]
        }
    }
}

/// Fixed enumeration of the tensors for a given config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tensors: Vec<TensorMeta>,
    pub total: usize,
}

// Per-layer tensor indices relative to the layer base.
const T_LN1_G: usize = 0;
const T_LN1_B: usize = 1;
const T_WQKV: usize = 2;
const T_BQKV: usize = 3;
const T_WO: usize = 4;
const T_BO: usize = 5;
const T_LN2_G: usize = 6;
const T_LN2_B: usize = 7;
const T_W1: usize = 8;
const T_B1: usize = 9;
const T_W2: usize = 10;
const T_B2: usize = 11;
const LAYER_TENSORS: usize = 12;

impl ParamLayout {
    pub fn build(cfg: &ModelConfig) -> Self {
        let e = cfg.embed_dim;
        let h = cfg.ffn_dim();
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, rows: usize, cols: usize, init: InitKind| {
            tensors.push(TensorMeta { name, rows, cols, offset, init });
            offset += rows * cols;
        };
        push("embed.w".into(), cfg.token_dim, e, InitKind::Normal);
        push("embed.b".into(), e, 1, InitKind::Zero);
        push("pos".into(), cfg.max_seq_len, e, InitKind::Normal);
        for l in 0..cfg.num_layers {
            push(format!("layers.{l}.ln1.g"), e, 1, InitKind::One);
            push(format!("layers.{l}.ln1.b"), e, 1, InitKind::Zero);
            push(format!("layers.{l}.attn.wqkv"), e, 3 * e, InitKind::Normal);
            push(format!("layers.{l}.attn.bqkv"), 3 * e, 1, InitKind::Zero);
            push(format!("layers.{l}.attn.wo"), e, e, InitKind::ResidualNormal);
            push(format!("layers.{l}.attn.bo"), e, 1, InitKind::Zero);
            push(format!("layers.{l}.ln2.g"), e, 1, InitKind::One);
            push(format!("layers.{l}.ln2.b"), e, 1, InitKind::Zero);
            push(format!("layers.{l}.ffn.w1"), e, h, InitKind::Normal);
            push(format!("layers.{l}.ffn.b1"), h, 1, InitKind::Zero);
            push(format!("layers.{l}.ffn.w2"), h, e, InitKind::ResidualNormal);
            push(format!("layers.{l}.ffn.b2"), e, 1, InitKind::Zero);
        }
        push("ln_f.g".into(), e, 1, InitKind::One);
        push("ln_f.b".into(), e, 1, InitKind::Zero);
        push("readout.w".into(), e, 2, InitKind::Normal);
        push("readout.b".into(), 2, 1, InitKind::Zero);
        ParamLayout { total: offset, tensors }
    }

    fn layer_base(&self, layer: usize) -> usize {
        3 + layer * LAYER_TENSORS
    }

    fn final_base(&self, num_layers: usize) -> usize {
        3 + num_layers * LAYER_TENSORS
    }
}

/// The transformer: config, tensor layout, and the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Transformer<F: Real> {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<F>,
}

fn view2<'a, F: Real>(data: &'a [F], meta: &TensorMeta) -> ArrayView2<'a, F> {
    ArrayView2::from_shape((meta.rows, meta.cols), &data[meta.offset..meta.offset + meta.len()])
        .expect("layout shape")
}

fn view1<'a, F: Real>(data: &'a [F], meta: &TensorMeta) -> ArrayView1<'a, F> {
    ArrayView1::from_shape(meta.rows, &data[meta.offset..meta.offset + meta.len()])
        .expect("layout shape")
}

fn view2_mut<'a, F: Real>(data: &'a mut [F], meta: &TensorMeta) -> ArrayViewMut2<'a, F> {
    ArrayViewMut2::from_shape(
        (meta.rows, meta.cols),
        &mut data[meta.offset..meta.offset + meta.len()],
    )
    .expect("layout shape")
}

fn slice_mut<'a, F: Real>(data: &'a mut [F], meta: &TensorMeta) -> &'a mut [F] {
    &mut data[meta.offset..meta.offset + meta.len()]
}

impl<F: Real> Transformer<F> {
    /// Deterministic initialization: truncated normal (std 0.02, cut at 2
    /// std) for weights, zeros for biases, ones for norm gains; residual
    /// output projections scaled by `1/sqrt(2 * num_layers)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::build(&config);
        let mut rng = SeedStream::root(seed).child("model-init").rng();
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let residual_scale = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let mut params = vec![F::zero(); layout.total];
        for meta in &layout.tensors {
            let slice = &mut params[meta.offset..meta.offset + meta.len()];
            match meta.init {
                InitKind::Zero => {}
                InitKind::One => slice.fill(F::one()),
                InitKind::Normal | InitKind::ResidualNormal => {
                    let scale =
                        if meta.init == InitKind::ResidualNormal { residual_scale } else { 1.0 };
                    for v in slice {
                        let draw = loop {
                            let x = normal.sample(&mut rng);
                            if x.abs() <= 0.04 {
                                break x;
                            }
                        };
                        *v = F::from_f64(draw * scale);
                    }
                }
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::build(&config);
        if params.len() != layout.total {
            return Err(Error::Layout(format!(
                "parameter buffer has {} values, layout needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    /// Zero the readout head; the model then predicts exactly 0.
    pub fn zero_readout(&mut self) {
        let base = self.layout.final_base(self.config.num_layers);
        for idx in [base + 2, base + 3] {
            let meta = self.layout.tensors[idx].clone();
            slice_mut(&mut self.params, &meta).fill(F::zero());
        }
    }

    /// Cast the parameter buffer to another float type.
    pub fn convert<G: Real>(&self) -> Transformer<G> {
        Transformer {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.iter().map(|&v| G::from_f64(Real::to_f64(v))).collect(),
        }
    }

    fn meta(&self, idx: usize) -> &TensorMeta {
        &self.layout.tensors[idx]
    }

    /// Forward over a packed batch: `tokens` is `(batch * seq, token_dim)`.
    /// Returns the readout at the last position of each sequence, `(batch, 2)`.
    pub fn forward_batch(
        &self,
        tokens: ArrayView2<F>,
        batch: usize,
        seq: usize,
    ) -> Result<Array2<F>> {
        self.check_dims(&tokens, batch, seq)?;
        let (out, _, _) = self.run_forward(tokens, batch, seq, false, false);
        Ok(out)
    }

    /// Readout applied at every position of a single sequence, `(seq, 2)`.
    /// Used to verify causality: position `i` must not depend on tokens
    /// after `i`.
    pub fn forward_positions(&self, tokens: ArrayView2<F>) -> Result<Array2<F>> {
        let seq = tokens.nrows();
        self.check_dims(&tokens, 1, seq)?;
        let (_, _, xf) = self.run_forward(tokens, 1, seq, false, true);
        let xf = xf.expect("requested");
        let p = self.layout.final_base(self.config.num_layers);
        let w = view2(&self.params, self.meta(p + 2));
        let b = view1(&self.params, self.meta(p + 3));
        let mut out = net::matmul(xf.view(), w);
        net::add_bias(&mut out, b);
        Ok(out)
    }

    /// Single-prompt forward; returns the complex estimate components.
    pub fn forward_one(&self, seq: &TokenSequence) -> Result<(f64, f64)> {
        let tokens = Array2::from_shape_vec(
            (seq.seq_len, seq.token_dim),
            seq.tokens.iter().map(|&v| F::from_f64(v)).collect(),
        )
        .expect("token shape");
        let out = self.forward_batch(tokens.view(), 1, seq.seq_len)?;
        Ok((out[(0, 0)].to_f64(), out[(0, 1)].to_f64()))
    }

    fn check_dims(&self, tokens: &ArrayView2<F>, batch: usize, seq: usize) -> Result<()> {
        if seq > self.config.max_seq_len {
            return Err(Error::Layout(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if tokens.nrows() != batch * seq || tokens.ncols() != self.config.token_dim {
            return Err(Error::Layout(format!(
                "token batch is {}x{}, expected {}x{}",
                tokens.nrows(),
                tokens.ncols(),
                batch * seq,
                self.config.token_dim
            )));
        }
        Ok(())
    }

    /// Shared forward; optionally keeps per-layer caches and the final
    /// normed activations.
    fn run_forward(
        &self,
        tokens: ArrayView2<F>,
        batch: usize,
        seq: usize,
        want_cache: bool,
        want_xf: bool,
    ) -> (Array2<F>, Option<ForwardCache<F>>, Option<Array2<F>>) {
        let cfg = &self.config;
        let p = &self.params;
        let heads = cfg.num_heads;

        let mut x = net::matmul(tokens, view2(p, self.meta(0)));
        net::add_bias(&mut x, view1(p, self.meta(1)));
        {
            let pos = view2(p, self.meta(2));
            for b in 0..batch {
                for s in 0..seq {
                    let mut row = x.row_mut(b * seq + s);
                    row += &pos.row(s);
                }
            }
        }

        let mut layer_caches = Vec::with_capacity(if want_cache { cfg.num_layers } else { 0 });
        for l in 0..cfg.num_layers {
            let base = self.layout.layer_base(l);
            let (h1, ln1) = net::layernorm(
                &x,
                view1(p, self.meta(base + T_LN1_G)),
                view1(p, self.meta(base + T_LN1_B)),
            );
            let mut qkv = net::matmul(h1.view(), view2(p, self.meta(base + T_WQKV)));
            net::add_bias(&mut qkv, view1(p, self.meta(base + T_BQKV)));
            let (ctx, probs) = net::attention_forward(&qkv, batch, seq, heads);
            let mut attn_out = net::matmul(ctx.view(), view2(p, self.meta(base + T_WO)));
            net::add_bias(&mut attn_out, view1(p, self.meta(base + T_BO)));
            x += &attn_out;

            let (h2, ln2) = net::layernorm(
                &x,
                view1(p, self.meta(base + T_LN2_G)),
                view1(p, self.meta(base + T_LN2_B)),
            );
            let mut u = net::matmul(h2.view(), view2(p, self.meta(base + T_W1)));
            net::add_bias(&mut u, view1(p, self.meta(base + T_B1)));
            let mut a = u.clone();
            net::par_map_inplace(a.as_slice_mut().expect("standard layout"), net::gelu);
            let mut f = net::matmul(a.view(), view2(p, self.meta(base + T_W2)));
            net::add_bias(&mut f, view1(p, self.meta(base + T_B2)));
            x += &f;

            if want_cache {
                layer_caches.push(LayerCache { ln1, h1, qkv, probs, ctx, ln2, h2, u, a });
            } else {
                drop((ln1, h1, qkv, probs, ctx, ln2, h2, u, a));
            }
        }

        let fb = self.layout.final_base(cfg.num_layers);
        let (xf, lnf) = net::layernorm(&x, view1(p, self.meta(fb)), view1(p, self.meta(fb + 1)));
        let w_r = view2(p, self.meta(fb + 2));
        let b_r = view1(p, self.meta(fb + 3));
        let mut out = Array2::zeros((batch, 2));
        for b in 0..batch {
            let row = xf.row(b * seq + seq - 1);
            for c in 0..2 {
                let mut acc = b_r[c];
                for e in 0..cfg.embed_dim {
                    acc = acc + row[e] * w_r[(e, c)];
                }
                out[(b, c)] = acc;
            }
        }

        let xf_out = want_xf.then(|| xf.clone());
        let cache = want_cache.then(|| ForwardCache { layers: layer_caches, lnf, xf });
        (out, cache, xf_out)
    }

    /// Mean squared error over the batch plus the full parameter gradient.
    ///
    /// `targets` is `(batch, 2)` (real and imaginary parts); the loss is
    /// `mean_b |out_b - target_b|^2` and the gradient accumulates into
    /// `grads` in place (callers zero it between steps).
    pub fn loss_and_grad(
        &self,
        tokens: ArrayView2<F>,
        batch: usize,
        seq: usize,
        targets: ArrayView2<F>,
        grads: &mut [F],
    ) -> Result<f64> {
        self.check_dims(&tokens, batch, seq)?;
        if targets.dim() != (batch, 2) {
            return Err(Error::Layout("targets must be (batch, 2)".into()));
        }
        if grads.len() != self.layout.total {
            return Err(Error::Layout("gradient buffer size mismatch".into()));
        }
        let (out, cache, _) = self.run_forward(tokens, batch, seq, true, false);
        let cache = cache.expect("requested");

        let mut loss = 0.0f64;
        let mut dout = Array2::zeros((batch, 2));
        let scale = F::from_f64(2.0 / batch as f64);
        for b in 0..batch {
            for c in 0..2 {
                let diff = out[(b, c)] - targets[(b, c)];
                loss += diff.to_f64() * diff.to_f64();
                dout[(b, c)] = diff * scale;
            }
        }
        loss /= batch as f64;

        self.run_backward(tokens, batch, seq, &cache, &dout, grads);
        Ok(loss)
    }

    /// Forward-only batch loss (validation).
    pub fn batch_loss(
        &self,
        tokens: ArrayView2<F>,
        batch: usize,
        seq: usize,
        targets: ArrayView2<F>,
    ) -> Result<f64> {
        let out = self.forward_batch(tokens, batch, seq)?;
        let mut loss = 0.0f64;
        for b in 0..batch {
            for c in 0..2 {
                let diff = (out[(b, c)] - targets[(b, c)]).to_f64();
                loss += diff * diff;
            }
        }
        Ok(loss / batch as f64)
    }

    fn run_backward(
        &self,
        tokens: ArrayView2<F>,
        batch: usize,
        seq: usize,
        cache: &ForwardCache<F>,
        dout: &Array2<F>,
        grads: &mut [F],
    ) {
        let cfg = &self.config;
        let p = &self.params;
        let e = cfg.embed_dim;
        let t = batch * seq;
        let fb = self.layout.final_base(cfg.num_layers);

        // Readout backward; gradient lands only on the last position rows.
        let mut dxf = Array2::zeros((t, e));
        {
            let w_r = view2(p, self.meta(fb + 2));
            for b in 0..batch {
                let row = b * seq + seq - 1;
                for c in 0..2 {
                    let d = dout[(b, c)];
                    for ei in 0..e {
                        dxf[(row, ei)] = dxf[(row, ei)] + d * w_r[(ei, c)];
                    }
                }
            }
            let meta_w = self.meta(fb + 2).clone();
            let dw = slice_mut(grads, &meta_w);
            for b in 0..batch {
                let row = b * seq + seq - 1;
                for ei in 0..e {
                    let x = cache.xf[(row, ei)];
                    for c in 0..2 {
                        dw[ei * 2 + c] = dw[ei * 2 + c] + x * dout[(b, c)];
                    }
                }
            }
            let meta_b = self.meta(fb + 3).clone();
            let db = slice_mut(grads, &meta_b);
            for b in 0..batch {
                for c in 0..2 {
                    db[c] = db[c] + dout[(b, c)];
                }
            }
        }

        // Final layernorm.
        let mut dx = {
            let gain = view1(p, self.meta(fb));
            let (mg, mb) = (self.meta(fb).clone(), self.meta(fb + 1).clone());
            let (dg_slice, db_slice) = two_slices(grads, &mg, &mb);
            net::layernorm_backward(&dxf, &cache.lnf, gain, dg_slice, db_slice)
        };

        for l in (0..cfg.num_layers).rev() {
            let base = self.layout.layer_base(l);
            let lc = &cache.layers[l];

            // Feed-forward block: x_out = x_in + W2^T gelu(W1^T ln2(x_in)).
            {
                let meta_w2 = self.meta(base + T_W2).clone();
                net::matmul_acc_t(lc.a.view(), dx.view(), view2_mut(grads, &meta_w2));
                let meta_b2 = self.meta(base + T_B2).clone();
                net::bias_grad_acc(&dx, slice_mut(grads, &meta_b2));
            }
            let mut du = net::matmul(dx.view(), view2(p, self.meta(base + T_W2)).t());
            net::par_mul_map(
                du.as_slice_mut().expect("standard layout"),
                lc.u.as_slice().expect("standard layout"),
                net::gelu_grad,
            );
            {
                let meta_w1 = self.meta(base + T_W1).clone();
                net::matmul_acc_t(lc.h2.view(), du.view(), view2_mut(grads, &meta_w1));
                let meta_b1 = self.meta(base + T_B1).clone();
                net::bias_grad_acc(&du, slice_mut(grads, &meta_b1));
            }
            let dh2 = net::matmul(du.view(), view2(p, self.meta(base + T_W1)).t());
            let dres = {
                let gain = view1(p, self.meta(base + T_LN2_G));
                let (mg, mb) =
                    (self.meta(base + T_LN2_G).clone(), self.meta(base + T_LN2_B).clone());
                let (dg, db) = two_slices(grads, &mg, &mb);
                net::layernorm_backward(&dh2, &lc.ln2, gain, dg, db)
            };
            dx += &dres;

            // Attention block: x_out = x_in + Wo^T attn(ln1(x_in)).
            {
                let meta_wo = self.meta(base + T_WO).clone();
                net::matmul_acc_t(lc.ctx.view(), dx.view(), view2_mut(grads, &meta_wo));
                let meta_bo = self.meta(base + T_BO).clone();
                net::bias_grad_acc(&dx, slice_mut(grads, &meta_bo));
            }
            let dctx = net::matmul(dx.view(), view2(p, self.meta(base + T_WO)).t());
            let dqkv =
                net::attention_backward(&dctx, &lc.probs, &lc.qkv, batch, seq, cfg.num_heads);
            {
                let meta_wqkv = self.meta(base + T_WQKV).clone();
                net::matmul_acc_t(lc.h1.view(), dqkv.view(), view2_mut(grads, &meta_wqkv));
                let meta_bqkv = self.meta(base + T_BQKV).clone();
                net::bias_grad_acc(&dqkv, slice_mut(grads, &meta_bqkv));
            }
            let dh1 = net::matmul(dqkv.view(), view2(p, self.meta(base + T_WQKV)).t());
            let dres = {
                let gain = view1(p, self.meta(base + T_LN1_G));
                let (mg, mb) =
                    (self.meta(base + T_LN1_G).clone(), self.meta(base + T_LN1_B).clone());
                let (dg, db) = two_slices(grads, &mg, &mb);
                net::layernorm_backward(&dh1, &lc.ln1, gain, dg, db)
            };
            dx += &dres;
        }

        // Embedding and positional backward.
        {
            let meta_we = self.meta(0).clone();
            net::matmul_acc_t(tokens, dx.view(), view2_mut(grads, &meta_we));
            let meta_be = self.meta(1).clone();
            net::bias_grad_acc(&dx, slice_mut(grads, &meta_be));
        }
        {
            let meta_pos = self.meta(2).clone();
            let dpos = slice_mut(grads, &meta_pos);
            for b in 0..batch {
                for s in 0..seq {
                    let row = dx.row(b * seq + s);
                    for ei in 0..e {
                        dpos[s * e + ei] = dpos[s * e + ei] + row[ei];
                    }
                }
            }
        }
    }
}

/// Two disjoint mutable tensor slices out of the flat gradient buffer.
fn two_slices<'a, F: Real>(
    grads: &'a mut [F],
    a: &TensorMeta,
    b: &TensorMeta,
) -> (&'a mut [F], &'a mut [F]) {
    debug_assert!(a.offset + a.len() <= b.offset);
    let (left, right) = grads.split_at_mut(b.offset);
    (&mut left[a.offset..a.offset + a.len()], &mut right[..b.len()])
}

struct LayerCache<F> {
    ln1: net::LnCache<F>,
    h1: Array2<F>,
    qkv: Array2<F>,
    probs: ndarray::Array3<F>,
    ctx: Array2<F>,
    ln2: net::LnCache<F>,
    h2: Array2<F>,
    u: Array2<F>,
    a: Array2<F>,
}

struct ForwardCache<F> {
    layers: Vec<LayerCache<F>>,
    lnf: net::LnCache<F>,
    xf: Array2<F>,
}

/// Pack encoded prompts into a model input batch, casting to the model float.
pub fn batch_from_sequences<F: Real>(seqs: &[&TokenSequence]) -> Result<(Array2<F>, usize, usize)> {
    let first = seqs.first().ok_or_else(|| Error::Dim("empty prompt batch".into()))?;
    let (s, d) = (first.seq_len, first.token_dim);
    let mut data = Vec::with_capacity(seqs.len() * s * d);
    for seq in seqs {
        if seq.seq_len != s || seq.token_dim != d {
            return Err(Error::Layout("mixed prompt shapes in one batch".into()));
        }
        data.extend(seq.tokens.iter().map(|&v| F::from_f64(v)));
    }
    let arr = Array2::from_shape_vec((seqs.len() * s, d), data).expect("shape");
    Ok((arr, seqs.len(), s))
}

/// One forward pass per UE of a quantized frame: encode all K prompts under
/// `layout` and evaluate them as one batch.
pub fn predict_all_users(
    model: &Transformer<f32>,
    layout: &crate::prompt::PromptLayout,
    task: &crate::channel::TaskConfig,
    profile: &crate::quant::ScalingProfile,
    quantized: &crate::quant::QuantizedFrame,
    assignment: &crate::frame::PilotAssignment,
    book: &crate::frame::PilotBook,
) -> Result<CVec> {
    let k = task.num_ues();
    let seqs: Vec<TokenSequence> = (0..k)
        .map(|ue| {
            crate::prompt::encode_prompt(layout, task, profile, quantized, assignment, book, ue)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let (tokens, batch, seq) = batch_from_sequences::<f32>(&refs)?;
    let out = model.forward_batch(tokens.view(), batch, seq)?;
    Ok(CVec::from_iterator(k, (0..k).map(|b| C64::new(out[(b, 0)] as f64, out[(b, 1)] as f64))))
}
