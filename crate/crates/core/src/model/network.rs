use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RandomStream};

use super::adapter::{dropout_mask, init_adapter_for, AdapterTarget, LoraAdapter, Projection};
use super::backbone::{FrozenBackbone, LayerNorm, Linear, NUM_CLASSES};
use super::linearized::{BlockLinearization, LinearBlock, LinearizedClassifier, LogitLinearization};

const LN_EPS: f64 = 1e-5;

/// Whether a forward pass runs with adapter dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut RandomStream),
}

impl Mode<'_> {
    fn mask(&mut self, rows: usize, cols: usize, rate: f64) -> Option<Matrix> {
        match self {
            Mode::Eval => None,
            Mode::Train(stream) => {
                let m = dropout_mask(rows * cols, rate, stream);
                Some(Matrix::from_vec(rows, cols, m).expect("finite mask"))
            }
        }
    }
}

/// Frozen backbone plus one adapter on every query, value and output projection.
#[derive(Clone, Debug)]
pub struct LoraModel {
    backbone: Arc<FrozenBackbone>,
    adapters: Vec<LoraAdapter>,
}

/// Per-adapter inputs and pre-activation gradients recorded during a pass.
///
/// For an adapter the `A` matrix is a linear layer from `input` to `hidden`
/// and `B` maps `hidden` to the scaled output; gradients are filled in only by
/// a backward pass.
#[derive(Clone, Debug, Default)]
pub struct LayerTrace {
    pub layers: Vec<AdapterTrace>,
}

#[derive(Clone, Debug)]
pub struct AdapterTrace {
    pub target: AdapterTarget,
    /// `T × d2`: input to `A` (after dropout in train mode).
    pub input: Matrix,
    /// `T × r`: output of `A`, input to `B`.
    pub hidden: Matrix,
    /// `T × r`: gradient w.r.t. the output of `A`.
    pub grad_hidden: Option<Matrix>,
    /// `T × d1`: gradient w.r.t. the output of `B` (scaling folded in).
    pub grad_output: Option<Matrix>,
}

struct AdapterCache {
    input: Matrix,
    mask: Option<Matrix>,
    hidden: Matrix,
}

struct NormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

struct LayerCache {
    norm_attn: NormCache,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    adapters: [AdapterCache; 3],
    probs: Vec<Matrix>,
    norm_ffn: NormCache,
    ffn_pre: Matrix,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    valid: Vec<bool>,
    layers: Vec<LayerCache>,
    final_xhat: Vec<f64>,
    final_inv_std: f64,
    logits: [f64; 2],
}

impl ForwardCache {
    pub fn logits(&self) -> [f64; 2] {
        self.logits
    }
}

impl LoraModel {
    /// Attaches freshly initialized adapters of the given rank to every
    /// query, value and output projection.
    pub fn new(
        backbone: Arc<FrozenBackbone>,
        rank: usize,
        alpha: f64,
        dropout: f64,
        stream: &mut RandomStream,
    ) -> Result<Self> {
        let d = backbone.config().embed_dim;
        let mut adapters = Vec::new();
        for layer in 0..backbone.config().num_layers {
            for projection in Projection::ALL {
                let target = AdapterTarget { layer, projection };
                adapters.push(init_adapter_for(target, d, d, rank, alpha, dropout, stream)?);
            }
        }
        Ok(Self { backbone, adapters })
    }

    /// Rebuilds a model from explicit adapters; one per targeted projection,
    /// with shapes matching the host layers.
    pub fn from_parts(backbone: Arc<FrozenBackbone>, mut adapters: Vec<LoraAdapter>) -> Result<Self> {
        adapters.sort_by_key(|a| a.target);
        let cfg = backbone.config();
        let expected = cfg.num_layers * Projection::ALL.len();
        if adapters.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} adapters, got {}",
                adapters.len()
            )));
        }
        for (i, ad) in adapters.iter().enumerate() {
            if ad.target.id() != i {
                return Err(Error::invalid(format!("duplicate or missing adapter at {}", ad.target)));
            }
            let r = ad.rank();
            if ad.b.shape() != (cfg.embed_dim, r) || ad.a.shape() != (r, cfg.embed_dim) {
                return Err(Error::invalid(format!("adapter {} shape mismatch", ad.target)));
            }
        }
        Ok(Self { backbone, adapters })
    }

    pub fn backbone(&self) -> &Arc<FrozenBackbone> {
        &self.backbone
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn rank(&self) -> usize {
        self.adapters.first().map_or(0, LoraAdapter::rank)
    }

    pub fn num_params(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::param_count).sum()
    }

    /// Trainable parameters in canonical order: adapter id ascending, `B`
    /// before `A`, each row-major.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for ad in &self.adapters {
            out.extend_from_slice(ad.b.as_slice());
            out.extend_from_slice(ad.a.as_slice());
        }
        out
    }

    pub fn unflatten_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "parameter vector has length {}, model has {}",
                params.len(),
                self.num_params()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::computation("non-finite parameter"));
        }
        let mut offset = 0;
        for ad in &mut self.adapters {
            for m in [&mut ad.b, &mut ad.a] {
                let n = m.as_slice().len();
                m.as_mut_slice().copy_from_slice(&params[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Sets the scaling numerator of every adapter.
    pub fn set_alpha(&mut self, alpha: f64) {
        for ad in &mut self.adapters {
            ad.alpha = alpha;
        }
    }

    fn validate_tokens(&self, tokens: &[u32]) -> Result<Vec<bool>> {
        let cfg = self.backbone.config();
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
        let valid: Vec<bool> = tokens.iter().map(|&t| t != cfg.pad_id).collect();
        if !valid.iter().any(|&v| v) {
            return Err(Error::invalid("sequence contains only padding"));
        }
        Ok(valid)
    }

    /// Two logits for a token sequence. When `trace` is given it receives the
    /// adapter inputs of this pass.
    pub fn forward(&self, tokens: &[u32], mode: Mode<'_>, trace: Option<&mut LayerTrace>) -> Result<[f64; 2]> {
        let cache = self.forward_cached(tokens, mode)?;
        if let Some(t) = trace {
            *t = self.trace_from(&cache, None);
        }
        Ok(cache.logits)
    }

    pub fn forward_cached(&self, tokens: &[u32], mut mode: Mode<'_>) -> Result<ForwardCache> {
        let valid = self.validate_tokens(tokens)?;
        let bb = &*self.backbone;
        let cfg = bb.config();
        let (t_len, d) = (tokens.len(), cfg.embed_dim);
        let mut x = Matrix::zeros(t_len, d);
        for (t, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(t);
            for ((o, e), p) in row
                .iter_mut()
                .zip(bb.token_embedding.row(tok as usize))
                .zip(bb.position_embedding.row(t))
            {
                *o = e + p;
            }
        }
        let mut layers = Vec::with_capacity(bb.layers.len());
        for (li, layer) in bb.layers.iter().enumerate() {
            let ads = &self.adapters[li * 3..li * 3 + 3];
            let (h1, norm_attn) = layer_norm_rows(&x, &layer.norm_attn);
            let (q, q_cache) = adapted(&layer.query, &ads[0], &h1, &mut mode);
            let k = layer.key.apply_rows(&h1);
            let (v, v_cache) = adapted(&layer.value, &ads[1], &h1, &mut mode);
            let (ctx, probs) = attention(&q, &k, &v, &valid, cfg.num_heads);
            let (o, o_cache) = adapted(&layer.output, &ads[2], &ctx, &mut mode);
            x.add_assign_scaled(&o, 1.0);
            let (h2, norm_ffn) = layer_norm_rows(&x, &layer.norm_ffn);
            let ffn_pre = layer.ffn_in.apply_rows(&h2);
            let mut act = ffn_pre.clone();
            act.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
            let ffn_out = layer.ffn_out.apply_rows(&act);
            x.add_assign_scaled(&ffn_out, 1.0);
            layers.push(LayerCache {
                norm_attn,
                q,
                k,
                v,
                adapters: [q_cache, v_cache, o_cache],
                probs,
                norm_ffn,
                ffn_pre,
            });
        }
        let (z, xhat, inv_std) = layer_norm_vec(x.row(0), &bb.final_norm);
        let logit_vec = bb.head.weight.matvec(&z)?;
        let logits = [logit_vec[0] + bb.head.bias[0], logit_vec[1] + bb.head.bias[1]];
        if !logits.iter().all(|l| l.is_finite()) {
            return Err(Error::computation("non-finite logits"));
        }
        Ok(ForwardCache {
            valid,
            layers,
            final_xhat: xhat,
            final_inv_std: inv_std,
            logits,
        })
    }

    /// Gradient of `dlogits · logits` with respect to the flattened adapter
    /// parameters. Optionally records per-adapter activations and
    /// pre-activation gradients.
    pub fn backward(&self, cache: &ForwardCache, dlogits: [f64; 2], trace: Option<&mut LayerTrace>) -> Vec<f64> {
        let want = trace.is_some();
        let (grad, grads) = self.backward_inner(cache, dlogits, want);
        if let Some(t) = trace {
            *t = self.trace_from(cache, Some(grads));
        }
        grad
    }

    fn backward_inner(
        &self,
        cache: &ForwardCache,
        dlogits: [f64; 2],
        want_trace: bool,
    ) -> (Vec<f64>, Vec<(Matrix, Matrix)>) {
        let bb = &*self.backbone;
        let cfg = bb.config();
        let d = cfg.embed_dim;
        let t_len = cache.valid.len();
        let mut grad = vec![0.0; self.num_params()];
        let offsets = self.adapter_offsets();
        let mut traced: Vec<(Matrix, Matrix)> = Vec::new();

        // Head and final norm touch only the first position.
        let mut dz = vec![0.0; d];
        for (c, &g) in dlogits.iter().enumerate().take(NUM_CLASSES) {
            for (o, w) in dz.iter_mut().zip(bb.head.weight.row(c)) {
                *o += g * w;
            }
        }
        let mut dx = Matrix::zeros(t_len, d);
        let dx0 = layer_norm_vec_backward(&dz, &cache.final_xhat, cache.final_inv_std, &bb.final_norm);
        dx.row_mut(0).copy_from_slice(&dx0);

        for (li, layer) in bb.layers.iter().enumerate().rev() {
            let lc = &cache.layers[li];
            // Feed-forward residual branch.
            let d_act = dx.matmul_unchecked(&layer.ffn_out.weight);
            let mut d_pre = d_act;
            for (g, &p) in d_pre.as_mut_slice().iter_mut().zip(lc.ffn_pre.as_slice()) {
                *g *= gelu_grad(p);
            }
            let dh2 = d_pre.matmul_unchecked(&layer.ffn_in.weight);
            let d_mid = layer_norm_rows_backward(&dh2, &lc.norm_ffn, &layer.norm_ffn);
            dx.add_assign_scaled(&d_mid, 1.0);

            // Attention residual branch; dx now holds d(x_mid) = d(o).
            let ads = &self.adapters[li * 3..li * 3 + 3];
            let mut dctx = dx.matmul_unchecked(&layer.output.weight);
            let (dctx_ad, tr_o) = adapter_backward(&ads[2], &lc.adapters[2], &dx, &mut grad, offsets[li * 3 + 2]);
            dctx.add_assign_scaled(&dctx_ad, 1.0);

            let (dq, dk, dv) = attention_backward(&dctx, lc, &cache.valid, cfg.num_heads);
            let mut dh1 = dq.matmul_unchecked(&layer.query.weight);
            dh1.add_assign_scaled(&dk.matmul_unchecked(&layer.key.weight), 1.0);
            dh1.add_assign_scaled(&dv.matmul_unchecked(&layer.value.weight), 1.0);
            let (dq_ad, tr_q) = adapter_backward(&ads[0], &lc.adapters[0], &dq, &mut grad, offsets[li * 3]);
            let (dv_ad, tr_v) = adapter_backward(&ads[1], &lc.adapters[1], &dv, &mut grad, offsets[li * 3 + 1]);
            dh1.add_assign_scaled(&dq_ad, 1.0);
            dh1.add_assign_scaled(&dv_ad, 1.0);
            let d_in = layer_norm_rows_backward(&dh1, &lc.norm_attn, &layer.norm_attn);
            dx.add_assign_scaled(&d_in, 1.0);

            if want_trace {
                traced.push(tr_o);
                traced.push(tr_v);
                traced.push(tr_q);
            }
        }
        traced.reverse();
        (grad, traced)
    }

    fn adapter_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.adapters.len());
        let mut acc = 0;
        for ad in &self.adapters {
            offsets.push(acc);
            acc += ad.param_count();
        }
        offsets
    }

    fn trace_from(&self, cache: &ForwardCache, grads: Option<Vec<(Matrix, Matrix)>>) -> LayerTrace {
        let mut grads = grads.map(|g| g.into_iter());
        let mut layers = Vec::with_capacity(self.adapters.len());
        for (li, lc) in cache.layers.iter().enumerate() {
            for (pi, ac) in lc.adapters.iter().enumerate() {
                let (grad_hidden, grad_output) = match grads.as_mut().and_then(Iterator::next) {
                    Some((gh, go)) => (Some(gh), Some(go)),
                    None => (None, None),
                };
                layers.push(AdapterTrace {
                    target: self.adapters[li * 3 + pi].target,
                    input: ac.input.clone(),
                    hidden: ac.hidden.clone(),
                    grad_hidden,
                    grad_output,
                });
            }
        }
        LayerTrace { layers }
    }

    /// Logits and class probabilities in eval mode.
    pub fn predict_proba(&self, tokens: &[u32]) -> Result<[f64; 2]> {
        let l = self.forward(tokens, Mode::Eval, None)?;
        let p = crate::numerics::softmax(&l);
        Ok([p[0], p[1]])
    }
}

impl LinearizedClassifier for LoraModel {
    type Input = [u32];

    fn param_count(&self) -> usize {
        self.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.flatten_params()
    }

    fn linear_blocks(&self) -> Vec<LinearBlock> {
        let mut blocks = Vec::with_capacity(2 * self.adapters.len());
        let mut offset = 0;
        for ad in &self.adapters {
            let (d1, r, d2) = (ad.out_dim(), ad.rank(), ad.in_dim());
            blocks.push(LinearBlock {
                name: format!("{}.B", ad.target),
                offset,
                out_dim: d1,
                in_dim: r,
            });
            offset += d1 * r;
            blocks.push(LinearBlock {
                name: format!("{}.A", ad.target),
                offset,
                out_dim: r,
                in_dim: d2,
            });
            offset += r * d2;
        }
        blocks
    }

    fn eval_logits(&self, x: &[u32]) -> Result<[f64; 2]> {
        self.forward(x, Mode::Eval, None)
    }

    fn linearize(&self, x: &[u32]) -> Result<LogitLinearization> {
        let cache = self.forward_cached(x, Mode::Eval)?;
        let rows: Vec<usize> = (0..cache.valid.len()).filter(|&t| cache.valid[t]).collect();
        let (g0, tr0) = self.backward_inner(&cache, [1.0, 0.0], true);
        let (g1, tr1) = self.backward_inner(&cache, [0.0, 1.0], true);
        let mut blocks = Vec::with_capacity(2 * self.adapters.len());
        let mut it0 = tr0.into_iter();
        let mut it1 = tr1.into_iter();
        for lc in &cache.layers {
            for ac in &lc.adapters {
                let (gh0, go0) = it0.next().expect("one trace per adapter");
                let (gh1, go1) = it1.next().expect("one trace per adapter");
                blocks.push(BlockLinearization {
                    activations: select_rows(&ac.hidden, &rows),
                    output_grads: [select_rows(&go0, &rows), select_rows(&go1, &rows)],
                });
                blocks.push(BlockLinearization {
                    activations: select_rows(&ac.input, &rows),
                    output_grads: [select_rows(&gh0, &rows), select_rows(&gh1, &rows)],
                });
            }
        }
        Ok(LogitLinearization {
            logits: cache.logits,
            jacobian: [g0, g1],
            blocks,
        })
    }
}

fn select_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (dst, &src) in rows.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(m.row(src));
    }
    out
}

fn adapted(layer: &Linear, ad: &LoraAdapter, x: &Matrix, mode: &mut Mode<'_>) -> (Matrix, AdapterCache) {
    let mut y = layer.apply_rows(x);
    let mask = mode.mask(x.rows(), x.cols(), ad.dropout);
    let input = match &mask {
        Some(m) => {
            let mut dropped = x.clone();
            for (v, k) in dropped.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *v *= k;
            }
            dropped
        }
        None => x.clone(),
    };
    let hidden = input.matmul_transposed(&ad.a);
    let delta = hidden.matmul_transposed(&ad.b);
    y.add_assign_scaled(&delta, ad.scaling());
    (y, AdapterCache { input, mask, hidden })
}

/// Accumulates `dB`, `dA` into `grad` at `offset` and returns the gradient
/// flowing back into the adapter input plus the `(grad_hidden, grad_output)`
/// pair for tracing.
fn adapter_backward(
    ad: &LoraAdapter,
    cache: &AdapterCache,
    d_out: &Matrix,
    grad: &mut [f64],
    offset: usize,
) -> (Matrix, (Matrix, Matrix)) {
    let grad_output = d_out.scale(ad.scaling());
    let db = grad_output.transpose_matmul(&cache.hidden);
    let grad_hidden = grad_output.matmul_unchecked(&ad.b);
    let da = grad_hidden.transpose_matmul(&cache.input);
    let nb = db.as_slice().len();
    for (g, v) in grad[offset..offset + nb].iter_mut().zip(db.as_slice()) {
        *g += v;
    }
    for (g, v) in grad[offset + nb..offset + nb + da.as_slice().len()]
        .iter_mut()
        .zip(da.as_slice())
    {
        *g += v;
    }
    let mut d_in = grad_hidden.matmul_unchecked(&ad.a);
    if let Some(mask) = &cache.mask {
        for (g, k) in d_in.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *g *= k;
        }
    }
    (d_in, (grad_hidden, grad_output))
}

fn attention(q: &Matrix, k: &Matrix, v: &Matrix, valid: &[bool], heads: usize) -> (Matrix, Vec<Matrix>) {
    let (t_len, d) = q.shape();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = Matrix::zeros(t_len, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let mut p = Matrix::zeros(t_len, t_len);
        for i in 0..t_len {
            let qi = &q.row(i)[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for j in 0..t_len {
                if valid[j] {
                    let s = scale * crate::numerics::dot(qi, &k.row(j)[cols.clone()]);
                    p[(i, j)] = s;
                    max = max.max(s);
                }
            }
            let mut total = 0.0;
            for j in 0..t_len {
                if valid[j] {
                    let e = (p[(i, j)] - max).exp();
                    p[(i, j)] = e;
                    total += e;
                }
            }
            for j in 0..t_len {
                if valid[j] {
                    p[(i, j)] /= total;
                    let w = p[(i, j)];
                    let vj = &v.row(j)[cols.clone()];
                    for (c, &vv) in ctx.row_mut(i)[cols.clone()].iter_mut().zip(vj) {
                        *c += w * vv;
                    }
                }
            }
        }
        probs.push(p);
    }
    (ctx, probs)
}

fn attention_backward(dctx: &Matrix, lc: &LayerCache, valid: &[bool], heads: usize) -> (Matrix, Matrix, Matrix) {
    let (t_len, d) = dctx.shape();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Matrix::zeros(t_len, d);
    let mut dk = Matrix::zeros(t_len, d);
    let mut dv = Matrix::zeros(t_len, d);
    for (h, p) in lc.probs.iter().enumerate() {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..t_len {
            let dci = &dctx.row(i)[cols.clone()];
            if dci.iter().all(|&g| g == 0.0) {
                continue;
            }
            let mut dp = vec![0.0; t_len];
            let mut weighted = 0.0;
            for j in 0..t_len {
                if !valid[j] {
                    continue;
                }
                dp[j] = crate::numerics::dot(dci, &lc.v.row(j)[cols.clone()]);
                weighted += p[(i, j)] * dp[j];
                let w = p[(i, j)];
                for (o, &g) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dci) {
                    *o += w * g;
                }
            }
            for j in 0..t_len {
                if !valid[j] {
                    continue;
                }
                let ds = p[(i, j)] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj: Vec<f64> = lc.k.row(j)[cols.clone()].to_vec();
                for (o, kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&kj) {
                    *o += ds * kv;
                }
                let qi: Vec<f64> = lc.q.row(i)[cols.clone()].to_vec();
                for (o, qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&qi) {
                    *o += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

fn layer_norm_vec(x: &[f64], ln: &LayerNorm) -> (Vec<f64>, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat
        .iter()
        .zip(ln.gamma.iter().zip(&ln.beta))
        .map(|(h, (g, b))| g * h + b)
        .collect();
    (y, xhat, inv_std)
}

fn layer_norm_vec_backward(dy: &[f64], xhat: &[f64], inv_std: f64, ln: &LayerNorm) -> Vec<f64> {
    let n = dy.len() as f64;
    let dxhat: Vec<f64> = dy.iter().zip(&ln.gamma).map(|(d, g)| d * g).collect();
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(d, h)| d * h).sum::<f64>() / n;
    dxhat
        .iter()
        .zip(xhat)
        .map(|(d, h)| inv_std * (d - mean_d - h * mean_dx))
        .collect()
}

fn layer_norm_rows(x: &Matrix, ln: &LayerNorm) -> (Matrix, NormCache) {
    let mut y = Matrix::zeros(x.rows(), x.cols());
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let (yr, hr, s) = layer_norm_vec(x.row(r), ln);
        y.row_mut(r).copy_from_slice(&yr);
        xhat.row_mut(r).copy_from_slice(&hr);
        inv.push(s);
    }
    (y, NormCache { xhat, inv_std: inv })
}

fn layer_norm_rows_backward(dy: &Matrix, cache: &NormCache, ln: &LayerNorm) -> Matrix {
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    for r in 0..dy.rows() {
        let row = dy.row(r);
        if row.iter().all(|&g| g == 0.0) {
            continue;
        }
        let g = layer_norm_vec_backward(row, cache.xhat.row(r), cache.inv_std[r], ln);
        dx.row_mut(r).copy_from_slice(&g);
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
