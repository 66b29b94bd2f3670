//! Cached forward pass and exact reverse-mode backward for the pre-norm
//! decoder, plus per-demonstration label NLL extraction.

use crate::corpus::PackedSequence;

use super::mask::MaskSpec;
use super::math::{gelu, gelu_grad, log_softmax_at, softmax_inplace, Mat};
use super::params::{Gradients, ModelParams};
use super::{ContextMode, LossTrace, ModelError};

const LN_EPS: f64 = 1e-5;

pub(crate) struct LnCache {
    /// (x - mean) * rstd, before gamma/beta.
    normed: Mat,
    rstd: Vec<f64>,
}

pub(crate) struct LayerCache {
    ln1: LnCache,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per-head post-softmax attention weights, each n x n.
    probs: Vec<Mat>,
    ctx: Mat,
    ln2: LnCache,
    h1: Mat,
    act: Mat,
}

/// Everything backward needs to replay one forward pass.
pub struct ForwardCache {
    pub tokens: Vec<u32>,
    pub(crate) positions: Vec<usize>,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) ln_f: LnCache,
    pub logits: Mat,
    pub revision: u64,
}

fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> (Mat, LnCache) {
    let (n, d) = (x.rows, x.cols);
    let mut normed = Mat::zeros(n, d);
    let mut out = Mat::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let nv = (row[j] - mean) * rs;
            normed.set(i, j, nv);
            out.set(i, j, gamma[j] * nv + beta[j]);
        }
    }
    (out, LnCache { normed, rstd })
}

/// dx for y = gamma*normed + beta, accumulating dgamma/dbeta.
fn layer_norm_backward(
    dy: &Mat,
    cache: &LnCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Mat {
    let (n, d) = (dy.rows, dy.cols);
    let mut dx = Mat::zeros(n, d);
    for i in 0..n {
        let dy_row = dy.row(i);
        let nm_row = cache.normed.row(i);
        for j in 0..d {
            dgamma[j] += dy_row[j] * nm_row[j];
            dbeta[j] += dy_row[j];
        }
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        let dnormed: Vec<f64> = (0..d).map(|j| dy_row[j] * gamma[j]).collect();
        for j in 0..d {
            m1 += dnormed[j];
            m2 += dnormed[j] * nm_row[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let rs = cache.rstd[i];
        for j in 0..d {
            dx.set(i, j, rs * (dnormed[j] - m1 - nm_row[j] * m2));
        }
    }
    dx
}

fn head_slice(m: &Mat, head: usize, head_dim: usize) -> Mat {
    let mut out = Mat::zeros(m.rows, head_dim);
    let off = head * head_dim;
    for i in 0..m.rows {
        out.row_mut(i).copy_from_slice(&m.row(i)[off..off + head_dim]);
    }
    out
}

fn head_write_add(dst: &mut Mat, src: &Mat, head: usize, head_dim: usize) {
    let off = head * head_dim;
    for i in 0..src.rows {
        let s = src.row(i);
        let d = dst.row_mut(i);
        for j in 0..head_dim {
            d[off + j] += s[j];
        }
    }
}

/// Runs the decoder over `tokens` under `mask`, recording every
/// activation needed for an exact backward pass. Logits depend only on
/// tokens the mask makes visible; the whole pass is deterministic.
pub fn forward_cached(
    params: &ModelParams,
    tokens: &[u32],
    mask: &MaskSpec,
) -> Result<ForwardCache, ModelError> {
    let dims = params.dims;
    let n = tokens.len();
    if n == 0 {
        return Err(ModelError::EmptySequence);
    }
    for &t in tokens {
        if t as usize >= dims.vocab {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: dims.vocab,
            });
        }
    }
    let (vis, positions) = mask.resolve(n)?;
    if let Some(&p) = positions.iter().max() {
        if p >= dims.max_pos {
            return Err(ModelError::SequenceTooLong {
                position: p,
                max_pos: dims.max_pos,
            });
        }
    }

    let d = dims.d_model;
    let hd = dims.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = Mat::zeros(n, d);
    for t in 0..n {
        let te = params.tok_emb.row(tokens[t] as usize);
        let pe = params.pos_emb.row(positions[t]);
        let row = x.row_mut(t);
        for j in 0..d {
            row[j] = te[j] + pe[j];
        }
    }

    let mut layers = Vec::with_capacity(dims.layers);
    for lp in &params.layers {
        let x_in = x;
        let (xn1, ln1) = layer_norm(&x_in, &lp.ln1_gamma, &lp.ln1_beta);
        let q = xn1.matmul(&lp.wq);
        let k = xn1.matmul(&lp.wk);
        let v = xn1.matmul(&lp.wv);

        let mut ctx = Mat::zeros(n, d);
        let mut probs = Vec::with_capacity(dims.heads);
        for h in 0..dims.heads {
            let qh = head_slice(&q, h, hd);
            let kh = head_slice(&k, h, hd);
            let vh = head_slice(&v, h, hd);
            let mut scores = qh.matmul_nt(&kh);
            scores.scale(scale);
            for i in 0..n {
                let row = scores.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    if !vis[i].sees(i, j) {
                        *s = f64::NEG_INFINITY;
                    }
                }
                softmax_inplace(row);
            }
            let ctx_h = scores.matmul(&vh);
            head_write_add(&mut ctx, &ctx_h, h, hd);
            probs.push(scores);
        }
        let attn = ctx.matmul(&lp.wo);
        let mut x_mid = x_in.clone();
        x_mid.add_assign(&attn);

        let (xn2, ln2) = layer_norm(&x_mid, &lp.ln2_gamma, &lp.ln2_beta);
        let h1 = xn2.matmul(&lp.w_up);
        let mut act = h1.clone();
        for v in &mut act.data {
            *v = gelu(*v);
        }
        let mlp = act.matmul(&lp.w_down);
        let mut x_out = x_mid.clone();
        x_out.add_assign(&mlp);

        layers.push(LayerCache {
            ln1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            h1,
            act,
        });
        x = x_out;
    }

    let (xnf, ln_f) = layer_norm(&x, &params.ln_f_gamma, &params.ln_f_beta);
    let mut logits = xnf.matmul(&params.w_out);
    for i in 0..n {
        let row = logits.row_mut(i);
        for (l, b) in row.iter_mut().zip(&params.b_out) {
            *l += b;
        }
    }

    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        positions,
        layers,
        ln_f,
        logits,
        revision: params.revision,
    })
}

/// Position-wise logits over the vocabulary.
pub fn forward(params: &ModelParams, tokens: &[u32], mask: &MaskSpec) -> Result<Mat, ModelError> {
    forward_cached(params, tokens, mask).map(|c| c.logits)
}

/// The (row, target) pairs scored for demonstration k: token t of the
/// label is predicted by the logits at position t-1.
fn demo_targets(seq: &PackedSequence, k: usize) -> Vec<(usize, u32)> {
    let y = seq.demo_spans[k].y;
    (y.start..y.end).map(|t| (t - 1, seq.token_ids[t])).collect()
}

/// Mean label NLL (nats) per demonstration, computed only over y-span
/// tokens.
pub fn trace_from_cache(
    cache: &ForwardCache,
    seq: &PackedSequence,
    mode: ContextMode,
) -> LossTrace {
    let losses = (0..seq.k())
        .map(|k| {
            let targets = demo_targets(seq, k);
            let sum: f64 = targets
                .iter()
                .map(|&(row, tok)| -log_softmax_at(cache.logits.row(row), tok as usize))
                .sum();
            sum / targets.len() as f64
        })
        .collect();
    LossTrace {
        sequence_id: seq.task_id.clone(),
        mode,
        losses,
    }
}

/// Convenience wrapper: build the mask for `mode`, run the forward pass,
/// and extract the per-demonstration trace.
pub fn per_demo_nll(
    params: &ModelParams,
    seq: &PackedSequence,
    mode: ContextMode,
) -> Result<LossTrace, ModelError> {
    let mask = super::mask::build_mask(seq, mode.mask_mode())?;
    let cache = forward_cached(params, &seq.token_ids, &mask)?;
    Ok(trace_from_cache(&cache, seq, mode))
}

/// One weighted-NLL term of a loss node: `coeffs[k]` multiplies
/// demonstration k's mean label NLL computed from `cache`.
pub struct LossTerm<'a> {
    pub cache: &'a ForwardCache,
    pub seq: &'a PackedSequence,
    pub coeffs: &'a [f64],
}

/// A scalar loss that is a fixed linear combination of per-demonstration
/// NLLs from one or more forward passes. The combination weights are
/// constants: no gradient flows through them.
pub struct LossNode<'a> {
    pub value: f64,
    pub terms: Vec<LossTerm<'a>>,
}

/// Exact reverse-mode gradient of a loss node with respect to every
/// parameter. Rejects caches that were not produced by `params`.
pub fn grad(params: &ModelParams, node: &LossNode<'_>) -> Result<Gradients, ModelError> {
    let mut grads = Gradients::zeros_like(params);
    for term in &node.terms {
        if term.cache.revision != params.revision {
            return Err(ModelError::LossDisconnected);
        }
        if term.coeffs.len() != term.seq.k() {
            return Err(ModelError::CoeffLengthMismatch {
                expected: term.seq.k(),
                got: term.coeffs.len(),
            });
        }
        if term.coeffs.iter().all(|&c| c == 0.0) {
            continue;
        }
        backward_term(params, term, &mut grads);
    }
    Ok(grads)
}

fn backward_term(params: &ModelParams, term: &LossTerm<'_>, grads: &mut Gradients) {
    let cache = term.cache;
    let dims = params.dims;
    let n = cache.tokens.len();
    let v = dims.vocab;

    // d(loss)/d(logits): softmax-minus-onehot at each scored row, scaled
    // by coeff/|y_span|.
    let mut d_logits = Mat::zeros(n, v);
    for (k, &c) in term.coeffs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let targets = demo_targets(term.seq, k);
        let w = c / targets.len() as f64;
        for (row, tok) in targets {
            let mut probs = cache.logits.row(row).to_vec();
            softmax_inplace(&mut probs);
            let d_row = d_logits.row_mut(row);
            for (dj, pj) in d_row.iter_mut().zip(&probs) {
                *dj += w * pj;
            }
            d_row[tok as usize] -= w;
        }
    }

    backward_from_logits(params, cache, &d_logits, grads);
}

fn backward_from_logits(
    params: &ModelParams,
    cache: &ForwardCache,
    d_logits: &Mat,
    grads: &mut Gradients,
) {
    let dims = params.dims;
    let n = cache.tokens.len();
    let d = dims.d_model;
    let hd = dims.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let g = &mut grads.0;

    // output projection
    for i in 0..n {
        for (bj, dj) in g.b_out.iter_mut().zip(d_logits.row(i)) {
            *bj += dj;
        }
    }
    let xnf = {
        // recompute gamma*normed+beta input of w_out from the cache
        let mut m = cache.ln_f.normed.clone();
        for i in 0..n {
            let row = m.row_mut(i);
            for j in 0..d {
                row[j] = params.ln_f_gamma[j] * row[j] + params.ln_f_beta[j];
            }
        }
        m
    };
    g.w_out.add_assign(&xnf.matmul_tn(d_logits));
    let d_xnf = d_logits.matmul_nt(&params.w_out);
    let mut dx = layer_norm_backward(
        &d_xnf,
        &cache.ln_f,
        &params.ln_f_gamma,
        &mut g.ln_f_gamma,
        &mut g.ln_f_beta,
    );

    for (li, lp) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let gl = &mut g.layers[li];

        // x_out = x_mid + act @ w_down
        let d_mlp = &dx;
        gl.w_down.add_assign(&lc.act.matmul_tn(d_mlp));
        let d_act = d_mlp.matmul_nt(&lp.w_down);
        let mut d_h1 = d_act;
        for (dv, hv) in d_h1.data.iter_mut().zip(&lc.h1.data) {
            *dv *= gelu_grad(*hv);
        }
        let xn2 = {
            let mut m = lc.ln2.normed.clone();
            for i in 0..n {
                let row = m.row_mut(i);
                for j in 0..d {
                    row[j] = lp.ln2_gamma[j] * row[j] + lp.ln2_beta[j];
                }
            }
            m
        };
        gl.w_up.add_assign(&xn2.matmul_tn(&d_h1));
        let d_xn2 = d_h1.matmul_nt(&lp.w_up);
        let d_from_ln2 = layer_norm_backward(
            &d_xn2,
            &lc.ln2,
            &lp.ln2_gamma,
            &mut gl.ln2_gamma,
            &mut gl.ln2_beta,
        );
        let mut d_x_mid = dx; // residual path
        d_x_mid.add_assign(&d_from_ln2);

        // x_mid = x_in + ctx @ wo
        let d_attn = &d_x_mid;
        gl.wo.add_assign(&lc.ctx.matmul_tn(d_attn));
        let d_ctx = d_attn.matmul_nt(&lp.wo);

        let mut d_q = Mat::zeros(n, d);
        let mut d_k = Mat::zeros(n, d);
        let mut d_v = Mat::zeros(n, d);
        for h in 0..dims.heads {
            let probs = &lc.probs[h];
            let d_ctx_h = head_slice(&d_ctx, h, hd);
            let vh = head_slice(&lc.v, h, hd);
            let qh = head_slice(&lc.q, h, hd);
            let kh = head_slice(&lc.k, h, hd);

            let d_vh = probs.matmul_tn(&d_ctx_h);
            head_write_add(&mut d_v, &d_vh, h, hd);

            let d_probs = d_ctx_h.matmul_nt(&vh);
            // softmax backward: dS = P o (dP - rowsum(dP o P));
            // masked entries have P = 0 and therefore dS = 0.
            let mut d_scores = Mat::zeros(n, n);
            for i in 0..n {
                let p_row = probs.row(i);
                let dp_row = d_probs.row(i);
                let dot: f64 = p_row.iter().zip(dp_row).map(|(p, dp)| p * dp).sum();
                let ds_row = d_scores.row_mut(i);
                for j in 0..n {
                    ds_row[j] = p_row[j] * (dp_row[j] - dot) * scale;
                }
            }
            let d_qh = d_scores.matmul(&kh);
            head_write_add(&mut d_q, &d_qh, h, hd);
            let d_kh = d_scores.matmul_tn(&qh);
            head_write_add(&mut d_k, &d_kh, h, hd);
        }

        let xn1 = {
            let mut m = lc.ln1.normed.clone();
            for i in 0..n {
                let row = m.row_mut(i);
                for j in 0..d {
                    row[j] = lp.ln1_gamma[j] * row[j] + lp.ln1_beta[j];
                }
            }
            m
        };
        gl.wq.add_assign(&xn1.matmul_tn(&d_q));
        gl.wk.add_assign(&xn1.matmul_tn(&d_k));
        gl.wv.add_assign(&xn1.matmul_tn(&d_v));
        let mut d_xn1 = d_q.matmul_nt(&lp.wq);
        d_xn1.add_assign(&d_k.matmul_nt(&lp.wk));
        d_xn1.add_assign(&d_v.matmul_nt(&lp.wv));
        let d_from_ln1 = layer_norm_backward(
            &d_xn1,
            &lc.ln1,
            &lp.ln1_gamma,
            &mut gl.ln1_gamma,
            &mut gl.ln1_beta,
        );
        let mut d_x_in = d_x_mid;
        d_x_in.add_assign(&d_from_ln1);
        dx = d_x_in;
    }

    // embeddings
    for t in 0..n {
        let d_row = dx.row(t);
        let te = g.tok_emb.row_mut(cache.tokens[t] as usize);
        for j in 0..d {
            te[j] += d_row[j];
        }
        let pe = g.pos_emb.row_mut(cache.positions[t]);
        for j in 0..d {
            pe[j] += d_row[j];
        }
    }
}
