//! Reverse-mode differentiation of the autoregressive cross-entropy loss
//! through attention, softmax, LayerNorm, RoPE, dropout, and the optional
//! MLP. Gradients land in a flat buffer with the same layout as the
//! parameters, which the finite-difference harness in the trainer verifies
//! coordinate by coordinate.

use crate::datagen::Token;
use crate::scalar::Real;
use crate::Rng;

use super::kernels::{
    causal_mix, causal_mix_rev, causal_scores, matmul, matmul_abt, matmul_atb, transposed,
};
use super::{forward_impl, ForwardOpts, HeadStash, ModelError, ModelParameters, Stash};

/// Mean next-token cross-entropy over positions `1..t_len`, in nats.
/// Requires at least two tokens.
pub fn sequence_loss<T: Real>(
    params: &ModelParameters<T>,
    tokens: &[Token],
    train_mode: bool,
    dropout_rng: Option<&mut Rng>,
) -> Result<T, ModelError> {
    let opts = ForwardOpts { train_mode, dropout_rng, ..Default::default() };
    let (trace, _) = forward_impl(params, tokens, opts, false)?;
    loss_from_logits(&trace.logits, tokens, params.config.vocab)
}

fn loss_from_logits<T: Real>(logits: &[T], tokens: &[Token], vocab: usize) -> Result<T, ModelError> {
    let t_len = tokens.len();
    if t_len < 2 {
        return Err(ModelError::InvalidInput("need at least 2 tokens for next-token loss".into()));
    }
    let mut loss = T::zero();
    for t in 0..t_len - 1 {
        let row = &logits[t * vocab..(t + 1) * vocab];
        let target = tokens[t + 1] as usize;
        let mut max = T::neg_infinity();
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        loss += sum.ln() + max - row[target];
    }
    Ok(loss / T::from_f64((t_len - 1) as f64))
}

/// Loss plus exact gradients for one sequence. The gradient buffer mirrors
/// the parameter layout element for element.
pub fn loss_and_grad<T: Real>(
    params: &ModelParameters<T>,
    tokens: &[Token],
    train_mode: bool,
    dropout_rng: Option<&mut Rng>,
) -> Result<(T, Vec<T>), ModelError> {
    let opts = ForwardOpts { train_mode, dropout_rng, ..Default::default() };
    let (_, stash) = forward_impl(params, tokens, opts, true)?;
    let stash = stash.expect("stash requested");
    backward(params, tokens, &stash)
}

fn backward<T: Real>(
    params: &ModelParameters<T>,
    tokens: &[Token],
    stash: &Stash<T>,
) -> Result<(T, Vec<T>), ModelError> {
    let cfg = &params.config;
    let (d, dh, vocab, t_len) = (cfg.d_model, cfg.d_head(), cfg.vocab, tokens.len());
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let loss = loss_from_logits(&stash.logits, tokens, vocab)?;
    let mut grad = vec![T::zero(); params.layout.total];

    // Classifier: dlogits = (softmax - onehot) / (t_len - 1).
    let inv_positions = T::one() / T::from_f64((t_len - 1) as f64);
    let mut dlogits = vec![T::zero(); t_len * vocab];
    for t in 0..t_len - 1 {
        let row = &stash.logits[t * vocab..(t + 1) * vocab];
        let drow = &mut dlogits[t * vocab..(t + 1) * vocab];
        let mut max = T::neg_infinity();
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (dv, &v) in drow.iter_mut().zip(row) {
            *dv = (v - max).exp();
            sum += *dv;
        }
        let inv = inv_positions / sum;
        for dv in drow.iter_mut() {
            *dv *= inv;
        }
        drow[tokens[t + 1] as usize] -= inv_positions;
    }

    let w_out_off = params.layout.w_out;
    matmul_atb(&mut grad[w_out_off..w_out_off + vocab * d], &dlogits, &stash.final_x, t_len, vocab, d);
    let mut dx = vec![T::zero(); t_len * d];
    matmul(&mut dx, &dlogits, params.w_out(), t_len, vocab, d);

    // Final LayerNorm.
    if let Some((goff, boff)) = params.layout.final_ln {
        let (n, inv_std) = stash.final_ln.as_ref().expect("final LN stash");
        let dxhat = dx;
        dx = vec![T::zero(); t_len * d];
        let (dgain, dbias) = grad_pair(&mut grad, goff, boff, d);
        layer_norm_backward(&dxhat, n, inv_std, params.slice(goff, d), dgain, dbias, &mut dx, t_len, d);
    }

    // Layers in reverse.
    for layer in (0..cfg.n_layers).rev() {
        let ls = &stash.layers[layer];
        let lofs = params.layout.layers[layer].clone();

        // MLP sublayer.
        if let Some(m) = &ls.mlp {
            let mofs = lofs.mlp.as_ref().expect("mlp offsets");
            let hidden = cfg.mlp_hidden;
            let dout: Vec<T> = if m.out_mask.is_empty() {
                dx.clone()
            } else {
                dx.iter().zip(&m.out_mask).map(|(&g, &k)| g * k).collect()
            };
            matmul_atb(&mut grad[mofs.w1..mofs.w1 + d * hidden], &dout, &m.act, t_len, d, hidden);
            let mut dact = vec![T::zero(); t_len * hidden];
            matmul(&mut dact, &dout, params.slice(mofs.w1, d * hidden), t_len, d, hidden);
            let dpre: Vec<T> = dact
                .iter()
                .zip(&m.pre)
                .map(|(&g, &p)| if p > T::zero() { g } else { T::zero() })
                .collect();
            matmul_atb(&mut grad[mofs.w2..mofs.w2 + hidden * d], &dpre, &m.xhat, t_len, hidden, d);
            let mut dxhat2 = vec![T::zero(); t_len * d];
            matmul(&mut dxhat2, &dpre, params.slice(mofs.w2, hidden * d), t_len, hidden, d);
            let (dgain, dbias) = grad_pair(&mut grad, mofs.ln_gain, mofs.ln_bias, d);
            layer_norm_backward(
                &dxhat2,
                &m.n,
                &m.inv_std,
                params.slice(mofs.ln_gain, d),
                dgain,
                dbias,
                &mut dx,
                t_len,
                d,
            );
        }

        // Attention sublayer: upstream through the residual dropout.
        let dmsa: Vec<T> = if ls.msa_mask.is_empty() {
            dx.clone()
        } else {
            dx.iter().zip(&ls.msa_mask).map(|(&g, &k)| g * k).collect()
        };
        let mut dxhat = vec![T::zero(); t_len * d];
        for head in 0..cfg.n_heads {
            let hs = &ls.heads[head];
            if hs.masked {
                continue;
            }
            let hofs = &lofs.heads[head];
            attention_head_backward(
                params, hs, &dmsa, &ls.xhat, &mut dxhat, &mut grad, hofs.wq, hofs.wk, hofs.wv,
                hofs.wo, t_len, d, dh, scale,
            );
        }
        let (dgain, dbias) = grad_pair(&mut grad, lofs.ln_gain, lofs.ln_bias, d);
        layer_norm_backward(
            &dxhat,
            &ls.n,
            &ls.inv_std,
            params.slice(lofs.ln_gain, d),
            dgain,
            dbias,
            &mut dx,
            t_len,
            d,
        );
    }

    // Embedding scatter.
    let emb_off = params.layout.embed;
    for (t, &tk) in tokens.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        let g = &mut grad[emb_off + tk as usize * d..emb_off + (tk as usize + 1) * d];
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv += v;
        }
    }

    Ok((loss, grad))
}

#[allow(clippy::too_many_arguments)]
fn attention_head_backward<T: Real>(
    params: &ModelParameters<T>,
    hs: &HeadStash<T>,
    dmsa: &[T],
    xhat: &[T],
    dxhat: &mut [T],
    grad: &mut [T],
    wq_off: usize,
    wk_off: usize,
    wv_off: usize,
    wo_off: usize,
    t_len: usize,
    d: usize,
    dh: usize,
    scale: T,
) {
    let dropped = !hs.amask.is_empty();

    // Output projection: headout = ctx wo^T.
    matmul_atb(&mut grad[wo_off..wo_off + d * dh], dmsa, &hs.ctx, t_len, d, dh);
    let mut dctx = vec![T::zero(); t_len * dh];
    matmul(&mut dctx, dmsa, params.slice(wo_off, d * dh), t_len, d, dh);

    // ctx = (attn ⊙ amask) V: value grads via the transposed effective
    // attention, attention grads via the transposed values.
    let weff_storage: Vec<T>;
    let weff: &[T] = if dropped {
        weff_storage = hs.attn.iter().zip(&hs.amask).map(|(&a, &m)| a * m).collect();
        &weff_storage
    } else {
        &hs.attn
    };
    let mut dv = vec![T::zero(); t_len * dh];
    causal_mix_rev(&mut dv, &transposed(weff, t_len, t_len), &dctx, t_len, dh);

    let mut dz = vec![T::zero(); t_len * t_len];
    let vt = transposed(&hs.v, t_len, dh);
    causal_scores(&mut dz, &dctx, &vt, t_len, dh);
    for t in 0..t_len {
        // dropout backward, then softmax backward on the causal prefix;
        // fold in the 1/sqrt(dh).
        let arow = &hs.attn[t * t_len..t * t_len + t + 1];
        let zrow = &mut dz[t * t_len..t * t_len + t + 1];
        if dropped {
            for (dzv, &m) in zrow.iter_mut().zip(&hs.amask[t * t_len..]) {
                *dzv *= m;
            }
        }
        let mut s = T::zero();
        for (da, &a) in zrow.iter().zip(arow) {
            s += *da * a;
        }
        for (dzv, &a) in zrow.iter_mut().zip(arow) {
            *dzv = a * (*dzv - s) * scale;
        }
    }

    // dQ, dK through the bilinear score, then un-rotate.
    let mut dq = vec![T::zero(); t_len * dh];
    let mut dk = vec![T::zero(); t_len * dh];
    causal_mix(&mut dq, &dz, &hs.k, t_len, dh);
    causal_mix_rev(&mut dk, &transposed(&dz, t_len, t_len), &hs.q, t_len, dh);
    for t in 0..t_len {
        params.rope().rotate_inv(&mut dq[t * dh..(t + 1) * dh], t);
        params.rope().rotate_inv(&mut dk[t * dh..(t + 1) * dh], t);
    }

    matmul_atb(&mut grad[wq_off..wq_off + d * dh], xhat, &dq, t_len, d, dh);
    matmul_atb(&mut grad[wk_off..wk_off + d * dh], xhat, &dk, t_len, d, dh);
    matmul_atb(&mut grad[wv_off..wv_off + d * dh], xhat, &dv, t_len, d, dh);
    matmul_abt(dxhat, &dq, params.slice(wq_off, d * dh), t_len, dh, d);
    matmul_abt(dxhat, &dk, params.slice(wk_off, d * dh), t_len, dh, d);
    matmul_abt(dxhat, &dv, params.slice(wv_off, d * dh), t_len, dh, d);
}

/// LayerNorm backward: adds parameter grads and the input gradient.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Real>(
    dxhat: &[T],
    n: &[T],
    inv_std: &[T],
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
    t_len: usize,
    d: usize,
) {
    let inv_d = T::one() / T::from_f64(d as f64);
    for t in 0..t_len {
        let dh_row = &dxhat[t * d..(t + 1) * d];
        let nrow = &n[t * d..(t + 1) * d];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for i in 0..d {
            dgain[i] += dh_row[i] * nrow[i];
            dbias[i] += dh_row[i];
            let dn = dh_row[i] * gain[i];
            m1 += dn;
            m2 += dn * nrow[i];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let istd = inv_std[t];
        let xrow = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            let dn = dh_row[i] * gain[i];
            xrow[i] += istd * (dn - m1 - nrow[i] * m2);
        }
    }
}

/// Two disjoint mutable grad slices for a LayerNorm's gain and bias.
fn grad_pair<T: Copy>(grad: &mut [T], goff: usize, boff: usize, d: usize) -> (&mut [T], &mut [T]) {
    assert!(goff + d <= boff || boff + d <= goff);
    if goff < boff {
        let (a, b) = grad.split_at_mut(boff);
        (&mut a[goff..goff + d], &mut b[..d])
    } else {
        let (a, b) = grad.split_at_mut(goff);
        (&mut b[..d], &mut a[boff..boff + d])
    }
}
