//! Forward and backward passes. Everything is explicit loops over flat
//! row-major buffers; gradients are accumulated into a flat vector that
//! mirrors the parameter layout.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::{Assembled, ModelParameters, StreamItem};
use crate::num::Scalar;

const LN_EPS: f64 = 1e-5;

pub(crate) type DropCtx<'a> = (&'a mut ChaCha20Rng, f64);

// ---------------------------------------------------------------------------
// Caches
// ---------------------------------------------------------------------------

pub(crate) struct LnCache<F> {
    xhat: Vec<F>,    // t*d
    inv_std: Vec<F>, // t
}

pub(crate) struct AttnCache<F> {
    q: Vec<F>,      // tq*d
    k: Vec<F>,      // tk*d
    v: Vec<F>,      // tk*d
    a: Vec<F>,      // heads*tq*tk softmax weights (zero where masked)
    concat: Vec<F>, // tq*d, input to wo
    drop: Option<Vec<F>>,
}

pub(crate) struct FfCache<F> {
    ln: LnCache<F>,
    h_pre: Vec<F>, // t*ff, pre-activation
    h_act: Vec<F>, // t*ff, post-GELU
    drop: Option<Vec<F>>,
}

pub(crate) struct EncBlockCache<F> {
    ln1: LnCache<F>,
    attn: AttnCache<F>,
    ff: FfCache<F>,
}

pub(crate) struct DecBlockCache<F> {
    ln1: LnCache<F>,
    self_attn: AttnCache<F>,
    ln2: LnCache<F>,
    cross: AttnCache<F>,
    ff: FfCache<F>,
}

pub(crate) struct Pass<F> {
    pub logits: Vec<F>, // tdec * vocab
    enc_drop0: Option<Vec<F>>,
    dec_drop0: Option<Vec<F>>,
    enc_layers: Vec<EncBlockCache<F>>,
    enc_ln_f: LnCache<F>,
    enc_out: Vec<F>, // tenc * d
    dec_layers: Vec<DecBlockCache<F>>,
    dec_ln_f: LnCache<F>,
    dec_hf: Vec<F>, // tdec * d, input to the output projection
}

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

/// y[t, dout] = x[t, din] @ w[din, dout]
fn matmul<F: Scalar>(x: &[F], w: &[F], t: usize, din: usize, dout: usize) -> Vec<F> {
    let mut y = vec![F::zero(); t * dout];
    for r in 0..t {
        for i in 0..din {
            let xi = x[r * din + i];
            if xi == F::zero() {
                continue;
            }
            let wrow = &w[i * dout..(i + 1) * dout];
            let yrow = &mut y[r * dout..(r + 1) * dout];
            for (yo, &wo) in yrow.iter_mut().zip(wrow) {
                *yo += xi * wo;
            }
        }
    }
    y
}

/// Accumulates dw += x^T dy and dx += dy w^T.
fn matmul_back<F: Scalar>(
    x: &[F],
    w: &[F],
    dy: &[F],
    t: usize,
    din: usize,
    dout: usize,
    dw: &mut [F],
    dx: &mut [F],
) {
    for r in 0..t {
        let dyrow = &dy[r * dout..(r + 1) * dout];
        for i in 0..din {
            let xi = x[r * din + i];
            let wrow = &w[i * dout..(i + 1) * dout];
            let dwrow = &mut dw[i * dout..(i + 1) * dout];
            let mut acc = F::zero();
            for o in 0..dout {
                dwrow[o] += xi * dyrow[o];
                acc += wrow[o] * dyrow[o];
            }
            dx[r * din + i] += acc;
        }
    }
}

fn layernorm<F: Scalar>(x: &[F], g: &[F], b: &[F], t: usize, d: usize) -> (Vec<F>, LnCache<F>) {
    let mut y = vec![F::zero(); t * d];
    let mut xhat = vec![F::zero(); t * d];
    let mut inv_std = vec![F::zero(); t];
    let fd = F::from_f64_lossy(d as f64);
    let eps = F::from_f64_lossy(LN_EPS);
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        let mu = row.iter().copied().sum::<F>() / fd;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / fd;
        let inv = (var + eps).sqrt().recip();
        inv_std[r] = inv;
        for i in 0..d {
            let xh = (row[i] - mu) * inv;
            xhat[r * d + i] = xh;
            y[r * d + i] = g[i] * xh + b[i];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Accumulates dg, db and returns dx.
fn layernorm_back<F: Scalar>(
    cache: &LnCache<F>,
    g: &[F],
    dy: &[F],
    t: usize,
    d: usize,
    dg: &mut [F],
    db: &mut [F],
) -> Vec<F> {
    let mut dx = vec![F::zero(); t * d];
    let fd = F::from_f64_lossy(d as f64);
    for r in 0..t {
        let xhat = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for i in 0..d {
            dg[i] += dyr[i] * xhat[i];
            db[i] += dyr[i];
            let dxh = dyr[i] * g[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[i];
        }
        mean_dxhat /= fd;
        mean_dxhat_xhat /= fd;
        let inv = cache.inv_std[r];
        for i in 0..d {
            let dxh = dyr[i] * g[i];
            dx[r * d + i] = inv * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Inverted dropout in place; returns the multiplier mask.
fn dropout<F: Scalar>(x: &mut [F], ctx: &mut Option<DropCtx>) -> Option<Vec<F>> {
    let (rng, rate) = match ctx {
        Some((rng, rate)) if *rate > 0.0 => (rng, *rate),
        _ => return None,
    };
    let keep = F::from_f64_lossy(1.0 / (1.0 - rate));
    let mask: Vec<F> = x
        .iter()
        .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
        .collect();
    for (v, &m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

fn apply_drop_back<F: Scalar>(dy: &mut [F], mask: &Option<Vec<F>>) {
    if let Some(mask) = mask {
        for (d, &m) in dy.iter_mut().zip(mask) {
            *d *= m;
        }
    }
}

/// Multi-head attention. Queries come from `xq` (tq rows), keys/values from
/// `xkv` (tk rows). `causal` restricts position t to keys 0..=t.
#[allow(clippy::too_many_arguments)]
fn attention<F: Scalar>(
    xq: &[F],
    xkv: &[F],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    causal: bool,
    wq: &[F],
    wk: &[F],
    wv: &[F],
    wo: &[F],
) -> (Vec<F>, AttnCache<F>) {
    let dh = d / heads;
    let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let q = matmul(xq, wq, tq, d, d);
    let k = matmul(xkv, wk, tk, d, d);
    let v = matmul(xkv, wv, tk, d, d);
    let mut a = vec![F::zero(); heads * tq * tk];
    let mut concat = vec![F::zero(); tq * d];
    for h in 0..heads {
        let col = h * dh;
        for t in 0..tq {
            let limit = if causal { t + 1 } else { tk };
            let qrow = &q[t * d + col..t * d + col + dh];
            let arow = &mut a[h * tq * tk + t * tk..h * tq * tk + t * tk + tk];
            let mut max = F::neg_infinity();
            for u in 0..limit {
                let krow = &k[u * d + col..u * d + col + dh];
                let mut s = F::zero();
                for i in 0..dh {
                    s += qrow[i] * krow[i];
                }
                s *= scale;
                arow[u] = s;
                if s > max {
                    max = s;
                }
            }
            let mut z = F::zero();
            for item in arow.iter_mut().take(limit) {
                *item = (*item - max).exp();
                z += *item;
            }
            for item in arow.iter_mut().take(limit) {
                *item /= z;
            }
            let orow = &mut concat[t * d + col..t * d + col + dh];
            for u in 0..limit {
                let w = arow[u];
                let vrow = &v[u * d + col..u * d + col + dh];
                for i in 0..dh {
                    orow[i] += w * vrow[i];
                }
            }
        }
    }
    let out = matmul(&concat, wo, tq, d, d);
    (out, AttnCache { q, k, v, a, concat, drop: None })
}

/// Backward through attention. Returns (dxq, dxkv); parameter gradients are
/// accumulated into the dw slices.
#[allow(clippy::too_many_arguments)]
fn attention_back<F: Scalar>(
    cache: &AttnCache<F>,
    xq: &[F],
    xkv: &[F],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    wq: &[F],
    wk: &[F],
    wv: &[F],
    wo: &[F],
    dout: &[F],
    dwq: &mut [F],
    dwk: &mut [F],
    dwv: &mut [F],
    dwo: &mut [F],
) -> (Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut dconcat = vec![F::zero(); tq * d];
    matmul_back(&cache.concat, wo, dout, tq, d, d, dwo, &mut dconcat);
    let mut dq = vec![F::zero(); tq * d];
    let mut dk = vec![F::zero(); tk * d];
    let mut dv = vec![F::zero(); tk * d];
    for h in 0..heads {
        let col = h * dh;
        for t in 0..tq {
            let arow = &cache.a[h * tq * tk + t * tk..h * tq * tk + (t + 1) * tk];
            let dorow = &dconcat[t * d + col..t * d + col + dh];
            // da and the softmax jacobian, fused.
            let mut da = vec![F::zero(); tk];
            let mut dot = F::zero();
            for u in 0..tk {
                if arow[u] == F::zero() {
                    continue;
                }
                let vrow = &cache.v[u * d + col..u * d + col + dh];
                let mut acc = F::zero();
                for i in 0..dh {
                    acc += dorow[i] * vrow[i];
                    dv[u * d + col + i] += arow[u] * dorow[i];
                }
                da[u] = acc;
                dot += arow[u] * acc;
            }
            for u in 0..tk {
                if arow[u] == F::zero() {
                    continue;
                }
                let ds = arow[u] * (da[u] - dot) * scale;
                let krow = &cache.k[u * d + col..u * d + col + dh];
                let qrow = &cache.q[t * d + col..t * d + col + dh];
                for i in 0..dh {
                    dq[t * d + col + i] += ds * krow[i];
                    dk[u * d + col + i] += ds * qrow[i];
                }
            }
        }
    }
    let mut dxq = vec![F::zero(); tq * d];
    let mut dxkv = vec![F::zero(); tk * d];
    matmul_back(xq, wq, &dq, tq, d, d, dwq, &mut dxq);
    matmul_back(xkv, wk, &dk, tk, d, d, dwk, &mut dxkv);
    matmul_back(xkv, wv, &dv, tk, d, d, dwv, &mut dxkv);
    (dxq, dxkv)
}

// ---------------------------------------------------------------------------
// Full passes
// ---------------------------------------------------------------------------

fn embed_stream<F: Scalar>(p: &ModelParameters<F>, items: &[StreamItem<F>]) -> Vec<F> {
    let d = p.config.d_model;
    let embed = p.get("embed");
    let pos = p.get("pos");
    let mut x = vec![F::zero(); items.len() * d];
    for (t, item) in items.iter().enumerate() {
        let row = &mut x[t * d..(t + 1) * d];
        match item {
            StreamItem::Token(id) => {
                let id = *id as usize;
                row.copy_from_slice(&embed[id * d..(id + 1) * d]);
            }
            StreamItem::Vector(v) => row.copy_from_slice(v),
        }
        for (xi, &pi) in row.iter_mut().zip(&pos[t * d..(t + 1) * d]) {
            *xi += pi;
        }
    }
    x
}

pub(crate) fn run_forward<F: Scalar>(
    p: &ModelParameters<F>,
    a: &Assembled<F>,
    mut drop: Option<DropCtx>,
) -> Pass<F> {
    let d = p.config.d_model;
    let ff = p.config.d_ff;
    let heads = p.config.n_heads;
    let tenc = a.enc.len();
    let tdec = a.dec.len();

    // Encoder.
    let mut x = embed_stream(p, &a.enc);
    let enc_drop0 = dropout(&mut x, &mut drop);
    let mut enc_layers = Vec::with_capacity(p.config.n_enc_layers);
    for i in 0..p.config.n_enc_layers {
        let pre = format!("enc.{i}");
        let (x_ln, ln1) = layernorm(&x, p.get(&format!("{pre}.ln1.g")), p.get(&format!("{pre}.ln1.b")), tenc, d);
        let (mut attn_out, mut attn) = attention(
            &x_ln, &x_ln, tenc, tenc, d, heads, false,
            p.get(&format!("{pre}.attn.wq")), p.get(&format!("{pre}.attn.wk")),
            p.get(&format!("{pre}.attn.wv")), p.get(&format!("{pre}.attn.wo")),
        );
        attn.drop = dropout(&mut attn_out, &mut drop);
        for (xi, ai) in x.iter_mut().zip(&attn_out) {
            *xi += *ai;
        }
        let (ff_out, ff_cache) = feed_forward(p, &pre, &x, tenc, d, ff, &mut drop);
        for (xi, fi) in x.iter_mut().zip(&ff_out) {
            *xi += *fi;
        }
        enc_layers.push(EncBlockCache { ln1, attn, ff: ff_cache });
    }
    let (enc_out, enc_ln_f) = layernorm(&x, p.get("enc.ln_f.g"), p.get("enc.ln_f.b"), tenc, d);

    // Decoder.
    let mut y = embed_stream(p, &a.dec);
    let dec_drop0 = dropout(&mut y, &mut drop);
    let mut dec_layers = Vec::with_capacity(p.config.n_dec_layers);
    for i in 0..p.config.n_dec_layers {
        let pre = format!("dec.{i}");
        let (y_ln, ln1) = layernorm(&y, p.get(&format!("{pre}.ln1.g")), p.get(&format!("{pre}.ln1.b")), tdec, d);
        let (mut self_out, mut self_attn) = attention(
            &y_ln, &y_ln, tdec, tdec, d, heads, true,
            p.get(&format!("{pre}.self.wq")), p.get(&format!("{pre}.self.wk")),
            p.get(&format!("{pre}.self.wv")), p.get(&format!("{pre}.self.wo")),
        );
        self_attn.drop = dropout(&mut self_out, &mut drop);
        for (yi, si) in y.iter_mut().zip(&self_out) {
            *yi += *si;
        }
        let (y_ln2, ln2) = layernorm(&y, p.get(&format!("{pre}.ln2.g")), p.get(&format!("{pre}.ln2.b")), tdec, d);
        let (mut cross_out, mut cross) = attention(
            &y_ln2, &enc_out, tdec, tenc, d, heads, false,
            p.get(&format!("{pre}.cross.wq")), p.get(&format!("{pre}.cross.wk")),
            p.get(&format!("{pre}.cross.wv")), p.get(&format!("{pre}.cross.wo")),
        );
        cross.drop = dropout(&mut cross_out, &mut drop);
        for (yi, ci) in y.iter_mut().zip(&cross_out) {
            *yi += *ci;
        }
        let (ff_out, ff_cache) = feed_forward_named(p, &format!("{pre}.ff"), &format!("{pre}.ln3"), &y, tdec, d, ff, &mut drop);
        for (yi, fi) in y.iter_mut().zip(&ff_out) {
            *yi += *fi;
        }
        dec_layers.push(DecBlockCache { ln1, self_attn, ln2, cross, ff: ff_cache });
    }
    let (dec_hf, dec_ln_f) = layernorm(&y, p.get("dec.ln_f.g"), p.get("dec.ln_f.b"), tdec, d);

    // Output projection against the tied embedding table.
    let embed = p.get("embed");
    let v = p.config.vocab_size;
    let mut logits = vec![F::zero(); tdec * v];
    for t in 0..tdec {
        let hrow = &dec_hf[t * d..(t + 1) * d];
        for id in 0..v {
            let erow = &embed[id * d..(id + 1) * d];
            let mut s = F::zero();
            for i in 0..d {
                s += hrow[i] * erow[i];
            }
            logits[t * v + id] = s;
        }
    }

    Pass {
        logits,
        enc_drop0,
        dec_drop0,
        enc_layers,
        enc_ln_f,
        enc_out,
        dec_layers,
        dec_ln_f,
        dec_hf,
    }
}

fn feed_forward<F: Scalar>(
    p: &ModelParameters<F>,
    layer_prefix: &str,
    x: &[F],
    t: usize,
    d: usize,
    ff: usize,
    drop: &mut Option<DropCtx>,
) -> (Vec<F>, FfCache<F>) {
    feed_forward_named(p, &format!("{layer_prefix}.ff"), &format!("{layer_prefix}.ln2"), x, t, d, ff, drop)
}

#[allow(clippy::too_many_arguments)]
fn feed_forward_named<F: Scalar>(
    p: &ModelParameters<F>,
    ff_name: &str,
    ln_name: &str,
    x: &[F],
    t: usize,
    d: usize,
    ff: usize,
    drop: &mut Option<DropCtx>,
) -> (Vec<F>, FfCache<F>) {
    let (x_ln, ln) = layernorm(x, p.get(&format!("{ln_name}.g")), p.get(&format!("{ln_name}.b")), t, d);
    let mut h_pre = matmul(&x_ln, p.get(&format!("{ff_name}.w1")), t, d, ff);
    let b1 = p.get(&format!("{ff_name}.b1"));
    for r in 0..t {
        for i in 0..ff {
            h_pre[r * ff + i] += b1[i];
        }
    }
    let h_act: Vec<F> = h_pre.iter().map(|&v| gelu(v)).collect();
    let mut out = matmul(&h_act, p.get(&format!("{ff_name}.w2")), t, ff, d);
    let b2 = p.get(&format!("{ff_name}.b2"));
    for r in 0..t {
        for i in 0..d {
            out[r * d + i] += b2[i];
        }
    }
    let drop_mask = dropout(&mut out, drop);
    // Backward rebuilds x_ln from xhat, so only the LN cache is kept.
    let _ = x_ln;
    (out, FfCache { ln, h_pre, h_act, drop: drop_mask })
}

fn rebuild_ln_out<F: Scalar>(xhat: &[F], g: &[F], b: &[F], t: usize, d: usize) -> Vec<F> {
    let mut out = vec![F::zero(); t * d];
    for r in 0..t {
        for i in 0..d {
            out[r * d + i] = g[i] * xhat[r * d + i] + b[i];
        }
    }
    out
}

pub(crate) fn run_backward<F: Scalar>(
    p: &ModelParameters<F>,
    a: &Assembled<F>,
    pass: &Pass<F>,
    dlogits: &[F],
    grads: &mut [F],
) {
    let d = p.config.d_model;
    let ff = p.config.d_ff;
    let heads = p.config.n_heads;
    let v = p.config.vocab_size;
    let tenc = a.enc.len();
    let tdec = a.dec.len();
    let layout = p.layout.clone();
    macro_rules! g {
        ($name:expr) => {
            &mut grads[layout.range($name)]
        };
    }

    // Output projection (tied embeddings).
    let embed = p.get("embed");
    let mut dhf = vec![F::zero(); tdec * d];
    {
        let dembed = g!("embed");
        for t in 0..tdec {
            let hrow = &pass.dec_hf[t * d..(t + 1) * d];
            for id in 0..v {
                let dl = dlogits[t * v + id];
                if dl == F::zero() {
                    continue;
                }
                let erow = &embed[id * d..(id + 1) * d];
                for i in 0..d {
                    dhf[t * d + i] += dl * erow[i];
                    dembed[id * d + i] += dl * hrow[i];
                }
            }
        }
    }

    // Decoder final LN.
    let mut dy = {
        let range_g = layout.range("dec.ln_f.g");
        let range_b = layout.range("dec.ln_f.b");
        let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
        let dx = layernorm_back(&pass.dec_ln_f, p.get("dec.ln_f.g"), &dhf, tdec, d, &mut dg, &mut db);
        add_into(&mut grads[range_g], &dg);
        add_into(&mut grads[range_b], &db);
        dx
    };

    // Decoder blocks in reverse; cross-attention gradients accumulate into
    // the encoder output.
    let mut denc_out = vec![F::zero(); tenc * d];
    for i in (0..p.config.n_dec_layers).rev() {
        let pre = format!("dec.{i}");
        let cache = &pass.dec_layers[i];

        // FF sublayer.
        let mut dff = dy.clone();
        apply_drop_back(&mut dff, &cache.ff.drop);
        back_ff(p, grads, &format!("{pre}.ff"), &format!("{pre}.ln3"), &cache.ff, &dff, tdec, d, ff, &mut dy);

        // Cross-attention sublayer.
        let mut dcross = dy.clone();
        apply_drop_back(&mut dcross, &cache.cross.drop);
        {
            let y_ln2 = rebuild_ln_out(&cache.ln2.xhat, p.get(&format!("{pre}.ln2.g")), p.get(&format!("{pre}.ln2.b")), tdec, d);
            let mut dwq = vec![F::zero(); d * d];
            let mut dwk = vec![F::zero(); d * d];
            let mut dwv = vec![F::zero(); d * d];
            let mut dwo = vec![F::zero(); d * d];
            let (dxq, dxkv) = attention_back(
                &cache.cross, &y_ln2, &pass.enc_out, tdec, tenc, d, heads,
                p.get(&format!("{pre}.cross.wq")), p.get(&format!("{pre}.cross.wk")),
                p.get(&format!("{pre}.cross.wv")), p.get(&format!("{pre}.cross.wo")),
                &dcross, &mut dwq, &mut dwk, &mut dwv, &mut dwo,
            );
            add_into(g!(&format!("{pre}.cross.wq")), &dwq);
            add_into(g!(&format!("{pre}.cross.wk")), &dwk);
            add_into(g!(&format!("{pre}.cross.wv")), &dwv);
            add_into(g!(&format!("{pre}.cross.wo")), &dwo);
            add_into(&mut denc_out, &dxkv);
            let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
            let dx = layernorm_back(&cache.ln2, p.get(&format!("{pre}.ln2.g")), &dxq, tdec, d, &mut dg, &mut db);
            add_into(g!(&format!("{pre}.ln2.g")), &dg);
            add_into(g!(&format!("{pre}.ln2.b")), &db);
            add_into(&mut dy, &dx);
        }

        // Causal self-attention sublayer.
        let mut dself = dy.clone();
        apply_drop_back(&mut dself, &cache.self_attn.drop);
        {
            let y_ln = rebuild_ln_out(&cache.ln1.xhat, p.get(&format!("{pre}.ln1.g")), p.get(&format!("{pre}.ln1.b")), tdec, d);
            let mut dwq = vec![F::zero(); d * d];
            let mut dwk = vec![F::zero(); d * d];
            let mut dwv = vec![F::zero(); d * d];
            let mut dwo = vec![F::zero(); d * d];
            let (dxq, dxkv) = attention_back(
                &cache.self_attn, &y_ln, &y_ln, tdec, tdec, d, heads,
                p.get(&format!("{pre}.self.wq")), p.get(&format!("{pre}.self.wk")),
                p.get(&format!("{pre}.self.wv")), p.get(&format!("{pre}.self.wo")),
                &dself, &mut dwq, &mut dwk, &mut dwv, &mut dwo,
            );
            add_into(g!(&format!("{pre}.self.wq")), &dwq);
            add_into(g!(&format!("{pre}.self.wk")), &dwk);
            add_into(g!(&format!("{pre}.self.wv")), &dwv);
            add_into(g!(&format!("{pre}.self.wo")), &dwo);
            let mut dln_in = dxq;
            add_into(&mut dln_in, &dxkv);
            let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
            let dx = layernorm_back(&cache.ln1, p.get(&format!("{pre}.ln1.g")), &dln_in, tdec, d, &mut dg, &mut db);
            add_into(g!(&format!("{pre}.ln1.g")), &dg);
            add_into(g!(&format!("{pre}.ln1.b")), &db);
            add_into(&mut dy, &dx);
        }
    }

    // Decoder embedding stage.
    apply_drop_back(&mut dy, &pass.dec_drop0);
    back_embed(p, grads, &a.dec, &dy, a, false);

    // Encoder final LN.
    {
        let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
        let dx = layernorm_back(&pass.enc_ln_f, p.get("enc.ln_f.g"), &denc_out, tenc, d, &mut dg, &mut db);
        add_into(g!("enc.ln_f.g"), &dg);
        add_into(g!("enc.ln_f.b"), &db);
        denc_out = dx;
    }

    // Encoder blocks in reverse.
    let mut dx_enc = denc_out;
    for i in (0..p.config.n_enc_layers).rev() {
        let pre = format!("enc.{i}");
        let cache = &pass.enc_layers[i];

        let mut dff = dx_enc.clone();
        apply_drop_back(&mut dff, &cache.ff.drop);
        back_ff(p, grads, &format!("{pre}.ff"), &format!("{pre}.ln2"), &cache.ff, &dff, tenc, d, ff, &mut dx_enc);

        let mut dattn = dx_enc.clone();
        apply_drop_back(&mut dattn, &cache.attn.drop);
        {
            let x_ln = rebuild_ln_out(&cache.ln1.xhat, p.get(&format!("{pre}.ln1.g")), p.get(&format!("{pre}.ln1.b")), tenc, d);
            let mut dwq = vec![F::zero(); d * d];
            let mut dwk = vec![F::zero(); d * d];
            let mut dwv = vec![F::zero(); d * d];
            let mut dwo = vec![F::zero(); d * d];
            let (dxq, dxkv) = attention_back(
                &cache.attn, &x_ln, &x_ln, tenc, tenc, d, heads,
                p.get(&format!("{pre}.attn.wq")), p.get(&format!("{pre}.attn.wk")),
                p.get(&format!("{pre}.attn.wv")), p.get(&format!("{pre}.attn.wo")),
                &dattn, &mut dwq, &mut dwk, &mut dwv, &mut dwo,
            );
            add_into(g!(&format!("{pre}.attn.wq")), &dwq);
            add_into(g!(&format!("{pre}.attn.wk")), &dwk);
            add_into(g!(&format!("{pre}.attn.wv")), &dwv);
            add_into(g!(&format!("{pre}.attn.wo")), &dwo);
            let mut dln_in = dxq;
            add_into(&mut dln_in, &dxkv);
            let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
            let dx = layernorm_back(&cache.ln1, p.get(&format!("{pre}.ln1.g")), &dln_in, tenc, d, &mut dg, &mut db);
            add_into(g!(&format!("{pre}.ln1.g")), &dg);
            add_into(g!(&format!("{pre}.ln1.b")), &db);
            add_into(&mut dx_enc, &dx);
        }
    }

    // Encoder embedding stage.
    apply_drop_back(&mut dx_enc, &pass.enc_drop0);
    back_embed(p, grads, &a.enc, &dx_enc, a, true);
}

// Feed-forward activation: the tanh approximation of GELU. Smooth
// everywhere, which keeps finite-difference gradient checks clean.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_prime<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[allow(clippy::too_many_arguments)]
fn back_ff<F: Scalar>(
    p: &ModelParameters<F>,
    grads: &mut [F],
    ff_name: &str,
    ln_name: &str,
    cache: &FfCache<F>,
    dout: &[F],
    t: usize,
    d: usize,
    ff: usize,
    dx_accum: &mut [F],
) {
    let layout = p.layout.clone();
    // b2 and w2.
    {
        let db2 = &mut grads[layout.range(&format!("{ff_name}.b2"))];
        for r in 0..t {
            for i in 0..d {
                db2[i] += dout[r * d + i];
            }
        }
    }
    let mut dh = vec![F::zero(); t * ff];
    {
        let dw2 = &mut grads[layout.range(&format!("{ff_name}.w2"))];
        matmul_back(&cache.h_act, p.get(&format!("{ff_name}.w2")), dout, t, ff, d, dw2, &mut dh);
    }
    for (dh_i, &pre) in dh.iter_mut().zip(&cache.h_pre) {
        *dh_i *= gelu_prime(pre);
    }
    // b1 and w1.
    {
        let db1 = &mut grads[layout.range(&format!("{ff_name}.b1"))];
        for r in 0..t {
            for i in 0..ff {
                db1[i] += dh[r * ff + i];
            }
        }
    }
    let x_ln = rebuild_ln_out(
        &cache.ln.xhat,
        p.get(&format!("{ln_name}.g")),
        p.get(&format!("{ln_name}.b")),
        t,
        d,
    );
    let mut dx_ln = vec![F::zero(); t * d];
    {
        let dw1 = &mut grads[layout.range(&format!("{ff_name}.w1"))];
        matmul_back(&x_ln, p.get(&format!("{ff_name}.w1")), &dh, t, d, ff, dw1, &mut dx_ln);
    }
    let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
    let dx = layernorm_back(&cache.ln, p.get(&format!("{ln_name}.g")), &dx_ln, t, d, &mut dg, &mut db);
    add_into(&mut grads[layout.range(&format!("{ln_name}.g"))], &dg);
    add_into(&mut grads[layout.range(&format!("{ln_name}.b"))], &db);
    add_into(dx_accum, &dx);
}

/// Routes gradients at the embedding layer into the token embedding table,
/// the positional table, and (for injected vectors) the prompt projections.
fn back_embed<F: Scalar>(
    p: &ModelParameters<F>,
    grads: &mut [F],
    items: &[StreamItem<F>],
    dx: &[F],
    a: &Assembled<F>,
    is_encoder: bool,
) {
    let d = p.config.d_model;
    let layout = p.layout.clone();
    {
        let dpos = &mut grads[layout.range("pos")];
        for t in 0..items.len() {
            for i in 0..d {
                dpos[t * d + i] += dx[t * d + i];
            }
        }
    }
    for (t, item) in items.iter().enumerate() {
        match item {
            StreamItem::Token(id) => {
                let id = *id as usize;
                let dembed = &mut grads[layout.range("embed")];
                for i in 0..d {
                    dembed[id * d + i] += dx[t * d + i];
                }
            }
            StreamItem::Vector(_) => {
                let inj = a
                    .injection
                    .as_ref()
                    .expect("vector stream item without injection metadata");
                debug_assert_eq!(inj.site_is_encoder, is_encoder);
                debug_assert!(t < 3);
                let name = ["prompt.w_year", "prompt.w_month", "prompt.w_day"][t];
                let s = inj.scalars[t];
                let dw = &mut grads[layout.range(name)];
                for i in 0..d {
                    dw[i] += s * dx[t * d + i];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Loss pieces shared with training
// ---------------------------------------------------------------------------

pub(crate) fn log_softmax<F: Scalar>(row: &[F]) -> Vec<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let z: F = row.iter().map(|&x| (x - max).exp()).sum();
    let lz = z.ln() + max;
    row.iter().map(|&x| x - lz).collect()
}

pub(crate) fn cross_entropy<F: Scalar>(row: &[F], target: usize) -> F {
    -log_softmax(row)[target]
}
