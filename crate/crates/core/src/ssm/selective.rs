//! Differentiable selective scan and causal depthwise convolution.

use diffkit::{Tensor, Var};

use super::evaluator::{ScanInputs, SsmEvaluator};
use crate::error::{Result, ZigmaError};

fn dims3(op: &str, v: &Tensor) -> Result<(usize, usize, usize)> {
    match *v.shape() {
        [b, l, c] => Ok((b, l, c)),
        ref s => Err(ZigmaError::Config(format!("{op}: expected [batch, len, channels], got {s:?}"))),
    }
}

/// Selective scan over `u: [B, L, Di]` with per-token `delta: [B, L, Di]`,
/// `b`, `c: [B, L, N]`, diagonal `a: [Di, N]` (already negative) and skip
/// `d: [Di]`. The forward pass uses `eval`; the backward pass runs the
/// adjoint recurrence `g_k = C_k dy_k + Ā_{k+1} g_{k+1}` in reverse.
pub fn selective_scan<'t>(
    eval: &dyn SsmEvaluator,
    u: Var<'t>,
    delta: Var<'t>,
    a: Var<'t>,
    b: Var<'t>,
    c: Var<'t>,
    d: Var<'t>,
) -> Result<Var<'t>> {
    let (uv, dv, av, bv, cv, skip) = (u.value(), delta.value(), a.value(), b.value(), c.value(), d.value());
    let (batch, len, channels) = dims3("selective_scan", &uv)?;
    let state = av.shape().last().copied().unwrap_or(0);
    let inp = ScanInputs {
        batch,
        len,
        channels,
        state,
        u: uv.data(),
        delta: dv.data(),
        a: av.data(),
        b: bv.data(),
        c: cv.data(),
        d: skip.data(),
    };
    if dv.shape() != uv.shape() || av.shape() != [channels, state] || bv.shape() != [batch, len, state] || cv.shape() != bv.shape() {
        return Err(ZigmaError::Config(format!(
            "selective_scan shapes: u {:?}, delta {:?}, A {:?}, B {:?}, C {:?}",
            uv.shape(),
            dv.shape(),
            av.shape(),
            bv.shape(),
            cv.shape()
        )));
    }
    let tape = u.tape();
    let keep = tape.is_recording();
    let mut states = if keep { vec![0.0; batch * len * channels * state] } else { Vec::new() };
    let y = eval.run(&inp, keep.then_some(&mut states[..]))?;
    let out = Tensor::from_vec(uv.shape(), y)?;
    let saved = [uv, dv, av, bv, cv, skip];
    Ok(tape.custom(&[u, delta, a, b, c, d], out, move |g, need| {
        let [uv, dv, av, bv, cv, skip] = &saved;
        let inp = ScanInputs {
            batch,
            len,
            channels,
            state,
            u: uv.data(),
            delta: dv.data(),
            a: av.data(),
            b: bv.data(),
            c: cv.data(),
            d: skip.data(),
        };
        let grads = scan_backward(&inp, &states, g.data());
        let shapes = [uv.shape(), dv.shape(), av.shape(), bv.shape(), cv.shape(), skip.shape()];
        grads
            .into_iter()
            .zip(shapes)
            .zip(need)
            .map(|((gd, s), &n)| n.then(|| Tensor::from_vec(s, gd).expect("gradient shape")))
            .collect()
    }))
}

/// Gradients for `(u, delta, A, B, C, D)` given all forward states.
fn scan_backward(inp: &ScanInputs<'_>, states: &[f64], dy: &[f64]) -> [Vec<f64>; 6] {
    let (l, dch, n) = (inp.len, inp.channels, inp.state);
    let mut du = vec![0.0; inp.u.len()];
    let mut ddelta = vec![0.0; inp.delta.len()];
    let mut da = vec![0.0; inp.a.len()];
    let mut db = vec![0.0; inp.b.len()];
    let mut dc = vec![0.0; inp.c.len()];
    let mut dd = vec![0.0; inp.d.len()];
    let mut gh = vec![0.0; n];
    for bi in 0..inp.batch {
        for ch in 0..dch {
            gh.fill(0.0);
            for k in (0..l).rev() {
                let row = bi * l + k;
                let x = row * dch + ch;
                let (g, uk, dt) = (dy[x], inp.u[x], inp.delta[x]);
                dd[ch] += g * uk;
                let mut gu = g * inp.d[ch];
                let mut gdt = 0.0;
                for s in 0..n {
                    let hk = states[inp.state_index(bi, k, ch, s)];
                    let hprev = if k > 0 { states[inp.state_index(bi, k - 1, ch, s)] } else { 0.0 };
                    let a = inp.a[ch * n + s];
                    let bk = inp.b[row * n + s];
                    dc[row * n + s] += g * hk;
                    // Adjoint of h_k: direct read-out plus what flows back from h_{k+1}
                    // (already folded into gh by the previous iteration).
                    let gk = gh[s] + inp.c[row * n + s] * g;
                    let abar = (dt * a).exp();
                    gu += gk * dt * bk;
                    gdt += gk * (hprev * abar * a + bk * uk);
                    da[ch * n + s] += gk * hprev * abar * dt;
                    db[row * n + s] += gk * dt * uk;
                    gh[s] = gk * abar;
                }
                du[x] = gu;
                ddelta[x] = gdt;
            }
        }
    }
    [du, ddelta, da, db, dc, dd]
}

/// Depthwise causal convolution: `y[b,l,c] = bias[c] + Σ_j w[c,j] x[b, l-K+1+j, c]`
/// with zeros before the start of the sequence. `x: [B, L, C]`, `w: [C, K]`.
pub fn causal_conv<'t>(x: Var<'t>, w: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let (xv, wv, bv) = (x.value(), w.value(), bias.value());
    let (batch, len, ch) = dims3("causal_conv", &xv)?;
    let k = match *wv.shape() {
        [c, k] if c == ch && k >= 1 => k,
        ref s => return Err(ZigmaError::Config(format!("causal_conv: kernel {s:?} for {ch} channels"))),
    };
    if bv.shape() != [ch] {
        return Err(ZigmaError::Config(format!("causal_conv: bias {:?} for {ch} channels", bv.shape())));
    }
    let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
    let mut y = vec![0.0; xd.len()];
    for bi in 0..batch {
        for l in 0..len {
            let out = &mut y[(bi * len + l) * ch..(bi * len + l + 1) * ch];
            out.copy_from_slice(bd);
            for j in 0..k {
                let Some(src) = (l + j + 1).checked_sub(k) else { continue };
                let row = &xd[(bi * len + src) * ch..(bi * len + src + 1) * ch];
                for c in 0..ch {
                    out[c] += wd[c * k + j] * row[c];
                }
            }
        }
    }
    let out = Tensor::from_vec(xv.shape(), y)?;
    Ok(x.tape().custom(&[x, w, bias], out, move |g, _| {
        let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
        let mut gx = vec![0.0; xd.len()];
        let mut gw = vec![0.0; wd.len()];
        let mut gb = vec![0.0; ch];
        for bi in 0..batch {
            for l in 0..len {
                let go = &gd[(bi * len + l) * ch..(bi * len + l + 1) * ch];
                for c in 0..ch {
                    gb[c] += go[c];
                }
                for j in 0..k {
                    let Some(src) = (l + j + 1).checked_sub(k) else { continue };
                    let base = (bi * len + src) * ch;
                    for c in 0..ch {
                        gx[base + c] += wd[c * k + j] * go[c];
                        gw[c * k + j] += xd[base + c] * go[c];
                    }
                }
            }
        }
        vec![
            Some(Tensor::from_vec(xv.shape(), gx).expect("shape")),
            Some(Tensor::from_vec(wv.shape(), gw).expect("shape")),
            Some(Tensor::from_vec(&[ch], gb).expect("shape")),
        ]
    }))
}

/// Reverses the sequence axis of `[B, L, C]`.
pub fn flip_seq(x: Var<'_>) -> Result<Var<'_>> {
    let shape = x.shape();
    let (b, l, c) = match *shape {
        [b, l, c] => (b, l, c),
        _ => return Err(ZigmaError::Config(format!("flip: expected [batch, len, channels], got {shape:?}"))),
    };
    let index: Vec<usize> = (0..b).flat_map(|bi| (0..l).rev().map(move |k| bi * l + k)).collect();
    Ok(x.reshape(&[b * l, c])?.gather_rows(&index)?.reshape(&shape)?)
}
