//! Per-sample kernels. All reductions run in a fixed index order so results are
//! bit-reproducible.

/// `out[o,y,x] = b[o] + Σ_c Σ_ky Σ_kx w[o,c,ky,kx]·in[c,y+ky,x+kx]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    (kh, kw): (usize, usize),
    out: &mut [f64],
) {
    let c_out = bias.len();
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    for o in 0..c_out {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias[o]);
        for c in 0..c_in {
            let src = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight[((o * c_in + c) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..oh {
                        let row = &src[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                        let dst = &mut plane[y * ow..(y + 1) * ow];
                        for (d, s) in dst.iter_mut().zip(row) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients into `dweight`/`dbias`, and (when given)
/// writes the input gradient into `dinput`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    weight: &[f64],
    (kh, kw): (usize, usize),
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let c_out = dbias.len();
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    if let Some(di) = dinput.as_deref_mut() {
        di.fill(0.0);
    }
    for o in 0..c_out {
        let g = &dout[o * oh * ow..(o + 1) * oh * ow];
        dbias[o] += g.iter().sum::<f64>();
        for c in 0..c_in {
            let src = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((o * c_in + c) * kh + ky) * kw + kx;
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let row = &src[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                        let grow = &g[y * ow..(y + 1) * ow];
                        for (s, d) in row.iter().zip(grow) {
                            acc += s * d;
                        }
                    }
                    dweight[widx] += acc;
                    if let Some(di) = dinput.as_deref_mut() {
                        let wv = weight[widx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dst = &mut di[c * h * w..(c + 1) * h * w];
                        for y in 0..oh {
                            let drow = &mut dst[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                            let grow = &g[y * ow..(y + 1) * ow];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn linear_forward(input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_in = input.len();
    for (o, dst) in out.iter_mut().enumerate() {
        let row = &weight[o * n_in..(o + 1) * n_in];
        let mut acc = bias[o];
        for (wv, x) in row.iter().zip(input) {
            acc += wv * x;
        }
        *dst = acc;
    }
}

pub fn linear_backward(
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    dinput: Option<&mut [f64]>,
) {
    let n_in = input.len();
    for (o, &g) in dout.iter().enumerate() {
        dbias[o] += g;
        let drow = &mut dweight[o * n_in..(o + 1) * n_in];
        for (d, x) in drow.iter_mut().zip(input) {
            *d += g * x;
        }
    }
    if let Some(di) = dinput {
        di.fill(0.0);
        for (o, &g) in dout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &weight[o * n_in..(o + 1) * n_in];
            for (d, wv) in di.iter_mut().zip(row) {
                *d += wv * g;
            }
        }
    }
}

/// Index (into `input`) of the first maximum of each 2×2 window.
fn pool_argmax(input: &[f64], c: usize, h: usize, w: usize, oy: usize, ox: usize) -> usize {
    let base = c * h * w;
    let mut best = base + (2 * oy) * w + 2 * ox;
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
        if input[idx] > input[best] {
            best = idx;
        }
    }
    best
}

pub fn maxpool_forward(input: &[f64], (c, h, w): (usize, usize, usize), out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[(ch * oh + oy) * ow + ox] = input[pool_argmax(input, ch, h, w, oy, ox)];
            }
        }
    }
}

pub fn maxpool_backward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    dout: &[f64],
    dinput: &mut [f64],
) {
    let (oh, ow) = (h / 2, w / 2);
    dinput.fill(0.0);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                dinput[pool_argmax(input, ch, h, w, oy, ox)] += dout[(ch * oh + oy) * ow + ox];
            }
        }
    }
}

/// Per-sample loss and `∂loss/∂logits` (unscaled by batch size).
pub fn softmax_cross_entropy(logits: &[f64], label: usize, dlogits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (d, &z) in dlogits.iter_mut().zip(logits) {
        *d = (z - max).exp();
        denom += *d;
    }
    for d in dlogits.iter_mut() {
        *d /= denom;
    }
    dlogits[label] -= 1.0;
    max + denom.ln() - logits[label]
}
