//! Numeric kernels behind the graph ops. All buffers are row-major
//! `[C, H, W]` (or flat vectors for dense layers).

/// Copies `x` ([c, h, w]) into a zero-padded buffer ([c, h+2p, w+2p]).
pub(crate) fn pad_channels(x: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return x.to_vec();
    }
    let hp = h + 2 * p;
    let wp = w + 2 * p;
    let mut xp = vec![0.0; c * hp * wp];
    for ic in 0..c {
        for y in 0..h {
            let src = &x[(ic * h + y) * w..][..w];
            let dst = &mut xp[(ic * hp + y + p) * wp + p..][..w];
            dst.copy_from_slice(src);
        }
    }
    xp
}

pub(crate) fn conv2d_out_dim(inp: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = inp + 2 * padding;
    if span < k || (span - k) % stride != 0 {
        return None;
    }
    Some((span - k) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    c_out: usize,
    k: usize,
    bias: &[f64],
    stride: usize,
    padding: usize,
    out: &mut [f64],
    h_out: usize,
    w_out: usize,
) {
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    let xp = pad_channels(x, c_in, h, w, padding);
    for oc in 0..c_out {
        out[oc * h_out * w_out..(oc + 1) * h_out * w_out].fill(bias[oc]);
        for ic in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[((oc * c_in + ic) * k + ky) * k + kx];
                    for oy in 0..h_out {
                        let xrow = &xp[(ic * hp + oy * stride + ky) * wp..][..wp];
                        let orow = &mut out[(oc * h_out + oy) * w_out..][..w_out];
                        if stride == 1 {
                            for (o, xv) in orow.iter_mut().zip(&xrow[kx..kx + w_out]) {
                                *o += wv * xv;
                            }
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate() {
                                *o += wv * xrow[ox * stride + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    gout: &[f64],
    h_out: usize,
    w_out: usize,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;

    if let Some(db) = db {
        for oc in 0..c_out {
            let g = &gout[oc * h_out * w_out..(oc + 1) * h_out * w_out];
            db[oc] += g.iter().sum::<f64>();
        }
    }

    let xp = if dw.is_some() {
        Some(pad_channels(x, c_in, h, w, padding))
    } else {
        None
    };
    let mut dxp = if dx.is_some() {
        Some(vec![0.0; c_in * hp * wp])
    } else {
        None
    };

    for oc in 0..c_out {
        for ic in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((oc * c_in + ic) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let mut wacc = 0.0;
                    for oy in 0..h_out {
                        let grow = &gout[(oc * h_out + oy) * w_out..][..w_out];
                        let prow = (ic * hp + oy * stride + ky) * wp;
                        if let Some(xp) = &xp {
                            let xrow = &xp[prow..][..wp];
                            if stride == 1 {
                                wacc += grow
                                    .iter()
                                    .zip(&xrow[kx..kx + w_out])
                                    .map(|(g, xv)| g * xv)
                                    .sum::<f64>();
                            } else {
                                for (ox, g) in grow.iter().enumerate() {
                                    wacc += g * xrow[ox * stride + kx];
                                }
                            }
                        }
                        if let Some(dxp) = dxp.as_deref_mut() {
                            let dxrow = &mut dxp[prow..][..wp];
                            if stride == 1 {
                                for (d, g) in dxrow[kx..kx + w_out].iter_mut().zip(grow) {
                                    *d += wv * g;
                                }
                            } else {
                                for (ox, g) in grow.iter().enumerate() {
                                    dxrow[ox * stride + kx] += wv * g;
                                }
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }

    if let (Some(dx), Some(dxp)) = (dx.as_deref_mut(), dxp) {
        if padding == 0 {
            for (d, s) in dx.iter_mut().zip(&dxp) {
                *d += s;
            }
        } else {
            for ic in 0..c_in {
                for y in 0..h {
                    let src = &dxp[(ic * hp + y + padding) * wp + padding..][..w];
                    let dst = &mut dx[(ic * h + y) * w..][..w];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling with stride 2; records the flat input index of each
/// window maximum (first occurrence wins on ties).
pub(crate) fn maxpool2x2_forward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
    argmax: &mut Vec<u32>,
) {
    let ho = h / 2;
    let wo = w / 2;
    argmax.clear();
    argmax.reserve(c * ho * wo);
    for ic in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (ic * h + oy * 2) * w + ox * 2;
                let idxs = [base, base + 1, base + w, base + w + 1];
                let mut best = idxs[0];
                let mut bv = x[idxs[0]];
                for &i in &idxs[1..] {
                    if x[i] > bv {
                        bv = x[i];
                        best = i;
                    }
                }
                out[(ic * ho + oy) * wo + ox] = bv;
                argmax.push(best as u32);
            }
        }
    }
}

pub(crate) fn avgpool2x2_forward(x: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let ho = h / 2;
    let wo = w / 2;
    for ic in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (ic * h + oy * 2) * w + ox * 2;
                out[(ic * ho + oy) * wo + ox] =
                    0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
            }
        }
    }
}

pub(crate) fn upsample2x_forward(x: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let ho = h * 2;
    let wo = w * 2;
    for ic in 0..c {
        for oy in 0..ho {
            let srow = &x[(ic * h + oy / 2) * w..][..w];
            let drow = &mut out[(ic * ho + oy) * wo..][..wo];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / 2];
            }
        }
    }
}

pub(crate) fn upsample2x_backward(gout: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let ho = h * 2;
    let wo = w * 2;
    for ic in 0..c {
        for oy in 0..ho {
            let grow = &gout[(ic * ho + oy) * wo..][..wo];
            let drow = &mut dx[(ic * h + oy / 2) * w..][..w];
            for (ox, g) in grow.iter().enumerate() {
                drow[ox / 2] += g;
            }
        }
    }
}

/// y = W x + b with W stored row-major [out, in].
pub(crate) fn dense_forward(x: &[f64], wt: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &wt[i * n_in..][..n_in];
        let mut acc = bias[i];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *o = acc;
    }
}

pub(crate) fn dense_backward(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let n_in = x.len();
    for (i, g) in gout.iter().enumerate() {
        let row = &wt[i * n_in..][..n_in];
        if let Some(dx) = dx.as_deref_mut() {
            for (d, wv) in dx.iter_mut().zip(row) {
                *d += g * wv;
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let drow = &mut dw[i * n_in..][..n_in];
            for (d, xv) in drow.iter_mut().zip(x) {
                *d += g * xv;
            }
        }
    }
    if let Some(db) = db {
        for (d, g) in db.iter_mut().zip(gout) {
            *d += g;
        }
    }
}
