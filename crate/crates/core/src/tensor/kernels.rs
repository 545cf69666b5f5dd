//! Raw slice kernels behind the graph operators. Shapes are validated by the
//! caller; these functions only index.

use super::Scalar;

/// `c = a @ b + beta * c` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (usize, usize),
    b: &[T],
    b_strides: (usize, usize),
    beta: T,
    c: &mut [T],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        (rows.saturating_sub(1)) * rs + (cols.saturating_sub(1)) * cs
    };
    if k > 0 {
        assert!(last(m, k, a_strides) < a.len(), "gemm: lhs out of bounds");
        assert!(last(k, n, b_strides) < b.len(), "gemm: rhs out of bounds");
    }
    assert!(last(m, n, c_strides) < c.len(), "gemm: output out of bounds");
    // SAFETY: every reachable offset was bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 20;

impl ConvGeom {
    fn cg(&self) -> usize {
        self.c / self.groups
    }
    fn og(&self) -> usize {
        self.o / self.groups
    }
    fn k(&self) -> usize {
        self.cg() * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
    fn is_depthwise(&self) -> bool {
        self.cg() == 1 && self.og() == 1
    }
    fn chunk(&self) -> usize {
        (COL_BUDGET / self.k().max(1)).clamp(1, self.p())
    }
}

fn im2col<T: Scalar>(xg: &[T], g: &ConvGeom, p0: usize, p1: usize, cols: &mut [T]) {
    let pc = p1 - p0;
    let mut row = 0;
    for ci in 0..g.cg() {
        let plane = &xg[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * pc..(row + 1) * pc];
                for (j, p) in (p0..p1).enumerate() {
                    let oy = p / g.ow;
                    let ox = p % g.ow;
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                    dst[j] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                        plane[iy as usize * g.w + ix as usize]
                    } else {
                        T::zero()
                    };
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, p0: usize, p1: usize, dxg: &mut [T]) {
    let pc = p1 - p0;
    let mut row = 0;
    for ci in 0..g.cg() {
        let base = ci * g.h * g.w;
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * pc..(row + 1) * pc];
                for (j, p) in (p0..p1).enumerate() {
                    let oy = p / g.ow;
                    let ox = p % g.ow;
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                        dxg[base + iy as usize * g.w + ix as usize] += src[j];
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    wt: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let p = g.p();
    let mut out = vec![T::zero(); g.n * g.o * p];
    if g.is_depthwise() {
        depthwise_forward(x, wt, g, &mut out);
    } else {
        let (cg, og, k) = (g.cg(), g.og(), g.k());
        let chunk = g.chunk();
        let mut cols = vec![T::zero(); k * chunk];
        for ni in 0..g.n {
            for gi in 0..g.groups {
                let xg = &x[(ni * g.c + gi * cg) * g.h * g.w..][..cg * g.h * g.w];
                let wg = &wt[gi * og * k..(gi + 1) * og * k];
                let yg = &mut out[(ni * g.o + gi * og) * p..][..og * p];
                if g.is_pointwise() {
                    gemm(og, k, p, wg, (k, 1), xg, (p, 1), T::zero(), yg, (p, 1));
                    continue;
                }
                let mut p0 = 0;
                while p0 < p {
                    let p1 = (p0 + chunk).min(p);
                    let pc = p1 - p0;
                    im2col(xg, g, p0, p1, &mut cols[..k * pc]);
                    gemm(og, k, pc, wg, (k, 1), &cols, (pc, 1), T::zero(), &mut yg[p0..], (p, 1));
                    p0 = p1;
                }
            }
        }
    }
    if let Some(b) = bias {
        for ni in 0..g.n {
            for oi in 0..g.o {
                let bv = b[oi];
                for v in &mut out[(ni * g.o + oi) * p..][..p] {
                    *v += bv;
                }
            }
        }
    }
    out
}

fn depthwise_forward<T: Scalar>(x: &[T], wt: &[T], g: &ConvGeom, out: &mut [T]) {
    let p = g.p();
    for ni in 0..g.n {
        for ci in 0..g.c {
            let plane = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
            let kern = &wt[ci * g.kh * g.kw..][..g.kh * g.kw];
            let dst = &mut out[(ni * g.o + ci) * p..][..p];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = T::zero();
                    for ky in 0..g.kh {
                        let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        let row = &plane[iy as usize * g.w..][..g.w];
                        for kx in 0..g.kw {
                            let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                acc += kern[ky * g.kw + kx] * row[ix as usize];
                            }
                        }
                    }
                    dst[oy * g.ow + ox] = acc;
                }
            }
        }
    }
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let p = g.p();
    let (need_dx, need_dw, need_db) = need;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); wt.len()]);
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.o];
        for ni in 0..g.n {
            for (oi, acc) in db.iter_mut().enumerate() {
                for &v in &dy[(ni * g.o + oi) * p..][..p] {
                    *acc += v;
                }
            }
        }
        db
    });
    if !need_dx && !need_dw {
        return ConvGrads { dx, dw, db };
    }
    if g.is_depthwise() {
        depthwise_backward(x, wt, dy, g, dx.as_deref_mut(), dw.as_deref_mut());
        return ConvGrads { dx, dw, db };
    }
    let (cg, og, k) = (g.cg(), g.og(), g.k());
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); k * chunk];
    let mut dcols = vec![T::zero(); if need_dx { k * chunk } else { 0 }];
    for ni in 0..g.n {
        for gi in 0..g.groups {
            let xoff = (ni * g.c + gi * cg) * g.h * g.w;
            let xg = &x[xoff..][..cg * g.h * g.w];
            let wg = &wt[gi * og * k..(gi + 1) * og * k];
            let dyg = &dy[(ni * g.o + gi * og) * p..][..og * p];
            if g.is_pointwise() {
                if let Some(dw) = dw.as_deref_mut() {
                    // dW[og, k] += dY[og, p] @ X^T[p, k]
                    let dwg = &mut dw[gi * og * k..(gi + 1) * og * k];
                    gemm(og, p, k, dyg, (p, 1), xg, (1, p), T::one(), dwg, (k, 1));
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let dxg = &mut dx[xoff..][..cg * g.h * g.w];
                    gemm(k, og, p, wg, (1, k), dyg, (p, 1), T::one(), dxg, (p, 1));
                }
                continue;
            }
            let mut p0 = 0;
            while p0 < p {
                let p1 = (p0 + chunk).min(p);
                let pc = p1 - p0;
                if let Some(dw) = dw.as_deref_mut() {
                    im2col(xg, g, p0, p1, &mut cols[..k * pc]);
                    let dwg = &mut dw[gi * og * k..(gi + 1) * og * k];
                    gemm(og, pc, k, &dyg[p0..], (p, 1), &cols, (1, pc), T::one(), dwg, (k, 1));
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let dc = &mut dcols[..k * pc];
                    gemm(k, og, pc, wg, (1, k), &dyg[p0..], (p, 1), T::zero(), dc, (pc, 1));
                    col2im_add(dc, g, p0, p1, &mut dx[xoff..][..cg * g.h * g.w]);
                }
                p0 = p1;
            }
        }
    }
    ConvGrads { dx, dw, db }
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    dy: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let p = g.p();
    let kk = g.kh * g.kw;
    for ni in 0..g.n {
        for ci in 0..g.c {
            let off = (ni * g.c + ci) * g.h * g.w;
            let plane = &x[off..][..g.h * g.w];
            let kern = &wt[ci * kk..][..kk];
            let grad = &dy[(ni * g.o + ci) * p..][..p];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gv = grad[oy * g.ow + ox];
                    for ky in 0..g.kh {
                        let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                            if ix < 0 || ix as usize >= g.w {
                                continue;
                            }
                            let idx = iy as usize * g.w + ix as usize;
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[ci * kk + ky * g.kw + kx] += gv * plane[idx];
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[off + idx] += gv * kern[ky * g.kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

/// Batched `softmax(q k^T * scale) v`. Returns the output and the attention
/// probabilities (kept for the backward pass).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    batches: usize,
    l: usize,
    m: usize,
    d: usize,
    scale: T,
) -> (Vec<T>, Vec<T>) {
    let mut probs = vec![T::zero(); batches * l * m];
    let mut out = vec![T::zero(); batches * l * d];
    for b in 0..batches {
        let qb = &q[b * l * d..][..l * d];
        let kb = &k[b * m * d..][..m * d];
        let vb = &v[b * m * d..][..m * d];
        let pb = &mut probs[b * l * m..][..l * m];
        gemm(l, d, m, qb, (d, 1), kb, (1, d), T::zero(), pb, (m, 1));
        for row in pb.chunks_mut(m) {
            let mut mx = T::neg_infinity();
            for s in row.iter_mut() {
                *s *= scale;
                mx = mx.max(*s);
            }
            let mut sum = T::zero();
            for s in row.iter_mut() {
                *s = (*s - mx).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s = *s / sum;
            }
        }
        gemm(l, m, d, pb, (m, 1), vb, (d, 1), T::zero(), &mut out[b * l * d..][..l * d], (d, 1));
    }
    (out, probs)
}

pub(crate) struct AttentionGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    batches: usize,
    l: usize,
    m: usize,
    d: usize,
    scale: T,
) -> AttentionGrads<T> {
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); l * m];
    for b in 0..batches {
        let qb = &q[b * l * d..][..l * d];
        let kb = &k[b * m * d..][..m * d];
        let vb = &v[b * m * d..][..m * d];
        let pb = &probs[b * l * m..][..l * m];
        let gb = &dout[b * l * d..][..l * d];
        // dV = P^T dO
        gemm(m, l, d, pb, (1, m), gb, (d, 1), T::zero(), &mut dv[b * m * d..][..m * d], (d, 1));
        // dP = dO V^T
        gemm(l, d, m, gb, (d, 1), vb, (1, d), T::zero(), &mut ds, (m, 1));
        for (drow, prow) in ds.chunks_mut(m).zip(pb.chunks(m)) {
            let dot = drow.iter().zip(prow).fold(T::zero(), |acc, (&a, &p)| acc + a * p);
            for (dv, &p) in drow.iter_mut().zip(prow) {
                *dv = p * (*dv - dot) * scale;
            }
        }
        gemm(l, m, d, &ds, (m, 1), kb, (d, 1), T::zero(), &mut dq[b * l * d..][..l * d], (d, 1));
        gemm(m, l, d, &ds, (1, m), qb, (d, 1), T::zero(), &mut dk[b * m * d..][..m * d], (d, 1));
    }
    AttentionGrads { dq, dk, dv }
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// Normalizes each contiguous row of length `n`; returns output, per-row mean
/// and reciprocal standard deviation.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    n: usize,
    gain: &[T],
    offset: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / n;
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let nf = T::of(n as f64);
    for (xr, yr) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mean = xr.iter().copied().sum::<T>() / nf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rstd = T::one() / (var + eps).sqrt();
        for i in 0..n {
            yr[i] = (xr[i] - mean) * rstd * gain[i] + offset[i];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &[T],
    n: usize,
    gain: &[T],
    means: &[T],
    rstds: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dg = vec![T::zero(); n];
    let mut db = vec![T::zero(); n];
    let nf = T::of(n as f64);
    for (r, ((xr, gr), dxr)) in x.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
        let (mean, rstd) = (means[r], rstds[r]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..n {
            let xhat = (xr[i] - mean) * rstd;
            let dxhat = gr[i] * gain[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dg[i] += gr[i] * xhat;
            db[i] += gr[i];
        }
        for i in 0..n {
            let xhat = (xr[i] - mean) * rstd;
            let dxhat = gr[i] * gain[i];
            dxr[i] = rstd * (dxhat - sum_dxhat / nf - xhat * sum_dxhat_xhat / nf);
        }
    }
    (dx, dg, db)
}

/// Per-channel statistics of an NCHW tensor: (mean, biased variance).
pub(crate) fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            s += x[(ni * c + ci) * hw..][..hw].iter().copied().sum::<T>();
        }
        let mu = s / count;
        let mut v = T::zero();
        for ni in 0..n {
            for &e in &x[(ni * c + ci) * hw..][..hw] {
                v += (e - mu) * (e - mu);
            }
        }
        mean[ci] = mu;
        var[ci] = v / count;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_apply<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[T],
    rstd: &[T],
    gain: &[T],
    offset: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, r, g, b) = (mean[ci], rstd[ci], gain[ci], offset[ci]);
            for (o, &v) in out[base..base + hw].iter_mut().zip(&x[base..base + hw]) {
                *o = (v - mu) * r * g + b;
            }
        }
    }
    out
}

/// Backward of batch normalization. With `batch_stats` the statistics are
/// functions of `x`; otherwise they are constants (evaluation mode).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[T],
    rstd: &[T],
    gain: &[T],
    dy: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dg = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    let count = T::of((n * hw) as f64);
    for ci in 0..c {
        let (mu, r, g) = (mean[ci], rstd[ci], gain[ci]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                let xhat = (x[i] - mu) * r;
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * xhat;
            }
        }
        dg[ci] = sum_dy_xhat;
        db[ci] = sum_dy;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                dx[i] = if batch_stats {
                    let xhat = (x[i] - mu) * r;
                    g * r * (dy[i] - sum_dy / count - xhat * sum_dy_xhat / count)
                } else {
                    g * r * dy[i]
                };
            }
        }
    }
    (dx, dg, db)
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

/// Half-pixel bilinear taps along one axis: (lower index, upper index, weight of upper).
pub(crate) fn bilinear_taps(input: usize, output: usize, scale: f64) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (oh, ow) = (h * s, w * s);
    let ty = bilinear_taps(h, oh, s as f64);
    let tx = bilinear_taps(w, ow, s as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..][..h * w];
        let dst = &mut out[pl * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                dst[oy * ow + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (oh, ow) = (h * s, w * s);
    let ty = bilinear_taps(h, oh, s as f64);
    let tx = bilinear_taps(w, ow, s as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let src = &dy[pl * oh * ow..][..oh * ow];
        let dst = &mut dx[pl * h * w..][..h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let gv = src[oy * ow + ox];
                let top = gv * (T::one() - ly);
                let bot = gv * ly;
                dst[y0 * w + x0] += top * (T::one() - lx);
                dst[y0 * w + x1] += top * lx;
                dst[y1 * w + x0] += bot * (T::one() - lx);
                dst[y1 * w + x1] += bot * lx;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// layout
// ---------------------------------------------------------------------------

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Output shape and data of `x.permute(perm)`.
pub(crate) fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        for j in 0..inner {
            out.push(x[off + j * inner_stride]);
        }
        // advance the outer multi-index
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

/// For each element of `out_shape`, the linear index of the broadcast source
/// element in `in_shape` (numpy alignment).
pub(crate) fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let in_strides = strides_of(in_shape);
    let src: Vec<usize> = (0..rank)
        .map(|ax| {
            if ax < pad || in_shape[ax - pad] == 1 {
                0
            } else {
                in_strides[ax - pad]
            }
        })
        .collect();
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
pub(crate) fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, a, inner) = around_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * a * inner + j * inner + i;
            let mx = (0..a).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let sum = (0..a).map(|j| (x[at(j)] - mx).exp()).sum::<T>();
            let lse = mx + sum.ln();
            for j in 0..a {
                out[at(j)] = if log {
                    x[at(j)] - lse
                } else {
                    (x[at(j)] - mx).exp() / sum
                };
            }
        }
    }
    out
}

/// Backward of softmax (`log == false`, `y` = probabilities) or log-softmax
/// (`log == true`, `y` = log-probabilities).
pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    shape: &[usize],
    axis: usize,
    log: bool,
) -> Vec<T> {
    let (outer, a, inner) = around_axis(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * a * inner + j * inner + i;
            if log {
                let s = (0..a).map(|j| dy[at(j)]).sum::<T>();
                for j in 0..a {
                    dx[at(j)] = dy[at(j)] - y[at(j)].exp() * s;
                }
            } else {
                let dot = (0..a).map(|j| dy[at(j)] * y[at(j)]).sum::<T>();
                for j in 0..a {
                    dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
                }
            }
        }
    }
    dx
}

pub(crate) const GELU_COEFF: f64 = 0.044_715;
pub(crate) const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let inner = c * (x + T::of(GELU_COEFF) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let a = T::of(GELU_COEFF);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
