//! Forward and backward kernels behind the trace ops.
//!
//! Kernels work on raw row-major slices. Anything that fans out over rayon
//! writes disjoint output chunks, so the summation order inside each chunk
//! is fixed regardless of thread count.

use crate::par;
use crate::tensor::{numel, strides, walk2};

/// Geometry of a same-padded, stride-1 cross-correlation.
///
/// Input is `(cin, batch, h, w)`, kernel `(cout, cin, kh, kw)`, output
/// `(cout, batch, h, w)`. 1-D convolutions use `h = kh = 1`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Output rows/cols `[lo, hi)` whose tap at offset `d` stays inside `0..n`.
    fn valid(d: isize, n: usize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (n as isize - d).clamp(0, n as isize) as usize;
        (lo.min(hi), hi)
    }

    fn offsets(&self, ki: usize, kj: usize) -> (isize, isize) {
        (
            ki as isize - (self.kh / 2) as isize,
            kj as isize - (self.kw / 2) as isize,
        )
    }
}

pub(crate) fn conv_forward(g: ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
    let plane = g.plane();
    let per_co = g.batch * plane;
    let mut out = vec![0.0; g.cout * per_co];
    par::for_each_chunk_mut(&mut out, per_co, |co, o| {
        for ci in 0..g.cin {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = k[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                    let (di, dj) = g.offsets(ki, kj);
                    let (h0, h1) = ConvGeom::valid(di, g.h);
                    let (w0, w1) = ConvGeom::valid(dj, g.w);
                    for b in 0..g.batch {
                        let xin = &x[(ci * g.batch + b) * plane..][..plane];
                        for hh in h0..h1 {
                            let ih = (hh as isize + di) as usize;
                            let orow = &mut o[b * plane + hh * g.w..][..g.w];
                            let irow = &xin[ih * g.w..][..g.w];
                            let shift = dj;
                            for (ww, ov) in orow.iter_mut().enumerate().take(w1).skip(w0) {
                                *ov += wv * irow[(ww as isize + shift) as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv_backward_input(g: ConvGeom, grad: &[f64], k: &[f64]) -> Vec<f64> {
    let plane = g.plane();
    let per_ci = g.batch * plane;
    let mut dx = vec![0.0; g.cin * per_ci];
    par::for_each_chunk_mut(&mut dx, per_ci, |ci, d| {
        for co in 0..g.cout {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = k[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                    let (di, dj) = g.offsets(ki, kj);
                    let (h0, h1) = ConvGeom::valid(di, g.h);
                    let (w0, w1) = ConvGeom::valid(dj, g.w);
                    for b in 0..g.batch {
                        let gin = &grad[(co * g.batch + b) * plane..][..plane];
                        for hh in h0..h1 {
                            let ih = (hh as isize + di) as usize;
                            let grow = &gin[hh * g.w..][..g.w];
                            let drow = &mut d[b * plane + ih * g.w..][..g.w];
                            for ww in w0..w1 {
                                drow[(ww as isize + dj) as usize] += wv * grow[ww];
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

pub(crate) fn conv_backward_kernel(g: ConvGeom, grad: &[f64], x: &[f64]) -> Vec<f64> {
    let plane = g.plane();
    let taps = g.kh * g.kw;
    let mut dk = vec![0.0; g.cout * g.cin * taps];
    par::for_each_chunk_mut(&mut dk, taps, |pair, d| {
        let (co, ci) = (pair / g.cin, pair % g.cin);
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (di, dj) = g.offsets(ki, kj);
                let (h0, h1) = ConvGeom::valid(di, g.h);
                let (w0, w1) = ConvGeom::valid(dj, g.w);
                let mut acc = 0.0;
                for b in 0..g.batch {
                    let gin = &grad[(co * g.batch + b) * plane..][..plane];
                    let xin = &x[(ci * g.batch + b) * plane..][..plane];
                    for hh in h0..h1 {
                        let ih = (hh as isize + di) as usize;
                        let grow = &gin[hh * g.w..][..g.w];
                        let irow = &xin[ih * g.w..][..g.w];
                        for ww in w0..w1 {
                            acc += grow[ww] * irow[(ww as isize + dj) as usize];
                        }
                    }
                }
                d[ki * g.kw + kj] = acc;
            }
        }
    });
    dk
}

/// `y[p, b, o] = sum_i x[p, b, i] * w[p, o, i]`.
pub(crate) fn linear_forward(
    parts: usize,
    batch: usize,
    inp: usize,
    outp: usize,
    x: &[f64],
    w: &[f64],
) -> Vec<f64> {
    let mut y = vec![0.0; parts * batch * outp];
    par::for_each_chunk_mut(&mut y, outp, |row, yr| {
        let p = row / batch;
        let xr = &x[row * inp..][..inp];
        for (o, yv) in yr.iter_mut().enumerate() {
            let wr = &w[(p * outp + o) * inp..][..inp];
            *yv = dot(xr, wr);
        }
    });
    y
}

pub(crate) fn linear_backward_input(
    parts: usize,
    batch: usize,
    inp: usize,
    outp: usize,
    grad: &[f64],
    w: &[f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; parts * batch * inp];
    par::for_each_chunk_mut(&mut dx, inp, |row, dr| {
        let p = row / batch;
        let gr = &grad[row * outp..][..outp];
        for (o, &gv) in gr.iter().enumerate() {
            let wr = &w[(p * outp + o) * inp..][..inp];
            for (d, &wv) in dr.iter_mut().zip(wr) {
                *d += gv * wv;
            }
        }
    });
    dx
}

pub(crate) fn linear_backward_weight(
    parts: usize,
    batch: usize,
    inp: usize,
    outp: usize,
    grad: &[f64],
    x: &[f64],
) -> Vec<f64> {
    let mut dw = vec![0.0; parts * outp * inp];
    par::for_each_chunk_mut(&mut dw, inp, |row, dr| {
        let (p, o) = (row / outp, row % outp);
        for b in 0..batch {
            let gv = grad[(p * batch + b) * outp + o];
            let xr = &x[(p * batch + b) * inp..][..inp];
            for (d, &xv) in dr.iter_mut().zip(xr) {
                *d += gv * xv;
            }
        }
    });
    dw
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Output shape of an extent-1 broadcast, or `None` if incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, zero on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&e, &o), st)| if e == o { st } else { 0 })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Mul,
}

pub(crate) fn binary_forward(
    kind: BinaryKind,
    a: &[f64],
    ash: &[usize],
    b: &[f64],
    bsh: &[usize],
    out: &[usize],
) -> Vec<f64> {
    let f = |x: f64, y: f64| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Mul => x * y,
    };
    if ash == bsh {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(ash, out);
    let sb = broadcast_strides(bsh, out);
    let mut y = Vec::with_capacity(numel(out));
    walk2(out, &sa, &sb, |ia, ib| y.push(f(a[ia], b[ib])));
    y
}

/// Gradients of a broadcast binary op with respect to both operands.
pub(crate) fn binary_backward(
    kind: BinaryKind,
    grad: &[f64],
    a: &[f64],
    ash: &[usize],
    b: &[f64],
    bsh: &[usize],
    out: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    if ash == bsh {
        match kind {
            BinaryKind::Add => {
                ga.copy_from_slice(grad);
                gb.copy_from_slice(grad);
            }
            BinaryKind::Mul => {
                for i in 0..grad.len() {
                    ga[i] = grad[i] * b[i];
                    gb[i] = grad[i] * a[i];
                }
            }
        }
        return (ga, gb);
    }
    let sa = broadcast_strides(ash, out);
    let sb = broadcast_strides(bsh, out);
    let mut k = 0;
    walk2(out, &sa, &sb, |ia, ib| {
        let g = grad[k];
        k += 1;
        match kind {
            BinaryKind::Add => {
                ga[ia] += g;
                gb[ib] += g;
            }
            BinaryKind::Mul => {
                ga[ia] += g * b[ib];
                gb[ib] += g * a[ia];
            }
        }
    });
    (ga, gb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Max,
    Sum,
}

/// Reduces the masked axes to extent 1. For `Max` also returns, per output
/// element, the flat input index of the first maximal entry.
pub(crate) fn reduce_forward(
    kind: ReduceKind,
    x: &[f64],
    shape: &[usize],
    mask: &[bool],
) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(mask)
        .map(|(&e, &m)| if m { 1 } else { e })
        .collect();
    let n_out = numel(&out_shape);
    let so = broadcast_strides(&out_shape, shape);
    let si = strides(shape);
    let count: usize = shape
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&e, _)| e)
        .product();
    match kind {
        ReduceKind::Mean | ReduceKind::Sum => {
            let mut y = vec![0.0; n_out];
            walk2(shape, &si, &so, |ii, io| y[io] += x[ii]);
            if kind == ReduceKind::Mean {
                let inv = count as f64;
                y.iter_mut().for_each(|v| *v /= inv);
            }
            (out_shape, y, Vec::new())
        }
        ReduceKind::Max => {
            let mut y = vec![f64::NEG_INFINITY; n_out];
            let mut arg = vec![usize::MAX; n_out];
            walk2(shape, &si, &so, |ii, io| {
                let v = x[ii];
                let best = y[io];
                if arg[io] == usize::MAX || v > best || (v.is_nan() && !best.is_nan()) {
                    y[io] = v;
                    arg[io] = ii;
                }
            });
            (out_shape, y, arg)
        }
    }
}

pub(crate) fn reduce_backward(
    kind: ReduceKind,
    grad: &[f64],
    shape: &[usize],
    out_shape: &[usize],
    argmax: &[usize],
) -> Vec<f64> {
    let mut gx = vec![0.0; numel(shape)];
    match kind {
        ReduceKind::Max => {
            for (o, &i) in argmax.iter().enumerate() {
                gx[i] += grad[o];
            }
        }
        ReduceKind::Mean | ReduceKind::Sum => {
            let scale = if kind == ReduceKind::Mean {
                1.0 / (numel(shape) / numel(out_shape)) as f64
            } else {
                1.0
            };
            let so = broadcast_strides(out_shape, shape);
            let si = strides(shape);
            walk2(shape, &si, &so, |ii, io| gx[ii] = grad[io] * scale);
        }
    }
    gx
}

pub(crate) fn permute_forward(x: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let si = strides(shape);
    let sp: Vec<usize> = axes.iter().map(|&a| si[a]).collect();
    let zeros = vec![0; shape.len()];
    let mut y = Vec::with_capacity(x.len());
    walk2(&out_shape, &sp, &zeros, |ii, _| y.push(x[ii]));
    (out_shape, y)
}

pub(crate) fn permute_backward(grad: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let si = strides(shape);
    let sp: Vec<usize> = axes.iter().map(|&a| si[a]).collect();
    let zeros = vec![0; shape.len()];
    let mut gx = vec![0.0; grad.len()];
    let mut k = 0;
    walk2(&out_shape, &sp, &zeros, |ii, _| {
        gx[ii] = grad[k];
        k += 1;
    });
    gx
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Generalized mean over one axis: `(mean(max(x, eps)^p))^(1/p)`.
pub(crate) fn gem_forward(x: &[f64], shape: &[usize], axis: usize, p: f64, eps: f64) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut y = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = 0.0;
            for t in 0..len {
                acc += x[(o * len + t) * inner + i].max(eps).powf(p);
            }
            y[o * inner + i] = (acc / len as f64).powf(1.0 / p);
        }
    }
    y
}

/// Returns `(dx, dp)`.
pub(crate) fn gem_backward(
    grad: &[f64],
    x: &[f64],
    y: &[f64],
    shape: &[usize],
    axis: usize,
    p: f64,
    eps: f64,
) -> (Vec<f64>, f64) {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![0.0; x.len()];
    let mut dp = 0.0;
    let n = len as f64;
    for o in 0..outer {
        for i in 0..inner {
            let yo = y[o * inner + i];
            let g = grad[o * inner + i];
            let mut m = 0.0;
            let mut m_log = 0.0;
            for t in 0..len {
                let z = x[(o * len + t) * inner + i].max(eps);
                let zp = z.powf(p);
                m += zp;
                m_log += zp * z.ln();
            }
            m /= n;
            m_log /= n;
            for t in 0..len {
                let idx = (o * len + t) * inner + i;
                if x[idx] > eps {
                    dx[idx] = g * yo * x[idx].powf(p - 1.0) / (n * m);
                }
            }
            dp += g * yo * (-m.ln() / (p * p) + m_log / (m * p));
        }
    }
    (dx, dp)
}

/// Floor applied to squared distances before the square root.
pub(crate) const DIST_FLOOR: f64 = 1e-12;

fn pair_distances(e: &[f64], batch: usize, dim: usize) -> Vec<f64> {
    let mut d = vec![0.0; batch * batch];
    for i in 0..batch {
        for j in 0..batch {
            let sq: f64 = (0..dim)
                .map(|k| {
                    let t = e[i * dim + k] - e[j * dim + k];
                    t * t
                })
                .sum();
            d[i * batch + j] = sq.max(DIST_FLOOR).sqrt();
        }
    }
    d
}

/// Valid `(anchor, positive, negative)` triplets for a label vector.
pub(crate) fn triplets(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] != labels[a] {
                    out.push((a, p, q));
                }
            }
        }
    }
    out
}

/// Hinge activity of every triplet in every part, in enumeration order.
pub(crate) fn triplet_active(
    x: &[f64],
    parts: usize,
    batch: usize,
    dim: usize,
    labels: &[usize],
    margin: f64,
) -> Vec<bool> {
    let trips = triplets(labels);
    let mut out = Vec::with_capacity(parts * trips.len());
    for p in 0..parts {
        let d = pair_distances(&x[p * batch * dim..][..batch * dim], batch, dim);
        out.extend(trips.iter().map(|&(a, pp, n)| margin + d[a * batch + pp] - d[a * batch + n] > 0.0));
    }
    out
}

/// Batch-all triplet loss, per part: sum of hinge terms divided by the
/// number of strictly positive terms (zero if none). Summed over parts.
/// Returns the loss and, if requested, the gradient.
pub(crate) fn triplet_batch_all(
    x: &[f64],
    parts: usize,
    batch: usize,
    dim: usize,
    labels: &[usize],
    margin: f64,
    want_grad: Option<f64>,
) -> (f64, Vec<f64>) {
    let trips = triplets(labels);
    let mut total = 0.0;
    let mut grad = if want_grad.is_some() {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    for p in 0..parts {
        let e = &x[p * batch * dim..][..batch * dim];
        let d = pair_distances(e, batch, dim);
        let mut sum = 0.0;
        let mut active = 0usize;
        let mut coef = vec![0.0; batch * batch];
        for &(a, pp, n) in &trips {
            let l = margin + d[a * batch + pp] - d[a * batch + n];
            if l > 0.0 {
                sum += l;
                active += 1;
                coef[a * batch + pp] += 1.0;
                coef[a * batch + n] -= 1.0;
            }
        }
        if active == 0 {
            continue;
        }
        total += sum / active as f64;
        if let Some(g) = want_grad {
            let scale = g / active as f64;
            let gp = &mut grad[p * batch * dim..][..batch * dim];
            for i in 0..batch {
                for j in 0..batch {
                    let c = coef[i * batch + j];
                    if c == 0.0 {
                        continue;
                    }
                    let dij = d[i * batch + j];
                    let sq = dij * dij;
                    if sq <= DIST_FLOOR {
                        continue;
                    }
                    for k in 0..dim {
                        let diff = (e[i * dim + k] - e[j * dim + k]) / dij * c * scale;
                        gp[i * dim + k] += diff;
                        gp[j * dim + k] -= diff;
                    }
                }
            }
        }
    }
    (total, grad)
}

/// Softmax cross-entropy averaged over the batch, summed over parts.
pub(crate) fn cross_entropy(
    x: &[f64],
    parts: usize,
    batch: usize,
    classes: usize,
    labels: &[usize],
    want_grad: Option<f64>,
) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut grad = if want_grad.is_some() {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    for p in 0..parts {
        for b in 0..batch {
            let row = &x[(p * batch + b) * classes..][..classes];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let se: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + se.ln();
            total += (lse - row[labels[b]]) / batch as f64;
            if let Some(g) = want_grad {
                let gr = &mut grad[(p * batch + b) * classes..][..classes];
                for (c, gv) in gr.iter_mut().enumerate() {
                    let sm = (row[c] - lse).exp();
                    let t = if c == labels[b] { 1.0 } else { 0.0 };
                    *gv = g * (sm - t) / batch as f64;
                }
            }
        }
    }
    (total, grad)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
