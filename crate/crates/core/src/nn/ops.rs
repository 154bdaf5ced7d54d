//! Forward and backward kernels for every graph op.
//!
//! Tensors are `(C, X, Y, Z)` in standard layout, so the innermost z axis is
//! contiguous; convolutions run as scalar-times-row updates over z rows,
//! which the compiler vectorises. Convolutions use zero padding ("same"
//! output size) and stride 1.

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Elem, Tensor, UpKind};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;

#[inline(always)]
fn axpy<F: Elem>(y: &mut [F], a: F, x: &[F]) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi = *yi + a * *xi;
    }
}

#[inline(always)]
fn dot<F: Elem>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        acc = acc + *x * *y;
    }
    acc
}

/// Copies `x` into a zero-padded scratch grid with a 1-voxel border.
fn pad1<F: Elem>(x: &Tensor<F>) -> Vec<F> {
    let (c, nx, ny, nz) = x.dim();
    let (px, py, pz) = (nx + 2, ny + 2, nz + 2);
    let mut out = vec![F::zero(); c * px * py * pz];
    let xs = x.as_slice().expect("standard layout");
    for ci in 0..c {
        for xi in 0..nx {
            for yi in 0..ny {
                let src = ((ci * nx + xi) * ny + yi) * nz;
                let dst = ((ci * px + (xi + 1)) * py + (yi + 1)) * pz + 1;
                out[dst..dst + nz].copy_from_slice(&xs[src..src + nz]);
            }
        }
    }
    out
}

/// 3-D convolution, stride 1, zero padding, kernel size 1 or 3.
pub fn conv3_forward<F: Elem>(
    x: &Tensor<F>,
    w: &ArrayD<F>,
    b: &ArrayD<F>,
    ksize: usize,
) -> Result<Tensor<F>> {
    let (ic, nx, ny, nz) = x.dim();
    let oc = w.shape()[0];
    if w.shape()[1] != ic {
        return Err(Error::geometry(format!(
            "conv expects {} input channels, got {ic}",
            w.shape()[1]
        )));
    }
    let mut out = Array4::<F>::zeros((oc, nx, ny, nz));
    let os = out.as_slice_mut().expect("standard layout");
    let ws = w.as_slice().expect("standard layout");
    let bs = b.as_slice().expect("standard layout");
    let spatial = nx * ny * nz;

    match ksize {
        1 => {
            let xs = x.as_slice().expect("standard layout");
            for o in 0..oc {
                let orow = &mut os[o * spatial..(o + 1) * spatial];
                let bias = bs[o];
                for v in orow.iter_mut() {
                    *v = bias;
                }
                for i in 0..ic {
                    let wv = ws[o * ic + i];
                    axpy(orow, wv, &xs[i * spatial..(i + 1) * spatial]);
                }
            }
        }
        3 => {
            let padded = pad1(x);
            let (py, pz) = (ny + 2, nz + 2);
            let pplane = (nx + 2) * py * pz;
            for o in 0..oc {
                let obase = o * spatial;
                let bias = bs[o];
                for v in os[obase..obase + spatial].iter_mut() {
                    *v = bias;
                }
                for i in 0..ic {
                    let pbase = i * pplane;
                    for kx in 0..3 {
                        for ky in 0..3 {
                            for kz in 0..3 {
                                let wv = ws[(((o * ic + i) * 3 + kx) * 3 + ky) * 3 + kz];
                                if wv == F::zero() {
                                    continue;
                                }
                                for xi in 0..nx {
                                    let prow_x = pbase + (xi + kx) * py * pz;
                                    let orow_x = obase + xi * ny * nz;
                                    for yi in 0..ny {
                                        let p0 = prow_x + (yi + ky) * pz + kz;
                                        let o0 = orow_x + yi * nz;
                                        let (dst, src) =
                                            (&mut os[o0..o0 + nz], &padded[p0..p0 + nz]);
                                        axpy(dst, wv, src);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        k => return Err(Error::invalid(format!("unsupported conv kernel size {k}"))),
    }
    Ok(out)
}

/// Gradients of [`conv3_forward`] with respect to input, weight and bias.
pub fn conv3_backward<F: Elem>(
    x: &Tensor<F>,
    w: &ArrayD<F>,
    dout: &Tensor<F>,
    ksize: usize,
) -> Result<(Tensor<F>, ArrayD<F>, ArrayD<F>)> {
    let (ic, nx, ny, nz) = x.dim();
    let oc = w.shape()[0];
    let spatial = nx * ny * nz;
    let ws = w.as_slice().expect("standard layout");
    let ds = dout.as_slice().expect("standard layout");

    let mut dw = vec![F::zero(); w.len()];
    let mut db = vec![F::zero(); oc];
    for o in 0..oc {
        let drow = &ds[o * spatial..(o + 1) * spatial];
        db[o] = drow.iter().copied().sum();
    }

    let dx = match ksize {
        1 => {
            let xs = x.as_slice().expect("standard layout");
            let mut dx = Array4::<F>::zeros((ic, nx, ny, nz));
            let dxs = dx.as_slice_mut().expect("standard layout");
            for o in 0..oc {
                let drow = &ds[o * spatial..(o + 1) * spatial];
                for i in 0..ic {
                    dw[o * ic + i] = dot(drow, &xs[i * spatial..(i + 1) * spatial]);
                    axpy(
                        &mut dxs[i * spatial..(i + 1) * spatial],
                        ws[o * ic + i],
                        drow,
                    );
                }
            }
            dx
        }
        3 => {
            let padded = pad1(x);
            let (py, pz) = (ny + 2, nz + 2);
            let pplane = (nx + 2) * py * pz;
            let mut dpad = vec![F::zero(); ic * pplane];
            for o in 0..oc {
                let obase = o * spatial;
                for i in 0..ic {
                    let pbase = i * pplane;
                    for kx in 0..3 {
                        for ky in 0..3 {
                            for kz in 0..3 {
                                let widx = (((o * ic + i) * 3 + kx) * 3 + ky) * 3 + kz;
                                let wv = ws[widx];
                                let mut wacc = F::zero();
                                for xi in 0..nx {
                                    let prow_x = pbase + (xi + kx) * py * pz;
                                    let orow_x = obase + xi * ny * nz;
                                    for yi in 0..ny {
                                        let p0 = prow_x + (yi + ky) * pz + kz;
                                        let o0 = orow_x + yi * nz;
                                        let drow = &ds[o0..o0 + nz];
                                        wacc = wacc + dot(drow, &padded[p0..p0 + nz]);
                                        axpy(&mut dpad[p0..p0 + nz], wv, drow);
                                    }
                                }
                                dw[widx] = dw[widx] + wacc;
                            }
                        }
                    }
                }
            }
            // Crop the interior of the padded gradient.
            let mut dx = Array4::<F>::zeros((ic, nx, ny, nz));
            let dxs = dx.as_slice_mut().expect("standard layout");
            for i in 0..ic {
                for xi in 0..nx {
                    for yi in 0..ny {
                        let src = i * pplane + ((xi + 1) * py + (yi + 1)) * pz + 1;
                        let dst = ((i * nx + xi) * ny + yi) * nz;
                        dxs[dst..dst + nz].copy_from_slice(&dpad[src..src + nz]);
                    }
                }
            }
            dx
        }
        k => return Err(Error::invalid(format!("unsupported conv kernel size {k}"))),
    };

    Ok((
        dx,
        ArrayD::from_shape_vec(IxDyn(w.shape()), dw).expect("dw shape"),
        ArrayD::from_shape_vec(IxDyn(&[oc]), db).expect("db shape"),
    ))
}

/// Batch normalisation over the spatial axes (full-volume batches of one).
/// Returns output, normalised activations, inverse std, and the batch
/// statistics for the running-buffer update.
#[allow(clippy::type_complexity)]
pub fn batch_norm_train<F: Elem>(
    x: &Tensor<F>,
    gamma: &ArrayD<F>,
    beta: &ArrayD<F>,
) -> (Tensor<F>, Tensor<F>, Vec<F>, Vec<F>, Vec<F>) {
    let (c, nx, ny, nz) = x.dim();
    let n = nx * ny * nz;
    let xs = x.as_slice().expect("standard layout");
    let gs = gamma.as_slice().expect("standard layout");
    let bs = beta.as_slice().expect("standard layout");
    let mut out = Array4::<F>::zeros((c, nx, ny, nz));
    let mut xhat = Array4::<F>::zeros((c, nx, ny, nz));
    let os = out.as_slice_mut().expect("standard layout");
    let hs = xhat.as_slice_mut().expect("standard layout");
    let mut invstd = Vec::with_capacity(c);
    let mut bmean = Vec::with_capacity(c);
    let mut bvar = Vec::with_capacity(c);
    for ci in 0..c {
        let row = &xs[ci * n..(ci + 1) * n];
        let mut acc = 0.0f64;
        for &v in row {
            acc += v.to_f64();
        }
        let mean = acc / n as f64;
        let mut vacc = 0.0f64;
        for &v in row {
            let d = v.to_f64() - mean;
            vacc += d * d;
        }
        let var = vacc / n as f64;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        let (m, s) = (F::from_f64(mean), F::from_f64(istd));
        let (g, b) = (gs[ci], bs[ci]);
        let orow = &mut os[ci * n..(ci + 1) * n];
        let hrow = &mut hs[ci * n..(ci + 1) * n];
        for ((o, h), &v) in orow.iter_mut().zip(hrow.iter_mut()).zip(row.iter()) {
            let xh = (v - m) * s;
            *h = xh;
            *o = g * xh + b;
        }
        invstd.push(s);
        bmean.push(m);
        bvar.push(F::from_f64(var));
    }
    (out, xhat, invstd, bmean, bvar)
}

pub fn batch_norm_eval<F: Elem>(
    x: &Tensor<F>,
    gamma: &ArrayD<F>,
    beta: &ArrayD<F>,
    rmean: &[F],
    rvar: &[F],
) -> Tensor<F> {
    let (c, nx, ny, nz) = x.dim();
    let n = nx * ny * nz;
    let xs = x.as_slice().expect("standard layout");
    let gs = gamma.as_slice().expect("standard layout");
    let bs = beta.as_slice().expect("standard layout");
    let mut out = Array4::<F>::zeros((c, nx, ny, nz));
    let os = out.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        let istd = F::from_f64(1.0 / (rvar[ci].to_f64() + BN_EPS).sqrt());
        let scale = gs[ci] * istd;
        let shift = bs[ci] - scale * rmean[ci];
        let orow = &mut os[ci * n..(ci + 1) * n];
        let row = &xs[ci * n..(ci + 1) * n];
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            *o = scale * v + shift;
        }
    }
    out
}

pub fn batch_norm_backward<F: Elem>(
    xhat: &Tensor<F>,
    invstd: &[F],
    gamma: &ArrayD<F>,
    dout: &Tensor<F>,
) -> (Tensor<F>, ArrayD<F>, ArrayD<F>) {
    let (c, nx, ny, nz) = xhat.dim();
    let n = nx * ny * nz;
    let hs = xhat.as_slice().expect("standard layout");
    let ds = dout.as_slice().expect("standard layout");
    let gs = gamma.as_slice().expect("standard layout");
    let mut dx = Array4::<F>::zeros((c, nx, ny, nz));
    let dxs = dx.as_slice_mut().expect("standard layout");
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    let nf = F::from_f64(n as f64);
    for ci in 0..c {
        let hrow = &hs[ci * n..(ci + 1) * n];
        let drow = &ds[ci * n..(ci + 1) * n];
        let mut sum_dy = F::zero();
        let mut sum_dy_xhat = F::zero();
        for (&d, &h) in drow.iter().zip(hrow.iter()) {
            sum_dy = sum_dy + d;
            sum_dy_xhat = sum_dy_xhat + d * h;
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;
        let k = gs[ci] * invstd[ci] / nf;
        let dxrow = &mut dxs[ci * n..(ci + 1) * n];
        for ((o, &d), &h) in dxrow.iter_mut().zip(drow.iter()).zip(hrow.iter()) {
            *o = k * (nf * d - sum_dy - h * sum_dy_xhat);
        }
    }
    (
        dx,
        ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).expect("dgamma"),
        ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).expect("dbeta"),
    )
}

pub fn relu_forward<F: Elem>(x: &Tensor<F>) -> Tensor<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_backward<F: Elem>(y: &Tensor<F>, dout: &Tensor<F>) -> Tensor<F> {
    let mut dx = dout.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub fn dropout_forward<F: Elem>(
    x: &Tensor<F>,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> (Tensor<F>, Tensor<F>) {
    let keep = 1.0 - rate;
    let scale = F::from_f64(1.0 / keep);
    let mask = x.map(|_| {
        if rng.gen::<f64>() < keep {
            scale
        } else {
            F::zero()
        }
    });
    (x * &mask, mask)
}

pub fn dropout_backward<F: Elem>(mask: &Tensor<F>, dout: &Tensor<F>) -> Tensor<F> {
    dout * mask
}

pub fn avg_pool_forward<F: Elem>(x: &Tensor<F>, f: usize) -> Result<Tensor<F>> {
    let (c, nx, ny, nz) = x.dim();
    if f == 0 || nx % f != 0 || ny % f != 0 || nz % f != 0 {
        return Err(Error::geometry(format!(
            "avg_pool: dims ({nx}, {ny}, {nz}) not divisible by {f}"
        )));
    }
    let (ox, oy, oz) = (nx / f, ny / f, nz / f);
    let inv = F::from_f64(1.0 / (f * f * f) as f64);
    let mut out = Array4::<F>::zeros((c, ox, oy, oz));
    for ci in 0..c {
        for i in 0..ox {
            for j in 0..oy {
                for k in 0..oz {
                    let mut acc = F::zero();
                    for a in 0..f {
                        for b in 0..f {
                            for d in 0..f {
                                acc = acc + x[[ci, i * f + a, j * f + b, k * f + d]];
                            }
                        }
                    }
                    out[[ci, i, j, k]] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward<F: Elem>(
    dout: &Tensor<F>,
    f: usize,
    in_dim: (usize, usize, usize, usize),
) -> Tensor<F> {
    let (c, nx, ny, nz) = in_dim;
    let inv = F::from_f64(1.0 / (f * f * f) as f64);
    let mut dx = Array4::<F>::zeros((c, nx, ny, nz));
    for ci in 0..c {
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    dx[[ci, i, j, k]] = dout[[ci, i / f, j / f, k / f]] * inv;
                }
            }
        }
    }
    dx
}

pub fn max_pool_forward<F: Elem>(x: &Tensor<F>, f: usize) -> Result<(Tensor<F>, Vec<u32>)> {
    let (c, nx, ny, nz) = x.dim();
    if f == 0 || nx % f != 0 || ny % f != 0 || nz % f != 0 {
        return Err(Error::geometry(format!(
            "max_pool: dims ({nx}, {ny}, {nz}) not divisible by {f}"
        )));
    }
    let (ox, oy, oz) = (nx / f, ny / f, nz / f);
    let mut out = Array4::<F>::zeros((c, ox, oy, oz));
    let mut argmax = vec![0u32; c * ox * oy * oz];
    let mut flat = 0usize;
    for ci in 0..c {
        for i in 0..ox {
            for j in 0..oy {
                for k in 0..oz {
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0u32;
                    for a in 0..f {
                        for b in 0..f {
                            for d in 0..f {
                                let (xi, yi, zi) = (i * f + a, j * f + b, k * f + d);
                                let v = x[[ci, xi, yi, zi]];
                                if v > best {
                                    best = v;
                                    best_idx = ((xi * ny + yi) * nz + zi) as u32;
                                }
                            }
                        }
                    }
                    out[[ci, i, j, k]] = best;
                    argmax[flat] = best_idx;
                    flat += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool_backward<F: Elem>(
    dout: &Tensor<F>,
    argmax: &[u32],
    f: usize,
    in_dim: (usize, usize, usize, usize),
) -> Tensor<F> {
    let (c, nx, ny, nz) = in_dim;
    let (_, ox, oy, oz) = dout.dim();
    let _ = f;
    let mut dx = Array4::<F>::zeros((c, nx, ny, nz));
    let dxs = dx.as_slice_mut().expect("standard layout");
    let ds = dout.as_slice().expect("standard layout");
    let spatial_in = nx * ny * nz;
    let spatial_out = ox * oy * oz;
    for ci in 0..c {
        for s in 0..spatial_out {
            let src = ci * spatial_out + s;
            let dst = ci * spatial_in + argmax[src] as usize;
            dxs[dst] = dxs[dst] + ds[src];
        }
    }
    dx
}

/// Per-output trilinear interpolation stencil: the two source indices and
/// the fractional weight along one axis.
#[inline(always)]
fn lin_stencil(i: usize, f: usize, n_in: usize) -> (usize, usize, f64) {
    let c = ((i as f64 + 0.5) / f as f64 - 0.5).max(0.0);
    let i0 = (c as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, c - i0 as f64)
}

pub fn upsample_forward<F: Elem>(x: &Tensor<F>, f: usize, kind: UpKind) -> Tensor<F> {
    let (c, nx, ny, nz) = x.dim();
    let (ox, oy, oz) = (nx * f, ny * f, nz * f);
    let mut out = Array4::<F>::zeros((c, ox, oy, oz));
    match kind {
        UpKind::Nearest => {
            for ci in 0..c {
                for i in 0..ox {
                    for j in 0..oy {
                        for k in 0..oz {
                            out[[ci, i, j, k]] = x[[ci, i / f, j / f, k / f]];
                        }
                    }
                }
            }
        }
        UpKind::Trilinear => {
            for ci in 0..c {
                for i in 0..ox {
                    let (x0, x1, fx) = lin_stencil(i, f, nx);
                    for j in 0..oy {
                        let (y0, y1, fy) = lin_stencil(j, f, ny);
                        for k in 0..oz {
                            let (z0, z1, fz) = lin_stencil(k, f, nz);
                            let at = |a: usize, b: usize, d: usize| x[[ci, a, b, d]].to_f64();
                            let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
                            let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
                            let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
                            let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
                            let c0 = c00 * (1.0 - fy) + c10 * fy;
                            let c1 = c01 * (1.0 - fy) + c11 * fy;
                            out[[ci, i, j, k]] = F::from_f64(c0 * (1.0 - fz) + c1 * fz);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn upsample_backward<F: Elem>(
    dout: &Tensor<F>,
    f: usize,
    kind: UpKind,
    in_dim: (usize, usize, usize, usize),
) -> Tensor<F> {
    let (c, nx, ny, nz) = in_dim;
    let (_, ox, oy, oz) = dout.dim();
    let mut dx = Array4::<F>::zeros((c, nx, ny, nz));
    match kind {
        UpKind::Nearest => {
            for ci in 0..c {
                for i in 0..ox {
                    for j in 0..oy {
                        for k in 0..oz {
                            dx[[ci, i / f, j / f, k / f]] =
                                dx[[ci, i / f, j / f, k / f]] + dout[[ci, i, j, k]];
                        }
                    }
                }
            }
        }
        UpKind::Trilinear => {
            for ci in 0..c {
                for i in 0..ox {
                    let (x0, x1, fx) = lin_stencil(i, f, nx);
                    for j in 0..oy {
                        let (y0, y1, fy) = lin_stencil(j, f, ny);
                        for k in 0..oz {
                            let (z0, z1, fz) = lin_stencil(k, f, nz);
                            let g = dout[[ci, i, j, k]].to_f64();
                            let mut put = |a: usize, b: usize, d: usize, w: f64| {
                                dx[[ci, a, b, d]] = dx[[ci, a, b, d]] + F::from_f64(g * w);
                            };
                            put(x0, y0, z0, (1.0 - fx) * (1.0 - fy) * (1.0 - fz));
                            put(x1, y0, z0, fx * (1.0 - fy) * (1.0 - fz));
                            put(x0, y1, z0, (1.0 - fx) * fy * (1.0 - fz));
                            put(x1, y1, z0, fx * fy * (1.0 - fz));
                            put(x0, y0, z1, (1.0 - fx) * (1.0 - fy) * fz);
                            put(x1, y0, z1, fx * (1.0 - fy) * fz);
                            put(x0, y1, z1, (1.0 - fx) * fy * fz);
                            put(x1, y1, z1, fx * fy * fz);
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn concat_forward<F: Elem>(inputs: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let (_, nx, ny, nz) = inputs[0].dim();
    for t in inputs {
        let d = t.dim();
        if (d.1, d.2, d.3) != (nx, ny, nz) {
            return Err(Error::geometry(
                "concat inputs disagree on spatial dimensions",
            ));
        }
    }
    let c: usize = inputs.iter().map(|t| t.dim().0).sum();
    let mut out = Array4::<F>::zeros((c, nx, ny, nz));
    let mut start = 0;
    for t in inputs {
        let tc = t.dim().0;
        out.slice_mut(ndarray::s![start..start + tc, .., .., ..])
            .assign(t);
        start += tc;
    }
    Ok(out)
}

/// (C, fX, fY, fZ) -> (f^3 C, X, Y, Z). Output channel `c*f^3 + (dx*f+dy)*f+dz`
/// holds the sub-lattice at offset (dx, dy, dz). Exact inverse of
/// [`depth_to_space`].
pub fn space_to_depth<F: Elem>(x: &Tensor<F>, f: usize) -> Result<Tensor<F>> {
    let (c, nx, ny, nz) = x.dim();
    if nx % f != 0 || ny % f != 0 || nz % f != 0 {
        return Err(Error::geometry(format!(
            "space_to_depth: dims ({nx}, {ny}, {nz}) not divisible by {f}"
        )));
    }
    let f3 = f * f * f;
    let (ox, oy, oz) = (nx / f, ny / f, nz / f);
    let mut out = Array4::<F>::zeros((c * f3, ox, oy, oz));
    for ci in 0..c {
        for dx in 0..f {
            for dy in 0..f {
                for dz in 0..f {
                    let oc = ci * f3 + (dx * f + dy) * f + dz;
                    for i in 0..ox {
                        for j in 0..oy {
                            for k in 0..oz {
                                out[[oc, i, j, k]] = x[[ci, i * f + dx, j * f + dy, k * f + dz]];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// (f^3 C, X, Y, Z) -> (C, fX, fY, fZ). Exact inverse of [`space_to_depth`].
pub fn depth_to_space<F: Elem>(x: &Tensor<F>, f: usize) -> Result<Tensor<F>> {
    let (c_in, nx, ny, nz) = x.dim();
    let f3 = f * f * f;
    if c_in % f3 != 0 {
        return Err(Error::geometry(format!(
            "depth_to_space: {c_in} channels not divisible by {f}^3"
        )));
    }
    let c = c_in / f3;
    let mut out = Array4::<F>::zeros((c, nx * f, ny * f, nz * f));
    for ci in 0..c {
        for dx in 0..f {
            for dy in 0..f {
                for dz in 0..f {
                    let ic = ci * f3 + (dx * f + dy) * f + dz;
                    for i in 0..nx {
                        for j in 0..ny {
                            for k in 0..nz {
                                out[[ci, i * f + dx, j * f + dy, k * f + dz]] = x[[ic, i, j, k]];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Channel softmax per voxel, computed with the max-subtraction trick.
pub fn softmax_forward<F: Elem>(x: &Tensor<F>) -> Tensor<F> {
    let (c, nx, ny, nz) = x.dim();
    let n = nx * ny * nz;
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<F>::zeros((c, nx, ny, nz));
    let os = out.as_slice_mut().expect("standard layout");
    for s in 0..n {
        let mut mx = F::neg_infinity();
        for ci in 0..c {
            mx = mx.max(xs[ci * n + s]);
        }
        let mut denom = F::zero();
        for ci in 0..c {
            let e = (xs[ci * n + s] - mx).exp();
            os[ci * n + s] = e;
            denom = denom + e;
        }
        let inv = F::one() / denom;
        for ci in 0..c {
            os[ci * n + s] = os[ci * n + s] * inv;
        }
    }
    out
}

pub fn softmax_backward<F: Elem>(y: &Tensor<F>, dout: &Tensor<F>) -> Tensor<F> {
    let (c, nx, ny, nz) = y.dim();
    let n = nx * ny * nz;
    let ys = y.as_slice().expect("standard layout");
    let ds = dout.as_slice().expect("standard layout");
    let mut dx = Array4::<F>::zeros((c, nx, ny, nz));
    let dxs = dx.as_slice_mut().expect("standard layout");
    for s in 0..n {
        let mut inner = F::zero();
        for ci in 0..c {
            inner = inner + ds[ci * n + s] * ys[ci * n + s];
        }
        for ci in 0..c {
            let idx = ci * n + s;
            dxs[idx] = ys[idx] * (ds[idx] - inner);
        }
    }
    dx
}

pub fn global_avg_pool_forward<F: Elem>(x: &Tensor<F>) -> Tensor<F> {
    let (c, nx, ny, nz) = x.dim();
    let n = nx * ny * nz;
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<F>::zeros((c, 1, 1, 1));
    for ci in 0..c {
        let mut acc = 0.0f64;
        for &v in &xs[ci * n..(ci + 1) * n] {
            acc += v.to_f64();
        }
        out[[ci, 0, 0, 0]] = F::from_f64(acc / n as f64);
    }
    out
}

pub fn global_avg_pool_backward<F: Elem>(
    dout: &Tensor<F>,
    in_dim: (usize, usize, usize, usize),
) -> Tensor<F> {
    let (c, nx, ny, nz) = in_dim;
    let n = nx * ny * nz;
    let inv = F::from_f64(1.0 / n as f64);
    let mut dx = Array4::<F>::zeros((c, nx, ny, nz));
    for ci in 0..c {
        let g = dout[[ci, 0, 0, 0]] * inv;
        dx.slice_mut(ndarray::s![ci, .., .., ..]).fill(g);
    }
    dx
}

pub fn broadcast_forward<F: Elem>(vec: &Tensor<F>, shape_ref: &Tensor<F>) -> Result<Tensor<F>> {
    let (c, a, b, d) = vec.dim();
    if (a, b, d) != (1, 1, 1) {
        return Err(Error::geometry("broadcast expects a (C,1,1,1) input"));
    }
    let (_, nx, ny, nz) = shape_ref.dim();
    let mut out = Array4::<F>::zeros((c, nx, ny, nz));
    for ci in 0..c {
        out.slice_mut(ndarray::s![ci, .., .., ..])
            .fill(vec[[ci, 0, 0, 0]]);
    }
    Ok(out)
}

pub fn broadcast_backward<F: Elem>(dout: &Tensor<F>) -> Tensor<F> {
    let (c, _, _, _) = dout.dim();
    let mut dv = Array4::<F>::zeros((c, 1, 1, 1));
    for ci in 0..c {
        dv[[ci, 0, 0, 0]] = dout.slice(ndarray::s![ci, .., .., ..]).iter().copied().sum();
    }
    dv
}

pub fn add_forward<F: Elem>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.dim() != b.dim() {
        return Err(Error::geometry("add inputs disagree on shape"));
    }
    Ok(a + b)
}
