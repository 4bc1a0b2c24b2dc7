//! Forward and backward kernels for every recorded op.

use super::{Op, OpKind};
use crate::error::{Error, Result};
use crate::tensor::{gemm, numel, Element, MatRef};

pub(crate) type Input<'a, T> = (&'a [usize], &'a [T]);

pub(crate) struct Forwarded<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub saved: Vec<T>,
}

impl<T> Forwarded<T> {
    fn plain(shape: Vec<usize>, value: Vec<T>) -> Self {
        Forwarded {
            shape,
            value,
            saved: Vec::new(),
        }
    }
}

fn mismatch(kind: OpKind, shapes: &[&[usize]], detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        kind,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        detail: detail.into(),
    }
}

fn arity(kind: OpKind, ins: usize, expected: usize) -> Result<()> {
    if ins != expected {
        return Err(Error::InvalidOpInput {
            kind,
            detail: format!("expected {expected} inputs, got {ins}"),
        });
    }
    Ok(())
}

pub(crate) fn forward<T: Element>(op: &Op, ins: &[Input<'_, T>]) -> Result<Forwarded<T>> {
    let kind = op.kind();
    match op {
        Op::Leaf => Err(Error::InvalidOpInput {
            kind,
            detail: "leaves are created with Tape::leaf".into(),
        }),
        Op::MatMul { trans_b } => {
            arity(kind, ins.len(), 2)?;
            matmul_forward(ins[0], ins[1], *trans_b)
        }
        Op::Add | Op::Mul => {
            arity(kind, ins.len(), 2)?;
            let (a_shape, a) = ins[0];
            let (b_shape, b) = ins[1];
            let inner = suffix_broadcast(kind, a_shape, b_shape)?;
            let value = if kind == OpKind::Add {
                a.iter()
                    .enumerate()
                    .map(|(i, &x)| x + b[i % inner])
                    .collect()
            } else {
                a.iter()
                    .enumerate()
                    .map(|(i, &x)| x * b[i % inner])
                    .collect()
            };
            Ok(Forwarded::plain(a_shape.to_vec(), value))
        }
        Op::EmbedLookup { ids, batch_shape } => {
            arity(kind, ins.len(), 1)?;
            let (w_shape, w) = ins[0];
            if w_shape.len() != 2 {
                return Err(mismatch(kind, &[w_shape], "weight must be 2-D"));
            }
            if numel(batch_shape) != ids.len() {
                return Err(mismatch(
                    kind,
                    &[w_shape, batch_shape],
                    format!("{} ids", ids.len()),
                ));
            }
            let (vocab, d) = (w_shape[0], w_shape[1]);
            let mut value = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::InvalidOpInput {
                        kind,
                        detail: format!("id {id} out of range for {vocab} rows"),
                    });
                }
                value.extend_from_slice(&w[id * d..(id + 1) * d]);
            }
            let mut shape = batch_shape.clone();
            shape.push(d);
            Ok(Forwarded::plain(shape, value))
        }
        Op::Softmax { causal } => {
            arity(kind, ins.len(), 1)?;
            softmax_forward(ins[0], *causal)
        }
        Op::Silu => {
            arity(kind, ins.len(), 1)?;
            let (shape, x) = ins[0];
            let value = x.iter().map(|&v| v / (T::one() + (-v).exp())).collect();
            Ok(Forwarded::plain(shape.to_vec(), value))
        }
        Op::LayerNorm { eps } => {
            arity(kind, ins.len(), 3)?;
            layer_norm_forward(ins[0], ins[1], Some(ins[2]), *eps)
        }
        Op::RmsNorm { eps } => {
            arity(kind, ins.len(), 2)?;
            rms_norm_forward(ins[0], ins[1], *eps)
        }
        Op::CrossEntropy { targets } => {
            arity(kind, ins.len(), 1)?;
            cross_entropy_forward(ins[0], targets)
        }
        Op::Transpose { perm } => {
            arity(kind, ins.len(), 1)?;
            let (shape, x) = ins[0];
            check_perm(kind, shape, perm)?;
            let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
            Ok(Forwarded::plain(out_shape, permute(x, shape, perm)))
        }
        Op::Reshape { shape: target } => {
            arity(kind, ins.len(), 1)?;
            let (shape, x) = ins[0];
            if numel(target) != x.len() {
                return Err(mismatch(kind, &[shape, target], "element counts differ"));
            }
            Ok(Forwarded::plain(target.clone(), x.to_vec()))
        }
        Op::Mean { axis } | Op::Sum { axis } => {
            arity(kind, ins.len(), 1)?;
            let (shape, x) = ins[0];
            let (outer, len, inner, out_shape) = reduce_dims(kind, shape, *axis)?;
            let mut value = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        value[o * inner + i] = value[o * inner + i] + x[base + i];
                    }
                }
            }
            if kind == OpKind::Mean {
                let inv = T::one() / T::lit(len as f64);
                value.iter_mut().for_each(|v| *v = *v * inv);
            }
            Ok(Forwarded::plain(out_shape, value))
        }
        Op::Concat { axis } => concat_forward(ins, *axis),
    }
}

/// Gradients for each input; `None` where the input does not need one.
pub(crate) fn backward<T: Element>(
    op: &Op,
    ins: &[Input<'_, T>],
    out: &[T],
    saved: &[T],
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let kind = op.kind();
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul { trans_b } => matmul_backward(ins[0], ins[1], *trans_b, g, needs),
        Op::Add | Op::Mul => {
            let (_, a) = ins[0];
            let (_, b) = ins[1];
            let inner = b.len();
            let is_mul = kind == OpKind::Mul;
            let da = needs[0].then(|| {
                if is_mul {
                    g.iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * b[i % inner])
                        .collect()
                } else {
                    g.to_vec()
                }
            });
            let db = needs[1].then(|| {
                let mut db = vec![T::zero(); inner];
                for (i, &gi) in g.iter().enumerate() {
                    let contrib = if is_mul { gi * a[i] } else { gi };
                    db[i % inner] = db[i % inner] + contrib;
                }
                db
            });
            vec![da, db]
        }
        Op::EmbedLookup { ids, .. } => {
            let (w_shape, w) = ins[0];
            let d = w_shape[1];
            let dw = needs[0].then(|| {
                let mut dw = vec![T::zero(); w.len()];
                for (row, &id) in ids.iter().enumerate() {
                    let src = &g[row * d..(row + 1) * d];
                    let dst = &mut dw[id * d..(id + 1) * d];
                    dst.iter_mut().zip(src).for_each(|(o, &v)| *o = *o + v);
                }
                dw
            });
            vec![dw]
        }
        Op::Softmax { .. } => {
            let (shape, _) = ins[0];
            let n = *shape.last().unwrap_or(&1);
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); out.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gg)| y * gg).sum();
                    for ((d, &y), &gg) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (gg - dot);
                    }
                }
                dx
            });
            vec![dx]
        }
        Op::Silu => {
            let (_, x) = ins[0];
            let dx = needs[0].then(|| {
                x.iter()
                    .zip(g)
                    .map(|(&v, &gg)| {
                        let s = T::one() / (T::one() + (-v).exp());
                        gg * s * (T::one() + v * (T::one() - s))
                    })
                    .collect()
            });
            vec![dx]
        }
        Op::LayerNorm { .. } => layer_norm_backward(ins, saved, g, needs),
        Op::RmsNorm { .. } => rms_norm_backward(ins, saved, g, needs),
        Op::CrossEntropy { targets } => {
            let (shape, _) = ins[0];
            let v = *shape.last().unwrap_or(&1);
            let count = targets.iter().filter(|t| t.is_some()).count();
            let dx = needs[0].then(|| {
                let scale = g[0] / T::lit(count as f64);
                let mut dx = vec![T::zero(); saved.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let probs = &saved[r * v..(r + 1) * v];
                        let row = &mut dx[r * v..(r + 1) * v];
                        for (d, &p) in row.iter_mut().zip(probs) {
                            *d = scale * p;
                        }
                        row[t] = row[t] - scale;
                    }
                }
                dx
            });
            vec![dx]
        }
        Op::Transpose { perm } => {
            let (shape, _) = ins[0];
            let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            vec![needs[0].then(|| permute(g, &out_shape, &inverse))]
        }
        Op::Reshape { .. } => vec![needs[0].then(|| g.to_vec())],
        Op::Mean { axis } | Op::Sum { axis } => {
            let (shape, x) = ins[0];
            let dx = needs[0].then(|| {
                let (outer, len, inner, _) =
                    reduce_dims(kind, shape, *axis).expect("validated in forward");
                let scale = if kind == OpKind::Mean {
                    T::one() / T::lit(len as f64)
                } else {
                    T::one()
                };
                let mut dx = vec![T::zero(); x.len()];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                dx
            });
            vec![dx]
        }
        Op::Concat { axis } => {
            let (first, _) = ins[0];
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[*axis + 1..].iter().product();
            let total: usize = ins.iter().map(|(s, _)| s[*axis]).sum();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(ins.len());
            for (k, (s, _)) in ins.iter().enumerate() {
                let len = s[*axis];
                let gk = needs[k].then(|| {
                    let mut gk = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gk.extend_from_slice(&g[start..start + len * inner]);
                    }
                    gk
                });
                grads.push(gk);
                offset += len;
            }
            grads
        }
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    rhs_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<(MatDims, Vec<usize>)> {
    let kind = OpKind::MatMul;
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch(kind, &[a, b], "operands must be at least 2-D"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if bk != k {
        return Err(mismatch(
            kind,
            &[a, b],
            format!("inner dimensions {k} and {bk} differ"),
        ));
    }
    let rhs_batched = b.len() > 2;
    if rhs_batched && (b.len() != a.len() || b[..b.len() - 2] != a[..a.len() - 2]) {
        return Err(mismatch(kind, &[a, b], "batch dimensions differ"));
    }
    let batch = numel(&a[..a.len() - 2]);
    let mut out = a[..a.len() - 2].to_vec();
    out.extend([m, n]);
    Ok((
        MatDims {
            batch,
            m,
            k,
            n,
            rhs_batched,
        },
        out,
    ))
}

fn rhs_view<T>(b: &[T], k: usize, n: usize, trans_b: bool) -> MatRef<'_, T> {
    if trans_b {
        MatRef::transposed(b, k)
    } else {
        MatRef::row_major(b, n)
    }
}

fn matmul_forward<T: Element>(
    a: Input<'_, T>,
    b: Input<'_, T>,
    trans_b: bool,
) -> Result<Forwarded<T>> {
    let (dims, shape) = matmul_dims(a.0, b.0, trans_b)?;
    let MatDims {
        batch,
        m,
        k,
        n,
        rhs_batched,
    } = dims;
    let mut c = vec![T::zero(); batch * m * n];
    if !rhs_batched {
        let bv = rhs_view(b.1, k, n, trans_b);
        gemm(
            batch * m,
            k,
            n,
            T::one(),
            MatRef::row_major(a.1, k),
            bv,
            T::zero(),
            &mut c,
        );
    } else {
        for i in 0..batch {
            let ai = &a.1[i * m * k..(i + 1) * m * k];
            let bi = &b.1[i * k * n..(i + 1) * k * n];
            let ci = &mut c[i * m * n..(i + 1) * m * n];
            gemm(
                m,
                k,
                n,
                T::one(),
                MatRef::row_major(ai, k),
                rhs_view(bi, k, n, trans_b),
                T::zero(),
                ci,
            );
        }
    }
    Ok(Forwarded::plain(shape, c))
}

fn matmul_backward<T: Element>(
    a: Input<'_, T>,
    b: Input<'_, T>,
    trans_b: bool,
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let (dims, _) = matmul_dims(a.0, b.0, trans_b).expect("validated in forward");
    let MatDims {
        batch,
        m,
        k,
        n,
        rhs_batched,
    } = dims;
    // Bᵀ viewed as n×k.
    let bt = |bi| {
        if trans_b {
            MatRef::row_major(bi, k)
        } else {
            MatRef::transposed(bi, n)
        }
    };
    let da = needs[0].then(|| {
        let mut da = vec![T::zero(); a.1.len()];
        if !rhs_batched {
            gemm(
                batch * m,
                n,
                k,
                T::one(),
                MatRef::row_major(g, n),
                bt(b.1),
                T::zero(),
                &mut da,
            );
        } else {
            for i in 0..batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let bi = &b.1[i * k * n..(i + 1) * k * n];
                let dai = &mut da[i * m * k..(i + 1) * m * k];
                gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    MatRef::row_major(gi, n),
                    bt(bi),
                    T::zero(),
                    dai,
                );
            }
        }
        da
    });
    let db = needs[1].then(|| {
        let mut db = vec![T::zero(); b.1.len()];
        let (rows, chunks) = if rhs_batched {
            (m, batch)
        } else {
            (batch * m, 1)
        };
        for i in 0..chunks {
            let gi = &g[i * rows * n..(i + 1) * rows * n];
            let ai = &a.1[i * rows * k..(i + 1) * rows * k];
            let dbi = &mut db[i * k * n..(i + 1) * k * n];
            if trans_b {
                // dB (n×k) = Gᵀ·A
                gemm(
                    n,
                    rows,
                    k,
                    T::one(),
                    MatRef::transposed(gi, n),
                    MatRef::row_major(ai, k),
                    T::zero(),
                    dbi,
                );
            } else {
                // dB (k×n) = Aᵀ·G
                gemm(
                    k,
                    rows,
                    n,
                    T::one(),
                    MatRef::transposed(ai, k),
                    MatRef::row_major(gi, n),
                    T::zero(),
                    dbi,
                );
            }
        }
        db
    });
    vec![da, db]
}

fn suffix_broadcast(kind: OpKind, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(mismatch(
            kind,
            &[a, b],
            "right operand must match a trailing suffix of the left",
        ));
    }
    Ok(numel(b))
}

fn softmax_forward<T: Element>(x: Input<'_, T>, causal: bool) -> Result<Forwarded<T>> {
    let kind = OpKind::Softmax;
    let (shape, data) = x;
    let n = *shape
        .last()
        .ok_or_else(|| mismatch(kind, &[shape], "needs at least one axis"))?;
    if n == 0 {
        return Err(mismatch(kind, &[shape], "empty softmax axis"));
    }
    let rows_per_mat = if causal {
        if shape.len() < 2 || shape[shape.len() - 2] != n {
            return Err(mismatch(
                kind,
                &[shape],
                "causal mask needs square trailing axes",
            ));
        }
        n
    } else {
        1
    };
    let mut value = vec![T::zero(); data.len()];
    for (r, (yr, xr)) in value.chunks_mut(n).zip(data.chunks(n)).enumerate() {
        let valid = if causal { r % rows_per_mat + 1 } else { n };
        let max = xr[..valid]
            .iter()
            .fold(T::neg_infinity(), |acc, &v| acc.max(v));
        let mut total = T::zero();
        for (y, &v) in yr[..valid].iter_mut().zip(&xr[..valid]) {
            *y = (v - max).exp();
            total = total + *y;
        }
        yr[..valid].iter_mut().for_each(|y| *y = *y / total);
    }
    Ok(Forwarded::plain(shape.to_vec(), value))
}

fn norm_params<'a, T>(kind: OpKind, x: &'a [usize], p: Input<'a, T>) -> Result<usize> {
    let d = *x
        .last()
        .ok_or_else(|| mismatch(kind, &[x], "needs at least one axis"))?;
    if d == 0 {
        return Err(mismatch(kind, &[x], "empty normalized axis"));
    }
    if p.0 != [d] {
        return Err(mismatch(
            kind,
            &[x, p.0],
            "gain/bias must match the last axis",
        ));
    }
    Ok(d)
}

fn layer_norm_forward<T: Element>(
    x: Input<'_, T>,
    gain: Input<'_, T>,
    bias: Option<Input<'_, T>>,
    eps: f64,
) -> Result<Forwarded<T>> {
    let kind = OpKind::LayerNorm;
    let d = norm_params(kind, x.0, gain)?;
    if let Some(b) = bias {
        norm_params(kind, x.0, b)?;
    }
    let inv_d = T::one() / T::lit(d as f64);
    let eps_t = T::lit(eps);
    let rows = x.1.len() / d.max(1);
    let mut value = vec![T::zero(); x.1.len()];
    let mut saved = Vec::with_capacity(rows * 2);
    for (yr, xr) in value.chunks_mut(d).zip(x.1.chunks(d)) {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        if eps == 0.0 && var == T::zero() {
            return Err(Error::DegenerateSigma { kind });
        }
        let rstd = T::one() / (var + eps_t).sqrt();
        for (j, (y, &v)) in yr.iter_mut().zip(xr).enumerate() {
            let shift = bias.map_or(T::zero(), |b| b.1[j]);
            *y = (v - mean) * rstd * gain.1[j] + shift;
        }
        saved.push(mean);
        saved.push(rstd);
    }
    Ok(Forwarded {
        shape: x.0.to_vec(),
        value,
        saved,
    })
}

fn layer_norm_backward<T: Element>(
    ins: &[Input<'_, T>],
    saved: &[T],
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let (x_shape, x) = ins[0];
    let gain = ins[1].1;
    let d = *x_shape.last().unwrap();
    let inv_d = T::one() / T::lit(d as f64);
    let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
    let mut dgain = needs[1].then(|| vec![T::zero(); d]);
    let mut dbias = needs[2].then(|| vec![T::zero(); d]);
    let mut gx = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    for (r, (xr, gr)) in x.chunks(d).zip(g.chunks(d)).enumerate() {
        let (mean, rstd) = (saved[2 * r], saved[2 * r + 1]);
        for j in 0..d {
            xhat[j] = (xr[j] - mean) * rstd;
            gx[j] = gr[j] * gain[j];
        }
        if let Some(dgain) = dgain.as_mut() {
            for j in 0..d {
                dgain[j] = dgain[j] + gr[j] * xhat[j];
            }
        }
        if let Some(dbias) = dbias.as_mut() {
            for j in 0..d {
                dbias[j] = dbias[j] + gr[j];
            }
        }
        if let Some(dx) = dx.as_mut() {
            let mean_g = gx.iter().copied().sum::<T>() * inv_d;
            let mean_gx = gx.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
            let out = &mut dx[r * d..(r + 1) * d];
            for j in 0..d {
                out[j] = rstd * (gx[j] - mean_g - xhat[j] * mean_gx);
            }
        }
    }
    vec![dx, dgain, dbias]
}

fn rms_norm_forward<T: Element>(
    x: Input<'_, T>,
    gain: Input<'_, T>,
    eps: f64,
) -> Result<Forwarded<T>> {
    let kind = OpKind::RmsNorm;
    let d = norm_params(kind, x.0, gain)?;
    let inv_d = T::one() / T::lit(d as f64);
    let eps_t = T::lit(eps);
    let mut value = vec![T::zero(); x.1.len()];
    let mut saved = Vec::with_capacity(x.1.len() / d.max(1));
    for (yr, xr) in value.chunks_mut(d).zip(x.1.chunks(d)) {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() * inv_d;
        if eps == 0.0 && ms == T::zero() {
            return Err(Error::DegenerateSigma { kind });
        }
        let rstd = T::one() / (ms + eps_t).sqrt();
        for (j, (y, &v)) in yr.iter_mut().zip(xr).enumerate() {
            *y = v * rstd * gain.1[j];
        }
        saved.push(rstd);
    }
    Ok(Forwarded {
        shape: x.0.to_vec(),
        value,
        saved,
    })
}

fn rms_norm_backward<T: Element>(
    ins: &[Input<'_, T>],
    saved: &[T],
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let (x_shape, x) = ins[0];
    let gain = ins[1].1;
    let d = *x_shape.last().unwrap();
    let inv_d = T::one() / T::lit(d as f64);
    let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
    let mut dgain = needs[1].then(|| vec![T::zero(); d]);
    for (r, (xr, gr)) in x.chunks(d).zip(g.chunks(d)).enumerate() {
        let rstd = saved[r];
        if let Some(dgain) = dgain.as_mut() {
            for j in 0..d {
                dgain[j] = dgain[j] + gr[j] * xr[j] * rstd;
            }
        }
        if let Some(dx) = dx.as_mut() {
            let mean_gx = (0..d).map(|j| gr[j] * gain[j] * xr[j] * rstd).sum::<T>() * inv_d;
            let out = &mut dx[r * d..(r + 1) * d];
            for j in 0..d {
                out[j] = rstd * (gr[j] * gain[j] - xr[j] * rstd * mean_gx);
            }
        }
    }
    vec![dx, dgain]
}

fn cross_entropy_forward<T: Element>(
    logits: Input<'_, T>,
    targets: &[Option<usize>],
) -> Result<Forwarded<T>> {
    let kind = OpKind::CrossEntropy;
    let (shape, x) = logits;
    let v = *shape
        .last()
        .ok_or_else(|| mismatch(kind, &[shape], "needs a class axis"))?;
    if v == 0 {
        return Err(mismatch(kind, &[shape], "empty class axis"));
    }
    let rows = x.len() / v;
    if targets.len() != rows {
        return Err(mismatch(
            kind,
            &[shape],
            format!("{} targets for {rows} rows", targets.len()),
        ));
    }
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Err(Error::InvalidOpInput {
            kind,
            detail: "no targets".into(),
        });
    }
    let mut probs = vec![T::zero(); x.len()];
    let mut total = T::zero();
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= v {
            return Err(Error::InvalidOpInput {
                kind,
                detail: format!("target {t} out of range for {v} classes"),
            });
        }
        let xr = &x[r * v..(r + 1) * v];
        let max = xr.iter().fold(T::neg_infinity(), |acc, &a| acc.max(a));
        let pr = &mut probs[r * v..(r + 1) * v];
        let mut z = T::zero();
        for (p, &a) in pr.iter_mut().zip(xr) {
            *p = (a - max).exp();
            z = z + *p;
        }
        pr.iter_mut().for_each(|p| *p = *p / z);
        total = total + (z.ln() + max - xr[t]);
    }
    let loss = total / T::lit(count as f64);
    Ok(Forwarded {
        shape: Vec::new(),
        value: vec![loss],
        saved: probs,
    })
}

fn check_perm(kind: OpKind, shape: &[usize], perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(mismatch(kind, &[shape, perm], "permutation rank differs"));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(mismatch(kind, &[shape, perm], "not a permutation"));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
fn permute<T: Element>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    if rank == 0 {
        return x.to_vec();
    }
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    // Copy contiguous runs when the last axis stays in place.
    let (outer_rank, chunk) = if perm[rank - 1] == rank - 1 {
        (rank - 1, shape[rank - 1])
    } else {
        (rank, 1)
    };
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; outer_rank];
    loop {
        let offset: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.extend_from_slice(&x[offset..offset + chunk]);
        let mut ax = outer_rank;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn reduce_dims(
    kind: OpKind,
    shape: &[usize],
    axis: Option<usize>,
) -> Result<(usize, usize, usize, Vec<usize>)> {
    match axis {
        None => Ok((1, numel(shape), 1, Vec::new())),
        Some(ax) if ax < shape.len() => {
            let mut out = shape.to_vec();
            out.remove(ax);
            Ok((
                shape[..ax].iter().product(),
                shape[ax],
                shape[ax + 1..].iter().product(),
                out,
            ))
        }
        Some(ax) => Err(mismatch(kind, &[shape], format!("axis {ax} out of range"))),
    }
}

fn concat_forward<T: Element>(ins: &[Input<'_, T>], axis: usize) -> Result<Forwarded<T>> {
    let kind = OpKind::Concat;
    let shapes: Vec<&[usize]> = ins.iter().map(|(s, _)| *s).collect();
    let first = *shapes.first().ok_or(Error::InvalidOpInput {
        kind,
        detail: "no inputs".into(),
    })?;
    if axis >= first.len() {
        return Err(mismatch(kind, &shapes, format!("axis {axis} out of range")));
    }
    for s in &shapes {
        let same = s.len() == first.len()
            && s.iter()
                .zip(first)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(mismatch(kind, &shapes, "non-concat axes differ"));
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut value = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (s, x) in ins {
            let len = s[axis] * inner;
            value.extend_from_slice(&x[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Ok(Forwarded::plain(shape, value))
}
