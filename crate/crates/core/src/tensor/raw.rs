//! Gradient-free kernels shared by the tape's forward and backward rules.

use super::{numel_of, strides_of, Tensor};
use crate::error::{Error, Result};

/// Boundary extension used when a convolution reads outside the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaddingMode {
    Zero,
    Replicate,
    Circular,
}

impl std::str::FromStr for PaddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "replicate" => Ok(Self::Replicate),
            "circular" => Ok(Self::Circular),
            other => Err(Error::invalid(format!("unknown padding mode '{other}'"))),
        }
    }
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Broadcast {
                    a: a.to_vec(),
                    b: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For every linear index of `out_shape`, the linear index of the element of
/// `src_shape` that broadcasts onto it.
pub(crate) fn broadcast_offsets(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let src_strides = strides_of(src_shape);
    let lead = rank - src_shape.len();
    let eff: Vec<usize> = (0..rank)
        .map(|i| {
            if i < lead || src_shape[i - lead] == 1 {
                0
            } else {
                src_strides[i - lead]
            }
        })
        .collect();
    let n = numel_of(out_shape);
    let mut offsets = Vec::with_capacity(n);
    if rank == 0 {
        offsets.push(0);
        return offsets;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Strides of `src_shape` viewed inside `out_shape`, zero on broadcast axes.
fn effective_strides(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let src_strides = strides_of(src_shape);
    let lead = rank - src_shape.len();
    (0..rank)
        .map(|i| {
            if i < lead || src_shape[i - lead] == 1 {
                0
            } else {
                src_strides[i - lead]
            }
        })
        .collect()
}

/// Walks `out_shape` in maximal inner runs. For each run, `f` receives the
/// output offset, each operand's start offset and inner stride, and the run
/// length. Adjacent axes are merged whenever every operand stays regular.
fn for_each_run<const N: usize>(
    out_shape: &[usize],
    strides: [Vec<usize>; N],
    mut f: impl FnMut(usize, [usize; N], [usize; N], usize),
) {
    let n = numel_of(out_shape);
    if n == 0 {
        return;
    }
    let mut dims: Vec<usize> = Vec::new();
    let mut st: Vec<[usize; N]> = Vec::new();
    for (d, &ext) in out_shape.iter().enumerate() {
        if ext == 1 {
            continue;
        }
        let cur: [usize; N] = std::array::from_fn(|k| strides[k][d]);
        if let (Some(last_ext), Some(last)) = (dims.last_mut(), st.last_mut()) {
            if (0..N).all(|k| last[k] == cur[k] * ext) {
                *last_ext *= ext;
                *last = cur;
                continue;
            }
        }
        dims.push(ext);
        st.push(cur);
    }
    if dims.is_empty() {
        f(0, [0; N], [0; N], 1);
        return;
    }
    let inner = dims.pop().expect("non-empty");
    let inner_st = st.pop().expect("non-empty");
    let outer = n / inner;
    let mut idx = vec![0usize; dims.len()];
    let mut off = [0usize; N];
    for run in 0..outer {
        f(run * inner, off, inner_st, inner);
        for d in (0..dims.len()).rev() {
            idx[d] += 1;
            for k in 0..N {
                off[k] += st[d][k];
            }
            if idx[d] < dims[d] {
                break;
            }
            for k in 0..N {
                off[k] -= st[d][k] * idx[d];
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    let mut out = vec![0.0; numel_of(&out_shape)];
    let strides = [
        effective_strides(&a.shape, &out_shape),
        effective_strides(&b.shape, &out_shape),
    ];
    for_each_run(&out_shape, strides, |o, [ia, ib], [sa, sb], len| {
        let dst = &mut out[o..o + len];
        match (sa, sb) {
            (1, 0) => {
                let bv = b.data[ib];
                for (d, &av) in dst.iter_mut().zip(&a.data[ia..ia + len]) {
                    *d = f(av, bv);
                }
            }
            (0, 1) => {
                let av = a.data[ia];
                for (d, &bv) in dst.iter_mut().zip(&b.data[ib..ib + len]) {
                    *d = f(av, bv);
                }
            }
            (1, 1) => {
                for ((d, &av), &bv) in dst.iter_mut().zip(&a.data[ia..ia + len]).zip(&b.data[ib..ib + len]) {
                    *d = f(av, bv);
                }
            }
            _ => {
                for (k, d) in dst.iter_mut().enumerate() {
                    *d = f(a.data[ia + k * sa], b.data[ib + k * sb]);
                }
            }
        }
    });
    Ok(Tensor::from_parts(out_shape, out))
}

/// Repeats `x` along broadcast axes to `out_shape`.
pub(crate) fn broadcast_to(x: &Tensor, out_shape: &[usize]) -> Tensor {
    if x.shape == out_shape {
        return x.clone();
    }
    let mut out = vec![0.0; numel_of(out_shape)];
    for_each_run(out_shape, [effective_strides(&x.shape, out_shape)], |o, [ix], [sx], len| {
        let dst = &mut out[o..o + len];
        if sx == 0 {
            dst.fill(x.data[ix]);
        } else {
            for (k, d) in dst.iter_mut().enumerate() {
                *d = x.data[ix + k * sx];
            }
        }
    });
    Tensor::from_parts(out_shape.to_vec(), out)
}

/// Sums a broadcast result back down to `shape` (adjoint of broadcasting).
pub(crate) fn sum_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape == shape {
        return g.clone();
    }
    let mut out = vec![0.0; numel_of(shape)];
    for_each_run(&g.shape, [effective_strides(shape, &g.shape)], |o, [it], [st], len| {
        let src = &g.data[o..o + len];
        if st == 0 {
            out[it] += src.iter().sum::<f64>();
        } else {
            for (k, v) in src.iter().enumerate() {
                out[it + k * st] += v;
            }
        }
    });
    Tensor::from_parts(shape.to_vec(), out)
}

pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

/// Sum over `axes`, keeping them as extent-1 dimensions.
pub(crate) fn sum_axes_keepdim(x: &Tensor, axes: &[usize]) -> Tensor {
    let out_shape = reduced_shape(&x.shape, axes);
    sum_to_shape(x, &out_shape)
}

pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(format!(
            "invalid permutation {perm:?} for rank {rank}"
        )));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let in_strides = strides_of(&x.shape);
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    if rank == 0 {
        return Ok(x.clone());
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(x.data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || start + len > x.shape[axis] {
        return Err(Error::shape(format!(
            "slice [{start}, {}) on axis {axis} of {:?}",
            start + len,
            x.shape
        )));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let ext = x.shape[axis];
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

/// Adjoint of [`slice_axis`]: places `g` into a zero tensor of `full_shape`.
pub(crate) fn unslice_axis(g: &Tensor, full_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let outer: usize = full_shape[..axis].iter().product();
    let inner: usize = full_shape[axis + 1..].iter().product();
    let ext = full_shape[axis];
    let len = g.shape[axis];
    let mut out = vec![0.0; numel_of(full_shape)];
    for o in 0..outer {
        let dst = (o * ext + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&g.data[src..src + len * inner]);
    }
    Tensor::from_parts(full_shape.to_vec(), out)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    if axis >= first.rank() {
        return Err(Error::invalid(format!("concat axis {axis} out of range")));
    }
    for p in parts {
        let ok = p.rank() == first.rank()
            && p
                .shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(format!(
                "concat {:?} with {:?} on axis {axis}",
                first.shape, p.shape
            )));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}

/// Row-major `c = a·b + beta·c` with arbitrary element strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every element dgemm reads or writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batched matrix product over the last two axes with broadcast batch axes.
/// `ta`/`tb` read the stored matrix transposed.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return Err(Error::shape(format!(
            "matmul needs rank >= 2, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (sa0, sa1) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (sb0, sb1) = (b.shape[rb - 2], b.shape[rb - 1]);
    let (m, ka) = if ta { (sa1, sa0) } else { (sa0, sa1) };
    let (kb, n) = if tb { (sb1, sb0) } else { (sb0, sb1) };
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let k = ka;
    let batch_a = &a.shape[..ra - 2];
    let batch_b = &b.shape[..rb - 2];
    let batch = broadcast_shape(batch_a, batch_b)?;
    let off_a = broadcast_offsets(batch_a, &batch);
    let off_b = broadcast_offsets(batch_b, &batch);
    let (rsa, csa) = if ta { (1, sa1) } else { (sa1, 1) };
    let (rsb, csb) = if tb { (1, sb1) } else { (sb1, 1) };
    let mut out_shape = batch.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![0.0; numel_of(&out_shape)];
    for (bi, (&oa, &ob)) in off_a.iter().zip(&off_b).enumerate() {
        let pa = &a.data[oa * sa0 * sa1..(oa + 1) * sa0 * sa1];
        let pb = &b.data[ob * sb0 * sb1..(ob + 1) * sb0 * sb1];
        let pc = &mut out[bi * m * n..(bi + 1) * m * n];
        gemm(m, k, n, pa, rsa, csa, pb, rsb, csb, 0.0, pc);
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Geometry of a strided, unpadded 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, groups: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects [b,c,h,w] input and [o,c/g,kh,kw] weight, got {x_shape:?} and {w_shape:?}"
            )));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::invalid("conv2d stride and groups must be positive"));
        }
        let (batch, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, cg, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if c_in % groups != 0 || c_out % groups != 0 || cg * groups != c_in {
            return Err(Error::shape(format!(
                "conv2d channel/group mismatch: input {c_in} channels, weight {w_shape:?}, groups {groups}"
            )));
        }
        if kh > h || kw > w {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        Ok(Self {
            batch,
            c_in,
            c_out,
            h,
            w,
            kh,
            kw,
            stride,
            groups,
            ho: (h - kh) / stride + 1,
            wo: (w - kw) / stride + 1,
        })
    }

    fn cg(&self) -> usize {
        self.c_in / self.groups
    }

    fn og(&self) -> usize {
        self.c_out / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cg() * self.kh * self.kw
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let hw = g.ho * g.wo;
    for c in 0..g.cg() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oh in 0..g.ho {
                    let src = &plane[(oh * g.stride + ki) * g.w + kj..];
                    let d = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if g.stride == 1 {
                        d.copy_from_slice(&src[..g.wo]);
                    } else {
                        for (ow, v) in d.iter_mut().enumerate() {
                            *v = src[ow * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], x: &mut [f64]) {
    let hw = g.ho * g.wo;
    for c in 0..g.cg() {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oh in 0..g.ho {
                    let base = (oh * g.stride + ki) * g.w + kj;
                    for ow in 0..g.wo {
                        plane[base + ow * g.stride] += src[oh * g.wo + ow];
                    }
                }
            }
        }
    }
}

fn is_depthwise(g: &ConvGeom) -> bool {
    g.cg() == 1 && g.og() == 1
}

/// Visits every (plane, tap, output row) of a depthwise convolution, passing
/// the weight index, the input row offset and the output row offset.
fn depthwise_rows(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    for p in 0..g.batch * g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let tap = (p % g.c_in) * g.kh * g.kw + ki * g.kw + kj;
                for oh in 0..g.ho {
                    let src = p * g.h * g.w + (oh * g.stride + ki) * g.w + kj;
                    f(tap, src, p * g.ho * g.wo + oh * g.wo);
                }
            }
        }
    }
}

/// Valid (unpadded) cross-correlation: `x [b,c,h,w]`, `w [o,c/g,kh,kw]`.
pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, groups: usize) -> Result<Tensor> {
    let g = ConvGeom::new(&x.shape, &w.shape, stride, groups)?;
    let (cg, og, rows, hw) = (g.cg(), g.og(), g.col_rows(), g.ho * g.wo);
    let mut out = vec![0.0; g.batch * g.c_out * hw];
    if is_depthwise(&g) {
        let s = g.stride;
        depthwise_rows(&g, |tap, src, dst| {
            let wv = w.data[tap];
            let o = &mut out[dst..dst + g.wo];
            if s == 1 {
                for (o, xv) in o.iter_mut().zip(&x.data[src..src + g.wo]) {
                    *o += wv * xv;
                }
            } else {
                for (ow, o) in o.iter_mut().enumerate() {
                    *o += wv * x.data[src + ow * s];
                }
            }
        });
        return Ok(Tensor::from_parts(vec![g.batch, g.c_out, g.ho, g.wo], out));
    }
    let mut cols = vec![0.0; rows * hw];
    for b in 0..g.batch {
        for grp in 0..groups {
            let xs = &x.data[(b * g.c_in + grp * cg) * g.h * g.w..][..cg * g.h * g.w];
            im2col(&g, xs, &mut cols);
            let wg = &w.data[grp * og * rows..(grp + 1) * og * rows];
            let dst = &mut out[(b * g.c_out + grp * og) * hw..][..og * hw];
            gemm(og, rows, hw, wg, rows, 1, &cols, hw, 1, 0.0, dst);
        }
    }
    Ok(Tensor::from_parts(vec![g.batch, g.c_out, g.ho, g.wo], out))
}

/// Adjoint of [`conv2d_forward`] with respect to its input.
pub(crate) fn conv2d_input_grad(
    dy: &Tensor,
    w: &Tensor,
    stride: usize,
    groups: usize,
    in_hw: (usize, usize),
) -> Result<Tensor> {
    let c_in = w.shape[1] * groups;
    let g = ConvGeom::new(&[dy.shape[0], c_in, in_hw.0, in_hw.1], &w.shape, stride, groups)?;
    if dy.shape != [g.batch, g.c_out, g.ho, g.wo] {
        return Err(Error::shape(format!(
            "conv adjoint: gradient {:?} does not match geometry {:?}",
            dy.shape,
            [g.batch, g.c_out, g.ho, g.wo]
        )));
    }
    let (cg, og, rows, hw) = (g.cg(), g.og(), g.col_rows(), g.ho * g.wo);
    let mut dx = vec![0.0; g.batch * g.c_in * g.h * g.w];
    if is_depthwise(&g) {
        let s = g.stride;
        depthwise_rows(&g, |tap, src, dst| {
            let wv = w.data[tap];
            let d = &dy.data[dst..dst + g.wo];
            if s == 1 {
                for (x, dv) in dx[src..src + g.wo].iter_mut().zip(d) {
                    *x += wv * dv;
                }
            } else {
                for (ow, dv) in d.iter().enumerate() {
                    dx[src + ow * s] += wv * dv;
                }
            }
        });
        return Ok(Tensor::from_parts(vec![g.batch, g.c_in, g.h, g.w], dx));
    }
    let mut cols = vec![0.0; rows * hw];
    for b in 0..g.batch {
        for grp in 0..groups {
            let wg = &w.data[grp * og * rows..(grp + 1) * og * rows];
            let dyg = &dy.data[(b * g.c_out + grp * og) * hw..][..og * hw];
            gemm(rows, og, hw, wg, 1, rows, dyg, hw, 1, 0.0, &mut cols);
            let dst = &mut dx[(b * g.c_in + grp * cg) * g.h * g.w..][..cg * g.h * g.w];
            col2im(&g, &cols, dst);
        }
    }
    Ok(Tensor::from_parts(vec![g.batch, g.c_in, g.h, g.w], dx))
}

/// Gradient of [`conv2d_forward`] with respect to its weight.
pub(crate) fn conv2d_weight_grad(
    x: &Tensor,
    dy: &Tensor,
    stride: usize,
    groups: usize,
    kernel_hw: (usize, usize),
) -> Result<Tensor> {
    let c_out = dy.shape[1];
    let w_shape = [c_out, x.shape[1] / groups, kernel_hw.0, kernel_hw.1];
    let g = ConvGeom::new(&x.shape, &w_shape, stride, groups)?;
    let (cg, og, rows, hw) = (g.cg(), g.og(), g.col_rows(), g.ho * g.wo);
    let mut dw = vec![0.0; c_out * rows];
    if is_depthwise(&g) {
        let s = g.stride;
        depthwise_rows(&g, |tap, src, dst| {
            let d = &dy.data[dst..dst + g.wo];
            let acc: f64 = if s == 1 {
                d.iter().zip(&x.data[src..src + g.wo]).map(|(a, b)| a * b).sum()
            } else {
                d.iter().enumerate().map(|(ow, dv)| dv * x.data[src + ow * s]).sum()
            };
            dw[tap] += acc;
        });
        return Ok(Tensor::from_parts(w_shape.to_vec(), dw));
    }
    let mut cols = vec![0.0; rows * hw];
    for b in 0..g.batch {
        for grp in 0..groups {
            let xs = &x.data[(b * g.c_in + grp * cg) * g.h * g.w..][..cg * g.h * g.w];
            im2col(&g, xs, &mut cols);
            let dyg = &dy.data[(b * g.c_out + grp * og) * hw..][..og * hw];
            let dst = &mut dw[grp * og * rows..(grp + 1) * og * rows];
            gemm(og, hw, rows, dyg, hw, 1, &cols, 1, hw, 1.0, dst);
        }
    }
    Ok(Tensor::from_parts(w_shape.to_vec(), dw))
}

fn pad_source(i: isize, n: usize, mode: PaddingMode) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match mode {
        PaddingMode::Zero => None,
        PaddingMode::Replicate => Some(i.clamp(0, n as isize - 1) as usize),
        PaddingMode::Circular => Some(i.rem_euclid(n as isize) as usize),
    }
}

fn pad_maps(h: usize, w: usize, pads: [usize; 4], mode: PaddingMode) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let [top, bottom, left, right] = pads;
    let rows = (0..h + top + bottom)
        .map(|i| pad_source(i as isize - top as isize, h, mode))
        .collect();
    let cols = (0..w + left + right)
        .map(|j| pad_source(j as isize - left as isize, w, mode))
        .collect();
    (rows, cols)
}

/// Pads the last two axes by `[top, bottom, left, right]`.
pub fn pad2d(x: &Tensor, pads: [usize; 4], mode: PaddingMode) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::shape("pad2d needs rank >= 2"));
    }
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    if h == 0 || w == 0 {
        return Err(Error::shape("pad2d on empty plane"));
    }
    let (rows, cols) = pad_maps(h, w, pads, mode);
    let planes = x.numel() / (h * w);
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (i, ri) in rows.iter().enumerate() {
            let Some(ri) = ri else { continue };
            for (j, cj) in cols.iter().enumerate() {
                if let Some(cj) = cj {
                    dst[i * ow + j] = src[ri * w + cj];
                }
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of [`pad2d`]: folds the padded gradient back onto the source plane.
pub(crate) fn pad2d_adjoint(g: &Tensor, in_hw: (usize, usize), pads: [usize; 4], mode: PaddingMode) -> Tensor {
    let r = g.rank();
    let (h, w) = in_hw;
    let (rows, cols) = pad_maps(h, w, pads, mode);
    let (oh, ow) = (rows.len(), cols.len());
    let planes = g.numel() / (oh * ow);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g.data[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (i, ri) in rows.iter().enumerate() {
            let Some(ri) = ri else { continue };
            for (j, cj) in cols.iter().enumerate() {
                if let Some(cj) = cj {
                    dst[ri * w + cj] += src[i * ow + j];
                }
            }
        }
    }
    let mut shape = g.shape.clone();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::from_parts(shape, out)
}

/// Keeps the top-left sample of every `s x s` block of the last two axes.
pub fn decimate(x: &Tensor, s: usize) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 || s == 0 {
        return Err(Error::invalid("decimate needs rank >= 2 and s >= 1"));
    }
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    if h % s != 0 || w % s != 0 {
        return Err(Error::shape(format!(
            "image extents {h}x{w} are not divisible by scale {s}"
        )));
    }
    let (oh, ow) = (h / s, w / s);
    let planes = x.numel() / (h * w);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x.data[p * h * w..];
        for i in 0..oh {
            for j in 0..ow {
                out.push(src[i * s * w + j * s]);
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of [`decimate`]: zero-insertion upsampling.
pub fn zero_insert(g: &Tensor, s: usize) -> Tensor {
    let r = g.rank();
    let (oh, ow) = (g.shape[r - 2], g.shape[r - 1]);
    let (h, w) = (oh * s, ow * s);
    let planes = g.numel() / (oh * ow);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                out[p * h * w + i * s * w + j * s] = g.data[p * oh * ow + i * ow + j];
            }
        }
    }
    let mut shape = g.shape.clone();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::from_parts(shape, out)
}

/// Numerically stable softmax along the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let n = *x
        .shape
        .last()
        .ok_or_else(|| Error::shape("softmax of a scalar"))?;
    let mut out = x.data.clone();
    for row in out.chunks_mut(n.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}
