use super::Scalar;
use crate::error::{Error, Result};

/// `c (m×n) = op(a) (m×k) · op(b) (k×n)`, optionally accumulating into `c`.
///
/// `a` is stored m×k row-major, or k×m when `trans_a`; likewise `b` is k×n or
/// n×k when `trans_b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the length assertions above cover every element addressed by
    // these strides, and `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A row-major view into a larger buffer: `rows × cols` elements starting at
/// `offset`, consecutive rows `stride` apart.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
}

impl View {
    fn end(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.stride + self.cols
        }
    }

    fn strides(&self, trans: bool) -> (isize, isize) {
        if trans {
            (1, self.stride as isize)
        } else {
            (self.stride as isize, 1)
        }
    }
}

/// `c ← op(a)·op(b) (+ c)` on strided views; `op` transposes when asked.
pub(crate) fn gemm_view<T: Scalar>(
    a: &[T],
    va: View,
    trans_a: bool,
    b: &[T],
    vb: View,
    trans_b: bool,
    c: &mut [T],
    vc: View,
    accumulate: bool,
) {
    let (m, k) = if trans_a { (va.cols, va.rows) } else { (va.rows, va.cols) };
    let (k2, n) = if trans_b { (vb.cols, vb.rows) } else { (vb.rows, vb.cols) };
    assert!(k == k2 && vc.rows == m && vc.cols == n, "gemm view shapes disagree");
    assert!(a.len() >= va.end() && b.len() >= vb.end() && c.len() >= vc.end());
    assert!(vc.cols <= vc.stride || vc.rows <= 1);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                c[vc.offset + r * vc.stride..][..n].fill(T::zero());
            }
        }
        return;
    }
    let (rsa, csa) = va.strides(trans_a);
    let (rsb, csb) = vb.strides(trans_b);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: every addressed element lies below `end()`, checked above, and
    // rows of `c` do not overlap because `cols <= stride`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(va.offset),
            rsa,
            csa,
            b.as_ptr().add(vb.offset),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.stride as isize,
            1,
        );
    }
}

/// How two operand shapes line up in an elementwise op.
///
/// Only scalar and leading-batch broadcasting exist: the smaller operand must
/// hold one element or match the trailing dimensions of the larger one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// Left operand repeats with this period.
    Lhs(usize),
    /// Right operand repeats with this period.
    Rhs(usize),
}

pub(crate) fn broadcast(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, Broadcast)> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok((a.to_vec(), Broadcast::Same));
    }
    if nb == 1 {
        return Ok((a.to_vec(), Broadcast::Rhs(1)));
    }
    if na == 1 {
        return Ok((b.to_vec(), Broadcast::Lhs(1)));
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok((a.to_vec(), Broadcast::Rhs(nb)));
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok((b.to_vec(), Broadcast::Lhs(na)));
    }
    Err(Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// Sum a full-size gradient down to a repeating operand of the given period.
pub(crate) fn reduce_periodic<T: Scalar>(g: &[T], period: usize) -> Vec<T> {
    let mut out = vec![T::zero(); period];
    for chunk in g.chunks(period) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

/// Branch-free single-precision exponential (range reduction to
/// `[-ln2/2, ln2/2]` plus a degree-6 polynomial), within a few ulp of
/// `f32::exp` and written so the compiler can vectorize loops over it.
/// Inputs below about −87.3 return the smallest normal number instead of a
/// subnormal or zero.
#[inline(always)]
pub(crate) fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const SHIFTER: f32 = 12_582_912.0; // 1.5 · 2^23
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.3, 88.3);
    let t = x * LOG2E + SHIFTER;
    let n = t - SHIFTER;
    let bits_n = (t.to_bits() as i32).wrapping_sub(SHIFTER.to_bits() as i32);
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((bits_n + 127) << 23) as u32)
}

/// A shape split around one axis: `outer × len × inner`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisLayout {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisLayout {
    pub fn new(op: &'static str, shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::Axis {
                op,
                axis,
                rank: shape.len(),
            });
        }
        Ok(AxisLayout {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    #[inline]
    pub fn index(&self, o: usize, j: usize, i: usize) -> usize {
        (o * self.len + j) * self.inner + i
    }
}

/// Copy `data` of shape `shape` into the layout with axes `a0` and `a1` swapped.
pub(crate) fn swap_axes<T: Scalar>(data: &[T], shape: &[usize], a0: usize, a1: usize) -> Vec<T> {
    let (lo, hi) = if a0 < a1 { (a0, a1) } else { (a1, a0) };
    if lo == hi {
        return data.to_vec();
    }
    let block: usize = shape[hi + 1..].iter().product();
    // Row-major strides of the source, in units of `block`.
    let dims = &shape[..=hi];
    let mut src_strides = vec![0usize; dims.len()];
    let mut acc = 1;
    for d in (0..dims.len()).rev() {
        src_strides[d] = acc;
        acc *= dims[d];
    }
    let mut out_dims = dims.to_vec();
    out_dims.swap(lo, hi);
    let mut strides = src_strides.clone();
    strides.swap(lo, hi);

    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; out_dims.len()];
    let total: usize = out_dims.iter().product();
    let mut offset = 0usize;
    for _ in 0..total {
        let start = offset * block;
        out.extend_from_slice(&data[start..start + block]);
        // odometer increment over the output dims
        for d in (0..out_dims.len()).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_dims[d] {
                break;
            }
            offset -= strides[d] * out_dims[d];
            counter[d] = 0;
        }
    }
    out
}
