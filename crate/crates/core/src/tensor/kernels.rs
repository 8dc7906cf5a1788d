//! Forward and adjoint kernels for the dense primitives.
//!
//! Convolutions unfold slabs of the input into `[Cin·k³, V]` panels and reduce
//! each slab with a single GEMM against the `[Cout, Cin·k³]` kernel matrix. The
//! slab partition depends only on the geometry, so the summation order is fixed
//! for a given shape.

use super::Element;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> View<'a, T> {
    fn new(data: &'a [T], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!(offset + (rows - 1) * rs + (cols - 1) * cs < data.len());
        }
        Self {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        }
    }

    fn contiguous(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::new(data, 0, rows, cols, cols, 1)
    }

    fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

struct ViewMut<'a, T> {
    data: &'a mut [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    fn new(
        data: &'a mut [T],
        offset: usize,
        rows: usize,
        cols: usize,
        rs: usize,
        cs: usize,
    ) -> Self {
        if rows > 0 && cols > 0 {
            assert!(offset + (rows - 1) * rs + (cols - 1) * cs < data.len());
        }
        Self {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        }
    }

    fn contiguous(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::new(data, 0, rows, cols, cols, 1)
    }
}

/// `c <- a * b + beta * c`
fn gemm<T: Element>(a: View<T>, b: View<T>, beta: T, c: ViewMut<T>) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(a.rows, c.rows);
    assert_eq!(b.cols, c.cols);
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: every view was bounds-checked against its slice at construction
    // and the extents agree, so all reachable indices are in bounds.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// Range of small-grid positions `o` whose tap `o*stride + tap - shift` lands
/// inside `[0, big_len)`.
fn valid_range(
    small_len: usize,
    big_len: usize,
    stride: usize,
    tap: usize,
    shift: usize,
) -> (usize, usize) {
    let lo = shift.saturating_sub(tap).div_ceil(stride);
    // o*stride + tap - shift <= big_len - 1
    let hi = if big_len + shift > tap {
        ((big_len - 1 + shift - tap) / stride + 1).min(small_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Sliding-window layout shared by convolution and its transpose: panel row
/// `c * k³ + tap` holds `big[c, o*stride + tap - shift]` for each small-grid
/// voxel `o` whose first coordinate lies in `rows`.
struct Window {
    big_ext: [usize; 3],
    small_ext: [usize; 3],
    channels: usize,
    k: usize,
    stride: usize,
    shift: usize,
}

impl Window {
    fn k3(&self) -> usize {
        self.k * self.k * self.k
    }

    fn cols(&self, rows: &std::ops::Range<usize>) -> usize {
        rows.len() * self.small_ext[1] * self.small_ext[2]
    }

    /// Calls `f(panel_offset, big_offset, len)` for every contiguous run of
    /// valid taps; stride-1 runs are contiguous along the last axis.
    fn for_each_run(
        &self,
        rows: &std::ops::Range<usize>,
        mut f: impl FnMut(usize, usize, usize, usize),
    ) {
        let [bw, bh, bd] = self.big_ext;
        let [_, sh, sd] = self.small_ext;
        let big_vol = bw * bh * bd;
        let plane = sh * sd;
        let vc = self.cols(rows);
        let k = self.k;
        for c in 0..self.channels {
            for tap in 0..self.k3() {
                let (ta, tb, tc) = (tap / (k * k), (tap / k) % k, tap % k);
                let row = (c * self.k3() + tap) * vc;
                let (zlo, zhi) = valid_range(sd, bd, self.stride, tc, self.shift);
                let (ylo, yhi) = valid_range(sh, bh, self.stride, tb, self.shift);
                let (xlo, xhi) = valid_range(self.small_ext[0], bw, self.stride, ta, self.shift);
                for ox in rows.start.max(xlo)..rows.end.min(xhi) {
                    let ix = ox * self.stride + ta - self.shift;
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + tb - self.shift;
                        let dst = row + (ox - rows.start) * plane + oy * sd;
                        let src = c * big_vol + (ix * bh + iy) * bd;
                        f(
                            dst + zlo,
                            src + zlo * self.stride + tc - self.shift,
                            zhi - zlo,
                            self.stride,
                        );
                    }
                }
            }
        }
    }

    fn unfold<T: Element>(&self, big: &[T], rows: std::ops::Range<usize>, panel: &mut [T]) {
        let n = self.channels * self.k3() * self.cols(&rows);
        let panel = &mut panel[..n];
        panel.fill(T::zero());
        self.for_each_run(&rows, |dst, src, len, stride| {
            if stride == 1 {
                panel[dst..dst + len].copy_from_slice(&big[src..src + len]);
            } else {
                for i in 0..len {
                    panel[dst + i] = big[src + i * stride];
                }
            }
        });
    }

    fn fold_add<T: Element>(&self, panel: &[T], rows: std::ops::Range<usize>, big: &mut [T]) {
        self.for_each_run(&rows, |dst, src, len, stride| {
            for i in 0..len {
                big[src + i * stride] += panel[dst + i];
            }
        });
    }
}

/// Panel size cap (elements) for chunked convolution.
const PANEL_BUDGET: usize = 1 << 20;

fn ext3(shape: &[usize]) -> [usize; 3] {
    [shape[1], shape[2], shape[3]]
}

/// Geometry of a 3D cross-correlation over `[C, W, H, D]` volumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_ext: [usize; 3],
    pub out_ext: [usize; 3],
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 5 {
            return shape_err(
                "conv3d",
                format!("expected [Cin,W,H,D] input and 5-d kernel, got {input:?} and {kernel:?}"),
            );
        }
        if kernel[1] != input[0] {
            return shape_err(
                "conv3d",
                format!(
                    "kernel expects {} input channels, input has {}",
                    kernel[1], input[0]
                ),
            );
        }
        let k = kernel[2];
        if kernel[3] != k || kernel[4] != k {
            return shape_err("conv3d", format!("kernel must be cubic, got {kernel:?}"));
        }
        if stride == 0 {
            return shape_err("conv3d", "stride must be positive");
        }
        let in_ext = ext3(input);
        let mut out_ext = [0; 3];
        for ax in 0..3 {
            let span = in_ext[ax] + 2 * padding;
            if span < k {
                return shape_err(
                    "conv3d",
                    format!("non-positive output extent on axis {ax} for input {input:?}"),
                );
            }
            out_ext[ax] = (span - k) / stride + 1;
        }
        Ok(Self {
            cin: input[0],
            cout: kernel[0],
            k,
            stride,
            padding,
            in_ext,
            out_ext,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.cout, self.out_ext[0], self.out_ext[1], self.out_ext[2]]
    }

    fn window(&self) -> Window {
        Window {
            big_ext: self.in_ext,
            small_ext: self.out_ext,
            channels: self.cin,
            k: self.k,
            stride: self.stride,
            shift: self.padding,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output slabs (ranges along the first spatial axis) sized so one unfolded
    /// panel stays within [`PANEL_BUDGET`].
    fn chunks(&self) -> Vec<std::ops::Range<usize>> {
        let per_slab = self.cin * self.k.pow(3) * self.out_ext[1] * self.out_ext[2];
        let step = (PANEL_BUDGET / per_slab.max(1)).max(1);
        (0..self.out_ext[0])
            .step_by(step)
            .map(|s| s..(s + step).min(self.out_ext[0]))
            .collect()
    }
}

pub fn conv3d_forward<T: Element>(x: &[T], w: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let vout: usize = g.out_ext.iter().product();
    let plane = g.out_ext[1] * g.out_ext[2];
    let depth = g.cin * g.k.pow(3);
    let mut out = vec![T::zero(); g.cout * vout];
    for (co, b) in bias.iter().enumerate() {
        out[co * vout..(co + 1) * vout].fill(*b);
    }
    if g.is_pointwise() {
        gemm(
            View::contiguous(w, g.cout, g.cin),
            View::contiguous(x, g.cin, vout),
            T::one(),
            ViewMut::contiguous(&mut out, g.cout, vout),
        );
        return out;
    }
    let win = g.window();
    let chunks = g.chunks();
    let mut panel = vec![T::zero(); depth * chunks[0].len() * plane];
    for rows in chunks {
        let vc = rows.len() * plane;
        let start = rows.start * plane;
        win.unfold(x, rows, &mut panel);
        gemm(
            View::contiguous(w, g.cout, depth),
            View::contiguous(&panel[..depth * vc], depth, vc),
            T::one(),
            ViewMut::new(&mut out, start, g.cout, vc, vout, 1),
        );
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv3d_backward<T: Element>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let vin: usize = g.in_ext.iter().product();
    let vout: usize = g.out_ext.iter().product();
    let plane = g.out_ext[1] * g.out_ext[2];
    let depth = g.cin * g.k.pow(3);
    let bias = (0..g.cout)
        .map(|co| dout[co * vout..(co + 1) * vout].iter().copied().sum())
        .collect();
    let mut dw = vec![T::zero(); g.cout * depth];
    let mut dx = need_input.then(|| vec![T::zero(); g.cin * vin]);

    if g.is_pointwise() {
        gemm(
            View::contiguous(dout, g.cout, vout),
            View::contiguous(x, g.cin, vout).t(),
            T::zero(),
            ViewMut::contiguous(&mut dw, g.cout, g.cin),
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                View::contiguous(w, g.cout, g.cin).t(),
                View::contiguous(dout, g.cout, vout),
                T::zero(),
                ViewMut::contiguous(dx, g.cin, vout),
            );
        }
        return ConvGrads {
            input: dx,
            kernel: dw,
            bias,
        };
    }

    let win = g.window();
    let chunks = g.chunks();
    let cap = depth * chunks[0].len() * plane;
    let mut panel = vec![T::zero(); cap];
    let mut dpanel = vec![T::zero(); if need_input { cap } else { 0 }];
    for rows in chunks {
        let vc = rows.len() * plane;
        let start = rows.start * plane;
        let dout_chunk = View::new(dout, start, g.cout, vc, vout, 1);
        win.unfold(x, rows.clone(), &mut panel);
        gemm(
            dout_chunk,
            View::contiguous(&panel[..depth * vc], depth, vc).t(),
            T::one(),
            ViewMut::contiguous(&mut dw, g.cout, depth),
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                View::contiguous(w, g.cout, depth).t(),
                dout_chunk,
                T::zero(),
                ViewMut::contiguous(&mut dpanel[..depth * vc], depth, vc),
            );
            win.fold_add(&dpanel, rows, dx);
        }
    }
    ConvGrads {
        input: dx,
        kernel: dw,
        bias,
    }
}

/// Geometry of a transposed convolution producing exactly `stride`× upsampling.
/// The kernel is `[Cin, Cout, k, k, k]` with `k >= stride` and `k - stride` even;
/// `(k - stride) / 2` is cropped from each side of the full output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub in_ext: [usize; 3],
    pub out_ext: [usize; 3],
}

impl ConvTransposeGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 5 {
            return shape_err(
                "conv_transpose3d",
                format!("expected [Cin,W,H,D] input and 5-d kernel, got {input:?} and {kernel:?}"),
            );
        }
        if kernel[0] != input[0] {
            return shape_err(
                "conv_transpose3d",
                format!(
                    "kernel expects {} input channels, input has {}",
                    kernel[0], input[0]
                ),
            );
        }
        let k = kernel[2];
        if kernel[3] != k || kernel[4] != k {
            return shape_err(
                "conv_transpose3d",
                format!("kernel must be cubic, got {kernel:?}"),
            );
        }
        if stride == 0 || k < stride || !(k - stride).is_multiple_of(2) {
            return shape_err(
                "conv_transpose3d",
                format!("kernel {k} cannot upsample exactly by stride {stride}"),
            );
        }
        let in_ext = ext3(input);
        Ok(Self {
            cin: input[0],
            cout: kernel[1],
            k,
            stride,
            in_ext,
            out_ext: in_ext.map(|e| e * stride),
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.cout, self.out_ext[0], self.out_ext[1], self.out_ext[2]]
    }

    fn window(&self) -> Window {
        Window {
            big_ext: self.out_ext,
            small_ext: self.in_ext,
            channels: self.cout,
            k: self.k,
            stride: self.stride,
            shift: (self.k - self.stride) / 2,
        }
    }
}

pub fn conv_transpose3d_forward<T: Element>(
    x: &[T],
    w: &[T],
    bias: &[T],
    g: &ConvTransposeGeom,
) -> Vec<T> {
    let vin: usize = g.in_ext.iter().product();
    let vout: usize = g.out_ext.iter().product();
    let depth = g.cout * g.k.pow(3);
    let mut out = vec![T::zero(); g.cout * vout];
    for (co, b) in bias.iter().enumerate() {
        out[co * vout..(co + 1) * vout].fill(*b);
    }
    let mut panel = vec![T::zero(); depth * vin];
    gemm(
        View::contiguous(w, g.cin, depth).t(),
        View::contiguous(x, g.cin, vin),
        T::zero(),
        ViewMut::contiguous(&mut panel, depth, vin),
    );
    g.window().fold_add(&panel, 0..g.in_ext[0], &mut out);
    out
}

pub fn conv_transpose3d_backward<T: Element>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvTransposeGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let vin: usize = g.in_ext.iter().product();
    let vout: usize = g.out_ext.iter().product();
    let depth = g.cout * g.k.pow(3);
    let bias = (0..g.cout)
        .map(|co| dout[co * vout..(co + 1) * vout].iter().copied().sum())
        .collect();
    let mut panel = vec![T::zero(); depth * vin];
    g.window().unfold(dout, 0..g.in_ext[0], &mut panel);
    let mut dw = vec![T::zero(); g.cin * depth];
    gemm(
        View::contiguous(x, g.cin, vin),
        View::contiguous(&panel, depth, vin).t(),
        T::zero(),
        ViewMut::contiguous(&mut dw, g.cin, depth),
    );
    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); g.cin * vin];
        gemm(
            View::contiguous(w, g.cin, depth),
            View::contiguous(&panel, depth, vin),
            T::zero(),
            ViewMut::contiguous(&mut dx, g.cin, vin),
        );
        dx
    });
    ConvGrads {
        input: dx,
        kernel: dw,
        bias,
    }
}

/// `x [rows, din] * w^T [din, dout] + b`
pub fn linear_forward<T: Element>(
    x: &[T],
    w: &[T],
    bias: &[T],
    rows: usize,
    din: usize,
    dout: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    gemm(
        View::contiguous(x, rows, din),
        View::contiguous(w, dout, din).t(),
        T::one(),
        ViewMut::contiguous(&mut out, rows, dout),
    );
    out
}

pub struct LinearGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn linear_backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    rows: usize,
    din: usize,
    dout: usize,
    need_input: bool,
) -> LinearGrads<T> {
    let input = need_input.then(|| {
        let mut dx = vec![T::zero(); rows * din];
        gemm(
            View::contiguous(dy, rows, dout),
            View::contiguous(w, dout, din),
            T::zero(),
            ViewMut::contiguous(&mut dx, rows, din),
        );
        dx
    });
    let mut weight = vec![T::zero(); dout * din];
    gemm(
        View::contiguous(dy, rows, dout).t(),
        View::contiguous(x, rows, din),
        T::zero(),
        ViewMut::contiguous(&mut weight, dout, din),
    );
    let mut bias = vec![T::zero(); dout];
    for r in 0..rows {
        for (b, &g) in bias.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
            *b += g;
        }
    }
    LinearGrads {
        input,
        weight,
        bias,
    }
}

/// Batched `a [batch, m, k] * b [batch, k, n]`, optionally transposing either
/// operand's trailing two axes.
#[allow(clippy::too_many_arguments)]
pub fn batched_matmul<T: Element>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_a: bool,
    transpose_b: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let av = if transpose_a {
            View::new(a, i * m * k, k, m, m, 1).t()
        } else {
            View::new(a, i * m * k, m, k, k, 1)
        };
        let bv = if transpose_b {
            View::new(b, i * k * n, n, k, k, 1).t()
        } else {
            View::new(b, i * k * n, k, n, n, 1)
        };
        gemm(
            av,
            bv,
            T::zero(),
            ViewMut::new(&mut out, i * m * n, m, n, n, 1),
        );
    }
    out
}
