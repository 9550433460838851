//! im2col convolution kernels.
//!
//! Padding is resolved once into a gather map from (kernel tap, output pixel)
//! to an input pixel, so reflect and zero padding share one code path and the
//! backward pass is the exact transpose of the forward gather.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Shape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    #[default]
    ReflectSame,
    ZeroSame,
}

const PAD: u32 = u32::MAX;

#[derive(Clone, Debug)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// `map[tap * out_plane + p]` is the input pixel read by tap `tap` at output pixel `p`.
    map: Vec<u32>,
}

fn reflect(i: isize, len: usize) -> Option<usize> {
    let n = len as isize;
    if len == 1 {
        return Some(0);
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    (0..n).contains(&r).then_some(r as usize)
}

impl ConvGeom {
    pub fn new(
        in_h: usize,
        in_w: usize,
        k: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel size {k} is even")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride 0"));
        }
        let pad = k / 2;
        if padding == Padding::ReflectSame
            && ((in_h > 1 && pad >= in_h) || (in_w > 1 && pad >= in_w))
        {
            return Err(Error::invalid(
                "conv2d",
                format!("reflect padding {pad} needs spatial size > {pad}, got {in_h}x{in_w}"),
            ));
        }
        let out_h = (in_h - 1) / stride + 1;
        let out_w = (in_w - 1) / stride + 1;
        let out_plane = out_h * out_w;
        let mut map = vec![PAD; k * k * out_plane];
        for ky in 0..k {
            for kx in 0..k {
                let tap = ky * k + kx;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let src = match padding {
                            Padding::ZeroSame => {
                                if (0..in_h as isize).contains(&iy)
                                    && (0..in_w as isize).contains(&ix)
                                {
                                    Some((iy as usize, ix as usize))
                                } else {
                                    None
                                }
                            }
                            Padding::ReflectSame => reflect(iy, in_h).zip(reflect(ix, in_w)),
                        };
                        if let Some((y, x)) = src {
                            map[tap * out_plane + oy * out_w + ox] = (y * in_w + x) as u32;
                        }
                    }
                }
            }
        }
        Ok(ConvGeom {
            in_h,
            in_w,
            k,
            stride,
            out_h,
            out_w,
            map,
        })
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn taps(&self) -> usize {
        self.k * self.k
    }

    /// Gathers one batch item into a `(cin·k·k) × out_plane` column matrix.
    fn im2col(&self, item: &[f32], cin: usize, cols: &mut [f32]) {
        let in_plane = self.in_h * self.in_w;
        let out_plane = self.out_plane();
        let taps = self.taps();
        for ci in 0..cin {
            let src = &item[ci * in_plane..(ci + 1) * in_plane];
            for tap in 0..taps {
                let row = (ci * taps + tap) * out_plane;
                let idx = &self.map[tap * out_plane..(tap + 1) * out_plane];
                for (dst, &m) in cols[row..row + out_plane].iter_mut().zip(idx) {
                    *dst = if m == PAD { 0.0 } else { src[m as usize] };
                }
            }
        }
    }

    /// Scatter-add transpose of [`im2col`](Self::im2col).
    fn col2im(&self, cols: &[f32], cin: usize, item: &mut [f32]) {
        let in_plane = self.in_h * self.in_w;
        let out_plane = self.out_plane();
        let taps = self.taps();
        for ci in 0..cin {
            let dst = &mut item[ci * in_plane..(ci + 1) * in_plane];
            for tap in 0..taps {
                let row = (ci * taps + tap) * out_plane;
                let idx = &self.map[tap * out_plane..(tap + 1) * out_plane];
                for (&g, &m) in cols[row..row + out_plane].iter().zip(idx) {
                    if m != PAD {
                        dst[m as usize] += g;
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c`, arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserted bounds cover every index sgemm touches for these
    // dimensions and strides; c is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
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

pub(crate) fn check_conv_shapes(input: Shape, weight: Shape, bias: Option<Shape>) -> Result<()> {
    if weight.h != weight.w {
        return Err(Error::invalid(
            "conv2d",
            format!("non-square kernel {weight}"),
        ));
    }
    if weight.h % 2 == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel size {} is even", weight.h),
        ));
    }
    if input.c != weight.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d (channels)",
            left: input,
            right: weight,
        });
    }
    if let Some(b) = bias {
        if b.numel() != weight.n {
            return Err(Error::ShapeMismatch {
                op: "conv2d (bias)",
                left: weight,
                right: b,
            });
        }
    }
    Ok(())
}

pub(crate) fn conv_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: &ConvGeom,
) -> Tensor {
    let s = input.shape();
    let cout = weight.shape().n;
    let kdim = s.c * geom.taps();
    let out_plane = geom.out_plane();
    let out_shape = Shape::new(s.n, cout, geom.out_h, geom.out_w);
    let mut out = vec![0.0f32; out_shape.numel()];
    let mut cols = vec![0.0f32; kdim * out_plane];
    for n in 0..s.n {
        let item = &input.data()[n * s.item_len()..(n + 1) * s.item_len()];
        geom.im2col(item, s.c, &mut cols);
        let dst = &mut out[n * cout * out_plane..(n + 1) * cout * out_plane];
        if let Some(b) = bias {
            for (co, row) in dst.chunks_exact_mut(out_plane).enumerate() {
                row.fill(b.data()[co]);
            }
        }
        gemm(
            cout,
            kdim,
            out_plane,
            weight.data(),
            (kdim, 1),
            &cols,
            (out_plane, 1),
            if bias.is_some() { 1.0 } else { 0.0 },
            dst,
        );
    }
    Tensor::from_vec(out_shape, out).expect("conv output sized from shape")
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub(crate) fn conv_backward(
    input: &Tensor,
    weight: &Tensor,
    geom: &ConvGeom,
    dout: &[f32],
    want: (bool, bool, bool),
) -> ConvGrads {
    let s = input.shape();
    let cout = weight.shape().n;
    let kdim = s.c * geom.taps();
    let out_plane = geom.out_plane();
    let (want_x, want_w, want_b) = want;

    let mut dx = want_x.then(|| vec![0.0f32; s.numel()]);
    let mut dw = want_w.then(|| vec![0.0f32; weight.numel()]);
    let mut db = want_b.then(|| vec![0.0f32; cout]);
    let mut cols = vec![0.0f32; kdim * out_plane];

    for n in 0..s.n {
        let g = &dout[n * cout * out_plane..(n + 1) * cout * out_plane];
        if let Some(db) = db.as_mut() {
            for (co, row) in g.chunks_exact(out_plane).enumerate() {
                db[co] += row.iter().sum::<f32>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let item = &input.data()[n * s.item_len()..(n + 1) * s.item_len()];
            geom.im2col(item, s.c, &mut cols);
            // dW += dOut · colsᵀ
            gemm(
                cout,
                out_plane,
                kdim,
                g,
                (out_plane, 1),
                &cols,
                (1, out_plane),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · dOut
            gemm(
                kdim,
                cout,
                out_plane,
                weight.data(),
                (1, kdim),
                g,
                (out_plane, 1),
                0.0,
                &mut cols,
            );
            let item = &mut dx[n * s.item_len()..(n + 1) * s.item_len()];
            geom.col2im(&cols, s.c, item);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}
