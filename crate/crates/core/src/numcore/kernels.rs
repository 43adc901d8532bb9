//! Inner loops shared by the graph operations.
//!
//! Reductions use a fixed lane layout so results never depend on thread
//! count or chunking.

const LANES: usize = 8;

/// Dot product with a fixed 8-lane accumulation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let (xa, xb) = (
            &a[c * LANES..(c + 1) * LANES],
            &b[c * LANES..(c + 1) * LANES],
        );
        for j in 0..LANES {
            acc[j] += xa[j] * xb[j];
        }
    }
    let mut tail = 0.0;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    s + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output extent `floor((n + 2 pad - k) / stride) + 1`, or `None` when
    /// it would not be positive.
    pub fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = n + 2 * pad;
        if padded < k || stride == 0 {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_len(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.out_ch * self.out_plane()
    }
}

pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in d.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = c * g.h * g.w + iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution for a single sample; `out` has `out_ch * oh * ow` entries.
pub fn conv_forward_sample(x: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let plane = g.out_plane();
    let klen = g.patch_len();
    let mut cols = vec![0.0; klen * plane];
    im2col(x, g, &mut cols);
    for (oc, row) in out.chunks_mut(plane).enumerate() {
        row.fill(bias[oc]);
    }
    for k in 0..klen {
        let col = &cols[k * plane..(k + 1) * plane];
        for oc in 0..g.out_ch {
            let a = kernel[oc * klen + k];
            if a != 0.0 {
                axpy(&mut out[oc * plane..(oc + 1) * plane], a, col);
            }
        }
    }
}

pub struct ConvSampleGrads {
    pub dx: Option<Vec<f64>>,
    pub dkernel: Vec<f64>,
    pub dbias: Vec<f64>,
}

/// Backward convolution for a single sample.
pub fn conv_backward_sample(
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need_dx: bool,
) -> ConvSampleGrads {
    let plane = g.out_plane();
    let klen = g.patch_len();
    let mut cols = vec![0.0; klen * plane];
    im2col(x, g, &mut cols);
    let mut dkernel = vec![0.0; g.out_ch * klen];
    let mut dbias = vec![0.0; g.out_ch];
    for oc in 0..g.out_ch {
        let d = &dout[oc * plane..(oc + 1) * plane];
        dbias[oc] = d.iter().sum();
        for k in 0..klen {
            dkernel[oc * klen + k] = dot(d, &cols[k * plane..(k + 1) * plane]);
        }
    }
    let dx = need_dx.then(|| {
        // reuse the column buffer for d(cols)
        cols.fill(0.0);
        for k in 0..klen {
            let dc = &mut cols[k * plane..(k + 1) * plane];
            for oc in 0..g.out_ch {
                let a = kernel[oc * klen + k];
                if a != 0.0 {
                    axpy(dc, a, &dout[oc * plane..(oc + 1) * plane]);
                }
            }
        }
        let mut dx = vec![0.0; g.in_len()];
        col2im(&cols, g, &mut dx);
        dx
    });
    ConvSampleGrads { dx, dkernel, dbias }
}
