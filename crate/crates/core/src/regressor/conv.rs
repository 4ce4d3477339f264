//! Dense multi-channel 3D tensors and the convolution kernels used by the
//! encoder-decoder.

use serde::{Deserialize, Serialize};

use crate::par;

/// Channel-major activations; within a channel x varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_channels(dims: [usize; 3], channels: Vec<Vec<f64>>) -> Self {
        let n = channels.len();
        let data = channels.concat();
        debug_assert_eq!(data.len(), n * dims[0] * dims[1] * dims[2]);
        Self {
            channels: n,
            dims,
            data,
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Geometry of one convolution layer. Padding is `kernel / 2` zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn k3(cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            cin,
            cout,
            kernel: 3,
            stride,
        }
    }

    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            kernel: 1,
            stride: 1,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.taps()
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_dims(&self, d: [usize; 3]) -> [usize; 3] {
        d.map(|n| n.div_ceil(self.stride))
    }

    /// Flat index of `w[o][i][kz][ky][kx]`.
    pub fn weight_index(&self, o: usize, i: usize, kz: usize, ky: usize, kx: usize) -> usize {
        (((o * self.cin + i) * self.kernel + kz) * self.kernel + ky) * self.kernel + kx
    }
}

/// Output positions `p` along one axis whose input tap `s*p + k - pad`
/// lands inside `[0, n_in)`.
fn valid(n_out: usize, n_in: usize, stride: usize, k: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if n_in + pad > k {
        ((n_in - 1 + pad - k) / stride + 1).min(n_out)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Visits every (output row, input row, x-range) triple touched by tap
/// `(kz, ky, kx)`. Rows are offsets into the flattened channel planes.
fn for_each_row(
    shape: &ConvShape,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    tap: [usize; 3],
    mut f: impl FnMut(usize, usize, std::ops::Range<usize>),
) {
    let (s, pad) = (shape.stride, shape.pad());
    let [kx, ky, kz] = tap;
    let xs = valid(out_dims[0], in_dims[0], s, kx, pad);
    if xs.is_empty() {
        return;
    }
    for pz in valid(out_dims[2], in_dims[2], s, kz, pad) {
        let qz = s * pz + kz - pad;
        for py in valid(out_dims[1], in_dims[1], s, ky, pad) {
            let qy = s * py + ky - pad;
            f(
                (pz * out_dims[1] + py) * out_dims[0],
                (qz * in_dims[1] + qy) * in_dims[0],
                xs.clone(),
            );
        }
    }
}

fn taps(k: usize) -> impl Iterator<Item = [usize; 3]> {
    (0..k).flat_map(move |kz| (0..k).flat_map(move |ky| (0..k).map(move |kx| [kx, ky, kz])))
}

pub fn conv3d(x: &Tensor, w: &[f64], b: &[f64], shape: ConvShape) -> Tensor {
    debug_assert_eq!(x.channels, shape.cin);
    let out_dims = shape.out_dims(x.dims);
    let n_out = out_dims[0] * out_dims[1] * out_dims[2];
    let (s, pad) = (shape.stride, shape.pad());
    let planes = par::map_indexed(shape.cout, |o| {
        let mut out = vec![b[o]; n_out];
        for i in 0..shape.cin {
            let xin = x.channel(i);
            for tap in taps(shape.kernel) {
                let wv = w[shape.weight_index(o, i, tap[2], tap[1], tap[0])];
                for_each_row(&shape, x.dims, out_dims, tap, |orow, irow, xs| {
                    let kx = tap[0];
                    for px in xs {
                        out[orow + px] += wv * xin[irow + s * px + kx - pad];
                    }
                });
            }
        }
        out
    });
    Tensor::from_channels(out_dims, planes)
}

/// Reverse pass of [`conv3d`]: returns the input gradient and writes weight
/// and bias gradients into `gw` and `gb` (overwriting).
pub fn conv3d_backward(
    x: &Tensor,
    w: &[f64],
    g_out: &Tensor,
    shape: ConvShape,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Tensor {
    let out_dims = g_out.dims;
    let (s, pad) = (shape.stride, shape.pad());
    let per_out = shape.cin * shape.taps();

    let wgrads = par::map_indexed(shape.cout, |o| {
        let go = g_out.channel(o);
        let mut acc = vec![0.0; per_out + 1];
        for i in 0..shape.cin {
            let xin = x.channel(i);
            for tap in taps(shape.kernel) {
                let mut dot = 0.0;
                for_each_row(&shape, x.dims, out_dims, tap, |orow, irow, xs| {
                    let kx = tap[0];
                    for px in xs {
                        dot += go[orow + px] * xin[irow + s * px + kx - pad];
                    }
                });
                acc[shape.weight_index(0, i, tap[2], tap[1], tap[0])] = dot;
            }
        }
        acc[per_out] = go.iter().sum();
        acc
    });
    for (o, acc) in wgrads.into_iter().enumerate() {
        gw[o * per_out..(o + 1) * per_out].copy_from_slice(&acc[..per_out]);
        gb[o] = acc[per_out];
    }

    let n_in = x.voxels();
    let planes = par::map_indexed(shape.cin, |i| {
        let mut gin = vec![0.0; n_in];
        for o in 0..shape.cout {
            let go = g_out.channel(o);
            for tap in taps(shape.kernel) {
                let wv = w[shape.weight_index(o, i, tap[2], tap[1], tap[0])];
                for_each_row(&shape, x.dims, out_dims, tap, |orow, irow, xs| {
                    let kx = tap[0];
                    for px in xs {
                        gin[irow + s * px + kx - pad] += wv * go[orow + px];
                    }
                });
            }
        }
        gin
    });
    Tensor::from_channels(x.dims, planes)
}

pub fn leaky_relu(mut x: Tensor, slope: f64) -> Tensor {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    x
}

pub fn leaky_relu_backward(pre: &Tensor, mut g: Tensor, slope: f64) -> Tensor {
    for (gv, p) in g.data.iter_mut().zip(&pre.data) {
        if *p < 0.0 {
            *gv *= slope;
        }
    }
    g
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let d = x.dims;
    let od = d.map(|n| 2 * n);
    let mut out = Tensor::zeros(x.channels, od);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..od[2] {
            for y in 0..od[1] {
                let srow = ((z / 2) * d[1] + y / 2) * d[0];
                let drow = (z * od[1] + y) * od[0];
                for xx in 0..od[0] {
                    dst[drow + xx] = src[srow + xx / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(g: &Tensor) -> Tensor {
    let od = g.dims;
    let d = od.map(|n| n / 2);
    let mut out = Tensor::zeros(g.channels, d);
    for c in 0..g.channels {
        let src = g.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..od[2] {
            for y in 0..od[1] {
                let srow = (z * od[1] + y) * od[0];
                let drow = ((z / 2) * d[1] + y / 2) * d[0];
                for xx in 0..od[0] {
                    dst[drow + xx / 2] += src[srow + xx];
                }
            }
        }
    }
    out
}

pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.dims, b.dims);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        channels: a.channels + b.channels,
        dims: a.dims,
        data,
    }
}

/// Splits a concatenated gradient back into its first `c` channels and the
/// rest.
pub fn split(g: Tensor, c: usize) -> (Tensor, Tensor) {
    let cut = c * g.voxels();
    let mut head = g.data;
    let tail = head.split_off(cut);
    (
        Tensor {
            channels: c,
            dims: g.dims,
            data: head,
        },
        Tensor {
            channels: g.channels - c,
            dims: g.dims,
            data: tail,
        },
    )
}
