//! Same-size 2-D convolution with symmetric-reflection padding, forward and
//! backward.

use crate::prob::mirror;
use crate::scalar::Real;

/// Channel-major stack of planes, `channels × height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Planes<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Pads every plane by `pad` on each side with symmetric reflection.
    pub fn padded(&self, pad: usize) -> Planes<T> {
        let (h, w) = (self.height, self.width);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = Planes::zeros(self.channels, ph, pw);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..ph {
                let sy = mirror(y as isize - pad as isize, h);
                for x in 0..pw {
                    let sx = mirror(x as isize - pad as isize, w);
                    dst[y * pw + x] = src[sy * w + sx];
                }
            }
        }
        out
    }

    /// Adjoint of [`Planes::padded`]: folds a padded gradient back onto the
    /// unpadded planes.
    pub fn fold_padding(&self, pad: usize, height: usize, width: usize) -> Planes<T> {
        let (ph, pw) = (self.height, self.width);
        let mut out = Planes::zeros(self.channels, height, width);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..ph {
                let sy = mirror(y as isize - pad as isize, height);
                for x in 0..pw {
                    let sx = mirror(x as isize - pad as isize, width);
                    dst[sy * width + sx] += src[y * pw + x];
                }
            }
        }
        out
    }
}

/// `out[o] = bias[o] + Σ_{i,ky,kx} w[o,i,ky,kx] · padded[i, y+ky, x+kx]`.
///
/// Every output pixel accumulates its terms in the same order, so the result
/// is exactly translation covariant away from the borders.
pub fn conv_forward<T: Real>(
    padded: &Planes<T>,
    weights: &[T],
    bias: &[T],
    out_channels: usize,
    k: usize,
) -> Planes<T> {
    let (h, w) = (padded.height + 1 - k, padded.width + 1 - k);
    let pw = padded.width;
    let cin = padded.channels;
    let mut out = Planes::zeros(out_channels, h, w);
    for o in 0..out_channels {
        let dst = out.plane_mut(o);
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = padded.plane(i);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[((o * cin + i) * k + ky) * k + kx];
                    for y in 0..h {
                        let s = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                        let d = &mut dst[y * w..(y + 1) * w];
                        for (dv, &sv) in d.iter_mut().zip(s) {
                            *dv += wv * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`]: returns `(d_weights, d_bias, d_padded)`.
pub fn conv_backward<T: Real>(
    padded: &Planes<T>,
    weights: &[T],
    d_out: &Planes<T>,
    k: usize,
) -> (Vec<T>, Vec<T>, Planes<T>) {
    let (h, w) = (d_out.height, d_out.width);
    let pw = padded.width;
    let cin = padded.channels;
    let cout = d_out.channels;
    let mut d_w = vec![T::zero(); cout * cin * k * k];
    let mut d_b = vec![T::zero(); cout];
    let mut d_pad = Planes::zeros(cin, padded.height, padded.width);
    for o in 0..cout {
        let g = d_out.plane(o);
        d_b[o] = g.iter().copied().sum();
        for i in 0..cin {
            let src = padded.plane(i);
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wv = weights[widx];
                    let mut acc = T::zero();
                    {
                        for y in 0..h {
                            let s = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                            let gr = &g[y * w..(y + 1) * w];
                            acc += gr.iter().zip(s).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                    d_w[widx] = acc;
                    let dp = d_pad.plane_mut(i);
                    for y in 0..h {
                        let d = &mut dp[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                        let gr = &g[y * w..(y + 1) * w];
                        for (dv, &gv) in d.iter_mut().zip(gr) {
                            *dv += wv * gv;
                        }
                    }
                }
            }
        }
    }
    (d_w, d_b, d_pad)
}
