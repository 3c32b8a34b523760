//! Layers with hand-written forward and backward passes.
//!
//! Activations are 5-D `[batch, channels, depth, height, width]`. All
//! kernels are generic over the element type so that gradient checks can
//! run the identical code in `f64`.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub(crate) fn dims5(shape: &[usize], op: &'static str) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(shape)
        .map_err(|_| Error::invalid(format!("{op}: expected a rank-5 tensor, got shape {shape:?}")))
}

/// 3-D convolution with stride 1 and zero "same" padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T = f32> {
    /// `[out_ch, in_ch, kd, kh, kw]`, every kernel extent odd.
    pub weight: Tensor<T>,
    /// `[out_ch]`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub input: Tensor<T>,
}

/// Valid output range along one axis for kernel tap `k` with padding `pad`.
#[inline]
fn tap_range(k: usize, pad: usize, extent: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (extent + pad).saturating_sub(k).min(extent);
    (lo, hi.max(lo))
}

impl<T: Element> ConvLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [o, _, kd, kh, kw] = dims5(weight.shape(), "conv weight")?;
        if [kd, kh, kw].iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid(format!(
                "kernel extents must be odd, got {:?}",
                &weight.shape()[2..]
            )));
        }
        if bias.shape() != [o] {
            return Err(Error::shape("conv bias", bias.shape(), &[o]));
        }
        Ok(ConvLayer { weight, bias })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize) -> Self {
        ConvLayer {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    fn kernel(&self) -> [usize; 3] {
        let s = self.weight.shape();
        [s[2], s[3], s[4]]
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<[usize; 5]> {
        let d = dims5(x.shape(), "conv3d input")?;
        if d[1] != self.in_channels() {
            return Err(Error::shape("conv3d channels", x.shape(), self.weight.shape()));
        }
        Ok(d)
    }

    /// Kernel taps that touch at least one in-bounds voxel for `spatial`.
    fn active_taps(&self, [dd, hh, ww]: [usize; 3]) -> Vec<Tap> {
        let [kd, kh, kw] = self.kernel();
        let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
        let mut taps = Vec::with_capacity(kd * kh * kw);
        for a in 0..kd {
            let d = tap_range(a, pd, dd);
            for b in 0..kh {
                let h = tap_range(b, ph, hh);
                for c in 0..kw {
                    let w = tap_range(c, pw, ww);
                    if d.0 < d.1 && h.0 < h.1 && w.0 < w.1 {
                        taps.push(Tap {
                            index: (a * kh + b) * kw + c,
                            shift: [a as isize - pd as isize, b as isize - ph as isize, c as isize - pw as isize],
                            d,
                            h,
                            w,
                        });
                    }
                }
            }
        }
        taps
    }

    /// Weights restricted to the active taps, as a `[co, ci·taps]` matrix.
    fn compact_weight(&self, taps: &[Tap]) -> Vec<T> {
        let full = self.kernel().iter().product::<usize>();
        if taps.len() == full {
            return self.weight.data().to_vec();
        }
        let rows = self.out_channels() * self.in_channels();
        let mut out = Vec::with_capacity(rows * taps.len());
        for r in 0..rows {
            out.extend(taps.iter().map(|t| self.weight.data()[r * full + t.index]));
        }
        out
    }

    /// Narrow layers skip im2col and accumulate row by row.
    fn use_direct(&self) -> bool {
        self.out_channels() * self.in_channels() <= DIRECT_MAX_CHANNEL_PRODUCT
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [nb, ci, dd, hh, ww] = self.check_input(x)?;
        let co = self.out_channels();
        let spatial = [dd, hh, ww];
        let plane = dd * hh * ww;
        let taps = self.active_taps(spatial);
        if self.use_direct() {
            return Tensor::new(vec![nb, co, dd, hh, ww], self.forward_direct(x.data(), nb, spatial, &taps));
        }
        let k = ci * taps.len();
        let weight = self.compact_weight(&taps);
        let cols = im2col(x.data(), nb, ci, spatial, &taps);
        let mut tmp = vec![T::zero(); co * nb * plane];
        T::gemm(co, k, nb * plane, &weight, false, &cols, false, T::zero(), &mut tmp);
        let mut out = vec![T::zero(); nb * co * plane];
        for o in 0..co {
            let bias = self.bias.data()[o];
            for n in 0..nb {
                let src = &tmp[(o * nb + n) * plane..][..plane];
                let dst = &mut out[(n * co + o) * plane..][..plane];
                for (y, &v) in dst.iter_mut().zip(src) {
                    *y = v + bias;
                }
            }
        }
        Tensor::new(vec![nb, co, dd, hh, ww], out)
    }

    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
        let [nb, ci, dd, hh, ww] = self.check_input(x)?;
        let co = self.out_channels();
        let expected = [nb, co, dd, hh, ww];
        if grad_out.shape() != expected {
            return Err(Error::shape("conv3d grad_out", grad_out.shape(), &expected));
        }
        let spatial = [dd, hh, ww];
        let plane = dd * hh * ww;
        let width = nb * plane;
        let taps = self.active_taps(spatial);
        if self.use_direct() {
            return self.backward_direct(x, grad_out, spatial, &taps);
        }
        let k = ci * taps.len();

        // grad_out as a [co, batch·plane] matrix
        let mut g = vec![T::zero(); co * width];
        let mut gb = vec![0.0f64; co];
        for n in 0..nb {
            for o in 0..co {
                let src = &grad_out.data()[(n * co + o) * plane..][..plane];
                gb[o] += src.iter().map(|v| v.as_f64()).sum::<f64>();
                g[(o * nb + n) * plane..][..plane].copy_from_slice(src);
            }
        }
        let cols = im2col(x.data(), nb, ci, spatial, &taps);
        let mut gw_compact = vec![T::zero(); co * k];
        T::gemm(co, width, k, &g, false, &cols, true, T::zero(), &mut gw_compact);
        let full = self.kernel().iter().product::<usize>();
        let mut gw = vec![T::zero(); co * ci * full];
        for r in 0..co * ci {
            for (t, tap) in taps.iter().enumerate() {
                gw[r * full + tap.index] = gw_compact[r * taps.len() + t];
            }
        }

        let weight = self.compact_weight(&taps);
        let mut gcols = cols;
        T::gemm(k, co, width, &weight, true, &g, false, T::zero(), &mut gcols);
        let gx = col2im(&gcols, nb, ci, spatial, &taps);
        Ok(ConvGrads {
            weight: Tensor::new(self.weight.shape().to_vec(), gw)?,
            bias: Tensor::new(vec![co], gb.into_iter().map(T::of).collect())?,
            input: Tensor::new(x.shape().to_vec(), gx)?,
        })
    }
}

const DIRECT_MAX_CHANNEL_PRODUCT: usize = 16;

impl<T: Element> ConvLayer<T> {
    fn forward_direct(&self, x: &[T], nb: usize, spatial: [usize; 3], taps: &[Tap]) -> Vec<T> {
        let (co, ci) = (self.out_channels(), self.in_channels());
        let full = self.kernel().iter().product::<usize>();
        let plane: usize = spatial.iter().product();
        let w = self.weight.data();
        let mut out = vec![T::zero(); nb * co * plane];
        for n in 0..nb {
            for o in 0..co {
                let dst = &mut out[(n * co + o) * plane..][..plane];
                dst.fill(self.bias.data()[o]);
                for i in 0..ci {
                    let src = &x[(n * ci + i) * plane..][..plane];
                    for tap in taps {
                        let wv = w[(o * ci + i) * full + tap.index];
                        tap.rows(spatial, |d, s, len| {
                            for (y, &v) in dst[d..d + len].iter_mut().zip(&src[s..s + len]) {
                                *y = *y + wv * v;
                            }
                        });
                    }
                }
            }
        }
        out
    }

    fn backward_direct(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        spatial: [usize; 3],
        taps: &[Tap],
    ) -> Result<ConvGrads<T>> {
        let (co, ci) = (self.out_channels(), self.in_channels());
        let nb = x.shape()[0];
        let full = self.kernel().iter().product::<usize>();
        let plane: usize = spatial.iter().product();
        let w = self.weight.data();
        let mut gw = vec![0.0f64; co * ci * full];
        let mut gb = vec![0.0f64; co];
        let mut gx = vec![T::zero(); x.len()];
        for n in 0..nb {
            for (o, gbo) in gb.iter_mut().enumerate() {
                let g = &grad_out.data()[(n * co + o) * plane..][..plane];
                *gbo += g.iter().map(|v| v.as_f64()).sum::<f64>();
                for i in 0..ci {
                    let src = &x.data()[(n * ci + i) * plane..][..plane];
                    let gsrc = &mut gx[(n * ci + i) * plane..][..plane];
                    for tap in taps {
                        let widx = (o * ci + i) * full + tap.index;
                        let wv = w[widx];
                        let mut acc = 0.0f64;
                        tap.rows(spatial, |d, s, len| {
                            let grow = &g[d..d + len];
                            let mut dot = T::zero();
                            for (&gv, &v) in grow.iter().zip(&src[s..s + len]) {
                                dot = dot + gv * v;
                            }
                            acc += dot.as_f64();
                            for (y, &gv) in gsrc[s..s + len].iter_mut().zip(grow) {
                                *y = *y + wv * gv;
                            }
                        });
                        gw[widx] += acc;
                    }
                }
            }
        }
        Ok(ConvGrads {
            weight: Tensor::new(self.weight.shape().to_vec(), gw.into_iter().map(T::of).collect())?,
            bias: Tensor::new(vec![co], gb.into_iter().map(T::of).collect())?,
            input: Tensor::new(x.shape().to_vec(), gx)?,
        })
    }
}

/// One kernel offset together with the output ranges it reaches.
struct Tap {
    index: usize,
    shift: [isize; 3],
    d: (usize, usize),
    h: (usize, usize),
    w: (usize, usize),
}

impl Tap {
    /// Calls `f(dst_offset, src_offset, len)` for every contiguous row of
    /// output voxels this tap reads from.
    #[inline]
    fn rows(&self, [_, hh, ww]: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
        let len = self.w.1 - self.w.0;
        for d in self.d.0..self.d.1 {
            let sd = (d as isize + self.shift[0]) as usize;
            for h in self.h.0..self.h.1 {
                let sh = (h as isize + self.shift[1]) as usize;
                let dst = (d * hh + h) * ww + self.w.0;
                let src = ((sd * hh + sh) * ww) as isize + self.w.0 as isize + self.shift[2];
                f(dst, src as usize, len);
            }
        }
    }
}

/// Unfold a `[nb, ci, plane]` batch into a `[ci·taps, nb·plane]` column matrix.
fn im2col<T: Element>(x: &[T], nb: usize, ci: usize, spatial: [usize; 3], taps: &[Tap]) -> Vec<T> {
    let plane: usize = spatial.iter().product();
    let width = nb * plane;
    let mut cols = vec![T::zero(); ci * taps.len() * width];
    for i in 0..ci {
        for (t, tap) in taps.iter().enumerate() {
            let row = &mut cols[(i * taps.len() + t) * width..][..width];
            for n in 0..nb {
                let src = &x[(n * ci + i) * plane..][..plane];
                let dst = &mut row[n * plane..][..plane];
                tap.rows(spatial, |o, s, len| dst[o..o + len].copy_from_slice(&src[s..s + len]));
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[nb, ci, plane]` batch.
fn col2im<T: Element>(cols: &[T], nb: usize, ci: usize, spatial: [usize; 3], taps: &[Tap]) -> Vec<T> {
    let plane: usize = spatial.iter().product();
    let width = nb * plane;
    let mut out = vec![T::zero(); nb * ci * plane];
    for i in 0..ci {
        for (t, tap) in taps.iter().enumerate() {
            let row = &cols[(i * taps.len() + t) * width..][..width];
            for n in 0..nb {
                let src = &row[n * plane..][..plane];
                let dst = &mut out[(n * ci + i) * plane..][..plane];
                tap.rows(spatial, |o, s, len| {
                    for (y, &v) in dst[s..s + len].iter_mut().zip(&src[o..o + len]) {
                        *y = *y + v;
                    }
                });
            }
        }
    }
    out
}

/// He-normal initialised convolution: weights ~ N(0, 2 / fan_in), zero bias.
pub fn he_init(rng: &mut Rng, shape: [usize; 5]) -> Result<ConvLayer<f32>> {
    let [o, i, kd, kh, kw] = shape;
    let fan_in = i * kd * kh * kw;
    if fan_in == 0 || o == 0 {
        return Err(Error::invalid(format!("degenerate conv shape {shape:?}")));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let weight = Tensor::gaussian(rng, &shape, 0.0, std)?;
    ConvLayer::new(weight, Tensor::zeros(&[o]))
}

/// Parametric ReLU with one learnable negative-region slope per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PReluLayer<T = f32> {
    pub slope: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct PReluGrads<T = f32> {
    pub slope: Tensor<T>,
    pub input: Tensor<T>,
}

pub const PRELU_INIT_SLOPE: f64 = 0.25;

impl<T: Element> PReluLayer<T> {
    pub fn new(channels: usize) -> Self {
        PReluLayer {
            slope: Tensor::full(&[channels], T::of(PRELU_INIT_SLOPE)),
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let shape = x.shape();
        if shape.len() < 2 || shape[1] != self.slope.len() {
            return Err(Error::shape("prelu channels", shape, self.slope.shape()));
        }
        let inner: usize = shape[2..].iter().product();
        Ok((shape[0], shape[1], inner))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (nb, ch, inner) = self.check(x)?;
        let mut out = x.clone();
        let data = out.data_mut();
        for n in 0..nb {
            for c in 0..ch {
                let a = self.slope.data()[c];
                for v in &mut data[(n * ch + c) * inner..][..inner] {
                    if *v <= T::zero() {
                        *v = a * *v;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<PReluGrads<T>> {
        let (nb, ch, inner) = self.check(x)?;
        x.check_same_shape(grad_out, "prelu grad_out")?;
        let mut gx = grad_out.clone();
        let mut ga = vec![0.0f64; ch];
        let xs = x.data();
        let gd = gx.data_mut();
        for n in 0..nb {
            for (c, gac) in ga.iter_mut().enumerate() {
                let a = self.slope.data()[c];
                let base = (n * ch + c) * inner;
                for (g, &v) in gd[base..base + inner].iter_mut().zip(&xs[base..base + inner]) {
                    if v <= T::zero() {
                        *gac += (v * *g).as_f64();
                        *g = a * *g;
                    }
                }
            }
        }
        Ok(PReluGrads {
            slope: Tensor::new(vec![ch], ga.into_iter().map(T::of).collect())?,
            input: gx,
        })
    }
}

/// Argmax routing recorded by [`maxpool2_forward`].
#[derive(Clone, Debug)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    /// Flat input index of the maximum of each output element.
    pub argmax: Vec<usize>,
}

/// 2×2×2 max pooling. Ties resolve to the lowest flat input index.
pub fn maxpool2_forward<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let [nb, ch, dd, hh, ww] = dims5(x.shape(), "maxpool2")?;
    if dd % 2 != 0 || hh % 2 != 0 || ww % 2 != 0 {
        return Err(Error::invalid(format!(
            "maxpool2 needs even spatial extents, got {:?}",
            &x.shape()[2..]
        )));
    }
    let (od, oh, ow) = (dd / 2, hh / 2, ww / 2);
    let xs = x.data();
    let mut out = Vec::with_capacity(nb * ch * od * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for nc in 0..nb * ch {
        let base = nc * dd * hh * ww;
        for d in 0..od {
            for h in 0..oh {
                for w in 0..ow {
                    let mut best_idx = base + ((2 * d) * hh + 2 * h) * ww + 2 * w;
                    let mut best = xs[best_idx];
                    for a in 0..2 {
                        for b in 0..2 {
                            for c in 0..2 {
                                let idx = base + ((2 * d + a) * hh + 2 * h + b) * ww + 2 * w + c;
                                if xs[idx] > best {
                                    best = xs[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![nb, ch, od, oh, ow], out)?,
        PoolIndices {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Element>(indices: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::shape(
            "maxpool2 grad_out",
            grad_out.shape(),
            &[indices.argmax.len()],
        ));
    }
    let mut gx = Tensor::zeros(&indices.input_shape);
    let data = gx.data_mut();
    for (&idx, &g) in indices.argmax.iter().zip(grad_out.data()) {
        data[idx] = data[idx] + g;
    }
    Ok(gx)
}

/// Nearest-neighbour ×2 upsampling along every spatial axis.
pub fn upsample2_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [nb, ch, dd, hh, ww] = dims5(x.shape(), "upsample2")?;
    let (od, oh, ow) = (2 * dd, 2 * hh, 2 * ww);
    let xs = x.data();
    let mut out = vec![T::zero(); nb * ch * od * oh * ow];
    for nc in 0..nb * ch {
        let src = &xs[nc * dd * hh * ww..][..dd * hh * ww];
        let dst = &mut out[nc * od * oh * ow..][..od * oh * ow];
        for d in 0..od {
            for h in 0..oh {
                let row = &src[((d / 2) * hh + h / 2) * ww..][..ww];
                let orow = &mut dst[(d * oh + h) * ow..][..ow];
                for (w, y) in orow.iter_mut().enumerate() {
                    *y = row[w / 2];
                }
            }
        }
    }
    Tensor::new(vec![nb, ch, od, oh, ow], out)
}

/// Adjoint of [`upsample2_forward`]: sums each 2×2×2 block.
pub fn upsample2_backward<T: Element>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [nb, ch, dd, hh, ww] = dims5(grad_out.shape(), "upsample2 backward")?;
    if dd % 2 != 0 || hh % 2 != 0 || ww % 2 != 0 {
        return Err(Error::invalid(format!(
            "upsample2 gradient must have even extents, got {:?}",
            &grad_out.shape()[2..]
        )));
    }
    let (od, oh, ow) = (dd / 2, hh / 2, ww / 2);
    let gs = grad_out.data();
    let mut out = vec![T::zero(); nb * ch * od * oh * ow];
    for nc in 0..nb * ch {
        let src = &gs[nc * dd * hh * ww..][..dd * hh * ww];
        let dst = &mut out[nc * od * oh * ow..][..od * oh * ow];
        for d in 0..dd {
            for h in 0..hh {
                let row = &src[(d * hh + h) * ww..][..ww];
                let orow = &mut dst[((d / 2) * oh + h / 2) * ow..][..ow];
                for (w, &g) in row.iter().enumerate() {
                    orow[w / 2] = orow[w / 2] + g;
                }
            }
        }
    }
    Tensor::new(vec![nb, ch, od, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t5(shape: [usize; 5], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut layer = ConvLayer::<f32>::zeros(1, 1, 1);
        layer.weight.data_mut()[0] = 1.0;
        let mut rng = Rng::new(1);
        let x = Tensor::gaussian(&mut rng, &[2, 1, 3, 4, 5], 0.0, 1.0).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), x);
    }

    #[test]
    fn all_ones_center_voxel_counts_27() {
        let layer = ConvLayer::new(Tensor::full(&[1, 1, 3, 3, 3], 1.0f32), Tensor::zeros(&[1])).unwrap();
        let x = Tensor::full(&[1, 1, 3, 3, 3], 1.0f32);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.data()[13], 27.0);
        // a corner only sees 8 in-bounds voxels under zero padding
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernels() {
        let layer = ConvLayer::<f32>::zeros(2, 3, 3);
        let x = Tensor::zeros(&[1, 2, 4, 4, 4]);
        assert!(matches!(layer.forward(&x), Err(Error::Shape { .. })));
        assert!(ConvLayer::new(Tensor::<f32>::zeros(&[1, 1, 2, 3, 3]), Tensor::zeros(&[1])).is_err());
        assert!(ConvLayer::new(Tensor::<f32>::zeros(&[2, 1, 3, 3, 3]), Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn conv_backward_zero_grad_and_bias_sum() {
        let mut rng = Rng::new(9);
        let layer = he_init(&mut rng, [3, 2, 3, 3, 3]).unwrap();
        let x = Tensor::gaussian(&mut rng, &[2, 2, 4, 4, 2], 0.0, 1.0).unwrap();
        let zero = Tensor::zeros(&[2, 3, 4, 4, 2]);
        let g = layer.backward(&x, &zero).unwrap();
        assert!(g.weight.data().iter().chain(g.bias.data()).chain(g.input.data()).all(|&v| v == 0.0));

        let go = Tensor::gaussian(&mut rng, &[2, 3, 4, 4, 2], 0.0, 1.0).unwrap();
        let g = layer.backward(&x, &go).unwrap();
        let plane = 4 * 4 * 2;
        for o in 0..3 {
            let mut s = 0.0f64;
            for n in 0..2 {
                s += go.data()[(n * 3 + o) * plane..][..plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            assert!((g.bias.data()[o] as f64 - s).abs() < 1e-5);
        }
        assert!(layer.backward(&x, &Tensor::zeros(&[2, 3, 4, 4, 4])).is_err());
    }

    #[test]
    fn prelu_definition() {
        let layer = PReluLayer::<f32>::new(1);
        let x = t5([1, 1, 1, 1, 2], vec![-2.0, 3.0]);
        assert_eq!(layer.forward(&x).unwrap().data(), &[-0.5, 3.0]);
        let mut steep = layer.clone();
        steep.slope.data_mut()[0] = 7.0;
        assert_eq!(steep.forward(&x).unwrap().data()[1], 3.0);
        assert!(PReluLayer::<f32>::new(2).forward(&x).is_err());
    }

    #[test]
    fn prelu_backward_branches() {
        let layer = PReluLayer::<f32>::new(1);
        let x = t5([1, 1, 1, 1, 3], vec![-2.0, 3.0, -1.0]);
        let g = t5([1, 1, 1, 1, 3], vec![1.0, 1.0, 2.0]);
        let grads = layer.backward(&x, &g).unwrap();
        assert_eq!(grads.input.data(), &[0.25, 1.0, 0.5]);
        assert_eq!(grads.slope.data(), &[-4.0]);
    }

    #[test]
    fn maxpool_block_max_and_ties() {
        let x = t5([1, 1, 2, 2, 2], (1..=8).map(|v| v as f32).collect());
        let (y, idx) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[8.0]);
        assert_eq!(idx.argmax, vec![7]);

        let c = Tensor::full(&[1, 1, 2, 2, 2], 3.0f32);
        let (y, idx) = maxpool2_forward(&c).unwrap();
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(idx.argmax, vec![0]);
        let g = maxpool2_backward(&idx, &Tensor::full(&[1, 1, 1, 1, 1], 5.0f32)).unwrap();
        assert_eq!(g.data(), &[5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        assert!(maxpool2_forward(&Tensor::<f32>::zeros(&[1, 1, 2, 3, 2])).is_err());
    }

    #[test]
    fn upsample_replicates() {
        let x = t5([1, 1, 1, 1, 1], vec![1.0]);
        let y = upsample2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 1.0));

        let c = Tensor::full(&[2, 3, 2, 1, 3], 4.5f32);
        let (back, _) = maxpool2_forward(&upsample2_forward(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn upsample_backward_is_block_sum() {
        let mut rng = Rng::new(4);
        let g = Tensor::gaussian(&mut rng, &[1, 2, 4, 4, 6], 0.0, 1.0).unwrap();
        let back = upsample2_backward(&g).unwrap();
        // 8 x average pool oracle
        let gd = g.data();
        for c in 0..2 {
            for d in 0..2 {
                for h in 0..2 {
                    for w in 0..3 {
                        let mut mean = 0.0f64;
                        for a in 0..2 {
                            for b in 0..2 {
                                for e in 0..2 {
                                    mean += gd[(((c * 4) + 2 * d + a) * 4 + 2 * h + b) * 6 + 2 * w + e] as f64;
                                }
                            }
                        }
                        mean /= 8.0;
                        let got = back.data()[((c * 2 + d) * 2 + h) * 3 + w] as f64;
                        assert!((got - 8.0 * mean).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn pool_then_upsample_idempotent_on_block_constant() {
        let mut rng = Rng::new(12);
        let coarse = Tensor::gaussian(&mut rng, &[1, 2, 2, 3, 2], 0.0, 1.0).unwrap();
        let fine = upsample2_forward(&coarse).unwrap();
        let (pooled, _) = maxpool2_forward(&fine).unwrap();
        let again = upsample2_forward(&pooled).unwrap();
        assert_eq!(again, fine);
    }

    #[test]
    fn he_init_stddev_and_determinism() {
        let a = he_init(&mut Rng::new(3), [16, 1, 3, 3, 3]).unwrap();
        let b = he_init(&mut Rng::new(3), [16, 1, 3, 3, 3]).unwrap();
        assert_eq!(a, b);
        assert!(a.bias.data().iter().all(|&v| v == 0.0));
        let target = (2.0f64 / 27.0).sqrt();
        assert!((target - 0.272).abs() < 1e-3);

        // 10^5 weights: [3704, 1, 3, 3, 3] has 100_008 entries
        let big = he_init(&mut Rng::new(5), [3704, 1, 3, 3, 3]).unwrap();
        let n = big.weight.len() as f64;
        let mean = big.weight.mean().unwrap();
        let var = big.weight.data().iter().map(|&w| (w as f64 - mean).powi(2)).sum::<f64>() / n;
        let rel = (var.sqrt() - target).abs() / target;
        assert!(rel < 0.02, "relative stddev error {rel}");
    }
}
