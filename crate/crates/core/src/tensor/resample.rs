//! Nearest upsampling, max pooling, reflection padding and cropping.

use alloc::vec;

use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Nearest-neighbour ×2 upsampling of the two trailing axes.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * c * oh * ow];
    for (plane, src) in out.chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
        for oy in 0..oh {
            let row = &src[(oy / 2) * w..][..w];
            for (ox, o) in plane[oy * ow..][..ow].iter_mut().enumerate() {
                *o = row[ox / 2];
            }
        }
    }
    Ok(Tensor::from_parts(&[b, c, oh, ow], out))
}

pub fn upsample2_backward<T: Real>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, oh, ow) = grad.dims4()?;
    let (h, w) = (oh / 2, ow / 2);
    let mut out = vec![T::zero(); b * c * h * w];
    for (plane, src) in out.chunks_mut(h * w).zip(grad.data().chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                plane[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
            }
        }
    }
    Ok(Tensor::from_parts(&[b, c, h, w], out))
}

/// 2×2 max pooling with stride 2 (trailing odd rows/columns dropped).
/// Ties resolve to the first element in raster order.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("maxpool2", "spatial extent below 2"));
    }
    let mut out = vec![T::zero(); b * c * oh * ow];
    for (plane, src) in out.chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let (_, v) = argmax_window(src, w, oy, ox);
                plane[oy * ow + ox] = v;
            }
        }
    }
    Ok(Tensor::from_parts(&[b, c, oh, ow], out))
}

#[inline]
fn argmax_window<T: Real>(src: &[T], w: usize, oy: usize, ox: usize) -> (usize, T) {
    let mut best = (2 * oy) * w + 2 * ox;
    let mut v = src[best];
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let idx = (2 * oy + dy) * w + 2 * ox + dx;
        if src[idx] > v {
            v = src[idx];
            best = idx;
        }
    }
    (best, v)
}

pub fn maxpool2_backward<T: Real>(grad: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let (_, _, oh, ow) = grad.dims4()?;
    let mut out = vec![T::zero(); b * c * h * w];
    for ((plane, src), g) in out
        .chunks_mut(h * w)
        .zip(x.data().chunks(h * w))
        .zip(grad.data().chunks(oh * ow))
    {
        for oy in 0..oh {
            for ox in 0..ow {
                let (idx, _) = argmax_window(src, w, oy, ox);
                plane[idx] += g[oy * ow + ox];
            }
        }
    }
    Ok(Tensor::from_parts(&[b, c, h, w], out))
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Reflection padding (edge sample not repeated) by `(top, bottom, left, right)`.
pub fn pad_reflect<T: Real>(x: &Tensor<T>, pads: [usize; 4]) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let [top, bottom, left, right] = pads;
    if top.max(bottom) >= h || left.max(right) >= w {
        return Err(Error::invalid("pad_reflect", "padding must be smaller than the extent"));
    }
    let (oh, ow) = (h + top + bottom, w + left + right);
    let mut out = vec![T::zero(); b * c * oh * ow];
    for (plane, src) in out.chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
        for oy in 0..oh {
            let sy = reflect(oy as isize - top as isize, h);
            for ox in 0..ow {
                let sx = reflect(ox as isize - left as isize, w);
                plane[oy * ow + ox] = src[sy * w + sx];
            }
        }
    }
    Ok(Tensor::from_parts(&[b, c, oh, ow], out))
}

pub fn pad_reflect_backward<T: Real>(grad: &Tensor<T>, pads: [usize; 4]) -> Result<Tensor<T>> {
    let (b, c, oh, ow) = grad.dims4()?;
    let [top, bottom, left, right] = pads;
    let (h, w) = (oh - top - bottom, ow - left - right);
    let mut out = vec![T::zero(); b * c * h * w];
    for (plane, src) in out.chunks_mut(h * w).zip(grad.data().chunks(oh * ow)) {
        for oy in 0..oh {
            let sy = reflect(oy as isize - top as isize, h);
            for ox in 0..ow {
                let sx = reflect(ox as isize - left as isize, w);
                plane[sy * w + sx] += src[oy * ow + ox];
            }
        }
    }
    Ok(Tensor::from_parts(&[b, c, h, w], out))
}

/// Keeps the top-left `h × w` window of every plane.
pub fn crop_bottom_right<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (b, c, ih, iw) = x.dims4()?;
    if h > ih || w > iw {
        return Err(Error::invalid("crop", "crop larger than input"));
    }
    let mut out = vec![T::zero(); b * c * h * w];
    for (plane, src) in out.chunks_mut(h * w).zip(x.data().chunks(ih * iw)) {
        for y in 0..h {
            plane[y * w..][..w].copy_from_slice(&src[y * iw..][..w]);
        }
    }
    Ok(Tensor::from_parts(&[b, c, h, w], out))
}

pub fn crop_bottom_right_backward<T: Real>(grad: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let (b, c, h, w) = grad.dims4()?;
    let &[_, _, ih, iw] = input_shape else {
        return Err(Error::invalid("crop", "input must be 4-D"));
    };
    let mut out = vec![T::zero(); b * c * ih * iw];
    for (plane, src) in out.chunks_mut(ih * iw).zip(grad.data().chunks(h * w)) {
        for y in 0..h {
            plane[y * iw..][..w].copy_from_slice(&src[y * w..][..w]);
        }
    }
    Ok(Tensor::from_parts(&[b, c, ih, iw], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 29 % 23) as f64) - 11.0)
    }

    #[test]
    fn upsample_then_backward_is_adjoint() {
        let x = ramp(&[2, 3, 5, 4]);
        let y = upsample2(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 10, 8]);
        let g = ramp(y.shape());
        let lhs = y.dot(&g).unwrap();
        let rhs = x.dot(&upsample2_backward(&g).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn reflect_pad_values_and_adjoint() {
        let x = Tensor::new(&[1, 1, 1, 4], [1.0, 2.0, 3.0, 4.0].to_vec());
        assert!(x.is_ok());
        let x = Tensor::new(&[1, 1, 2, 4], [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0].to_vec()).unwrap();
        let y = pad_reflect(&x, [0, 1, 1, 1]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 6]);
        assert_eq!(&y.data()[..6], &[2.0, 1.0, 2.0, 3.0, 4.0, 3.0]);
        assert_eq!(&y.data()[12..], &[2.0, 1.0, 2.0, 3.0, 4.0, 3.0]);
        let x = ramp(&[1, 2, 5, 6]);
        let pads = [1, 2, 1, 3];
        let y = pad_reflect(&x, pads).unwrap();
        let g = ramp(y.shape());
        let lhs = y.dot(&g).unwrap();
        let rhs = x.dot(&pad_reflect_backward(&g, pads).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn crop_adjoint_and_maxpool_routing() {
        let x = ramp(&[1, 2, 6, 5]);
        let y = crop_bottom_right(&x, 4, 3).unwrap();
        let g = ramp(y.shape());
        let lhs = y.dot(&g).unwrap();
        let rhs = x.dot(&crop_bottom_right_backward(&g, x.shape()).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-9);

        let x = Tensor::new(&[1, 1, 2, 2], [1.0, 5.0, 3.0, 2.0].to_vec()).unwrap();
        let p = maxpool2(&x).unwrap();
        assert_eq!(p.data(), &[5.0]);
        let gx = maxpool2_backward(&Tensor::ones(&[1, 1, 1, 1]), &x).unwrap();
        assert_eq!(gx.data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
