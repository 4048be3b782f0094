use super::{Element, Tensor};
use crate::error::{Error, Result};

fn pool_extents(input: [usize; 3], window: [usize; 3], stride: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for axis in 0..3 {
        let (i, k, s) = (input[axis], window[axis], stride[axis]);
        if k == 0 || s == 0 {
            return Err(Error::Geometry("pooling window and stride must be positive".into()));
        }
        if i < k || (i - k) % s != 0 {
            return Err(Error::Geometry(format!(
                "pooling axis {axis}: extent {i} is not covered by window {k} at stride {s} without a partial window"
            )));
        }
        out[axis] = (i - k) / s + 1;
    }
    Ok(out)
}

/// Max pooling that also returns, per output element, the flat input index of the
/// winning element. Ties resolve to the first element in scan order.
pub(crate) fn maxpool3d_with_argmax<T: Element>(
    input: &Tensor<T>,
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, d, h, w] = input.dims5()?;
    let [od, oh, ow] = pool_extents([d, h, w], window, stride)?;
    let x = input.data();
    let total = n * c * od * oh * ow;
    let mut out = Vec::with_capacity(total);
    let mut arg = Vec::with_capacity(total);
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for i in 0..window[0] {
                        for j in 0..window[1] {
                            for l in 0..window[2] {
                                let idx = base
                                    + ((zd * stride[0] + i) * h + zh * stride[1] + j) * w
                                    + zw * stride[2]
                                    + l;
                                if best_idx == usize::MAX || x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, od, oh, ow], out), arg))
}

/// Max pooling over `window` at `stride`. Partial windows are rejected.
pub fn maxpool3d<T: Element>(input: &Tensor<T>, window: [usize; 3], stride: [usize; 3]) -> Result<Tensor<T>> {
    maxpool3d_with_argmax(input, window, stride).map(|(t, _)| t)
}

pub(crate) fn maxpool3d_backward<T: Element>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let data = g.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        data[idx] = data[idx] + v;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_window_max() {
        let x = Tensor::new(&[1, 1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool3d(&x, [1, 2, 2], [1, 2, 2]).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn planar_pool_keeps_depth() {
        let x = Tensor::from_fn(&[1, 2, 16, 8, 8], |i| i as f32);
        assert_eq!(maxpool3d(&x, [1, 2, 2], [1, 2, 2]).unwrap().shape(), &[1, 2, 16, 4, 4]);
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::full(&[1, 1, 2, 4, 4], 3.0f32);
        let y = maxpool3d(&x, [2, 2, 2], [2, 2, 2]).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn ties_go_to_first_occurrence() {
        let x = Tensor::full(&[1, 1, 1, 2, 2], 1.0f32);
        let (_, arg) = maxpool3d_with_argmax(&x, [1, 2, 2], [1, 2, 2]).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn partial_windows_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 5, 4]);
        assert!(matches!(maxpool3d(&x, [1, 2, 2], [1, 2, 2]), Err(Error::Geometry(_))));
    }
}
