use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Logistic function clamped to the open interval `(0, 1)`.
///
/// The lower bound is the smallest positive normal value of `T` and the upper bound
/// the largest value below one, so saturated inputs never produce exactly 0 or 1.
#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    let one = T::one();
    let s = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    if x.is_nan() {
        return x;
    }
    let hi = one - T::epsilon() / T::from_f64(2.0);
    s.max(T::min_positive_value()).min(hi)
}

pub fn activation<T: Element>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        // NaN passes through so non-finite values stay visible.
        Activation::Relu => input.map(|x| if x < T::zero() { T::zero() } else { x }),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

/// Concatenates along the channel axis (axis 1); `a`'s channels come first.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != b.rank() || a.rank() < 2 {
        return Err(Error::dim("rank", a.rank(), b.rank()));
    }
    for axis in (0..a.rank()).filter(|&i| i != 1) {
        if a.shape()[axis] != b.shape()[axis] {
            return Err(Error::dim(format!("axis {axis}"), a.shape()[axis], b.shape()[axis]));
        }
    }
    let n = a.shape()[0];
    let la = a.numel() / n;
    let lb = b.numel() / n;
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for s in 0..n {
        data.extend_from_slice(&a.data()[s * la..(s + 1) * la]);
        data.extend_from_slice(&b.data()[s * lb..(s + 1) * lb]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] += b.shape()[1];
    Ok(Tensor::from_parts(shape, data))
}

/// Splits the channel axis at `at`; the inverse of [`concat_channels`].
pub fn split_channels<T: Element>(x: &Tensor<T>, at: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.rank() < 2 || at > x.shape()[1] {
        return Err(Error::Contract(format!("cannot split channels at {at}")));
    }
    let n = x.shape()[0];
    let c = x.shape()[1];
    let plane: usize = x.shape()[2..].iter().product();
    let mut a = Vec::with_capacity(n * at * plane);
    let mut b = Vec::with_capacity(n * (c - at) * plane);
    for s in 0..n {
        let item = &x.data()[s * c * plane..(s + 1) * c * plane];
        a.extend_from_slice(&item[..at * plane]);
        b.extend_from_slice(&item[at * plane..]);
    }
    let mut sa = x.shape().to_vec();
    sa[1] = at;
    let mut sb = x.shape().to_vec();
    sb[1] = c - at;
    Ok((Tensor::from_parts(sa, a), Tensor::from_parts(sb, b)))
}
