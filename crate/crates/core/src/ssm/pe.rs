use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// `[L, C]` table with `pe[p, 2i] = sin(p / 10000^(2i/C))` and
/// `pe[p, 2i+1] = cos(p / 10000^(2i/C))`.
pub fn sinusoidal_pe<T: Real>(len: usize, channels: usize) -> Result<Tensor<T>> {
    if channels == 0 || channels % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional embedding needs an even channel count, got {channels}"
        )));
    }
    if len == 0 {
        return Err(Error::InvalidArgument("positional embedding needs len >= 1".into()));
    }
    let mut data = Vec::with_capacity(len * channels);
    for p in 0..len {
        for i in 0..channels / 2 {
            let freq = 10000f64.powf((2 * i) as f64 / channels as f64);
            let angle = p as f64 / freq;
            data.push(T::from_f64(angle.sin()).unwrap());
            data.push(T::from_f64(angle.cos()).unwrap());
        }
    }
    Tensor::new(vec![len, channels], data)
}
