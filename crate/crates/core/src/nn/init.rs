use rand::Rng;
use rand_distr::StandardNormal;

use super::{Scalar, Tensor};

/// Orthogonal matrix of shape `[rows, cols]` scaled by `gain`.
///
/// When `rows >= cols` the columns are orthonormal, otherwise the rows are.
pub fn orthogonal<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    gain: f64,
    rng: &mut R,
) -> Vec<T> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    // `short` orthonormal vectors of length `tall`.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..tall).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut out = vec![T::zero(); rows * cols];
    for (j, b) in basis.iter().enumerate() {
        for (i, &v) in b.iter().enumerate() {
            let (r, c) = if rows >= cols { (i, j) } else { (j, i) };
            out[r * cols + c] = T::from_f64(gain * v);
        }
    }
    out
}

/// Orthogonal weight tensor whose trailing axis is the output dimension.
pub fn orthogonal_tensor<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    gain: f64,
    rng: &mut R,
) -> Tensor<T> {
    let out = *shape.last().expect("non-empty shape");
    let fan_in: usize = shape[..shape.len() - 1].iter().product();
    Tensor::new(shape.to_vec(), orthogonal(fan_in, out, gain, rng)).expect("init shape")
}
