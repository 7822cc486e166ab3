use num_traits::Float;

/// `sign(v) · ln(1 + |v|)`.
pub fn symlog<T: Float>(v: T) -> T {
    v.signum() * v.abs().ln_1p()
}

/// Inverse of [`symlog`]: `sign(v) · (exp(|v|) - 1)`.
pub fn symexp<T: Float>(v: T) -> T {
    v.signum() * v.abs().exp_m1()
}
