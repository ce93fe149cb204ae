use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Fixed sinusoidal table: `PE(t, 2i) = sin(t / 10000^(2i/d))`,
/// `PE(t, 2i+1) = cos(t / 10000^(2i/d))`. Shape `[seq × d]`.
pub fn sinusoidal_positions(seq: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("positional embedding width must be even, got {d}")));
    }
    if seq == 0 {
        return Err(Error::Config("positional embedding length must be >= 1".into()));
    }
    Ok(Tensor::from_fn(&[seq, d], |flat| {
        let (t, j) = (flat / d, flat % d);
        let i2 = (j - j % 2) as f64;
        let angle = t as f64 / 10000f64.powf(i2 / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_row_alternates_zero_one() {
        let pe = sinusoidal_positions(4, 8).unwrap();
        assert_eq!(&pe.data()[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn bounded_and_deterministic() {
        let a = sinusoidal_positions(50, 40).unwrap();
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a, sinusoidal_positions(50, 40).unwrap());
    }

    #[test]
    fn odd_width_is_config_error() {
        assert!(matches!(sinusoidal_positions(3, 5), Err(Error::Config(_))));
    }
}
