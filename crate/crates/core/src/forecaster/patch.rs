//! Patching of a C×U window into P overlapping length-L_p patches.

use super::{ForecastError, Result};

/// `floor((u - patch_len) / stride) + 2`.
pub fn patch_count(u: usize, patch_len: usize, stride: usize) -> usize {
    (u - patch_len) / stride + 2
}

/// Replicates the last column `stride` times, then takes windows of
/// `patch_len` at `stride`. Output is row-major `[P, C, patch_len]`.
pub fn patchify(x: &[f64], c: usize, u: usize, patch_len: usize, stride: usize) -> Result<Vec<f64>> {
    if patch_len == 0 || stride == 0 || patch_len > u {
        return Err(ForecastError::Config(format!(
            "patch_len {patch_len} / stride {stride} invalid for window length {u}"
        )));
    }
    if x.len() != c * u {
        return Err(ForecastError::Shape(format!(
            "patchify: expected {c}x{u} values, got {}",
            x.len()
        )));
    }
    let p = patch_count(u, patch_len, stride);
    let padded_len = u + stride;
    let at = |row: usize, t: usize| x[row * u + t.min(u - 1)];
    debug_assert!((p - 1) * stride + patch_len <= padded_len);
    let mut out = Vec::with_capacity(p * c * patch_len);
    for k in 0..p {
        let start = k * stride;
        for row in 0..c {
            out.extend((start..start + patch_len).map(|t| at(row, t)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!(patch_count(40, 16, 8), 5);
        assert_eq!(patch_count(16, 16, 8), 2);
        let x: Vec<f64> = (0..80).map(f64::from).collect();
        assert_eq!(patchify(&x, 2, 40, 16, 8).unwrap().len(), 5 * 2 * 16);
    }

    #[test]
    fn padding_replicates_last_column() {
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        let p = patchify(&x, 1, 16, 16, 8).unwrap();
        assert_eq!(&p[..16], x.as_slice());
        assert_eq!(&p[16..24], &x[8..16]);
        assert!(p[24..].iter().all(|&v| v == 15.0));
    }

    #[test]
    fn constant_input_gives_identical_patches() {
        let x = vec![0.3; 80];
        let p = patchify(&x, 2, 40, 16, 8).unwrap();
        assert!(p.iter().all(|&v| v == 0.3));
        assert!(patchify(&x, 2, 40, 41, 8).is_err());
    }
}
