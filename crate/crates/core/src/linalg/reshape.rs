//! Space-to-depth (`pixel_unshuffle`) and its inverse on flat `(C, H, W)`
//! row-major tensors.

use serde::{Deserialize, Serialize};

use super::LinalgError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape after `pixel_unshuffle(factor)`.
    pub fn unshuffled(&self, factor: usize) -> Result<Self, LinalgError> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(LinalgError::Indivisible {
                height: self.height,
                width: self.width,
                factor,
            });
        }
        Ok(Self {
            channels: self.channels * factor * factor,
            height: self.height / factor,
            width: self.width / factor,
        })
    }
}

/// Gather table: `out[k] = in[table[k]]` for `pixel_unshuffle`.
pub fn unshuffle_table(shape: ImageShape, factor: usize) -> Result<Vec<usize>, LinalgError> {
    let out = shape.unshuffled(factor)?;
    let f = factor;
    let mut table = vec![0; shape.len()];
    for c in 0..shape.channels {
        for i in 0..f {
            for j in 0..f {
                let oc = c * f * f + i * f + j;
                for h in 0..out.height {
                    for w in 0..out.width {
                        let dst = (oc * out.height + h) * out.width + w;
                        let src = (c * shape.height + h * f + i) * shape.width + w * f + j;
                        table[dst] = src;
                    }
                }
            }
        }
    }
    Ok(table)
}

/// `out[c·f²+i·f+j, h, w] = in[c, h·f+i, w·f+j]`.
pub fn pixel_unshuffle(x: &[f64], shape: ImageShape, factor: usize) -> Result<Vec<f64>, LinalgError> {
    if x.len() != shape.len() {
        return Err(LinalgError::InvalidData {
            expected: shape.len(),
            got: x.len(),
        });
    }
    let table = unshuffle_table(shape, factor)?;
    Ok(table.iter().map(|&src| x[src]).collect())
}

/// Inverse of [`pixel_unshuffle`]; `shape` is the *original* (pre-unshuffle) shape.
pub fn pixel_shuffle(x: &[f64], shape: ImageShape, factor: usize) -> Result<Vec<f64>, LinalgError> {
    if x.len() != shape.len() {
        return Err(LinalgError::InvalidData {
            expected: shape.len(),
            got: x.len(),
        });
    }
    let table = unshuffle_table(shape, factor)?;
    let mut out = vec![0.0; x.len()];
    for (k, &src) in table.iter().enumerate() {
        out[src] = x[k];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_one_is_identity() {
        let s = ImageShape::new(2, 3, 3);
        let x: Vec<f64> = (0..18).map(f64::from).collect();
        assert_eq!(pixel_unshuffle(&x, s, 1).unwrap(), x);
    }

    #[test]
    fn two_by_two_to_channels() {
        // (1,2,2) input (a,b,c,d) -> 4 channels of 1x1 in the same order
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = pixel_unshuffle(&x, ImageShape::new(1, 2, 2), 2).unwrap();
        assert_eq!(y, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn index_formula_on_4x4() {
        let s = ImageShape::new(1, 4, 4);
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        let y = pixel_unshuffle(&x, s, 2).unwrap();
        // channel 1 = (i=0, j=1): pixels (0,1),(0,3),(2,1),(2,3)
        assert_eq!(&y[4..8], &[1.0, 3.0, 9.0, 11.0]);
    }

    #[test]
    fn bijection_on_4x4_indices() {
        for (shape, f) in [(ImageShape::new(1, 4, 4), 2), (ImageShape::new(2, 4, 4), 4)] {
            let mut t = unshuffle_table(shape, f).unwrap();
            t.sort_unstable();
            assert_eq!(t, (0..shape.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let s = ImageShape::new(3, 4, 6);
        let x: Vec<f64> = (0..s.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let back = pixel_shuffle(&pixel_unshuffle(&x, s, 2).unwrap(), s, 2).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn indivisible_is_rejected() {
        let err = pixel_unshuffle(&[0.0; 6], ImageShape::new(1, 2, 3), 2).unwrap_err();
        assert!(matches!(err, LinalgError::Indivisible { .. }));
    }
}
