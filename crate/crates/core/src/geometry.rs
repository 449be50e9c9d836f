use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of one convolution: square kernel, dilation, stride, zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Stride 1 with the padding that keeps H×W unchanged.
    pub fn same(kernel_size: usize, dilation: usize) -> Self {
        Self {
            kernel_size,
            dilation,
            stride: 1,
            padding: dilation * (kernel_size.saturating_sub(1)) / 2,
        }
    }

    pub fn pointwise() -> Self {
        Self::same(1, 1)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "kernel size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if self.dilation == 0 || self.stride == 0 {
            return Err(Error::invalid("dilation and stride must be at least 1"));
        }
        Ok(())
    }

    /// Number of sampling locations K.
    pub fn taps(&self) -> usize {
        self.kernel_size * self.kernel_size
    }

    pub fn center_tap(&self) -> usize {
        self.taps() / 2
    }

    /// Unit offsets p_k in row-major order, centered on the kernel.
    pub fn unit_offsets(&self) -> Vec<(isize, isize)> {
        let r = (self.kernel_size / 2) as isize;
        (0..self.kernel_size as isize)
            .flat_map(|ky| (0..self.kernel_size as isize).map(move |kx| (ky - r, kx - r)))
            .collect()
    }

    /// Offsets d·p_k.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let d = self.dilation as isize;
        self.unit_offsets()
            .into_iter()
            .map(|(dy, dx)| (d * dy, d * dx))
            .collect()
    }

    /// Input-relative displacement of tap `k` from `out·stride`, padding included.
    pub(crate) fn tap_shift(&self, k: usize) -> (isize, isize) {
        let ky = (k / self.kernel_size) as isize;
        let kx = (k % self.kernel_size) as isize;
        let d = self.dilation as isize;
        let p = self.padding as isize;
        (ky * d - p, kx * d - p)
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = self.dilation * (self.kernel_size - 1) + 1;
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < span || wp < span {
            return Err(Error::invalid(format!(
                "input {h}x{w} too small for kernel span {span} with padding {}",
                self.padding
            )));
        }
        Ok(((hp - span) / self.stride + 1, (wp - span) / self.stride + 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_by_three_offsets_row_major() {
        let spec = ConvSpec::same(3, 1);
        assert_eq!(
            spec.offsets(),
            vec![
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 0),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1)
            ]
        );
        assert_eq!(spec.taps(), 9);
        assert_eq!(spec.center_tap(), 4);
    }

    #[test]
    fn same_padding_preserves_size() {
        for ks in [1, 3, 5] {
            for d in [1, 2, 4] {
                let spec = ConvSpec::same(ks, d);
                assert_eq!(spec.padding, d * (ks - 1) / 2);
                assert_eq!(spec.output_size(9, 7).unwrap(), (9, 7));
                for k in 0..spec.taps() {
                    let (sy, sx) = spec.tap_shift(k);
                    assert_eq!((sy, sx), spec.offsets()[k]);
                }
            }
        }
    }

    #[test]
    fn rejects_even_kernels() {
        assert!(ConvSpec::same(2, 1).validate().is_err());
        assert!(ConvSpec::same(3, 1).validate().is_ok());
    }
}
