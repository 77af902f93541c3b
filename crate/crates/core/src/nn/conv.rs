use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{shape_err, uniform, view_d, view_mut_d, NnError, Parameterized};
use crate::Scalar;

/// Stride-1 2-D convolution with "same" zero padding over a
/// `channels x time x frequency` input. Kernels are square and odd-sized.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `out x in x k x k`
    pub weight: Array4<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache<T> {
    cols: Array2<T>,
    in_shape: (usize, usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self {
            weight: Array4::zeros((out_channels, in_channels, kernel, kernel)),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = (in_channels * kernel * kernel) as f64;
        Self {
            weight: uniform(rng, &[out_channels, in_channels, kernel, kernel], 1.0 / fan_in.sqrt())
                .into_dimensionality()
                .expect("4-d"),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let (o, i, k, _) = self.weight.dim();
        Self::zeros(i, o, k)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn weight_matrix(&self) -> Array2<T> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .to_shape((o, i * k * k))
            .expect("contiguous weight")
            .into_owned()
    }

    pub fn forward(&self, x: &Array3<T>) -> Result<(Array3<T>, Conv2dCache<T>), NnError> {
        let (c, h, w) = x.dim();
        if c != self.in_channels() {
            return Err(shape_err("conv2d", &[self.in_channels(), h, w], x.shape()));
        }
        let k = self.kernel();
        let pad = (k / 2) as isize;
        let mut cols = Array2::<T>::zeros((h * w, c * k * k));
        for ci in 0..c {
            for dy in 0..k {
                for dx in 0..k {
                    let col = (ci * k + dy) * k + dx;
                    for y in 0..h {
                        let sy = y as isize + dy as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + dx as isize - pad;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            cols[[y * w + xx, col]] = x[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
        let out = cols.dot(&self.weight_matrix().t()) + &self.bias;
        let out = out
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels(), h, w))
            .expect("output reshape");
        Ok((
            out,
            Conv2dCache {
                cols,
                in_shape: (c, h, w),
            },
        ))
    }

    pub fn backward(&self, cache: &Conv2dCache<T>, grad_out: &Array3<T>) -> Result<(Array3<T>, Self), NnError> {
        let (c, h, w) = cache.in_shape;
        let k = self.kernel();
        if c != self.in_channels() || cache.cols.ncols() != c * k * k {
            return Err(NnError::Cache {
                layer: "conv2d".into(),
                reason: "cache was produced by a layer of a different shape".into(),
            });
        }
        let o = self.out_channels();
        if grad_out.dim() != (o, h, w) {
            return Err(shape_err("conv2d", &[o, h, w], grad_out.shape()));
        }
        // positions x out
        let g = grad_out
            .to_shape((o, h * w))
            .expect("contiguous grad")
            .t()
            .to_owned();
        let dw = g.t().dot(&cache.cols);
        let db = g.sum_axis(Axis(0));
        let dcols = g.dot(&self.weight_matrix());
        let pad = (k / 2) as isize;
        let mut dx = Array3::<T>::zeros((c, h, w));
        for ci in 0..c {
            for dy in 0..k {
                for dxk in 0..k {
                    let col = (ci * k + dy) * k + dxk;
                    for y in 0..h {
                        let sy = y as isize + dy as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + dxk as isize - pad;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dx[[ci, sy as usize, sx as usize]] += dcols[[y * w + xx, col]];
                        }
                    }
                }
            }
        }
        let grads = Self {
            weight: dw.into_shape_with_order((o, c, k, k)).expect("weight reshape"),
            bias: db,
        };
        Ok((dx, grads))
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![
            ("weight".into(), view_d(&self.weight)),
            ("bias".into(), view_d(&self.bias)),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![
            ("weight".into(), view_mut_d(&mut self.weight)),
            ("bias".into(), view_mut_d(&mut self.bias)),
        ]
    }
}

/// Averages adjacent pairs along the last (frequency) axis; an odd trailing
/// bin is dropped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AvgPoolFreq;

impl AvgPoolFreq {
    pub fn forward<T: Scalar>(x: &Array3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        let half = T::lit(0.5);
        Array3::from_shape_fn((c, h, w / 2), |(ci, y, j)| {
            (x[[ci, y, 2 * j]] + x[[ci, y, 2 * j + 1]]) * half
        })
    }

    pub fn backward<T: Scalar>(input_width: usize, grad_out: &Array3<T>) -> Result<Array3<T>, NnError> {
        let (c, h, wo) = grad_out.dim();
        if wo != input_width / 2 {
            return Err(shape_err("avgpool", &[c, h, input_width / 2], grad_out.shape()));
        }
        let half = T::lit(0.5);
        Ok(Array3::from_shape_fn((c, h, input_width), |(ci, y, x)| {
            if x / 2 < wo {
                grad_out[[ci, y, x / 2]] * half
            } else {
                T::zero()
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct sliding-window convolution.
    fn naive(conv: &Conv2d<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (o, _, k, _) = conv.weight.dim();
        let p = (k / 2) as isize;
        Array3::from_shape_fn((o, h, w), |(oi, y, xx)| {
            let mut acc = conv.bias[oi];
            for ci in 0..c {
                for dy in 0..k {
                    for dx in 0..k {
                        let sy = y as isize + dy as isize - p;
                        let sx = xx as isize + dx as isize - p;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            acc += conv.weight[[oi, ci, dy, dx]] * x[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut conv = Conv2d::<f64>::init(2, 3, 3, &mut rng);
        conv.bias = Array1::from(vec![0.1, -0.2, 0.3]);
        let x = super::super::uniform::<f64, _>(&mut rng, &[2, 5, 6], 1.0)
            .into_dimensionality()
            .unwrap();
        let (y, _) = conv.forward(&x).unwrap();
        let expect = naive(&conv, &x);
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_halves_frequency() {
        let x = Array3::from_shape_fn((1, 2, 5), |(_, y, x)| (y * 10 + x) as f64);
        let y = AvgPoolFreq::forward(&x);
        assert_eq!(y.dim(), (1, 2, 2));
        assert_eq!(y[[0, 1, 1]], 12.5);
        let g = AvgPoolFreq::backward(5, &Array3::from_elem((1, 2, 2), 1.0)).unwrap();
        assert_eq!(g[[0, 0, 4]], 0.0);
        assert_eq!(g[[0, 0, 3]], 0.5);
    }
}
