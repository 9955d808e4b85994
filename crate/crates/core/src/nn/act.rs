use super::{FeatureMap, Scalar};

/// In-place rectifier; the rectified output doubles as the backward mask.
pub fn relu_inplace<F: Scalar>(x: &mut FeatureMap<F>) {
    for v in x.data.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Masks `dy` in place by the positive entries of the rectified output.
pub fn relu_backward<F: Scalar>(output: &FeatureMap<F>, dy: &mut FeatureMap<F>) {
    for (g, &o) in dy.data.iter_mut().zip(&output.data) {
        if o <= F::zero() {
            *g = F::zero();
        }
    }
}

/// `[c][n][h][w]` → `[c][n]` mean over spatial positions.
pub fn global_avg_pool<F: Scalar>(x: &FeatureMap<F>) -> FeatureMap<F> {
    let s = x.spatial();
    let inv = F::one() / F::from_usize(s).unwrap();
    let data = x.data.chunks(s).map(|chunk| chunk.iter().copied().sum::<F>() * inv).collect();
    FeatureMap::from_columns(x.c, x.n, data)
}

pub fn global_avg_pool_backward<F: Scalar>(dy: &FeatureMap<F>, h: usize, w: usize) -> FeatureMap<F> {
    let s = h * w;
    let inv = F::one() / F::from_usize(s).unwrap();
    let mut data = Vec::with_capacity(dy.data.len() * s);
    for &g in &dy.data {
        data.extend(std::iter::repeat_n(g * inv, s));
    }
    FeatureMap::from_vec(dy.c, dy.n, h, w, data)
}

/// Max pooling with implicit negative-infinity padding.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_shape: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn forward<F: Scalar>(&self, x: &FeatureMap<F>) -> (FeatureMap<F>, MaxPoolCache) {
        let ho = (x.h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (x.w + 2 * self.padding - self.kernel) / self.stride + 1;
        let mut out = FeatureMap::zeros(x.c, x.n, ho, wo);
        let mut argmax = vec![0usize; out.data.len()];
        for plane in 0..x.c * x.n {
            let base = plane * x.h * x.w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = F::neg_infinity();
                    let mut best_idx = base;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * x.w + ix as usize;
                            if x.data[idx] > best {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out.data[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        (
            out,
            MaxPoolCache {
                argmax,
                in_shape: (x.c, x.n, x.h, x.w),
            },
        )
    }

    pub fn backward<F: Scalar>(&self, cache: &MaxPoolCache, dy: &FeatureMap<F>) -> FeatureMap<F> {
        let (c, n, h, w) = cache.in_shape;
        let mut dx = FeatureMap::zeros(c, n, h, w);
        for (&idx, &g) in cache.argmax.iter().zip(&dy.data) {
            dx.data[idx] += g;
        }
        dx
    }
}
