use super::{gemm, FeatureMap, Module, Param, ParamInit, ParamRole, Scalar};

/// 2-D convolution without bias (every convolution here feeds a batch norm).
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug)]
pub struct ConvCache<F> {
    col: Vec<F>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: &mut ParamInit,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = Param::new(
            &[out_ch, in_ch, kernel, kernel],
            init.weight(out_ch * fan_in, fan_in),
            ParamRole::Weight,
        );
        Self {
            weight,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn forward(&self, x: &FeatureMap<F>) -> (FeatureMap<F>, ConvCache<F>) {
        assert_eq!(x.c, self.in_ch, "conv input channels");
        let (ho, wo) = self.output_hw(x.h, x.w);
        let col = if self.is_pointwise() {
            x.data.clone()
        } else {
            self.im2col(x, ho, wo)
        };
        let kk = self.in_ch * self.kernel * self.kernel;
        let cols = x.n * ho * wo;
        let mut out = vec![F::zero(); self.out_ch * cols];
        gemm(false, false, self.out_ch, cols, kk, F::one(), &self.weight.value, &col, F::zero(), &mut out);
        (
            FeatureMap::from_vec(self.out_ch, x.n, ho, wo, out),
            ConvCache {
                col,
                in_shape: (x.c, x.n, x.h, x.w),
                out_hw: (ho, wo),
            },
        )
    }

    /// Accumulates the weight gradient; returns the input gradient when
    /// `need_dx` is set.
    pub fn backward(&mut self, cache: &ConvCache<F>, dy: &FeatureMap<F>, need_dx: bool) -> Option<FeatureMap<F>> {
        let (c, n, h, w) = cache.in_shape;
        let (ho, wo) = cache.out_hw;
        let kk = self.in_ch * self.kernel * self.kernel;
        let cols = n * ho * wo;
        assert_eq!(dy.data.len(), self.out_ch * cols, "conv grad shape");
        gemm(false, true, self.out_ch, kk, cols, F::one(), &dy.data, &cache.col, F::one(), &mut self.weight.grad);
        if !need_dx {
            return None;
        }
        let mut dcol = vec![F::zero(); kk * cols];
        gemm(true, false, kk, cols, self.out_ch, F::one(), &self.weight.value, &dy.data, F::zero(), &mut dcol);
        if self.is_pointwise() {
            return Some(FeatureMap::from_vec(c, n, h, w, dcol));
        }
        Some(self.col2im(&dcol, (c, n, h, w), ho, wo))
    }

    fn im2col(&self, x: &FeatureMap<F>, ho: usize, wo: usize) -> Vec<F> {
        let k = self.kernel;
        let cols = x.n * ho * wo;
        let mut col = vec![F::zero(); x.c * k * k * cols];
        for ci in 0..x.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for ni in 0..x.n {
                        let base = (ci * x.n + ni) * x.h * x.w;
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let src = &x.data[base + iy as usize * x.w..base + (iy as usize + 1) * x.w];
                            let drow = &mut dst[(ni * ho + oy) * wo..(ni * ho + oy + 1) * wo];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix >= 0 && ix < x.w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, dcol: &[F], shape: (usize, usize, usize, usize), ho: usize, wo: usize) -> FeatureMap<F> {
        let (c, n, h, w) = shape;
        let k = self.kernel;
        let cols = n * ho * wo;
        let mut dx = FeatureMap::zeros(c, n, h, w);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcol[row * cols..(row + 1) * cols];
                    for ni in 0..n {
                        let base = (ci * n + ni) * h * w;
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let srow = &src[(ni * ho + oy) * wo..(ni * ho + oy + 1) * wo];
                            let drow = &mut dx.data[base + iy as usize * w..base + (iy as usize + 1) * w];
                            for (ox, &g) in srow.iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    drow[ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<F: Scalar> Module<F> for Conv2d<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<F>)) {
        f(format!("{prefix}weight"), &self.weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(format!("{prefix}weight"), &mut self.weight);
    }
}
