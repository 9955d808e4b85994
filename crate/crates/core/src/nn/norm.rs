use super::{FeatureMap, Module, Param, ParamRole, Scalar};

/// How a batch-norm layer obtains its normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left untouched.
    BatchStats,
    /// Stored running statistics.
    Eval,
}

/// Per-channel batch normalization over all `n·h·w` positions of a channel.
#[derive(Debug, Clone)]
pub struct BatchNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    eps: F,
    momentum: F,
}

#[derive(Debug)]
pub struct BnCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
    batch_stats: bool,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], F::one(), ParamRole::NormScale),
            beta: Param::filled(&[channels], F::zero(), ParamRole::NormShift),
            running_mean: Param::filled(&[channels], F::zero(), ParamRole::RunningStat),
            running_var: Param::filled(&[channels], F::one(), ParamRole::RunningStat),
            eps: F::lit(1e-5),
            momentum: F::lit(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &FeatureMap<F>, mode: NormMode) -> (FeatureMap<F>, BnCache<F>) {
        let ch = self.channels();
        assert_eq!(x.c, ch, "batch norm channels");
        let cols = x.cols();
        let count = F::from_usize(cols).unwrap();
        let mut y = vec![F::zero(); x.data.len()];
        let mut xhat = vec![F::zero(); x.data.len()];
        let mut inv_std = vec![F::zero(); ch];
        let batch_stats = mode != NormMode::Eval;
        for c in 0..ch {
            let row = x.row(c);
            let (mean, var) = if batch_stats {
                let mean = row.iter().copied().sum::<F>() / count;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / count;
                if mode == NormMode::Train {
                    let m = self.momentum;
                    let unbiased = if cols > 1 {
                        var * count / (count - F::one())
                    } else {
                        var
                    };
                    self.running_mean.value[c] = (F::one() - m) * self.running_mean.value[c] + m * mean;
                    self.running_var.value[c] = (F::one() - m) * self.running_var.value[c] + m * unbiased;
                }
                (mean, var)
            } else {
                (self.running_mean.value[c], self.running_var.value[c])
            };
            let is = F::one() / (var + self.eps).sqrt();
            inv_std[c] = is;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let xh = &mut xhat[c * cols..(c + 1) * cols];
            let yr = &mut y[c * cols..(c + 1) * cols];
            for ((&v, h), o) in row.iter().zip(xh.iter_mut()).zip(yr.iter_mut()) {
                *h = (v - mean) * is;
                *o = g * *h + b;
            }
        }
        (
            FeatureMap::from_vec(x.c, x.n, x.h, x.w, y),
            BnCache {
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn backward(&mut self, cache: &BnCache<F>, dy: &FeatureMap<F>) -> FeatureMap<F> {
        let ch = self.channels();
        let cols = dy.cols();
        let count = F::from_usize(cols).unwrap();
        let mut dx = vec![F::zero(); dy.data.len()];
        for c in 0..ch {
            let g = &dy.data[c * cols..(c + 1) * cols];
            let xh = &cache.xhat[c * cols..(c + 1) * cols];
            let sum_g: F = g.iter().copied().sum();
            let sum_gx: F = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            self.gamma.grad[c] += sum_gx;
            self.beta.grad[c] += sum_g;
            let scale = self.gamma.value[c] * cache.inv_std[c];
            let out = &mut dx[c * cols..(c + 1) * cols];
            if cache.batch_stats {
                let mg = sum_g / count;
                let mgx = sum_gx / count;
                for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
                    *o = scale * (gv - mg - xv * mgx);
                }
            } else {
                for (o, &gv) in out.iter_mut().zip(g) {
                    *o = scale * gv;
                }
            }
        }
        FeatureMap::from_vec(dy.c, dy.n, dy.h, dy.w, dx)
    }
}

impl<F: Scalar> Module<F> for BatchNorm<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<F>)) {
        f(format!("{prefix}gamma"), &self.gamma);
        f(format!("{prefix}beta"), &self.beta);
        f(format!("{prefix}running_mean"), &self.running_mean);
        f(format!("{prefix}running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(format!("{prefix}gamma"), &mut self.gamma);
        f(format!("{prefix}beta"), &mut self.beta);
        f(format!("{prefix}running_mean"), &mut self.running_mean);
        f(format!("{prefix}running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_output_is_standardized() {
        let mut bn = BatchNorm::<f64>::new(2);
        let x = FeatureMap::from_vec(2, 4, 1, 1, vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]);
        let (y, _) = bn.forward(&x, NormMode::Train);
        for c in 0..2 {
            let r = y.row(c);
            let mean: f64 = r.iter().sum::<f64>() / 4.0;
            let var: f64 = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn batch_stats_mode_leaves_running_stats_alone() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = FeatureMap::from_vec(1, 3, 1, 1, vec![1.0, 2.0, 6.0]);
        bn.forward(&x, NormMode::BatchStats);
        bn.forward(&x, NormMode::Eval);
        assert_eq!(bn.running_mean.value, vec![0.0]);
        assert_eq!(bn.running_var.value, vec![1.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.gamma.value[0] = 1.7;
        bn.beta.value[0] = -0.3;
        let base = vec![0.3, -1.2, 2.5, 0.9, 0.1];
        let w = [0.5, -1.0, 2.0, 0.25, 1.5];
        let loss = |bn: &mut BatchNorm<f64>, v: &[f64]| -> f64 {
            let (y, _) = bn.forward(&FeatureMap::from_vec(1, 5, 1, 1, v.to_vec()), NormMode::BatchStats);
            y.data.iter().zip(&w).map(|(a, b)| a * a * b).sum()
        };
        let (y, cache) = bn.forward(&FeatureMap::from_vec(1, 5, 1, 1, base.clone()), NormMode::BatchStats);
        let dy = FeatureMap::from_vec(1, 5, 1, 1, y.data.iter().zip(&w).map(|(a, b)| 2.0 * a * b).collect());
        let dx = bn.backward(&cache, &dy);
        let h = 1e-6;
        for i in 0..5 {
            let mut p = base.clone();
            p[i] += h;
            let mut m = base.clone();
            m[i] -= h;
            let fd = (loss(&mut bn, &p) - loss(&mut bn, &m)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6, "i={i} fd={fd} an={}", dx.data[i]);
        }
    }
}
