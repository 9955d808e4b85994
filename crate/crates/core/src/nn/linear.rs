use super::{gemm, FeatureMap, Module, Param, ParamInit, ParamRole, Scalar};

/// Fully connected layer on `[in][n]` column blocks.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Debug)]
pub struct LinearCache<F> {
    input: Vec<F>,
    n: usize,
}

impl<F: Scalar> Linear<F> {
    pub fn new(in_dim: usize, out_dim: usize, init: &mut ParamInit) -> Self {
        Self {
            weight: Param::new(&[out_dim, in_dim], init.weight(out_dim * in_dim, in_dim), ParamRole::Weight),
            bias: Param::new(&[out_dim], init.bias(out_dim, in_dim), ParamRole::Bias),
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &FeatureMap<F>) -> (FeatureMap<F>, LinearCache<F>) {
        assert_eq!(x.c, self.in_dim, "linear input dim");
        assert_eq!(x.spatial(), 1, "linear expects flat features");
        let n = x.n;
        let mut out = vec![F::zero(); self.out_dim * n];
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v = self.bias.value[o]);
        }
        gemm(false, false, self.out_dim, n, self.in_dim, F::one(), &self.weight.value, &x.data, F::one(), &mut out);
        (
            FeatureMap::from_columns(self.out_dim, n, out),
            LinearCache {
                input: x.data.clone(),
                n,
            },
        )
    }

    pub fn backward(&mut self, cache: &LinearCache<F>, dy: &FeatureMap<F>, need_dx: bool) -> Option<FeatureMap<F>> {
        let n = cache.n;
        assert_eq!(dy.data.len(), self.out_dim * n, "linear grad shape");
        gemm(false, true, self.out_dim, self.in_dim, n, F::one(), &dy.data, &cache.input, F::one(), &mut self.weight.grad);
        for (o, row) in dy.data.chunks(n).enumerate() {
            self.bias.grad[o] += row.iter().copied().sum::<F>();
        }
        if !need_dx {
            return None;
        }
        let mut dx = vec![F::zero(); self.in_dim * n];
        gemm(true, false, self.in_dim, n, self.out_dim, F::one(), &self.weight.value, &dy.data, F::zero(), &mut dx);
        Some(FeatureMap::from_columns(self.in_dim, n, dx))
    }
}

impl<F: Scalar> Module<F> for Linear<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<F>)) {
        f(format!("{prefix}weight"), &self.weight);
        f(format!("{prefix}bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(format!("{prefix}weight"), &mut self.weight);
        f(format!("{prefix}bias"), &mut self.bias);
    }
}
