use super::config::MlpConfig;
use crate::nn::{relu_backward, relu_inplace, BatchNorm, BnCache, FeatureMap, Linear, LinearCache, Module, NormMode, Param, ParamInit, Scalar};

/// linear → batch norm → rectifier → linear; shared layout of the projector
/// and the predictor.
#[derive(Debug, Clone)]
pub struct Mlp<F> {
    pub fc1: Linear<F>,
    pub bn: BatchNorm<F>,
    pub fc2: Linear<F>,
}

pub struct MlpCache<F> {
    fc1: LinearCache<F>,
    bn: BnCache<F>,
    hidden: FeatureMap<F>,
    fc2: LinearCache<F>,
}

impl<F: Scalar> Mlp<F> {
    pub fn new(in_dim: usize, cfg: &MlpConfig, init: &mut ParamInit) -> Self {
        Self {
            fc1: Linear::new(in_dim, cfg.hidden_size, init),
            bn: BatchNorm::new(cfg.hidden_size),
            fc2: Linear::new(cfg.hidden_size, cfg.output_size, init),
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<F>, mode: NormMode) -> (FeatureMap<F>, MlpCache<F>) {
        let (h, fc1) = self.fc1.forward(x);
        let (mut h, bn) = self.bn.forward(&h, mode);
        relu_inplace(&mut h);
        let (y, fc2) = self.fc2.forward(&h);
        (y, MlpCache { fc1, bn, hidden: h, fc2 })
    }

    pub fn backward(&mut self, cache: &MlpCache<F>, dy: &FeatureMap<F>, need_dx: bool) -> Option<FeatureMap<F>> {
        let mut g = self.fc2.backward(&cache.fc2, dy, true).expect("dx requested");
        relu_backward(&cache.hidden, &mut g);
        let g = self.bn.backward(&cache.bn, &g);
        self.fc1.backward(&cache.fc1, &g, need_dx)
    }
}

impl<F: Scalar> Module<F> for Mlp<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<F>)) {
        self.fc1.visit(&format!("{prefix}fc1."), f);
        self.bn.visit(&format!("{prefix}bn."), f);
        self.fc2.visit(&format!("{prefix}fc2."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.fc1.visit_mut(&format!("{prefix}fc1."), f);
        self.bn.visit_mut(&format!("{prefix}bn."), f);
        self.fc2.visit_mut(&format!("{prefix}fc2."), f);
    }
}
