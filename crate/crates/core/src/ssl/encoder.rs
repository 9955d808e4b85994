//! Convolutional encoders `f`: a light stride-2 stack for CPU-scale runs and
//! a bottleneck residual network.

use super::config::{EncoderConfig, EncoderKind};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace, BatchNorm, BnCache, Conv2d, ConvCache,
    FeatureMap, MaxPool2d, MaxPoolCache, Module, NormMode, Param, ParamInit, Scalar,
};

/// conv → batch norm, with an optional rectifier.
#[derive(Debug, Clone)]
struct ConvBn<F> {
    conv: Conv2d<F>,
    bn: BatchNorm<F>,
}

struct ConvBnCache<F> {
    conv: ConvCache<F>,
    bn: BnCache<F>,
}

impl<F: Scalar> ConvBn<F> {
    fn new(cin: usize, cout: usize, k: usize, s: usize, p: usize, init: &mut ParamInit) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, k, s, p, init),
            bn: BatchNorm::new(cout),
        }
    }

    fn forward(&mut self, x: &FeatureMap<F>, mode: NormMode) -> (FeatureMap<F>, ConvBnCache<F>) {
        let (y, conv) = self.conv.forward(x);
        let (y, bn) = self.bn.forward(&y, mode);
        (y, ConvBnCache { conv, bn })
    }

    fn backward(&mut self, cache: &ConvBnCache<F>, dy: &FeatureMap<F>, need_dx: bool) -> Option<FeatureMap<F>> {
        let d = self.bn.backward(&cache.bn, dy);
        self.conv.backward(&cache.conv, &d, need_dx)
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<F>)) {
        self.conv.visit(&format!("{prefix}conv."), f);
        self.bn.visit(&format!("{prefix}bn."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.conv.visit_mut(&format!("{prefix}conv."), f);
        self.bn.visit_mut(&format!("{prefix}bn."), f);
    }
}

#[derive(Debug, Clone)]
pub struct SmallConv<F> {
    blocks: Vec<ConvBn<F>>,
}

pub struct SmallConvCache<F> {
    blocks: Vec<(ConvBnCache<F>, FeatureMap<F>)>,
}

impl<F: Scalar> SmallConv<F> {
    pub fn new(channels: &[usize], init: &mut ParamInit) -> Self {
        let mut cin = 1;
        let blocks = channels
            .iter()
            .map(|&cout| {
                let b = ConvBn::new(cin, cout, 3, 2, 1, init);
                cin = cout;
                b
            })
            .collect();
        Self { blocks }
    }

    fn forward(&mut self, x: &FeatureMap<F>, mode: NormMode) -> (FeatureMap<F>, SmallConvCache<F>) {
        let mut blocks: Vec<(ConvBnCache<F>, FeatureMap<F>)> = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let input = blocks.last().map(|(_, out)| out).unwrap_or(x);
            let (mut y, c) = block.forward(input, mode);
            relu_inplace(&mut y);
            blocks.push((c, y));
        }
        let pooled = global_avg_pool(&blocks.last().expect("at least one block").1);
        (pooled, SmallConvCache { blocks })
    }

    fn backward(&mut self, cache: &SmallConvCache<F>, dy: &FeatureMap<F>) {
        let (_, last) = cache.blocks.last().expect("non-empty cache");
        let mut grad = global_avg_pool_backward(dy, last.h, last.w);
        for (i, block) in self.blocks.iter_mut().enumerate().rev() {
            let (c, out) = &cache.blocks[i];
            relu_backward(out, &mut grad);
            match block.backward(c, &grad, i > 0) {
                Some(g) => grad = g,
                None => break,
            }
        }
    }
}

impl<F: Scalar> Module<F> for SmallConv<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<F>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}block{i}."), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}block{i}."), f);
        }
    }
}

const EXPANSION: usize = 4;

#[derive(Debug, Clone)]
struct Bottleneck<F> {
    reduce: ConvBn<F>,
    spatial: ConvBn<F>,
    expand: ConvBn<F>,
    down: Option<ConvBn<F>>,
}

struct BottleneckCache<F> {
    reduce: ConvBnCache<F>,
    reduce_out: FeatureMap<F>,
    spatial: ConvBnCache<F>,
    spatial_out: FeatureMap<F>,
    expand: ConvBnCache<F>,
    down: Option<ConvBnCache<F>>,
    out: FeatureMap<F>,
}

impl<F: Scalar> Bottleneck<F> {
    fn new(cin: usize, planes: usize, stride: usize, init: &mut ParamInit) -> Self {
        let cout = planes * EXPANSION;
        let down = (stride != 1 || cin != cout).then(|| ConvBn::new(cin, cout, 1, stride, 0, init));
        Self {
            reduce: ConvBn::new(cin, planes, 1, 1, 0, init),
            spatial: ConvBn::new(planes, planes, 3, stride, 1, init),
            expand: ConvBn::new(planes, cout, 1, 1, 0, init),
            down,
        }
    }

    fn forward(&mut self, x: &FeatureMap<F>, mode: NormMode) -> (FeatureMap<F>, BottleneckCache<F>) {
        let (mut a, reduce) = self.reduce.forward(x, mode);
        relu_inplace(&mut a);
        let (mut b, spatial) = self.spatial.forward(&a, mode);
        relu_inplace(&mut b);
        let (mut c, expand) = self.expand.forward(&b, mode);
        let down = match &mut self.down {
            Some(d) => {
                let (s, dc) = d.forward(x, mode);
                for (o, v) in c.data.iter_mut().zip(&s.data) {
                    *o += *v;
                }
                Some(dc)
            }
            None => {
                for (o, v) in c.data.iter_mut().zip(&x.data) {
                    *o += *v;
                }
                None
            }
        };
        relu_inplace(&mut c);
        (
            c.clone(),
            BottleneckCache {
                reduce,
                reduce_out: a,
                spatial,
                spatial_out: b,
                expand,
                down,
                out: c,
            },
        )
    }

    fn backward(&mut self, cache: &BottleneckCache<F>, dy: &FeatureMap<F>, need_dx: bool) -> Option<FeatureMap<F>> {
        let mut g = dy.clone();
        relu_backward(&cache.out, &mut g);
        let mut gb = self.expand.backward(&cache.expand, &g, true).expect("dx requested");
        relu_backward(&cache.spatial_out, &mut gb);
        let mut ga = self.spatial.backward(&cache.spatial, &gb, true).expect("dx requested");
        relu_backward(&cache.reduce_out, &mut ga);
        let main = self.reduce.backward(&cache.reduce, &ga, need_dx);
        let short = match (&mut self.down, &cache.down) {
            (Some(d), Some(dc)) => d.backward(dc, &g, need_dx),
            _ => need_dx.then_some(g),
        };
        match (main, short) {
            (Some(mut m), Some(s)) => {
                for (o, v) in m.data.iter_mut().zip(&s.data) {
                    *o += *v;
                }
                Some(m)
            }
            _ => None,
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<F>)) {
        self.reduce.visit(&format!("{prefix}reduce."), f);
        self.spatial.visit(&format!("{prefix}spatial."), f);
        self.expand.visit(&format!("{prefix}expand."), f);
        if let Some(d) = &self.down {
            d.visit(&format!("{prefix}down."), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.reduce.visit_mut(&format!("{prefix}reduce."), f);
        self.spatial.visit_mut(&format!("{prefix}spatial."), f);
        self.expand.visit_mut(&format!("{prefix}expand."), f);
        if let Some(d) = &mut self.down {
            d.visit_mut(&format!("{prefix}down."), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResNet<F> {
    stem: ConvBn<F>,
    pool: MaxPool2d,
    stages: Vec<Vec<Bottleneck<F>>>,
}

pub struct ResNetCache<F> {
    stem: ConvBnCache<F>,
    stem_out: FeatureMap<F>,
    pool: MaxPoolCache,
    blocks: Vec<BottleneckCache<F>>,
    last_hw: (usize, usize),
}

impl<F: Scalar> ResNet<F> {
    pub fn new(blocks: &[usize], width: usize, init: &mut ParamInit) -> Self {
        let stem = ConvBn::new(3, width, 7, 2, 3, init);
        let mut cin = width;
        let mut stages = Vec::with_capacity(blocks.len());
        for (i, &n) in blocks.iter().enumerate() {
            let planes = width << i;
            let mut stage = Vec::with_capacity(n);
            for j in 0..n {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                stage.push(Bottleneck::new(cin, planes, stride, init));
                cin = planes * EXPANSION;
            }
            stages.push(stage);
        }
        Self {
            stem,
            pool: MaxPool2d {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            stages,
        }
    }

    fn forward(&mut self, x: &FeatureMap<F>, mode: NormMode) -> (FeatureMap<F>, ResNetCache<F>) {
        let rgb;
        let x = if x.c == 1 {
            rgb = x.replicate_channels(3);
            &rgb
        } else {
            x
        };
        let (mut s, stem) = self.stem.forward(x, mode);
        relu_inplace(&mut s);
        let (mut cur, pool) = self.pool.forward(&s);
        let mut blocks = Vec::new();
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                let (y, c) = block.forward(&cur, mode);
                blocks.push(c);
                cur = y;
            }
        }
        let last_hw = (cur.h, cur.w);
        (
            global_avg_pool(&cur),
            ResNetCache {
                stem,
                stem_out: s,
                pool,
                blocks,
                last_hw,
            },
        )
    }

    fn backward(&mut self, cache: &ResNetCache<F>, dy: &FeatureMap<F>) {
        let mut g = global_avg_pool_backward(dy, cache.last_hw.0, cache.last_hw.1);
        let mut idx = cache.blocks.len();
        for stage in self.stages.iter_mut().rev() {
            for block in stage.iter_mut().rev() {
                idx -= 1;
                g = block.backward(&cache.blocks[idx], &g, true).expect("dx requested");
            }
        }
        let mut gs = self.pool.backward(&cache.pool, &g);
        relu_backward(&cache.stem_out, &mut gs);
        self.stem.backward(&cache.stem, &gs, false);
    }
}

impl<F: Scalar> Module<F> for ResNet<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<F>)) {
        self.stem.visit(&format!("{prefix}stem."), f);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, b) in stage.iter().enumerate() {
                b.visit(&format!("{prefix}layer{i}.{j}."), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.stem.visit_mut(&format!("{prefix}stem."), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, b) in stage.iter_mut().enumerate() {
                b.visit_mut(&format!("{prefix}layer{i}.{j}."), f);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Encoder<F> {
    SmallConv(SmallConv<F>),
    ResNet(ResNet<F>),
}

pub enum EncoderCache<F> {
    SmallConv(SmallConvCache<F>),
    ResNet(ResNetCache<F>),
}

impl<F: Scalar> Encoder<F> {
    pub fn new(cfg: &EncoderConfig, init: &mut ParamInit) -> Self {
        match cfg.kind {
            EncoderKind::SmallConv => Encoder::SmallConv(SmallConv::new(&cfg.channels, init)),
            EncoderKind::Resnet50 => Encoder::ResNet(ResNet::new(&cfg.resnet_blocks, cfg.resnet_width, init)),
        }
    }

    /// `[1][n][h][w]` views → `[feature_dim][n]` features.
    pub fn forward(&mut self, x: &FeatureMap<F>, mode: NormMode) -> (FeatureMap<F>, EncoderCache<F>) {
        match self {
            Encoder::SmallConv(e) => {
                let (y, c) = e.forward(x, mode);
                (y, EncoderCache::SmallConv(c))
            }
            Encoder::ResNet(e) => {
                let (y, c) = e.forward(x, mode);
                (y, EncoderCache::ResNet(c))
            }
        }
    }

    /// Accumulates parameter gradients; input gradients are not produced.
    pub fn backward(&mut self, cache: &EncoderCache<F>, dy: &FeatureMap<F>) {
        match (self, cache) {
            (Encoder::SmallConv(e), EncoderCache::SmallConv(c)) => e.backward(c, dy),
            (Encoder::ResNet(e), EncoderCache::ResNet(c)) => e.backward(c, dy),
            _ => panic!("encoder/cache kind mismatch"),
        }
    }
}

impl<F: Scalar> Module<F> for Encoder<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<F>)) {
        match self {
            Encoder::SmallConv(e) => e.visit(prefix, f),
            Encoder::ResNet(e) => e.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        match self {
            Encoder::SmallConv(e) => e.visit_mut(prefix, f),
            Encoder::ResNet(e) => e.visit_mut(prefix, f),
        }
    }
}
