//! Student (`f_θ`, `g_θ`, `p_θ`) and teacher (`f_ψ`, `g_ψ`) networks.

use super::config::{EncoderConfig, MlpConfig};
use super::encoder::{Encoder, EncoderCache};
use super::mlp::{Mlp, MlpCache};
use crate::nn::{FeatureMap, Module, NormMode, Param, ParamInit, Scalar};
use crate::{Error, Result};

pub const STUDENT_ENCODER: &str = "f_theta.";
pub const STUDENT_PROJECTOR: &str = "g_theta.";
pub const STUDENT_PREDICTOR: &str = "p_theta.";
pub const TEACHER_ENCODER: &str = "f_psi.";
pub const TEACHER_PROJECTOR: &str = "g_psi.";

pub(crate) fn check_finite<F: Scalar>(x: &FeatureMap<F>, layer: &str) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        let bad = x.data.iter().filter(|v| !v.is_finite()).count();
        Err(Error::Numeric {
            layer: layer.to_string(),
            detail: format!("{bad} non-finite activations"),
        })
    }
}

/// The student-only head. `Identity` exists for degenerate-case checks.
#[derive(Debug, Clone)]
pub enum Predictor<F> {
    Mlp(Mlp<F>),
    Identity,
}

#[derive(Debug, Clone)]
pub struct Student<F> {
    pub encoder: Encoder<F>,
    pub projector: Mlp<F>,
    pub predictor: Predictor<F>,
}

pub struct StudentCache<F> {
    encoder: EncoderCache<F>,
    projector: MlpCache<F>,
    predictor: Option<MlpCache<F>>,
}

impl<F: Scalar> Student<F> {
    pub fn new(encoder: &EncoderConfig, mlp: &MlpConfig, init: &mut ParamInit) -> Self {
        let enc = Encoder::new(encoder, init);
        let projector = Mlp::new(encoder.feature_dim(), mlp, init);
        let predictor = Predictor::Mlp(Mlp::new(mlp.output_size, mlp, init));
        Self {
            encoder: enc,
            projector,
            predictor,
        }
    }

    /// `q = p(g(f(views)))`, keeping everything needed for backward.
    pub fn forward(&mut self, views: &FeatureMap<F>, mode: NormMode) -> Result<(FeatureMap<F>, StudentCache<F>)> {
        let (h, encoder) = self.encoder.forward(views, mode);
        check_finite(&h, "f_theta")?;
        let (z, projector) = self.projector.forward(&h, mode);
        check_finite(&z, "g_theta")?;
        let (q, predictor) = match &mut self.predictor {
            Predictor::Mlp(p) => {
                let (q, c) = p.forward(&z, mode);
                (q, Some(c))
            }
            Predictor::Identity => (z, None),
        };
        check_finite(&q, "p_theta")?;
        Ok((
            q,
            StudentCache {
                encoder,
                projector,
                predictor,
            },
        ))
    }

    /// Projector output `g(f(views))` without the predictor.
    pub fn project(&mut self, views: &FeatureMap<F>, mode: NormMode) -> Result<FeatureMap<F>> {
        let (h, _) = self.encoder.forward(views, mode);
        check_finite(&h, "f_theta")?;
        let (z, _) = self.projector.forward(&h, mode);
        check_finite(&z, "g_theta")?;
        Ok(z)
    }

    pub fn backward(&mut self, cache: &StudentCache<F>, dq: &FeatureMap<F>) {
        let dz = match (&mut self.predictor, &cache.predictor) {
            (Predictor::Mlp(p), Some(c)) => p.backward(c, dq, true).expect("dx requested"),
            _ => dq.clone(),
        };
        let dh = self.projector.backward(&cache.projector, &dz, true).expect("dx requested");
        self.encoder.backward(&cache.encoder, &dh);
    }
}

impl<F: Scalar> Module<F> for Student<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<F>)) {
        self.encoder.visit(&format!("{prefix}{STUDENT_ENCODER}"), f);
        self.projector.visit(&format!("{prefix}{STUDENT_PROJECTOR}"), f);
        if let Predictor::Mlp(p) = &self.predictor {
            p.visit(&format!("{prefix}{STUDENT_PREDICTOR}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.encoder.visit_mut(&format!("{prefix}{STUDENT_ENCODER}"), f);
        self.projector.visit_mut(&format!("{prefix}{STUDENT_PROJECTOR}"), f);
        if let Predictor::Mlp(p) = &mut self.predictor {
            p.visit_mut(&format!("{prefix}{STUDENT_PREDICTOR}"), f);
        }
    }
}

/// The momentum network. It has no predictor and no backward pass: its
/// outputs are constants to the loss and its parameters change only through
/// [`super::ema::ema_update`].
#[derive(Debug, Clone)]
pub struct Teacher<F> {
    pub encoder: Encoder<F>,
    pub projector: Mlp<F>,
}

impl<F: Scalar> Teacher<F> {
    /// Exact copy of the student's encoder and projector.
    pub fn from_student(student: &Student<F>) -> Self {
        Self {
            encoder: student.encoder.clone(),
            projector: student.projector.clone(),
        }
    }

    /// `z′ = g(f(views))` with batch statistics; running statistics are not
    /// touched.
    pub fn forward(&mut self, views: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        self.forward_with_mode(views, NormMode::BatchStats)
    }

    pub fn forward_with_mode(&mut self, views: &FeatureMap<F>, mode: NormMode) -> Result<FeatureMap<F>> {
        let mode = if mode == NormMode::Train { NormMode::BatchStats } else { mode };
        let (h, _) = self.encoder.forward(views, mode);
        check_finite(&h, "f_psi")?;
        let (z, _) = self.projector.forward(&h, mode);
        check_finite(&z, "g_psi")?;
        Ok(z)
    }
}

impl<F: Scalar> Module<F> for Teacher<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<F>)) {
        self.encoder.visit(&format!("{prefix}{TEACHER_ENCODER}"), f);
        self.projector.visit(&format!("{prefix}{TEACHER_PROJECTOR}"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.encoder.visit_mut(&format!("{prefix}{TEACHER_ENCODER}"), f);
        self.projector.visit_mut(&format!("{prefix}{TEACHER_PROJECTOR}"), f);
    }
}
