use crate::nn::{Module, Param, Scalar};
use crate::{Error, Result};

/// `target ← τ·target + (1−τ)·source`, elementwise over every parameter
/// (running statistics included). Parameters are paired by visiting order
/// and must agree in relative name and shape.
pub fn ema_update<F: Scalar>(target: &mut impl Module<F>, source: &impl Module<F>, tau: F) -> Result<()> {
    let src: Vec<(String, &Param<F>)> = source.named_params("");
    let mut count = 0usize;
    let mut err = None;
    {
        let mut pairs = src.iter();
        target.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            let Some((sname, s)) = pairs.next() else {
                err = Some(Error::validation(format!("EMA source has no counterpart for `{name}`")));
                return;
            };
            if *sname != name || s.shape != p.shape {
                err = Some(Error::validation(format!(
                    "EMA shape/name mismatch: `{name}` {:?} vs `{sname}` {:?}",
                    p.shape, s.shape
                )));
                return;
            }
            let keep = tau;
            let take = F::one() - tau;
            for (t, &v) in p.value.iter_mut().zip(&s.value) {
                *t = keep * *t + take * v;
            }
            count += 1;
        });
    }
    if let Some(e) = err {
        return Err(e);
    }
    if count != src.len() {
        return Err(Error::validation(format!(
            "EMA target has {count} tensors, source has {}",
            src.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamRole;

    struct Vec1(Param<f64>);

    impl Module<f64> for Vec1 {
        fn visit<'a>(&'a self, _: &str, f: &mut dyn FnMut(String, &'a Param<f64>)) {
            f("w".into(), &self.0);
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(String, &mut Param<f64>)) {
            f("w".into(), &mut self.0);
        }
    }

    fn v(x: &[f64]) -> Vec1 {
        Vec1(Param::new(&[x.len()], x.to_vec(), ParamRole::Weight))
    }

    #[test]
    fn extremes_and_one_step() {
        let mut t = v(&[0.0, 2.0]);
        ema_update(&mut t, &v(&[1.0, 5.0]), 1.0).unwrap();
        assert_eq!(t.0.value, vec![0.0, 2.0]);
        ema_update(&mut t, &v(&[1.0, 5.0]), 0.0).unwrap();
        assert_eq!(t.0.value, vec![1.0, 5.0]);
        let mut t = v(&[0.0]);
        ema_update(&mut t, &v(&[1.0]), 0.996).unwrap();
        assert!((t.0.value[0] - 0.004).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut t = v(&[0.0, 1.0]);
        assert!(ema_update(&mut t, &v(&[1.0]), 0.5).is_err());
    }
}
