use lanegan_tensor::{Element, Graph, Var};
use serde::{Deserialize, Serialize};

use super::discriminator::PatchMap;
use crate::error::{Error, Result};
use crate::imaging::Image;

pub const SCORE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanObjective {
    /// Cross-entropy objective with the non-saturating generator form.
    #[default]
    Log,
    /// Squared-error objective against targets 1 (real) and 0 (fake).
    LeastSquares,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cyc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cyc: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cyc >= 0.0) {
            return Err(Error::Config(format!("lambda_cyc must be >= 0, got {}", self.lambda_cyc)));
        }
        Ok(())
    }
}

fn clamp(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

fn mean_of(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len().max(1) as f64;
    xs.sum::<f64>() / n
}

/// Returns `(loss_d, loss_g)` for one discriminator on real and generated scores.
pub fn adversarial_loss(real: &PatchMap, fake: &PatchMap) -> (f64, f64) {
    let loss_d = -mean_of(real.scores.iter().map(|&s| clamp(s).ln()))
        - mean_of(fake.scores.iter().map(|&s| (1.0 - clamp(s)).ln()));
    let loss_g = -mean_of(fake.scores.iter().map(|&s| clamp(s).ln()));
    (loss_d, loss_g)
}

/// Mean absolute reconstruction error of both cycles.
pub fn cycle_loss(x: &[Image], x_rec: &[Image], y: &[Image], y_rec: &[Image]) -> Result<f64> {
    fn l1(a: &[Image], b: &[Image]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::contract(format!(
                "batch sizes differ: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (p, q) in a.iter().zip(b) {
            if (p.height(), p.width(), p.channels()) != (q.height(), q.width(), q.channels()) {
                return Err(Error::contract(format!(
                    "image shapes differ: {}x{}x{} vs {}x{}x{}",
                    p.height(),
                    p.width(),
                    p.channels(),
                    q.height(),
                    q.width(),
                    q.channels()
                )));
            }
            sum += p
                .data()
                .iter()
                .zip(q.data())
                .map(|(&u, &v)| (u as f64 - v as f64).abs())
                .sum::<f64>();
            count += p.data().len();
        }
        Ok(if count == 0 { 0.0 } else { sum / count as f64 })
    }
    Ok(l1(x_rec, x)? + l1(y_rec, y)?)
}

/// Loss components entering the weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Adversarial term for `G_A` judged by `D_B`.
    pub adv_a: f64,
    /// Adversarial term for `G_B` judged by `D_A`.
    pub adv_b: f64,
    pub cycle: f64,
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.adv_a + parts.adv_b + w.lambda_cyc * parts.cycle
}

/// Generator-side adversarial term on discriminator scores of fakes.
pub fn generator_adv<T: Element>(g: &mut Graph<T>, d_fake: Var, obj: GanObjective) -> Var {
    match obj {
        GanObjective::Log => g.neg_log_mean(d_fake, false, SCORE_EPS),
        GanObjective::LeastSquares => g.squared_error_mean(d_fake, 1.0),
    }
}

/// Discriminator-side term on scores of reals and fakes.
pub fn discriminator_adv<T: Element>(
    g: &mut Graph<T>,
    d_real: Var,
    d_fake: Var,
    obj: GanObjective,
) -> Var {
    let (r, f) = match obj {
        GanObjective::Log => (
            g.neg_log_mean(d_real, false, SCORE_EPS),
            g.neg_log_mean(d_fake, true, SCORE_EPS),
        ),
        GanObjective::LeastSquares => (
            g.squared_error_mean(d_real, 1.0),
            g.squared_error_mean(d_fake, 0.0),
        ),
    };
    g.add(r, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn half_scores() {
        let half = PatchMap::filled(30, 30, 0.5);
        let (d, g) = adversarial_loss(&half, &half);
        assert!((d - 2.0 * LN_2).abs() < 1e-12);
        assert!((g - LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_limit() {
        let (d, _) = adversarial_loss(&PatchMap::filled(2, 2, 1.0), &PatchMap::filled(2, 2, 0.0));
        assert!(d < 1e-6);
        assert!(d >= 0.0);
    }

    #[test]
    fn losses_monotone_on_score_grid() {
        let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        let fixed = PatchMap::filled(1, 1, 0.3);
        let d_over_real: Vec<f64> = grid
            .iter()
            .map(|&s| adversarial_loss(&PatchMap::filled(1, 1, s), &fixed).0)
            .collect();
        assert!(d_over_real.windows(2).all(|w| w[1] < w[0]));
        let g_over_fake: Vec<f64> = grid
            .iter()
            .map(|&s| adversarial_loss(&fixed, &PatchMap::filled(1, 1, s)).1)
            .collect();
        assert!(g_over_fake.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn out_of_range_scores_are_clamped() {
        let (d, g) = adversarial_loss(&PatchMap::filled(1, 1, 0.0), &PatchMap::filled(1, 1, 1.0));
        assert!(d.is_finite() && g.is_finite());
        assert!((g + (1.0 - SCORE_EPS).ln()).abs() < 1e-12);
    }

    fn img(v: f32) -> Image {
        Image::filled(4, 5, 3, v)
    }

    #[test]
    fn cycle_fixtures() {
        let x = vec![img(0.2), img(-0.4)];
        let y = vec![img(0.7)];
        assert_eq!(cycle_loss(&x, &x, &y, &y).unwrap(), 0.0);
        let shifted: Vec<Image> = x
            .iter()
            .map(|i| {
                let mut j = i.clone();
                j.data_mut().iter_mut().for_each(|v| *v += 0.1);
                j
            })
            .collect();
        assert!((cycle_loss(&x, &shifted, &y, &y).unwrap() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn cycle_shape_mismatch_is_contract_error() {
        let e = cycle_loss(&[img(0.0)], &[Image::filled(4, 4, 3, 0.0)], &[], &[]).unwrap_err();
        assert!(matches!(e, Error::Contract(_)));
    }

    #[test]
    fn cycle_permutation_invariant() {
        let x = vec![img(0.1), img(0.5), img(-0.3)];
        let xr = vec![img(0.0), img(0.2), img(0.9)];
        let px = vec![x[2].clone(), x[0].clone(), x[1].clone()];
        let pxr = vec![xr[2].clone(), xr[0].clone(), xr[1].clone()];
        let a = cycle_loss(&x, &xr, &[], &[]).unwrap();
        let b = cycle_loss(&px, &pxr, &[], &[]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn total_fixtures() {
        let w = LossWeights::default();
        let p = LossParts {
            adv_a: 1.0,
            adv_b: 1.0,
            cycle: 0.2,
        };
        assert!((total_loss(&p, &w) - 4.0).abs() < 1e-12);
        assert_eq!(total_loss(&p, &LossWeights { lambda_cyc: 0.0 }), 2.0);
        assert_eq!(total_loss(&LossParts::default(), &w), 0.0);
    }

    #[test]
    fn graph_terms_match_host_terms() {
        let real = PatchMap {
            height: 1,
            width: 3,
            scores: vec![0.9, 0.6, 0.2],
        };
        let fake = PatchMap {
            height: 1,
            width: 3,
            scores: vec![0.1, 0.5, 0.7],
        };
        let (d, gl) = adversarial_loss(&real, &fake);
        let mut g = Graph::<f64>::new();
        let r = g.constant(lanegan_tensor::Tensor::from_vec(&[1, 1, 1, 3], real.scores.clone()));
        let f = g.constant(lanegan_tensor::Tensor::from_vec(&[1, 1, 1, 3], fake.scores.clone()));
        let dv = discriminator_adv(&mut g, r, f, GanObjective::Log);
        let gv = generator_adv(&mut g, f, GanObjective::Log);
        assert!((g.value(dv).item() - d).abs() < 1e-12);
        assert!((g.value(gv).item() - gl).abs() < 1e-12);
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(LossWeights { lambda_cyc: -1.0 }.validate().is_err());
    }
}
