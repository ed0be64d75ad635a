use rayon::prelude::*;

use super::denoiser::Denoiser;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::linalg::compensated_sum;
use crate::population::Population;
use crate::rng::{self, tag};
use rand::Rng;

/// One Monte-Carlo draw of the denoising objective.
#[derive(Debug, Clone)]
pub struct LossDraw {
    pub t: usize,
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub x_t: Vec<f64>,
}

/// Monte-Carlo estimate of `E ‖ε − ε̂(x_t, t)‖²` with `t ~ U{1..T}`,
/// `x0 ~ pop`, `ε ~ N(0, I)`.
pub fn dm_loss<D: Denoiser + ?Sized>(
    den: &D,
    pop: &Population,
    sched: &NoiseSchedule,
    n_mc: usize,
    seed: u64,
) -> Result<f64> {
    if den.dimension() != pop.dimension() {
        return Err(Error::DimensionMismatch {
            expected: pop.dimension(),
            actual: den.dimension(),
        });
    }
    dm_loss_with(pop, sched, n_mc, seed, |draw, out| {
        den.predict(&draw.x_t, draw.t, out)
    })
}

/// Same estimator with an arbitrary predictor that may inspect the whole
/// draw. Draw `i` depends only on `(seed, i)`, so two predictors evaluated
/// with the same seed see identical draws.
pub fn dm_loss_with<F>(
    pop: &Population,
    sched: &NoiseSchedule,
    n_mc: usize,
    seed: u64,
    predict: F,
) -> Result<f64>
where
    F: Fn(&LossDraw, &mut [f64]) + Sync,
{
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be at least 1".into()));
    }
    let d = pop.dimension();
    let steps = sched.steps();
    let terms: Vec<f64> = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, tag::DM_LOSS, i as u64);
            let t = r.random_range(1..=steps);
            let mut x0 = vec![0.0; d];
            pop.draw_point(&mut r, &mut x0);
            let mut eps = vec![0.0; d];
            rng::fill_normal(&mut r, &mut eps);
            let ab = sched.alpha_bar(t);
            let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
            let x_t = x0.iter().zip(&eps).map(|(x, e)| s * x + n * e).collect();
            let draw = LossDraw { t, x0, eps, x_t };
            let mut pred = vec![0.0; d];
            predict(&draw, &mut pred);
            draw.eps.iter().zip(&pred).map(|(e, p)| (e - p).powi(2)).sum::<f64>()
        })
        .collect();
    Ok(compensated_sum(terms) / n_mc as f64)
}
