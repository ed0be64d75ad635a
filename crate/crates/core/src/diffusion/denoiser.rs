use std::hash::{Hash, Hasher};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::linalg::LN_2PI;
use crate::population::Population;

/// A noise predictor `ε̂(x_t, t)`.
pub trait Denoiser: Sync {
    fn dimension(&self) -> usize;

    /// Writes `ε̂(x_t, t)` into `out`; `t` is a valid step of the schedule
    /// the caller samples with.
    fn predict(&self, x_t: &[f64], t: usize, out: &mut [f64]);
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }

    fn predict(&self, x_t: &[f64], t: usize, out: &mut [f64]) {
        (**self).predict(x_t, t, out)
    }
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ZeroDenoiser {
    pub dimension: usize,
}

impl Denoiser for ZeroDenoiser {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn predict(&self, _x_t: &[f64], _t: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Precomputed noised-marginal parameters of every positive-weight
/// component at one step.
#[derive(Debug, Clone)]
struct StepTable {
    sqrt_ab: f64,
    inv_noise: f64,
    log_const: Vec<f64>,
    shifted_mean: Vec<f64>,
    inv_var: Vec<f64>,
    gain: Vec<f64>,
    mean: Vec<f64>,
}

impl StepTable {
    fn new(pop: &Population, alpha_bar: f64) -> StepTable {
        let d = pop.dimension();
        let sqrt_ab = alpha_bar.sqrt();
        let noise = 1.0 - alpha_bar;
        let mut t = StepTable {
            sqrt_ab,
            inv_noise: 1.0 / noise.sqrt(),
            log_const: Vec::new(),
            shifted_mean: Vec::new(),
            inv_var: Vec::new(),
            gain: Vec::new(),
            mean: Vec::new(),
        };
        for c in pop.components().iter().filter(|c| c.weight > 0.0) {
            let mut lc = c.weight.ln();
            for j in 0..d {
                // marginal of x_t under this component: N(√ᾱ m, ᾱ c + (1 − ᾱ))
                let var = alpha_bar * c.cov_diag[j] + noise;
                lc -= 0.5 * (LN_2PI + var.ln());
                t.shifted_mean.push(sqrt_ab * c.mean[j]);
                t.inv_var.push(1.0 / var);
                t.gain.push(sqrt_ab * c.cov_diag[j] / var);
                t.mean.push(c.mean[j]);
            }
            t.log_const.push(lc);
        }
        t
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let k = self.log_const.len();
        let mut stack = [0.0f64; 64];
        let mut heap;
        let logp: &mut [f64] = if k <= stack.len() {
            &mut stack[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        let mut max = f64::NEG_INFINITY;
        for (c, lp) in logp.iter_mut().enumerate() {
            let base = c * d;
            let mut q = 0.0;
            let means = &self.shifted_mean[base..base + d];
            let inv = &self.inv_var[base..base + d];
            for ((xj, m), iv) in x.iter().zip(means).zip(inv) {
                let r = xj - m;
                q += r * r * iv;
            }
            *lp = self.log_const[c] - 0.5 * q;
            max = max.max(*lp);
        }
        let mut total = 0.0;
        for lp in logp.iter_mut() {
            *lp = (*lp - max).exp();
            total += *lp;
        }
        // out <- E[x0 | x_t]
        out.fill(0.0);
        for (c, w) in logp.iter().enumerate() {
            let r = w / total;
            if r == 0.0 {
                continue;
            }
            let base = c * d;
            for j in 0..d {
                let post = self.mean[base + j]
                    + self.gain[base + j] * (x[j] - self.shifted_mean[base + j]);
                out[j] += r * post;
            }
        }
        for j in 0..d {
            out[j] = (x[j] - self.sqrt_ab * out[j]) * self.inv_noise;
        }
    }
}

/// The posterior-mean noise predictor `E[ε | x_t]` of a known population,
/// precomputed for every step of a schedule.
#[derive(Debug, Clone)]
pub struct ExactDenoiser {
    population: Population,
    tables: Vec<StepTable>,
}

impl ExactDenoiser {
    pub fn new(population: &Population, sched: &NoiseSchedule) -> Result<ExactDenoiser> {
        let tables = (1..=sched.steps())
            .map(|t| {
                let ab = sched.alpha_bar(t);
                if ab >= 1.0 {
                    return Err(Error::Numerical(format!("alpha_bar at step {t} is 1")));
                }
                Ok(StepTable::new(population, ab))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExactDenoiser {
            population: population.clone(),
            tables,
        })
    }

    pub fn population(&self) -> &Population {
        &self.population
    }

    /// Hash of the defining parameters; two denoisers with equal
    /// fingerprints compute identical predictions.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.population.dimension().hash(&mut h);
        self.tables.len().hash(&mut h);
        for c in self.population.components() {
            c.weight.to_bits().hash(&mut h);
            for v in c.mean.iter().chain(&c.cov_diag) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

impl Denoiser for ExactDenoiser {
    fn dimension(&self) -> usize {
        self.population.dimension()
    }

    fn predict(&self, x_t: &[f64], t: usize, out: &mut [f64]) {
        self.tables[t - 1].eval(x_t, out);
    }
}

/// Closed-form `E[ε | x_t]` under the forward process started from `pop`.
pub fn exact_epsilon(pop: &Population, x_t: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if x_t.len() != pop.dimension() {
        return Err(Error::DimensionMismatch {
            expected: pop.dimension(),
            actual: x_t.len(),
        });
    }
    let ab = sched.alpha_bar(t);
    if ab >= 1.0 {
        return Err(Error::Numerical(format!("alpha_bar at step {t} is 1")));
    }
    let mut out = vec![0.0; x_t.len()];
    StepTable::new(pop, ab).eval(x_t, &mut out);
    Ok(out)
}

/// Exponent-sharpens the mixture weights, `w'_k ∝ w_k^γ`; geometry and
/// labels are untouched.
pub fn sharpen_mixture(pop: &Population, gamma: f64) -> Result<Population> {
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma must be >= 1, got {gamma}")));
    }
    if gamma == 1.0 {
        return Ok(pop.clone());
    }
    let logs: Vec<f64> = pop
        .weights()
        .iter()
        .map(|w| if *w > 0.0 { gamma * w.ln() } else { f64::NEG_INFINITY })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|r| r / total).collect();
    Ok(pop.with_weights(&weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, ScheduleKind, SigmaRule};
    use crate::population::{build_population, ComponentEntry, LabelEntry, PopulationFile};

    fn pop(means: &[Vec<f64>], weights: &[f64], cov: f64) -> Population {
        build_population(&PopulationFile {
            dimension: means[0].len(),
            components: means
                .iter()
                .zip(weights)
                .enumerate()
                .map(|(k, (m, w))| ComponentEntry {
                    mean: m.clone(),
                    cov_diag: vec![cov; m.len()],
                    weight: *w,
                    labels: LabelEntry {
                        age: Some(0),
                        gender: Some(k % 2),
                        race: Some(0),
                    },
                })
                .collect(),
        })
        .unwrap()
    }

    fn sched() -> NoiseSchedule {
        build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear, SigmaRule::SqrtBeta).unwrap()
    }

    /// E[ε | x_t] for a 1-d single N(m, 1) component by trapezoid quadrature
    /// over x0: ε = (x_t − √ᾱ x0)/√(1−ᾱ), weight p(x0) p(x_t | x0).
    fn quadrature_eps(m: f64, xt: f64, ab: f64) -> f64 {
        let (lo, hi, n) = (m - 12.0, m + 12.0, 200_000);
        let h = (hi - lo) / n as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..=n {
            let x0 = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let prior = (-0.5 * (x0 - m).powi(2)).exp();
            let r = xt - ab.sqrt() * x0;
            let lik = (-0.5 * r * r / (1.0 - ab)).exp();
            let p = w * prior * lik;
            num += p * r / (1.0 - ab).sqrt();
            den += p;
        }
        num / den
    }

    #[test]
    fn standard_normal_matches_closed_form_and_quadrature() {
        let s = sched();
        let p = pop(&[vec![0.0]], &[1.0], 1.0);
        for (t, x) in [(10, 0.3), (350, -1.7), (900, 2.5)] {
            let ab = s.alpha_bar(t);
            let e = exact_epsilon(&p, &[x], t, &s).unwrap()[0];
            assert!((e - (1.0 - ab).sqrt() * x).abs() < 1e-12);
            assert!((e - quadrature_eps(0.0, x, ab)).abs() < 1e-6);
        }
    }

    #[test]
    fn shifted_normal_matches_closed_form_and_quadrature() {
        let s = sched();
        let m = 1.5;
        let p = pop(&[vec![m]], &[1.0], 1.0);
        for (t, x) in [(5, 1.0), (350, 0.2), (1000, -0.4)] {
            let ab = s.alpha_bar(t);
            let e = exact_epsilon(&p, &[x], t, &s).unwrap()[0];
            let closed = (1.0 - ab).sqrt() * (x - ab.sqrt() * m);
            assert!((e - closed).abs() < 1e-12);
            assert!((e - quadrature_eps(m, x, ab)).abs() < 1e-6);
        }
    }

    #[test]
    fn separated_components_saturate() {
        let s = sched();
        let m0 = vec![-20.0, 0.0];
        let m1 = vec![20.0, 3.0];
        let p = pop(&[m0.clone(), m1.clone()], &[0.5, 0.5], 1.0);
        let t = 200;
        let ab = s.alpha_bar(t);
        let x: Vec<f64> = m1.iter().map(|v| ab.sqrt() * v + 0.3).collect();
        let e = exact_epsilon(&p, &x, t, &s).unwrap();
        for j in 0..2 {
            let single = (1.0 - ab).sqrt() * (x[j] - ab.sqrt() * m1[j]);
            assert!((e[j] - single).abs() < 1e-6);
        }
        let far = exact_epsilon(&p, &[1e6, -1e6], t, &s).unwrap();
        assert!(far.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn table_denoiser_agrees_with_direct_formula() {
        let s = sched();
        let p = pop(&[vec![1.0, -2.0], vec![-3.0, 0.5]], &[0.3, 0.7], 0.5);
        let den = ExactDenoiser::new(&p, &s).unwrap();
        let mut out = [0.0; 2];
        for t in [1, 17, 350, 999] {
            den.predict(&[0.4, -0.1], t, &mut out);
            let direct = exact_epsilon(&p, &[0.4, -0.1], t, &s).unwrap();
            assert_eq!(out.to_vec(), direct);
        }
        assert!(exact_epsilon(&p, &[0.0, 0.0], 0, &s).is_err());
    }

    #[test]
    fn sharpening() {
        let p = pop(&[vec![0.0], vec![5.0]], &[0.7, 0.3], 1.0);
        assert_eq!(sharpen_mixture(&p, 1.0).unwrap(), p);
        let w = sharpen_mixture(&p, 2.0).unwrap().weights();
        assert!((w[0] - 0.49 / 0.58).abs() < 1e-12 && (w[1] - 0.09 / 0.58).abs() < 1e-12);
        assert!((w[0] - 0.844828).abs() < 1e-6);
        let u = pop(&[vec![0.0], vec![5.0], vec![9.0]], &[1.0 / 3.0; 3], 1.0);
        for v in sharpen_mixture(&u, 3.7).unwrap().weights() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(sharpen_mixture(&p, 0.5).is_err());
    }
}
