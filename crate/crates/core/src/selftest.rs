//! Quick invariant checks run by `fairdiff selftest`.

use nalgebra::{DMatrix, DVector};

use crate::corrector::make_quotas;
use crate::diffusion::{
    build_schedule, exact_epsilon, forward_diffuse, reverse_step, sample_reverse, sharpen_mixture, ExactDenoiser,
    ScheduleKind, SigmaRule,
};
use crate::error::Result;
use crate::gmm::{em_fit, CovarianceType, EmOptions};
use crate::linalg::log_sum_exp;
use crate::localization::{kl_gaussian, GaussianComponent};
use crate::metrics::{bias_report, frechet_gaussian, MomentSummary};
use crate::population::{build_population, Attribute, ComponentEntry, LabelEntry, Population, PopulationFile};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn gender_pair(weights: [f64; 2], sep: f64) -> Result<Population> {
    build_population(&PopulationFile {
        dimension: 2,
        components: (0..2)
            .map(|g| ComponentEntry {
                mean: vec![(g as f64 - 0.5) * sep, 0.0],
                cov_diag: vec![1.0, 1.0],
                weight: weights[g],
                labels: LabelEntry {
                    age: Some(0),
                    gender: Some(g),
                    race: Some(0),
                },
            })
            .collect(),
    })
}

/// Runs every check; none takes more than a fraction of a second.
pub fn run_checks(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();

    out.push(check("schedule alpha_bar is the running product", || {
        let s = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear, SigmaRule::SqrtBeta)?;
        let mut prod = 1.0;
        let mut worst: f64 = 0.0;
        for t in 1..=1000 {
            prod *= 1.0 - s.beta(t);
            worst = worst.max((prod - s.alpha_bar(t)).abs());
        }
        Ok((worst < 1e-12 && s.sigma(1) == 0.0, format!("max deviation {worst:.2e}")))
    }));

    out.push(check("forward/reverse step spot values", || {
        let s = build_schedule(2, 0.01, 0.01, ScheduleKind::Linear, SigmaRule::SqrtBeta)?;
        let f = forward_diffuse(&[1.0], 2, &s, &[1.0])?[0];
        let r = reverse_step(&[1.0], 2, &[1.0], &s, &[0.0])?[0];
        Ok((close(f, 1.131067, 1e-5) && close(r, 0.933793, 1e-5), format!("forward {f:.6}, reverse {r:.6}")))
    }));

    out.push(check("sharpened weights", || {
        let p = sharpen_mixture(&gender_pair([0.7, 0.3], 6.0)?, 2.0)?;
        let w = p.weights();
        Ok((close(w[0], 0.844828, 1e-6), format!("{w:?}")))
    }));

    out.push(check("exact denoiser matches the single-Gaussian posterior", || {
        let pop = build_population(&PopulationFile {
            dimension: 1,
            components: vec![ComponentEntry {
                mean: vec![2.0],
                cov_diag: vec![0.5],
                weight: 1.0,
                labels: LabelEntry {
                    age: Some(0),
                    gender: Some(0),
                    race: Some(0),
                },
            }],
        })?;
        let s = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear, SigmaRule::SqrtBeta)?;
        let ab = s.alpha_bar(300);
        let x = 0.7;
        let want = (1.0 - ab).sqrt() * (x - ab.sqrt() * 2.0) / (ab * 0.5 + 1.0 - ab);
        let got = exact_epsilon(&pop, &[x], 300, &s)?[0];
        Ok((close(got, want, 1e-10), format!("{got:.9} vs {want:.9}")))
    }));

    out.push(check("EM log-likelihood is non-decreasing", || {
        let mut r = rng::stream(seed, rng::tag::PROBE, 0);
        let mut rows = vec![0.0; 400 * 3];
        rng::fill_normal(&mut r, &mut rows);
        for (i, v) in rows.iter_mut().enumerate() {
            if (i / 3) % 2 == 0 {
                *v += 3.0;
            }
        }
        let data = DMatrix::from_row_slice(400, 3, &rows);
        let opts = EmOptions {
            seed,
            n_restarts: 1,
            ..EmOptions::default()
        };
        let fit = em_fit(&data, 3, CovarianceType::Full, &opts)?;
        let worst = fit
            .loglik_trace
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(f64::NEG_INFINITY, f64::max);
        Ok((worst <= 1e-9, format!("{} iterations, worst drop {worst:.2e}", fit.iterations)))
    }));

    out.push(check("Gaussian KL spot values", || {
        let g = |m: f64, v: f64| GaussianComponent::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, v));
        let a = kl_gaussian(&g(0.0, 1.0)?, &g(1.0, 1.0)?, false)?;
        let b = kl_gaussian(
            &GaussianComponent::new(DVector::zeros(2), DMatrix::identity(2, 2))?,
            &GaussianComponent::new(DVector::zeros(2), DMatrix::identity(2, 2) * 2.0)?,
            false,
        )?;
        Ok((close(a, 0.5, 1e-9) && close(b, 0.193147, 1e-6), format!("{a:.6}, {b:.6}")))
    }));

    out.push(check("Fréchet spot value", || {
        let g = |m: f64, v: f64| MomentSummary {
            mean: DVector::from_element(1, m),
            covariance: DMatrix::from_element(1, 1, v),
            n: 0,
        };
        let f = frechet_gaussian(&g(0.0, 1.0), &g(1.0, 4.0))?;
        Ok((close(f, 2.0, 1e-9), format!("{f:.9}")))
    }));

    out.push(check("quotas", || {
        let ok = make_quotas(1000, 3) == [334, 333, 333] && make_quotas(1, 3) == [1, 0, 0];
        Ok((ok, String::new()))
    }));

    out.push(check("bias deltas sum to zero", || {
        let r = bias_report(Attribute::Race, &[0.5, 0.3, 0.2], &[0.6, 0.3, 0.1], Some(&[0.34, 0.33, 0.33]))?;
        let s: f64 = r.delta_uncorrected.iter().sum();
        let c: f64 = r.delta_corrected.unwrap_or_default().iter().sum();
        Ok((s.abs() < 1e-9 && c.abs() < 1e-9, format!("{s:.2e}, {c:.2e}")))
    }));

    out.push(check("log-sum-exp is stable", || {
        let v = log_sum_exp(&[-1000.0, -1000.0]);
        Ok((close(v, -1000.0 + 2f64.ln(), 1e-12), format!("{v}")))
    }));

    out.push(check("sampling is reproducible across thread counts", || {
        let pop = gender_pair([0.5, 0.5], 4.0)?;
        let s = build_schedule(200, 1e-4, 0.05, ScheduleKind::Linear, SigmaRule::SqrtBeta)?;
        let den = ExactDenoiser::new(&pop, &s)?;
        let a = sample_reverse(&den, &s, 64, seed, &[100])?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(2)
            .build()
            .map_err(|e| crate::Error::Numerical(e.to_string()))?;
        let b = pool.install(|| sample_reverse(&den, &s, 64, seed, &[100]))?;
        Ok((a == b, String::new()))
    }));

    out
}
