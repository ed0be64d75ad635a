mod common;

use common::{gender_pair, sample_moments, single_gaussian};
use fairdiff::diffusion::{
    build_schedule, dm_loss, dm_loss_with, forward_diffuse, reverse_step, sample_reverse, sharpen_mixture, Denoiser,
    ExactDenoiser, NoiseSchedule, ScheduleKind, SigmaRule, ZeroDenoiser,
};
use fairdiff::population::{build_population, Population, Preset, PresetParams};
use fairdiff::rng;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn default_schedule() -> NoiseSchedule {
    build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear, SigmaRule::SqrtBeta).unwrap()
}

/// Forward-diffuses `n` population draws to step `t`.
fn forward_batch(pop: &Population, sched: &NoiseSchedule, t: usize, n: usize, seed: u64) -> DMatrix<f64> {
    let batch = fairdiff::population::sample_population(pop, n, seed).unwrap();
    let d = pop.dimension();
    let mut out = DMatrix::zeros(n, d);
    let mut eps = vec![0.0; d];
    for i in 0..n {
        let mut r = rng::stream(seed, 0x77, i as u64);
        rng::fill_normal(&mut r, &mut eps);
        let x0: Vec<f64> = batch.points.row(i).iter().copied().collect();
        let xt = forward_diffuse(&x0, t, sched, &eps).unwrap();
        for j in 0..d {
            out[(i, j)] = xt[j];
        }
    }
    out
}

#[test]
fn forward_marginal_matches_closed_form() {
    let sched = default_schedule();
    let mean = [1.5, -2.0, 0.0];
    let var = [0.5, 2.0, 1.0];
    let pop = single_gaussian(&mean, &var);
    let t = 350;
    let n = 100_000;
    let x = forward_batch(&pop, &sched, t, n, 3);
    let (m, c) = sample_moments(&x);
    let ab = sched.alpha_bar(t);
    for j in 0..3 {
        let v = ab * var[j] + 1.0 - ab;
        let se = (v / n as f64).sqrt();
        assert!((m[j] - ab.sqrt() * mean[j]).abs() < 4.0 * se, "mean {j}");
        // standard error of a sample variance is about v √(2/n)
        assert!((c[(j, j)] - v).abs() < 5.0 * v * (2.0 / n as f64).sqrt(), "var {j}");
        for k in 0..j {
            assert!(c[(j, k)].abs() < 5.0 / (n as f64).sqrt(), "cov {j},{k}");
        }
    }
}

#[test]
fn large_t_is_isotropic() {
    let sched = default_schedule();
    let pop = Preset::Balanced.build(&PresetParams::default()).unwrap();
    let x = forward_batch(&pop, &sched, 1000, 100_000, 5);
    let (m, c) = sample_moments(&x);
    let d = pop.dimension();
    for a in 0..d {
        assert!(m[a].abs() < 0.05);
        for b in 0..d {
            let want = if a == b { 1.0 } else { 0.0 };
            assert!((c[(a, b)] - want).abs() < 0.05, "cov[{a},{b}] = {}", c[(a, b)]);
        }
    }
}

#[test]
fn reverse_sampling_reproduces_a_gaussian() {
    let sched = default_schedule();
    let mean = [1.0, -0.5, 2.0];
    let pop = single_gaussian(&mean, &[1.0, 1.0, 1.0]);
    let den = ExactDenoiser::new(&pop, &sched).unwrap();
    let n = 5000;
    let batch = sample_reverse(&den, &sched, n, 11, &[350]).unwrap();
    assert_eq!(batch.recorded_latents.len(), 1);
    assert_eq!(batch.recorded_latents[&350].shape(), (n, 3));
    let (m, c) = sample_moments(&batch.points);
    for j in 0..3 {
        assert!((m[j] - mean[j]).abs() < 4.0 * (1.0 / n as f64).sqrt(), "mean {j}: {}", m[j]);
        assert!((c[(j, j)] - 1.0).abs() < 0.1, "var {j}: {}", c[(j, j)]);
    }
}

struct Scaled<D>(D, f64);

impl<D: Denoiser> Denoiser for Scaled<D> {
    fn dimension(&self) -> usize {
        self.0.dimension()
    }
    fn predict(&self, x_t: &[f64], t: usize, out: &mut [f64]) {
        self.0.predict(x_t, t, out);
        out.iter_mut().for_each(|v| *v *= self.1);
    }
}

struct Offset<D>(D, f64);

impl<D: Denoiser> Denoiser for Offset<D> {
    fn dimension(&self) -> usize {
        self.0.dimension()
    }
    fn predict(&self, x_t: &[f64], t: usize, out: &mut [f64]) {
        self.0.predict(x_t, t, out);
        out.iter_mut().for_each(|v| *v += self.1);
    }
}

fn modified(pop: &Population, f: impl Fn(&mut fairdiff::population::ComponentEntry)) -> Population {
    let mut spec = pop.to_file();
    spec.components.iter_mut().for_each(f);
    build_population(&spec).unwrap()
}

#[test]
fn exact_denoiser_minimizes_loss() {
    let sched = default_schedule();
    let pop = gender_pair([0.7, 0.3], 4.0, 4);
    let n_mc = 100_000;
    let exact = ExactDenoiser::new(&pop, &sched).unwrap();
    let base = dm_loss(&exact, &pop, &sched, n_mc, 1).unwrap();

    let shifted = modified(&pop, |c| c.mean.iter_mut().for_each(|m| *m += 0.1));
    let wider = modified(&pop, |c| c.cov_diag.iter_mut().for_each(|v| *v *= 1.2));
    let reweighted = sharpen_mixture(&pop, 2.0).unwrap();
    let perturbed: Vec<(&str, Box<dyn Denoiser>)> = vec![
        ("mean shift", Box::new(ExactDenoiser::new(&shifted, &sched).unwrap())),
        ("wider covariance", Box::new(ExactDenoiser::new(&wider, &sched).unwrap())),
        ("sharpened weights", Box::new(ExactDenoiser::new(&reweighted, &sched).unwrap())),
        ("scaled output", Box::new(Scaled(exact.clone(), 0.95))),
        ("offset output", Box::new(Offset(exact.clone(), 0.02))),
    ];
    for (name, den) in &perturbed {
        let loss = dm_loss(den.as_ref(), &pop, &sched, n_mc, 1).unwrap();
        assert!(loss > base, "{name}: {loss} vs exact {base}");
    }

    let cheat = dm_loss_with(&pop, &sched, n_mc, 1, |draw, out| out.copy_from_slice(&draw.eps)).unwrap();
    assert_eq!(cheat, 0.0);
    let pop8 = Preset::Balanced.build(&PresetParams::default()).unwrap();
    let zero = dm_loss(&ZeroDenoiser { dimension: 8 }, &pop8, &sched, n_mc, 2).unwrap();
    assert!((zero - 8.0).abs() < 0.03 * 8.0, "{zero}");
    assert!(dm_loss(&ZeroDenoiser { dimension: 3 }, &pop8, &sched, 10, 0).is_err());
}

#[test]
fn sampling_deterministic_across_seeds_and_runs() {
    let sched = build_schedule(100, 1e-3, 0.1, ScheduleKind::Linear, SigmaRule::TildeBeta).unwrap();
    let pop = gender_pair([0.5, 0.5], 6.0, 2);
    let den = ExactDenoiser::new(&pop, &sched).unwrap();
    let a = sample_reverse(&den, &sched, 100, 9, &[]).unwrap();
    let b = sample_reverse(&den, &sched, 100, 9, &[]).unwrap();
    let c = sample_reverse(&den, &sched, 100, 10, &[]).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.points, c.points);
    // the first trajectories do not depend on the batch size
    let small = sample_reverse(&den, &sched, 10, 9, &[]).unwrap();
    assert_eq!(small.points, a.points.rows(0, 10).into_owned());
}

proptest! {
    #[test]
    fn first_step_inverts_forward(x0 in prop::collection::vec(-10.0f64..10.0, 1..6), seed in 0u64..1000) {
        let sched = default_schedule();
        let mut eps = vec![0.0; x0.len()];
        rng::fill_normal(&mut rng::stream(seed, 1, 0), &mut eps);
        let x1 = forward_diffuse(&x0, 1, &sched, &eps).unwrap();
        let back = reverse_step(&x1, 1, &eps, &sched, &vec![0.0; x0.len()]).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_prediction_rescales(x in prop::collection::vec(-10.0f64..10.0, 1..6), t in 1usize..=1000) {
        let sched = default_schedule();
        let zeros = vec![0.0; x.len()];
        let out = reverse_step(&x, t, &zeros, &sched, &zeros).unwrap();
        for (o, v) in out.iter().zip(&x) {
            prop_assert!((o - v / sched.alpha(t).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn sharpening_keeps_geometry(w in 0.05f64..0.95, gamma in 1.0f64..6.0) {
        let pop = gender_pair([w, 1.0 - w], 3.0, 2);
        let s = sharpen_mixture(&pop, gamma).unwrap();
        let ws = s.weights();
        prop_assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let want = w.powf(gamma) / (w.powf(gamma) + (1.0 - w).powf(gamma));
        prop_assert!((ws[0] - want).abs() < 1e-12);
        for (a, b) in s.components().iter().zip(pop.components()) {
            prop_assert_eq!(&a.mean, &b.mean);
            prop_assert_eq!(&a.cov_diag, &b.cov_diag);
            prop_assert_eq!(a.labels, b.labels);
        }
        let uniform = sharpen_mixture(&gender_pair([0.5, 0.5], 3.0, 2), gamma).unwrap();
        prop_assert!(uniform.weights().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }
}
