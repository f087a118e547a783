//! Embedding-space forward noising, the multi-level reverse posterior with
//! skipping coefficients, and training-loss assembly.
//!
//! The reverse posterior between two token-level timesteps `prev > next` is
//! Gaussian with mean `lam * z_prev + mu * z0_hat` and variance `sigma`;
//! the coefficients satisfy `lam * sqrt(abar_prev) + mu = sqrt(abar_next)`,
//! so a noise-free latent on the forward marginal stays on it.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, TimestepPlan};

/// Per-position continuous latents with their token-level timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    /// (target_len, embed_dim) latent matrix.
    pub latents: Array2<f64>,
    /// Token-level timestep of each position.
    pub token_steps: Vec<usize>,
    /// Sentence-level timestep that produced `token_steps`.
    pub sentence_t: f64,
}

impl LatentSequence {
    pub fn target_len(&self) -> usize {
        self.latents.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.latents.ncols()
    }
}

/// Coefficients of the Gaussian reverse transition for one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    pub lam: f64,
    pub mu: f64,
    pub sigma: f64,
}

/// One sampled training batch: padded id sequences, per-example
/// sentence-level timesteps, and the standard-normal noise used for the
/// forward reparameterization.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub src_ids: Vec<Vec<usize>>,
    pub tgt_ids: Vec<Vec<usize>>,
    pub sentence_t: Vec<usize>,
    pub noise: Vec<Array2<f64>>,
}

fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Embed target ids into the latent space: `z_0 = Emb(y) + sqrt(1 - alpha0) * eps`.
pub fn embed_step(
    tgt_ids: &[usize],
    embedding: ArrayView2<f64>,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<LatentSequence> {
    let vocab = embedding.nrows();
    if let Some(&bad) = tgt_ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::Data(format!(
            "token id {bad} outside vocabulary of size {vocab}"
        )));
    }
    let dim = embedding.ncols();
    let std = (1.0 - schedule.alpha0()).sqrt();
    let mut latents = Array2::<f64>::zeros((tgt_ids.len(), dim));
    for (n, &id) in tgt_ids.iter().enumerate() {
        for c in 0..dim {
            let eps: f64 = rng.sample(StandardNormal);
            latents[[n, c]] = embedding[[id, c]] + std * eps;
        }
    }
    Ok(LatentSequence {
        latents,
        token_steps: vec![0; tgt_ids.len()],
        sentence_t: 0.0,
    })
}

/// Forward-noise `z_0` to the sentence-level timestep `sentence_t`, drawing
/// the per-position noise from `rng`.
pub fn forward_noise(
    z0: &LatentSequence,
    plan: &TimestepPlan,
    sentence_t: f64,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<LatentSequence> {
    let eps = standard_normal(rng, z0.target_len(), z0.embed_dim());
    forward_noise_with_eps(z0, plan, sentence_t, schedule, &eps)
}

/// Forward-noise with caller-provided standard-normal noise:
/// `z[n] = sqrt(abar_f(n)) * z0[n] + sqrt(1 - abar_f(n)) * eps[n]`.
pub fn forward_noise_with_eps(
    z0: &LatentSequence,
    plan: &TimestepPlan,
    sentence_t: f64,
    schedule: &NoiseSchedule,
    eps: &Array2<f64>,
) -> Result<LatentSequence> {
    if plan.target_len() != z0.target_len() {
        return Err(Error::Shape(format!(
            "plan length {} vs latent length {}",
            plan.target_len(),
            z0.target_len()
        )));
    }
    if eps.dim() != z0.latents.dim() {
        return Err(Error::Shape("noise shape mismatch".into()));
    }
    let token_steps = plan.token_steps(sentence_t)?;
    let mut latents = Array2::<f64>::zeros(z0.latents.dim());
    for (n, &step) in token_steps.iter().enumerate() {
        let abar = schedule.alpha_bar(step);
        let (signal, noise) = (abar.sqrt(), (1.0 - abar).sqrt());
        for c in 0..z0.embed_dim() {
            latents[[n, c]] = signal * z0.latents[[n, c]] + noise * eps[[n, c]];
        }
    }
    Ok(LatentSequence {
        latents,
        token_steps,
        sentence_t,
    })
}

/// Reverse-transition coefficients between token-level timesteps
/// `step_prev >= step_next`.
pub fn posterior_coeffs(
    schedule: &NoiseSchedule,
    step_prev: usize,
    step_next: usize,
) -> Result<PosteriorCoeffs> {
    if step_next > step_prev {
        return Err(Error::InvalidArgument(format!(
            "posterior requires step_next <= step_prev, got {step_next} > {step_prev}"
        )));
    }
    if step_prev > schedule.total_steps() {
        return Err(Error::InvalidArgument(format!(
            "step {step_prev} beyond schedule length {}",
            schedule.total_steps()
        )));
    }
    if step_prev == step_next {
        return Ok(PosteriorCoeffs {
            lam: 1.0,
            mu: 0.0,
            sigma: 0.0,
        });
    }
    let abar_prev = schedule.alpha_bar(step_prev);
    let abar_next = schedule.alpha_bar(step_next);
    let ratio = abar_prev / abar_next;
    let denom = 1.0 - abar_prev;
    let lam = ratio.sqrt() * (1.0 - abar_next) / denom;
    let mu = abar_next.sqrt() * (1.0 - ratio) / denom;
    let sigma = (1.0 - ratio) * (1.0 - abar_next) / denom;
    Ok(PosteriorCoeffs { lam, mu, sigma })
}

/// One reverse sampling step from sentence-level `t_i` down to `t_next`,
/// applied independently per position. Positions whose destination
/// token-level timestep is 0 receive the mean without noise.
pub fn reverse_step(
    z_prev: &LatentSequence,
    z0_hat: &Array2<f64>,
    plan: &TimestepPlan,
    schedule: &NoiseSchedule,
    t_i: f64,
    t_next: f64,
    rng: &mut impl Rng,
) -> Result<LatentSequence> {
    if t_next >= t_i {
        return Err(Error::InvalidArgument(format!(
            "reverse step requires t_next < t_i, got {t_next} >= {t_i}"
        )));
    }
    if z0_hat.dim() != z_prev.latents.dim() {
        return Err(Error::Shape("z0_hat shape mismatch".into()));
    }
    let steps_prev = plan.token_steps(t_i)?;
    if steps_prev != z_prev.token_steps {
        return Err(Error::InvalidArgument(
            "z_prev token steps inconsistent with plan at t_i".into(),
        ));
    }
    let steps_next = plan.token_steps(t_next)?;
    let mut latents = Array2::<f64>::zeros(z_prev.latents.dim());
    for n in 0..z_prev.target_len() {
        let coeffs = posterior_coeffs(schedule, steps_prev[n], steps_next[n])?;
        let noisy = steps_next[n] > 0 && coeffs.sigma > 0.0;
        let std = if noisy { coeffs.sigma.sqrt() } else { 0.0 };
        for c in 0..z_prev.embed_dim() {
            let mean = coeffs.lam * z_prev.latents[[n, c]] + coeffs.mu * z0_hat[[n, c]];
            latents[[n, c]] = if noisy {
                let eps: f64 = rng.sample(StandardNormal);
                mean + std * eps
            } else {
                mean
            };
        }
    }
    Ok(LatentSequence {
        latents,
        token_steps: steps_next,
        sentence_t: t_next,
    })
}

/// Loss components, each averaged per token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub nll: f64,
}

/// Training loss over one sequence: per-token-averaged squared latent error
/// plus per-token-averaged rounding NLL. `mask[n] = false` drops position `n`
/// from both terms.
pub fn training_loss_masked(
    z0_hat: ArrayView2<f64>,
    z0: ArrayView2<f64>,
    logits: ArrayView2<f64>,
    tgt_ids: &[usize],
    mask: &[bool],
) -> Result<LossBreakdown> {
    let n = z0_hat.nrows();
    if z0.nrows() != n || logits.nrows() != n || tgt_ids.len() != n || mask.len() != n {
        return Err(Error::Shape("training_loss inputs disagree on length".into()));
    }
    if z0_hat.ncols() != z0.ncols() {
        return Err(Error::Shape("latent dims disagree".into()));
    }
    let any_bad = z0_hat.iter().chain(z0.iter()).chain(logits.iter());
    for &v in any_bad {
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite value in loss inputs".into()));
        }
    }
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(Error::InvalidArgument("loss mask is all false".into()));
    }
    let mut mse = 0.0;
    let mut nll = 0.0;
    for r in 0..n {
        if !mask[r] {
            continue;
        }
        for c in 0..z0_hat.ncols() {
            let d = z0_hat[[r, c]] - z0[[r, c]];
            mse += d * d;
        }
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
        nll -= row[tgt_ids[r]] - lse;
    }
    mse /= active as f64;
    nll /= active as f64;
    Ok(LossBreakdown {
        total: mse + nll,
        mse,
        nll,
    })
}

/// [`training_loss_masked`] over all positions.
pub fn training_loss(
    z0_hat: ArrayView2<f64>,
    z0: ArrayView2<f64>,
    logits: ArrayView2<f64>,
    tgt_ids: &[usize],
) -> Result<LossBreakdown> {
    training_loss_masked(z0_hat, z0, logits, tgt_ids, &vec![true; tgt_ids.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_schedule() -> NoiseSchedule {
        NoiseSchedule::sqrt(10, 1e-4).unwrap()
    }

    #[test]
    fn embed_step_zero_variance_limit() {
        // alpha0 -> 1 makes z_0 = Emb(y) exactly.
        let schedule =
            NoiseSchedule::from_alpha_bar(vec![1.0 - 1e-15, 0.5, 0.25]).unwrap();
        assert!(schedule.alpha0() > 0.49); // alpha[1] = 0.5 / (1 - eps)
        let near_one = NoiseSchedule::from_alpha_bar(vec![1.0 - 1e-15, 1.0 - 2e-15, 0.5]);
        // Construct a schedule whose alpha0 is essentially 1.
        let s = near_one.unwrap();
        let emb = array![[1.5, -2.0], [0.0, 3.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z0 = embed_step(&[1, 0], emb.view(), &s, &mut rng).unwrap();
        assert!((z0.latents[[0, 0]] - 0.0).abs() < 1e-6);
        assert!((z0.latents[[0, 1]] - 3.0).abs() < 1e-6);
        assert!((z0.latents[[1, 0]] - 1.5).abs() < 1e-6);
        assert_eq!(z0.token_steps, vec![0, 0]);
    }

    #[test]
    fn embed_step_scales_seeded_noise() {
        // With Emb(y) = 0 and 1 - alpha0 = 0.04, z_0 = 0.2 * eps for the
        // seeded eps.
        let schedule = NoiseSchedule::from_alpha_bar(vec![1.0 - 1e-12, 0.96, 0.5]).unwrap();
        assert!((schedule.alpha0() - 0.96).abs() < 1e-9);
        let emb = Array2::<f64>::zeros((3, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let z0 = embed_step(&[0, 1], emb.view(), &schedule, &mut rng).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(42);
        let mut eps = Vec::new();
        for _ in 0..4 {
            eps.push(rng2.sample::<f64, _>(StandardNormal));
        }
        let scale = (1.0f64 - schedule.alpha0()).sqrt();
        assert!((scale - 0.2).abs() < 1e-9);
        assert!((z0.latents[[0, 0]] - scale * eps[0]).abs() < 1e-12);
        assert!((z0.latents[[0, 1]] - scale * eps[1]).abs() < 1e-12);
        assert!((z0.latents[[1, 0]] - scale * eps[2]).abs() < 1e-12);
    }

    #[test]
    fn embed_step_variance_monte_carlo() {
        // Empirical variance of any entry approaches 1 - alpha0 (3% at 1e5).
        let schedule = small_schedule();
        let emb = Array2::<f64>::zeros((2, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let expected = 1.0 - schedule.alpha0();
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let z = embed_step(&[1], emb.view(), &schedule, &mut rng).unwrap();
            let v = z.latents[[0, 0]];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(
            (var - expected).abs() / expected < 0.03,
            "var {var} vs {expected}"
        );
    }

    #[test]
    fn embed_step_rejects_oov() {
        let schedule = small_schedule();
        let emb = Array2::<f64>::zeros((3, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(embed_step(&[3], emb.view(), &schedule, &mut rng).is_err());
    }

    #[test]
    fn forward_noise_hand_example() {
        // abar = 0.25, z0 = (1, -1), eps = (0.5, 0.5)
        // z = 0.5 * z0 + sqrt(0.75) * eps = (0.93301, -0.06699)
        let schedule = NoiseSchedule::from_alpha_bar(vec![0.9, 0.25]).unwrap();
        let plan = TimestepPlan::uniform(1, 1).unwrap();
        let z0 = LatentSequence {
            latents: array![[1.0, -1.0]],
            token_steps: vec![0],
            sentence_t: 0.0,
        };
        let eps = array![[0.5, 0.5]];
        let z = forward_noise_with_eps(&z0, &plan, 1.0, &schedule, &eps).unwrap();
        assert!((z.latents[[0, 0]] - 0.9330127018922193).abs() < 1e-12);
        assert!((z.latents[[0, 1]] - -0.0669872981077807).abs() < 1e-12);
        assert_eq!(z.token_steps, vec![1]);
    }

    #[test]
    fn forward_noise_boundary_t0() {
        let schedule = NoiseSchedule::sqrt(100, 1e-4).unwrap();
        let plan = TimestepPlan::default_anchored(4, 100).unwrap();
        let z0 = LatentSequence {
            latents: Array2::from_elem((4, 3), 2.0),
            token_steps: vec![0; 4],
            sentence_t: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = forward_noise(&z0, &plan, 0.0, &schedule, &mut rng).unwrap();
        assert_eq!(z.token_steps, vec![0; 4]);
        // abar_0 = 0.99: signal keeps ~99.5% of z0 and noise std is 0.1.
        for v in z.latents.iter() {
            assert!((v - 2.0).abs() < 0.5);
        }
    }

    #[test]
    fn forward_noise_marginal_monte_carlo() {
        // Mean and variance match the marginal within 3 standard errors.
        let schedule = small_schedule();
        let plan = TimestepPlan::default_anchored(2, 10).unwrap();
        let t = 7.0;
        let steps = plan.token_steps(t).unwrap();
        let z0 = LatentSequence {
            latents: array![[1.0], [-0.5]],
            token_steps: vec![0, 0],
            sentence_t: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000usize;
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for _ in 0..n {
            let z = forward_noise(&z0, &plan, t, &schedule, &mut rng).unwrap();
            for p in 0..2 {
                sums[p] += z.latents[[p, 0]];
                sq[p] += z.latents[[p, 0]] * z.latents[[p, 0]];
            }
        }
        for p in 0..2 {
            let abar = schedule.alpha_bar(steps[p]);
            let exp_mean = abar.sqrt() * z0.latents[[p, 0]];
            let exp_var = 1.0 - abar;
            let mean = sums[p] / n as f64;
            let var = sq[p] / n as f64 - mean * mean;
            let se_mean = exp_var.sqrt() / (n as f64).sqrt();
            let se_var = exp_var * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!(
                (mean - exp_mean).abs() < 3.0 * se_mean,
                "pos {p}: mean {mean} vs {exp_mean}"
            );
            assert!(
                (var - exp_var).abs() < 3.0 * se_var,
                "pos {p}: var {var} vs {exp_var}"
            );
        }
    }

    #[test]
    fn posterior_identity_and_example() {
        let schedule = small_schedule();
        let c = posterior_coeffs(&schedule, 4, 4).unwrap();
        assert_eq!(c, PosteriorCoeffs { lam: 1.0, mu: 0.0, sigma: 0.0 });
        let c0 = posterior_coeffs(&schedule, 0, 0).unwrap();
        assert_eq!(c0.lam, 1.0);

        // abar_prev = 0.25, abar_next = 0.81.
        let s = NoiseSchedule::from_alpha_bar(vec![0.9, 0.81, 0.25]).unwrap();
        let c = posterior_coeffs(&s, 2, 1).unwrap();
        assert!((c.lam - 0.14074074074074).abs() < 1e-10);
        assert!((c.mu - 0.82962962962963).abs() < 1e-10);
        assert!((c.sigma - 0.17514403292181).abs() < 1e-10);
        assert!((c.lam * 0.5 + c.mu - 0.9).abs() < 1e-12);
        assert!(posterior_coeffs(&s, 1, 2).is_err());
    }

    #[test]
    fn posterior_matches_classic_single_step() {
        // For step_next = step_prev - 1 the coefficients reduce to the
        // standard one-step posterior with alpha = abar_prev / abar_next.
        let schedule = small_schedule();
        for prev in 1..=10usize {
            let next = prev - 1;
            let c = posterior_coeffs(&schedule, prev, next).unwrap();
            let alpha = schedule.alpha(prev);
            let abar_prev = schedule.alpha_bar(prev);
            let abar_next = schedule.alpha_bar(next);
            let beta = 1.0 - alpha;
            let lam = alpha.sqrt() * (1.0 - abar_next) / (1.0 - abar_prev);
            let mu = abar_next.sqrt() * beta / (1.0 - abar_prev);
            let sigma = beta * (1.0 - abar_next) / (1.0 - abar_prev);
            assert!((c.lam - lam).abs() < 1e-10, "prev {prev}");
            assert!((c.mu - mu).abs() < 1e-10);
            assert!((c.sigma - sigma).abs() < 1e-10);
        }
    }

    #[test]
    fn posterior_coefficient_identity_all_pairs() {
        let schedule = small_schedule();
        for prev in 0..=10usize {
            for next in 0..=prev {
                let c = posterior_coeffs(&schedule, prev, next).unwrap();
                let lhs = c.lam * schedule.alpha_bar(prev).sqrt() + c.mu;
                let rhs = schedule.alpha_bar(next).sqrt();
                assert!((lhs - rhs).abs() < 1e-10, "({prev}, {next})");
                assert!(c.sigma >= 0.0);
                assert!(c.sigma <= 1.0 - schedule.alpha_bar(next) + 1e-12);
            }
        }
    }

    #[test]
    fn reverse_step_identity_when_steps_equal() {
        // A plan region where consecutive sentence steps leave some token
        // steps unchanged keeps those latents bit-identical; here we use
        // equal coefficients across a no-op region by comparing directly.
        let schedule = small_schedule();
        let plan = TimestepPlan::default_anchored(3, 10).unwrap();
        let t_i = 13.0;
        let steps = plan.token_steps(t_i).unwrap();
        let z_prev = LatentSequence {
            latents: Array2::from_shape_fn((3, 2), |(r, c)| (r + c) as f64 * 0.3 - 0.5),
            token_steps: steps,
            sentence_t: t_i,
        };
        let z0_hat = Array2::from_elem((3, 2), 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z_next = reverse_step(&z_prev, &z0_hat, &plan, &schedule, t_i, 12.0, &mut rng).unwrap();
        let steps_next = plan.token_steps(12.0).unwrap();
        for n in 0..3 {
            if z_prev.token_steps[n] == steps_next[n] {
                for c in 0..2 {
                    assert_eq!(z_prev.latents[[n, c]], z_next.latents[[n, c]]);
                }
            }
        }
    }

    #[test]
    fn reverse_step_noise_free_consistency() {
        // If z_prev sits exactly on the noise-free forward marginal of
        // z0_hat, the posterior mean moves it to the next marginal.
        let schedule = small_schedule();
        let plan = TimestepPlan::default_anchored(2, 10).unwrap();
        let t_i = 9.0;
        let t_next = 2.0;
        let steps_prev = plan.token_steps(t_i).unwrap();
        let steps_next = plan.token_steps(t_next).unwrap();
        let z0_hat = array![[0.8, -0.2], [0.4, 1.1]];
        let mut latents = Array2::<f64>::zeros((2, 2));
        for n in 0..2 {
            let s = schedule.alpha_bar(steps_prev[n]).sqrt();
            for c in 0..2 {
                latents[[n, c]] = s * z0_hat[[n, c]];
            }
        }
        let z_prev = LatentSequence {
            latents,
            token_steps: steps_prev,
            sentence_t: t_i,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut z_next =
            reverse_step(&z_prev, &z0_hat, &plan, &schedule, t_i, t_next, &mut rng).unwrap();
        // Remove the stochastic part by re-running with sigma suppressed:
        // instead verify the mean analytically.
        for n in 0..2 {
            let c = posterior_coeffs(&schedule, z_prev.token_steps[n], steps_next[n]).unwrap();
            let target = schedule.alpha_bar(steps_next[n]).sqrt();
            for col in 0..2 {
                let mean = c.lam * z_prev.latents[[n, col]] + c.mu * z0_hat[[n, col]];
                assert!((mean - target * z0_hat[[n, col]]).abs() < 1e-10);
            }
        }
        // Destination step 0 positions must be exactly the mean (no noise).
        let t_last = 1.0;
        z_next.sentence_t = t_next;
        let steps_last = plan.token_steps(t_last).unwrap();
        let z_fin =
            reverse_step(&z_next, &z0_hat, &plan, &schedule, t_next, t_last, &mut rng).unwrap();
        for n in 0..2 {
            if steps_last[n] == 0 {
                let c = posterior_coeffs(&schedule, steps_next[n], 0).unwrap();
                for col in 0..2 {
                    let mean = c.lam * z_next.latents[[n, col]] + c.mu * z0_hat[[n, col]];
                    assert_eq!(z_fin.latents[[n, col]], mean);
                }
            }
        }
    }

    #[test]
    fn reverse_step_rejects_bad_ordering() {
        let schedule = small_schedule();
        let plan = TimestepPlan::default_anchored(2, 10).unwrap();
        let z = LatentSequence {
            latents: Array2::zeros((2, 2)),
            token_steps: plan.token_steps(5.0).unwrap(),
            sentence_t: 5.0,
        };
        let z0_hat = Array2::zeros((2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(reverse_step(&z, &z0_hat, &plan, &schedule, 5.0, 5.0, &mut rng).is_err());
        assert!(reverse_step(&z, &z0_hat, &plan, &schedule, 5.0, 6.0, &mut rng).is_err());
    }

    #[test]
    fn reverse_chain_matches_marginal_monte_carlo() {
        // Full-chain reverse sampling with a fixed z0_hat reproduces the
        // forward marginal mean/variance at every step within 3 sigma bands.
        let schedule = small_schedule();
        let plan = TimestepPlan::uniform(1, 10).unwrap();
        let z0_hat = array![[0.7]];
        let n_chains = 20_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(n_chains); 10];
        for _ in 0..n_chains {
            let mut z = LatentSequence {
                latents: array![[rng.sample::<f64, _>(StandardNormal)]],
                token_steps: vec![10],
                sentence_t: 10.0,
            };
            for t in (0..10).rev() {
                z = reverse_step(&z, &z0_hat, &plan, &schedule, t as f64 + 1.0, t as f64, &mut rng)
                    .unwrap();
                values[t].push(z.latents[[0, 0]]);
            }
        }
        for t in (1..10).rev() {
            let abar = schedule.alpha_bar(t);
            let exp_mean = abar.sqrt() * 0.7;
            let exp_var = 1.0 - abar;
            let xs = &values[t];
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                / (xs.len() - 1) as f64;
            let se_mean = exp_var.sqrt() / (xs.len() as f64).sqrt();
            let se_var = exp_var * (2.0 / (xs.len() as f64 - 1.0)).sqrt();
            assert!(
                (mean - exp_mean).abs() < 3.5 * se_mean,
                "t={t}: mean {mean} vs {exp_mean}"
            );
            assert!(
                (var - exp_var).abs() < 3.5 * se_var,
                "t={t}: var {var} vs {exp_var}"
            );
        }
    }

    #[test]
    fn training_loss_examples() {
        // Perfect prediction with strongly correct logits: mse = 0, nll ~ 0.
        let z = array![[0.5, -0.5], [1.0, 0.0]];
        let logits = array![[50.0, 0.0, 0.0], [0.0, 50.0, 0.0]];
        let loss = training_loss(z.view(), z.view(), logits.view(), &[0, 1]).unwrap();
        assert_eq!(loss.mse, 0.0);
        assert!(loss.nll < 1e-12);

        // N=1, d=1: mse = 0.25.
        let a = array![[0.5]];
        let b = array![[0.0]];
        let l = array![[0.0, 0.0]];
        let loss = training_loss(a.view(), b.view(), l.view(), &[0]).unwrap();
        assert!((loss.mse - 0.25).abs() < 1e-15);

        // Uniform logits over V=4: nll per token = ln 4.
        let z1 = Array2::<f64>::zeros((2, 3));
        let logits4 = Array2::<f64>::zeros((2, 4));
        let loss = training_loss(z1.view(), z1.view(), logits4.view(), &[2, 0]).unwrap();
        assert!((loss.nll - 4.0f64.ln()).abs() < 1e-12);
        assert!((loss.total - loss.mse - loss.nll).abs() < 1e-15);
    }

    #[test]
    fn training_loss_rejects_non_finite() {
        let z = array![[f64::NAN]];
        let ok = array![[0.0]];
        let l = array![[0.0, 0.0]];
        assert!(training_loss(z.view(), ok.view(), l.view(), &[0]).is_err());
    }

    #[test]
    fn training_loss_mask_drops_positions() {
        let a = array![[1.0], [5.0]];
        let b = array![[0.0], [0.0]];
        let l = array![[0.0, 0.0], [0.0, 0.0]];
        let full = training_loss(a.view(), b.view(), l.view(), &[0, 0]).unwrap();
        let masked =
            training_loss_masked(a.view(), b.view(), l.view(), &[0, 0], &[true, false]).unwrap();
        assert!((full.mse - 13.0).abs() < 1e-12);
        assert!((masked.mse - 1.0).abs() < 1e-12);
    }
}
