use rand::Rng;
use rand_distr::StandardNormal;

use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// A noise-prediction network seen from the sampler: `eps_hat = f(x_t, t, cond)`.
pub trait Denoiser {
    /// Channels of the diffused tensor.
    fn in_channels(&self) -> usize;
    /// Channels of the condition tensor; 0 for unconditional models.
    fn cond_channels(&self) -> usize;
    /// Predicts the noise for a batch `[B, C, H, W]` with one timestep per item.
    fn predict_noise(&self, x_t: &Tensor<f32>, t: &[usize], cond: Option<&Tensor<f32>>) -> Result<Tensor<f32>>;
}

fn check_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

fn check_t(t: usize, sched: &NoiseSchedule) -> Result<()> {
    if t > sched.timesteps() {
        return Err(Error::InvalidConfig(format!(
            "timestep {t} outside 0..={}",
            sched.timesteps()
        )));
    }
    Ok(())
}

/// Applies `out = a_t * x + b_t * y` per batch item.
fn per_item_combine<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    ts: &[usize],
    coef: impl Fn(usize) -> (f64, f64),
) -> Result<Tensor<T>> {
    check_same_shape(x, y)?;
    let b = x.shape()[0];
    if ts.len() != b {
        return Err(Error::shape(b, ts.len()));
    }
    let per = x.numel() / b.max(1);
    let mut out = Vec::with_capacity(x.numel());
    for (i, &t) in ts.iter().enumerate() {
        let (ca, cb) = coef(t);
        let (ca, cb) = (T::from_f64(ca), T::from_f64(cb));
        let xs = &x.data()[i * per..(i + 1) * per];
        let ys = &y.data()[i * per..(i + 1) * per];
        out.extend(xs.iter().zip(ys).map(|(&u, &v)| ca * u + cb * v));
    }
    Ok(Tensor::from_vec(x.shape(), out))
}

/// Forward noising `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`, one `t` per batch item.
pub fn q_sample<T: Real>(x0: &Tensor<T>, ts: &[usize], noise: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    for &t in ts {
        check_t(t, sched)?;
    }
    per_item_combine(x0, noise, ts, |t| {
        let ab = sched.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    })
}

/// Algebraic inverse of [`q_sample`] given the noise, without clamping.
pub fn predict_x0_unclamped<T: Real>(x_t: &Tensor<T>, ts: &[usize], eps_hat: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    for &t in ts {
        check_t(t, sched)?;
    }
    per_item_combine(x_t, eps_hat, ts, |t| {
        let ab = sched.alpha_bar(t);
        let inv = 1.0 / ab.sqrt();
        (inv, -(1.0 - ab).sqrt() * inv)
    })
}

/// [`predict_x0_unclamped`] followed by clamping to `[-1, 1]`.
pub fn predict_x0_from_eps<T: Real>(x_t: &Tensor<T>, ts: &[usize], eps_hat: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    let lo = T::from_f64(-1.0);
    let hi = T::one();
    Ok(predict_x0_unclamped(x_t, ts, eps_hat, sched)?.map(|v| {
        if v < lo {
            lo
        } else if v > hi {
            hi
        } else {
            v
        }
    }))
}

/// Mean of `q(x_{t-1} | x_t, x_0)`.
pub fn posterior_mean<T: Real>(x0: &Tensor<T>, x_t: &Tensor<T>, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor<T>> {
    for &t in ts {
        check_t(t, sched)?;
        if t == 0 {
            return Err(Error::InvalidConfig("posterior mean needs t >= 1".into()));
        }
    }
    per_item_combine(x0, x_t, ts, |t| sched.posterior_coefficients(t))
}

/// Standard normal tensor with each batch item drawn from its own generator.
pub fn randn_per_item<R: Rng>(shape: &[usize], rngs: &mut [R]) -> Tensor<f32> {
    assert_eq!(shape[0], rngs.len(), "one generator per batch item");
    let per: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(per * rngs.len());
    for rng in rngs.iter_mut() {
        data.extend((0..per).map(|_| rng.sample::<f32, _>(StandardNormal)));
    }
    Tensor::from_vec(shape, data)
}

fn check_condition<D: Denoiser + ?Sized>(denoiser: &D, x: &Tensor<f32>, cond: Option<&Tensor<f32>>) -> Result<()> {
    match (denoiser.cond_channels(), cond) {
        (0, _) => Ok(()),
        (_, None) => Err(Error::MissingCondition),
        (c, Some(cd)) => {
            let (b, _, h, w) = x.dims4();
            let want = [b, c, h, w];
            if cd.shape() != want {
                return Err(Error::shape(want, cd.shape()));
            }
            Ok(())
        }
    }
}

/// One ancestral step `x_t -> x_{t-1}` with fixed variance `posterior_var[t]`.
///
/// No noise is added at `t = 1`.
pub fn p_sample_step<D: Denoiser + ?Sized, R: Rng>(
    denoiser: &D,
    x_t: &Tensor<f32>,
    t: usize,
    cond: Option<&Tensor<f32>>,
    sched: &NoiseSchedule,
    rngs: &mut [R],
) -> Result<Tensor<f32>> {
    if t == 0 || t > sched.timesteps() {
        return Err(Error::InvalidConfig(format!("timestep {t} outside 1..={}", sched.timesteps())));
    }
    check_condition(denoiser, x_t, cond)?;
    let b = x_t.shape()[0];
    if rngs.len() != b {
        return Err(Error::shape(b, rngs.len()));
    }
    let ts = vec![t; b];
    let eps = denoiser.predict_noise(x_t, &ts, cond)?;
    check_same_shape(x_t, &eps)?;
    let x0_hat = predict_x0_from_eps(x_t, &ts, &eps, sched)?;
    let mut mean = posterior_mean(&x0_hat, x_t, &ts, sched)?;
    if t > 1 {
        let z = randn_per_item(x_t.shape(), rngs);
        let sd = sched.posterior_var(t).sqrt() as f32;
        for (m, &z) in mean.data_mut().iter_mut().zip(z.data()) {
            *m += sd * z;
        }
    }
    Ok(mean)
}

/// Full reverse chain from `x_T ~ N(0, I)` down to a clamped `x_0` estimate.
///
/// `rngs[i]` drives every random draw of batch item `i`, so an item's sample
/// does not depend on what else shares its batch.
pub fn sample_loop<D: Denoiser + ?Sized, R: Rng>(
    denoiser: &D,
    shape: &[usize],
    cond: Option<&Tensor<f32>>,
    sched: &NoiseSchedule,
    rngs: &mut [R],
) -> Result<Tensor<f32>> {
    if shape.len() != 4 || shape[1] != denoiser.in_channels() {
        return Err(Error::shape([0, denoiser.in_channels(), 0, 0], shape));
    }
    let mut x = randn_per_item(shape, rngs);
    check_condition(denoiser, &x, cond)?;
    for t in (1..=sched.timesteps()).rev() {
        x = p_sample_step(denoiser, &x, t, cond, sched, rngs)?;
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

/// `mean((noise - f(q_sample(x0, t, noise), t, cond))^2)`.
pub fn training_loss<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &Tensor<f32>,
    cond: Option<&Tensor<f32>>,
    ts: &[usize],
    noise: &Tensor<f32>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    check_condition(denoiser, x0, cond)?;
    let x_t = q_sample(x0, ts, noise, sched)?;
    let eps = denoiser.predict_noise(&x_t, ts, cond)?;
    check_same_shape(noise, &eps)?;
    let sum: f64 = noise
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &b)| {
            let d = (a - b) as f64;
            d * d
        })
        .sum();
    Ok(sum / noise.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, DiffusionConfig, ScheduleKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched(t: usize) -> NoiseSchedule {
        make_schedule(&DiffusionConfig {
            timesteps: t,
            ..Default::default()
        })
        .unwrap()
    }

    fn rngs(n: usize, seed: u64) -> Vec<ChaCha8Rng> {
        (0..n).map(|i| ChaCha8Rng::seed_from_u64(seed + i as u64)).collect()
    }

    struct Zero {
        c: usize,
        cond: usize,
    }
    impl Denoiser for Zero {
        fn in_channels(&self) -> usize {
            self.c
        }
        fn cond_channels(&self) -> usize {
            self.cond
        }
        fn predict_noise(&self, x: &Tensor<f32>, _: &[usize], _: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    /// Returns a fixed tensor regardless of input.
    struct Fixed(Tensor<f32>);
    impl Denoiser for Fixed {
        fn in_channels(&self) -> usize {
            self.0.shape()[1]
        }
        fn cond_channels(&self) -> usize {
            0
        }
        fn predict_noise(&self, _: &Tensor<f32>, _: &[usize], _: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
            Ok(self.0.clone())
        }
    }

    /// Pointwise: eps_hat = tanh(0.7 x + 0.01 t).
    struct Pointwise;
    impl Denoiser for Pointwise {
        fn in_channels(&self) -> usize {
            1
        }
        fn cond_channels(&self) -> usize {
            0
        }
        fn predict_noise(&self, x: &Tensor<f32>, t: &[usize], _: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
            let per = x.numel() / t.len();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| (0.7 * v + 0.01 * t[i / per] as f32).tanh())
                .collect();
            Ok(Tensor::from_vec(x.shape(), data))
        }
    }

    #[test]
    fn q_sample_edge_cases() {
        let s = sched(100);
        let mut r = rngs(1, 3);
        let x0 = Tensor::from_vec(&[1, 1, 2, 2], vec![0.5, -0.25, 1.0, 0.0]);
        let noise = randn_per_item(&[1, 1, 2, 2], &mut r);
        assert_eq!(q_sample(&x0, &[0], &noise, &s).unwrap(), x0);

        let zeros = Tensor::zeros(&[1, 1, 2, 2]);
        let out = q_sample(&zeros, &[40], &noise, &s).unwrap();
        let k = (1.0 - s.alpha_bar(40)).sqrt() as f32;
        for (o, n) in out.data().iter().zip(noise.data()) {
            assert!((o - k * n).abs() < 1e-7);
        }
        assert!(q_sample(&x0, &[0], &Tensor::zeros(&[1, 1, 2, 3]), &s).is_err());
    }

    #[test]
    fn q_sample_monte_carlo_moments() {
        let s = sched(1000);
        let n = 100_000;
        for t in [1usize, 100, 500, 900] {
            let c = 0.6f64;
            let x0 = Tensor::full(&[1, 1, 1, n], c);
            let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
            let noise = Tensor::from_vec(&[1, 1, 1, n], (0..n).map(|_| rng.sample(StandardNormal)).collect());
            let out = q_sample(&x0, &[t], &noise, &s).unwrap();
            let mean = out.data().iter().sum::<f64>() / n as f64;
            let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let am = s.alpha_bar(t).sqrt() * c;
            let asd = (1.0 - s.alpha_bar(t)).sqrt();
            // Mean tolerance: 1% relative, or 4 standard errors when the mean is near 0.
            let tol = (0.01 * am.abs()).max(4.0 * asd / (n as f64).sqrt());
            assert!((mean - am).abs() <= tol, "t={t} mean {mean} vs {am}");
            assert!((var.sqrt() - asd).abs() <= 0.01 * asd, "t={t} sd {} vs {asd}", var.sqrt());
        }
    }

    #[test]
    fn predict_x0_inverts_q_sample_exactly_enough() {
        let s = sched(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
        let noise = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>());
        for t in 1..=1000 {
            let xt = q_sample(&x0, &[t], &noise, &s).unwrap();
            let back = predict_x0_unclamped(&xt, &[t], &noise, &s).unwrap();
            let err = back.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-5, "t={t} err={err}");
        }
        let z = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert_eq!(predict_x0_from_eps(&z, &[7], &z, &s).unwrap(), z);
    }

    #[test]
    fn posterior_mean_coefficient_sum() {
        let s = sched(200);
        let c = 0.37f64;
        let x = Tensor::full(&[1, 1, 2, 2], c);
        for t in [1usize, 2, 50, 199, 200] {
            let mu = posterior_mean(&x, &x, &[t], &s).unwrap();
            // independent route: evaluate both coefficients from raw betas
            let ab = |k: usize| (1..=k).map(|j| 1.0 - s.beta(j)).product::<f64>();
            let c1 = ab(t - 1).sqrt() * s.beta(t) / (1.0 - ab(t));
            let c2 = (1.0 - s.beta(t)).sqrt() * (1.0 - ab(t - 1)) / (1.0 - ab(t));
            for v in mu.data() {
                assert!((v - c * (c1 + c2)).abs() < 1e-10, "t={t}");
            }
        }
        let x0 = Tensor::from_vec(&[1, 1, 1, 2], vec![0.2f64, -0.9]);
        let xt = Tensor::from_vec(&[1, 1, 1, 2], vec![3.0, 1.5]);
        let mu1 = posterior_mean(&x0, &xt, &[1], &s).unwrap();
        for (a, b) in mu1.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = Tensor::zeros(&[1, 1, 1, 2]);
        let mu = posterior_mean(&zero, &xt, &[30], &s).unwrap();
        let k = s.posterior_coefficients(30).1;
        assert!((mu.data()[0] - k * 3.0).abs() < 1e-12);
    }

    #[test]
    fn p_sample_step_rules() {
        let s = sched(50);
        let d = Zero { c: 1, cond: 0 };
        let x = Tensor::zeros(&[2, 1, 3, 3]);
        // zero denoiser, zero input: output is the scaled noise draw
        let out = p_sample_step(&d, &x, 20, None, &s, &mut rngs(2, 5)).unwrap();
        let z = randn_per_item(&[2, 1, 3, 3], &mut rngs(2, 5));
        let sd = s.posterior_var(20).sqrt() as f32;
        for (o, z) in out.data().iter().zip(z.data()) {
            assert!((o - sd * z).abs() < 1e-6);
        }
        // t = 1 is deterministic
        let x1 = Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(|i| i as f32 / 20.0).collect());
        let a = p_sample_step(&d, &x1, 1, None, &s, &mut rngs(2, 1)).unwrap();
        let b = p_sample_step(&d, &x1, 1, None, &s, &mut rngs(2, 99)).unwrap();
        assert_eq!(a, b);
        // identical seeds, identical outputs
        let c1 = p_sample_step(&d, &x1, 10, None, &s, &mut rngs(2, 4)).unwrap();
        let c2 = p_sample_step(&d, &x1, 10, None, &s, &mut rngs(2, 4)).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn conditional_model_requires_condition() {
        let s = sched(10);
        let d = Zero { c: 3, cond: 1 };
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(matches!(
            p_sample_step(&d, &x, 5, None, &s, &mut rngs(1, 0)),
            Err(Error::MissingCondition)
        ));
        let bad = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(matches!(
            p_sample_step(&d, &x, 5, Some(&bad), &s, &mut rngs(1, 0)),
            Err(Error::ShapeMismatch { .. })
        ));
        let good = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(sample_loop(&d, &[1, 3, 4, 4], Some(&good), &s, &mut rngs(1, 0)).is_ok());
    }

    #[test]
    fn sample_loop_seeded_and_stochastic() {
        let s = sched(20);
        let d = Pointwise;
        let a = sample_loop(&d, &[2, 1, 4, 4], None, &s, &mut rngs(2, 10)).unwrap();
        let b = sample_loop(&d, &[2, 1, 4, 4], None, &s, &mut rngs(2, 10)).unwrap();
        assert_eq!(a, b);
        let c = sample_loop(&d, &[2, 1, 4, 4], None, &s, &mut rngs(2, 30)).unwrap();
        assert!(a.data().iter().zip(c.data()).any(|(x, y)| x != y));
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // per-item streams: item 1 alone equals item 1 inside the batch
        let mut solo = vec![ChaCha8Rng::seed_from_u64(11)];
        let single = sample_loop(&d, &[1, 1, 4, 4], None, &s, &mut solo).unwrap();
        assert_eq!(single.data(), a.batch_item(1));
    }

    #[test]
    fn training_loss_cases() {
        let s = sched(100);
        let mut r = rngs(4, 0);
        let shape = [4, 1, 8, 8];
        let x0 = Tensor::from_vec(&shape, (0..256).map(|i| ((i % 7) as f32 / 3.0) - 1.0).collect());
        let noise = randn_per_item(&shape, &mut r);
        let ts = [3, 30, 60, 99];
        let oracle = Fixed(noise.clone());
        assert_eq!(training_loss(&oracle, &x0, None, &ts, &noise, &s).unwrap(), 0.0);
        let zero = Zero { c: 1, cond: 0 };
        let l = training_loss(&zero, &x0, None, &ts, &noise, &s).unwrap();
        let msq = noise.data().iter().map(|v| (v * v) as f64).sum::<f64>() / 256.0;
        assert!((l - msq).abs() < 1e-6);
        assert!((l - 1.0).abs() < 0.3);

        // consistent pixel permutation leaves a pointwise model's loss unchanged
        let perm: Vec<usize> = (0..64).map(|i| (i * 37 + 11) % 64).collect();
        let permute = |t: &Tensor<f32>| {
            let mut out = Vec::with_capacity(256);
            for b in 0..4 {
                let item = t.batch_item(b);
                out.extend(perm.iter().map(|&p| item[p]));
            }
            Tensor::from_vec(&shape, out)
        };
        let base = training_loss(&Pointwise, &x0, None, &ts, &noise, &s).unwrap();
        let permuted = training_loss(&Pointwise, &permute(&x0), None, &ts, &permute(&noise), &s).unwrap();
        assert!((base - permuted).abs() < 1e-12);
        let _ = ScheduleKind::Linear;
    }
}
