//! Noise schedules, forward corruption and the ancestral reverse sampler
//! for pose maps.
//!
//! Timesteps are 1-based: `t = 1` is the least noisy step and `t = T` the
//! noisiest. The denoiser predicts clean maps; the noise estimate used by
//! the reverse update is reconstructed from that prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Parameters from which a [`NoiseSchedule`] is built.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Linear,
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps, self.beta_min, self.beta_max)
    }
}

/// Precomputed per-step coefficients, indexed by `t - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Same schedule with every reverse-step noise scale set to zero.
    pub fn without_sampling_noise(&self) -> Self {
        NoiseSchedule {
            sigma: vec![0.0; self.sigma.len()],
            ..self.clone()
        }
    }
}

fn from_betas(beta: Vec<f64>) -> NoiseSchedule {
    let mut alpha_bar = Vec::with_capacity(beta.len());
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    let mut sigma: Vec<f64> = beta.iter().map(|b| b.sqrt()).collect();
    sigma[0] = 0.0;
    NoiseSchedule {
        beta,
        alpha_bar,
        sigma,
    }
}

/// Linear betas evenly spaced on `[beta_min, beta_max]`, or the
/// squared-cosine `alpha_bar` profile with betas clamped to 0.999.
pub fn make_schedule(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let beta = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            const OFFSET: f64 = 0.008;
            let f = |t: f64| {
                ((t / steps as f64 + OFFSET) / (1.0 + OFFSET) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-12, 0.999))
                .collect()
        }
    };
    Ok(from_betas(beta))
}

fn check_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "{what}: length {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `sqrt(alpha_bar_t) m0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(m0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_len(m0, eps, "forward_noise")?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(m0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Noise implied by a clean-map prediction:
/// `(m_t - sqrt(alpha_bar_t) m0_hat) / sqrt(1 - alpha_bar_t)`.
pub fn implied_noise(mt: &[f64], m0_hat: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_len(mt, m0_hat, "implied_noise")?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(mt.iter().zip(m0_hat).map(|(x, m)| (x - a * m) / b).collect())
}

/// One ancestral step from `t` to `t - 1`:
/// `(m_t - sqrt(1 - alpha_t) eps_hat) / sqrt(alpha_t) + sigma_t z`, with the
/// per-step retention `alpha_t = 1 - beta_t` and `eps_hat` implied by the
/// clean-map prediction. `sigma_1 = 0`, so the final step ignores `z`.
pub fn reverse_step(
    mt: &[f64],
    m0_hat: &[f64],
    t: usize,
    z: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_len(mt, z, "reverse_step")?;
    let eps = implied_noise(mt, m0_hat, t, sched)?;
    let beta = sched.beta(t);
    let inv = 1.0 / (1.0 - beta).sqrt();
    let c = beta.sqrt();
    let sigma = sched.sigma(t);
    Ok(mt
        .iter()
        .zip(&eps)
        .zip(z)
        .map(|((x, e), n)| inv * (x - c * e) + sigma * n)
        .collect())
}

/// Rotation and translation maps of one hypothesis, both flattened
/// `p * p * 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct MapPair {
    pub rays: Vec<f64>,
    pub trans: Vec<f64>,
}

/// Anything that predicts clean maps from noisy ones.
pub trait Denoiser {
    type Cond;

    /// Clean-map predictions for every hypothesis, in input order.
    fn denoise(&self, noisy: &[MapPair], t: usize, cond: &Self::Cond) -> Result<Vec<MapPair>>;
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Runs the full reverse chain from Gaussian noise for `hypotheses`
/// independent map pairs of `cells` cells each.
pub fn sample<D: Denoiser>(
    denoiser: &D,
    cond: &D::Cond,
    sched: &NoiseSchedule,
    hypotheses: usize,
    cells: usize,
    seed: u64,
) -> Result<Vec<MapPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cells * 3;
    let mut state: Vec<MapPair> = (0..hypotheses)
        .map(|_| MapPair {
            rays: normal_vec(&mut rng, n),
            trans: normal_vec(&mut rng, n),
        })
        .collect();
    for t in (1..=sched.steps()).rev() {
        let pred = denoiser.denoise(&state, t, cond)?;
        if pred.len() != state.len() {
            return Err(Error::Contract(format!(
                "denoiser returned {} hypotheses for {}",
                pred.len(),
                state.len()
            )));
        }
        let mut next = Vec::with_capacity(state.len());
        for (cur, p) in state.iter().zip(&pred) {
            if !all_finite(&p.rays) || !all_finite(&p.trans) {
                return Err(Error::Numeric {
                    context: format!("denoiser output at timestep {t}"),
                });
            }
            let zr = normal_vec(&mut rng, n);
            let zt = normal_vec(&mut rng, n);
            next.push(MapPair {
                rays: reverse_step(&cur.rays, &p.rays, t, &zr, sched)?,
                trans: reverse_step(&cur.trans, &p.trans, t, &zt, sched)?,
            });
        }
        state = next;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Oracle(Vec<MapPair>);

    impl Denoiser for Oracle {
        type Cond = ();

        fn denoise(&self, noisy: &[MapPair], _t: usize, _c: &()) -> Result<Vec<MapPair>> {
            Ok(self.0[..noisy.len()].to_vec())
        }
    }

    struct Broken;

    impl Denoiser for Broken {
        type Cond = ();

        fn denoise(&self, noisy: &[MapPair], _t: usize, _c: &()) -> Result<Vec<MapPair>> {
            Ok(noisy
                .iter()
                .map(|m| MapPair {
                    rays: vec![f64::NAN; m.rays.len()],
                    trans: m.trans.clone(),
                })
                .collect())
        }
    }

    fn normals(seed: u64, n: usize) -> Vec<f64> {
        normal_vec(&mut ChaCha8Rng::seed_from_u64(seed), n)
    }

    #[test]
    fn linear_schedule_examples() {
        let s = make_schedule(ScheduleKind::Linear, 100, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bar(1) > 0.99);
        assert_eq!(s.sigma(1), 0.0);
        assert!((s.beta(100) - 0.02).abs() < 1e-15);

        let s = make_schedule(ScheduleKind::Linear, 1, 0.003, 0.02).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0 - 0.003]);
    }

    #[test]
    fn schedules_strictly_decrease() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for steps in [1, 2, 20, 100, 1000] {
                let s = make_schedule(kind, steps, 1e-4, 0.02).unwrap();
                assert!(s.betas().iter().all(|b| *b > 0.0 && *b < 1.0));
                assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
                assert!(s.alpha_bar(1) > 0.99 || steps < 20);
                assert!((1..=steps).all(|t| s.sigma(t) >= 0.0));
            }
        }
    }

    #[test]
    fn schedule_config_errors() {
        assert!(matches!(make_schedule(ScheduleKind::Linear, 0, 1e-4, 0.02), Err(Error::Config(_))));
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.1, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Cosine, 10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let m0 = vec![0.5, -1.0, 2.0];
        let eps = vec![1.0, 2.0, -3.0];
        // A schedule whose first step leaves alpha_bar at 1 - 1e-300 ~ 1.
        let s = from_betas(vec![1e-300, 1.0 - 1e-300]);
        assert_eq!(forward_noise(&m0, 1, &eps, &s).unwrap(), m0);
        let out = forward_noise(&m0, 2, &eps, &s).unwrap();
        for (o, e) in out.iter().zip(&eps) {
            assert!((o - e).abs() < 1e-12);
        }
        assert!(matches!(forward_noise(&m0, 1, &eps[..2], &s), Err(Error::Contract(_))));
        assert!(forward_noise(&m0, 0, &eps, &s).is_err());
    }

    #[test]
    fn forward_noise_preserves_second_moment() {
        let sched = make_schedule(ScheduleKind::Linear, 100, 1e-4, 0.02).unwrap();
        let n = 48;
        let m0 = normals(1, n);
        let norm2: f64 = m0.iter().map(|x| x * x).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in [1, 25, 50, 75, 100] {
            let mut acc = 0.0;
            let draws = 10_000;
            for _ in 0..draws {
                let eps = normal_vec(&mut rng, n);
                let mt = forward_noise(&m0, t, &eps, &sched).unwrap();
                acc += mt.iter().map(|x| x * x).sum::<f64>();
            }
            let ab = sched.alpha_bar(t);
            let expected = ab * norm2 + (1.0 - ab) * n as f64;
            let got = acc / draws as f64;
            assert!((got - expected).abs() / expected < 0.02, "t={t}: {got} vs {expected}");
        }
    }

    #[test]
    fn implied_noise_recovers_eps() {
        let sched = make_schedule(ScheduleKind::Cosine, 50, 1e-4, 0.02).unwrap();
        let m0 = normals(3, 30);
        let eps = normals(4, 30);
        for t in [1, 10, 49] {
            let mt = forward_noise(&m0, t, &eps, &sched).unwrap();
            let back = implied_noise(&mt, &m0, t, &sched).unwrap();
            for (a, b) in back.iter().zip(&eps) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reverse_step_hand_evaluation() {
        // beta = [0.1, 0.2]: alpha_bar_2 = 0.9 * 0.8 = 0.72.
        let s = from_betas(vec![0.1, 0.2]);
        let mt = [0.3, -0.4, 1.2];
        let m0 = [0.25, -0.5, 1.0];
        let z = [0.7, -0.1, 0.2];
        let out = reverse_step(&mt, &m0, 2, &z, &s).unwrap();
        for i in 0..3 {
            let eps = (mt[i] - 0.72f64.sqrt() * m0[i]) / 0.28f64.sqrt();
            let expected = (mt[i] - 0.2f64.sqrt() * eps) / 0.8f64.sqrt() + 0.2f64.sqrt() * z[i];
            assert!((out[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn final_step_ignores_noise() {
        let s = make_schedule(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        let mt = normals(5, 12);
        let m0 = normals(6, 12);
        let a = reverse_step(&mt, &m0, 1, &normals(7, 12), &s).unwrap();
        let b = reverse_step(&mt, &m0, 1, &normals(8, 12), &s).unwrap();
        assert_eq!(a, b);
    }

    fn oracle_pairs(cells: usize, h: usize) -> Vec<MapPair> {
        (0..h)
            .map(|i| MapPair {
                rays: normals(100 + i as u64, cells * 3),
                trans: normals(200 + i as u64, cells * 3),
            })
            .collect()
    }

    #[test]
    fn oracle_sampling_recovers_clean_maps() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let sched = make_schedule(kind, 100, 1e-4, 0.02).unwrap();
            let truth = oracle_pairs(16, 3);
            let oracle = Oracle(truth.clone());
            for s in [sched.without_sampling_noise(), sched.clone()] {
                let out = sample(&oracle, &(), &s, 3, 16, 9).unwrap();
                for (o, t) in out.iter().zip(&truth) {
                    let err = o
                        .rays
                        .iter()
                        .chain(&o.trans)
                        .zip(t.rays.iter().chain(&t.trans))
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    assert!(err < 1e-6, "{kind:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let sched = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02).unwrap();
        let oracle = Oracle(oracle_pairs(4, 2));
        // Identity denoiser keeps the noise in the output.
        struct Echo;
        impl Denoiser for Echo {
            type Cond = ();
            fn denoise(&self, noisy: &[MapPair], _t: usize, _c: &()) -> Result<Vec<MapPair>> {
                Ok(noisy.to_vec())
            }
        }
        let a = sample(&Echo, &(), &sched, 2, 4, 1).unwrap();
        let b = sample(&Echo, &(), &sched, 2, 4, 1).unwrap();
        let c = sample(&Echo, &(), &sched, 2, 4, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(
            sample(&oracle, &(), &sched, 2, 4, 1).unwrap(),
            sample(&oracle, &(), &sched, 2, 4, 1).unwrap()
        );
    }

    #[test]
    fn non_finite_denoiser_output_is_reported() {
        let sched = make_schedule(ScheduleKind::Linear, 5, 1e-4, 0.02).unwrap();
        match sample(&Broken, &(), &sched, 1, 4, 0) {
            Err(Error::Numeric { context }) => assert!(context.contains("timestep 5")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
