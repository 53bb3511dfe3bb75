//! Gaussian diffusion machinery: the quadratic noise schedule, closed-form
//! forward corruption, the noise-prediction training objective, the training
//! loop, and the ancestral sampler.

use thiserror::Error;

use crate::layers::Mode;
use crate::rng::Rng;
use crate::tensor::{adam_step, AdamState, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("diffusion step {t} out of range 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("batch is inconsistent: {0}")]
    BadBatch(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },
    #[error("non-finite sample state at reverse step t={t}")]
    NonFiniteSample { t: usize },
    #[error("schedule has {schedule_t} steps but the model was built for {model_t}")]
    ScheduleMismatch { schedule_t: usize, model_t: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] crate::attention::AttentionError),
    #[error("model error: {0}")]
    Model(String),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

// ── Noise schedule ───────────────────────────────────────────────────

/// Per-step diffusion coefficients.
///
/// `alpha` here is the running product `prod_{n<=t} (1 - beta_n)` (what much
/// of the diffusion literature writes as alpha-bar), and `beta_tilde` is the
/// posterior variance `(1 - alpha_{t-1}) / (1 - alpha_t) * beta_t` with
/// `alpha_0 := 1`, so `beta_tilde(1) = 0` and the final denoising step adds
/// no noise.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    beta_tilde: Vec<f64>,
    sqrt_alpha: Vec<f64>,
    sqrt_one_minus_alpha: Vec<f64>,
}

impl NoiseSchedule {
    /// Quadratic schedule: beta_t is the square of the linear interpolation
    /// between sqrt(beta_1) and sqrt(beta_T).
    pub fn quadratic(t_max: usize, beta1: f64, beta_t: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need at least 2 steps, got {t_max}"
            )));
        }
        if !(0.0 < beta1 && beta1 < beta_t && beta_t < 1.0) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need 0 < beta1 < betaT < 1, got beta1={beta1}, betaT={beta_t}"
            )));
        }
        let (s1, st) = (beta1.sqrt(), beta_t.sqrt());
        let denom = (t_max - 1) as f64;
        let mut beta = Vec::with_capacity(t_max);
        let mut alpha = Vec::with_capacity(t_max);
        let mut beta_tilde = Vec::with_capacity(t_max);
        let mut running = 1.0;
        for t in 1..=t_max {
            // Endpoints are beta1/betaT exactly; the sqrt-interp-square
            // roundtrip would cost a ulp there.
            let b = if t == 1 {
                beta1
            } else if t == t_max {
                beta_t
            } else {
                ((t_max - t) as f64 / denom * s1 + (t - 1) as f64 / denom * st).powi(2)
            };
            let alpha_prev = running;
            running *= 1.0 - b;
            beta.push(b);
            alpha.push(running);
            beta_tilde.push(if t == 1 {
                0.0
            } else {
                (1.0 - alpha_prev) / (1.0 - running) * b
            });
        }
        let sqrt_alpha = alpha.iter().map(|a| a.sqrt()).collect();
        let sqrt_one_minus_alpha = alpha.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(NoiseSchedule { beta, alpha, beta_tilde, sqrt_alpha, sqrt_one_minus_alpha })
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.beta.len() {
            Err(DiffusionError::StepOutOfRange { t, t_max: self.beta.len() })
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn sqrt_alpha(&self, t: usize) -> f64 {
        self.sqrt_alpha[t - 1]
    }

    pub fn sqrt_one_minus_alpha(&self, t: usize) -> f64 {
        self.sqrt_one_minus_alpha[t - 1]
    }
}

/// Closed-form corruption: sqrt(alpha_t)·x0 + sqrt(1-alpha_t)·eps.
pub fn forward_diffuse(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let idx = schedule.check(t)?;
    if x0.len() != eps.len() {
        return Err(DiffusionError::BadBatch(format!(
            "x0 has {} points but eps has {}",
            x0.len(),
            eps.len()
        )));
    }
    let (sa, so) = (schedule.sqrt_alpha[idx], schedule.sqrt_one_minus_alpha[idx]);
    Ok(x0.iter().zip(eps).map(|(&x, &e)| sa * x + so * e).collect())
}

// ── Batches and the training objective ───────────────────────────────

/// One training minibatch; all row-major `[batch, seq_len]`.
#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    pub seq_len: usize,
    pub x0: Vec<f64>,
    pub cond: Vec<f64>,
    pub t: Vec<u32>,
    pub eps: Vec<f64>,
    pub xt: Vec<f64>,
}

impl DiffusionBatch {
    pub fn new(
        x0: Vec<f64>,
        cond: Vec<f64>,
        seq_len: usize,
        t: Vec<u32>,
        eps: Vec<f64>,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        let batch = t.len();
        if x0.len() != batch * seq_len || cond.len() != batch * seq_len || eps.len() != batch * seq_len
        {
            return Err(DiffusionError::BadBatch(format!(
                "expected {batch}x{seq_len} values in x0/cond/eps",
            )));
        }
        let mut xt = vec![0.0; batch * seq_len];
        for b in 0..batch {
            let r = b * seq_len..(b + 1) * seq_len;
            let row = forward_diffuse(&x0[r.clone()], t[b] as usize, &eps[r.clone()], schedule)?;
            xt[r].copy_from_slice(&row);
        }
        Ok(DiffusionBatch { seq_len, x0, cond, t, eps, xt })
    }

    pub fn batch_size(&self) -> usize {
        self.t.len()
    }
}

/// A denoiser the diffusion process can train or sample from.
pub trait NoisePredictor {
    fn seq_len(&self) -> usize;
    fn t_max(&self) -> usize;

    /// Predict the noise in `xt` given the condition and per-item steps.
    /// `xt` and `cond` are row-major `[batch, seq_len]`; the returned node
    /// has shape `[batch·seq_len, 1]`.
    fn predict_batch(
        &self,
        tape: &mut Tape,
        xt: &[f64],
        cond: &[f64],
        t: &[u32],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var>;
}

/// Mean squared error between the drawn noise and the model's prediction,
/// averaged over every point in the batch.
pub fn training_loss(
    tape: &mut Tape,
    model: &impl NoisePredictor,
    batch: &DiffusionBatch,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let pred = model.predict_batch(tape, &batch.xt, &batch.cond, &batch.t, mode, rng)?;
    let eps = tape.constant(batch.eps.clone(), vec![batch.eps.len(), 1])?;
    let diff = tape.sub(eps, pred)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

// ── Training ─────────────────────────────────────────────────────────

/// One (condition day, target day) pair in normalized units.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub condition: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub t_max: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_max: 1000,
            learning_rate: 5e-4,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 60,
        }
    }
}

impl TrainConfig {
    /// Reduced profile for desk-scale runs.
    pub fn desk() -> Self {
        TrainConfig { t_max: 200, epochs: 30, ..TrainConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch training: per step draw `t` uniform in [1, T] and fresh Gaussian
/// noise per sample, corrupt, and descend the noise-prediction MSE with Adam.
/// Day pairs are reshuffled every epoch from the supplied generator.
pub fn train(
    model: &mut crate::denoiser::DalnetModel,
    samples: &[TrainSample],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let n = model.seq_len();
    if schedule.t_max() != model.t_max() {
        return Err(DiffusionError::ScheduleMismatch {
            schedule_t: schedule.t_max(),
            model_t: model.t_max(),
        });
    }
    for s in samples {
        if s.condition.len() != n || s.target.len() != n {
            return Err(DiffusionError::BadBatch(format!(
                "sample has {} condition / {} target points, model expects {n}",
                s.condition.len(),
                s.target.len()
            )));
        }
    }

    let sizes: Vec<usize> = model.params().iter().map(|(_, p)| p.numel()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let b = chunk.len();
            let mut x0 = Vec::with_capacity(b * n);
            let mut cond = Vec::with_capacity(b * n);
            let mut t = Vec::with_capacity(b);
            for &i in chunk {
                x0.extend_from_slice(&samples[i].target);
                cond.extend_from_slice(&samples[i].condition);
                t.push(rng.below(schedule.t_max()) as u32 + 1);
            }
            let eps = rng.normal_vec(b * n);
            let batch = DiffusionBatch::new(x0, cond, n, t, eps, schedule)?;

            let mut tape = Tape::new();
            let loss = training_loss(&mut tape, model, &batch, Mode::Train, rng)?;
            let loss_value = tape.value(loss);
            if !loss_value.is_finite() {
                return Err(DiffusionError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    value: loss_value,
                });
            }
            tape.backward(loss)?;

            let mut params = model.params_mut();
            for (_, p) in params.iter_mut() {
                if let Some(g) = tape.grad_for(p.id()) {
                    let g = g.to_vec();
                    p.accumulate_grad(&g);
                }
            }
            let mut refs: Vec<&mut crate::tensor::Tensor> =
                params.into_iter().map(|(_, p)| p).collect();
            adam_step(
                &mut refs,
                &mut adam,
                config.learning_rate,
                config.adam_betas,
                config.adam_eps,
            );
            for p in refs {
                p.reset_grad();
            }

            loss_sum += loss_value;
            batches += 1;
        }
        epoch_losses.push(loss_sum / batches as f64);
    }
    Ok(TrainReport { epoch_losses })
}

// ── Sampling ─────────────────────────────────────────────────────────

/// Ancestral sampling: start each curve from standard Gaussian noise and run
/// the learned reverse transitions from t = T down to 1. The noise term uses
/// the posterior variance `beta_tilde`, and the t = 1 step adds none.
///
/// Each of the `s` curves draws from its own stream derived from
/// `(rng, curve index)`, so serial and fanned-out execution agree.
pub fn sample(
    model: &impl NoisePredictor,
    cond: &[f64],
    schedule: &NoiseSchedule,
    rng: &Rng,
    s: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = model.seq_len();
    if cond.len() != n {
        return Err(DiffusionError::BadBatch(format!(
            "condition has {} points, model expects {n}",
            cond.len()
        )));
    }
    if s == 0 {
        return Err(DiffusionError::BadBatch("sample count must be >= 1".into()));
    }
    if schedule.t_max() != model.t_max() {
        return Err(DiffusionError::ScheduleMismatch {
            schedule_t: schedule.t_max(),
            model_t: model.t_max(),
        });
    }

    let mut streams: Vec<Rng> = (0..s).map(|i| rng.derive(i as u64)).collect();
    let mut x = vec![0.0; s * n];
    for (i, stream) in streams.iter_mut().enumerate() {
        for j in 0..n {
            x[i * n + j] = stream.normal();
        }
    }
    let cond_batch: Vec<f64> = (0..s).flat_map(|_| cond.iter().copied()).collect();
    let mut eval_rng = Rng::new(0);

    for t in (1..=schedule.t_max()).rev() {
        let mut tape = Tape::new();
        let ts = vec![t as u32; s];
        let pred = model.predict_batch(&mut tape, &x, &cond_batch, &ts, Mode::Eval, &mut eval_rng)?;
        let eps_hat = tape.data(pred);

        let c1 = 1.0 / (1.0 - schedule.beta(t)).sqrt();
        let c2 = schedule.beta(t) / schedule.sqrt_one_minus_alpha(t);
        let sigma = schedule.beta_tilde(t).sqrt();
        for (i, stream) in streams.iter_mut().enumerate() {
            for j in 0..n {
                let idx = i * n + j;
                let z = if t > 1 { stream.normal() } else { 0.0 };
                x[idx] = c1 * (x[idx] - c2 * eps_hat[idx]) + sigma * z;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFiniteSample { t });
        }
    }

    Ok((0..s).map(|i| x[i * n..(i + 1) * n].to_vec()).collect())
}

/// The optimal denoiser for a point-mass data distribution at `x0`:
/// `eps(xt, t) = (xt - sqrt(alpha_t)·x0) / sqrt(1 - alpha_t)`. A reference
/// model for validating the sampler independently of any trained network.
pub struct PointMassDenoiser {
    pub x0: Vec<f64>,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for PointMassDenoiser {
    fn seq_len(&self) -> usize {
        self.x0.len()
    }

    fn t_max(&self) -> usize {
        self.schedule.t_max()
    }

    fn predict_batch(
        &self,
        tape: &mut Tape,
        xt: &[f64],
        _cond: &[f64],
        t: &[u32],
        _mode: Mode,
        _rng: &mut Rng,
    ) -> Result<Var> {
        let n = self.x0.len();
        let mut out = vec![0.0; xt.len()];
        for (b, &tb) in t.iter().enumerate() {
            let idx = self.schedule.check(tb as usize)?;
            let sa = self.schedule.sqrt_alpha[idx];
            let so = self.schedule.sqrt_one_minus_alpha[idx];
            for j in 0..n {
                out[b * n + j] = (xt[b * n + j] - sa * self.x0[j]) / so;
            }
        }
        let len = out.len();
        Ok(tape.constant(out, vec![len, 1])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn schedule_endpoints_exact() {
        let s = NoiseSchedule::quadratic(1000, 1e-4, 0.5).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.5);
    }

    #[test]
    fn schedule_hand_value() {
        // T=3, t=2: ((sqrt(1e-4) + sqrt(0.5)) / 2)^2
        let s = NoiseSchedule::quadratic(3, 1e-4, 0.5).unwrap();
        let expect = ((0.01 + 0.5f64.sqrt()) / 2.0).powi(2);
        assert!(close(s.beta(2), expect, 1e-12));
        assert!(close(s.beta(2), 0.128560, 1e-6));
    }

    #[test]
    fn schedule_monotone_and_terminal() {
        let s = NoiseSchedule::quadratic(1000, 1e-4, 0.5).unwrap();
        for t in 2..=1000 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha(t) < s.alpha(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
        }
        assert!(s.alpha(1000) < 1e-10, "alpha_T = {}", s.alpha(1000));
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(NoiseSchedule::quadratic(1, 1e-4, 0.5).is_err());
        assert!(NoiseSchedule::quadratic(100, 0.5, 1e-4).is_err());
        assert!(NoiseSchedule::quadratic(100, 0.0, 0.5).is_err());
        assert!(NoiseSchedule::quadratic(100, 1e-4, 1.0).is_err());
    }

    #[test]
    fn beta_tilde_first_step_is_zero() {
        let s = NoiseSchedule::quadratic(50, 1e-4, 0.5).unwrap();
        assert_eq!(s.beta_tilde(1), 0.0);
        for t in 2..=50 {
            let expect = (1.0 - s.alpha(t - 1)) / (1.0 - s.alpha(t)) * s.beta(t);
            assert!(close(s.beta_tilde(t), expect, 1e-15));
        }
    }

    #[test]
    fn forward_diffuse_degenerate_inputs() {
        let s = NoiseSchedule::quadratic(100, 1e-4, 0.5).unwrap();
        let x0 = vec![0.2, 0.8, 0.5];
        let zero = vec![0.0; 3];

        let no_noise = forward_diffuse(&x0, 40, &zero, &s).unwrap();
        for (v, x) in no_noise.iter().zip(&x0) {
            assert!(close(*v, s.sqrt_alpha(40) * x, 1e-15));
        }

        let eps = vec![1.5, -0.5, 0.25];
        let pure_noise = forward_diffuse(&zero, 40, &eps, &s).unwrap();
        for (v, e) in pure_noise.iter().zip(&eps) {
            assert!(close(*v, s.sqrt_one_minus_alpha(40) * e, 1e-15));
        }

        assert!(matches!(
            forward_diffuse(&x0, 0, &zero, &s),
            Err(DiffusionError::StepOutOfRange { .. })
        ));
        assert!(matches!(
            forward_diffuse(&x0, 101, &zero, &s),
            Err(DiffusionError::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn forward_diffuse_variance_monte_carlo() {
        let s = NoiseSchedule::quadratic(100, 1e-4, 0.5).unwrap();
        let mut rng = Rng::new(99);
        let t = 60;
        let n = 100_000;
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            let eps = [rng.normal()];
            draws.push(forward_diffuse(&[0.0], t, &eps, &s).unwrap()[0]);
        }
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let expect = 1.0 - s.alpha(t);
        assert!((var - expect).abs() / expect < 0.02, "var {var} vs {expect}");
    }

    #[test]
    fn stepwise_transitions_match_closed_form() {
        // Iterating x_t = sqrt(1-beta_t)·x_{t-1} + sqrt(beta_t)·eps_t must
        // reproduce the closed-form marginal mean/variance.
        let t_max = 40;
        let s = NoiseSchedule::quadratic(t_max, 1e-4, 0.5).unwrap();
        let mut rng = Rng::new(123);
        let trials = 200_000;
        let x0 = 1.0;
        for &t_star in &[1usize, t_max / 2, t_max] {
            let mut draws = Vec::with_capacity(trials);
            for _ in 0..trials {
                let mut x = x0;
                for t in 1..=t_star {
                    x = (1.0 - s.beta(t)).sqrt() * x + s.beta(t).sqrt() * rng.normal();
                }
                draws.push(x);
            }
            let mean = draws.iter().sum::<f64>() / trials as f64;
            let var =
                draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (trials - 1) as f64;
            let em = s.sqrt_alpha(t_star) * x0;
            let ev = 1.0 - s.alpha(t_star);
            // mean error in units of the marginal std (em itself is ~0 at
            // large t, so a relative check there is ill-conditioned)
            assert!(
                (mean - em).abs() / ev.sqrt() < 0.02,
                "t={t_star} mean {mean} vs {em}"
            );
            assert!((var - ev).abs() / ev < 0.02, "t={t_star} var {var} vs {ev}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn schedule_monotonicity_random(
            t_max in 2usize..80,
            beta1 in 1e-6f64..0.01,
            delta in 0.05f64..0.9,
        ) {
            let beta_t = (beta1 + delta).min(0.999);
            let s = NoiseSchedule::quadratic(t_max, beta1, beta_t).unwrap();
            for t in 2..=t_max {
                prop_assert!(s.beta(t) > s.beta(t - 1));
                prop_assert!(s.alpha(t) < s.alpha(t - 1));
            }
        }
    }

    // A mock that replays whatever noise it is told to; the perfect denoiser
    // for its batch.
    struct EchoDenoiser {
        n: usize,
        t_max: usize,
        eps: Vec<f64>,
    }

    impl NoisePredictor for EchoDenoiser {
        fn seq_len(&self) -> usize {
            self.n
        }
        fn t_max(&self) -> usize {
            self.t_max
        }
        fn predict_batch(
            &self,
            tape: &mut Tape,
            _xt: &[f64],
            _cond: &[f64],
            _t: &[u32],
            _mode: Mode,
            _rng: &mut Rng,
        ) -> Result<Var> {
            Ok(tape.constant(self.eps.clone(), vec![self.eps.len(), 1])?)
        }
    }

    struct ZeroDenoiser {
        n: usize,
        t_max: usize,
    }

    impl NoisePredictor for ZeroDenoiser {
        fn seq_len(&self) -> usize {
            self.n
        }
        fn t_max(&self) -> usize {
            self.t_max
        }
        fn predict_batch(
            &self,
            tape: &mut Tape,
            xt: &[f64],
            _cond: &[f64],
            _t: &[u32],
            _mode: Mode,
            _rng: &mut Rng,
        ) -> Result<Var> {
            Ok(tape.constant(vec![0.0; xt.len()], vec![xt.len(), 1])?)
        }
    }

    fn make_batch(rng: &mut Rng, b: usize, n: usize, schedule: &NoiseSchedule) -> DiffusionBatch {
        let x0: Vec<f64> = (0..b * n).map(|_| rng.uniform()).collect();
        let cond: Vec<f64> = (0..b * n).map(|_| rng.uniform()).collect();
        let t: Vec<u32> = (0..b).map(|_| rng.below(schedule.t_max()) as u32 + 1).collect();
        let eps = rng.normal_vec(b * n);
        DiffusionBatch::new(x0, cond, n, t, eps, schedule).unwrap()
    }

    #[test]
    fn loss_zero_for_perfect_denoiser() {
        let s = NoiseSchedule::quadratic(50, 1e-4, 0.5).unwrap();
        let mut rng = Rng::new(4);
        let batch = make_batch(&mut rng, 3, 6, &s);
        let model = EchoDenoiser { n: 6, t_max: 50, eps: batch.eps.clone() };
        let mut tape = Tape::new();
        let loss = training_loss(&mut tape, &model, &batch, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(loss), 0.0);
    }

    #[test]
    fn loss_near_one_for_zero_denoiser() {
        let s = NoiseSchedule::quadratic(50, 1e-4, 0.5).unwrap();
        let mut rng = Rng::new(5);
        let batch = make_batch(&mut rng, 500, 24, &s);
        let model = ZeroDenoiser { n: 24, t_max: 50 };
        let mut tape = Tape::new();
        let loss = training_loss(&mut tape, &model, &batch, Mode::Eval, &mut rng).unwrap();
        let v = tape.value(loss);
        assert!((v - 1.0).abs() < 0.05, "loss {v}");
        assert!(v >= 0.0);
    }

    #[test]
    fn sampler_shape_and_determinism() {
        let s = NoiseSchedule::quadratic(30, 1e-4, 0.5).unwrap();
        let model = PointMassDenoiser { x0: vec![0.3; 5], schedule: s.clone() };
        let rng = Rng::new(77);
        let curves = sample(&model, &[0.0; 5], &s, &rng, 3).unwrap();
        assert_eq!(curves.len(), 3);
        assert!(curves.iter().all(|c| c.len() == 5));

        let again = sample(&model, &[0.0; 5], &s, &rng, 3).unwrap();
        assert_eq!(curves, again);
    }

    #[test]
    fn sampler_concentrates_on_point_mass() {
        // With the analytic denoiser for a one-point distribution, sampled
        // curves must average to that point.
        let s = NoiseSchedule::quadratic(200, 1e-4, 0.5).unwrap();
        let x0: Vec<f64> = (0..24).map(|i| 0.5 + 0.3 * (i as f64 / 4.0).sin()).collect();
        let model = PointMassDenoiser { x0: x0.clone(), schedule: s.clone() };
        let rng = Rng::new(2718);
        let curves = sample(&model, &vec![0.0; 24], &s, &rng, 200).unwrap();
        for j in 0..24 {
            let mean = curves.iter().map(|c| c[j]).sum::<f64>() / curves.len() as f64;
            assert!((mean - x0[j]).abs() < 0.05, "point {j}: {mean} vs {}", x0[j]);
        }
    }

    fn tiny_model(t_max: usize, seed: u64) -> crate::denoiser::DalnetModel {
        let hp = crate::denoiser::Hyperparams {
            hidden: 8,
            seq_len: 6,
            t_max,
            heads: vec![crate::attention::MaskKind::Global],
            temporal_dim: 4,
            dropout: 0.1,
        };
        crate::denoiser::DalnetModel::init(hp, seed).unwrap()
    }

    fn constant_samples(count: usize) -> Vec<TrainSample> {
        let curve: Vec<f64> = (0..6).map(|i| 0.3 + 0.1 * (i as f64)).collect();
        (0..count)
            .map(|_| TrainSample { condition: curve.clone(), target: curve.clone() })
            .collect()
    }

    #[test]
    fn train_zero_learning_rate_leaves_params() {
        let mut model = tiny_model(20, 1);
        let before: Vec<Vec<f64>> =
            model.params().iter().map(|(_, p)| p.data().to_vec()).collect();
        let s = NoiseSchedule::quadratic(20, 1e-4, 0.5).unwrap();
        let cfg = TrainConfig {
            t_max: 20,
            learning_rate: 0.0,
            batch_size: 1,
            epochs: 1,
            ..TrainConfig::default()
        };
        let mut rng = Rng::new(2);
        train(&mut model, &constant_samples(1), &s, &cfg, &mut rng).unwrap();
        for ((_, p), b) in model.params().iter().zip(&before) {
            assert_eq!(p.data(), &b[..]);
        }
    }

    #[test]
    fn train_reports_one_loss_per_epoch() {
        let mut model = tiny_model(20, 1);
        let s = NoiseSchedule::quadratic(20, 1e-4, 0.5).unwrap();
        let cfg = TrainConfig { t_max: 20, batch_size: 4, epochs: 3, ..TrainConfig::default() };
        let mut rng = Rng::new(3);
        let report = train(&mut model, &constant_samples(8), &s, &cfg, &mut rng).unwrap();
        assert_eq!(report.epoch_losses.len(), 3);
        assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn train_learns_degenerate_dataset() {
        let mut model = tiny_model(20, 4);
        let s = NoiseSchedule::quadratic(20, 1e-4, 0.5).unwrap();
        let cfg = TrainConfig {
            t_max: 20,
            batch_size: 8,
            epochs: 12,
            learning_rate: 2e-3,
            ..TrainConfig::default()
        };
        let mut rng = Rng::new(5);
        let report = train(&mut model, &constant_samples(16), &s, &cfg, &mut rng).unwrap();
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(last < first, "no improvement: first {first}, last {last}");
    }

    #[test]
    fn train_rejects_empty_dataset() {
        let mut model = tiny_model(20, 1);
        let s = NoiseSchedule::quadratic(20, 1e-4, 0.5).unwrap();
        let mut rng = Rng::new(2);
        assert!(matches!(
            train(&mut model, &[], &s, &TrainConfig::default(), &mut rng),
            Err(DiffusionError::EmptyDataset)
        ));
    }

    #[test]
    fn train_same_seed_same_history() {
        let run = || {
            let mut model = tiny_model(20, 9);
            let s = NoiseSchedule::quadratic(20, 1e-4, 0.5).unwrap();
            let cfg =
                TrainConfig { t_max: 20, batch_size: 4, epochs: 2, ..TrainConfig::default() };
            let mut rng = Rng::new(10);
            train(&mut model, &constant_samples(8), &s, &cfg, &mut rng)
                .unwrap()
                .epoch_losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn train_aborts_on_divergence() {
        let mut model = tiny_model(20, 1);
        let s = NoiseSchedule::quadratic(20, 1e-4, 0.5).unwrap();
        // Steps this large overflow the attention logits on the next forward
        // pass, which must surface as a non-finite-loss abort.
        let cfg = TrainConfig {
            t_max: 20,
            learning_rate: 1e200,
            batch_size: 8,
            epochs: 3,
            ..TrainConfig::default()
        };
        let mut rng = Rng::new(2);
        let result = train(&mut model, &constant_samples(8), &s, &cfg, &mut rng);
        assert!(
            matches!(result, Err(DiffusionError::NonFiniteLoss { .. })),
            "expected divergence abort, got {result:?}"
        );
    }

    #[test]
    fn sampler_rejects_mismatched_schedule() {
        let s200 = NoiseSchedule::quadratic(200, 1e-4, 0.5).unwrap();
        let s50 = NoiseSchedule::quadratic(50, 1e-4, 0.5).unwrap();
        let model = PointMassDenoiser { x0: vec![0.5; 4], schedule: s200 };
        let rng = Rng::new(1);
        assert!(matches!(
            sample(&model, &[0.0; 4], &s50, &rng, 2),
            Err(DiffusionError::ScheduleMismatch { .. })
        ));
    }
}
