//! Cumulative noise schedules and the two deterministic DDIM step maps.
//!
//! `alphas[t]` is the cumulative product coefficient for timestep `t`, with
//! `alphas[0] == 1` standing for clean data. A denoising step moves
//! `t -> t-1`; the inverse step moves `t-1 -> t` using the same coefficients.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default number of sampling steps.
pub const DEFAULT_STEPS: usize = 50;
/// Length of the underlying training-time beta grid for the linear schedule.
pub const DEFAULT_TRAIN_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
    ConstantTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleParams {
    /// Betas linearly spaced over `train_steps`; the `T` sampling steps pick
    /// evenly spaced points `floor(t * train_steps / T)` of the cumulative product.
    /// `train_steps == T` gives the plain per-step product.
    LinearBeta {
        beta_start: f64,
        beta_end: f64,
        train_steps: usize,
    },
    /// Squared-cosine cumulative schedule with offset `s`, betas clipped at 0.999.
    Cosine { offset: f64 },
    /// `alpha_t = value` for every `t >= 1`. Test-only.
    ConstantTest { value: f64 },
}

impl ScheduleParams {
    pub fn kind(&self) -> ScheduleKind {
        match self {
            ScheduleParams::LinearBeta { .. } => ScheduleKind::LinearBeta,
            ScheduleParams::Cosine { .. } => ScheduleKind::Cosine,
            ScheduleParams::ConstantTest { .. } => ScheduleKind::ConstantTest,
        }
    }

    pub fn default_linear() -> Self {
        ScheduleParams::LinearBeta {
            beta_start: 1e-4,
            beta_end: 0.02,
            train_steps: DEFAULT_TRAIN_STEPS,
        }
    }
}

/// Immutable noise schedule. Construct through [`NoiseSchedule::build`] or
/// [`NoiseSchedule::from_alphas`]; both check the invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    num_steps: usize,
    params: Option<ScheduleParams>,
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(params: ScheduleParams, num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        let alphas = match params {
            ScheduleParams::LinearBeta {
                beta_start,
                beta_end,
                train_steps,
            } => {
                if !(beta_start > 0.0 && beta_end >= beta_start && beta_end < 1.0) {
                    return Err(Error::config(format!(
                        "linear betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
                    )));
                }
                if train_steps < num_steps {
                    return Err(Error::config(format!(
                        "train_steps ({train_steps}) must be >= sampling steps ({num_steps})"
                    )));
                }
                let mut cumulative = Vec::with_capacity(train_steps + 1);
                cumulative.push(1.0);
                let mut prod = 1.0;
                for s in 0..train_steps {
                    let beta = if train_steps == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * s as f64 / (train_steps - 1) as f64
                    };
                    prod *= 1.0 - beta;
                    cumulative.push(prod);
                }
                (0..=num_steps)
                    .map(|t| cumulative[t * train_steps / num_steps])
                    .collect()
            }
            ScheduleParams::Cosine { offset } => {
                if !(offset >= 0.0 && offset.is_finite()) {
                    return Err(Error::config(format!("cosine offset must be >= 0, got {offset}")));
                }
                let f = |t: usize| {
                    let u = (t as f64 / num_steps as f64 + offset) / (1.0 + offset);
                    (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                let mut alphas = Vec::with_capacity(num_steps + 1);
                alphas.push(1.0);
                let mut prod = 1.0;
                for t in 1..=num_steps {
                    let beta = (1.0 - f(t) / f(t - 1)).clamp(0.0, 0.999);
                    prod *= 1.0 - beta;
                    alphas.push(prod);
                }
                alphas
            }
            ScheduleParams::ConstantTest { value } => {
                if !(value > 0.0 && value <= 1.0) {
                    return Err(Error::config(format!("constant alpha must be in (0, 1], got {value}")));
                }
                std::iter::once(1.0)
                    .chain(std::iter::repeat_n(value, num_steps))
                    .collect()
            }
        };
        let mut sched = Self::from_alphas(params.kind(), alphas)?;
        sched.params = Some(params);
        Ok(sched)
    }

    /// Wraps an explicit alpha sequence (index 0..=T) after checking invariants.
    pub fn from_alphas(kind: ScheduleKind, alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::config("alpha sequence needs entries for t = 0 and t >= 1"));
        }
        if alphas[0] != 1.0 {
            return Err(Error::config(format!(
                "invariant alpha_0 == 1 violated (alpha_0 = {})",
                alphas[0]
            )));
        }
        if let Some((t, a)) = alphas
            .iter()
            .enumerate()
            .find(|(_, a)| !(**a > 0.0 && **a <= 1.0))
        {
            return Err(Error::config(format!(
                "invariant 0 < alpha_t <= 1 violated at t = {t} (alpha = {a})"
            )));
        }
        if kind != ScheduleKind::ConstantTest {
            if let Some(t) = (1..alphas.len()).find(|&t| alphas[t] >= alphas[t - 1]) {
                return Err(Error::config(format!(
                    "invariant alpha-monotonicity violated: alpha_{t} = {} >= alpha_{} = {}",
                    alphas[t],
                    t - 1,
                    alphas[t - 1]
                )));
            }
        }
        Ok(Self {
            kind,
            num_steps: alphas.len() - 1,
            params: None,
            alphas,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn params(&self) -> Option<&ScheduleParams> {
        self.params.as_ref()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// Hex SHA-256 over the kind tag and the alpha bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("{:?}", self.kind).as_bytes());
        for a in &self.alphas {
            hasher.update(a.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// A batch of token-grid latents `[batch, tokens, channels]` at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub data: Array3<f64>,
    pub timestep: usize,
    pub seed_lineage: Vec<u64>,
}

impl LatentState {
    pub fn new(data: Array3<f64>, timestep: usize) -> Self {
        Self {
            data,
            timestep,
            seed_lineage: Vec::new(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn with_data(&self, data: Array3<f64>, timestep: usize) -> Self {
        Self {
            data,
            timestep,
            seed_lineage: self.seed_lineage.clone(),
        }
    }
}

fn check_eps(x: &LatentState, eps: &Array3<f64>) -> Result<()> {
    if x.data.shape() != eps.shape() {
        return Err(Error::precondition(format!(
            "noise prediction shape {:?} does not match latent shape {:?}",
            eps.shape(),
            x.data.shape()
        )));
    }
    if !eps.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite noise prediction"));
    }
    Ok(())
}

fn finite_or_err(state: LatentState, what: &str) -> Result<LatentState> {
    if state.is_finite() {
        Ok(state)
    } else {
        Err(Error::numeric(format!("{what} produced a non-finite latent")))
    }
}

/// Deterministic denoising step `x_t -> x_{t-1}`.
pub fn denoise_step(x: &LatentState, eps: &Array3<f64>, sched: &NoiseSchedule) -> Result<LatentState> {
    let t = x.timestep;
    if t == 0 {
        return Err(Error::precondition("cannot denoise below timestep 0"));
    }
    if t > sched.num_steps() {
        return Err(Error::precondition(format!(
            "timestep {t} exceeds schedule length {}",
            sched.num_steps()
        )));
    }
    check_eps(x, eps)?;
    let a_t = sched.alpha(t);
    let a_prev = sched.alpha(t - 1);
    let (sa_t, sna_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (sa_prev, sna_prev) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    let data = Zip::from(&x.data)
        .and(eps)
        .map_collect(|&xv, &e| sa_prev * (xv - sna_t * e) / sa_t + sna_prev * e);
    finite_or_err(x.with_data(data, t - 1), "denoise step")
}

/// Inverse (inversion) step `x_{t-1} -> x_t`. `x_prev.timestep` is `t-1`.
pub fn inverse_step(x_prev: &LatentState, eps: &Array3<f64>, sched: &NoiseSchedule) -> Result<LatentState> {
    let prev = x_prev.timestep;
    if prev >= sched.num_steps() {
        return Err(Error::precondition(format!(
            "cannot invert past the final timestep {}",
            sched.num_steps()
        )));
    }
    check_eps(x_prev, eps)?;
    let t = prev + 1;
    let a_t = sched.alpha(t);
    let a_prev = sched.alpha(prev);
    if !(a_t > 0.0 && a_t <= 1.0 && a_prev > 0.0 && a_prev <= 1.0) {
        return Err(Error::numeric(format!(
            "alpha values outside (0, 1]: alpha_{t} = {a_t}, alpha_{prev} = {a_prev}"
        )));
    }
    let x_coef = (a_t / a_prev).sqrt();
    let eps_coef = a_t.sqrt() * ((1.0 / a_t - 1.0).sqrt() - (1.0 / a_prev - 1.0).sqrt());
    let data = Zip::from(&x_prev.data)
        .and(eps)
        .map_collect(|&xv, &e| x_coef * xv + eps_coef * e);
    finite_or_err(x_prev.with_data(data, t), "inverse step")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn scalar(v: f64, t: usize) -> LatentState {
        LatentState::new(Array3::from_elem((1, 1, 1), v), t)
    }

    fn linear_literal(t: usize) -> ScheduleParams {
        ScheduleParams::LinearBeta {
            beta_start: 1e-4,
            beta_end: 0.02,
            train_steps: t,
        }
    }

    #[test]
    fn constant_schedule_definition() {
        let s = NoiseSchedule::build(ScheduleParams::ConstantTest { value: 0.5 }, 10).unwrap();
        assert_eq!(s.alpha(0), 1.0);
        assert!((1..=10).all(|t| s.alpha(t) == 0.5));
    }

    #[test]
    fn linear_schedule_matches_direct_product() {
        let s = NoiseSchedule::build(linear_literal(50), 50).unwrap();
        // direct cumulative product oracle
        let mut prod = 1.0;
        for i in 0..50 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 49.0;
            prod *= 1.0 - beta;
            assert!((s.alpha(i + 1) - prod).abs() < 1e-15);
        }
        assert!((s.alpha(50) - 0.602951597329715).abs() < 1e-12);
    }

    #[test]
    fn linear_single_step() {
        let s = NoiseSchedule::build(linear_literal(1), 1).unwrap();
        assert_eq!(s.alphas(), &[1.0, 1.0 - 1e-4]);
    }

    #[test]
    fn subsampled_linear_endpoints() {
        let s = NoiseSchedule::build(ScheduleParams::default_linear(), 50).unwrap();
        let full = NoiseSchedule::build(ScheduleParams::default_linear(), 1000).unwrap();
        for t in 0..=50 {
            assert_eq!(s.alpha(t), full.alpha(20 * t));
        }
        assert!(s.alpha(50) < 1e-4 && s.alpha(50) > 0.0);
    }

    #[test]
    fn cosine_is_monotone_and_positive() {
        let s = NoiseSchedule::build(ScheduleParams::Cosine { offset: 0.008 }, 50).unwrap();
        assert!(s.alpha(50) > 0.0);
        assert!(s.alphas().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(NoiseSchedule::build(linear_literal(10), 0).is_err());
        assert!(NoiseSchedule::build(ScheduleParams::ConstantTest { value: 0.0 }, 3).is_err());
        let err = NoiseSchedule::from_alphas(ScheduleKind::LinearBeta, vec![1.0, 0.5, 0.7]).unwrap_err();
        assert!(err.to_string().contains("alpha-monotonicity"));
        assert!(NoiseSchedule::from_alphas(ScheduleKind::Cosine, vec![0.9, 0.5]).is_err());
    }

    #[test]
    fn zero_eps_denoise_is_rescaling() {
        let s = NoiseSchedule::build(linear_literal(20), 20).unwrap();
        let x = scalar(1.7, 12);
        let out = denoise_step(&x, &Array3::zeros((1, 1, 1)), &s).unwrap();
        let want = (s.alpha(11) / s.alpha(12)).sqrt() * 1.7;
        assert!((out.data[[0, 0, 0]] - want).abs() < 1e-14);
        assert_eq!(out.timestep, 11);
        let back = inverse_step(&out, &Array3::zeros((1, 1, 1)), &s).unwrap();
        assert!((back.data[[0, 0, 0]] - 1.7).abs() < 1e-14);
        assert_eq!(back.timestep, 12);
    }

    #[test]
    fn constant_schedule_steps_are_identity() {
        let s = NoiseSchedule::build(ScheduleParams::ConstantTest { value: 0.3 }, 5).unwrap();
        let x = scalar(-0.4, 3);
        let eps = Array3::from_elem((1, 1, 1), 2.5);
        let down = denoise_step(&x, &eps, &s).unwrap();
        assert!((down.data[[0, 0, 0]] + 0.4).abs() < 1e-15);
        let x2 = scalar(0.9, 2);
        let up = inverse_step(&x2, &eps, &s).unwrap();
        assert!((up.data[[0, 0, 0]] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn scalar_denoise_oracle() {
        // alpha_t = 0.25, alpha_{t-1} = 0.64, x = 1, eps = 1:
        // 0.8 * (1 - sqrt(0.75)) / 0.5 + 0.6
        let s = NoiseSchedule::from_alphas(ScheduleKind::LinearBeta, vec![1.0, 0.64, 0.25]).unwrap();
        let oracle = 0.8 * (1.0 - 0.75f64.sqrt()) / 0.5 + 0.6;
        let out = denoise_step(&scalar(1.0, 2), &Array3::from_elem((1, 1, 1), 1.0), &s).unwrap();
        assert!((out.data[[0, 0, 0]] - oracle).abs() < 1e-15);
        assert!((oracle - 0.814359353944898).abs() < 1e-12);
    }

    #[test]
    fn step_preconditions() {
        let s = NoiseSchedule::build(linear_literal(4), 4).unwrap();
        let eps = Array3::zeros((1, 1, 1));
        assert!(matches!(denoise_step(&scalar(1.0, 0), &eps, &s), Err(Error::Precondition(_))));
        assert!(matches!(inverse_step(&scalar(1.0, 4), &eps, &s), Err(Error::Precondition(_))));
        let nan = Array3::from_elem((1, 1, 1), f64::NAN);
        assert!(matches!(denoise_step(&scalar(1.0, 2), &nan, &s), Err(Error::Numeric(_))));
        let wrong = Array3::zeros((1, 2, 1));
        assert!(denoise_step(&scalar(1.0, 2), &wrong, &s).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_identity(
            a in 1e-3f64..=1.0,
            b in 1e-3f64..=1.0,
            xs in proptest::collection::vec(-3.0f64..3.0, 8),
            c in -3.0f64..3.0,
        ) {
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            prop_assume!(hi > lo);
            let s = NoiseSchedule::from_alphas(ScheduleKind::LinearBeta, vec![1.0, hi, lo]).unwrap();
            let x = LatentState::new(Array3::from_shape_vec((1, 8, 1), xs.clone()).unwrap(), 2);
            let eps = Array3::from_elem((1, 8, 1), c);
            let back = inverse_step(&denoise_step(&x, &eps, &s).unwrap(), &eps, &s).unwrap();
            let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let err = (&back.data - &x.data).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(err / norm < 1e-6 || err < 1e-12);
            prop_assert_eq!(back.timestep, 2);
        }

        #[test]
        fn denoise_is_linear(
            a in 0.05f64..0.95,
            x in -2.0f64..2.0, y in -2.0f64..2.0,
            e in -2.0f64..2.0, f in -2.0f64..2.0,
            p in -2.0f64..2.0, q in -2.0f64..2.0,
        ) {
            let s = NoiseSchedule::from_alphas(ScheduleKind::LinearBeta, vec![1.0, (a + 1.0) / 2.0, a]).unwrap();
            let one = |v: f64| Array3::from_elem((1, 1, 1), v);
            let lhs = denoise_step(&scalar(p * x + q * y, 2), &one(p * e + q * f), &s).unwrap();
            let dx = denoise_step(&scalar(x, 2), &one(e), &s).unwrap();
            let dy = denoise_step(&scalar(y, 2), &one(f), &s).unwrap();
            let rhs = p * dx.data[[0, 0, 0]] + q * dy.data[[0, 0, 0]];
            prop_assert!((lhs.data[[0, 0, 0]] - rhs).abs() < 1e-9);
        }
    }
}
