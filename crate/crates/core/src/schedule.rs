//! Diffusion noise schedules and timestep plans for retimed decoding.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn code(self) -> u8 {
        match self {
            ScheduleKind::Linear => 0,
            ScheduleKind::Cosine => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ScheduleKind::Linear),
            1 => Some(ScheduleKind::Cosine),
            _ => None,
        }
    }
}

/// Constructor record; enough to rebuild a schedule exactly.
///
/// `a`/`b` are `beta_min`/`beta_max` for linear schedules; for cosine
/// schedules `a` is the offset `s` and `b` is unused.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub n_train: u32,
    pub a: f64,
    pub b: f64,
}

impl ScheduleParams {
    /// Linear schedule with the 1000-step endpoints rescaled to `n_train`.
    pub fn linear_default(n_train: u32) -> Self {
        let r = 1000.0 / n_train as f64;
        Self { kind: ScheduleKind::Linear, n_train, a: 1e-4 * r, b: (0.02 * r).min(0.999) }
    }

    pub fn cosine_default(n_train: u32) -> Self {
        Self { kind: ScheduleKind::Cosine, n_train, a: 0.008, b: 0.0 }
    }

    pub fn build(&self) -> Result<DiffusionSchedule> {
        match self.kind {
            ScheduleKind::Linear => build_linear_schedule(self.n_train as usize, self.a, self.b),
            ScheduleKind::Cosine => build_cosine_schedule(self.n_train as usize, self.a),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    params: ScheduleParams,
    /// `beta[n - 1]` is β_n.
    beta: Vec<f64>,
    /// `alpha_bar[0] = 1`, length `n_train + 1`.
    alpha_bar: Vec<f64>,
}

const MAX_BETA: f64 = 0.999;

impl DiffusionSchedule {
    fn from_betas(params: ScheduleParams, beta: Vec<f64>) -> Result<Self> {
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for &b in &beta {
            let next = acc * (1.0 - b);
            if !(next > 0.0 && next < acc) {
                return Err(Error::InvalidRange(format!("alpha_bar stops decreasing or underflows at n = {}", alpha_bar.len())));
            }
            acc = next;
            alpha_bar.push(acc);
        }
        Ok(Self { params, beta, alpha_bar })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn kind(&self) -> ScheduleKind {
        self.params.kind
    }

    pub fn n_train(&self) -> usize {
        self.beta.len()
    }

    /// β_1..β_N.
    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// ᾱ_0..ᾱ_N.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }

    /// ᾱ at a continuous position `fraction · n_train`, linearly interpolated.
    pub fn alpha_bar_at(&self, fraction: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidRange(format!("fraction {fraction} outside [0, 1]")));
        }
        let pos = fraction * self.n_train() as f64;
        let nearest = pos.round();
        if (pos - nearest).abs() < 1e-9 {
            return Ok(self.alpha_bar[nearest as usize]);
        }
        let lo = pos.floor() as usize;
        let t = pos - lo as f64;
        Ok(self.alpha_bar[lo] * (1.0 - t) + self.alpha_bar[lo + 1] * t)
    }

    pub fn plan(&self, n_test: usize) -> Result<TimestepPlan> {
        plan_timesteps(self, n_test)
    }
}

pub fn build_linear_schedule(n_train: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    if n_train == 0 || n_train > u32::MAX as usize {
        return Err(Error::InvalidRange(format!("n_train {n_train}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidRange(format!("need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")));
    }
    let beta = (0..n_train)
        .map(|i| {
            if n_train == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (n_train - 1) as f64
            }
        })
        .collect();
    let params = ScheduleParams { kind: ScheduleKind::Linear, n_train: n_train as u32, a: beta_min, b: beta_max };
    DiffusionSchedule::from_betas(params, beta)
}

pub fn build_cosine_schedule(n_train: usize, s: f64) -> Result<DiffusionSchedule> {
    if n_train == 0 || n_train > u32::MAX as usize {
        return Err(Error::InvalidRange(format!("n_train {n_train}")));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidRange(format!("cosine offset must be positive, got {s}")));
    }
    let f = |t: f64| {
        let c = ((t + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
        c * c
    };
    let f0 = f(0.0);
    let target = |n: usize| f(n as f64 / n_train as f64) / f0;
    // The cumulative product is recomputed from clipped betas so that β and ᾱ
    // stay consistent to rounding error.
    let beta = (1..=n_train)
        .map(|n| {
            let b = 1.0 - target(n) / target(n - 1);
            b.clamp(f64::MIN_POSITIVE, MAX_BETA)
        })
        .collect();
    let params = ScheduleParams { kind: ScheduleKind::Cosine, n_train: n_train as u32, a: s, b: 0.0 };
    DiffusionSchedule::from_betas(params, beta)
}

/// Subsampled decoding steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepPlan {
    pub n_test: usize,
    /// Training indices in `[1, n_train]`, strictly increasing, last = `n_train`.
    pub indices: Vec<usize>,
    /// `(k + 1) / n_test` for entry `k`; the network's time input.
    pub fractions: Vec<f64>,
}

pub fn plan_timesteps(schedule: &DiffusionSchedule, n_test: usize) -> Result<TimestepPlan> {
    let n_train = schedule.n_train();
    if n_test == 0 || n_test > n_train {
        return Err(Error::InvalidRange(format!("n_test {n_test} outside [1, {n_train}]")));
    }
    // round(k · n_train / n_test) with halves rounded up, in integers.
    let indices = (1..=n_test)
        .map(|k| {
            let num = 2 * k as u128 * n_train as u128 + n_test as u128;
            (num / (2 * n_test as u128)) as usize
        })
        .collect();
    let fractions = (1..=n_test).map(|k| k as f64 / n_test as f64).collect();
    Ok(TimestepPlan { n_test, indices, fractions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn four_step() -> DiffusionSchedule {
        let params = ScheduleParams { kind: ScheduleKind::Linear, n_train: 4, a: 0.1, b: 0.4 };
        let s = build_linear_schedule(4, 0.1, 0.4).unwrap();
        assert_eq!(s.params(), params);
        s
    }

    #[test]
    fn linear_endpoints_and_product() {
        let s = four_step();
        for (b, e) in s.betas().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((b - e).abs() < 1e-15);
        }
        assert!((s.alpha_bar(4) - 0.9 * 0.8 * 0.7 * 0.6).abs() < 1e-12);
        assert!((s.alpha_bar(4) - 0.3024).abs() < 1e-12);
    }

    #[test]
    fn single_step_schedule() {
        let s = build_linear_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert_eq!(s.alpha_bars(), &[1.0, 0.9]);
    }

    #[test]
    fn cosine_matches_formula() {
        let s = build_cosine_schedule(2, 0.008).unwrap();
        let f = |t: f64| ((t + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - f(0.5) / f(0.0)).abs() < 1e-12);
        // The final implied beta is 1 and gets clipped.
        assert!((s.betas()[1] - MAX_BETA).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_lookup() {
        let s = four_step();
        assert_eq!(s.alpha_bar_at(0.0).unwrap(), 1.0);
        assert_eq!(s.alpha_bar_at(1.0).unwrap(), s.alpha_bar(4));
        assert!((s.alpha_bar_at(0.5).unwrap() - 0.72).abs() < 1e-12);
        let mid = s.alpha_bar_at(0.125).unwrap();
        assert!((mid - 0.95).abs() < 1e-12);
        assert!(s.alpha_bar_at(1.01).is_err());
        assert!(s.alpha_bar_at(-0.1).is_err());
    }

    #[test]
    fn even_plan() {
        let s = build_linear_schedule(100, 1e-3, 2e-2).unwrap();
        let p = s.plan(4).unwrap();
        assert_eq!(p.indices, vec![25, 50, 75, 100]);
        assert_eq!(p.fractions, vec![0.25, 0.5, 0.75, 1.0]);
        assert!(s.plan(0).is_err());
        assert!(s.plan(101).is_err());
    }

    #[test]
    fn constructor_errors() {
        assert!(build_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(build_linear_schedule(10, 0.3, 0.2).is_err());
        assert!(build_linear_schedule(10, 0.0, 0.2).is_err());
        assert!(build_linear_schedule(10, 0.1, 1.0).is_err());
        assert!(build_cosine_schedule(10, 0.0).is_err());
        assert!(build_cosine_schedule(10, -1.0).is_err());
        assert!(build_linear_schedule(5000, 0.5, 0.9).is_err());
    }

    #[test]
    fn default_linear_endpoints_scale_with_length() {
        let p = ScheduleParams::linear_default(2000);
        assert!((p.a - 5e-5).abs() < 1e-18 && (p.b - 0.01).abs() < 1e-15);
    }

    fn check_invariants(s: &DiffusionSchedule) {
        let ab = s.alpha_bars();
        assert_eq!(ab[0], 1.0);
        for n in 1..ab.len() {
            let b = s.betas()[n - 1];
            assert!(b > 0.0 && b < 1.0);
            assert!(ab[n] < ab[n - 1] && ab[n] > 0.0);
            assert!((ab[n] - ab[n - 1] * (1.0 - b)).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn linear_schedules_are_valid(n in 1usize..3000, lo in 1e-6f64..0.05, span in 0.0f64..1.0) {
            let hi = lo + span * 20.0 / n as f64;
            prop_assume!(hi < 1.0);
            check_invariants(&build_linear_schedule(n, lo, hi).unwrap());
        }

        #[test]
        fn cosine_schedules_are_valid(n in 1usize..10000, s in 1e-4f64..0.5) {
            check_invariants(&build_cosine_schedule(n, s).unwrap());
        }

        #[test]
        fn lookup_agrees_on_grid(n in 1usize..500, frac in 0.0f64..1.0) {
            let s = build_cosine_schedule(n, 0.008).unwrap();
            let k = (frac * n as f64).floor() as usize;
            prop_assert_eq!(s.alpha_bar_at(k as f64 / n as f64).unwrap(), s.alpha_bar(k));
        }

        #[test]
        fn plans_are_sorted_and_end_at_n_train(n in 1usize..5000, m in 1usize..5000) {
            let s = build_linear_schedule(n, 1e-4, 0.02).unwrap();
            let m = m.min(n);
            let p = s.plan(m).unwrap();
            prop_assert_eq!(*p.indices.last().unwrap(), n);
            prop_assert!(p.indices[0] >= 1);
            prop_assert!(p.indices.windows(2).all(|w| w[0] < w[1]));
            if m == n {
                prop_assert_eq!(p.indices, (1..=n).collect::<Vec<_>>());
            }
        }
    }
}
