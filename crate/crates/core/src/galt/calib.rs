//! Per-layer calibration data: one activation matrix per generation step,
//! each the row-concatenation of every sample's activation at that step.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth;

/// Coarse-to-fine token counts for ten steps, ending at a 16 x 16 map.
pub const DEFAULT_SCHEDULE: [usize; 10] = [1, 4, 9, 16, 25, 36, 64, 100, 169, 256];

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    steps: Vec<Array2<f64>>,
    token_counts: Vec<usize>,
    samples: usize,
}

impl CalibrationSet {
    /// Validates that step `i` holds `samples * token_counts[i]` rows, that all
    /// steps share one channel count, and that token counts strictly increase.
    pub fn new(steps: Vec<Array2<f64>>, token_counts: Vec<usize>, samples: usize) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::input("calibration set needs at least one step"));
        }
        if steps.len() != token_counts.len() {
            return Err(Error::input(format!(
                "{} steps but {} token counts",
                steps.len(),
                token_counts.len()
            )));
        }
        if samples == 0 {
            return Err(Error::input("calibration set needs at least one sample"));
        }
        if token_counts.windows(2).any(|w| w[0] >= w[1]) || token_counts[0] == 0 {
            return Err(Error::input(format!(
                "token counts must be positive and strictly increasing, got {token_counts:?}"
            )));
        }
        let dim = steps[0].ncols();
        for (i, (x, &t)) in steps.iter().zip(&token_counts).enumerate() {
            if x.ncols() != dim {
                return Err(Error::input(format!(
                    "step {i} has {} channels, step 0 has {dim}",
                    x.ncols()
                )));
            }
            if x.nrows() != samples * t {
                return Err(Error::input(format!(
                    "step {i} has {} rows, expected {samples} x {t}",
                    x.nrows()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::input(format!("step {i} contains non-finite values")));
            }
        }
        Ok(CalibrationSet {
            steps,
            token_counts,
            samples,
        })
    }

    /// Infers the sample count from the first step.
    pub fn from_steps(steps: Vec<Array2<f64>>, token_counts: Vec<usize>) -> Result<Self> {
        let first = steps
            .first()
            .ok_or_else(|| Error::input("calibration set needs at least one step"))?;
        let t0 = *token_counts
            .first()
            .ok_or_else(|| Error::input("empty token schedule"))?;
        if t0 == 0 || first.nrows() % t0 != 0 {
            return Err(Error::input(format!(
                "step 0 has {} rows, not a multiple of {t0} tokens",
                first.nrows()
            )));
        }
        let samples = first.nrows() / t0;
        Self::new(steps, token_counts, samples)
    }

    pub fn steps(&self) -> &[Array2<f64>] {
        &self.steps
    }

    pub fn step(&self, i: usize) -> ArrayView2<'_, f64> {
        self.steps[i].view()
    }

    pub fn token_counts(&self) -> &[usize] {
        &self.token_counts
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.steps[0].ncols()
    }

    pub fn into_steps(self) -> Vec<Array2<f64>> {
        self.steps
    }
}

/// `samples[s][i]` is sample `s`'s `T_i x C` activation at step `i`.
pub fn build_calibration(samples: &[Vec<Array2<f64>>], schedule: &[usize]) -> Result<CalibrationSet> {
    if samples.is_empty() {
        return Err(Error::input("no calibration samples"));
    }
    for (s, steps) in samples.iter().enumerate() {
        if steps.len() != schedule.len() {
            return Err(Error::input(format!(
                "sample {s} has {} steps, schedule has {}",
                steps.len(),
                schedule.len()
            )));
        }
        for (i, (x, &t)) in steps.iter().zip(schedule).enumerate() {
            if x.nrows() != t {
                return Err(Error::input(format!(
                    "sample {s} step {i} has {} tokens, schedule says {t}",
                    x.nrows()
                )));
            }
        }
    }
    let dim = samples[0][0].ncols();
    if let Some((s, i)) = samples.iter().enumerate().find_map(|(s, steps)| {
        steps
            .iter()
            .position(|x| x.ncols() != dim)
            .map(|i| (s, i))
    }) {
        return Err(Error::input(format!(
            "sample {s} step {i} has {} channels, expected {dim}",
            samples[s][i].ncols()
        )));
    }
    let steps = (0..schedule.len())
        .map(|i| {
            let views: Vec<_> = samples.iter().map(|steps| steps[i].view()).collect();
            concatenate(Axis(0), &views).expect("column counts checked")
        })
        .collect();
    CalibrationSet::new(steps, schedule.to_vec(), samples.len())
}

/// Planted outlier channels. Each step picks `per_step` channels out of a
/// fixed random pool of `pool` channels and shifts them by a random sign
/// times a magnitude drawn from `magnitude`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub pool: usize,
    pub per_step: usize,
    pub magnitude: (f64, f64),
}

impl OutlierSpec {
    pub const NONE: OutlierSpec = OutlierSpec {
        pool: 0,
        per_step: 0,
        magnitude: (0.0, 0.0),
    };
}

impl Default for OutlierSpec {
    fn default() -> Self {
        OutlierSpec {
            pool: 32,
            per_step: 4,
            magnitude: (10.0, 50.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCalibration {
    pub calib: CalibrationSet,
    /// Outlier channels planted at each step, ascending.
    pub outlier_channels: Vec<Vec<usize>>,
}

/// Standard-normal activations with time-varying outlier channels.
pub fn synth_calibration(
    seed: u64,
    schedule: &[usize],
    samples: usize,
    dim: usize,
    outliers: &OutlierSpec,
) -> Result<SynthCalibration> {
    if outliers.per_step > outliers.pool || outliers.pool > dim {
        return Err(Error::input(format!(
            "outlier spec needs per_step <= pool <= dim, got {} / {} / {dim}",
            outliers.per_step, outliers.pool
        )));
    }
    let (lo, hi) = outliers.magnitude;
    if outliers.per_step > 0 && !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::input(format!("bad outlier magnitude range ({lo}, {hi})")));
    }
    let mut rng = synth::rng(seed);
    let pool: Vec<usize> = sample(&mut rng, dim, outliers.pool).into_vec();
    let mut steps = Vec::with_capacity(schedule.len());
    let mut planted = Vec::with_capacity(schedule.len());
    for &t in schedule {
        let mut x = Array2::from_shape_simple_fn((samples * t, dim), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        let mut chosen: Vec<usize> = sample(&mut rng, pool.len(), outliers.per_step)
            .into_iter()
            .map(|k| pool[k])
            .collect();
        chosen.sort_unstable();
        for &c in &chosen {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mag = rng.random_range(lo..=hi);
            x.column_mut(c).mapv_inplace(|v| v + sign * mag);
        }
        steps.push(x);
        planted.push(chosen);
    }
    Ok(SynthCalibration {
        calib: CalibrationSet::new(steps, schedule.to_vec(), samples)?,
        outlier_channels: planted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concatenation_shapes() {
        let mk = |t: usize, v: f64| Array2::from_elem((t, 8), v);
        let samples = vec![vec![mk(1, 0.0), mk(4, 1.0)], vec![mk(1, 2.0), mk(4, 3.0)]];
        let c = build_calibration(&samples, &[1, 4]).unwrap();
        assert_eq!(c.step(0).dim(), (2, 8));
        assert_eq!(c.step(1).dim(), (8, 8));
        // sample order is preserved
        assert_eq!(c.step(1)[[0, 0]], 1.0);
        assert_eq!(c.step(1)[[4, 0]], 3.0);
    }

    #[test]
    fn hundred_samples() {
        let sched = [1, 4, 9];
        let samples: Vec<Vec<Array2<f64>>> = (0..100)
            .map(|s| sched.iter().map(|&t| Array2::from_elem((t, 4), s as f64)).collect())
            .collect();
        let c = build_calibration(&samples, &sched).unwrap();
        assert_eq!(c.len(), 3);
        for (i, &t) in sched.iter().enumerate() {
            assert_eq!(c.step(i).nrows(), 100 * t);
        }
    }

    #[test]
    fn single_sample_is_identity() {
        let steps = vec![synth::gaussian(1, 8, 1.0, 1), synth::gaussian(4, 8, 1.0, 2)];
        let c = build_calibration(std::slice::from_ref(&steps), &[1, 4]).unwrap();
        assert_eq!(c.steps(), &steps[..]);
    }

    #[test]
    fn ragged_schedules_rejected() {
        let a = vec![Array2::zeros((1, 4)), Array2::zeros((4, 4))];
        let b = vec![Array2::zeros((1, 4)), Array2::zeros((3, 4))];
        assert!(build_calibration(&[a.clone(), b], &[1, 4]).is_err());
        let short = vec![Array2::zeros((1, 4))];
        assert!(build_calibration(&[a.clone(), short], &[1, 4]).is_err());
        let wide = vec![Array2::zeros((1, 5)), Array2::zeros((4, 5))];
        assert!(build_calibration(&[a, wide], &[1, 4]).is_err());
    }

    #[test]
    fn schedule_must_increase() {
        let steps = vec![Array2::zeros((4, 4)), Array2::zeros((4, 4))];
        assert!(CalibrationSet::new(steps, vec![4, 4], 1).is_err());
    }

    #[test]
    fn synth_without_outliers_is_plain_gaussian() {
        let s = synth_calibration(3, &[1, 4, 16], 2, 64, &OutlierSpec::NONE).unwrap();
        assert!(s.outlier_channels.iter().all(|c| c.is_empty()));
        let all: Vec<f64> = s.calib.steps().iter().flat_map(|x| x.iter().copied()).collect();
        assert!(all.iter().all(|v| v.abs() < 6.0));
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = OutlierSpec::default();
        let a = synth_calibration(9, &DEFAULT_SCHEDULE, 2, 256, &spec).unwrap();
        let b = synth_calibration(9, &DEFAULT_SCHEDULE, 2, 256, &spec).unwrap();
        assert_eq!(a.calib, b.calib);
        assert_eq!(a.outlier_channels, b.outlier_channels);
    }

    #[test]
    fn outliers_move_between_steps() {
        let spec = OutlierSpec::default();
        let s = synth_calibration(1, &DEFAULT_SCHEDULE, 2, 256, &spec).unwrap();
        let distinct: std::collections::BTreeSet<_> = s.outlier_channels.iter().collect();
        assert!(distinct.len() > 1);
        for (x, chans) in s.calib.steps().iter().zip(&s.outlier_channels) {
            assert_eq!(chans.len(), 4);
            for &c in chans {
                let mean = x.column(c).mean().unwrap().abs();
                assert!(mean > 5.0, "channel {c} mean {mean}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn prop_step_rows_follow_schedule(
            steps in proptest::collection::btree_set(1usize..20, 1..6),
            samples in 1usize..4,
            seed in 0u64..1000,
        ) {
            let schedule: Vec<usize> = steps.into_iter().collect();
            let s = synth_calibration(seed, &schedule, samples, 16, &OutlierSpec { pool: 4, per_step: 2, magnitude: (5.0, 6.0) }).unwrap();
            proptest::prop_assert_eq!(s.calib.len(), schedule.len());
            for (i, t) in schedule.iter().enumerate() {
                proptest::prop_assert_eq!(s.calib.step(i).nrows(), samples * t);
                proptest::prop_assert_eq!(s.calib.step(i).ncols(), 16);
            }
            proptest::prop_assert!(s.calib.token_counts().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
