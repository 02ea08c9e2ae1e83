//! Multi-threshold neurons.
//!
//! A neuron carries `2n` signed thresholds, `θ1·2^(p−1)` on the positive side
//! and `−θ2·2^(p−1)` on the negative side, and fires at most one of them per
//! step. Spikes are stored as a `u8` index per neuron: 0 for silence,
//! `1..=n` for the positive channels and `n+1..=2n` for the negative ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Largest supported `n`; keeps indices in a `u8` and ladders finite.
pub const MAX_THRESHOLD_COUNT: usize = 30;

/// The `2n` thresholds of one neuron layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LadderParams", into = "LadderParams")]
pub struct ThresholdLadder {
    theta1: f64,
    theta2: f64,
    n: usize,
    lambda: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LadderParams {
    theta1: f64,
    theta2: f64,
    n: usize,
}

impl TryFrom<LadderParams> for ThresholdLadder {
    type Error = Error;

    fn try_from(p: LadderParams) -> Result<Self> {
        Self::new(p.theta1, p.theta2, p.n)
    }
}

impl From<ThresholdLadder> for LadderParams {
    fn from(l: ThresholdLadder) -> Self {
        Self {
            theta1: l.theta1,
            theta2: l.theta2,
            n: l.n,
        }
    }
}

/// Builds the ladder `[θ1, 2θ1, .., 2^(n−1)θ1, −θ2, .., −2^(n−1)θ2]`.
pub fn build_ladder(theta1: f64, theta2: f64, n: usize) -> Result<ThresholdLadder> {
    ThresholdLadder::new(theta1, theta2, n)
}

impl ThresholdLadder {
    pub fn new(theta1: f64, theta2: f64, n: usize) -> Result<Self> {
        if !(theta1.is_finite() && theta1 > 0.0 && theta2.is_finite() && theta2 > 0.0) {
            return Err(Error::Domain(format!(
                "thresholds must be finite and positive, got θ1={theta1}, θ2={theta2}"
            )));
        }
        if n == 0 || n > MAX_THRESHOLD_COUNT {
            return Err(Error::Domain(format!(
                "threshold count n={n} outside 1..={MAX_THRESHOLD_COUNT}"
            )));
        }
        let mut lambda = Vec::with_capacity(2 * n);
        lambda.extend((0..n).map(|p| theta1 * f64::from(1u32 << p)));
        lambda.extend((0..n).map(|p| -theta2 * f64::from(1u32 << p)));
        Ok(Self {
            theta1,
            theta2,
            n,
            lambda,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn theta1(&self) -> f64 {
        self.theta1
    }

    pub fn theta2(&self) -> f64 {
        self.theta2
    }

    /// `θ2/θ1`, the negative base threshold after normalizing `θ1` to one.
    pub fn eta(&self) -> f64 {
        self.theta2 / self.theta1
    }

    /// All `2n` values, positive channels first.
    pub fn values(&self) -> &[f64] {
        &self.lambda
    }

    pub fn values_as<T: Scalar>(&self) -> Vec<T> {
        self.lambda.iter().map(|&v| T::lit(v)).collect()
    }

    /// Value emitted by spike `idx`; silence emits 0.
    pub fn value(&self, idx: u8) -> f64 {
        if idx == 0 {
            0.0
        } else {
            self.lambda[idx as usize - 1]
        }
    }

    /// The same ladder with `θ1` scaled to one.
    pub fn normalized(&self) -> Self {
        Self::new(1.0, self.eta(), self.n).expect("a valid ladder stays valid after scaling")
    }

    pub fn is_positive(&self, idx: u8) -> bool {
        idx >= 1 && (idx as usize) <= self.n
    }

    /// Band selection for membrane value `m`.
    pub fn mth(&self, m: f64) -> u8 {
        mth_values(m, &self.lambda)
    }
}

/// Band selection for membrane value `m` against `ladder`.
pub fn mth(m: f64, ladder: &ThresholdLadder) -> u8 {
    ladder.mth(m)
}

/// Band selection over raw ladder values (`2n` entries, positive first).
///
/// Positive channel `p` fires for `λ_p − λ_1/2 ≤ m`, taking the largest such
/// `p` once `m ≥ λ_1/2`; negative channels mirror this with strict `<`.
#[inline]
pub fn mth_values<T: Scalar>(m: T, lambda: &[T]) -> u8 {
    let n = lambda.len() / 2;
    let half = T::lit(0.5);
    let up = lambda[0] * half;
    let down = lambda[n] * half;
    if m >= up {
        for p in (1..n).rev() {
            if m >= lambda[p] - up {
                return (p + 1) as u8;
            }
        }
        1
    } else if m < down {
        for q in (1..n).rev() {
            if m < lambda[n + q] - down {
                return (n + q + 1) as u8;
            }
        }
        (n + 1) as u8
    } else {
        0
    }
}

/// Membrane state of one layer of multi-threshold neurons.
#[derive(Debug, Clone)]
pub struct MtNeuronState<T: Scalar = f64> {
    pub v: Tensor<T>,
    ladder: ThresholdLadder,
    lambda: Vec<T>,
    /// Fires per channel; entry `i` counts index `i + 1`.
    pub spike_counts: Vec<u64>,
    /// Neuron-steps whose residual exceeded twice the top threshold.
    pub saturated: u64,
    pub steps: u64,
}

impl<T: Scalar> MtNeuronState<T> {
    pub fn new(shape: &[usize], ladder: ThresholdLadder) -> Self {
        let lambda = ladder.values_as();
        Self {
            v: Tensor::zeros(shape),
            spike_counts: vec![0; 2 * ladder.n()],
            ladder,
            lambda,
            saturated: 0,
            steps: 0,
        }
    }

    pub fn ladder(&self) -> &ThresholdLadder {
        &self.ladder
    }

    pub fn neurons(&self) -> usize {
        self.v.len()
    }

    /// Integrates `input`, fires, resets by subtraction and writes the fired
    /// index of every neuron into `spikes`. Nothing changes on error.
    pub fn step_into(&mut self, input: &[T], spikes: &mut [u8]) -> Result<()> {
        if input.len() != self.v.len() || spikes.len() != self.v.len() {
            return Err(Error::Dimension(format!(
                "neuron layer has {} neurons, got input {} and spike buffer {}",
                self.v.len(),
                input.len(),
                spikes.len()
            )));
        }
        if input.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite input current".into()));
        }
        let n = self.ladder.n();
        let top_pos = self.lambda[n - 1] * T::lit(2.0);
        let top_neg = self.lambda[2 * n - 1] * T::lit(2.0);
        for ((v, &i), s) in self.v.data_mut().iter_mut().zip(input).zip(spikes.iter_mut()) {
            let m = *v + i;
            let idx = mth_values(m, &self.lambda);
            *v = if idx == 0 { m } else { m - self.lambda[idx as usize - 1] };
            if idx != 0 {
                self.spike_counts[idx as usize - 1] += 1;
            }
            if *v > top_pos || *v < top_neg {
                self.saturated += 1;
            }
            *s = idx;
        }
        self.steps += 1;
        Ok(())
    }

    /// One step returning the emitted values `x` and the spike indices.
    pub fn mt_step(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u8>)> {
        if input.shape() != self.v.shape() {
            return Err(Error::Dimension(format!(
                "neuron shape {:?} vs input {:?}",
                self.v.shape(),
                input.shape()
            )));
        }
        let mut spikes = vec![0u8; input.len()];
        self.step_into(input.data(), &mut spikes)?;
        let x = decode_spikes(&spikes, &self.lambda, input.shape());
        Ok((x, spikes))
    }
}

/// Dense values of a spike-index tensor.
pub fn decode_spikes<T: Scalar>(spikes: &[u8], lambda: &[T], shape: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    for (o, &s) in out.data_mut().iter_mut().zip(spikes) {
        if s != 0 {
            *o = lambda[s as usize - 1];
        }
    }
    out
}

/// Expands spike indices into `2n` boolean planes, one per channel.
pub fn to_planes(spikes: &[u8], n: usize) -> Vec<Vec<bool>> {
    (1..=2 * n as u8)
        .map(|c| spikes.iter().map(|&s| s == c).collect())
        .collect()
}

/// Inverse of [`to_planes`]; errors when a neuron fires on two channels.
pub fn from_planes(planes: &[Vec<bool>]) -> Result<Vec<u8>> {
    let len = planes.first().map_or(0, Vec::len);
    let mut out = vec![0u8; len];
    for (c, plane) in planes.iter().enumerate() {
        if plane.len() != len {
            return Err(Error::Dimension("spike planes differ in length".into()));
        }
        for (o, &b) in out.iter_mut().zip(plane) {
            if b {
                if *o != 0 {
                    return Err(Error::Validation("neuron fired on two channels".into()));
                }
                *o = c as u8 + 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ladder_examples() {
        assert_eq!(build_ladder(1.0, 1.0, 2).unwrap().values(), &[1.0, 2.0, -1.0, -2.0]);
        assert_eq!(build_ladder(0.5, 0.08, 1).unwrap().values(), &[0.5, -0.08]);
        assert_eq!(
            build_ladder(1.0, 2.0, 3).unwrap().values(),
            &[1.0, 2.0, 4.0, -2.0, -4.0, -8.0]
        );
        assert!(build_ladder(0.0, 1.0, 2).is_err());
        assert!(build_ladder(1.0, -1.0, 2).is_err());
        assert!(build_ladder(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn band_examples() {
        let l = build_ladder(1.0, 1.0, 2).unwrap();
        assert_eq!(mth(0.7, &l), 1);
        assert_eq!(mth(0.0, &l), 0);
        assert_eq!(mth(0.5, &l), 1);
        assert_eq!(mth(-0.5, &l), 0);
        assert_eq!(mth(-0.51, &l), 3);
        assert_eq!(mth(1.5, &l), 2);
        assert_eq!(mth(100.0, &l), 2);
        assert_eq!(mth(-100.0, &l), 4);
        let l = build_ladder(1.0, 2.0, 3).unwrap();
        assert_eq!(mth(-3.4, &l), 5);
        assert_eq!(l.value(5), -4.0);
    }

    #[test]
    fn two_step_trace() {
        let l = build_ladder(1.0, 1.0, 2).unwrap();
        let mut st = MtNeuronState::<f64>::new(&[1], l);
        let (x, s) = st.mt_step(&Tensor::scalar(3.6).reshape(vec![1]).unwrap()).unwrap();
        assert_eq!((s[0], x.data()[0]), (2, 2.0));
        assert!((st.v.data()[0] - 1.6).abs() < 1e-12);
        let (x, s) = st.mt_step(&Tensor::zeros(&[1])).unwrap();
        assert_eq!((s[0], x.data()[0]), (2, 2.0));
        assert!((st.v.data()[0] + 0.4).abs() < 1e-12);
        assert_eq!(st.spike_counts, vec![0, 2, 0, 0]);
    }

    #[test]
    fn quiescent_and_bad_input() {
        let mut st = MtNeuronState::<f64>::new(&[3], build_ladder(1.0, 1.0, 2).unwrap());
        let (x, s) = st.mt_step(&Tensor::zeros(&[3])).unwrap();
        assert_eq!(s, vec![0, 0, 0]);
        assert!(x.data().iter().all(|&v| v == 0.0));
        let bad = Tensor::from_raw(vec![3], vec![0.0, f64::NAN, 0.0]).unwrap();
        assert!(matches!(st.mt_step(&bad), Err(Error::Numeric(_))));
        assert!(st.v.data().iter().all(|&v| v == 0.0));
        assert_eq!(st.steps, 1);
    }

    #[test]
    fn saturation_is_recorded() {
        let mut st = MtNeuronState::<f64>::new(&[1], build_ladder(1.0, 1.0, 1).unwrap());
        st.mt_step(&Tensor::filled(&[1], 10.0)).unwrap();
        assert_eq!(st.saturated, 1);
    }

    #[test]
    fn planes_round_trip() {
        let s = vec![0, 3, 1, 4, 0];
        let planes = to_planes(&s, 2);
        assert_eq!(planes.len(), 4);
        assert_eq!(from_planes(&planes).unwrap(), s);
        let mut twice = planes.clone();
        twice[0][1] = true;
        assert!(from_planes(&twice).is_err());
    }

    #[test]
    fn serde_keeps_parameters() {
        let l = build_ladder(0.25, 0.5, 4).unwrap();
        let back: ThresholdLadder = serde_json::from_str(&serde_json::to_string(&l).unwrap()).unwrap();
        assert_eq!(back, l);
        assert_eq!(back.values()[3], 0.25 * 8.0);
        let bad = r#"{"theta1": -1.0, "theta2": 1.0, "n": 2}"#;
        assert!(serde_json::from_str::<ThresholdLadder>(bad).is_err());
    }

    proptest! {
        #[test]
        fn charge_is_conserved(
            theta1 in 0.01f64..4.0,
            theta2 in 0.01f64..4.0,
            n in 1usize..9,
            inputs in prop::collection::vec(-50.0f64..50.0, 1..40),
        ) {
            let mut st = MtNeuronState::<f64>::new(&[1], build_ladder(theta1, theta2, n).unwrap());
            let (mut sum_x, mut sum_i) = (0.0, 0.0);
            for &i in &inputs {
                let (x, _) = st.mt_step(&Tensor::filled(&[1], i)).unwrap();
                sum_x += x.data()[0];
                sum_i += i;
            }
            let scale = 1.0 + sum_i.abs();
            prop_assert!((sum_x + st.v.data()[0] - sum_i).abs() <= 1e-12 * scale);
        }

        #[test]
        fn fired_channel_is_within_its_band(m in -300.0f64..300.0, n in 1usize..7) {
            let l = build_ladder(1.0, 0.5, n).unwrap();
            let idx = l.mth(m) as usize;
            let lam = l.values();
            if idx == 0 {
                prop_assert!(m >= lam[n] / 2.0 && m < lam[0] / 2.0);
            } else if idx <= n {
                prop_assert!(m >= lam[idx - 1] - lam[0] / 2.0);
                if idx < n {
                    prop_assert!(m < lam[idx] - lam[0] / 2.0);
                }
            } else {
                prop_assert!(m < lam[idx - 1] - lam[n] / 2.0);
                if idx < 2 * n {
                    prop_assert!(m >= lam[idx] - lam[n] / 2.0);
                }
            }
        }
    }
}
