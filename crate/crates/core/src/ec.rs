//! Expectation compensation.
//!
//! [`EcState`] wraps an arbitrary function `F` so that the running mean of
//! its outputs is exactly `F` of the running mean of its inputs.
//! [`MatMulEcState`] does the same for the product of two spike trains,
//! using lookups and additions only while forming the per-step increment.

use serde::{Deserialize, Serialize};

use crate::energy::Ops;
use crate::error::{Error, Result};
use crate::neuron::ThresholdLadder;
use crate::tensor::{matmul, Nonlinearity, Scalar, Tensor};

/// Running state of one EC module.
///
/// The cumulative input is kept as a running mean `S(t)/t`, and the output
/// `t·F(S(t)/t) − (t−1)·F(S(t−1)/(t−1))` is evaluated as
/// `F_t + (t−1)·(F_t − F_{t−1})`. Both are algebraically the textbook form;
/// with a steady input they stay exactly fixed instead of drifting by a few
/// ulps per step.
#[derive(Debug, Clone, Default)]
pub struct EcState<T: Scalar = f64> {
    mean: Option<Tensor<T>>,
    /// `F(S(t−1)/(t−1))`, unscaled.
    prev_f: Option<Tensor<T>>,
    t: usize,
}

impl<T: Scalar> EcState<T> {
    pub fn new() -> Self {
        Self {
            mean: None,
            prev_f: None,
            t: 0,
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Running mean of the inputs, `S(t)/t`.
    pub fn mean(&self) -> Option<&Tensor<T>> {
        self.mean.as_ref()
    }

    /// Cumulative input `S(t)`.
    pub fn sum(&self) -> Option<Tensor<T>> {
        self.mean.as_ref().map(|m| m.scale(T::lit(self.t as f64)))
    }

    /// Advances one step with `F` given as a closure.
    pub fn step_with<F>(&mut self, x_in: &Tensor<T>, f: F) -> Result<Tensor<T>>
    where
        F: FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
    {
        let t = self.t + 1;
        let mean = match &self.mean {
            Some(m) if m.shape() != x_in.shape() => {
                return Err(Error::State(format!(
                    "EC input shape changed from {:?} to {:?}",
                    m.shape(),
                    x_in.shape()
                )))
            }
            Some(m) => running_mean(m, x_in, t),
            None => x_in.clone(),
        };
        let f_now = f(&mean)?;
        if f_now.shape() != x_in.shape() {
            return Err(Error::Dimension("EC function must preserve shape".into()));
        }
        let out = match &self.prev_f {
            Some(prev) => compensate(&f_now, prev, t),
            None => f_now.clone(),
        };
        out.check_finite("EC output")?;
        self.mean = Some(mean);
        self.prev_f = Some(f_now);
        self.t = t;
        Ok(out)
    }

    pub fn step(&mut self, x_in: &Tensor<T>, f: &Nonlinearity<T>) -> Result<Tensor<T>> {
        self.step_with(x_in, |x| f.eval(x))
    }
}

/// `m + (x − m)/t`.
fn running_mean<T: Scalar>(m: &Tensor<T>, x: &Tensor<T>, t: usize) -> Tensor<T> {
    let inv = T::one() / T::lit(t as f64);
    let mut out = m.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *o += (v - *o) * inv;
    }
    out
}

/// `f + (t−1)·(f − prev)`.
fn compensate<T: Scalar>(f: &Tensor<T>, prev: &Tensor<T>, t: usize) -> Tensor<T> {
    let k = T::lit((t - 1) as f64);
    let mut out = f.clone();
    for (o, &p) in out.data_mut().iter_mut().zip(prev.data()) {
        *o += k * (*o - p);
    }
    out
}

/// Free-function form of [`EcState::step`].
pub fn ec_step<T: Scalar>(state: &mut EcState<T>, x_in: &Tensor<T>, f: &Nonlinearity<T>) -> Result<Tensor<T>> {
    state.step(x_in, f)
}

/// Operation tally of a single EC step over `width` elements whose function
/// costs `f_macs`: per element, one subtraction and one scaled update for the
/// running mean, and the same again for the output.
pub fn ec_step_ops(width: u64, f_macs: u64) -> Ops {
    Ops {
        acs: 2 * width,
        macs: f_macs + 2 * width,
    }
}

/// What one spiking MatMul-EC step did, broken down by phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatMulEcRecord {
    pub a_spikes: u64,
    pub b_spikes: u64,
    /// Additions of looked-up spike-pair products into `K`.
    pub pair_adds: u64,
    /// Additions of `va·S_B(T−1)` rows into `K`.
    pub a_cross_adds: u64,
    /// Additions of `vb·S_A(T−1)` columns into `K`.
    pub b_cross_adds: u64,
    /// `S_K += K`.
    pub merge_adds: u64,
    /// Upkeep of `S_A`, `S_B` and their scaled copies.
    pub state_adds: u64,
    /// Multiplications while forming `K`; zero by construction.
    pub k_muls: u64,
    /// Producing `O` from `S_K`.
    pub output: Ops,
}

/// `(additions, multiplications)` spent on `K` and its merge into `S_K`.
pub fn matmul_ec_opcount(record: &MatMulEcRecord) -> (u64, u64) {
    (
        record.pair_adds + record.a_cross_adds + record.b_cross_adds + record.merge_adds,
        record.k_muls,
    )
}

impl MatMulEcRecord {
    /// Every operation, including state upkeep and the output rescale.
    pub fn total(&self) -> Ops {
        let (adds, muls) = matmul_ec_opcount(self);
        Ops {
            acs: adds + self.state_adds + self.output.acs,
            macs: muls + self.output.macs,
        }
    }
}

/// Matrix product of two spike trains, `A: n×p` and `B: p×m`.
#[derive(Debug, Clone)]
pub struct MatMulEcState<T: Scalar = f64> {
    n: usize,
    p: usize,
    m: usize,
    la: Vec<T>,
    lb: Vec<T>,
    /// `prod[a·|lb| + b] = la[a]·lb[b]`, built once.
    prod: Vec<T>,
    sa: Vec<T>,
    sb: Vec<T>,
    sk: Vec<T>,
    /// For each A channel `a`: `la[a]·S_B`, `p×m` each.
    sb_scaled: Vec<T>,
    /// For each B channel `b`: `lb[b]·S_A`, `n×p` each.
    sa_scaled: Vec<T>,
    k: Vec<T>,
    t: usize,
}

impl<T: Scalar> MatMulEcState<T> {
    pub fn new(n: usize, p: usize, m: usize, la: &ThresholdLadder, lb: &ThresholdLadder) -> Self {
        let la: Vec<T> = la.values_as();
        let lb: Vec<T> = lb.values_as();
        let prod = la.iter().flat_map(|&a| lb.iter().map(move |&b| a * b)).collect();
        Self {
            n,
            p,
            m,
            prod,
            sa: vec![T::zero(); n * p],
            sb: vec![T::zero(); p * m],
            sk: vec![T::zero(); n * m],
            sb_scaled: vec![T::zero(); la.len() * p * m],
            sa_scaled: vec![T::zero(); lb.len() * n * p],
            k: vec![T::zero(); n * m],
            la,
            lb,
            t: 0,
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.p, self.m)
    }

    pub fn sum_a(&self) -> Tensor<T> {
        Tensor::from_raw(vec![self.n, self.p], self.sa.clone()).expect("shape matches")
    }

    pub fn sum_b(&self) -> Tensor<T> {
        Tensor::from_raw(vec![self.p, self.m], self.sb.clone()).expect("shape matches")
    }

    pub fn sum_k(&self) -> Tensor<T> {
        Tensor::from_raw(vec![self.n, self.m], self.sk.clone()).expect("shape matches")
    }

    /// The increment `K(T)` of the latest step.
    pub fn last_k(&self) -> Tensor<T> {
        Tensor::from_raw(vec![self.n, self.m], self.k.clone()).expect("shape matches")
    }

    /// One step on spike-index matrices (row-major, 0 = silent).
    pub fn step(&mut self, a: &[u8], b: &[u8]) -> Result<(Tensor<T>, MatMulEcRecord)> {
        let (n, p, m) = (self.n, self.p, self.m);
        if a.len() != n * p || b.len() != p * m {
            return Err(Error::State(format!(
                "MatMul-EC expects {n}×{p} and {p}×{m} spike matrices, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        let (ca, cb) = (self.la.len(), self.lb.len());
        if a.iter().any(|&s| s as usize > ca) || b.iter().any(|&s| s as usize > cb) {
            return Err(Error::State("spike index outside the operand ladder".into()));
        }
        let mut rec = MatMulEcRecord::default();
        let a_nz: Vec<(usize, usize, usize)> = a
            .iter()
            .enumerate()
            .filter(|(_, &s)| s != 0)
            .map(|(x, &s)| (x / p, x % p, s as usize - 1))
            .collect();
        // B spikes grouped by row so pairs share the inner index
        let mut b_rows: Vec<Vec<(usize, usize)>> = vec![Vec::new(); p];
        for (x, &s) in b.iter().enumerate() {
            if s != 0 {
                b_rows[x / m].push((x % m, s as usize - 1));
            }
        }
        rec.a_spikes = a_nz.len() as u64;
        rec.b_spikes = b_rows.iter().map(|r| r.len() as u64).sum();
        let first = self.t == 0;

        self.k.iter_mut().for_each(|v| *v = T::zero());
        for &(i, r, sa) in &a_nz {
            let krow = &mut self.k[i * m..(i + 1) * m];
            let prow = &self.prod[sa * cb..(sa + 1) * cb];
            for &(j, sb) in &b_rows[r] {
                krow[j] += prow[sb];
            }
            rec.pair_adds += b_rows[r].len() as u64;
            if !first {
                let src = &self.sb_scaled[sa * p * m + r * m..sa * p * m + (r + 1) * m];
                for (k, &v) in krow.iter_mut().zip(src) {
                    *k += v;
                }
                rec.a_cross_adds += m as u64;
            }
        }
        if !first {
            for (r, row) in b_rows.iter().enumerate() {
                for &(j, sb) in row {
                    let base = sb * n * p;
                    for i in 0..n {
                        self.k[i * m + j] += self.sa_scaled[base + i * p + r];
                    }
                    rec.b_cross_adds += n as u64;
                }
            }
        }

        let tt = T::lit((self.t + 1) as f64);
        let mut out = Tensor::zeros(&[n, m]);
        if self.t == 0 {
            self.sk.copy_from_slice(&self.k);
            out.data_mut().copy_from_slice(&self.k);
            rec.merge_adds = if a_nz.is_empty() { 0 } else { (n * m) as u64 };
        } else {
            let tp = T::lit(self.t as f64);
            let silent = a_nz.is_empty() && rec.b_spikes == 0;
            for ((o, s), &k) in out.data_mut().iter_mut().zip(self.sk.iter_mut()).zip(&self.k) {
                let old = *s;
                if !silent {
                    *s += k;
                }
                *o = *s / tt - old / tp;
            }
            rec.merge_adds = if silent { 0 } else { (n * m) as u64 };
            rec.output = Ops {
                acs: (n * m) as u64,
                macs: 2 * (n * m) as u64,
            };
        }

        // S_A, S_B and the scaled copies; increments come from the lookup table
        for &(i, r, sa) in &a_nz {
            self.sa[i * p + r] += self.la[sa];
            for b_ch in 0..cb {
                self.sa_scaled[b_ch * n * p + i * p + r] += self.prod[sa * cb + b_ch];
            }
        }
        for (r, row) in b_rows.iter().enumerate() {
            for &(j, sb) in row {
                self.sb[r * m + j] += self.lb[sb];
                for a_ch in 0..ca {
                    self.sb_scaled[a_ch * p * m + r * m + j] += self.prod[a_ch * cb + sb];
                }
            }
        }
        rec.state_adds = rec.a_spikes * (cb as u64 + 1) + rec.b_spikes * (ca as u64 + 1);
        self.t += 1;
        Ok((out, rec))
    }
}

/// Free-function form of [`MatMulEcState::step`].
pub fn matmul_ec_step<T: Scalar>(
    state: &mut MatMulEcState<T>,
    a_spikes: &[u8],
    b_spikes: &[u8],
) -> Result<(Tensor<T>, MatMulEcRecord)> {
    state.step(a_spikes, b_spikes)
}

/// Dense MatMul-EC on analog operands, used when neurons are bypassed.
///
/// Runs the product as an EC module over the pair of running means, so
/// `Σ O(t) = t·Ā(t)·B̄(t) = S_A(t)·S_B(t)/t`.
#[derive(Debug, Clone, Default)]
pub struct AnalogMatMulEc<T: Scalar = f64> {
    mean_a: Option<Tensor<T>>,
    mean_b: Option<Tensor<T>>,
    prev: Option<Tensor<T>>,
    t: usize,
}

impl<T: Scalar> AnalogMatMulEc<T> {
    pub fn new() -> Self {
        Self {
            mean_a: None,
            mean_b: None,
            prev: None,
            t: 0,
        }
    }

    /// `S_K(t) = S_A(t)·S_B(t)`.
    pub fn sum_k(&self) -> Option<Tensor<T>> {
        let p = self.prev.as_ref()?;
        let t = T::lit(self.t as f64);
        Some(p.scale(t * t))
    }

    pub fn step(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Ops)> {
        let (n, p) = a.dims2()?;
        let (_, m) = b.dims2()?;
        let t = self.t + 1;
        let (ma, mb) = match (&self.mean_a, &self.mean_b) {
            (Some(x), Some(y)) => {
                if x.shape() != a.shape() || y.shape() != b.shape() {
                    return Err(Error::State("MatMul-EC operand shapes changed".into()));
                }
                (running_mean(x, a, t), running_mean(y, b, t))
            }
            _ => (a.clone(), b.clone()),
        };
        let f_now = matmul(&ma, &mb)?;
        let mut ops = Ops {
            acs: 2 * (n * p + p * m) as u64,
            macs: (n * p * m + n * p + p * m) as u64,
        };
        let out = match &self.prev {
            Some(prev) => {
                ops.acs += (n * m) as u64;
                ops.macs += (n * m) as u64;
                compensate(&f_now, prev, t)
            }
            None => f_now.clone(),
        };
        out.check_finite("MatMul-EC output")?;
        self.mean_a = Some(ma);
        self.mean_b = Some(mb);
        self.prev = Some(f_now);
        self.t = t;
        Ok((out, ops))
    }
}
