//! Operation counting and the energy model.

use std::collections::BTreeMap;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Scalar accumulations and multiply-accumulates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ops {
    pub acs: u64,
    pub macs: u64,
}

impl Add for Ops {
    type Output = Ops;

    fn add(self, o: Ops) -> Ops {
        Ops {
            acs: self.acs + o.acs,
            macs: self.macs + o.macs,
        }
    }
}

impl AddAssign for Ops {
    fn add_assign(&mut self, o: Ops) {
        *self = *self + o;
    }
}

impl Sum for Ops {
    fn sum<I: Iterator<Item = Ops>>(iter: I) -> Ops {
        iter.fold(Ops::default(), Add::add)
    }
}

/// What kind of work a ledger entry stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    /// Weight layers, including the embedding and the head.
    Linear,
    /// Products of two activations.
    MatMul,
    /// GELU, softmax and layer norm evaluations.
    Nonlinear,
    /// Neuron integration and reset.
    Neuron,
    /// Residual, position and other elementwise additions.
    Elementwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub class: OpClass,
    pub ops: Ops,
}

/// Per-module operation totals for one or more runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpsLedger {
    pub modules: BTreeMap<String, LedgerEntry>,
}

impl OpsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, module: &str, class: OpClass, ops: Ops) {
        match self.modules.get_mut(module) {
            Some(e) => e.ops += ops,
            None => {
                self.modules.insert(module.to_string(), LedgerEntry { class, ops });
            }
        }
    }

    /// Adds every entry of `other`; commutative and associative.
    pub fn merge(&mut self, other: &OpsLedger) {
        for (name, e) in &other.modules {
            self.record(name, e.class, e.ops);
        }
    }

    pub fn total(&self) -> Ops {
        self.modules.values().map(|e| e.ops).sum()
    }

    pub fn total_where(&self, keep: impl Fn(OpClass) -> bool) -> Ops {
        self.modules.values().filter(|e| keep(e.class)).map(|e| e.ops).sum()
    }

    pub fn by_class(&self) -> BTreeMap<OpClass, Ops> {
        let mut out = BTreeMap::new();
        for e in self.modules.values() {
            *out.entry(e.class).or_default() += e.ops;
        }
        out
    }
}

/// Energy per operation in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self { e_mac: 4.6, e_ac: 0.9 }
    }
}

impl EnergyModel {
    pub fn new(e_mac: f64, e_ac: f64) -> Result<Self> {
        if !(e_mac > 0.0 && e_ac > 0.0 && e_mac.is_finite() && e_ac.is_finite()) {
            return Err(Error::Domain("energy costs must be positive".into()));
        }
        Ok(Self { e_mac, e_ac })
    }
}

/// SNN energy relative to the ANN under three accounting conventions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRatio {
    /// Every counted MAC and AC.
    pub strict: f64,
    /// All SNN multiplications treated as free.
    pub acs_only: f64,
    /// Multiplications in weight layers and products dropped, those of the
    /// nonlinear modules kept.
    pub nonlinear_kept: f64,
}

/// `(MACs·E_MAC + ACs·E_AC) / (MACs_ANN·E_MAC)`, in the three variants.
pub fn energy_ratio(snn: &OpsLedger, ann_macs: f64, model: &EnergyModel) -> Result<EnergyRatio> {
    energy_ratio_by_class(&snn.by_class(), ann_macs, model)
}

/// [`energy_ratio`] over totals already grouped by class.
pub fn energy_ratio_by_class(
    classes: &BTreeMap<OpClass, Ops>,
    ann_macs: f64,
    model: &EnergyModel,
) -> Result<EnergyRatio> {
    if !(ann_macs > 0.0 && ann_macs.is_finite()) {
        return Err(Error::Domain("ANN MAC count must be positive".into()));
    }
    let total: Ops = classes.values().copied().sum();
    let kept: Ops = classes
        .iter()
        .filter(|(c, _)| !matches!(c, OpClass::Linear | OpClass::MatMul))
        .map(|(_, o)| *o)
        .sum();
    let denom = ann_macs * model.e_mac;
    let acs = total.acs as f64 * model.e_ac;
    Ok(EnergyRatio {
        strict: (total.macs as f64 * model.e_mac + acs) / denom,
        acs_only: acs / denom,
        nonlinear_kept: (kept.macs as f64 * model.e_mac + acs) / denom,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub module: String,
    pub macs: u64,
}

fn row(module: &str, macs: u64) -> ComplexityRow {
    ComplexityRow {
        module: module.to_string(),
        macs,
    }
}

/// MACs of one encoder block, row by row: `n` tokens, `c` channels,
/// `nh` heads, `ch` hidden MLP width.
pub fn ann_complexity(n: usize, c: usize, nh: usize, ch: usize) -> Result<Vec<ComplexityRow>> {
    if n == 0 || c == 0 || nh == 0 || ch == 0 {
        return Err(Error::Domain("all dimensions must be >= 1".into()));
    }
    if !c.is_multiple_of(nh) {
        return Err(Error::Domain(format!("{c} channels do not split into {nh} heads")));
    }
    let (n, c, nh, ch) = (n as u64, c as u64, nh as u64, ch as u64);
    let d = c / nh;
    Ok(vec![
        row("layernorm1", n * c),
        row("linear_qkv", n * c * 3 * c),
        row("matmul_qk", nh * n * d * d),
        row("softmax", nh * n * n),
        row("matmul_sv", nh * n * n * d),
        row("linear_out", n * c * c),
        row("layernorm2", n * c),
        row("mlp_linear1", n * c * ch),
        row("gelu", n * ch),
        row("mlp_linear2", n * ch * c),
    ])
}

/// Whole-network ANN cost: the per-block rows times the depth, plus the
/// embedding and head, which are kept apart from the block table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnCost {
    pub block: Vec<ComplexityRow>,
    pub num_blocks: usize,
    pub extensions: Vec<ComplexityRow>,
    pub total_macs: u64,
}

pub fn ann_cost(cfg: &ModelConfig) -> Result<AnnCost> {
    let block = ann_complexity(cfg.num_tokens, cfg.dim, cfg.heads, cfg.mlp_dim)?;
    let extensions = vec![
        row("embed", (cfg.num_patches() * cfg.in_dim * cfg.dim) as u64),
        row("head", (cfg.dim * cfg.num_classes) as u64),
    ];
    let per_block: u64 = block.iter().map(|r| r.macs).sum();
    let total_macs = per_block * cfg.num_blocks as u64 + extensions.iter().map(|r| r.macs).sum::<u64>();
    Ok(AnnCost {
        block,
        num_blocks: cfg.num_blocks,
        extensions,
        total_macs,
    })
}

/// Upper bounds on the additions and multiplications of one MatMul-EC step
/// with firing rates `eta1`, `eta2` on `n×p` and `p×m` operands.
pub fn matmul_ec_bounds(eta1: f64, eta2: f64, n: usize, p: usize, m: usize) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&eta1) || !(0.0..=1.0).contains(&eta2) {
        return Err(Error::Domain(format!("firing rates ({eta1}, {eta2}) outside [0, 1]")));
    }
    if n == 0 || p == 0 || m == 0 {
        return Err(Error::Domain("dimensions must be >= 1".into()));
    }
    let (n, p, m) = (n as f64, p as f64, m as f64);
    let npm = n * p * m;
    let nm = n * m;
    let acs = eta1 * eta2 * npm + eta1 * npm + eta2 * npm + 3.0 * nm;
    let macs = eta1.min(eta2) * nm + eta1 * nm + eta2 * nm;
    Ok((acs, macs))
}
