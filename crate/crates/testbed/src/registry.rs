//! Name-addressable problem construction.

use std::collections::BTreeMap;

use blo_core::{BloError, Result};
use serde::{Deserialize, Serialize};

use crate::problems::bip::Bip;
use crate::problems::coreset::{Coreset, CoresetParams};
use crate::problems::examples::{Example1, Example2, MmoToy, NsToy};
use crate::problems::fastbat::FastBat;
use crate::problems::irm::IrmConsensus;
use crate::problems::maml::MamlSinusoid;
use crate::problems::quad::QuadBilevel;
use crate::problems::reweight::Reweight;
use crate::TestProblem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Vector(Vec<f64>),
}

impl std::fmt::Display for ParamValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Bool(b) => write!(f, "{b}"),
            Self::Int(i) => write!(f, "{i}"),
            Self::Float(x) => write!(f, "{x}"),
            Self::Vector(v) => write!(f, "{v:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
    #[serde(default)]
    pub seed: u64,
}

impl ProblemSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), params: BTreeMap::new(), seed: 0 }
    }

    pub fn with(mut self, key: &str, value: ParamValue) -> Self {
        self.params.insert(key.into(), value);
        self
    }

    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParamDoc {
    pub name: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

pub struct ProblemInfo {
    pub name: &'static str,
    pub summary: &'static str,
    pub params: &'static [ParamDoc],
    pub closed_form: bool,
    builder: fn(&Params) -> Result<Box<dyn TestProblem>>,
}

impl ProblemInfo {
    pub fn build(&self, spec: &ProblemSpec) -> Result<Box<dyn TestProblem>> {
        for key in spec.params.keys() {
            if !self.params.iter().any(|p| p.name == key) {
                return Err(BloError::Config(format!("problem `{}` has no parameter `{key}`", self.name)));
            }
        }
        (self.builder)(&Params { map: &spec.params, seed: spec.seed })
    }
}

struct Params<'a> {
    map: &'a BTreeMap<String, ParamValue>,
    seed: u64,
}

impl Params<'_> {
    fn float(&self, key: &str, default: f64) -> Result<f64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(ParamValue::Float(x)) => Ok(*x),
            Some(ParamValue::Int(i)) => Ok(*i as f64),
            Some(other) => Err(BloError::Config(format!("parameter `{key}` must be a number, got {other}"))),
        }
    }

    fn count(&self, key: &str, default: usize) -> Result<usize> {
        match self.map.get(key) {
            None => Ok(default),
            Some(ParamValue::Int(i)) if *i >= 0 => Ok(*i as usize),
            Some(other) => Err(BloError::Config(format!("parameter `{key}` must be a non-negative integer, got {other}"))),
        }
    }

    fn positive(&self, key: &str, default: usize) -> Result<usize> {
        let v = self.count(key, default)?;
        if v == 0 {
            return Err(BloError::Config(format!("parameter `{key}` must be at least 1")));
        }
        Ok(v)
    }

    fn positive_float(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.float(key, default)?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(BloError::Config(format!("parameter `{key}` must be positive, got {v}")));
        }
        Ok(v)
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key) {
            None => Ok(default),
            Some(ParamValue::Bool(b)) => Ok(*b),
            Some(other) => Err(BloError::Config(format!("parameter `{key}` must be a boolean, got {other}"))),
        }
    }
}

const fn p(name: &'static str, default: &'static str, doc: &'static str) -> ParamDoc {
    ParamDoc { name, default, doc }
}

fn quad(p: &Params) -> Result<Box<dyn TestProblem>> {
    let lambda = p.float("lambda", 1.0)?;
    if !(lambda >= 0.0) {
        return Err(BloError::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let q = QuadBilevel::random(p.positive("m", 10)?, p.positive("n", 10)?, lambda, p.count("samples", 0)?, p.seed);
    Ok(Box::new(q.corrupted(p.float("cross_scale", 1.0)?)))
}

fn mmo(p: &Params) -> Result<Box<dyn TestProblem>> {
    Ok(Box::new(MmoToy::random(p.positive("m", 4)?, p.positive("n", 3)?, p.positive_float("mu", 1.0)?, p.seed)))
}

fn coreset(p: &Params) -> Result<Box<dyn TestProblem>> {
    let frac = p.float("corrupt_frac", 0.2)?;
    if !(0.0..=1.0).contains(&frac) {
        return Err(BloError::Config(format!("corrupt_frac must lie in [0, 1], got {frac}")));
    }
    Ok(Box::new(Coreset::new(CoresetParams {
        n: p.positive("n", 40)?,
        d: p.positive("d", 5)?,
        k: p.positive("k", 20)?,
        corrupt_frac: frac,
        lambda: p.positive_float("lambda", 1e-2)?,
        noise: p.float("noise", 0.1)?,
        seed: p.seed,
    })))
}

fn reweight(p: &Params) -> Result<Box<dyn TestProblem>> {
    Ok(Box::new(Reweight::random(p.positive("samples", 8)?, p.positive_float("gamma", 1.0)?, p.seed)))
}

fn maml(p: &Params) -> Result<Box<dyn TestProblem>> {
    let mut m = MamlSinusoid::new(p.positive("tasks", 10)?, p.positive("shots", 10)?, p.count("k", 1)?, p.seed);
    m.inner_step = p.positive_float("inner_step", m.inner_step)?;
    Ok(Box::new(m))
}

fn fastbat(p: &Params) -> Result<Box<dyn TestProblem>> {
    let eps = p.float("eps", 0.5)?;
    if !(eps >= 0.0) {
        return Err(BloError::Config(format!("eps must be non-negative, got {eps}")));
    }
    Ok(Box::new(FastBat::random(
        p.positive("samples", 50)?,
        p.positive("d", 5)?,
        eps,
        p.positive_float("gamma", 0.1)?,
        p.seed,
    )))
}

fn bip(p: &Params) -> Result<Box<dyn TestProblem>> {
    let b = Bip::random(p.positive("n", 8)?, p.positive_float("gamma", 0.5)?, p.seed);
    Ok(Box::new(b.with_hessian_free(p.flag("hessian_free", false)?)))
}

fn irm(p: &Params) -> Result<Box<dyn TestProblem>> {
    let d = p.positive("d", 3)?;
    if d < 2 {
        return Err(BloError::Config("irm_consensus needs d >= 2 (one invariant feature plus spurious ones)".into()));
    }
    let mut irm = IrmConsensus::random(p.positive("envs", 5)?, d, p.seed);
    irm.gamma = p.float("gamma", irm.gamma)?;
    irm.rho = p.positive_float("rho", irm.rho)?;
    Ok(Box::new(irm))
}

pub static REGISTRY: &[ProblemInfo] = &[
    ProblemInfo {
        name: "quad_bilevel",
        summary: "ridge-regularized quadratic lower level, quadratic upper level",
        params: &[
            p("m", "10", "upper dimension"),
            p("n", "10", "lower dimension"),
            p("lambda", "1.0", "lower ridge weight"),
            p("samples", "0", "finite-sum size (0 = deterministic)"),
            p("cross_scale", "1.0", "scale on the cross-JVP oracle (1 = exact)"),
        ],
        closed_form: true,
        builder: quad,
    },
    ProblemInfo {
        name: "example1",
        summary: "scalar problem with coupled constraint, reduced objective -θ²",
        params: &[],
        closed_form: true,
        builder: |_| Ok(Box::new(Example1::new())),
    },
    ProblemInfo {
        name: "example2",
        summary: "scalar problem with box-constrained lower level, kink at θ = 1/2",
        params: &[],
        closed_form: true,
        builder: |_| Ok(Box::new(Example2::new())),
    },
    ProblemInfo {
        name: "ns_toy",
        summary: "lower level with a continuum of minimizers",
        params: &[],
        closed_form: false,
        builder: |_| Ok(Box::new(NsToy::new())),
    },
    ProblemInfo {
        name: "mmo_toy",
        summary: "min-max instance with g = -f",
        params: &[p("m", "4", "upper dimension"), p("n", "3", "lower dimension"), p("mu", "1.0", "lower curvature")],
        closed_form: true,
        builder: mmo,
    },
    ProblemInfo {
        name: "coreset",
        summary: "sample weights on a budget simplex over weighted ridge regression",
        params: &[
            p("n", "40", "training samples"),
            p("d", "5", "features"),
            p("k", "20", "selection budget"),
            p("corrupt_frac", "0.2", "fraction of training labels replaced by noise"),
            p("lambda", "0.01", "ridge weight"),
            p("noise", "0.1", "label noise on clean samples"),
        ],
        closed_form: true,
        builder: coreset,
    },
    ProblemInfo {
        name: "reweight_simplex",
        summary: "rate-based sample weights on the simplex over a power model",
        params: &[p("samples", "8", "number of samples"), p("gamma", "1.0", "weight regularizer")],
        closed_form: true,
        builder: reweight,
    },
    ProblemInfo {
        name: "maml_sinusoid",
        summary: "shared initialization for few-shot sinusoid regression",
        params: &[
            p("tasks", "10", "training tasks"),
            p("shots", "10", "support and query points per task"),
            p("k", "1", "adaptation steps"),
            p("inner_step", "0.3", "adaptation stepsize"),
        ],
        closed_form: false,
        builder: maml,
    },
    ProblemInfo {
        name: "fastbat_toy",
        summary: "logistic regression against a linearized ℓ∞ attack",
        params: &[
            p("samples", "50", "training points"),
            p("d", "5", "features"),
            p("eps", "0.5", "attack budget"),
            p("gamma", "0.1", "attack regularizer"),
        ],
        closed_form: true,
        builder: fastbat,
    },
    ProblemInfo {
        name: "bip_toy",
        summary: "relaxed pruning mask over ridge-regularized weights",
        params: &[
            p("n", "8", "number of weights"),
            p("gamma", "0.5", "weight regularizer"),
            p("hessian_free", "false", "drop training-loss curvature from second-order oracles"),
        ],
        closed_form: true,
        builder: bip,
    },
    ProblemInfo {
        name: "irm_consensus",
        summary: "feature scaling with a shared head across environments",
        params: &[
            p("envs", "5", "environments"),
            p("d", "3", "features (first one invariant)"),
            p("gamma", "10.0", "invariance penalty weight"),
            p("rho", "0.001", "head ridge weight"),
        ],
        closed_form: true,
        builder: irm,
    },
];

pub fn lookup(name: &str) -> Option<&'static ProblemInfo> {
    REGISTRY.iter().find(|p| p.name == name)
}

pub fn problem_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|p| p.name).collect()
}

pub fn build(spec: &ProblemSpec) -> Result<Box<dyn TestProblem>> {
    lookup(&spec.name)
        .ok_or_else(|| BloError::Config(format!("unknown problem `{}`", spec.name)))?
        .build(spec)
}
