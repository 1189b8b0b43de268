//! Per-tensor hyperparameter resolution for the μP and Complete^(d)P
//! parameterisations.
//!
//! Every ratio is `target / base`: `width = 2.0` means the target model is
//! twice as wide as the model the base hyperparameters were tuned on.
//!
//! Multipliers are evaluated in log₂ space as
//! `2^(Σ exponent · log₂ ratio)`, so unit ratios give a multiplier of exactly
//! `1.0` and resolution with identity ratios reproduces the base values bit
//! for bit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScalingError {
    #[error("ratio `{name}` must be finite and strictly positive, got {value}")]
    NonPositiveRatio { name: &'static str, value: f64 },
    #[error("residual exponent alpha must lie in [0.5, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("invalid base hyperparameter `{name}` = {value}: {reason}")]
    InvalidBase {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("unknown tensor role `{0}`")]
    UnknownRole(String),
    #[error("unrecognized tensor kind `{0}`")]
    UnknownKind(String),
    #[error("tensor kind {kind:?} cannot appear at {position:?}")]
    UnsupportedDescriptor {
        position: TensorPosition,
        kind: TensorKind,
    },
    #[error("invalid exponent `{0}`")]
    InvalidExponent(String),
    #[error("rule table: {0}")]
    RuleTable(String),
}

/// Scale ratios relating the base model/run to the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleRatios {
    /// Width ratio `m_N`.
    pub width: f64,
    /// Depth ratio `m_L`.
    pub depth: f64,
    /// Batch-size ratio `m_B`.
    pub batch: f64,
    /// Token-count ratio `m_D`.
    pub tokens: f64,
    /// Residual depth exponent in `[0.5, 1]`.
    pub alpha: f64,
}

impl Default for ScaleRatios {
    fn default() -> Self {
        Self::identity()
    }
}

impl ScaleRatios {
    pub const fn identity() -> Self {
        Self {
            width: 1.0,
            depth: 1.0,
            batch: 1.0,
            tokens: 1.0,
            alpha: 1.0,
        }
    }

    pub fn new(width: f64, depth: f64, batch: f64, tokens: f64, alpha: f64) -> Result<Self, ScalingError> {
        let ratios = Self {
            width,
            depth,
            batch,
            tokens,
            alpha,
        };
        ratios.validate()?;
        Ok(ratios)
    }

    pub fn validate(&self) -> Result<(), ScalingError> {
        for (name, value) in [
            ("width", self.width),
            ("depth", self.depth),
            ("batch", self.batch),
            ("tokens", self.tokens),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(ScalingError::NonPositiveRatio { name, value });
            }
        }
        if !(0.5..=1.0).contains(&self.alpha) {
            return Err(ScalingError::AlphaOutOfRange(self.alpha));
        }
        Ok(())
    }

    /// Elementwise product of two ratio sets. Both must share `alpha`.
    pub fn compose(&self, other: &ScaleRatios) -> Result<ScaleRatios, ScalingError> {
        if self.alpha != other.alpha {
            return Err(ScalingError::AlphaOutOfRange(other.alpha));
        }
        ScaleRatios::new(
            self.width * other.width,
            self.depth * other.depth,
            self.batch * other.batch,
            self.tokens * other.tokens,
            self.alpha,
        )
    }
}

/// Hyperparameters tuned at the base scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseHyperParams {
    /// Initialisation variance.
    pub sigma2: f64,
    pub eta: f64,
    pub eps: f64,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for BaseHyperParams {
    fn default() -> Self {
        Self {
            sigma2: 1.0,
            eta: 1e-2,
            eps: 1e-8,
            lambda: 0.0,
            beta1: 0.9,
            beta2: 0.95,
        }
    }
}

impl BaseHyperParams {
    pub fn validate(&self) -> Result<(), ScalingError> {
        let positive = |name, value: f64| {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(ScalingError::InvalidBase {
                    name,
                    value,
                    reason: "must be finite and positive",
                })
            }
        };
        positive("sigma2", self.sigma2)?;
        positive("eta", self.eta)?;
        positive("eps", self.eps)?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(ScalingError::InvalidBase {
                name: "lambda",
                value: self.lambda,
                reason: "must be finite and nonnegative",
            });
        }
        for (name, value) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&value) {
                return Err(ScalingError::InvalidBase {
                    name,
                    value,
                    reason: "must lie in [0, 1)",
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterisation {
    #[serde(alias = "mup")]
    MuP,
    #[serde(alias = "completedp", alias = "complete_dp")]
    CompletedP,
}

impl Parameterisation {
    pub const ALL: [Parameterisation; 2] = [Parameterisation::MuP, Parameterisation::CompletedP];

    pub fn as_str(self) -> &'static str {
        match self {
            Parameterisation::MuP => "mu_p",
            Parameterisation::CompletedP => "completed_p",
        }
    }
}

/// Row of the parameterisation table a trainable tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    InputEmbedding,
    HiddenWeight,
    HiddenBiasOrNorm,
    #[serde(rename = "qk_norm")]
    QKNorm,
    UnembedNorm,
    UnembedWeight,
    #[serde(rename = "residual_multiplier_mha")]
    ResidualMultiplierMHA,
    #[serde(rename = "residual_multiplier_mlp")]
    ResidualMultiplierMLP,
}

impl TensorRole {
    pub const ALL: [TensorRole; 8] = [
        TensorRole::InputEmbedding,
        TensorRole::HiddenWeight,
        TensorRole::HiddenBiasOrNorm,
        TensorRole::QKNorm,
        TensorRole::UnembedNorm,
        TensorRole::UnembedWeight,
        TensorRole::ResidualMultiplierMHA,
        TensorRole::ResidualMultiplierMLP,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TensorRole::InputEmbedding => "input_embedding",
            TensorRole::HiddenWeight => "hidden_weight",
            TensorRole::HiddenBiasOrNorm => "hidden_bias_or_norm",
            TensorRole::QKNorm => "qk_norm",
            TensorRole::UnembedNorm => "unembed_norm",
            TensorRole::UnembedWeight => "unembed_weight",
            TensorRole::ResidualMultiplierMHA => "residual_multiplier_mha",
            TensorRole::ResidualMultiplierMLP => "residual_multiplier_mlp",
        }
    }

    pub fn is_residual(self) -> bool {
        matches!(
            self,
            TensorRole::ResidualMultiplierMHA | TensorRole::ResidualMultiplierMLP
        )
    }
}

impl fmt::Display for TensorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TensorRole {
    type Err = ScalingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TensorRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| ScalingError::UnknownRole(s.to_string()))
    }
}

/// Hyperparameter kinds covered by the rule table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleHp {
    InitVariance,
    LearningRate,
    Eps,
    WeightDecay,
    OneMinusBeta1,
    OneMinusBeta2,
    ResidualMultiplier,
}

impl RuleHp {
    pub const ALL: [RuleHp; 7] = [
        RuleHp::InitVariance,
        RuleHp::LearningRate,
        RuleHp::Eps,
        RuleHp::WeightDecay,
        RuleHp::OneMinusBeta1,
        RuleHp::OneMinusBeta2,
        RuleHp::ResidualMultiplier,
    ];

    /// Whether this kind has a value for `role`.
    pub fn applies_to(self, role: TensorRole) -> bool {
        self != RuleHp::ResidualMultiplier || role.is_residual()
    }
}

/// A small signed rational used for rule exponents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exponent {
    pub num: i32,
    pub den: u32,
}

impl Exponent {
    pub const ZERO: Exponent = Exponent { num: 0, den: 1 };

    pub const fn int(num: i32) -> Self {
        Self { num, den: 1 }
    }

    pub const fn frac(num: i32, den: u32) -> Self {
        Self { num, den }
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_zero(self) -> bool {
        self.num == 0
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Exponent {
    type Err = ScalingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ScalingError::InvalidExponent(s.to_string());
        let s = s.trim();
        match s.split_once('/') {
            None => Ok(Exponent::int(s.parse().map_err(|_| bad())?)),
            Some((n, d)) => {
                let den: u32 = d.trim().parse().map_err(|_| bad())?;
                if den == 0 {
                    return Err(bad());
                }
                Ok(Exponent::frac(n.trim().parse().map_err(|_| bad())?, den))
            }
        }
    }
}

impl Serialize for Exponent {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Exponents of one rule cell: the multiplier is
/// `m_N^width · (m_L^α)^depth_alpha · (m_L^(α−1))^depth_alpha_minus_one · m_B^batch · m_D^tokens`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exponents {
    pub width: Exponent,
    pub depth_alpha: Exponent,
    pub depth_alpha_minus_one: Exponent,
    pub batch: Exponent,
    pub tokens: Exponent,
}

impl Default for Exponents {
    fn default() -> Self {
        Self {
            width: Exponent::ZERO,
            depth_alpha: Exponent::ZERO,
            depth_alpha_minus_one: Exponent::ZERO,
            batch: Exponent::ZERO,
            tokens: Exponent::ZERO,
        }
    }
}

impl Exponents {
    /// Multiplier for the given ratios, evaluated in log₂ space.
    pub fn multiplier(&self, ratios: &ScaleRatios) -> f64 {
        let log_depth = ratios.depth.log2();
        let log2 = self.width.value() * ratios.width.log2()
            + self.depth_alpha.value() * ratios.alpha * log_depth
            + self.depth_alpha_minus_one.value() * (ratios.alpha - 1.0) * log_depth
            + self.batch.value() * ratios.batch.log2()
            + self.tokens.value() * ratios.tokens.log2();
        log2.exp2()
    }
}

/// Table entry for `(role, hp, variant)`, or `None` where the kind does
/// not apply (residual multipliers on ordinary tensors).
pub fn rule_exponents(role: TensorRole, hp: RuleHp, variant: Parameterisation) -> Option<Exponents> {
    use TensorRole::*;
    if !hp.applies_to(role) {
        return None;
    }
    let complete = variant == Parameterisation::CompletedP;
    let mut e = Exponents::default();

    // Batch-size / token-horizon column (Complete^(d)P only).
    if complete {
        match hp {
            RuleHp::LearningRate | RuleHp::WeightDecay => {
                e.batch = Exponent::frac(1, 2);
                e.tokens = Exponent::frac(-1, 2);
            }
            RuleHp::Eps => {
                e.batch = Exponent::frac(-1, 2);
                e.tokens = Exponent::frac(1, 2);
            }
            RuleHp::OneMinusBeta1 | RuleHp::OneMinusBeta2 => {
                e.batch = Exponent::int(1);
                e.tokens = Exponent::int(-1);
            }
            RuleHp::InitVariance | RuleHp::ResidualMultiplier => {}
        }
    }

    // Width / depth column.
    match hp {
        RuleHp::InitVariance => match role {
            HiddenWeight => e.width = Exponent::int(-1),
            UnembedWeight => e.width = Exponent::int(-2),
            _ => {}
        },
        RuleHp::LearningRate => match role {
            HiddenWeight => {
                e.width = Exponent::int(-1);
                if complete {
                    e.depth_alpha_minus_one = Exponent::int(1);
                }
            }
            HiddenBiasOrNorm | QKNorm if complete => e.depth_alpha_minus_one = Exponent::int(1),
            UnembedWeight => e.width = Exponent::int(-1),
            _ => {}
        },
        RuleHp::Eps => match role {
            HiddenWeight | HiddenBiasOrNorm => {
                e.width = Exponent::int(-1);
                if complete {
                    e.depth_alpha = Exponent::int(-1);
                }
            }
            // Width-shared across heads: no width factor under Complete^(d)P.
            // Plain μP has no dedicated rule and treats it as a hidden norm.
            QKNorm => {
                if complete {
                    e.depth_alpha = Exponent::int(-1);
                } else {
                    e.width = Exponent::int(-1);
                }
            }
            InputEmbedding => e.width = Exponent::int(-1),
            _ => {}
        },
        RuleHp::WeightDecay => {
            if matches!(role, HiddenWeight | UnembedWeight) {
                e.width = Exponent::int(1);
            }
        }
        RuleHp::OneMinusBeta1 | RuleHp::OneMinusBeta2 => {}
        RuleHp::ResidualMultiplier => {
            if complete {
                e.depth_alpha = Exponent::int(-1);
            }
        }
    }
    Some(e)
}

/// Raised when a resolved `(1 − β)` exceeded 1 and was clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentumClamp {
    pub hp: RuleHp,
    /// `(1 − β)` before clamping.
    pub unclamped_one_minus_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedHyperParams {
    pub eta: f64,
    pub sigma2: f64,
    pub eps: f64,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub residual_mult: Option<f64>,
    pub num_steps_multiplier: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub clamped: Vec<MomentumClamp>,
}

impl ResolvedHyperParams {
    pub fn has_warnings(&self) -> bool {
        !self.clamped.is_empty()
    }
}

fn resolve_momentum(
    beta: f64,
    factor: f64,
    hp: RuleHp,
    clamped: &mut Vec<MomentumClamp>,
) -> f64 {
    if factor == 1.0 {
        return beta;
    }
    let one_minus = ((1.0 - beta).log2() + factor.log2()).exp2();
    if one_minus > 1.0 {
        clamped.push(MomentumClamp {
            hp,
            unclamped_one_minus_beta: one_minus,
        });
        0.0
    } else {
        1.0 - one_minus
    }
}

/// Resolve the hyperparameters of a tensor with the given role at the
/// target scale.
pub fn resolve(
    role: TensorRole,
    base: &BaseHyperParams,
    ratios: &ScaleRatios,
    variant: Parameterisation,
) -> Result<ResolvedHyperParams, ScalingError> {
    ratios.validate()?;
    base.validate()?;
    let factor = |hp| {
        rule_exponents(role, hp, variant)
            .map(|e| e.multiplier(ratios))
            .unwrap_or(1.0)
    };
    let mut clamped = Vec::new();
    let beta1 = resolve_momentum(base.beta1, factor(RuleHp::OneMinusBeta1), RuleHp::OneMinusBeta1, &mut clamped);
    let beta2 = resolve_momentum(base.beta2, factor(RuleHp::OneMinusBeta2), RuleHp::OneMinusBeta2, &mut clamped);
    Ok(ResolvedHyperParams {
        eta: base.eta * factor(RuleHp::LearningRate),
        sigma2: base.sigma2 * factor(RuleHp::InitVariance),
        eps: base.eps * factor(RuleHp::Eps),
        lambda: base.lambda * factor(RuleHp::WeightDecay),
        beta1,
        beta2,
        residual_mult: role.is_residual().then(|| factor(RuleHp::ResidualMultiplier)),
        num_steps_multiplier: ratios.tokens / ratios.batch,
        clamped,
    })
}

/// Forward multiplier `m_L^(−α)` on every residual branch.
pub fn residual_multiplier(ratios: &ScaleRatios) -> f64 {
    (-ratios.alpha * ratios.depth.log2()).exp2()
}

/// AdamLH weight-decay multiplier for a given learning-rate multiplier.
pub fn adamlh_lambda_multiplier(m_eta: f64) -> f64 {
    m_eta * m_eta
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "at", content = "index")]
pub enum TensorPosition {
    Embedding,
    Block(usize),
    Unembedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensorKind {
    Weight,
    Bias,
    NormMultiplier,
    QkNorm,
    ResidualMha,
    ResidualMlp,
}

impl FromStr for TensorKind {
    type Err = ScalingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "weight" => TensorKind::Weight,
            "bias" => TensorKind::Bias,
            "norm" | "norm-multiplier" => TensorKind::NormMultiplier,
            "qk-norm" => TensorKind::QkNorm,
            "residual-mha" => TensorKind::ResidualMha,
            "residual-mlp" => TensorKind::ResidualMlp,
            other => return Err(ScalingError::UnknownKind(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDescriptor {
    pub position: TensorPosition,
    pub kind: TensorKind,
}

impl TensorDescriptor {
    pub fn new(position: TensorPosition, kind: TensorKind) -> Self {
        Self { position, kind }
    }
}

/// Map a tensor description onto its table row.
pub fn classify_tensor(desc: &TensorDescriptor) -> Result<TensorRole, ScalingError> {
    use TensorKind as K;
    use TensorPosition as P;
    let role = match (desc.position, desc.kind) {
        (P::Embedding, K::Weight) => TensorRole::InputEmbedding,
        (P::Block(_), K::Weight) => TensorRole::HiddenWeight,
        (P::Block(_), K::Bias | K::NormMultiplier) => TensorRole::HiddenBiasOrNorm,
        (P::Block(_), K::QkNorm) => TensorRole::QKNorm,
        (P::Block(_), K::ResidualMha) => TensorRole::ResidualMultiplierMHA,
        (P::Block(_), K::ResidualMlp) => TensorRole::ResidualMultiplierMLP,
        (P::Unembedding, K::Weight) => TensorRole::UnembedWeight,
        (P::Unembedding, K::Bias | K::NormMultiplier) => TensorRole::UnembedNorm,
        (position, kind) => return Err(ScalingError::UnsupportedDescriptor { position, kind }),
    };
    Ok(role)
}

/// One serialized cell of the rule table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleRecord {
    pub variant: Parameterisation,
    pub role: TensorRole,
    pub hp: RuleHp,
    #[serde(flatten)]
    pub exponents: Exponents,
}

/// Versioned, machine-readable rule table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleTable {
    pub format: String,
    pub version: u32,
    pub rules: Vec<RuleRecord>,
}

pub const RULE_TABLE_FORMAT: &str = "hpt-scaling-rules";
pub const RULE_TABLE_VERSION: u32 = 1;

/// Rule table as shipped in `data/scaling_rules.json`.
pub const BUNDLED_RULE_TABLE: &str = include_str!("../data/scaling_rules.json");

impl RuleTable {
    /// Export the rules this crate resolves with.
    pub fn from_rules() -> Self {
        let mut rules = Vec::new();
        for variant in Parameterisation::ALL {
            for role in TensorRole::ALL {
                for hp in RuleHp::ALL {
                    if let Some(exponents) = rule_exponents(role, hp, variant) {
                        rules.push(RuleRecord {
                            variant,
                            role,
                            hp,
                            exponents,
                        });
                    }
                }
            }
        }
        Self {
            format: RULE_TABLE_FORMAT.to_string(),
            version: RULE_TABLE_VERSION,
            rules,
        }
    }

    pub fn parse(json: &str) -> Result<Self, ScalingError> {
        let table: RuleTable =
            serde_json::from_str(json).map_err(|e| ScalingError::RuleTable(e.to_string()))?;
        if table.format != RULE_TABLE_FORMAT {
            return Err(ScalingError::RuleTable(format!("unexpected format `{}`", table.format)));
        }
        if table.version != RULE_TABLE_VERSION {
            return Err(ScalingError::RuleTable(format!("unsupported version {}", table.version)));
        }
        Ok(table)
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_RULE_TABLE).expect("bundled rule table is valid")
    }

    pub fn get(&self, role: TensorRole, hp: RuleHp, variant: Parameterisation) -> Option<&Exponents> {
        self.rules
            .iter()
            .find(|r| r.role == role && r.hp == hp && r.variant == variant)
            .map(|r| &r.exponents)
    }
}
