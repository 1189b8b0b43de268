//! Depth–type Kronecker factorisation of per-module hyperparameter
//! multipliers.
//!
//! For a hyperparameter kind, the log₂ multiplier of module type `m` at
//! block `ℓ` is `type[m] + depth[ℓ]`. The depth term only applies to types
//! that live inside residual blocks. The depth vector is kept mean-zero; the
//! mean is absorbed into the type multipliers of depth-indexed types.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scaling::TensorRole;
use crate::sde::SdeMultipliers;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MultiplierError {
    #[error("module type `{0}` is not part of the taxonomy")]
    UnknownModule(ModuleType),
    #[error("depth index {index} out of range 1..={depth}")]
    DepthOutOfRange { index: usize, depth: usize },
    #[error("depth must be at least 1")]
    ZeroDepth,
    #[error("non-finite multiplier for `{0}`")]
    NonFinite(String),
    #[error("grid has {rows} rows for {types} module types")]
    GridShape { rows: usize, types: usize },
    #[error("grid row {0} has inconsistent length")]
    RaggedGrid(usize),
    #[error("duplicate module type `{0}` in taxonomy")]
    DuplicateModule(ModuleType),
    #[error("point has dimension {got}, layout expects {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("document: {0}")]
    Document(String),
}

/// Module types a trainable tensor (or residual multiplier) can belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleType {
    QkNorm,
    Qkv,
    AttnOut,
    MlpIn,
    MlpOut,
    BlockBias,
    BlockNorm,
    ResidualMha,
    ResidualMlp,
    InputEmbedding,
    OutputEmbedding,
    OutputBias,
    FinalNorm,
}

impl ModuleType {
    pub const ALL: [ModuleType; 13] = [
        ModuleType::QkNorm,
        ModuleType::Qkv,
        ModuleType::AttnOut,
        ModuleType::MlpIn,
        ModuleType::MlpOut,
        ModuleType::BlockBias,
        ModuleType::BlockNorm,
        ModuleType::ResidualMha,
        ModuleType::ResidualMlp,
        ModuleType::InputEmbedding,
        ModuleType::OutputEmbedding,
        ModuleType::OutputBias,
        ModuleType::FinalNorm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleType::QkNorm => "qk_norm",
            ModuleType::Qkv => "qkv",
            ModuleType::AttnOut => "attn_out",
            ModuleType::MlpIn => "mlp_in",
            ModuleType::MlpOut => "mlp_out",
            ModuleType::BlockBias => "block_bias",
            ModuleType::BlockNorm => "block_norm",
            ModuleType::ResidualMha => "residual_mha",
            ModuleType::ResidualMlp => "residual_mlp",
            ModuleType::InputEmbedding => "input_embedding",
            ModuleType::OutputEmbedding => "output_embedding",
            ModuleType::OutputBias => "output_bias",
            ModuleType::FinalNorm => "final_norm",
        }
    }

    /// Lives inside a residual block and therefore carries a depth index.
    pub fn is_depth_indexed(self) -> bool {
        !matches!(
            self,
            ModuleType::InputEmbedding
                | ModuleType::OutputEmbedding
                | ModuleType::OutputBias
                | ModuleType::FinalNorm
        )
    }

    pub fn is_residual(self) -> bool {
        matches!(self, ModuleType::ResidualMha | ModuleType::ResidualMlp)
    }

    /// Randomly initialised (as opposed to constant ones/zeros).
    pub fn has_random_init(self) -> bool {
        matches!(
            self,
            ModuleType::Qkv
                | ModuleType::AttnOut
                | ModuleType::MlpIn
                | ModuleType::MlpOut
                | ModuleType::InputEmbedding
                | ModuleType::OutputEmbedding
        )
    }

    pub fn tensor_role(self) -> TensorRole {
        match self {
            ModuleType::QkNorm => TensorRole::QKNorm,
            ModuleType::Qkv | ModuleType::AttnOut | ModuleType::MlpIn | ModuleType::MlpOut => {
                TensorRole::HiddenWeight
            }
            ModuleType::BlockBias | ModuleType::BlockNorm => TensorRole::HiddenBiasOrNorm,
            ModuleType::ResidualMha => TensorRole::ResidualMultiplierMHA,
            ModuleType::ResidualMlp => TensorRole::ResidualMultiplierMLP,
            ModuleType::InputEmbedding => TensorRole::InputEmbedding,
            ModuleType::OutputEmbedding => TensorRole::UnembedWeight,
            ModuleType::OutputBias | ModuleType::FinalNorm => TensorRole::UnembedNorm,
        }
    }
}

impl fmt::Display for ModuleType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleTypeTaxonomy {
    pub version: u32,
    types: Vec<ModuleType>,
}

impl ModuleTypeTaxonomy {
    pub fn new(types: Vec<ModuleType>) -> Result<Self, MultiplierError> {
        for (i, t) in types.iter().enumerate() {
            if types[..i].contains(t) {
                return Err(MultiplierError::DuplicateModule(*t));
            }
        }
        Ok(Self { version: 1, types })
    }

    /// All thirteen module types of the desk transformer.
    pub fn reference() -> Self {
        Self::new(ModuleType::ALL.to_vec()).expect("distinct")
    }

    pub fn types(&self) -> &[ModuleType] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn contains(&self, t: ModuleType) -> bool {
        self.types.contains(&t)
    }

    /// Types that own trainable tensors (everything except residual
    /// multipliers).
    pub fn tensor_types(&self) -> Vec<ModuleType> {
        self.types.iter().copied().filter(|t| !t.is_residual()).collect()
    }
}

/// Hyperparameter kinds that carry per-module multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HpKind {
    Lr,
    WeightDecay,
    Eps,
    OneMinusBeta1,
    OneMinusBeta2,
    InitStd,
}

impl HpKind {
    pub const ALL: [HpKind; 6] = [
        HpKind::Lr,
        HpKind::WeightDecay,
        HpKind::Eps,
        HpKind::OneMinusBeta1,
        HpKind::OneMinusBeta2,
        HpKind::InitStd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HpKind::Lr => "lr",
            HpKind::WeightDecay => "weight_decay",
            HpKind::Eps => "eps",
            HpKind::OneMinusBeta1 => "one_minus_beta1",
            HpKind::OneMinusBeta2 => "one_minus_beta2",
            HpKind::InitStd => "init_std",
        }
    }

    /// The SDE factor that applies to this kind.
    pub fn sde_factor(self, sde: &SdeMultipliers) -> f64 {
        match self {
            HpKind::Lr => sde.m_eta,
            HpKind::WeightDecay => sde.m_lambda,
            HpKind::Eps => sde.m_eps,
            HpKind::OneMinusBeta1 | HpKind::OneMinusBeta2 => sde.m_one_minus_beta,
            HpKind::InitStd => 1.0,
        }
    }
}

impl fmt::Display for HpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn check_finite(label: impl FnOnce() -> String, v: f64) -> Result<(), MultiplierError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(MultiplierError::NonFinite(label()))
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Kronecker-factored log₂ multipliers for one hyperparameter kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerModuleMultipliers {
    hp_kind: HpKind,
    type_mult: BTreeMap<ModuleType, f64>,
    depth_mult: Vec<f64>,
}

impl PerModuleMultipliers {
    /// Build and normalise the gauge (mean-zero depth vector).
    pub fn new(
        hp_kind: HpKind,
        type_mult: BTreeMap<ModuleType, f64>,
        depth_mult: Vec<f64>,
    ) -> Result<Self, MultiplierError> {
        if depth_mult.is_empty() {
            return Err(MultiplierError::ZeroDepth);
        }
        for (m, v) in &type_mult {
            check_finite(|| m.to_string(), *v)?;
        }
        for (i, v) in depth_mult.iter().enumerate() {
            check_finite(|| format!("depth[{}]", i + 1), *v)?;
        }
        let mut out = Self {
            hp_kind,
            type_mult,
            depth_mult,
        };
        out.normalize_gauge();
        Ok(out)
    }

    /// All-zero multipliers (every factor 1) over the given types.
    pub fn neutral(hp_kind: HpKind, types: &[ModuleType], depth: usize) -> Result<Self, MultiplierError> {
        Self::new(
            hp_kind,
            types.iter().map(|t| (*t, 0.0)).collect(),
            vec![0.0; depth],
        )
    }

    fn normalize_gauge(&mut self) {
        let m = mean(&self.depth_mult);
        if m == 0.0 {
            return;
        }
        self.depth_mult.iter_mut().for_each(|d| *d -= m);
        for (t, v) in self.type_mult.iter_mut() {
            if t.is_depth_indexed() {
                *v += m;
            }
        }
    }

    pub fn hp_kind(&self) -> HpKind {
        self.hp_kind
    }

    pub fn type_mult(&self) -> &BTreeMap<ModuleType, f64> {
        &self.type_mult
    }

    pub fn depth_mult(&self) -> &[f64] {
        &self.depth_mult
    }

    pub fn base_depth(&self) -> usize {
        self.depth_mult.len()
    }

    /// log₂ multiplier of `module` at 1-based block `depth_index`.
    /// Out-of-block modules ignore the depth index.
    pub fn log2_multiplier(&self, module: ModuleType, depth_index: usize) -> Result<f64, MultiplierError> {
        let t = *self
            .type_mult
            .get(&module)
            .ok_or(MultiplierError::UnknownModule(module))?;
        if !module.is_depth_indexed() {
            return Ok(t);
        }
        let depth = self.base_depth();
        if depth_index == 0 || depth_index > depth {
            return Err(MultiplierError::DepthOutOfRange { index: depth_index, depth });
        }
        Ok(t + self.depth_mult[depth_index - 1])
    }

    /// Net multiplier `2^(type + depth) · sde · cp`.
    pub fn compose(
        &self,
        module: ModuleType,
        depth_index: usize,
        sde: &SdeMultipliers,
        cp_factor: f64,
    ) -> Result<f64, MultiplierError> {
        let log2 = self.log2_multiplier(module, depth_index)?;
        Ok(log2.exp2() * self.hp_kind.sde_factor(sde) * cp_factor)
    }

    /// Value of the piecewise-linear depth profile at `t ∈ (0, 1]`, with
    /// knots at `ℓ / L` and constant extension below `1 / L`.
    pub fn depth_profile(&self, t: f64) -> f64 {
        let l = self.base_depth();
        let d = &self.depth_mult;
        if l == 1 {
            return d[0];
        }
        let x = t * l as f64; // knot ℓ sits at x = ℓ
        if x <= 1.0 {
            return d[0];
        }
        if x >= l as f64 {
            return d[l - 1];
        }
        let lo = x.floor() as usize; // 1 ≤ lo < l
        let frac = x - lo as f64;
        if frac == 0.0 {
            return d[lo - 1];
        }
        d[lo - 1] + frac * (d[lo] - d[lo - 1])
    }

    /// Transfer the depth multipliers to a model with `new_depth` blocks by
    /// linear interpolation in `ℓ / L`.
    pub fn interpolate_depth(&self, new_depth: usize) -> Result<Self, MultiplierError> {
        if new_depth == 0 {
            return Err(MultiplierError::ZeroDepth);
        }
        let depth_mult = (1..=new_depth)
            .map(|l| self.depth_profile(l as f64 / new_depth as f64))
            .collect();
        Self::new(self.hp_kind, self.type_mult.clone(), depth_mult)
    }

    /// Full `|M| × L` grid of log₂ multipliers.
    pub fn expand_kronecker(&self) -> FullMultiplierGrid {
        let types: Vec<ModuleType> = self.type_mult.keys().copied().collect();
        let values = self
            .type_mult
            .iter()
            .map(|(m, t)| {
                self.depth_mult
                    .iter()
                    .map(|d| if m.is_depth_indexed() { t + d } else { *t })
                    .collect()
            })
            .collect();
        FullMultiplierGrid {
            hp_kind: self.hp_kind,
            types,
            values,
        }
    }

    pub fn with_type(mut self, module: ModuleType, log2: f64) -> Self {
        self.type_mult.insert(module, log2);
        self
    }
}

/// Fully uncoupled per-(type, block) log₂ multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullMultiplierGrid {
    pub hp_kind: HpKind,
    pub types: Vec<ModuleType>,
    /// `values[m][ℓ]`, one row per entry of `types`.
    pub values: Vec<Vec<f64>>,
}

impl FullMultiplierGrid {
    pub fn new(hp_kind: HpKind, types: Vec<ModuleType>, values: Vec<Vec<f64>>) -> Result<Self, MultiplierError> {
        let grid = Self { hp_kind, types, values };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), MultiplierError> {
        if self.values.len() != self.types.len() {
            return Err(MultiplierError::GridShape {
                rows: self.values.len(),
                types: self.types.len(),
            });
        }
        let depth = self.depth();
        if depth == 0 {
            return Err(MultiplierError::ZeroDepth);
        }
        for (i, row) in self.values.iter().enumerate() {
            if row.len() != depth {
                return Err(MultiplierError::RaggedGrid(i));
            }
            for (j, v) in row.iter().enumerate() {
                check_finite(|| format!("grid[{i}][{j}]"), *v)?;
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Least-squares projection onto the Kronecker subspace under the
    /// mean-zero depth gauge: type = row mean, depth = column mean − grand
    /// mean (columns taken over depth-indexed rows).
    pub fn project_to_kronecker(&self) -> Result<PerModuleMultipliers, MultiplierError> {
        self.validate()?;
        let depth = self.depth();
        let type_mult = self
            .types
            .iter()
            .zip(&self.values)
            .map(|(m, row)| (*m, mean(row)))
            .collect();
        let indexed: Vec<&Vec<f64>> = self
            .types
            .iter()
            .zip(&self.values)
            .filter(|(m, _)| m.is_depth_indexed())
            .map(|(_, row)| row)
            .collect();
        let depth_mult = if indexed.is_empty() {
            vec![0.0; depth]
        } else {
            let col_means: Vec<f64> = (0..depth)
                .map(|l| indexed.iter().map(|row| row[l]).sum::<f64>() / indexed.len() as f64)
                .collect();
            let grand = mean(&col_means);
            col_means.iter().map(|c| c - grand).collect()
        };
        PerModuleMultipliers::new(self.hp_kind, type_mult, depth_mult)
    }

    /// Projection onto per-type multipliers shared across depth.
    pub fn project_to_typed_only(&self) -> Result<PerModuleMultipliers, MultiplierError> {
        self.validate()?;
        let type_mult = self
            .types
            .iter()
            .zip(&self.values)
            .map(|(m, row)| (*m, mean(row)))
            .collect();
        PerModuleMultipliers::new(self.hp_kind, type_mult, vec![0.0; self.depth()])
    }

    /// Elementwise `self − other` (same shape assumed).
    pub fn residual(&self, other: &FullMultiplierGrid) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect()
    }

    pub fn frobenius_distance(&self, other: &FullMultiplierGrid) -> f64 {
        self.residual(other)
            .iter()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-depth log₂ residual-branch multipliers (two per block), applied on
/// top of the `m_L^(−α)` branch scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualMultipliers {
    pub mha: Vec<f64>,
    pub mlp: Vec<f64>,
}

impl ResidualMultipliers {
    pub fn neutral(depth: usize) -> Self {
        Self {
            mha: vec![0.0; depth],
            mlp: vec![0.0; depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.mha.len()
    }

    /// Linear-in-`ℓ/L` transfer to a new depth, like the depth multipliers.
    pub fn interpolate_depth(&self, new_depth: usize) -> Result<Self, MultiplierError> {
        let interp = |v: &[f64]| -> Result<Vec<f64>, MultiplierError> {
            // Reuse the profile evaluation without gauge fixing.
            let tmp = PerModuleMultipliers {
                hp_kind: HpKind::Lr,
                type_mult: BTreeMap::new(),
                depth_mult: v.to_vec(),
            };
            if new_depth == 0 || v.is_empty() {
                return Err(MultiplierError::ZeroDepth);
            }
            Ok((1..=new_depth)
                .map(|l| tmp.depth_profile(l as f64 / new_depth as f64))
                .collect())
        };
        Ok(Self {
            mha: interp(&self.mha)?,
            mlp: interp(&self.mlp)?,
        })
    }
}

/// A complete set of per-module multipliers: one factored set per
/// hyperparameter kind plus residual-branch multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleHyperParams {
    pub kinds: BTreeMap<HpKind, PerModuleMultipliers>,
    pub residual: ResidualMultipliers,
}

impl ModuleHyperParams {
    /// Every multiplier equal to one.
    pub fn neutral(taxonomy: &ModuleTypeTaxonomy, depth: usize) -> Self {
        let types = taxonomy.tensor_types();
        Self {
            kinds: HpKind::ALL
                .iter()
                .map(|k| (*k, PerModuleMultipliers::neutral(*k, &types, depth).expect("depth > 0")))
                .collect(),
            residual: ResidualMultipliers::neutral(depth),
        }
    }

    /// Linear multiplier for `(kind, module, block)`; 1 when the kind or
    /// module carries no multiplier.
    pub fn factor(&self, kind: HpKind, module: ModuleType, depth_index: usize) -> f64 {
        match self.kinds.get(&kind) {
            Some(m) if m.type_mult.contains_key(&module) => m
                .log2_multiplier(module, depth_index)
                .map(f64::exp2)
                .unwrap_or(1.0),
            _ => 1.0,
        }
    }

    /// Linear residual multiplier for the given branch at 1-based block.
    pub fn residual_factor(&self, module: ModuleType, depth_index: usize) -> f64 {
        let v = match module {
            ModuleType::ResidualMha => &self.residual.mha,
            ModuleType::ResidualMlp => &self.residual.mlp,
            _ => return 1.0,
        };
        v.get(depth_index.wrapping_sub(1)).map_or(1.0, |x| x.exp2())
    }

    pub fn interpolate_depth(&self, new_depth: usize) -> Result<Self, MultiplierError> {
        Ok(Self {
            kinds: self
                .kinds
                .iter()
                .map(|(k, m)| Ok((*k, m.interpolate_depth(new_depth)?)))
                .collect::<Result<_, MultiplierError>>()?,
            residual: self.residual.interpolate_depth(new_depth)?,
        })
    }
}

/// Which coordinates of a [`ModuleHyperParams`] a search optimises.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindLayout {
    pub kind: HpKind,
    /// Types that get their own searchable type multiplier.
    pub types: Vec<ModuleType>,
    /// Whether the kind also searches a per-depth vector.
    pub depth_indexed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchLayout {
    pub depth: usize,
    pub kinds: Vec<KindLayout>,
    /// Search the two per-depth residual multipliers of every block.
    pub residual_per_depth: bool,
}

/// A named coordinate of a search vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coordinate {
    Type { kind: HpKind, module: ModuleType },
    Depth { kind: HpKind, index: usize },
    Residual { module: ModuleType, index: usize },
}

impl SearchLayout {
    /// Reference layout at the given depth: every optimizer kind gets a
    /// multiplier per tensor type, the init scale only for randomly
    /// initialised types, the learning rate additionally gets a depth
    /// vector, and both residual branches are searched per block.
    pub fn reference(taxonomy: &ModuleTypeTaxonomy, depth: usize) -> Self {
        let tensor_types = taxonomy.tensor_types();
        let kinds = HpKind::ALL
            .iter()
            .map(|&kind| KindLayout {
                kind,
                types: if kind == HpKind::InitStd {
                    tensor_types.iter().copied().filter(|t| t.has_random_init()).collect()
                } else {
                    tensor_types.clone()
                },
                depth_indexed: kind == HpKind::Lr,
            })
            .collect();
        Self {
            depth,
            kinds,
            residual_per_depth: true,
        }
    }

    /// Learning-rate-only layout (type + depth multipliers).
    pub fn learning_rate_only(taxonomy: &ModuleTypeTaxonomy, depth: usize) -> Self {
        Self {
            depth,
            kinds: vec![KindLayout {
                kind: HpKind::Lr,
                types: taxonomy.tensor_types(),
                depth_indexed: true,
            }],
            residual_per_depth: false,
        }
    }

    pub fn coordinates(&self) -> Vec<Coordinate> {
        let mut out = Vec::new();
        for k in &self.kinds {
            out.extend(k.types.iter().map(|m| Coordinate::Type { kind: k.kind, module: *m }));
            if k.depth_indexed {
                out.extend((1..=self.depth).map(|index| Coordinate::Depth { kind: k.kind, index }));
            }
        }
        if self.residual_per_depth {
            for module in [ModuleType::ResidualMha, ModuleType::ResidualMlp] {
                out.extend((1..=self.depth).map(|index| Coordinate::Residual { module, index }));
            }
        }
        out
    }

    /// Number of searchable multipliers.
    pub fn dimension(&self) -> usize {
        self.kinds
            .iter()
            .map(|k| k.types.len() + if k.depth_indexed { self.depth } else { 0 })
            .sum::<usize>()
            + if self.residual_per_depth { 2 * self.depth } else { 0 }
    }

    /// Map a search point (log₂ space) to multipliers. Types not in the
    /// layout stay at zero.
    pub fn decode(&self, taxonomy: &ModuleTypeTaxonomy, point: &[f64]) -> Result<ModuleHyperParams, MultiplierError> {
        let expected = self.dimension();
        if point.len() != expected {
            return Err(MultiplierError::Dimension { got: point.len(), expected });
        }
        let mut out = ModuleHyperParams::neutral(taxonomy, self.depth);
        let mut it = point.iter().copied();
        for k in &self.kinds {
            let mut type_mult: BTreeMap<ModuleType, f64> = out.kinds[&k.kind].type_mult.clone();
            for m in &k.types {
                type_mult.insert(*m, it.next().expect("dimension checked"));
            }
            let depth_mult = if k.depth_indexed {
                (&mut it).take(self.depth).collect()
            } else {
                vec![0.0; self.depth]
            };
            out.kinds.insert(k.kind, PerModuleMultipliers::new(k.kind, type_mult, depth_mult)?);
        }
        if self.residual_per_depth {
            out.residual.mha = (&mut it).take(self.depth).collect();
            out.residual.mlp = (&mut it).take(self.depth).collect();
        }
        Ok(out)
    }

    /// Inverse of [`decode`](Self::decode) on the layout's coordinates.
    pub fn encode(&self, params: &ModuleHyperParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dimension());
        for k in &self.kinds {
            let m = params.kinds.get(&k.kind);
            for t in &k.types {
                out.push(m.and_then(|m| m.type_mult.get(t)).copied().unwrap_or(0.0));
            }
            if k.depth_indexed {
                match m {
                    Some(m) if m.base_depth() == self.depth => out.extend_from_slice(&m.depth_mult),
                    _ => out.extend(std::iter::repeat_n(0.0, self.depth)),
                }
            }
        }
        if self.residual_per_depth {
            out.extend_from_slice(&params.residual.mha);
            out.extend_from_slice(&params.residual.mlp);
        }
        out
    }
}

pub const MULTIPLIER_DOC_FORMAT: &str = "hpt-module-multipliers";
pub const MULTIPLIER_DOC_VERSION: u32 = 1;

/// Versioned JSON document used to hand multipliers from search to
/// training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiplierDocument {
    pub format: String,
    pub version: u32,
    pub taxonomy_version: u32,
    pub base_depth: usize,
    pub multipliers: ModuleHyperParams,
}

impl MultiplierDocument {
    pub fn new(taxonomy: &ModuleTypeTaxonomy, multipliers: ModuleHyperParams) -> Self {
        Self {
            format: MULTIPLIER_DOC_FORMAT.into(),
            version: MULTIPLIER_DOC_VERSION,
            taxonomy_version: taxonomy.version,
            base_depth: multipliers.residual.depth(),
            multipliers,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, MultiplierError> {
        let doc: Self = serde_json::from_str(s).map_err(|e| MultiplierError::Document(e.to_string()))?;
        if doc.format != MULTIPLIER_DOC_FORMAT || doc.version != MULTIPLIER_DOC_VERSION {
            return Err(MultiplierError::Document(format!(
                "unsupported document {} v{}",
                doc.format, doc.version
            )));
        }
        Ok(doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_types() -> Vec<ModuleType> {
        vec![ModuleType::Qkv, ModuleType::MlpIn]
    }

    fn mults(kind: HpKind, types: &[(ModuleType, f64)], depth: &[f64]) -> PerModuleMultipliers {
        PerModuleMultipliers::new(kind, types.iter().copied().collect(), depth.to_vec()).unwrap()
    }

    #[test]
    fn compose_examples() {
        let m = PerModuleMultipliers::neutral(HpKind::Lr, &two_types(), 3).unwrap();
        assert_eq!(m.compose(ModuleType::Qkv, 2, &SdeMultipliers::IDENTITY, 1.0).unwrap(), 1.0);

        // Gauge keeps the product: type 1, depth −1 at ℓ = 1.
        let m = mults(HpKind::Lr, &[(ModuleType::Qkv, 1.0)], &[-1.0, 1.0]);
        assert_eq!(m.compose(ModuleType::Qkv, 1, &SdeMultipliers::IDENTITY, 1.0).unwrap(), 1.0);

        let m = mults(HpKind::Lr, &[(ModuleType::Qkv, 2.0)], &[0.0, 0.0]);
        let sde = SdeMultipliers { m_eta: 0.5, ..SdeMultipliers::IDENTITY };
        let direct = 2f64.powi(2) * 0.5;
        assert_eq!(m.compose(ModuleType::Qkv, 2, &sde, 1.0).unwrap(), direct);
        assert_eq!(direct, 2.0);
    }

    #[test]
    fn compose_errors() {
        let m = PerModuleMultipliers::neutral(HpKind::Lr, &two_types(), 2).unwrap();
        assert_eq!(
            m.compose(ModuleType::AttnOut, 1, &SdeMultipliers::IDENTITY, 1.0),
            Err(MultiplierError::UnknownModule(ModuleType::AttnOut))
        );
        assert!(matches!(
            m.compose(ModuleType::Qkv, 3, &SdeMultipliers::IDENTITY, 1.0),
            Err(MultiplierError::DepthOutOfRange { index: 3, depth: 2 })
        ));
        assert!(m.compose(ModuleType::Qkv, 0, &SdeMultipliers::IDENTITY, 1.0).is_err());
    }

    #[test]
    fn out_of_block_modules_ignore_depth() {
        let m = mults(HpKind::Lr, &[(ModuleType::InputEmbedding, 1.0), (ModuleType::Qkv, 0.0)], &[-2.0, 2.0]);
        assert_eq!(m.log2_multiplier(ModuleType::InputEmbedding, 1).unwrap(), 1.0);
        assert_eq!(m.log2_multiplier(ModuleType::InputEmbedding, 99).unwrap(), 1.0);
    }

    #[test]
    fn gauge_is_normalised_on_construction() {
        let m = mults(HpKind::Lr, &[(ModuleType::Qkv, 0.0), (ModuleType::FinalNorm, 0.5)], &[1.0, 3.0]);
        assert_eq!(m.depth_mult(), &[-1.0, 1.0]);
        assert_eq!(m.type_mult()[&ModuleType::Qkv], 2.0);
        assert_eq!(m.type_mult()[&ModuleType::FinalNorm], 0.5);
    }

    #[test]
    fn interpolation_examples() {
        let (a, b) = (-0.75, 0.25);
        // Mean of (a, b) is −0.25; with type 0.25 the profile stays (a, b).
        let m = mults(HpKind::Lr, &[(ModuleType::Qkv, 0.0)], &[a, b]);
        let offset = m.type_mult()[&ModuleType::Qkv];
        let profile: Vec<f64> = [0.25, 0.5, 0.75, 1.0].iter().map(|t| m.depth_profile(*t) + offset).collect();
        assert_eq!(profile, vec![a, a, (a + b) / 2.0, b]);

        let up = m.interpolate_depth(4).unwrap();
        for (l, expect) in [a, a, (a + b) / 2.0, b].iter().enumerate() {
            let got = up.log2_multiplier(ModuleType::Qkv, l + 1).unwrap();
            assert!((got - expect).abs() < 1e-15);
        }

        let constant = mults(HpKind::Eps, &[(ModuleType::Qkv, 1.0)], &[0.3; 3]);
        let c = constant.interpolate_depth(7).unwrap();
        assert!(c.depth_mult().iter().all(|d| d.abs() < 1e-15));

        let same = m.interpolate_depth(2).unwrap();
        assert_eq!(same, m);
        assert_eq!(m.interpolate_depth(0), Err(MultiplierError::ZeroDepth));
    }

    #[test]
    fn single_layer_extends_constantly() {
        let m = mults(HpKind::Lr, &[(ModuleType::Qkv, 0.5)], &[0.0]);
        let up = m.interpolate_depth(5).unwrap();
        assert_eq!(up.depth_mult(), &[0.0; 5]);
        assert_eq!(up.type_mult()[&ModuleType::Qkv], 0.5);
    }

    #[test]
    fn expand_example() {
        let m = PerModuleMultipliers::new(
            HpKind::Lr,
            [(ModuleType::Qkv, 0.0), (ModuleType::MlpIn, 1.0)].into_iter().collect(),
            vec![-0.5, 0.5],
        )
        .unwrap();
        let g = m.expand_kronecker();
        assert_eq!(g.values, vec![vec![-0.5, 0.5], vec![0.5, 1.5]]);
    }

    #[test]
    fn project_examples() {
        let g = FullMultiplierGrid::new(HpKind::Lr, two_types(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let p = g.project_to_kronecker().unwrap();
        assert_eq!(p.type_mult().values().copied().collect::<Vec<_>>(), vec![0.5, 0.5]);
        assert_eq!(p.depth_mult(), &[0.0, 0.0]);
        assert_eq!(g.residual(&p.expand_kronecker()), vec![vec![-0.5, 0.5], vec![0.5, -0.5]]);

        let g = FullMultiplierGrid::new(HpKind::Lr, vec![ModuleType::Qkv], vec![vec![0.0, 2.0]]).unwrap();
        let p = g.project_to_typed_only().unwrap();
        assert_eq!(p.type_mult()[&ModuleType::Qkv], 1.0);
        assert_eq!(p.depth_mult(), &[0.0, 0.0]);
        let again = p.expand_kronecker().project_to_typed_only().unwrap();
        assert_eq!(again, p);
    }

    #[test]
    fn ragged_grid_rejected() {
        assert_eq!(
            FullMultiplierGrid::new(HpKind::Lr, two_types(), vec![vec![0.0, 1.0], vec![1.0]]),
            Err(MultiplierError::RaggedGrid(1))
        );
        assert!(FullMultiplierGrid::new(HpKind::Lr, two_types(), vec![vec![0.0]]).is_err());
    }

    #[test]
    fn reference_layout_has_79_coordinates() {
        let tax = ModuleTypeTaxonomy::reference();
        assert_eq!(tax.len(), 13);
        let layout = SearchLayout::reference(&tax, 6);
        assert_eq!(layout.dimension(), 79);
        assert_eq!(layout.coordinates().len(), 79);
    }

    #[test]
    fn decode_encode_roundtrip() {
        let tax = ModuleTypeTaxonomy::reference();
        let layout = SearchLayout::reference(&tax, 3);
        // Depth entries mean-zero so that decode leaves them untouched.
        let mut point: Vec<f64> = (0..layout.dimension()).map(|i| (i % 5) as f64 * 0.25 - 0.5).collect();
        let lr_types = layout.kinds[0].types.len();
        point[lr_types..lr_types + 3].copy_from_slice(&[-0.5, 0.0, 0.5]);
        let params = layout.decode(&tax, &point).unwrap();
        assert_eq!(layout.encode(&params), point);
        assert!(layout.decode(&tax, &point[1..]).is_err());
    }

    #[test]
    fn factor_lookup() {
        let tax = ModuleTypeTaxonomy::reference();
        let layout = SearchLayout::reference(&tax, 2);
        let mut point = vec![0.0; layout.dimension()];
        point[0] = 1.0; // lr, qk_norm
        let n = point.len();
        point[n - 1] = -1.0; // residual mlp, block 2
        let p = layout.decode(&tax, &point).unwrap();
        assert_eq!(p.factor(HpKind::Lr, ModuleType::QkNorm, 1), 2.0);
        assert_eq!(p.factor(HpKind::Lr, ModuleType::Qkv, 1), 1.0);
        assert_eq!(p.factor(HpKind::InitStd, ModuleType::QkNorm, 1), 1.0);
        assert_eq!(p.residual_factor(ModuleType::ResidualMlp, 2), 0.5);
        assert_eq!(p.residual_factor(ModuleType::ResidualMha, 2), 1.0);
    }

    #[test]
    fn document_roundtrip() {
        let tax = ModuleTypeTaxonomy::reference();
        let doc = MultiplierDocument::new(&tax, ModuleHyperParams::neutral(&tax, 4));
        let back = MultiplierDocument::from_json(&doc.to_json()).unwrap();
        assert_eq!(back, doc);
        assert!(MultiplierDocument::from_json("{\"format\":\"x\"}").is_err());
    }

    #[test]
    fn duplicate_taxonomy_rejected() {
        assert!(ModuleTypeTaxonomy::new(vec![ModuleType::Qkv, ModuleType::Qkv]).is_err());
    }
}
