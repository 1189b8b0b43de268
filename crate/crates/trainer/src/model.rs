//! Pre-norm decoder-only transformer with hand-written reverse mode.
//!
//! Block `ℓ`:
//! ```text
//! x ← x + r_attn,ℓ · Attn(RMSNorm(x))      (optional per-head QK RMSNorm)
//! x ← x + r_mlp,ℓ  · W₂ GELU(W₁ RMSNorm(x) + b₁) + b₂
//! ```
//! Width grows by adding heads at a fixed head dimension. QK-norm gains
//! have head-dimension length and are shared by all heads.

use hpt_core::per_module::{HpKind, ModuleHyperParams, ModuleType};
use hpt_core::scaling::{resolve, BaseHyperParams, Parameterisation, ResolvedHyperParams, ScaleRatios, ScalingError, TensorRole};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::{self, matmul, Layout};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
    #[error("token {token} outside vocabulary of {vocab}")]
    Token { token: u32, vocab: usize },
    #[error("batch holds {got} tokens, expected {expected}")]
    BatchShape { got: usize, expected: usize },
}

/// Parameterisation used to build and optimise a model. `Sp` is the
/// unscaled fan-in reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelParameterisation {
    Sp,
    #[serde(alias = "mup")]
    MuP,
    #[serde(alias = "completedp")]
    CompletedP,
}

impl ModelParameterisation {
    pub fn scaling(self) -> Option<Parameterisation> {
        match self {
            ModelParameterisation::Sp => None,
            ModelParameterisation::MuP => Some(Parameterisation::MuP),
            ModelParameterisation::CompletedP => Some(Parameterisation::CompletedP),
        }
    }
}

fn default_base_width() -> usize {
    64
}
fn default_base_depth() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub mlp_ratio: usize,
    pub alpha: f64,
    pub parameterisation: ModelParameterisation,
    pub qk_norm: bool,
    pub seed: u64,
    /// Width and depth at which the base hyperparameters were tuned.
    pub base_width: usize,
    pub base_depth: usize,
    /// Initialise each residual branch's output projection to zero.
    pub zero_branch_outputs: bool,
}

impl Default for ModelConfig {
    /// The desk reference: width 64, depth 2, vocabulary 64.
    fn default() -> Self {
        Self::new(default_base_width(), default_base_depth(), 64, ModelParameterisation::CompletedP)
    }
}

impl ModelConfig {
    pub fn new(width: usize, depth: usize, vocab: usize, parameterisation: ModelParameterisation) -> Self {
        Self {
            width,
            depth,
            head_dim: 16,
            vocab,
            mlp_ratio: 4,
            alpha: 1.0,
            parameterisation,
            qk_norm: true,
            seed: 0,
            base_width: default_base_width(),
            base_depth: default_base_depth(),
            zero_branch_outputs: false,
        }
    }

    pub fn heads(&self) -> usize {
        self.width / self.head_dim
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.width == 0 || self.depth == 0 || self.vocab == 0 || self.head_dim == 0 || self.mlp_ratio == 0 {
            return bad("width, depth, vocab, head_dim and mlp_ratio must be positive".into());
        }
        if !self.width.is_multiple_of(self.head_dim) {
            return bad(format!("width {} is not a multiple of head_dim {}", self.width, self.head_dim));
        }
        if !(0.5..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0.5, 1]", self.alpha));
        }
        if self.base_width == 0 || self.base_depth == 0 {
            return bad("base shape must be positive".into());
        }
        Ok(())
    }

    /// Width and depth ratios against the base shape; batch and token
    /// ratios are left at one.
    pub fn shape_ratios(&self) -> ScaleRatios {
        ScaleRatios {
            width: self.width as f64 / self.base_width as f64,
            depth: self.depth as f64 / self.base_depth as f64,
            alpha: self.alpha,
            ..ScaleRatios::identity()
        }
    }
}

/// Optimiser settings attached to one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorHp {
    pub lr: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub role: TensorRole,
    pub module: ModuleType,
    /// 1-based block index for in-block tensors.
    pub block: Option<usize>,
    pub hp: TensorHp,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIndex {
    norm1: usize,
    wqkv: usize,
    bqkv: usize,
    q_gain: Option<usize>,
    k_gain: Option<usize>,
    wo: usize,
    bo: usize,
    norm2: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Index {
    embed: usize,
    blocks: Vec<BlockIndex>,
    final_norm: usize,
    wu: usize,
    bu: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Vec<Param>,
    /// Per block: (attention branch, MLP branch) output multipliers.
    pub residual: Vec<(f32, f32)>,
    index: Index,
}

/// Per-block forward/backward measurements.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockProbe {
    pub attn_preact_rms: f64,
    pub mlp_preact_rms: f64,
    pub residual_rms: f64,
    pub mlp_preact_grad_rms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub blocks: Vec<BlockProbe>,
    pub logits_rms: f64,
}

struct BlockCache {
    xhat1: Vec<f32>,
    rms1: Vec<f32>,
    h1: Vec<f32>,
    qhat: Vec<f32>,
    qrms: Vec<f32>,
    khat: Vec<f32>,
    krms: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    attn: Vec<f32>,
    xhat2: Vec<f32>,
    rms2: Vec<f32>,
    h2: Vec<f32>,
    u: Vec<f32>,
    a: Vec<f32>,
}

struct Forward {
    inputs: Vec<usize>,
    blocks: Vec<BlockCache>,
    xhat_f: Vec<f32>,
    rms_f: Vec<f32>,
    hf: Vec<f32>,
    dlogits: Vec<f32>,
    loss: f64,
}

fn clamp_one_minus(beta: f64, factor: f64) -> f64 {
    if factor == 1.0 {
        return beta;
    }
    let om = ((1.0 - beta) * factor).min(1.0);
    1.0 - om
}

pub fn build_model(
    cfg: &ModelConfig,
    base: &BaseHyperParams,
    ratios: &ScaleRatios,
    per_module: Option<&ModuleHyperParams>,
) -> Result<Model, ModelError> {
    cfg.validate()?;
    base.validate()?;
    ratios.validate()?;
    let n = cfg.width;
    let f = cfg.hidden();
    let v = cfg.vocab;
    let d = cfg.head_dim;
    let bw = cfg.base_width as f64;

    let resolved = |role: TensorRole| -> Result<ResolvedHyperParams, ModelError> {
        Ok(match cfg.parameterisation.scaling() {
            Some(p) => resolve(role, base, ratios, p)?,
            None => resolve(role, base, &ScaleRatios::identity(), Parameterisation::MuP)?,
        })
    };

    let mut params: Vec<Param> = Vec::new();
    // Base-width initial variance (before scaling) for random tensors;
    // `None` for constant-initialised ones.
    let mut add = |name: String,
                   shape: Vec<usize>,
                   role: TensorRole,
                   module: ModuleType,
                   block: Option<usize>,
                   init: Init|
     -> Result<usize, ModelError> {
        let r = resolved(role)?;
        let pm = |kind: HpKind| per_module.map_or(1.0, |m| m.factor(kind, module, block.unwrap_or(1)));
        let init_std = match init {
            Init::Random { base_var, actual_var } => {
                let var = match cfg.parameterisation {
                    ModelParameterisation::Sp => base.sigma2 * actual_var,
                    _ => r.sigma2 * base_var,
                };
                var.sqrt() * pm(HpKind::InitStd)
            }
            _ => 0.0,
        };
        let hp = TensorHp {
            lr: r.eta * pm(HpKind::Lr),
            eps: r.eps * pm(HpKind::Eps),
            weight_decay: r.lambda * pm(HpKind::WeightDecay),
            beta1: clamp_one_minus(r.beta1, pm(HpKind::OneMinusBeta1)),
            beta2: clamp_one_minus(r.beta2, pm(HpKind::OneMinusBeta2)),
            init_std,
        };
        let len: usize = shape.iter().product();
        let id = params.len();
        let data = match init {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::Random { .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(name_stream(&name));
                (0..len)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (z * init_std) as f32
                    })
                    .collect()
            }
        };
        params.push(Param { name, shape, data, role, module, block, hp });
        Ok(id)
    };

    let random = |fan_in_base: f64, fan_in: f64| Init::Random { base_var: 1.0 / fan_in_base, actual_var: 1.0 / fan_in };
    let mlp_base = bw * cfg.mlp_ratio as f64;
    let branch_out = |fan_in_base: f64, fan_in: f64| {
        if cfg.zero_branch_outputs {
            Init::Zeros
        } else {
            random(fan_in_base, fan_in)
        }
    };

    let embed = add(
        "embed".into(),
        vec![v, n],
        TensorRole::InputEmbedding,
        ModuleType::InputEmbedding,
        None,
        Init::Random { base_var: 1.0, actual_var: 1.0 },
    )?;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for l in 1..=cfg.depth {
        let b = Some(l);
        let p = |s: &str| format!("block{l}.{s}");
        use ModuleType as M;
        use TensorRole as R;
        let norm1 = add(p("norm1"), vec![n], R::HiddenBiasOrNorm, M::BlockNorm, b, Init::Ones)?;
        let wqkv = add(p("wqkv"), vec![n, 3 * n], R::HiddenWeight, M::Qkv, b, random(bw, n as f64))?;
        let bqkv = add(p("bqkv"), vec![3 * n], R::HiddenBiasOrNorm, M::BlockBias, b, Init::Zeros)?;
        let (q_gain, k_gain) = if cfg.qk_norm {
            (
                Some(add(p("q_norm"), vec![d], R::QKNorm, M::QkNorm, b, Init::Ones)?),
                Some(add(p("k_norm"), vec![d], R::QKNorm, M::QkNorm, b, Init::Ones)?),
            )
        } else {
            (None, None)
        };
        let wo = add(p("wo"), vec![n, n], R::HiddenWeight, M::AttnOut, b, branch_out(bw, n as f64))?;
        let bo = add(p("bo"), vec![n], R::HiddenBiasOrNorm, M::BlockBias, b, Init::Zeros)?;
        let norm2 = add(p("norm2"), vec![n], R::HiddenBiasOrNorm, M::BlockNorm, b, Init::Ones)?;
        let w1 = add(p("w1"), vec![n, f], R::HiddenWeight, M::MlpIn, b, random(bw, n as f64))?;
        let b1 = add(p("b1"), vec![f], R::HiddenBiasOrNorm, M::BlockBias, b, Init::Zeros)?;
        let w2 = add(p("w2"), vec![f, n], R::HiddenWeight, M::MlpOut, b, branch_out(mlp_base, f as f64))?;
        let b2 = add(p("b2"), vec![n], R::HiddenBiasOrNorm, M::BlockBias, b, Init::Zeros)?;
        blocks.push(BlockIndex { norm1, wqkv, bqkv, q_gain, k_gain, wo, bo, norm2, w1, b1, w2, b2 });
    }
    let final_norm = add("final_norm".into(), vec![n], TensorRole::UnembedNorm, ModuleType::FinalNorm, None, Init::Ones)?;
    let wu = add(
        "unembed".into(),
        vec![n, v],
        TensorRole::UnembedWeight,
        ModuleType::OutputEmbedding,
        None,
        Init::Random { base_var: 1.0 / bw, actual_var: 1.0 / n as f64 },
    )?;
    let bu = add("unembed_bias".into(), vec![v], TensorRole::UnembedNorm, ModuleType::OutputBias, None, Init::Zeros)?;

    let branch = match cfg.parameterisation {
        ModelParameterisation::CompletedP => hpt_core::scaling::residual_multiplier(ratios),
        _ => 1.0,
    };
    let residual = (1..=cfg.depth)
        .map(|l| {
            let pm = |m: ModuleType| per_module.map_or(1.0, |p| p.residual_factor(m, l));
            (
                (branch * pm(ModuleType::ResidualMha)) as f32,
                (branch * pm(ModuleType::ResidualMlp)) as f32,
            )
        })
        .collect();

    Ok(Model {
        cfg: cfg.clone(),
        params,
        residual,
        index: Index { embed, blocks, final_norm, wu, bu },
    })
}

/// FNV-1a of the tensor name: the init stream of a tensor depends only on
/// its name, so adding blocks leaves existing tensors unchanged.
fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Random { base_var: f64, actual_var: f64 },
}

impl Model {
    /// Reassemble a model from its tensors, locating each by name.
    pub fn from_parts(cfg: ModelConfig, params: Vec<Param>, residual: Vec<(f32, f32)>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let find = |name: &str| {
            params
                .iter()
                .position(|p| p.name == name)
                .ok_or_else(|| ModelError::Config(format!("missing tensor {name}")))
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 1..=cfg.depth {
            let b = |s: &str| find(&format!("block{l}.{s}"));
            let (q_gain, k_gain) = if cfg.qk_norm { (Some(b("q_norm")?), Some(b("k_norm")?)) } else { (None, None) };
            blocks.push(BlockIndex {
                norm1: b("norm1")?,
                wqkv: b("wqkv")?,
                bqkv: b("bqkv")?,
                q_gain,
                k_gain,
                wo: b("wo")?,
                bo: b("bo")?,
                norm2: b("norm2")?,
                w1: b("w1")?,
                b1: b("b1")?,
                w2: b("w2")?,
                b2: b("b2")?,
            });
        }
        let index = Index { embed: find("embed")?, blocks, final_norm: find("final_norm")?, wu: find("unembed")?, bu: find("unembed_bias")? };
        if residual.len() != cfg.depth {
            return Err(ModelError::Config(format!("{} residual multipliers for depth {}", residual.len(), cfg.depth)));
        }
        let model = Self { cfg, params, residual, index };
        let reference = model.expected_shapes();
        for (p, shape) in model.params.iter().zip(&reference) {
            if &p.shape != shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(ModelError::Config(format!("tensor {} has shape {:?}, expected {:?}", p.name, p.shape, shape)));
            }
        }
        if model.params.len() != reference.len() {
            return Err(ModelError::Config(format!("{} tensors, expected {}", model.params.len(), reference.len())));
        }
        Ok(model)
    }

    /// Shapes in tensor order implied by the config.
    fn expected_shapes(&self) -> Vec<Vec<usize>> {
        let (n, f, v, d) = (self.cfg.width, self.cfg.hidden(), self.cfg.vocab, self.cfg.head_dim);
        let mut shapes = vec![vec![v, n]];
        for _ in 0..self.cfg.depth {
            shapes.extend([vec![n], vec![n, 3 * n], vec![3 * n]]);
            if self.cfg.qk_norm {
                shapes.extend([vec![d], vec![d]]);
            }
            shapes.extend([vec![n, n], vec![n], vec![n], vec![n, f], vec![f], vec![f, n], vec![n]]);
        }
        shapes.extend([vec![n], vec![n, v], vec![v]]);
        shapes
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn embedding_index(&self) -> usize {
        self.index.embed
    }

    fn split_batch(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
        let expected = batch * (seq + 1);
        if tokens.len() != expected {
            return Err(ModelError::BatchShape { got: tokens.len(), expected });
        }
        if let Some(t) = tokens.iter().find(|t| **t as usize >= self.cfg.vocab) {
            return Err(ModelError::Token { token: *t, vocab: self.cfg.vocab });
        }
        let mut inputs = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for row in tokens.chunks_exact(seq + 1) {
            inputs.extend(row[..seq].iter().map(|t| *t as usize));
            targets.extend(row[1..].iter().map(|t| *t as usize));
        }
        Ok((inputs, targets))
    }

    /// Mean next-token cross-entropy on `batch` rows of `seq + 1` tokens.
    pub fn loss(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<f64, ModelError> {
        Ok(self.forward(tokens, batch, seq, None)?.loss)
    }

    /// Loss and gradients (written into `grads`, which must come from
    /// [`zero_grads`](Self::zero_grads) or be zeroed).
    pub fn loss_and_grad(
        &self,
        tokens: &[u32],
        batch: usize,
        seq: usize,
        grads: &mut [Vec<f32>],
        mut probe: Option<&mut Probe>,
    ) -> Result<f64, ModelError> {
        let fwd = self.forward(tokens, batch, seq, probe.as_deref_mut())?;
        self.backward(&fwd, batch, seq, grads, probe);
        Ok(fwd.loss)
    }

    fn forward(&self, tokens: &[u32], batch: usize, seq: usize, mut probe: Option<&mut Probe>) -> Result<Forward, ModelError> {
        let (inputs, targets) = self.split_batch(tokens, batch, seq)?;
        let n = self.cfg.width;
        let f = self.cfg.hidden();
        let v = self.cfg.vocab;
        let hd = self.cfg.head_dim;
        let heads = self.cfg.heads();
        let rows = inputs.len();
        let p = &self.params;
        if let Some(pr) = probe.as_deref_mut() {
            pr.blocks = vec![BlockProbe::default(); self.cfg.depth];
        }

        let emb = &p[self.index.embed].data;
        let mut x = vec![0.0f32; rows * n];
        for (r, tok) in inputs.iter().enumerate() {
            x[r * n..(r + 1) * n].copy_from_slice(&emb[tok * n..(tok + 1) * n]);
        }

        let mut caches = Vec::with_capacity(self.cfg.depth);
        for (l, bi) in self.index.blocks.iter().enumerate() {
            let (r_attn, r_mlp) = self.residual[l];
            let mut h1 = vec![0.0; rows * n];
            let (xhat1, rms1) = ops::rmsnorm(&x, &p[bi.norm1].data, &mut h1);
            let mut qkv = vec![0.0; rows * 3 * n];
            matmul(rows, n, 3 * n, &h1, Layout::Normal, &p[bi.wqkv].data, Layout::Normal, 0.0, &mut qkv);
            ops::add_bias(&mut qkv, &p[bi.bqkv].data);

            let mut q = vec![0.0; rows * n];
            let mut k = vec![0.0; rows * n];
            let mut vv = vec![0.0; rows * n];
            for r in 0..rows {
                let src = &qkv[r * 3 * n..(r + 1) * 3 * n];
                q[r * n..(r + 1) * n].copy_from_slice(&src[..n]);
                k[r * n..(r + 1) * n].copy_from_slice(&src[n..2 * n]);
                vv[r * n..(r + 1) * n].copy_from_slice(&src[2 * n..]);
            }
            let (qhat, qrms, khat, krms) = match (bi.q_gain, bi.k_gain) {
                (Some(qg), Some(kg)) => {
                    let mut qn = vec![0.0; rows * n];
                    let mut kn = vec![0.0; rows * n];
                    let (qhat, qrms) = ops::rmsnorm(&q, &p[qg].data, &mut qn);
                    let (khat, krms) = ops::rmsnorm(&k, &p[kg].data, &mut kn);
                    q = qn;
                    k = kn;
                    (qhat, qrms, khat, krms)
                }
                _ => (Vec::new(), Vec::new(), Vec::new(), Vec::new()),
            };

            let scale = 1.0 / (hd as f32).sqrt();
            let mut probs = vec![0.0f32; batch * heads * seq * seq];
            let mut attn = vec![0.0f32; rows * n];
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * hd;
                    for t in 0..seq {
                        let qt = &q[(b * seq + t) * n + off..][..hd];
                        let prow = &mut probs[((b * heads + h) * seq + t) * seq..][..seq];
                        let mut max = f32::NEG_INFINITY;
                        for s in 0..=t {
                            let ks = &k[(b * seq + s) * n + off..][..hd];
                            let dot: f32 = qt.iter().zip(ks).map(|(a, c)| a * c).sum::<f32>() * scale;
                            prow[s] = dot;
                            max = max.max(dot);
                        }
                        let mut z = 0.0;
                        for pv in prow[..=t].iter_mut() {
                            *pv = (*pv - max).exp();
                            z += *pv;
                        }
                        let out = &mut attn[(b * seq + t) * n + off..][..hd];
                        for s in 0..=t {
                            prow[s] /= z;
                            let vs = &vv[(b * seq + s) * n + off..][..hd];
                            let w = prow[s];
                            out.iter_mut().zip(vs).for_each(|(o, vsv)| *o += w * vsv);
                        }
                    }
                }
            }
            let mut o = vec![0.0; rows * n];
            matmul(rows, n, n, &attn, Layout::Normal, &p[bi.wo].data, Layout::Normal, 0.0, &mut o);
            ops::add_bias(&mut o, &p[bi.bo].data);
            x.iter_mut().zip(&o).for_each(|(xi, oi)| *xi += r_attn * oi);

            let mut h2 = vec![0.0; rows * n];
            let (xhat2, rms2) = ops::rmsnorm(&x, &p[bi.norm2].data, &mut h2);
            let mut u = vec![0.0; rows * f];
            matmul(rows, n, f, &h2, Layout::Normal, &p[bi.w1].data, Layout::Normal, 0.0, &mut u);
            ops::add_bias(&mut u, &p[bi.b1].data);
            let a: Vec<f32> = u.iter().map(|ui| ops::gelu(*ui)).collect();
            let mut m = vec![0.0; rows * n];
            matmul(rows, f, n, &a, Layout::Normal, &p[bi.w2].data, Layout::Normal, 0.0, &mut m);
            ops::add_bias(&mut m, &p[bi.b2].data);
            x.iter_mut().zip(&m).for_each(|(xi, mi)| *xi += r_mlp * mi);

            if let Some(pr) = probe.as_deref_mut() {
                let bp = &mut pr.blocks[l];
                bp.attn_preact_rms = ops::rms(&qkv);
                bp.mlp_preact_rms = ops::rms(&u);
                bp.residual_rms = ops::rms(&x);
            }
            caches.push(BlockCache { xhat1, rms1, h1, qhat, qrms, khat, krms, q, k, v: vv, probs, attn, xhat2, rms2, h2, u, a });
        }

        let mut hf = vec![0.0; rows * n];
        let (xhat_f, rms_f) = ops::rmsnorm(&x, &p[self.index.final_norm].data, &mut hf);
        let mut logits = vec![0.0; rows * v];
        matmul(rows, n, v, &hf, Layout::Normal, &p[self.index.wu].data, Layout::Normal, 0.0, &mut logits);
        ops::add_bias(&mut logits, &p[self.index.bu].data);
        if let Some(pr) = probe {
            pr.logits_rms = ops::rms(&logits);
        }

        // Softmax cross-entropy; `logits` becomes d(mean loss)/d(logits).
        let mut loss = 0.0f64;
        let inv_rows = 1.0 / rows as f32;
        for (r, target) in targets.iter().enumerate() {
            let row = &mut logits[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for val in row.iter_mut() {
                let e = ((*val - max) as f64).exp();
                z += e;
                *val = e as f32;
            }
            let p_target = row[*target] as f64 / z;
            loss -= p_target.ln();
            let inv_z = (1.0 / z) as f32;
            for val in row.iter_mut() {
                *val *= inv_z * inv_rows;
            }
            row[*target] -= inv_rows;
        }
        loss /= rows as f64;

        Ok(Forward { inputs, blocks: caches, xhat_f, rms_f, hf, dlogits: logits, loss })
    }

    fn backward(&self, fwd: &Forward, batch: usize, seq: usize, grads: &mut [Vec<f32>], mut probe: Option<&mut Probe>) {
        let n = self.cfg.width;
        let f = self.cfg.hidden();
        let v = self.cfg.vocab;
        let hd = self.cfg.head_dim;
        let heads = self.cfg.heads();
        let rows = fwd.inputs.len();
        let p = &self.params;
        let ix = &self.index;

        // Unembedding.
        matmul(n, rows, v, &fwd.hf, Layout::Transposed, &fwd.dlogits, Layout::Normal, 1.0, &mut grads[ix.wu]);
        ops::bias_grad(&fwd.dlogits, &mut grads[ix.bu]);
        let mut dhf = vec![0.0; rows * n];
        matmul(rows, v, n, &fwd.dlogits, Layout::Normal, &p[ix.wu].data, Layout::Transposed, 0.0, &mut dhf);
        let mut dx = vec![0.0; rows * n];
        ops::rmsnorm_backward(&dhf, &fwd.xhat_f, &fwd.rms_f, &p[ix.final_norm].data, &mut grads[ix.final_norm], &mut dx, false);

        for (l, bi) in ix.blocks.iter().enumerate().rev() {
            let c = &fwd.blocks[l];
            let (r_attn, r_mlp) = self.residual[l];

            // MLP branch: x_out = x_mid + r_mlp (a W2 + b2).
            let dm: Vec<f32> = dx.iter().map(|d| d * r_mlp).collect();
            matmul(f, rows, n, &c.a, Layout::Transposed, &dm, Layout::Normal, 1.0, &mut grads[bi.w2]);
            ops::bias_grad(&dm, &mut grads[bi.b2]);
            let mut du = vec![0.0; rows * f];
            matmul(rows, n, f, &dm, Layout::Normal, &p[bi.w2].data, Layout::Transposed, 0.0, &mut du);
            du.iter_mut().zip(&c.u).for_each(|(d, ui)| *d *= ops::gelu_grad(*ui));
            if let Some(pr) = probe.as_deref_mut() {
                pr.blocks[l].mlp_preact_grad_rms = ops::rms(&du);
            }
            matmul(n, rows, f, &c.h2, Layout::Transposed, &du, Layout::Normal, 1.0, &mut grads[bi.w1]);
            ops::bias_grad(&du, &mut grads[bi.b1]);
            let mut dh2 = vec![0.0; rows * n];
            matmul(rows, f, n, &du, Layout::Normal, &p[bi.w1].data, Layout::Transposed, 0.0, &mut dh2);
            {
                let mut dgain = std::mem::take(&mut grads[bi.norm2]);
                ops::rmsnorm_backward(&dh2, &c.xhat2, &c.rms2, &p[bi.norm2].data, &mut dgain, &mut dx, true);
                grads[bi.norm2] = dgain;
            }

            // Attention branch: x_mid = x_in + r_attn (attn Wo + bo).
            let dout: Vec<f32> = dx.iter().map(|d| d * r_attn).collect();
            matmul(n, rows, n, &c.attn, Layout::Transposed, &dout, Layout::Normal, 1.0, &mut grads[bi.wo]);
            ops::bias_grad(&dout, &mut grads[bi.bo]);
            let mut dattn = vec![0.0; rows * n];
            matmul(rows, n, n, &dout, Layout::Normal, &p[bi.wo].data, Layout::Transposed, 0.0, &mut dattn);

            let scale = 1.0 / (hd as f32).sqrt();
            let mut dq = vec![0.0f32; rows * n];
            let mut dk = vec![0.0f32; rows * n];
            let mut dv = vec![0.0f32; rows * n];
            let mut dp = vec![0.0f32; seq];
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * hd;
                    for t in 0..seq {
                        let prow = &c.probs[((b * heads + h) * seq + t) * seq..][..seq];
                        let dot_t = &dattn[(b * seq + t) * n + off..][..hd];
                        let mut sum = 0.0f32;
                        for s in 0..=t {
                            let vs = &c.v[(b * seq + s) * n + off..][..hd];
                            let g: f32 = dot_t.iter().zip(vs).map(|(a, c)| a * c).sum();
                            dp[s] = g;
                            sum += g * prow[s];
                            let dvs = &mut dv[(b * seq + s) * n + off..][..hd];
                            let w = prow[s];
                            dvs.iter_mut().zip(dot_t).for_each(|(d, o)| *d += w * o);
                        }
                        let qt_start = (b * seq + t) * n + off;
                        for s in 0..=t {
                            let ds = prow[s] * (dp[s] - sum) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let ks_start = (b * seq + s) * n + off;
                            for i in 0..hd {
                                dq[qt_start + i] += ds * c.k[ks_start + i];
                                dk[ks_start + i] += ds * c.q[qt_start + i];
                            }
                        }
                    }
                }
            }
            if let (Some(qg), Some(kg)) = (bi.q_gain, bi.k_gain) {
                let mut dq_raw = vec![0.0; rows * n];
                let mut dk_raw = vec![0.0; rows * n];
                let mut gq = std::mem::take(&mut grads[qg]);
                ops::rmsnorm_backward(&dq, &c.qhat, &c.qrms, &p[qg].data, &mut gq, &mut dq_raw, false);
                grads[qg] = gq;
                let mut gk = std::mem::take(&mut grads[kg]);
                ops::rmsnorm_backward(&dk, &c.khat, &c.krms, &p[kg].data, &mut gk, &mut dk_raw, false);
                grads[kg] = gk;
                dq = dq_raw;
                dk = dk_raw;
            }
            let mut dqkv = vec![0.0; rows * 3 * n];
            for r in 0..rows {
                let dst = &mut dqkv[r * 3 * n..(r + 1) * 3 * n];
                dst[..n].copy_from_slice(&dq[r * n..(r + 1) * n]);
                dst[n..2 * n].copy_from_slice(&dk[r * n..(r + 1) * n]);
                dst[2 * n..].copy_from_slice(&dv[r * n..(r + 1) * n]);
            }
            matmul(n, rows, 3 * n, &c.h1, Layout::Transposed, &dqkv, Layout::Normal, 1.0, &mut grads[bi.wqkv]);
            ops::bias_grad(&dqkv, &mut grads[bi.bqkv]);
            let mut dh1 = vec![0.0; rows * n];
            matmul(rows, 3 * n, n, &dqkv, Layout::Normal, &p[bi.wqkv].data, Layout::Transposed, 0.0, &mut dh1);
            let mut dgain = std::mem::take(&mut grads[bi.norm1]);
            ops::rmsnorm_backward(&dh1, &c.xhat1, &c.rms1, &p[bi.norm1].data, &mut dgain, &mut dx, true);
            grads[bi.norm1] = dgain;
        }

        let de = &mut grads[ix.embed];
        for (r, tok) in fwd.inputs.iter().enumerate() {
            de[tok * n..(tok + 1) * n].iter_mut().zip(&dx[r * n..(r + 1) * n]).for_each(|(g, d)| *g += d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(parameterisation: ModelParameterisation) -> ModelConfig {
        ModelConfig { seed: 3, base_width: 32, ..ModelConfig::new(32, 2, 11, parameterisation) }
    }

    fn tokens(batch: usize, seq: usize, vocab: u32) -> Vec<u32> {
        (0..batch * (seq + 1)).map(|i| ((i * 7 + i / 3) as u32) % vocab).collect()
    }

    #[test]
    fn identity_ratios_give_identical_init_across_parameterisations() {
        let base = BaseHyperParams::default();
        let cfg = tiny(ModelParameterisation::Sp);
        let sp = build_model(&cfg, &base, &cfg.shape_ratios(), None).unwrap();
        let cp_cfg = tiny(ModelParameterisation::CompletedP);
        let cp = build_model(&cp_cfg, &base, &cp_cfg.shape_ratios(), None).unwrap();
        for (a, b) in sp.params.iter().zip(&cp.params) {
            assert_eq!(a.data, b.data, "{}", a.name);
        }
    }

    #[test]
    fn init_std_follows_width_rules() {
        let base = BaseHyperParams::default();
        let narrow = ModelConfig { base_width: 64, ..ModelConfig::new(64, 2, 16, ModelParameterisation::CompletedP) };
        let wide = ModelConfig { width: 256, ..narrow.clone() };
        let a = build_model(&narrow, &base, &narrow.shape_ratios(), None).unwrap();
        let b = build_model(&wide, &base, &wide.shape_ratios(), None).unwrap();
        let std = |m: &Model, name: &str| m.param(name).unwrap().hp.init_std;
        assert!((std(&b, "block1.w1") / std(&a, "block1.w1") - 0.5).abs() < 1e-12);
        assert!((std(&b, "unembed") / std(&a, "unembed") - 0.25).abs() < 1e-12);
        assert_eq!(std(&b, "embed"), std(&a, "embed"));
        // Learning rates: hidden 1/m_N, embedding unchanged.
        let lr = |m: &Model, name: &str| m.param(name).unwrap().hp.lr;
        assert!((lr(&b, "block1.w1") / lr(&a, "block1.w1") - 0.25).abs() < 1e-12);
        assert_eq!(lr(&b, "embed"), lr(&a, "embed"));
    }

    #[test]
    fn residual_multiplier_halves_when_depth_doubles() {
        let base = BaseHyperParams::default();
        let a_cfg = ModelConfig { depth: 4, base_depth: 2, ..tiny(ModelParameterisation::CompletedP) };
        let b_cfg = ModelConfig { depth: 8, ..a_cfg.clone() };
        let a = build_model(&a_cfg, &base, &a_cfg.shape_ratios(), None).unwrap();
        let b = build_model(&b_cfg, &base, &b_cfg.shape_ratios(), None).unwrap();
        assert_eq!(b.residual[0].0 * 2.0, a.residual[0].0);
        assert_eq!(a.residual[0].0, 0.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        let base = BaseHyperParams::default();
        let mut cfg = tiny(ModelParameterisation::MuP);
        cfg.width = 30;
        assert!(build_model(&cfg, &base, &ScaleRatios::identity(), None).is_err());
        let cfg = tiny(ModelParameterisation::MuP);
        let m = build_model(&cfg, &base, &cfg.shape_ratios(), None).unwrap();
        assert!(matches!(m.loss(&[0; 5], 1, 5), Err(ModelError::BatchShape { .. })));
        assert!(matches!(m.loss(&[11; 6], 1, 5), Err(ModelError::Token { .. })));
    }

    #[test]
    fn initial_loss_reflects_unit_logits() {
        // Unit-RMS random logits cost about ln V + 1/2 nats on average.
        let cfg = tiny(ModelParameterisation::CompletedP);
        let m = build_model(&cfg, &BaseHyperParams::default(), &cfg.shape_ratios(), None).unwrap();
        let loss = m.loss(&tokens(2, 8, 11), 2, 8).unwrap();
        let uniform = (11f64).ln();
        assert!(loss > uniform && loss < uniform + 1.5, "{loss}");
    }

    /// Directional finite difference in f64 over the f32 model.
    fn check_gradient(cfg: ModelConfig) {
        let m = build_model(&cfg, &BaseHyperParams::default(), &cfg.shape_ratios(), None).unwrap();
        let (batch, seq) = (2, 6);
        let toks = tokens(batch, seq, cfg.vocab as u32);
        let mut grads = m.zero_grads();
        m.loss_and_grad(&toks, batch, seq, &mut grads, None).unwrap();
        for (pi, param) in m.params.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(pi as u64);
            let dir: Vec<f32> = (0..param.data.len())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z as f32
                })
                .collect();
            let analytic: f64 = grads[pi].iter().zip(&dir).map(|(g, d)| (*g as f64) * (*d as f64)).sum();
            let h = 1e-2f32;
            let shifted = |sign: f32| {
                let mut mm = m.clone();
                mm.params[pi].data.iter_mut().zip(&dir).for_each(|(x, d)| *x += sign * h * d);
                mm.loss(&toks, batch, seq).unwrap()
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h as f64);
            let tol = 2e-2 * analytic.abs().max(numeric.abs()) + 2e-4;
            assert!((analytic - numeric).abs() < tol, "{}: analytic {analytic} numeric {numeric}", param.name);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradient(tiny(ModelParameterisation::CompletedP));
    }

    #[test]
    fn gradients_match_without_qk_norm() {
        check_gradient(ModelConfig { qk_norm: false, ..tiny(ModelParameterisation::Sp) });
    }
}
