//! Coordinate checks: entry-size statistics of activations, gradients and
//! updates across a width sweep at identical seeds and data.

use hpt_core::scaling::{ScaleRatios, TensorRole};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSource;
use crate::model::{ModelConfig, Probe};
use crate::ops;
use crate::train::{build_for, train_batch, TrainConfig, TrainError, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// Query/key/value pre-activation.
    AttnPreact,
    /// MLP input pre-activation `W₁h + b₁`.
    MlpPreact,
    /// Backpropagated gradient of the MLP pre-activation.
    MlpPreactGrad,
    /// Residual stream after the block.
    Residual,
    Logits,
    /// Gradient of the input-embedding table.
    EmbeddingGrad,
    /// Parameter update of one tensor.
    Update,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCell {
    pub width: usize,
    /// Number of optimiser updates applied before the measurement.
    pub step: usize,
    /// 1-based block, `None` for model-level quantities.
    pub layer: Option<usize>,
    pub quantity: Quantity,
    /// Tensor role, for update cells.
    pub role: Option<TensorRole>,
    /// Tensor name, for update cells.
    pub tensor: Option<String>,
    /// `None` when the value is not finite.
    pub rms: Option<f64>,
}

impl CoordCell {
    pub fn diverged(&self) -> bool {
        self.rms.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheckReport {
    pub widths: Vec<usize>,
    pub depth: usize,
    pub steps: usize,
    pub cells: Vec<CoordCell>,
}

impl CoordinateCheckReport {
    /// Value for `(width, step, layer, quantity)` among non-update cells.
    pub fn value(&self, width: usize, step: usize, layer: Option<usize>, quantity: Quantity) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.width == width && c.step == step && c.layer == layer && c.quantity == quantity && c.tensor.is_none())
            .and_then(|c| c.rms)
    }

    /// Largest max/min ratio across widths of `quantity`, over every layer
    /// and step. Infinite if any cell diverged.
    pub fn max_spread(&self, quantity: Quantity) -> f64 {
        let mut worst: f64 = 1.0;
        for step in 0..=self.steps {
            for layer in 1..=self.depth {
                let values: Vec<Option<f64>> = self.widths.iter().map(|w| self.value(*w, step, Some(layer), quantity)).collect();
                if values.iter().any(Option::is_none) {
                    return f64::INFINITY;
                }
                let v: Vec<f64> = values.into_iter().flatten().collect();
                let max = v.iter().copied().fold(f64::MIN, f64::max);
                let min = v.iter().copied().fold(f64::MAX, f64::min);
                worst = worst.max(max / min);
            }
        }
        worst
    }

    pub fn has_divergence(&self) -> bool {
        self.cells.iter().any(CoordCell::diverged)
    }

    /// Largest factor by which `rms · N` of the embedding gradient departs
    /// from its value at the narrowest width, over every width and step.
    /// Exactly `∝ 1/N` scaling gives 1.
    pub fn embedding_grad_deviation(&self) -> f64 {
        let Some(&w0) = self.widths.iter().min() else { return f64::INFINITY };
        let mut worst: f64 = 1.0;
        for step in 0..=self.steps {
            let scaled = |w: usize| self.value(w, step, None, Quantity::EmbeddingGrad).map(|v| v * w as f64);
            let Some(reference) = scaled(w0) else { return f64::INFINITY };
            for &w in &self.widths {
                let Some(v) = scaled(w) else { return f64::INFINITY };
                let r = v / reference;
                worst = worst.max(r).max(1.0 / r);
            }
        }
        worst
    }

    /// Whether `quantity` strictly increases with width at `step` in every
    /// layer.
    pub fn strictly_increasing(&self, step: usize, quantity: Quantity) -> bool {
        let mut widths = self.widths.clone();
        widths.sort_unstable();
        (1..=self.depth).all(|layer| {
            let values: Vec<Option<f64>> = widths.iter().map(|w| self.value(*w, step, Some(layer), quantity)).collect();
            values.iter().all(Option::is_some) && values.windows(2).all(|p| p[0] < p[1])
        })
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Run `steps` updates at each width and measure before the first update
/// and after every update. `template.width` is replaced per width.
pub fn coordinate_check(
    widths: &[usize],
    template: &ModelConfig,
    tcfg: &TrainConfig,
    steps: usize,
    data: &dyn TokenSource,
) -> Result<CoordinateCheckReport, TrainError> {
    if widths.is_empty() {
        return Err(TrainError::Config("no widths".into()));
    }
    let mut cells = Vec::new();
    for &width in widths {
        let cfg = ModelConfig { width, ..template.clone() };
        let ratios = ScaleRatios { batch: 1.0, tokens: 1.0, ..cfg.shape_ratios() };
        let mut trainer = Trainer::new(build_for(&cfg, tcfg, &ratios)?, tcfg.decay_variant);
        let embed = trainer.model.embedding_index();
        for step in 0..=steps {
            let tokens = train_batch(data, tcfg, step)?;
            let mut probe = Probe::default();
            let (grad_rms, update_rms) = if step < steps {
                let mult = tcfg.schedule.multiplier(step, steps, tcfg.warmup_steps);
                let out = trainer.step(&tokens, tcfg.batch_size, tcfg.seq_len, mult, Some(&mut probe))?;
                (out.grad_rms, out.update_rms)
            } else {
                let mut grads = trainer.model.zero_grads();
                trainer.model.loss_and_grad(&tokens, tcfg.batch_size, tcfg.seq_len, &mut grads, Some(&mut probe))?;
                (grads.iter().map(|g| ops::rms(g)).collect(), Vec::new())
            };
            let cell = |layer, quantity, rms: f64| CoordCell { width, step, layer, quantity, role: None, tensor: None, rms: finite(rms) };
            for (i, b) in probe.blocks.iter().enumerate() {
                let l = Some(i + 1);
                cells.push(cell(l, Quantity::AttnPreact, b.attn_preact_rms));
                cells.push(cell(l, Quantity::MlpPreact, b.mlp_preact_rms));
                cells.push(cell(l, Quantity::MlpPreactGrad, b.mlp_preact_grad_rms));
                cells.push(cell(l, Quantity::Residual, b.residual_rms));
            }
            cells.push(cell(None, Quantity::Logits, probe.logits_rms));
            cells.push(cell(None, Quantity::EmbeddingGrad, grad_rms[embed]));
            // The update made at this step is measured after it, at `step + 1`.
            for (p, u) in trainer.model.params.iter().zip(&update_rms) {
                cells.push(CoordCell {
                    width,
                    step: step + 1,
                    layer: p.block,
                    quantity: Quantity::Update,
                    role: Some(p.role),
                    tensor: Some(p.name.clone()),
                    rms: finite(*u),
                });
            }
        }
    }
    Ok(CoordinateCheckReport { widths: widths.to_vec(), depth: template.depth, steps, cells })
}
