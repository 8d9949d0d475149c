use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mta::{AttentionDim, CalibrationMode};
use crate::mtp::{PoolMethod, Weighting};

/// Architecture and training hyper-parameters.
///
/// Every ablation variant is a different value of this struct; see
/// [`ModelConfig::baseline`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_channels: [usize; 3],
    /// Clip length `T`.
    pub frames: usize,
    /// Input `(H, W)`; both must be divisible by 4.
    pub resolution: [usize; 2],
    /// Horizontal parts; must divide `H / 4`.
    pub bins: usize,
    pub embed_dim: usize,
    /// Training identities, i.e. classifier outputs per part.
    pub num_classes: usize,
    pub kernels: Vec<usize>,
    pub ratio: usize,
    pub mta_mode: CalibrationMode,
    pub gate: bool,
    /// Attention blocks run after each enabled stage, in this order.
    pub mta_dims: Vec<AttentionDim>,
    /// 1-based stages that carry attention blocks.
    pub mta_stages: Vec<usize>,
    pub pooling: Vec<PoolMethod>,
    pub pool_weighting: Weighting,
    pub margin: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage_channels: [32, 64, 128],
            frames: 30,
            resolution: [64, 44],
            bins: 8,
            embed_dim: 64,
            num_classes: 74,
            kernels: vec![1, 3, 5],
            ratio: 2,
            mta_mode: CalibrationMode::Meta,
            gate: true,
            mta_dims: vec![AttentionDim::Spatial, AttentionDim::Channel, AttentionDim::Temporal],
            mta_stages: vec![1, 2, 3],
            pooling: vec![PoolMethod::Mean, PoolMethod::Max, PoolMethod::Gem],
            pool_weighting: Weighting::Meta,
            margin: 0.2,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small model used by gradient checks and smoke tests: channels
    /// `(4, 8, 8)`, 4 frames of 16×12, 2 parts of width 4.
    pub fn tiny() -> Self {
        Self {
            stage_channels: [4, 8, 8],
            frames: 4,
            resolution: [16, 12],
            bins: 2,
            embed_dim: 4,
            num_classes: 4,
            ..Self::default()
        }
    }

    /// Plain conv stack with max temporal pooling.
    pub fn baseline(self) -> Self {
        Self {
            mta_dims: Vec::new(),
            pooling: vec![PoolMethod::Max],
            pool_weighting: Weighting::None,
            ..self
        }
    }

    /// Feature-map extents `(H, W)` seen by stage `s` (0-based).
    pub fn stage_resolution(&self, s: usize) -> [usize; 2] {
        let f = 1 << s.min(2);
        [self.resolution[0] / f, self.resolution[1] / f]
    }

    /// Extents after the last stage.
    pub fn final_resolution(&self) -> [usize; 2] {
        self.stage_resolution(2)
    }

    pub fn has_attention(&self, s: usize) -> bool {
        self.mta_stages.contains(&(s + 1)) && !self.mta_dims.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_channels.contains(&0) {
            return bad("stage channels must be positive".into());
        }
        if self.frames == 0 || self.embed_dim == 0 || self.bins == 0 {
            return bad("frames, embed_dim and bins must be positive".into());
        }
        let [h, w] = self.resolution;
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return bad(format!("resolution {h}x{w} must be positive and divisible by 4"));
        }
        if (h / 4) % self.bins != 0 {
            return bad(format!("bins {} must divide the final height {}", self.bins, h / 4));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.kernels.is_empty() || self.kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("kernels must be a non-empty list of odd sizes, got {:?}", self.kernels));
        }
        if self.ratio == 0 {
            return bad("ratio must be positive".into());
        }
        let mut dims = self.mta_dims.clone();
        dims.sort_by_key(|d| d.name());
        dims.dedup();
        if dims.len() != self.mta_dims.len() {
            return bad("mta_dims must not repeat a dimension".into());
        }
        if let Some(s) = self.mta_stages.iter().find(|&&s| !(1..=3).contains(&s)) {
            return bad(format!("mta_stages entries must be 1, 2 or 3, got {s}"));
        }
        if self.pooling.is_empty() {
            return bad("pooling needs at least one method".into());
        }
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return bad("margin must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive".into());
        }
        Ok(())
    }
}
