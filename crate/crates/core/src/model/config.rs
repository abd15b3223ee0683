use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One pyramid level: a patch embedding followed by `num_blocks` blocks of
/// width `hidden_size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub patch_size: usize,
    pub hidden_size: usize,
    pub num_blocks: usize,
}

impl StageConfig {
    pub const fn new(patch_size: usize, hidden_size: usize, num_blocks: usize) -> Self {
        StageConfig {
            patch_size,
            hidden_size,
            num_blocks,
        }
    }
}

/// How the shifted branches are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    SplitAttention,
    /// Plain elementwise mean of the branches; no attention parameters.
    SumPooling,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::SplitAttention => "split_attention",
            FusionMode::SumPooling => "sum_pooling",
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split_attention" => Ok(FusionMode::SplitAttention),
            "sum_pooling" => Ok(FusionMode::SumPooling),
            _ => Err(Error::config(format!(
                "unknown fusion mode {s:?} (expected split_attention or sum_pooling)"
            ))),
        }
    }
}

/// Branch identifiers: 1 is shifted by the first shift, 2 by the second,
/// 3 is left unshifted.
pub const ALL_BRANCHES: [usize; 3] = [1, 2, 3];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    /// Hidden-width multiplier of the channel-mixing MLP.
    pub expansion_ratio: usize,
    /// Split-attention bottleneck divisor.
    pub reduction: usize,
    pub num_classes: usize,
    pub fusion_mode: FusionMode,
    /// Sorted subset of [`ALL_BRANCHES`].
    pub active_branches: Vec<usize>,
    pub drop_path_rate: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be positive"));
        }
        if self.stages.is_empty() {
            return Err(Error::config("at least one stage is required"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.patch_size == 0 || s.hidden_size == 0 || s.num_blocks == 0 {
                return Err(Error::config(format!("stage {i} has a zero field: {s:?}")));
            }
            if s.hidden_size % 4 != 0 {
                return Err(Error::config(format!(
                    "stage {i} width {} is not divisible by 4 (needed by the spatial shifts)",
                    s.hidden_size
                )));
            }
            if self.fusion_mode == FusionMode::SplitAttention
                && (self.reduction == 0 || s.hidden_size / self.reduction == 0)
            {
                return Err(Error::config(format!(
                    "reduction {} leaves no attention bottleneck for stage {i} width {}",
                    self.reduction, s.hidden_size
                )));
            }
        }
        if self.expansion_ratio == 0 || self.num_classes == 0 {
            return Err(Error::config("expansion_ratio and num_classes must be positive"));
        }
        if self.active_branches.is_empty() {
            return Err(Error::config("at least one branch must be active"));
        }
        let sorted = self.active_branches.windows(2).all(|w| w[0] < w[1]);
        if !sorted || self.active_branches.iter().any(|b| !ALL_BRANCHES.contains(b)) {
            return Err(Error::config(format!(
                "active_branches {:?} must be a strictly increasing subset of {{1, 2, 3}}",
                self.active_branches
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::config(format!(
                "drop_path_rate {} outside [0, 1)",
                self.drop_path_rate
            )));
        }
        Ok(())
    }

    /// Number of fused branches `K`.
    pub fn branch_count(&self) -> usize {
        self.active_branches.len()
    }

    /// Product of all stage patch sizes: the smallest accepted image side.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.patch_size).product()
    }

    /// Token grid `(width, height)` of each stage for an input of
    /// `width x height`. Each patch embedding floors, dropping trailing
    /// pixels that do not fill a whole patch; an input too small to yield
    /// one token in the last stage is a shape error.
    pub fn stage_grids(&self, width: usize, height: usize) -> Result<Vec<(usize, usize)>> {
        let mut grids = Vec::with_capacity(self.stages.len());
        let (mut w, mut h) = (width, height);
        for s in &self.stages {
            w /= s.patch_size;
            h /= s.patch_size;
            if w == 0 || h == 0 {
                return Err(Error::shape(format!(
                    "input {width}x{height} is smaller than the total patch stride {}",
                    self.total_stride()
                )));
            }
            grids.push((w, h));
        }
        Ok(grids)
    }

    pub fn final_width(&self) -> usize {
        self.stages.last().map_or(0, |s| s.hidden_size)
    }
}

/// Named architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Small7,
    Medium7,
    Small14,
    /// One narrow stage; sized for tests and toy training.
    Tiny,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Small7, Preset::Medium7, Preset::Small14, Preset::Tiny];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Small7 => "Small/7",
            Preset::Medium7 => "Medium/7",
            Preset::Small14 => "Small/14",
            Preset::Tiny => "Tiny",
        }
    }

    /// Input side the preset is usually run at.
    pub fn default_input(self) -> usize {
        match self {
            Preset::Tiny => 8,
            _ => 224,
        }
    }

    pub fn config(self) -> ModelConfig {
        let stages = match self {
            Preset::Small7 => vec![StageConfig::new(7, 192, 4), StageConfig::new(2, 384, 14)],
            Preset::Medium7 => vec![StageConfig::new(7, 256, 7), StageConfig::new(2, 512, 17)],
            Preset::Small14 => vec![StageConfig::new(14, 384, 4), StageConfig::new(2, 384, 14)],
            Preset::Tiny => vec![StageConfig::new(4, 8, 1)],
        };
        let num_classes = if self == Preset::Tiny { 10 } else { 1000 };
        ModelConfig {
            in_channels: 3,
            stages,
            expansion_ratio: 3,
            reduction: 4,
            num_classes,
            fusion_mode: FusionMode::SplitAttention,
            active_branches: ALL_BRANCHES.to_vec(),
            drop_path_rate: 0.1,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['_', '-'], "");
        Preset::ALL
            .into_iter()
            .find(|p| p.name().to_ascii_lowercase().replace('/', "") == key.replace('/', ""))
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown preset {s:?} (known: Small/7, Medium/7, Small/14, Tiny)"
                ))
            })
    }
}

/// Configuration of a named preset.
pub fn build_config(preset: &str) -> Result<ModelConfig> {
    Ok(preset.parse::<Preset>()?.config())
}
