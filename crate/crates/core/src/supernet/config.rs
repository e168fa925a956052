use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Topology of the searched detector. The stem is a fixed 3×3 stride-2 conv;
/// each stage opens with a stride-2 block, so the deepest feature sits at
/// stride 32.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub stem_channels: usize,
    pub stage_depths: [usize; 4],
    pub stage_channels: [usize; 4],
    pub neck_channels: usize,
    pub head_blocks: usize,
    pub head_fc_dim: usize,
}

/// Lateral connections searched in the neck: four top-down, four bottom-up.
pub const NECK_LAYERS: usize = 8;

/// Row labels of the neck matrix, in path order.
pub const NECK_IDS: [&str; NECK_LAYERS] = ["td4", "td3", "td2", "td1", "bu1", "bu2", "bu3", "bu4"];

impl SupernetConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            classes: 4,
            stem_channels: 8,
            stage_depths: [1, 1, 2, 1],
            stage_channels: [8, 16, 32, 48],
            neck_channels: 16,
            head_blocks: 4,
            head_fc_dim: 32,
        }
    }

    pub fn paper() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            classes: 4,
            stem_channels: 16,
            stage_depths: [4, 4, 8, 4],
            stage_channels: [48, 96, 256, 352],
            neck_channels: 256,
            head_blocks: 4,
            head_fc_dim: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 || !self.image_size.is_multiple_of(32) {
            return Err(config(format!(
                "image_size {} must be a positive multiple of 32 (total downsample is 32)",
                self.image_size
            )));
        }
        let positive = [
            ("in_channels", self.in_channels),
            ("classes", self.classes),
            ("stem_channels", self.stem_channels),
            ("neck_channels", self.neck_channels),
            ("head_blocks", self.head_blocks),
            ("head_fc_dim", self.head_fc_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(config("classes must be at least 2"));
        }
        if self.stage_depths.contains(&0) || self.stage_channels.contains(&0) {
            return Err(config("stage depths and channels must be positive"));
        }
        Ok(())
    }

    /// Searched layers per component: (backbone, neck, head).
    pub fn layer_counts(&self) -> [usize; 3] {
        [self.stage_depths.iter().sum(), NECK_LAYERS, self.head_blocks]
    }

    /// Same topology with stage depths scaled by `factor` (at least 1 each).
    pub fn with_depth_factor(&self, factor: f64) -> Self {
        let mut c = self.clone();
        for d in &mut c.stage_depths {
            *d = ((*d as f64 * factor).round() as usize).max(1);
        }
        c
    }

    /// Spatial extent of backbone stage `s` (0-based), i.e. of C_{s+1}.
    pub fn stage_extent(&self, s: usize) -> usize {
        self.image_size >> (s + 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_count_layers() {
        assert_eq!(SupernetConfig::paper().layer_counts(), [20, 8, 4]);
        assert_eq!(SupernetConfig::desk().layer_counts(), [5, 8, 4]);
    }

    #[test]
    fn halved_depths() {
        assert_eq!(SupernetConfig::paper().with_depth_factor(0.5).stage_depths, [2, 2, 4, 2]);
        assert_eq!(SupernetConfig::desk().with_depth_factor(0.5).stage_depths, [1, 1, 1, 1]);
    }

    #[test]
    fn rejects_bad_extent() {
        let mut c = SupernetConfig::desk();
        c.image_size = 48;
        assert!(c.validate().is_err());
        assert_eq!(SupernetConfig::desk().stage_extent(3), 2);
    }
}
