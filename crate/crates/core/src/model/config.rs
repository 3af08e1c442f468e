use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;

/// Architecture switches and sizes for one ablation variant.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feed the T1-weighted slice as an extra input (+T1).
    pub use_t1: bool,
    /// Residual attention: masked copies of the inputs are concatenated (+RA).
    pub use_residual_attention: bool,
    /// Channel attention gates on the encoder to PET-decoder skips (+DA).
    pub use_disentanglement_attention: bool,
    /// Multi-task (shared encoder, PET and ASL decoders) vs single-task (PET decoder only).
    pub multitask: bool,
    /// Number of conv-BN-ReLU layers per dense block, encoder levels, bottleneck, decoder levels.
    pub dense_layout: Vec<usize>,
    /// Width of the first level; doubled at every level below it.
    pub base_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            use_t1: true,
            use_residual_attention: true,
            use_disentanglement_attention: true,
            multitask: true,
            dense_layout: vec![1, 3, 5, 3, 1],
            base_channels: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.dense_layout.len();
        if n < 3 || n % 2 == 0 {
            return Err(ModelError::Config(format!(
                "dense_layout must have odd length of at least 3, got {n}"
            )));
        }
        if self.dense_layout.iter().any(|&c| c == 0) {
            return Err(ModelError::Config("dense_layout entries must be positive".into()));
        }
        if self.base_channels < 2 {
            return Err(ModelError::Config("base_channels must be at least 2".into()));
        }
        if !self.multitask && self.use_residual_attention {
            return Err(ModelError::Config(
                "residual attention needs the ASL reconstruction, which a single-task network lacks".into(),
            ));
        }
        Ok(())
    }

    /// Resolution levels, counting the bottleneck.
    pub fn levels(&self) -> usize {
        (self.dense_layout.len() + 1) / 2
    }

    /// Channel width at resolution level `level`.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channels added by every conv-BN-ReLU layer of a dense block at `level`.
    pub fn growth(&self, level: usize) -> usize {
        (self.width(level) / 2).max(1)
    }

    pub fn input_channels(&self) -> usize {
        (1 + usize::from(self.use_t1)) * (1 + usize::from(self.use_residual_attention))
    }

    /// Spatial dims must be a multiple of this for clean downsampling.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    /// Short tag such as `M+T1+RA+DA`.
    pub fn tag(&self) -> String {
        let sign = |b: bool| if b { '+' } else { '-' };
        format!(
            "{}{}T1{}RA{}DA",
            if self.multitask { 'M' } else { 'S' },
            sign(self.use_t1),
            sign(self.use_residual_attention),
            sign(self.use_disentanglement_attention)
        )
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_channels_follow_switches() {
        let mut c = ModelConfig::default();
        assert_eq!(c.input_channels(), 4);
        c.use_residual_attention = false;
        assert_eq!(c.input_channels(), 2);
        c.use_t1 = false;
        assert_eq!(c.input_channels(), 1);
        c.use_residual_attention = true;
        assert_eq!(c.input_channels(), 2);
    }

    #[test]
    fn single_task_with_residual_attention_is_rejected() {
        let c = ModelConfig {
            multitask: false,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn even_layout_is_rejected() {
        let c = ModelConfig {
            dense_layout: vec![1, 3, 3, 1],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_layout_has_three_levels() {
        let c = ModelConfig::default();
        assert_eq!(c.levels(), 3);
        assert_eq!((c.width(0), c.width(1), c.width(2)), (16, 32, 64));
        assert_eq!(c.spatial_multiple(), 4);
        assert_eq!(c.tag(), "M+T1+RA+DA");
    }
}
