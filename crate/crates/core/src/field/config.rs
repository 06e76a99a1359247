use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldOutput {
    /// Density plus view-independent color (the coarse radiance field).
    DensityRgb,
    /// Color only (the texture field baked onto a mesh).
    RgbOnly,
}

impl FieldOutput {
    pub fn name(self) -> &'static str {
        match self {
            FieldOutput::DensityRgb => "density_rgb",
            FieldOutput::RgbOnly => "rgb_only",
        }
    }

    pub fn out_dim(self) -> usize {
        match self {
            FieldOutput::DensityRgb => 4,
            FieldOutput::RgbOnly => 3,
        }
    }
}

/// Multiresolution hash-grid encoding plus the decoder that reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    pub table_size_log2: u32,
    pub features_per_level: usize,
    pub base_res: usize,
    pub max_res: usize,
    pub growth: f64,
    pub mlp_hidden: usize,
    /// Number of linear layers in the decoder (2 = one hidden layer).
    pub mlp_layers: usize,
    pub output: FieldOutput,
}

impl HashGridConfig {
    /// Builds a config with the growth factor implied by the resolution range.
    pub fn new(
        levels: usize,
        table_size_log2: u32,
        features_per_level: usize,
        base_res: usize,
        max_res: usize,
        mlp_hidden: usize,
        output: FieldOutput,
    ) -> Self {
        Self {
            levels,
            table_size_log2,
            features_per_level,
            base_res,
            max_res,
            growth: Self::implied_growth(levels, base_res, max_res),
            mlp_hidden,
            mlp_layers: 2,
            output,
        }
    }

    /// Coarse radiance field: 16 levels, 2^19 entries, 2 features, 2^4..2^12.
    pub fn coarse_default() -> Self {
        Self {
            growth: 1.447,
            ..Self::new(16, 19, 2, 16, 4096, 64, FieldOutput::DensityRgb)
        }
    }

    /// Texture field: 14 levels over the same resolution range.
    pub fn texture_default() -> Self {
        Self::new(14, 19, 2, 16, 4096, 64, FieldOutput::RgbOnly)
    }

    pub fn implied_growth(levels: usize, base_res: usize, max_res: usize) -> f64 {
        if levels <= 1 {
            1.0
        } else {
            ((max_res as f64 / base_res as f64).ln() / (levels - 1) as f64).exp()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.mlp_layers == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("levels, mlp_layers and mlp_hidden must be >= 1".into()));
        }
        if self.table_size_log2 < 4 || self.table_size_log2 > 30 {
            return Err(Error::Config("table_size_log2 must be in [4, 30]".into()));
        }
        if self.features_per_level == 0 {
            return Err(Error::Config("features_per_level must be >= 1".into()));
        }
        if self.base_res == 0 || self.max_res < self.base_res {
            return Err(Error::Config("need 1 <= base_res <= max_res".into()));
        }
        if self.levels > 1 {
            let implied = Self::implied_growth(self.levels, self.base_res, self.max_res);
            if (self.growth - implied).abs() > 1e-3 {
                return Err(Error::Config(format!(
                    "growth {} disagrees with resolution range (expected {implied:.5})",
                    self.growth
                )));
            }
        }
        Ok(())
    }

    /// Cells per axis at `level`: `floor(base_res * growth^level)`.
    pub fn level_resolution(&self, level: usize) -> usize {
        let r = self.base_res as f64 * self.growth.powi(level as i32);
        (r + 1e-9).floor() as usize
    }

    pub fn table_size(&self) -> usize {
        1usize << self.table_size_log2
    }

    /// Entries at `level`: the dense vertex count when it fits, else the table size.
    pub fn level_entries(&self, level: usize) -> usize {
        let n = self.level_resolution(level) as u128 + 1;
        let dense = n * n * n;
        if dense <= self.table_size() as u128 {
            dense as usize
        } else {
            self.table_size()
        }
    }

    pub fn encoding_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    /// (inputs, outputs) of every decoder layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.encoding_dim()];
        dims.extend(std::iter::repeat_n(self.mlp_hidden, self.mlp_layers - 1));
        dims.push(self.output.out_dim());
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn grid_param_count(&self) -> usize {
        (0..self.levels)
            .map(|l| self.level_entries(l) * self.features_per_level)
            .sum()
    }

    pub fn mlp_param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn param_count(&self) -> usize {
        self.grid_param_count() + self.mlp_param_count()
    }
}
