use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Network hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Fuser depth N_F.
    pub fuser_blocks: usize,
    /// Decoder depth N_D.
    pub decoder_blocks: usize,
    /// Hidden width of every MLP, as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Pose map side p.
    pub map_side: usize,
    /// Canonical grid half extent s.
    pub grid_half_extent: f64,
    /// Fourier band count d.
    pub fourier_bands: usize,
    /// Ray, translation and coordinate components fed to the view encoder.
    pub k_rot: usize,
    pub k_trans: usize,
    pub k_coord: usize,
    /// Base frequency B.
    pub frequency_base: f64,
    /// Template count N.
    pub templates: usize,
    pub single_view: bool,
    pub absolute_pose: bool,
    pub condition_template_pose: bool,
    /// Add the view-index encoding to template tokens before fusion.
    pub view_index_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 128,
            heads: 4,
            fuser_blocks: 4,
            decoder_blocks: 8,
            mlp_ratio: 4,
            map_side: 8,
            grid_half_extent: 1.0,
            fourier_bands: 8,
            k_rot: 3,
            k_trans: 3,
            k_coord: 3,
            frequency_base: 0.25,
            templates: 8,
            single_view: false,
            absolute_pose: false,
            condition_template_pose: true,
            view_index_encoding: true,
        }
    }
}

impl ModelConfig {
    /// Smaller network that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            patch_size: 8,
            embed_dim: 32,
            fuser_blocks: 1,
            decoder_blocks: 2,
            mlp_ratio: 2,
            map_side: 4,
            ..ModelConfig::default()
        }
    }

    /// The configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 16,
            heads: 2,
            fuser_blocks: 1,
            decoder_blocks: 1,
            mlp_ratio: 2,
            map_side: 4,
            fourier_bands: 2,
            templates: 2,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(4) {
            return bad(format!("embed_dim {} must be a positive multiple of 4", self.embed_dim));
        }
        if self.map_side < 2 {
            return bad(format!("map_side {} below 2", self.map_side));
        }
        if !(self.grid_half_extent > 0.0) {
            return bad("grid_half_extent must be positive".into());
        }
        for (name, k) in [("k_rot", self.k_rot), ("k_trans", self.k_trans), ("k_coord", self.k_coord)] {
            if !(1..=3).contains(&k) {
                return bad(format!("{name} = {k} outside 1..=3"));
            }
        }
        if self.fourier_bands == 0 || !(self.frequency_base > 0.0) {
            return bad("fourier_bands and frequency_base must be positive".into());
        }
        if self.templates == 0 || self.mlp_ratio == 0 {
            return bad("templates and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// View feature width `(2 (K_r + K_t + K_c) + 1) d`.
    pub fn view_feature_dim(&self) -> usize {
        (2 * (self.k_rot + self.k_trans + self.k_coord) + 1) * self.fourier_bands
    }

    pub fn image_tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn map_cells(&self) -> usize {
        self.map_side * self.map_side
    }

    /// Tokens contributed by one view (image patches plus map cells).
    pub fn view_tokens(&self) -> usize {
        self.image_tokens() + self.map_cells()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}
