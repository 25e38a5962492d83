//! Model hyperparameters, ablation variants, and the configuration hash
//! that ties checkpoints to the exact settings that produced them.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MmptError, Result};
use crate::render::CHANNELS;

/// How the visual patch prompt covers the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptCoverage {
    /// One patch-sized region, placed randomly per image during training
    /// and at the image center during evaluation.
    SingleLocation,
    /// Added to every patch; requires the prompt patch to equal the model
    /// patch size.
    AllPatches,
}

/// Ablation variants: which of the two prompt mechanisms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    CoopTextOnly,
    CoopPlusVisual,
    CoopPlusShared,
    MmptFull,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::CoopTextOnly, Variant::CoopPlusVisual, Variant::CoopPlusShared, Variant::MmptFull];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CoopTextOnly => "coop_text_only",
            Variant::CoopPlusVisual => "coop_plus_visual",
            Variant::CoopPlusShared => "coop_plus_shared",
            Variant::MmptFull => "mmpt_full",
        }
    }

    /// (visual prompt enabled, shared prompts enabled).
    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::CoopTextOnly => (false, false),
            Variant::CoopPlusVisual => (true, false),
            Variant::CoopPlusShared => (false, true),
            Variant::MmptFull => (true, true),
        }
    }

    pub fn apply(self, cfg: &mut MmptConfig) {
        let (visual, shared) = self.flags();
        cfg.enable_visual_prompt = visual;
        cfg.enable_shared_prompts = shared;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmptConfig {
    /// Square input image side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    /// Side of the additive visual prompt patch.
    pub prompt_patch_size: usize,

    /// Vision token width.
    pub d_v: usize,
    /// Text token width.
    pub d_l: usize,
    /// Shared prompt width before modality projection.
    pub d_s: usize,
    /// Joint embedding width for the cosine scoring heads.
    pub d_joint: usize,

    pub layers_vision: usize,
    pub layers_attr: usize,
    pub layers_obj: usize,
    /// Front depth: layers 1..=prompt_depth re-inject a fresh projected
    /// shared prompt and discard its outputs; deeper layers carry them.
    pub prompt_depth: usize,
    /// Shared prompt length in tokens.
    pub prompt_len: usize,
    /// Learnable context tokens per text branch.
    pub ctx_tokens: usize,
    /// Frozen random template tokens per text branch.
    pub fixed_tokens: usize,

    pub heads_vision: usize,
    pub heads_text: usize,

    /// Softmax temperature for the cosine scores.
    pub tau: f64,
    pub seed: u64,

    pub enable_visual_prompt: bool,
    pub enable_shared_prompts: bool,
    /// One projector per front layer instead of one per modality.
    pub per_layer_projectors: bool,
    pub visual_prompt_coverage: PromptCoverage,
}

impl Default for MmptConfig {
    fn default() -> Self {
        MmptConfig::toy()
    }
}

impl MmptConfig {
    /// Desk-scale defaults used by the synthetic experiments.
    pub fn toy() -> Self {
        MmptConfig {
            image_size: 32,
            patch_size: 8,
            prompt_patch_size: 8,
            d_v: 32,
            d_l: 24,
            d_s: 16,
            d_joint: 16,
            layers_vision: 3,
            layers_attr: 3,
            layers_obj: 3,
            prompt_depth: 2,
            prompt_len: 4,
            ctx_tokens: 4,
            fixed_tokens: 4,
            heads_vision: 4,
            heads_text: 4,
            tau: 0.01,
            seed: 0,
            enable_visual_prompt: true,
            enable_shared_prompts: true,
            per_layer_projectors: false,
            visual_prompt_coverage: PromptCoverage::SingleLocation,
        }
    }

    /// Full-scale hyperparameters of the reference architecture.
    pub fn paper_scale() -> Self {
        MmptConfig {
            image_size: 224,
            patch_size: 16,
            prompt_patch_size: 16,
            d_v: 768,
            d_l: 512,
            d_s: 128,
            d_joint: 512,
            layers_vision: 12,
            layers_attr: 12,
            layers_obj: 12,
            prompt_depth: 9,
            prompt_len: 6,
            ctx_tokens: 4,
            fixed_tokens: 4,
            heads_vision: 12,
            heads_text: 8,
            tau: 0.01,
            seed: 0,
            enable_visual_prompt: true,
            enable_shared_prompts: true,
            per_layer_projectors: false,
            visual_prompt_coverage: PromptCoverage::SingleLocation,
        }
    }

    /// Minimal configuration for 64-bit gradient checking.
    pub fn grad_check_toy() -> Self {
        MmptConfig {
            image_size: 8,
            patch_size: 4,
            prompt_patch_size: 4,
            d_v: 16,
            d_l: 12,
            d_s: 8,
            d_joint: 8,
            layers_vision: 2,
            layers_attr: 2,
            layers_obj: 2,
            prompt_depth: 1,
            prompt_len: 2,
            ctx_tokens: 4,
            fixed_tokens: 4,
            heads_vision: 2,
            heads_text: 2,
            tau: 0.05,
            seed: 0,
            enable_visual_prompt: true,
            enable_shared_prompts: true,
            per_layer_projectors: false,
            visual_prompt_coverage: PromptCoverage::SingleLocation,
        }
    }

    /// Patch tokens per image.
    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Flattened patch width fed to the patch projection.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn pixel_count(&self) -> usize {
        self.image_size * self.image_size * CHANNELS
    }

    pub fn min_layers(&self) -> usize {
        self.layers_vision.min(self.layers_attr).min(self.layers_obj)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(MmptError::config(msg));
        if self.image_size == 0 || self.patch_size == 0 {
            return fail("image_size and patch_size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.enable_visual_prompt {
            if self.prompt_patch_size == 0 || self.prompt_patch_size > self.image_size {
                return fail(format!(
                    "prompt_patch_size {} must be in 1..={}",
                    self.prompt_patch_size, self.image_size
                ));
            }
            if self.visual_prompt_coverage == PromptCoverage::AllPatches
                && self.prompt_patch_size != self.patch_size
            {
                return fail(format!(
                    "all_patches coverage requires prompt_patch_size == patch_size ({} != {})",
                    self.prompt_patch_size, self.patch_size
                ));
            }
        }
        for (name, v) in
            [("d_v", self.d_v), ("d_l", self.d_l), ("d_joint", self.d_joint)]
        {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.enable_shared_prompts && self.prompt_len > 0 && self.d_s == 0 {
            return fail("d_s must be positive when shared prompts are enabled".into());
        }
        for (name, v) in [
            ("layers_vision", self.layers_vision),
            ("layers_attr", self.layers_attr),
            ("layers_obj", self.layers_obj),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.prompt_depth > self.min_layers() {
            return fail(format!(
                "prompt_depth {} exceeds the shallowest branch depth {}",
                self.prompt_depth,
                self.min_layers()
            ));
        }
        if self.heads_vision == 0 || self.d_v % self.heads_vision != 0 {
            return fail(format!(
                "heads_vision {} must divide d_v {}",
                self.heads_vision, self.d_v
            ));
        }
        if self.heads_text == 0 || self.d_l % self.heads_text != 0 {
            return fail(format!("heads_text {} must divide d_l {}", self.heads_text, self.d_l));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return fail(format!("tau {} must be positive and finite", self.tau));
        }
        Ok(())
    }
}

/// Stable hex hash of any serializable configuration value.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}
