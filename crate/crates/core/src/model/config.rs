use crate::autodiff::GeluVariant;
use crate::error::{Error, Result};
use crate::focal_bias::{BiasKind, GridShape, MrfaMode, SuppressionValue, WindowSchedule};

/// How (and whether) attention heads carry a focal bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum BiasMode {
    None,
    Absolute,
    #[default]
    Relative,
}

impl BiasMode {
    pub fn kind(self) -> Option<BiasKind> {
        match self {
            BiasMode::None => None,
            BiasMode::Absolute => Some(BiasKind::Absolute),
            BiasMode::Relative => Some(BiasKind::Relative),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BiasMode::None => "none",
            BiasMode::Absolute => "absolute",
            BiasMode::Relative => "relative",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(BiasMode::None),
            "absolute" => Some(BiasMode::Absolute),
            "relative" => Some(BiasMode::Relative),
            _ => None,
        }
    }
}

/// Named width/depth settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Preset {
    /// Desk-scale model: depth 2, width 32, 2 heads on a 16px image with 4px
    /// patches.
    #[default]
    Tiny,
    DeitTiny,
    DeitSmall,
    DeitBase,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::DeitTiny => "deit-tiny",
            Preset::DeitSmall => "deit-small",
            Preset::DeitBase => "deit-base",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tiny" => Some(Preset::Tiny),
            "deit-tiny" => Some(Preset::DeitTiny),
            "deit-small" => Some(Preset::DeitSmall),
            "deit-base" => Some(Preset::DeitBase),
            _ => None,
        }
    }

    /// `(depth, embed_dim, heads)`
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Preset::Tiny => (2, 32, 2),
            Preset::DeitTiny => (12, 192, 3),
            Preset::DeitSmall => (12, 384, 6),
            Preset::DeitBase => (12, 768, 12),
        }
    }

    /// `(image_px, patch_px)`
    pub fn image(self) -> (usize, usize) {
        match self {
            Preset::Tiny => (16, 4),
            _ => (32, 2),
        }
    }

    /// Default batch size for the preset.
    pub fn batch_size(self) -> usize {
        match self {
            Preset::Tiny => 64,
            Preset::DeitTiny => 256,
            Preset::DeitSmall => 128,
            Preset::DeitBase => 64,
        }
    }
}

/// Architecture and focal-bias settings of a ViT-P network.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTPConfig {
    pub image_px: usize,
    pub patch_px: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub bias_mode: BiasMode,
    pub learnable_bias: bool,
    pub decay_enabled: bool,
    pub suppression: f64,
    pub mrfa_mode: MrfaMode,
    pub gelu: GeluVariant,
    pub ln_eps: f64,
    pub dropout: f64,
    pub drop_path: f64,
}

impl Default for ViTPConfig {
    fn default() -> Self {
        Self::preset(Preset::Tiny)
    }
}

pub const IN_CHANNELS: usize = 3;

impl ViTPConfig {
    pub fn preset(p: Preset) -> Self {
        let (depth, embed_dim, heads) = p.dims();
        let (image_px, patch_px) = p.image();
        ViTPConfig {
            image_px,
            patch_px,
            depth,
            embed_dim,
            heads,
            mlp_ratio: 4,
            num_classes: 10,
            bias_mode: BiasMode::Relative,
            learnable_bias: true,
            decay_enabled: true,
            suppression: SuppressionValue::DEFAULT,
            mrfa_mode: MrfaMode::Width,
            gelu: GeluVariant::Erf,
            ln_eps: 1e-6,
            dropout: 0.0,
            drop_path: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_px == 0 || !self.image_px.is_multiple_of(self.patch_px) {
            return bad(format!(
                "image_px {} is not divisible by patch_px {}",
                self.image_px, self.patch_px
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return bad("depth and mlp_ratio must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return bad(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        for (k, p) in [("dropout", self.dropout), ("drop_path", self.drop_path)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{k} must be in [0, 1), got {p}"));
            }
        }
        SuppressionValue::new(self.suppression)?;
        self.grid()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<GridShape> {
        GridShape::new(self.image_px / self.patch_px, self.patch_px)
    }

    pub fn spatial_tokens(&self) -> usize {
        let m = self.image_px / self.patch_px;
        m * m
    }

    /// Spatial tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.spatial_tokens() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn patch_dim(&self) -> usize {
        IN_CHANNELS * self.patch_px * self.patch_px
    }

    /// Window schedule for the biased heads (also defined for `bias_mode =
    /// none`, where it is informational only).
    pub fn schedule(&self) -> Result<WindowSchedule> {
        WindowSchedule::build(self.mrfa_mode, self.depth, self.heads, self.grid()?)
    }

    /// Number of scalar parameters, including focal-bias storage.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let n = self.tokens();
        let patch = self.patch_dim() * d + d;
        let embed = d + n * d;
        let block = 2 * d // norm1
            + d * 3 * d + 3 * d
            + d * d + d
            + 2 * d // norm2
            + d * h + h
            + h * d + d;
        let bias = match (self.bias_mode.kind(), self.grid()) {
            (Some(kind), Ok(grid)) => self.heads * kind.entries_per_head(grid),
            _ => 0,
        };
        let head = 2 * d + d * self.num_classes + self.num_classes;
        patch + embed + self.depth * (block + bias) + head
    }
}
