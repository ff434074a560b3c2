//! Architecture hyperparameters and their `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Named size presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Toy,
    Tiny,
    Small,
    Base,
    Large,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Toy, Variant::Tiny, Variant::Small, Variant::Base, Variant::Large];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Toy => "toy",
            Variant::Tiny => "T",
            Variant::Small => "S",
            Variant::Base => "B",
            Variant::Large => "L",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Variant::Toy),
            "T" | "tiny" => Ok(Variant::Tiny),
            "S" | "small" => Ok(Variant::Small),
            "B" | "base" => Ok(Variant::Base),
            "L" | "large" => Ok(Variant::Large),
            other => Err(Error::Config(format!("unknown variant `{other}` (toy, T, S, B, L)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch: usize,
    pub img_h: usize,
    pub img_w: usize,
}

impl ViTConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.img_h / self.patch, self.img_w / self.patch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MrfpConfig {
    /// One depthwise kernel size per channel group.
    pub kernels: Vec<usize>,
    /// Width of the reduced features as a fraction of `dim`.
    pub reduce_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtiConfig {
    pub heads: usize,
    pub points: usize,
    pub ffn_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub mrfp: bool,
    pub cti_to_vit: bool,
    pub cti_to_cnn: bool,
}

impl Toggles {
    pub const ALL_ON: Toggles = Toggles {
        mrfp: true,
        cti_to_vit: true,
        cti_to_cnn: true,
    };
    pub const ALL_OFF: Toggles = Toggles {
        mrfp: false,
        cti_to_vit: false,
        cti_to_cnn: false,
    };

    /// The component ladder: none, MRFP, +CTI to ViT, +CTI to CNN.
    pub fn ladder() -> [(&'static str, Toggles); 4] {
        [
            ("none", Toggles::ALL_OFF),
            (
                "mrfp",
                Toggles {
                    mrfp: true,
                    ..Toggles::ALL_OFF
                },
            ),
            (
                "mrfp+cti_to_vit",
                Toggles {
                    mrfp: true,
                    cti_to_vit: true,
                    cti_to_cnn: false,
                },
            ),
            ("mrfp+cti_to_vit+cti_to_cnn", Toggles::ALL_ON),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoMerConfig {
    pub variant: Variant,
    pub vit: ViTConfig,
    /// Number of interaction stages; the ViT blocks are split evenly.
    pub stages: usize,
    /// Base channel width of the convolutional stem.
    pub stem_width: usize,
    pub mrfp: MrfpConfig,
    pub cti: CtiConfig,
    pub toggles: Toggles,
    pub num_classes: usize,
    /// Adds a 1/4-stride output made by a transposed conv from the 1/8 level.
    pub quarter_level: bool,
}

/// Every key accepted by [`CoMerConfig::set`], in serialization order.
pub const CONFIG_KEYS: &[&str] = &[
    "variant",
    "depth",
    "dim",
    "heads",
    "mlp_ratio",
    "patch",
    "img_h",
    "img_w",
    "stages",
    "stem_width",
    "mrfp_kernels",
    "mrfp_reduce",
    "cti_heads",
    "cti_points",
    "cti_ffn_ratio",
    "mrfp_enabled",
    "cti_to_vit",
    "cti_to_cnn",
    "num_classes",
    "quarter_level",
];

impl CoMerConfig {
    pub fn variant(v: Variant) -> Self {
        let (depth, dim, heads, img, stem_width, cti_heads, stages) = match v {
            Variant::Toy => (4, 16, 2, 64, 8, 4, 2),
            Variant::Tiny => (12, 192, 3, 224, 64, 8, 4),
            Variant::Small => (12, 384, 6, 224, 64, 8, 4),
            Variant::Base => (12, 768, 12, 224, 64, 8, 4),
            Variant::Large => (24, 1024, 16, 224, 64, 8, 4),
        };
        CoMerConfig {
            variant: v,
            vit: ViTConfig {
                depth,
                dim,
                heads,
                mlp_ratio: 4.0,
                patch: 16,
                img_h: img,
                img_w: img,
            },
            stages,
            stem_width,
            mrfp: MrfpConfig {
                kernels: vec![3, 5],
                reduce_ratio: 0.5,
            },
            cti: CtiConfig {
                heads: cti_heads,
                points: 4,
                ffn_ratio: 0.25,
            },
            toggles: Toggles::ALL_ON,
            num_classes: 4,
            quarter_level: false,
        }
    }

    pub fn toy() -> Self {
        Self::variant(Variant::Toy)
    }

    pub fn dim(&self) -> usize {
        self.vit.dim
    }

    /// Width of the MRFP's reduced features.
    pub fn reduced_dim(&self) -> usize {
        (self.vit.dim as f64 * self.mrfp.reduce_ratio).round() as usize
    }

    pub fn blocks_per_stage(&self) -> usize {
        self.vit.depth / self.stages
    }

    /// Block index boundaries `[0, L/N, 2L/N, .., L]`.
    pub fn stage_bounds(&self) -> Vec<usize> {
        let per = self.blocks_per_stage();
        (0..=self.stages).map(|i| i * per).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.vit;
        let fail = |msg: String| Err(Error::Config(msg));
        if v.depth == 0 || v.dim == 0 || v.heads == 0 || self.stages == 0 {
            return fail("depth, dim, heads and stages must be positive".into());
        }
        if v.patch != 16 {
            return fail(format!("patch must be 16, got {}", v.patch));
        }
        for (name, n) in [("img_h", v.img_h), ("img_w", v.img_w)] {
            if n == 0 || n % 32 != 0 {
                return fail(format!("{name} = {n} is not a positive multiple of 32"));
            }
        }
        if !v.depth.is_multiple_of(self.stages) {
            return fail(format!("depth {} is not divisible by {} stages", v.depth, self.stages));
        }
        if !v.dim.is_multiple_of(v.heads) {
            return fail(format!("dim {} is not divisible by {} heads", v.dim, v.heads));
        }
        if !(v.mlp_ratio > 0.0) || !(self.cti.ffn_ratio > 0.0) {
            return fail("mlp_ratio and cti_ffn_ratio must be positive".into());
        }
        if self.cti.heads == 0 || !v.dim.is_multiple_of(self.cti.heads) {
            return fail(format!("dim {} is not divisible by {} cti heads", v.dim, self.cti.heads));
        }
        if self.cti.points == 0 {
            return fail("cti_points must be positive".into());
        }
        if self.stem_width == 0 {
            return fail("stem_width must be positive".into());
        }
        let groups = self.mrfp.kernels.len();
        if groups == 0 {
            return fail("mrfp_kernels must list at least one kernel size".into());
        }
        if let Some(k) = self.mrfp.kernels.iter().find(|&&k| k % 2 == 0) {
            return fail(format!("mrfp kernel size {k} is not odd"));
        }
        let reduced = self.reduced_dim();
        if reduced == 0 || !reduced.is_multiple_of(groups) {
            return fail(format!(
                "reduced width {reduced} (dim {} × {}) is not divisible into {groups} groups",
                v.dim, self.mrfp.reduce_ratio
            ));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        Ok(())
    }

    /// Sets one key. Returns `Ok(false)` when the key is not a model key.
    /// `variant` resets every field to that preset.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "on" | "yes" => Ok(true),
                "false" | "0" | "off" | "no" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected a boolean, got `{value}`"))),
            }
        }
        match key {
            "variant" => *self = Self::variant(value.parse()?),
            "depth" => self.vit.depth = num(key, value)?,
            "dim" => self.vit.dim = num(key, value)?,
            "heads" => self.vit.heads = num(key, value)?,
            "mlp_ratio" => self.vit.mlp_ratio = num(key, value)?,
            "patch" => self.vit.patch = num(key, value)?,
            "img_h" => self.vit.img_h = num(key, value)?,
            "img_w" => self.vit.img_w = num(key, value)?,
            "img_size" => {
                let n = num(key, value)?;
                self.vit.img_h = n;
                self.vit.img_w = n;
            }
            "stages" => self.stages = num(key, value)?,
            "stem_width" => self.stem_width = num(key, value)?,
            "mrfp_kernels" => {
                self.mrfp.kernels = value
                    .split(',')
                    .map(|k| num(key, k.trim()))
                    .collect::<Result<_>>()?;
            }
            "mrfp_reduce" => self.mrfp.reduce_ratio = num(key, value)?,
            "cti_heads" => self.cti.heads = num(key, value)?,
            "cti_points" => self.cti.points = num(key, value)?,
            "cti_ffn_ratio" => self.cti.ffn_ratio = num(key, value)?,
            "mrfp_enabled" => self.toggles.mrfp = flag(key, value)?,
            "cti_to_vit" => self.toggles.cti_to_vit = flag(key, value)?,
            "cti_to_cnn" => self.toggles.cti_to_cnn = flag(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "quarter_level" => self.quarter_level = flag(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let v = &self.vit;
        let kernels: Vec<String> = self.mrfp.kernels.iter().map(ToString::to_string).collect();
        let mut s = String::new();
        let mut line = |k: &str, val: String| {
            let _ = writeln!(s, "{k} = {val}");
        };
        line("variant", self.variant.name().into());
        line("depth", v.depth.to_string());
        line("dim", v.dim.to_string());
        line("heads", v.heads.to_string());
        line("mlp_ratio", v.mlp_ratio.to_string());
        line("patch", v.patch.to_string());
        line("img_h", v.img_h.to_string());
        line("img_w", v.img_w.to_string());
        line("stages", self.stages.to_string());
        line("stem_width", self.stem_width.to_string());
        line("mrfp_kernels", kernels.join(","));
        line("mrfp_reduce", self.mrfp.reduce_ratio.to_string());
        line("cti_heads", self.cti.heads.to_string());
        line("cti_points", self.cti.points.to_string());
        line("cti_ffn_ratio", self.cti.ffn_ratio.to_string());
        line("mrfp_enabled", self.toggles.mrfp.to_string());
        line("cti_to_vit", self.toggles.cti_to_vit.to_string());
        line("cti_to_cnn", self.toggles.cti_to_cnn.to_string());
        line("num_classes", self.num_classes.to_string());
        line("quarter_level", self.quarter_level.to_string());
        s
    }

    /// Parses `key = value` lines (`#` starts a comment). A `variant` line is
    /// applied first wherever it appears; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = Self::toy();
        if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "variant") {
            cfg = Self::variant(v.parse()?);
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "variant") {
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key = value` lines, dropping blank lines and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for v in Variant::ALL {
            CoMerConfig::variant(v).validate().unwrap();
        }
        let t = CoMerConfig::variant(Variant::Tiny);
        assert_eq!((t.vit.depth, t.vit.dim, t.vit.heads, t.stages), (12, 192, 3, 4));
        let l = CoMerConfig::variant(Variant::Large);
        assert_eq!((l.vit.depth, l.vit.dim, l.vit.heads), (24, 1024, 16));
    }

    #[test]
    fn stage_bounds_split_evenly() {
        let mut c = CoMerConfig::variant(Variant::Tiny);
        assert_eq!(c.stage_bounds(), vec![0, 3, 6, 9, 12]);
        c.vit.depth = 8;
        assert_eq!(c.stage_bounds(), vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn text_round_trip() {
        let mut c = CoMerConfig::toy();
        c.mrfp.kernels = vec![3, 5, 7];
        c.mrfp.reduce_ratio = 0.75;
        c.toggles.cti_to_cnn = false;
        let back = CoMerConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejections() {
        assert!(CoMerConfig::from_text("img_h = 65").is_err());
        assert!(CoMerConfig::from_text("bogus = 1").is_err());
        assert!(CoMerConfig::from_text("stages = 3").is_err());
        assert!(CoMerConfig::from_text("mrfp_kernels = 3,4").is_err());
        assert!(CoMerConfig::from_text("mrfp_kernels = 3,5,7").is_err());
        assert!(CoMerConfig::from_text("just words").is_err());
    }

    #[test]
    fn variant_applies_before_overrides() {
        let c = CoMerConfig::from_text("depth = 24\nvariant = S # small\n").unwrap();
        assert_eq!(c.vit.dim, 384);
        assert_eq!(c.vit.depth, 24);
    }
}
