use std::fmt::{self, Write as _};
use std::str::FromStr;

use ini::Ini;

use crate::error::{Error, Result};

/// Which reference modules are active (the ablation ladder).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Main-PT only; the reference image is ignored.
    Basic,
    /// Basic plus patch alignment and harmonization.
    RefPaOnly,
    /// Patch alignment followed by the reference patch transformer.
    Full,
}

impl Variant {
    pub fn uses_reference(self) -> bool {
        !matches!(self, Variant::Basic)
    }

    pub fn uses_ref_pt(self) -> bool {
        matches!(self, Variant::Full)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Basic => "basic",
            Variant::RefPaOnly => "ref_pa",
            Variant::Full => "full",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "basic" => Ok(Variant::Basic),
            "ref_pa" => Ok(Variant::RefPaOnly),
            "full" => Ok(Variant::Full),
            other => Err(format!("unknown variant {other:?} (expected basic, ref_pa or full)")),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channel width of each encoder stage (1/4, 1/8, 1/16, 1/32 resolution).
    pub embed_dims: Vec<usize>,
    pub num_heads: Vec<usize>,
    /// Key/value reduction of the Main-PT attention per stage.
    pub sr_ratios: Vec<usize>,
    /// Key/value reduction of the reference attention per reference stage.
    pub ref_sr_ratios: Vec<usize>,
    pub main_pt_depths: Vec<usize>,
    /// Number of leading stages that embed the reference.
    pub ref_scales: usize,
    pub mlp_ratio: usize,
    pub deform_kernel: usize,
    pub decoder_heads: usize,
    /// Width of the tail at 1/8 resolution.
    pub decoder_dim: usize,
    /// Widths of the tail at 1/4, 1/2 and full resolution.
    pub tail_dims: Vec<usize>,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            embed_dims: vec![32, 64, 128, 160],
            num_heads: vec![1, 2, 4, 8],
            sr_ratios: vec![8, 4, 2, 1],
            ref_sr_ratios: vec![4, 2, 1],
            main_pt_depths: vec![2, 2, 2, 2],
            ref_scales: 3,
            mlp_ratio: 4,
            deform_kernel: 3,
            decoder_heads: 8,
            decoder_dim: 64,
            tail_dims: vec![32, 16, 16],
            variant: Variant::Full,
        }
    }

    pub fn full() -> Self {
        Self {
            embed_dims: vec![64, 128, 320, 512],
            num_heads: vec![1, 2, 5, 8],
            sr_ratios: vec![8, 4, 2, 1],
            ref_sr_ratios: vec![4, 2, 1],
            main_pt_depths: vec![3, 4, 6, 3],
            ref_scales: 3,
            mlp_ratio: 4,
            deform_kernel: 3,
            decoder_heads: 8,
            decoder_dim: 256,
            tail_dims: vec![128, 64, 32],
            variant: Variant::Full,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "full" => Some(Self::full()),
            _ => None,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn num_scales(&self) -> usize {
        self.embed_dims.len()
    }

    /// Every violated invariant, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let n = self.embed_dims.len();
        if n != 4 {
            errs.push(format!("embed_dims: expected 4 stages, got {n}"));
        }
        for (name, len) in [
            ("num_heads", self.num_heads.len()),
            ("sr_ratios", self.sr_ratios.len()),
            ("main_pt_depths", self.main_pt_depths.len()),
        ] {
            if len != n {
                errs.push(format!("{name}: expected {n} entries, got {len}"));
            }
        }
        if self.ref_scales > n {
            errs.push(format!("ref_scales: {} exceeds {n} stages", self.ref_scales));
        }
        if self.ref_sr_ratios.len() != self.ref_scales {
            errs.push(format!(
                "ref_sr_ratios: expected {} entries, got {}",
                self.ref_scales,
                self.ref_sr_ratios.len()
            ));
        }
        for (i, (&d, &h)) in self.embed_dims.iter().zip(&self.num_heads).enumerate() {
            if d == 0 || h == 0 || d % h != 0 {
                errs.push(format!("embed_dims[{i}] = {d} is not divisible by num_heads[{i}] = {h}"));
            }
        }
        if let Some(&last) = self.embed_dims.last() {
            if self.decoder_heads == 0 || last % self.decoder_heads != 0 {
                errs.push(format!("decoder_heads: {last} is not divisible by {}", self.decoder_heads));
            }
        }
        if self.sr_ratios.iter().chain(&self.ref_sr_ratios).any(|&r| r == 0) {
            errs.push("sr_ratios/ref_sr_ratios: ratios must be >= 1".into());
        }
        if self.deform_kernel % 2 == 0 {
            errs.push(format!("deform_kernel: {} must be odd", self.deform_kernel));
        }
        if self.mlp_ratio == 0 {
            errs.push("mlp_ratio: must be >= 1".into());
        }
        if self.decoder_dim == 0 || self.tail_dims.len() != 3 || self.tail_dims.contains(&0) {
            errs.push(format!("tail_dims: expected 3 positive widths, got {:?}", self.tail_dims));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.problems();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Plain-text `key = value` form under a `[model]` header.
    pub fn to_config_string(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::from("[model]\n");
        let _ = writeln!(s, "embed_dims = {}", list(&self.embed_dims));
        let _ = writeln!(s, "num_heads = {}", list(&self.num_heads));
        let _ = writeln!(s, "sr_ratios = {}", list(&self.sr_ratios));
        let _ = writeln!(s, "ref_sr_ratios = {}", list(&self.ref_sr_ratios));
        let _ = writeln!(s, "main_pt_depths = {}", list(&self.main_pt_depths));
        let _ = writeln!(s, "ref_scales = {}", self.ref_scales);
        let _ = writeln!(s, "mlp_ratio = {}", self.mlp_ratio);
        let _ = writeln!(s, "deform_kernel = {}", self.deform_kernel);
        let _ = writeln!(s, "decoder_heads = {}", self.decoder_heads);
        let _ = writeln!(s, "decoder_dim = {}", self.decoder_dim);
        let _ = writeln!(s, "tail_dims = {}", list(&self.tail_dims));
        let _ = writeln!(s, "variant = {}", self.variant);
        s
    }

    /// Applies `key = value` overrides on top of `self`, collecting every bad field.
    pub fn apply_overrides<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a str)>,
        errs: &mut Vec<String>,
    ) {
        fn list(key: &str, v: &str, errs: &mut Vec<String>) -> Option<Vec<usize>> {
            let parsed: Result<Vec<usize>, _> = v.split(',').map(|t| t.trim().parse::<usize>()).collect();
            parsed.map_err(|_| errs.push(format!("{key}: {v:?} is not a comma-separated list of integers"))).ok()
        }
        fn int(key: &str, v: &str, errs: &mut Vec<String>) -> Option<usize> {
            v.trim().parse().map_err(|_| errs.push(format!("{key}: {v:?} is not a non-negative integer"))).ok()
        }
        for (key, value) in entries {
            match key {
                "embed_dims" => self.embed_dims = list(key, value, errs).unwrap_or_default(),
                "num_heads" => self.num_heads = list(key, value, errs).unwrap_or_default(),
                "sr_ratios" => self.sr_ratios = list(key, value, errs).unwrap_or_default(),
                "ref_sr_ratios" => self.ref_sr_ratios = list(key, value, errs).unwrap_or_default(),
                "main_pt_depths" => self.main_pt_depths = list(key, value, errs).unwrap_or_default(),
                "tail_dims" => self.tail_dims = list(key, value, errs).unwrap_or_default(),
                "ref_scales" => self.ref_scales = int(key, value, errs).unwrap_or(self.ref_scales),
                "mlp_ratio" => self.mlp_ratio = int(key, value, errs).unwrap_or(self.mlp_ratio),
                "deform_kernel" => self.deform_kernel = int(key, value, errs).unwrap_or(self.deform_kernel),
                "decoder_heads" => self.decoder_heads = int(key, value, errs).unwrap_or(self.decoder_heads),
                "decoder_dim" => self.decoder_dim = int(key, value, errs).unwrap_or(self.decoder_dim),
                "variant" => match value.trim().parse() {
                    Ok(v) => self.variant = v,
                    Err(e) => errs.push(format!("variant: {e}")),
                },
                other => errs.push(format!("{other}: unknown model key")),
            }
        }
    }

    /// Parses the text written by [`Self::to_config_string`]. Missing keys
    /// fall back to the toy preset.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(vec![format!("parse error: {e}")]))?;
        let mut cfg = Self::toy();
        let mut errs = Vec::new();
        if let Some(section) = ini.section(Some("model")) {
            cfg.apply_overrides(section.iter(), &mut errs);
        } else {
            errs.push("missing [model] section".into());
        }
        if errs.is_empty() {
            errs = cfg.problems();
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }
}
