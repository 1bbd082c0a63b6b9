//! Run configuration: a plain-text `key = value` file with section headers.

use std::path::{Path, PathBuf};

use ini::Ini;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub crop: u32,
    pub checkpoint_every: usize,
    pub workers: usize,
    pub prefetch: usize,
    pub extractor_seed: u64,
}

impl TrainSettings {
    pub fn for_preset(preset: &str) -> Self {
        let full = Self {
            learning_rate: 2e-4,
            batch_size: 32,
            epochs: 400,
            steps: None,
            crop: 256,
            checkpoint_every: 1000,
            workers: 1,
            prefetch: 2,
            extractor_seed: 0,
        };
        match preset {
            "toy" => Self { batch_size: 4, steps: Some(300), crop: 64, checkpoint_every: 100, ..full },
            _ => full,
        }
    }

    pub fn total_steps(&self, pairs: usize) -> usize {
        self.steps.unwrap_or_else(|| self.epochs * pairs.div_ceil(self.batch_size))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataSettings {
    pub manifest: Option<PathBuf>,
    pub input_dir: Option<PathBuf>,
    pub reference_dir: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub extractor_weights: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub data: DataSettings,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let model = ModelConfig::preset(name)
            .ok_or_else(|| Error::Config(vec![format!("preset: unknown preset {name:?} (expected toy or full)")]))?;
        Ok(Self {
            preset: name.to_string(),
            seed: 0,
            out: None,
            model,
            train: TrainSettings::for_preset(name),
            data: DataSettings::default(),
        })
    }

    /// Parses `text`; relative paths resolve against `base`. A `preset`
    /// argument takes precedence over the file's own `preset` key.
    pub fn parse(text: &str, base: &Path, preset: Option<&str>) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(vec![format!("parse error: {e}")]))?;
        let mut errs = Vec::new();
        let general = ini.general_section();
        let name = preset.or_else(|| general.get("preset")).unwrap_or("toy").trim().to_string();
        let mut cfg = match Self::preset(&name) {
            Ok(c) => c,
            Err(Error::Config(mut e)) => {
                errs.append(&mut e);
                Self::preset("toy")?
            }
            Err(e) => return Err(e),
        };
        let path = |v: &str| {
            let p = PathBuf::from(v.trim());
            if p.is_absolute() { p } else { base.join(p) }
        };
        fn num<T: std::str::FromStr>(section: &str, key: &str, v: &str, errs: &mut Vec<String>) -> Option<T> {
            v.trim().parse().map_err(|_| errs.push(format!("{section}.{key}: cannot parse {v:?}"))).ok()
        }
        for (section, props) in ini.iter() {
            match section {
                None => {
                    for (k, v) in props.iter() {
                        match k {
                            "preset" => {}
                            "seed" => cfg.seed = num("general", k, v, &mut errs).unwrap_or(cfg.seed),
                            "out" => cfg.out = Some(path(v)),
                            _ => errs.push(format!("{k}: unknown key")),
                        }
                    }
                }
                Some("model") => cfg.model.apply_overrides(props.iter(), &mut errs),
                Some("train") => {
                    let t = &mut cfg.train;
                    for (k, v) in props.iter() {
                        match k {
                            "lr" => t.learning_rate = num("train", k, v, &mut errs).unwrap_or(t.learning_rate),
                            "batch_size" => t.batch_size = num("train", k, v, &mut errs).unwrap_or(t.batch_size),
                            "epochs" => {
                                t.epochs = num("train", k, v, &mut errs).unwrap_or(t.epochs);
                                t.steps = None;
                            }
                            "steps" => t.steps = num("train", k, v, &mut errs).or(t.steps),
                            "crop" => t.crop = num("train", k, v, &mut errs).unwrap_or(t.crop),
                            "checkpoint_every" => {
                                t.checkpoint_every = num("train", k, v, &mut errs).unwrap_or(t.checkpoint_every)
                            }
                            "workers" => t.workers = num("train", k, v, &mut errs).unwrap_or(t.workers),
                            "prefetch" => t.prefetch = num("train", k, v, &mut errs).unwrap_or(t.prefetch),
                            "extractor_seed" => {
                                t.extractor_seed = num("train", k, v, &mut errs).unwrap_or(t.extractor_seed)
                            }
                            _ => errs.push(format!("train.{k}: unknown key")),
                        }
                    }
                }
                Some("data") => {
                    let d = &mut cfg.data;
                    for (k, v) in props.iter() {
                        match k {
                            "manifest" => d.manifest = Some(path(v)),
                            "input_dir" => d.input_dir = Some(path(v)),
                            "reference_dir" => d.reference_dir = Some(path(v)),
                            "masks" => d.masks = Some(path(v)),
                            "extractor_weights" => d.extractor_weights = Some(path(v)),
                            _ => errs.push(format!("data.{k}: unknown key")),
                        }
                    }
                }
                Some(other) => errs.push(format!("[{other}]: unknown section")),
            }
        }
        errs.extend(cfg.problems());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: &Path, preset: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("--config {}: {e}", path.display())]))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), preset)
    }

    /// Every invalid field, including unresolvable paths.
    pub fn problems(&self) -> Vec<String> {
        let mut errs: Vec<String> = self.model.problems().into_iter().map(|e| format!("model.{e}")).collect();
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            errs.push(format!("train.lr: {} must be positive", t.learning_rate));
        }
        if t.batch_size == 0 {
            errs.push("train.batch_size: must be at least 1".into());
        }
        if t.steps == Some(0) || (t.steps.is_none() && t.epochs == 0) {
            errs.push("train.steps: training needs at least one step".into());
        }
        if t.crop == 0 || t.crop % 32 != 0 {
            errs.push(format!("train.crop: {} must be a positive multiple of 32", t.crop));
        }
        if t.checkpoint_every == 0 {
            errs.push("train.checkpoint_every: must be at least 1".into());
        }
        if t.workers == 0 {
            errs.push("train.workers: must be at least 1".into());
        }
        let d = &self.data;
        let check = |key: &str, p: &Option<PathBuf>, dir: bool, errs: &mut Vec<String>| {
            if let Some(p) = p {
                let ok = if dir { p.is_dir() } else { p.is_file() };
                if !ok {
                    errs.push(format!("data.{key}: {} does not exist", p.display()));
                }
            }
        };
        check("manifest", &d.manifest, false, &mut errs);
        check("input_dir", &d.input_dir, true, &mut errs);
        check("reference_dir", &d.reference_dir, true, &mut errs);
        check("masks", &d.masks, true, &mut errs);
        check("extractor_weights", &d.extractor_weights, false, &mut errs);
        if d.input_dir.is_some() != d.reference_dir.is_some() {
            errs.push("data.input_dir / data.reference_dir: both or neither must be set".into());
        }
        errs
    }

    pub fn has_dataset(&self) -> bool {
        self.data.manifest.is_some() || self.data.input_dir.is_some()
    }
}
