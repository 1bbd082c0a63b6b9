//! Command-line front end: pair mining, mask corpora, training, inference and evaluation.

mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

pub use config::{DataSettings, RunConfig, TrainSettings};

use crate::data::image_io::{
    gray_to_mask, load_gray, load_rgb, mask_bits_to_gray, rgb_to_tensor, save_gray, save_rgb, side_by_side,
    tensor_to_rgb,
};
use crate::data::mask::{classify_mask_ratio, corpus_seed, gen_irregular_mask, Mask, RatioBin};
use crate::data::mask::apply_mask;
use crate::data::mining::{mine_directories, read_manifest, MatchConfig, MatchFilter, MiningConfig};
use crate::error::Error;
use crate::losses::ConvPyramid;
use crate::metrics::{evaluate_run, scores_to_csv};
use crate::model::InpaintingModel;
use crate::train::{MaskSource, Prefetcher, Trainer, TrainingData};

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Full,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Self::Toy => "toy",
            Self::Full => "full",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "transref", version, about = "Reference-guided image inpainting")]
pub struct Cli {
    /// Run configuration file
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Output directory (or file, for `infer`) when no positional output is given
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine reference pairs from two directories of same-named images
    Mine {
        dir_a: PathBuf,
        dir_b: PathBuf,
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        min_matches: usize,
        /// Nearest/second-nearest distance ratio
        #[arg(long, default_value_t = 0.7)]
        ratio: f32,
        /// Use an absolute descriptor-distance threshold instead of the ratio test
        #[arg(long)]
        absolute: Option<f32>,
        #[arg(long)]
        no_cross_check: bool,
        #[arg(long, default_value_t = 256)]
        crop: u32,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Generate a binned irregular-mask corpus
    Masks {
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        per_bin: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Train a model from the run configuration
    Train,
    /// Inpaint one image
    Infer {
        checkpoint: PathBuf,
        input: PathBuf,
        mask: PathBuf,
        reference: PathBuf,
        out: Option<PathBuf>,
        /// Also write reference | masked input | output [| ground truth]
        #[arg(long, value_name = "PATH")]
        grid: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        gt: Option<PathBuf>,
    },
    /// Score predictions against ground truth, stratified by mask ratio
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        mask_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, value_name = "PATH")]
        extractor_weights: Option<PathBuf>,
    },
}

/// Exit status classes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult = std::result::Result<(), Failure>;

fn usage<T>(msg: impl Into<String>) -> std::result::Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Mine { dir_a, dir_b, out_dir, min_matches, ratio, absolute, no_cross_check, crop, workers } => {
            let out = output(out_dir, cli)?;
            let cfg = MiningConfig {
                matching: MatchConfig {
                    filter: absolute.map_or(MatchFilter::Ratio(*ratio), MatchFilter::Absolute),
                    cross_check: !no_cross_check,
                    ..MatchConfig::default()
                },
                min_matches: *min_matches,
                crop_size: *crop,
                workers: *workers,
                ..MiningConfig::default()
            };
            cmd_mine(dir_a, dir_b, &out, &cfg)
        }
        Command::Masks { out_dir, per_bin, size } => {
            let out = output(out_dir, cli)?;
            cmd_masks(&out, *per_bin, *size, seed(cli)?)
        }
        Command::Train => cmd_train(cli),
        Command::Infer { checkpoint, input, mask, reference, out, grid, gt } => {
            let out = output(out, cli)?;
            cmd_infer(checkpoint, input, mask, reference, &out, grid.as_deref(), gt.as_deref())
        }
        Command::Eval { pred_dir, gt_dir, mask_dir, workers, extractor_weights } => {
            cmd_eval(pred_dir, gt_dir, mask_dir, cli.out.as_deref(), *workers, extractor_weights.as_deref(), seed(cli)?)
        }
    }
}

fn output(positional: &Option<PathBuf>, cli: &Cli) -> std::result::Result<PathBuf, Failure> {
    match positional.as_ref().or(cli.out.as_ref()) {
        Some(p) => Ok(p.clone()),
        None => usage("no output given (positional argument or --out)"),
    }
}

fn run_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let preset = cli.preset.map(Preset::name);
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, preset)?,
        None => RunConfig::preset(preset.unwrap_or("toy"))?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn seed(cli: &Cli) -> std::result::Result<u64, Failure> {
    Ok(match (&cli.config, cli.seed) {
        (_, Some(s)) => s,
        (Some(_), None) => run_config(cli)?.seed,
        (None, None) => 0,
    })
}

fn require_dir(p: &Path) -> CliResult {
    if p.is_dir() {
        Ok(())
    } else {
        usage(format!("{} is not a directory", p.display()))
    }
}

pub fn cmd_mine(dir_a: &Path, dir_b: &Path, out: &Path, cfg: &MiningConfig) -> CliResult {
    require_dir(dir_a)?;
    require_dir(dir_b)?;
    let summary = mine_directories(dir_a, dir_b, out, cfg)?;
    let sources = summary.records.len() + summary.rejected.len();
    if sources == 0 {
        return usage(format!("no same-named PNG files in {} and {}", dir_a.display(), dir_b.display()));
    }
    println!("accepted {} of {sources} sub-image pairs, rejected {}", summary.records.len(), summary.rejected.len());
    for (name, k, reason) in &summary.rejected {
        info!("rejected {name} sub-image {k}: {reason}");
    }
    for name in &summary.unpaired {
        warn!("{name} has no partner and was skipped");
    }
    if summary.records.is_empty() {
        eprintln!("warning: no pairs accepted");
    }
    println!("manifest: {}", out.join("manifest.jsonl").display());
    Ok(())
}

/// File name of mask `index`; damaged-boundary masks carry a `_d` suffix.
pub fn mask_file_name(index: usize, damaged: bool) -> String {
    format!("{index:05}{}.png", if damaged { "_d" } else { "" })
}

pub fn cmd_masks(out: &Path, per_bin: usize, size: usize, seed: u64) -> CliResult {
    let mut written = 0usize;
    let mut agree = 0usize;
    for bin in RatioBin::all() {
        let dir = out.join(bin.dir_name());
        std::fs::create_dir_all(&dir)?;
        for i in 0..per_bin {
            let damaged = i % 2 == 0;
            let spec = gen_irregular_mask(bin, damaged, corpus_seed(seed, bin, i), size, size)?;
            let path = dir.join(mask_file_name(i, damaged));
            save_gray(&mask_bits_to_gray(&spec.mask.bits, size, size), &path)?;
            let back = load_gray(&path)?;
            let mask = Mask { width: size, height: size, bits: back.as_raw().iter().map(|&v| u8::from(v > 127)).collect() };
            agree += usize::from(classify_mask_ratio(&mask)? == bin);
            written += 1;
        }
    }
    let pct = if written == 0 { 100.0 } else { 100.0 * agree as f64 / written as f64 };
    println!("wrote {written} masks ({per_bin} per bin) to {}; classification agreement {pct:.2}%", out.display());
    Ok(())
}

fn load_pairs(cfg: &RunConfig) -> std::result::Result<Vec<(image::RgbImage, image::RgbImage)>, Failure> {
    let d = &cfg.data;
    let mut files = Vec::new();
    if let Some(manifest) = &d.manifest {
        let base = manifest.parent().unwrap_or(Path::new("."));
        for r in read_manifest(manifest)? {
            files.push((base.join(&r.input), base.join(&r.reference)));
        }
    }
    if let (Some(a), Some(b)) = (&d.input_dir, &d.reference_dir) {
        let mut names: Vec<_> = std::fs::read_dir(a)?
            .filter_map(|e| e.ok().map(|e| e.file_name()))
            .filter(|n| n.to_string_lossy().to_ascii_lowercase().ends_with(".png") && b.join(n).is_file())
            .collect();
        names.sort();
        files.extend(names.into_iter().map(|n| (a.join(&n), b.join(&n))));
    }
    if files.is_empty() {
        return usage("the configured dataset contains no image pairs");
    }
    files.into_iter().map(|(a, b)| Ok((load_rgb(&a)?, load_rgb(&b)?))).collect()
}

pub fn cmd_train(cli: &Cli) -> CliResult {
    let cfg = run_config(cli)?;
    let Some(out) = cfg.out.clone() else {
        return usage("no output directory (set `out` in the config or pass --out)");
    };
    if !cfg.has_dataset() {
        return usage("no dataset configured (data.manifest or data.input_dir + data.reference_dir)");
    }
    let pairs = load_pairs(&cfg)?;
    let masks = match &cfg.data.masks {
        Some(dir) => MaskSource::from_corpus_dir(dir)?,
        None => MaskSource::Generated,
    };
    let t = &cfg.train;
    let steps = t.total_steps(pairs.len());
    let data = Arc::new(TrainingData::new(pairs, masks, t.crop, t.batch_size, cfg.seed)?);
    let model = InpaintingModel::<f32>::new(&cfg.model, cfg.seed)?;
    let mut extractor = ConvPyramid::seeded(t.extractor_seed)?;
    if let Some(w) = &cfg.data.extractor_weights {
        extractor.load_weights(w)?;
    }
    std::fs::create_dir_all(&out)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("loss_log.csv"))?);
    writeln!(log, "step,l1,perceptual,style,joint")?;
    info!("training {} parameters for {steps} steps", model.params.total_elements());
    let mut trainer = Trainer::new(model, extractor, t.learning_rate);
    let mut batches = Prefetcher::spawn(Arc::clone(&data), 0, steps, t.workers, t.prefetch);
    let mut first = None;
    let mut last = None;
    for step in 1..=steps {
        let batch = batches.next_batch()?;
        let l = trainer.step(&batch)?;
        writeln!(log, "{step},{},{},{},{}", l.l1, l.perceptual, l.style, l.joint)?;
        first.get_or_insert(l);
        last = Some(l);
        if step % t.checkpoint_every == 0 && step != steps {
            trainer.model.save(&out.join(format!("checkpoint_{step:06}.trkt")))?;
            log.flush()?;
            info!("step {step}: joint {:.5}", l.joint);
        }
    }
    log.flush()?;
    trainer.model.save(&out.join("final.trkt"))?;
    if let (Some(f), Some(l)) = (first, last) {
        println!("trained {steps} steps: joint {:.5} -> {:.5}, l1 {:.5} -> {:.5}", f.joint, l.joint, f.l1, l.l1);
    }
    println!("checkpoint: {}", out.join("final.trkt").display());
    Ok(())
}

pub fn cmd_infer(
    checkpoint: &Path,
    input: &Path,
    mask: &Path,
    reference: &Path,
    out: &Path,
    grid: Option<&Path>,
    gt: Option<&Path>,
) -> CliResult {
    let model = InpaintingModel::<f32>::load(checkpoint)?;
    let (img, refimg, gray) = (load_rgb(input)?, load_rgb(reference)?, load_gray(mask)?);
    if img.dimensions() != refimg.dimensions() || img.dimensions() != gray.dimensions() {
        return usage(format!(
            "input {:?}, reference {:?} and mask {:?} must have equal sizes",
            img.dimensions(),
            refimg.dimensions(),
            gray.dimensions()
        ));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let image = rgb_to_tensor::<f32>(&img).reshape(&[1, 3, h, w])?;
    let reference_t = rgb_to_tensor::<f32>(&refimg).reshape(&[1, 3, h, w])?;
    let mask_t = gray_to_mask::<f32>(&gray).reshape(&[1, 1, h, w])?;
    let composite = model.inpaint(&image, &mask_t, &reference_t)?;
    let result = tensor_to_rgb(&composite.reshape(&[3, h, w])?)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_rgb(&result, out)?;
    if let Some(grid_path) = grid {
        let masked = tensor_to_rgb(&apply_mask(&image, &mask_t)?.reshape(&[3, h, w])?)?;
        let truth = gt.map(load_rgb).transpose()?;
        let mut panes = vec![&refimg, &masked, &result];
        if let Some(t) = &truth {
            panes.push(t);
        }
        save_rgb(&side_by_side(&panes), grid_path)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_eval(
    pred: &Path,
    gt: &Path,
    masks: &Path,
    out: Option<&Path>,
    workers: usize,
    extractor_weights: Option<&Path>,
    seed: u64,
) -> CliResult {
    for d in [pred, gt, masks] {
        require_dir(d)?;
    }
    let mut extractor = ConvPyramid::<f32>::seeded(seed)?;
    if let Some(w) = extractor_weights {
        extractor.load_weights(w)?;
    }
    let run = evaluate_run(pred, gt, masks, &extractor, workers)?;
    let text = run.report.to_text();
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), &text)?;
        std::fs::write(dir.join("report.json"), run.report.to_json()?)?;
        std::fs::write(dir.join("per_image.csv"), scores_to_csv(&run.scores))?;
    }
    if run.report.warning_status() != 0 {
        eprintln!("warning: {} file(s) excluded", run.report.excluded.len());
    }
    Ok(())
}
