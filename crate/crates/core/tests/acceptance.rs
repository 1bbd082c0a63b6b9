//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `cargo test --release --test acceptance` runs all ten; pass criterion
//! numbers (`-- 2 7 9`) to run a subset.

mod common;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use transref::data::image_io::{quantize, rgb_to_tensor};
use transref::data::mask::{classify_mask_ratio, gen_corpus, gen_irregular_mask, RatioBin};
use transref::data::mining::{mine_directories, MiningConfig};
use transref::data::synth::Scene;
use transref::losses::ConvPyramid;
use transref::metrics::{frechet_distance, psnr, ssim, SsimConfig};
use transref::model::{InpaintingModel, ModelConfig, Variant};
use transref::train::{Batch, Trainer};

type Outcome = (bool, String);

const GRAD_SEEDS: u64 = 20;
const OVERFIT_STEPS: usize = 500;
const ABLATION_SEEDS: u64 = 5;

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let (mut worst, mut worst_case, mut probes, mut failures) = (0.0f64, "", 0, Vec::new());
    for case in common::all_cases() {
        match common::run_case(&case, GRAD_SEEDS) {
            Ok(r) => {
                probes += r.probes;
                if r.max_rel_error > worst {
                    worst = r.max_rel_error;
                    worst_case = case.name;
                }
                if r.max_rel_error >= 1e-5 {
                    failures.push(case.name);
                }
            }
            Err(e) => return (false, format!("{}: {e}", case.name)),
        }
    }
    let elapsed = start.elapsed();
    let ok = failures.is_empty() && elapsed < Duration::from_secs(300);
    let cases = common::all_cases().len();
    let mut msg = format!(
        "{cases} cases x {GRAD_SEEDS} instances, {probes} probes, worst rel err {worst:.2e} ({worst_case}), {:.0?}",
        elapsed
    );
    if !failures.is_empty() {
        msg.push_str(&format!("; over tolerance: {}", failures.join(", ")));
    }
    (ok, msg)
}

fn deform_oracles() -> Outcome {
    let (zero, integer, fractional) = common::deform_oracle_errors(GRAD_SEEDS);
    (
        zero <= 1e-6 && integer <= 1e-6 && fractional <= 1e-5,
        format!("zero {zero:.1e}, integer {integer:.1e}, fractional {fractional:.1e}"),
    )
}

fn attention_identities() -> Outcome {
    let (rows, reduce, naive) = common::attention_identity_errors(GRAD_SEEDS);
    (
        rows <= 1e-6 && reduce <= 1e-6,
        format!("row sums {rows:.1e}, reference vs self {reduce:.1e}, hand-built {naive:.1e}"),
    )
}

fn end_to_end() -> Outcome {
    match common::end_to_end_256(1) {
        Ok(r) => {
            let sizes: Vec<(usize, usize)> = r.grids.iter().map(|&(_, h, w)| (h, w)).collect();
            let ok = sizes == [(64, 64), (32, 32), (16, 16), (8, 8)]
                && r.output_shape == [1, 3, 256, 256]
                && r.known_preserved
                && r.identity_round_trip;
            (
                ok,
                format!(
                    "grids {sizes:?}, output {:?}, known pixels {}, empty mask {}",
                    r.output_shape,
                    if r.known_preserved { "exact" } else { "changed" },
                    if r.identity_round_trip { "bit-exact" } else { "differs" }
                ),
            )
        }
        Err(e) => (false, e.to_string()),
    }
}

struct Overfit {
    joint_ratio: f64,
    psnr_before: f64,
    psnr_after: f64,
    elapsed: Duration,
}

fn masked_psnr(a: &[f32], b: &[f32], mask: &[f32]) -> f64 {
    let hw = mask.len();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for i in 0..a.len() {
        if mask[i % hw] > 0.5 {
            x.push(f64::from(quantize(a[i])));
            y.push(f64::from(quantize(b[i])));
        }
    }
    psnr(&x, &y, 255.0).unwrap_or(f64::NAN)
}

fn overfit(variant: Variant, seed: u64) -> transref::Result<Overfit> {
    let size = 64;
    let scene = Scene::new(size, size, 8, 100 + seed);
    let image = rgb_to_tensor::<f32>(&scene.view(0, 0, size, size)).reshape(&[1, 3, 64, 64])?;
    let reference = rgb_to_tensor::<f32>(&scene.view(3, 2, size, size)).reshape(&[1, 3, 64, 64])?;
    let bin = RatioBin::new(4).expect("bin 4 exists");
    let mask = gen_irregular_mask(bin, false, seed, 64, 64)?.mask.to_tensor::<f32>().reshape(&[1, 1, 64, 64])?;
    let model = InpaintingModel::<f32>::new(&ModelConfig::toy().with_variant(variant), seed)?;
    let mut trainer = Trainer::new(model, ConvPyramid::seeded(7)?, 2e-4);
    let batch = Batch { image: image.clone(), mask: mask.clone(), reference: reference.clone() };
    let score = |t: &Trainer<f32>| -> transref::Result<f64> {
        let (generated, _) = t.model.inpaint_full(&image, &mask, &reference)?;
        Ok(masked_psnr(generated.data(), image.data(), mask.data()))
    };
    let psnr_before = score(&trainer)?;
    let start = Instant::now();
    let initial = trainer.evaluate(&batch)?.joint;
    for _ in 0..OVERFIT_STEPS {
        trainer.step(&batch)?;
    }
    let last = trainer.evaluate(&batch)?.joint;
    let elapsed = start.elapsed();
    Ok(Overfit { joint_ratio: last / initial, psnr_before, psnr_after: score(&trainer)?, elapsed })
}

fn toy_overfit(run: &transref::Result<Overfit>) -> Outcome {
    match run {
        Ok(r) => {
            let gain = r.psnr_after - r.psnr_before;
            (
                r.joint_ratio <= 0.10 && gain >= 10.0 && r.elapsed <= Duration::from_secs(600),
                format!(
                    "{OVERFIT_STEPS} steps: joint at {:.1}% of initial, masked PSNR {:.2} -> {:.2} dB (+{gain:.2}), {:.0?}",
                    100.0 * r.joint_ratio,
                    r.psnr_before,
                    r.psnr_after,
                    r.elapsed
                ),
            )
        }
        Err(e) => (false, e.to_string()),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ablation(full_seed_1: Option<&Overfit>) -> Outcome {
    let mut medians = Vec::new();
    for variant in [Variant::Full, Variant::RefPaOnly, Variant::Basic] {
        let mut scores = Vec::new();
        for seed in 1..=ABLATION_SEEDS {
            let reused = full_seed_1.filter(|_| variant == Variant::Full && seed == 1).map(|r| r.psnr_after);
            match reused.map(Ok).unwrap_or_else(|| overfit(variant, seed).map(|r| r.psnr_after)) {
                Ok(p) => scores.push(p),
                Err(e) => return (false, format!("{variant} seed {seed}: {e}")),
            }
        }
        medians.push((variant, median(scores)));
    }
    let ok = medians[0].1 >= medians[1].1 && medians[1].1 >= medians[2].1;
    let text: Vec<String> = medians.iter().map(|(v, m)| format!("{v} {m:.2}")).collect();
    (ok, format!("median masked PSNR over {ABLATION_SEEDS} seeds: {}", text.join(", ")))
}

fn loss_arithmetic() -> Outcome {
    match common::loss_arithmetic(5) {
        Ok(r) => (
            r.joint_exact && r.term_error < 1e-12 && r.identical_max == 0.0 && r.constant_l1_exact,
            format!(
                "terms within {:.1e}, weighted sum {}, identical inputs max {:e}",
                r.term_error,
                if r.joint_exact { "exact" } else { "inexact" },
                r.identical_max
            ),
        ),
        Err(e) => (false, e.to_string()),
    }
}

fn mask_protocol() -> Outcome {
    let corpus = match gen_corpus(2000, 0, 256, 256) {
        Ok(c) => c,
        Err(e) => return (false, e.to_string()),
    };
    let (mut per_bin, mut damaged, mut agree, mut boundary_ok) = ([0usize; 6], [0usize; 6], 0, 0);
    for spec in &corpus {
        let b = spec.ratio_bin.index();
        per_bin[b] += 1;
        damaged[b] += usize::from(spec.damaged_boundary);
        agree += usize::from(classify_mask_ratio(&spec.mask).is_ok_and(|c| c == spec.ratio_bin));
        boundary_ok += usize::from(spec.mask.touches_boundary() == spec.damaged_boundary);
    }
    let ok = corpus.len() == 12_000
        && per_bin.iter().all(|&n| n == 2000)
        && damaged.iter().all(|&n| n == 1000)
        && agree == corpus.len()
        && boundary_ok == corpus.len();
    (
        ok,
        format!(
            "{} masks, per bin {per_bin:?}, damaged {damaged:?}, classify agreement {:.2}%, boundary flags {:.2}%",
            corpus.len(),
            100.0 * agree as f64 / corpus.len() as f64,
            100.0 * boundary_ok as f64 / corpus.len() as f64
        ),
    )
}

fn metric_closed_forms() -> transref::Result<Outcome> {
    let zeros = vec![0.0; 300];
    let full = vec![255.0; 300];
    let zero_db = psnr(&zeros, &full, 255.0)?;
    let tenth = vec![25.5; 300];
    let twenty_db = psnr(&zeros, &tenth, 255.0)?;

    let scene = Scene::new(48, 40, 0, 3).view(0, 0, 48, 40);
    let lum = transref::metrics::luminance(&scene);
    let self_ssim = ssim(&lum, &lum, 48, 40, &SsimConfig::default())?;

    let mut fd_err = 0.0f64;
    for (m1, s1, m2, s2) in [(0.0, 1.0, 0.0, 1.0), (1.5, 2.0, -0.5, 0.5), (3.0, 0.1, 2.0, 4.0), (-7.0, 3.0, 5.0, 3.0)] {
        let fd = frechet_distance(
            &DVector::from_element(1, m1),
            &DMatrix::from_element(1, 1, s1 * s1),
            &DVector::from_element(1, m2),
            &DMatrix::from_element(1, 1, s2 * s2),
        )?;
        let expected: f64 = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
        fd_err = fd_err.max((fd - expected).abs());
    }
    Ok((
        zero_db == 0.0 && twenty_db == 20.0 && (self_ssim - 1.0).abs() <= 1e-12 && fd_err <= 1e-9,
        format!("PSNR {zero_db} dB and {twenty_db} dB, SSIM(x,x) = {self_ssim}, 1-D Frechet error {fd_err:.1e}"),
    ))
}

fn mining() -> transref::Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::create_dir_all(&a)?;
    std::fs::create_dir_all(&b)?;
    let mut shifts = std::collections::HashMap::new();
    for seed in 0..8u64 {
        let (dx, dy) = ((seed as i32 * 5) % 25 - 12, (seed as i32 * 7) % 25 - 12);
        let scene = Scene::new(768, 768, 16, seed);
        let name = format!("scene{seed}.png");
        transref::data::image_io::save_rgb(&scene.view(0, 0, 768, 768), &a.join(&name))?;
        transref::data::image_io::save_rgb(&scene.view(-dx, -dy, 768, 768), &b.join(&name))?;
        shifts.insert(name, (dx, dy));
    }
    let cfg = MiningConfig::default();
    let first = mine_directories(&a, &b, &dir.path().join("run1"), &cfg)?;
    mine_directories(&a, &b, &dir.path().join("run2"), &cfg)?;
    let same = std::fs::read(dir.path().join("run1/manifest.jsonl"))? == std::fs::read(dir.path().join("run2/manifest.jsonl"))?;
    let mut worst = 0i32;
    for r in &first.records {
        let (dx, dy) = shifts[&r.source_input];
        let ex = r.cx_ref as i32 - r.cx_in as i32 - dx;
        let ey = r.cy_ref as i32 - r.cy_in as i32 - dy;
        worst = worst.max(ex.abs()).max(ey.abs());
    }
    let total = first.records.len() + first.rejected.len();
    Ok((
        !first.records.is_empty() && worst <= 2 && same,
        format!(
            "{} of {total} sub-image pairs accepted, worst center error {worst} px, manifest {}",
            first.records.len(),
            if same { "identical across runs" } else { "differs across runs" }
        ),
    ))
}

fn flatten(r: transref::Result<Outcome>) -> Outcome {
    r.unwrap_or_else(|e| (false, e.to_string()))
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut failed = 0;
    let mut report = |n: u32, title: &str, (ok, detail): Outcome| {
        failed += usize::from(!ok);
        println!("{} {n:>2} {title}: {detail}", if ok { "PASS" } else { "FAIL" });
    };
    if run(1) {
        report(1, "gradient suite", gradient_suite());
    }
    if run(2) {
        report(2, "deformable convolution oracles", deform_oracles());
    }
    if run(3) {
        report(3, "attention identities", attention_identities());
    }
    if run(4) {
        report(4, "end-to-end contracts", end_to_end());
    }
    let overfit_run = (run(5) || run(6)).then(|| overfit(Variant::Full, 1));
    if run(5) {
        report(5, "toy overfit", toy_overfit(overfit_run.as_ref().expect("run above")));
    }
    if run(6) {
        report(6, "ablation ordering", ablation(overfit_run.as_ref().and_then(|r| r.as_ref().ok())));
    }
    if run(7) {
        report(7, "loss arithmetic", loss_arithmetic());
    }
    if run(8) {
        report(8, "mask protocol", mask_protocol());
    }
    if run(9) {
        report(9, "metric closed forms", flatten(metric_closed_forms()));
    }
    if run(10) {
        report(10, "pair mining", flatten(mining()));
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
