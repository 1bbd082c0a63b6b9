//! Optimization loop and the training-batch pipeline.

use std::path::PathBuf;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use image::imageops::{crop_imm, resize, FilterType};
use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::image_io::{load_gray, rgb_to_tensor};
use crate::data::mask::{gen_irregular_mask, scan_mask_corpus, RatioBin};
use crate::error::{contract, Error, Result};
use crate::losses::{joint_loss, ConvPyramid, LossBreakdown, LossWeights};
use crate::model::InpaintingModel;
use crate::tensor::{Adam, Scalar, Tape, Tensor};

/// One training batch: ground truth `[N,3,H,W]`, mask `[N,1,H,W]`, reference `[N,3,H,W]`.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
    pub reference: Tensor<T>,
}

pub struct Trainer<T> {
    pub model: InpaintingModel<T>,
    pub extractor: ConvPyramid<T>,
    pub optimizer: Adam<T>,
    pub weights: LossWeights,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: InpaintingModel<T>, extractor: ConvPyramid<T>, learning_rate: f64) -> Self {
        Self { model, extractor, optimizer: Adam::new(learning_rate), weights: LossWeights::default() }
    }

    /// Forward, backward and one Adam update. Returns the losses measured
    /// before the update.
    pub fn step(&mut self, batch: &Batch<T>) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, true);
        let image = tape.constant(batch.image.clone());
        let mask = tape.constant(batch.mask.clone());
        let reference = tape.constant(batch.reference.clone());
        let out = self.model.net.inpaint(&mut tape, &p, image, mask, reference)?;
        let loss = joint_loss(&mut tape, &self.extractor, out.generated, image, self.weights)?;
        let grads = tape.backward(loss.loss)?;
        let grads = self.model.params.collect_grads(&p, &grads);
        drop(tape);
        self.optimizer.step(&mut self.model.params, &grads)?;
        Ok(loss.breakdown)
    }

    /// Losses of the current parameters without updating them.
    pub fn evaluate(&self, batch: &Batch<T>) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, false);
        let image = tape.constant(batch.image.clone());
        let mask = tape.constant(batch.mask.clone());
        let reference = tape.constant(batch.reference.clone());
        let out = self.model.net.inpaint(&mut tape, &p, image, mask, reference)?;
        Ok(joint_loss(&mut tape, &self.extractor, out.generated, image, self.weights)?.breakdown)
    }
}

/// Where per-example masks come from.
#[derive(Clone, Debug)]
pub enum MaskSource {
    /// Fresh stroke masks from the generator.
    Generated,
    /// Files grouped by ratio bin (index = bin).
    Corpus(Vec<Vec<PathBuf>>),
}

impl MaskSource {
    pub fn from_corpus_dir(root: &std::path::Path) -> Result<Self> {
        let mut bins = vec![Vec::new(); RatioBin::COUNT];
        for (bin, path) in scan_mask_corpus(root)? {
            bins[bin.index()].push(path);
        }
        if bins.iter().all(Vec::is_empty) {
            return contract("mask corpus", format!("no bin directories with PNG files under {}", root.display()));
        }
        Ok(Self::Corpus(bins))
    }
}

/// In-memory image pairs plus the sampling rules for one training run.
/// Each example draws a pair, a crop offset shared by image and reference,
/// and a mask from a uniformly chosen ratio bin.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub pairs: Vec<(RgbImage, RgbImage)>,
    pub masks: MaskSource,
    pub crop: u32,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainingData {
    pub fn new(pairs: Vec<(RgbImage, RgbImage)>, masks: MaskSource, crop: u32, batch_size: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return contract("training data", "no image pairs");
        }
        for (i, (a, b)) in pairs.iter().enumerate() {
            for img in [a, b] {
                if img.width() < crop || img.height() < crop {
                    return contract("training data", format!("pair {i} is {}×{}, smaller than the {crop} crop", img.width(), img.height()));
                }
            }
        }
        Ok(Self { pairs, masks, crop, batch_size, seed })
    }

    fn mask(&self, rng: &mut ChaCha8Rng) -> Result<GrayImage> {
        let bin = RatioBin::new(rng.gen_range(0..RatioBin::COUNT)).unwrap_or(RatioBin::new(0).unwrap());
        let size = self.crop;
        match &self.masks {
            MaskSource::Generated => {
                let spec = gen_irregular_mask(bin, rng.gen_bool(0.5), rng.gen(), size as usize, size as usize)?;
                Ok(crate::data::image_io::mask_bits_to_gray(&spec.mask.bits, size as usize, size as usize))
            }
            MaskSource::Corpus(bins) => {
                let nonempty: Vec<&Vec<PathBuf>> = bins.iter().filter(|b| !b.is_empty()).collect();
                let files = if bins[bin.index()].is_empty() { nonempty[rng.gen_range(0..nonempty.len())] } else { &bins[bin.index()] };
                let gray = load_gray(&files[rng.gen_range(0..files.len())])?;
                Ok(if gray.dimensions() == (size, size) { gray } else { resize(&gray, size, size, FilterType::Nearest) })
            }
        }
    }

    /// Deterministic batch for `step`.
    pub fn batch(&self, step: usize) -> Result<Batch<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step as u64);
        let c = self.crop as usize;
        let (mut images, mut refs, mut masks) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..self.batch_size {
            let (a, b) = &self.pairs[rng.gen_range(0..self.pairs.len())];
            let x0 = rng.gen_range(0..=a.width().min(b.width()) - self.crop);
            let y0 = rng.gen_range(0..=a.height().min(b.height()) - self.crop);
            images.extend_from_slice(rgb_to_tensor::<f32>(&crop_imm(a, x0, y0, self.crop, self.crop).to_image()).data());
            refs.extend_from_slice(rgb_to_tensor::<f32>(&crop_imm(b, x0, y0, self.crop, self.crop).to_image()).data());
            masks.extend(self.mask(&mut rng)?.as_raw().iter().map(|&v| if v > 127 { 1.0f32 } else { 0.0 }));
        }
        let n = self.batch_size;
        Ok(Batch {
            image: Tensor::new(&[n, 3, c, c], images)?,
            mask: Tensor::new(&[n, 1, c, c], masks)?,
            reference: Tensor::new(&[n, 3, c, c], refs)?,
        })
    }
}

/// Background batch assembly. Worker `w` builds steps `w, w + workers, …`
/// into its own bounded queue; batches are consumed round-robin, so the
/// sequence is the same for any worker count.
pub struct Prefetcher {
    queues: Vec<Receiver<Result<Batch<f32>>>>,
    workers: Vec<JoinHandle<()>>,
    next: usize,
}

impl Prefetcher {
    pub fn spawn(data: Arc<TrainingData>, first_step: usize, steps: usize, workers: usize, depth: usize) -> Self {
        let workers_n = workers.max(1);
        let mut queues = Vec::with_capacity(workers_n);
        let mut handles = Vec::with_capacity(workers_n);
        for w in 0..workers_n {
            let (tx, rx) = sync_channel(depth.max(1));
            let data = Arc::clone(&data);
            handles.push(std::thread::spawn(move || {
                for step in (first_step + w..first_step + steps).step_by(workers_n) {
                    if tx.send(data.batch(step)).is_err() {
                        break;
                    }
                }
            }));
            queues.push(rx);
        }
        Self { queues, workers: handles, next: 0 }
    }

    pub fn next_batch(&mut self) -> Result<Batch<f32>> {
        let q = self.next % self.queues.len();
        self.next += 1;
        self.queues[q].recv().map_err(|_| Error::Worker("batch queue closed early".into()))?
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        self.queues.clear();
        for h in self.workers.drain(..) {
            let _ = h.join();
        }
    }
}
