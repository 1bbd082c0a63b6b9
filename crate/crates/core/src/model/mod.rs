//! The assembled inpainting network and its persistence.

mod config;
mod network;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, Variant};
pub use network::{
    Decoder, EncoderOutput, EncoderScaleState, InpaintOutput, RefPa, RefPaOutput, RefPt, RefPtOutput, Stage,
    InpaintNet,
};

use crate::error::Result;
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore, Scalar, Tape, Tensor};

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct InpaintingModel<T> {
    pub net: InpaintNet,
    pub params: ParamStore<T>,
}

/// Path of the model config written next to a checkpoint.
pub fn config_path_for(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("cfg")
}

impl<T: Scalar> InpaintingModel<T> {
    /// Freshly initialized parameters from a seed.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = InpaintNet::new(cfg, &mut params, &mut rng)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    /// Runs inference without recording gradients. Inputs are `[N,3,H,W]`
    /// image and reference in [−1, 1] and a binary `[N,1,H,W]` mask; returns
    /// the composited output.
    pub fn inpaint(&self, image: &Tensor<T>, mask: &Tensor<T>, reference: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let i = tape.constant(image.clone());
        let m = tape.constant(mask.clone());
        let r = tape.constant(reference.clone());
        let out = self.net.inpaint(&mut tape, &p, i, m, r)?;
        Ok(tape.value(out.composite).clone())
    }

    /// Like [`Self::inpaint`] but returns the raw generated image as well.
    pub fn inpaint_full(
        &self,
        image: &Tensor<T>,
        mask: &Tensor<T>,
        reference: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let i = tape.constant(image.clone());
        let m = tape.constant(mask.clone());
        let r = tape.constant(reference.clone());
        let out = self.net.inpaint(&mut tape, &p, i, m, r)?;
        Ok((tape.value(out.generated).clone(), tape.value(out.composite).clone()))
    }

    /// Writes the checkpoint and the `.cfg` file beside it.
    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        write_checkpoint(&self.params, BufWriter::new(File::create(checkpoint)?))?;
        std::fs::write(config_path_for(checkpoint), self.net.cfg.to_config_string())?;
        Ok(())
    }

    /// Loads a checkpoint using the `.cfg` file beside it.
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let cfg = ModelConfig::from_config_str(&std::fs::read_to_string(config_path_for(checkpoint))?)?;
        Self::load_with_config(checkpoint, &cfg)
    }

    pub fn load_with_config(checkpoint: &Path, cfg: &ModelConfig) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        let records = read_checkpoint(BufReader::new(File::open(checkpoint)?))?;
        model.params.load_records(records)?;
        Ok(model)
    }
}
