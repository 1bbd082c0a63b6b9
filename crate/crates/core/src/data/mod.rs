//! Image I/O, mask protocol and reference-pair mining.

pub mod image_io;
pub mod keypoints;
pub mod mask;
pub mod mining;
pub mod synth;

pub use image_io::{load_gray, load_rgb, rgb_to_tensor, save_gray, save_rgb, tensor_to_rgb};
pub use keypoints::{detect_and_describe, DetectorConfig, Keypoint};
pub use mask::{apply_mask, classify_mask_ratio, gen_corpus, gen_irregular_mask, Mask, MaskSpec, RatioBin};
pub use mining::{crop_pair, match_knn, mine_directories, mine_pair, subdivide, ImagePairRecord, MatchConfig, MatchFilter, MiningConfig};
