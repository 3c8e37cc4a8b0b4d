#![allow(dead_code)]

pub mod oracles;

use pdm_core::config::Config;
use pdm_core::data::UnpairedDataset;
use pdm_core::synth::procedural_image;
use pdm_core::ImagePlane;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Small networks and crops so a step takes milliseconds.
pub fn tiny_config(overrides: &[(&str, &str)]) -> Config {
    let mut cfg = Config::default();
    let base = [
        ("scale", "2"),
        ("lr_crop", "8"),
        ("batch", "2"),
        ("kernel_fk", "4"),
        ("kernel_size", "5"),
        ("kernel_width", "8"),
        ("noise_width", "4"),
        ("disc_base_width", "4"),
        ("disc_num_stages", "2"),
        ("sr_num_blocks", "1"),
        ("sr_width", "4"),
        ("seed", "7"),
    ];
    for (k, v) in base.iter().chain(overrides) {
        cfg.set(k, v).unwrap();
    }
    cfg
}

pub fn images(count: usize, size: usize, seed: u64) -> Vec<ImagePlane> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| procedural_image(size, &mut rng).unwrap()).collect()
}

/// HR images and a blurred-down LR set of matching scale.
pub fn tiny_dataset(cfg: &Config) -> UnpairedDataset {
    let hr = images(3, 24, 1);
    let lr = images(3, 24, 2)
        .into_iter()
        .map(|im| im.crop(0, 0, 12, 12).unwrap())
        .collect();
    UnpairedDataset::from_images(hr, lr, cfg.dataset_config()).unwrap()
}
