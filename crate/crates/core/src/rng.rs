//! Keyed random substreams.
//!
//! Every consumer draws from its own stream keyed by `(seed, step, consumer)`,
//! so switching a component off never shifts another component's draws and a
//! run can resume at any step from the seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Identity of a random-number consumer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Consumer {
    HrSampler = 1,
    LrSampler = 2,
    KernelLatent = 3,
    NoiseLatent = 4,
    InitKernelNet = 10,
    InitNoiseNet = 11,
    InitDiscriminator = 12,
    InitSrNet = 13,
    InitHrDiscriminator = 14,
    Gallery = 20,
    Oracle = 30,
    Corpus = 31,
    Synthesize = 32,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `consumer` at `step` of a run seeded with `seed`.
pub fn substream(seed: u64, step: u64, consumer: Consumer) -> StreamRng {
    let key = splitmix(splitmix(splitmix(seed) ^ step) ^ consumer as u64);
    ChaCha8Rng::seed_from_u64(key)
}
