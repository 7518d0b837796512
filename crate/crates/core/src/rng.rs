//! Seed discipline: every stochastic component draws from a ChaCha stream
//! derived from the run seed and a fixed label.
//!
//! Labels in use: `env`, `collect`, `vqvae.init`, `vqvae.batches`, `bc.init`,
//! `bc.batches`, `bc.masks`, `eval`, `anchors`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for `label` under `seed` (FNV-1a over the label, mixed with the seed).
pub fn substream(seed: u64, label: &str) -> Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Rng::seed_from_u64(splitmix(seed ^ h))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Serializable snapshot: 32-byte seed, stream id, word position.
pub fn state_bytes(rng: &Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend(rng.get_stream().to_le_bytes());
    out.extend(rng.get_word_pos().to_le_bytes());
    out
}

pub fn from_state_bytes(bytes: &[u8]) -> Option<Rng> {
    if bytes.len() != 32 + 8 + 16 {
        return None;
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&bytes[..32]);
    let mut rng = Rng::from_seed(seed);
    rng.set_stream(u64::from_le_bytes(bytes[32..40].try_into().ok()?));
    rng.set_word_pos(u128::from_le_bytes(bytes[40..56].try_into().ok()?));
    Some(rng)
}
