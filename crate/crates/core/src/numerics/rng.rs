use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// The single RNG type threaded through every stochastic routine.
pub type DrpRng = Xoshiro256PlusPlus;

/// Seeds a generator; the seed is expanded with SplitMix64.
pub fn rng_from_seed(seed: u64) -> DrpRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Derives an independent sub-seed for a named stream of a parent seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
