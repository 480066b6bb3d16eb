//! Named seed streams. Every random quantity in the lab is drawn from a
//! ChaCha8 generator keyed by a base seed, a stream name and an index path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministically mixes a base seed with a stream name and indices.
pub fn derive_seed(base: u64, stream: &str, path: &[u64]) -> u64 {
    let mut h = splitmix64(base);
    for b in stream.bytes() {
        h = splitmix64(h ^ b as u64);
    }
    for &p in path {
        h = splitmix64(h ^ p.wrapping_mul(0xA24B_AED4_963E_E407));
    }
    h
}

pub fn rng_for(base: u64, stream: &str, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, path))
}


/// Serde adapter writing a `u64` seed as a decimal string, since TOML
/// integers are signed 64-bit. Plain integers are accepted on input.
pub mod seed_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Text(String),
        Int(i64),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Text(t) => t.parse().map_err(de::Error::custom),
            Repr::Int(i) => u64::try_from(i).map_err(de::Error::custom),
        }
    }
}
