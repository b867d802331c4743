//! Small shared helpers: seed derivation and serde adapters.

use std::time::Duration;

/// Mixes a stage label into a master seed (splitmix64 finalizer), so every
/// pipeline stage draws from an independent, reproducible stream.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = master ^ 0x9e37_79b9_7f4a_7c15;
    for b in label.bytes() {
        h = mix(h ^ b as u64);
    }
    mix(h)
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `Duration` as (fractional) seconds.
pub mod secs {
    use super::Duration;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}
