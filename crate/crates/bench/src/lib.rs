//! Fixtures shared by the benchmarks.

use masterface::SynthSpec;

/// The 50-identity reference gallery from `configs/reference.json`.
pub fn reference_spec() -> SynthSpec {
    SynthSpec {
        identities: 50,
        images_per_identity: 4,
        width: 32,
        height: 32,
        identity_scale: 0.03,
        intra_noise: 0.02,
        seed: 101,
        basis_size: 32,
        group_weights: vec![0.8, 0.2],
        group_scale: 0.12,
    }
}
