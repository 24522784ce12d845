//! Fixtures shared by the criterion benches in `benches/`.

use solidtex::Tensor4;

/// Deterministic smooth-ish RGB test image, `n` x `n`.
pub fn test_image(n: usize) -> Tensor4 {
    Tensor4::from_fn(3, [n, n, 1], |c, [i, j, _]| {
        let mut h = (i as u64) << 32 | (j as u64) << 8 | c as u64;
        h = (h ^ (h >> 31)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        0.25 + 0.5 * ((h >> 40) as f32 / (1u64 << 24) as f32)
    })
}
