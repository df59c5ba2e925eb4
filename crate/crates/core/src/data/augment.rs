//! Axis-aligned rotation augmentation.

use rand::Rng;

/// Rotates a square `side × side` raster by `quarter_turns × 90°`
/// counter-clockwise.
pub fn rot90(data: &[f32], side: usize, quarter_turns: usize) -> Vec<f32> {
    debug_assert_eq!(data.len(), side * side);
    let n = side;
    let mut out = vec![0.0; data.len()];
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = match quarter_turns % 4 {
                0 => (y, x),
                1 => (x, n - 1 - y),
                2 => (n - 1 - y, n - 1 - x),
                _ => (n - 1 - x, y),
            };
            out[y * n + x] = data[sy * n + sx];
        }
    }
    out
}

/// With probability `prob`, rotates by a uniformly chosen 90°, 180° or 270°.
/// Returns the number of quarter turns applied (0 when left unchanged).
pub fn rotate_augment<R: Rng>(patch: &mut [f32], side: usize, prob: f64, rng: &mut R) -> usize {
    if prob <= 0.0 || !rng.random_bool(prob.min(1.0)) {
        return 0;
    }
    let k = rng.random_range(1..4);
    let rotated = rot90(patch, side, k);
    patch.copy_from_slice(&rotated);
    k
}
