//! Synthetic digit corpus: template glyphs with seeded jitter and noise.
//!
//! Each sample starts from a 7x7 stroke template upscaled to 28x28, then
//! gets a random +-2 pixel translation, per-pixel stroke intensity jitter,
//! and low-level background noise. Values are generated on the byte grid so
//! an IDX export round trips exactly.

use rand::Rng;

use super::{DataError, Dataset, IMAGE_SIDE, NUM_CLASSES};
use crate::nn::Tensor;
use crate::rng::derive_rng;

const GLYPH_SIDE: usize = 7;
const UPSCALE: usize = IMAGE_SIDE / GLYPH_SIDE;

/// 7x7 stroke templates for the digits 0..=9. `#` marks a stroke cell.
const GLYPHS: [[&str; GLYPH_SIDE]; NUM_CLASSES] = [
    [
        ".#####.", "#.....#", "#.....#", "#.....#", "#.....#", "#.....#", ".#####.",
    ],
    [
        "...#...", "..##...", "...#...", "...#...", "...#...", "...#...", "..###..",
    ],
    [
        ".#####.", "#.....#", "......#", "..###..", ".#.....", "#......", "#######",
    ],
    [
        ".#####.", "#.....#", "......#", "..####.", "......#", "#.....#", ".#####.",
    ],
    [
        "....##.", "...#.#.", "..#..#.", ".#...#.", "#######", ".....#.", ".....#.",
    ],
    [
        "#######", "#......", "#......", "######.", "......#", "#.....#", ".#####.",
    ],
    [
        ".#####.", "#......", "#......", "######.", "#.....#", "#.....#", ".#####.",
    ],
    [
        "#######", "......#", ".....#.", "....#..", "...#...", "..#....", "..#....",
    ],
    [
        ".#####.", "#.....#", "#.....#", ".#####.", "#.....#", "#.....#", ".#####.",
    ],
    [
        ".#####.", "#.....#", "#.....#", ".######", "......#", "......#", ".#####.",
    ],
];

/// Generate `n` class-balanced synthetic digits (class of sample i is
/// i mod 10). Identical seeds produce bit-identical datasets.
pub fn synth_digits(n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n < NUM_CLASSES {
        return Err(DataError::Invalid(format!(
            "need at least {NUM_CLASSES} samples for one per class, got {n}"
        )));
    }
    let mut rng = derive_rng(seed, "synth", &[]);
    let mut data = Vec::with_capacity(n * IMAGE_SIDE * IMAGE_SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % NUM_CLASSES;
        let mut img = [0u8; IMAGE_SIDE * IMAGE_SIDE];
        let dx = rng.gen_range(-2i32..=2);
        let dy = rng.gen_range(-2i32..=2);
        let base: u8 = rng.gen_range(190..=255);
        for v in img.iter_mut() {
            *v = rng.gen_range(0..=25);
        }
        for (gy, row) in GLYPHS[class].iter().enumerate() {
            for (gx, cell) in row.bytes().enumerate() {
                if cell != b'#' {
                    continue;
                }
                for sy in 0..UPSCALE {
                    for sx in 0..UPSCALE {
                        // One intensity draw per rendered pixel, consumed
                        // even when the pixel lands outside the frame, so
                        // the stream stays aligned per sample.
                        let value = base - rng.gen_range(0..=40);
                        let y = (gy * UPSCALE + sy) as i32 + dy;
                        let x = (gx * UPSCALE + sx) as i32 + dx;
                        if (0..IMAGE_SIDE as i32).contains(&y)
                            && (0..IMAGE_SIDE as i32).contains(&x)
                        {
                            let at = y as usize * IMAGE_SIDE + x as usize;
                            img[at] = img[at].max(value);
                        }
                    }
                }
            }
        }
        data.extend(img.iter().map(|&b| b as f64 / 255.0));
        labels.push(class);
    }
    let images = Tensor::from_vec(&[n, IMAGE_SIDE, IMAGE_SIDE], data)
        .expect("generated rows match the shape");
    Dataset::new(images, labels)
}
