//! Inputs shared by the benchmarks in `benches/`.

use toonpaint_core::{RasterImage, VoteTally};

/// Smooth RGB gradient with a few flat discs, `size` pixels square.
pub fn cartoon(size: usize) -> RasterImage {
    let mut img = RasterImage::filled(size, size, 3, 0.0).expect("nonzero size");
    let s = size as f32;
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f32 / s, y as f32 / s);
            let disc = ((u - 0.4).powi(2) + (v - 0.5).powi(2)).sqrt() < 0.2;
            let rgb = if disc { [0.9, 0.5, 0.1] } else { [0.3 + 0.5 * u, 0.4 + 0.4 * v, 0.8 - 0.3 * u] };
            for (c, value) in rgb.into_iter().enumerate() {
                img.set(y, x, c, value);
            }
        }
    }
    img
}

/// `images x algorithms` tallies with counts that vary per cell.
pub fn tallies(images: usize, algorithms: usize) -> Vec<VoteTally> {
    (0..images)
        .flat_map(|i| {
            (0..algorithms).map(move |a| VoteTally {
                image_id: format!("img{i}"),
                algorithm_id: format!("alg{a}"),
                n_like: ((i * 7 + a * 13) % 29) as u64,
                n_dislike: ((i * 11 + a * 5) % 23) as u64,
            })
        })
        .collect()
}
