//! Generator for offline synthetic cloud scenes: soft-edged bright blobs
//! over a textured four-band background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::raster::{BandId, BandStack, MaskRaster, CLEAR, CLOUD};
use crate::seed::{stream, sub_seed};

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub id: String,
    pub stack: BandStack,
    pub mask: MaskRaster,
    /// Cloud opacity in [0, 1]; the mask is `opacity > 0.5`.
    pub opacity: Vec<f32>,
}

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    weight: f64,
}

/// `count` scenes of `size`×`size` pixels, reproducible from `seed`.
/// Scene `i` depends only on `seed` and `i`.
pub fn generate(seed: u64, count: usize, size: usize, prefix: &str) -> Result<Vec<SyntheticScene>> {
    let base = sub_seed(seed, stream::SYNTHETIC);
    (0..count)
        .map(|i| scene(base.wrapping_add(i as u64), size, format!("{prefix}{i:03}")))
        .collect()
}

fn scene(seed: u64, size: usize, id: String) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;

    // background: per-band level plus a few oriented waves
    let levels: Vec<f64> = (0..4).map(|b| rng.random_range(0.05..0.2) + 0.1 * (b == 3) as u8 as f64).collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(2.0..8.0) / s,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.06),
            )
        })
        .collect();

    let blobs: Vec<Blob> = (0..rng.random_range(1..=4))
        .map(|_| Blob {
            cy: rng.random_range(0.0..s),
            cx: rng.random_range(0.0..s),
            ry: rng.random_range(0.1..0.3) * s,
            rx: rng.random_range(0.1..0.3) * s,
            weight: rng.random_range(0.8..1.6),
        })
        .collect();
    let brightness: Vec<f64> = (0..4).map(|_| rng.random_range(0.6..0.9)).collect();

    let n = size * size;
    let mut opacity = vec![0f32; n];
    let mut data = vec![0f32; 4 * n];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64, x as f64);
            let field: f64 = blobs
                .iter()
                .map(|b| {
                    let d = ((fy - b.cy) / b.ry).powi(2) + ((fx - b.cx) / b.rx).powi(2);
                    b.weight * (-d).exp()
                })
                .sum();
            // smooth ramp centred on field = 0.5
            let a = 1.0 / (1.0 + (-(field - 0.5) * 12.0).exp());
            let p = y * size + x;
            opacity[p] = a as f32;
            let texture: f64 = waves
                .iter()
                .map(|&(theta, freq, phase, amp)| {
                    amp * (std::f64::consts::TAU * freq * (fx * theta.cos() + fy * theta.sin()) + phase).sin()
                })
                .sum();
            for b in 0..4 {
                let noise = rng.random_range(-0.01..0.01);
                let bg = levels[b] + texture;
                data[b * n + p] = ((1.0 - a) * bg + a * brightness[b] + noise) as f32;
            }
        }
    }
    let labels = opacity.iter().map(|&a| if a > 0.5 { CLOUD } else { CLEAR }).collect();
    Ok(SyntheticScene {
        id,
        stack: BandStack::new(BandId::rgb_nir(), size, size, data)?,
        mask: MaskRaster::binary(size, size, labels)?,
        opacity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::encode_band_stack;

    #[test]
    fn deterministic_and_mixed() {
        let a = generate(7, 3, 32, "s").unwrap();
        let b = generate(7, 3, 32, "s").unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(encode_band_stack(&x.stack).unwrap(), encode_band_stack(&y.stack).unwrap());
            assert_eq!(x.mask, y.mask);
        }
        let c = generate(8, 1, 32, "s").unwrap();
        assert_ne!(a[0].mask.data(), c[0].mask.data());
        let cloud: usize = a.iter().map(|s| s.mask.data().iter().filter(|&&v| v == CLOUD).count()).sum();
        assert!(cloud > 0 && cloud < 3 * 32 * 32);
    }
}
