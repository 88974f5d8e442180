//! Procedural toy datasets.
//!
//! `glyphs` draws handwritten-looking characters: a fixed set of prototype
//! characters (one to three cubic strokes each) is generated from the seed,
//! and every sample is a jittered, shifted rendition of one prototype.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::train::dataset::{Dataset, DatasetFormat};

type Pt = (f64, f64);

#[derive(Clone, Debug)]
struct Glyph {
    strokes: Vec<[Pt; 4]>,
}

fn bezier(p: &[Pt; 4], t: f64) -> Pt {
    let u = 1.0 - t;
    let (a, b, c, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        a * p[0].0 + b * p[1].0 + c * p[2].0 + d * p[3].0,
        a * p[0].1 + b * p[1].1 + c * p[2].1 + d * p[3].1,
    )
}

fn prototype(rng: &mut ChaCha8Rng) -> Glyph {
    let n = rng.gen_range(1..=3);
    let mut strokes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = [(0.0, 0.0); 4];
        for p in &mut s {
            *p = (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85));
        }
        strokes.push(s);
    }
    Glyph { strokes }
}

fn render(g: &Glyph, size: usize, jitter: f64, rng: &mut ChaCha8Rng, out: &mut [u8]) {
    let (dx, dy) = (rng.gen_range(-0.06..0.06), rng.gen_range(-0.06..0.06));
    let scale = rng.gen_range(0.9..1.1);
    let radius = rng.gen_range(0.9..1.4);
    let px = size as f64;
    for stroke in &g.strokes {
        let mut s = *stroke;
        for p in &mut s {
            p.0 = 0.5 + (p.0 - 0.5) * scale + dx + rng.gen_range(-jitter..jitter);
            p.1 = 0.5 + (p.1 - 0.5) * scale + dy + rng.gen_range(-jitter..jitter);
        }
        for i in 0..=48 {
            let (x, y) = bezier(&s, i as f64 / 48.0);
            let (cx, cy) = (x * px, y * px);
            let lo_y = (cy - radius - 1.0).floor().max(0.0) as usize;
            let hi_y = ((cy + radius + 1.0).ceil() as usize).min(size);
            let lo_x = (cx - radius - 1.0).floor().max(0.0) as usize;
            let hi_x = ((cx + radius + 1.0).ceil() as usize).min(size);
            for yy in lo_y..hi_y {
                for xx in lo_x..hi_x {
                    let (fx, fy) = (xx as f64 + 0.5 - cx, yy as f64 + 0.5 - cy);
                    if fx * fx + fy * fy <= radius * radius {
                        out[yy * size + xx] = 255;
                    }
                }
            }
        }
    }
}

/// `n` binary `size x size` characters drawn from `classes` prototypes.
pub fn glyphs(n: usize, size: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos: Vec<Glyph> = (0..classes.max(1)).map(|_| prototype(&mut rng)).collect();
    let mut bytes = vec![0u8; n * size * size];
    for img in bytes.chunks_mut(size * size) {
        let g = &protos[rng.gen_range(0..protos.len())];
        render(g, size, 0.03, &mut rng, img);
    }
    Dataset::from_bytes(bytes, DatasetFormat::Binarized, 1, size, size).expect("consistent sizes")
}

/// `n` smooth colour images: a linear gradient plus one or two soft discs.
pub fn color_blobs(n: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let mut bytes = vec![0u8; n * 3 * plane];
    for img in bytes.chunks_mut(3 * plane) {
        let base: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let grad: [f64; 3] = [
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
        ];
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let blobs: Vec<(Pt, f64, [f64; 3])> = (0..rng.gen_range(1..=2))
            .map(|_| {
                (
                    (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)),
                    rng.gen_range(0.1..0.3),
                    [rng.gen(), rng.gen(), rng.gen()],
                )
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (
                    (x as f64 + 0.5) / size as f64,
                    (y as f64 + 0.5) / size as f64,
                );
                let along = (u - 0.5) * angle.cos() + (v - 0.5) * angle.sin();
                for c in 0..3 {
                    let mut val = base[c] + grad[c] * along;
                    for &((bx, by), r, col) in &blobs {
                        let d2 = (u - bx).powi(2) + (v - by).powi(2);
                        let w = (-d2 / (2.0 * r * r)).exp();
                        val = val * (1.0 - w) + col[c] * w;
                    }
                    img[c * plane + y * size + x] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    Dataset::from_bytes(bytes, DatasetFormat::RawU8, 3, size, size).expect("consistent sizes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_binary_sparse_and_seeded() {
        let d = glyphs(50, 28, 10, 1);
        assert_eq!(d.len(), 50);
        assert!(d.bytes().iter().all(|&b| b == 0 || b == 255));
        let on = d.bytes().iter().filter(|&&b| b == 255).count() as f64 / d.bytes().len() as f64;
        assert!(on > 0.03 && on < 0.4, "ink fraction {on}");
        assert_eq!(glyphs(50, 28, 10, 1), d);
        assert_ne!(glyphs(50, 28, 10, 2), d);
    }

    #[test]
    fn blobs_have_three_channels() {
        let d = color_blobs(4, 16, 3);
        assert_eq!(d.dims(), (3, 16, 16));
        assert_eq!(d.bytes().len(), 4 * 3 * 256);
    }
}
