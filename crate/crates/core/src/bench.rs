//! Micro-benchmark of segmentation features: per-pixel scan vs integral image.

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::BoxF;
use crate::mask::SegmentMask;
use crate::segfeat::{geometry_features, naive, GridSpec, Segment, DEFAULT_LAMBDA};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub size: u32,
    pub grid: u32,
    pub boxes: usize,
    pub naive_secs: f64,
    /// Includes building the integral image.
    pub integral_secs: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.naive_secs / self.integral_secs.max(1e-12)
    }
}

/// A blob mask: a filled ellipse with random holes.
fn blob(rng: &mut ChaCha8Rng, size: u32) -> Result<SegmentMask> {
    let n = size as usize;
    let (cx, cy) = (
        rng.random_range(0.3..0.7) * size as f64,
        rng.random_range(0.3..0.7) * size as f64,
    );
    let (rx, ry) = (
        rng.random_range(0.15..0.35) * size as f64,
        rng.random_range(0.15..0.35) * size as f64,
    );
    let bits: Vec<bool> = (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64, (i / n) as f64);
            let d = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
            d <= 1.0 && rng.random_bool(0.95)
        })
        .collect();
    SegmentMask::from_bits("bench", 0, size, size, &bits)
}

/// Times `boxes` feature evaluations against one mask per size.
pub fn run(sizes: &[u32], grid: GridSpec, boxes: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mask = blob(&mut rng, size)?;
        let largest = mask.pixel_count().max(1);
        let props: Vec<BoxF> = (0..boxes)
            .map(|_| {
                let x1 = rng.random_range(0..size) as f64;
                let y1 = rng.random_range(0..size) as f64;
                BoxF {
                    x1,
                    y1,
                    x2: rng.random_range(x1 as u32..size) as f64,
                    y2: rng.random_range(y1 as u32..size) as f64,
                }
            })
            .collect();

        let start = Instant::now();
        let bits = mask.to_bits();
        for p in &props {
            black_box(naive::geometry_features(
                p,
                &mask,
                &bits,
                grid,
                DEFAULT_LAMBDA,
                largest,
            )?);
        }
        let naive_secs = start.elapsed().as_secs_f64();

        let start = Instant::now();
        let seg = Segment::new(mask.clone(), Vec::new());
        for p in &props {
            black_box(geometry_features(p, &seg, grid, DEFAULT_LAMBDA, largest)?);
        }
        let integral_secs = start.elapsed().as_secs_f64();

        rows.push(BenchRow {
            size,
            grid: grid.k(),
            boxes,
            naive_secs,
            integral_secs,
        });
    }
    Ok(rows)
}

pub fn write_csv(mut w: impl Write, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(w, "mask_size,grid,boxes,naive_seconds,integral_seconds,speedup")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.6e},{:.6e},{:.2}",
            r.size,
            r.grid,
            r.boxes,
            r.naive_secs,
            r.integral_secs,
            r.speedup()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integral_wins_on_large_masks() {
        let rows = run(&[128, 256], GridSpec::new(3).unwrap(), 200, 1).unwrap();
        for r in &rows {
            assert!(r.integral_secs < r.naive_secs, "{r:?}");
        }
        let mut out = Vec::new();
        write_csv(&mut out, &rows).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("mask_size,grid"));
    }
}
