//! Run-length encoded segment masks and their summed-area tables.

use crate::error::{Error, Result};
use crate::geometry::{BoxF, ImageDims, PixelRect};

/// One run of foreground pixels in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Run {
    pub start: u32,
    pub len: u32,
}

impl Run {
    pub fn end(&self) -> u64 {
        self.start as u64 + self.len as u64
    }
}

/// Binary mask of one segment proposal, stored as sorted, non-overlapping runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMask {
    pub image_id: String,
    pub segment_id: u32,
    pub height: u32,
    pub width: u32,
    runs: Vec<Run>,
    pixel_count: u64,
}

impl SegmentMask {
    /// Builds a mask from explicit runs, rejecting zero-length, unsorted,
    /// overlapping or out-of-range runs.
    pub fn from_runs(
        image_id: impl Into<String>,
        segment_id: u32,
        height: u32,
        width: u32,
        runs: Vec<Run>,
    ) -> Result<Self> {
        let total = height as u64 * width as u64;
        let mut prev_end = 0u64;
        let mut pixel_count = 0u64;
        for (i, r) in runs.iter().enumerate() {
            if r.len == 0 {
                return Err(Error::BadRle(format!("run {i} has zero length")));
            }
            if i > 0 && (r.start as u64) < prev_end {
                return Err(Error::BadRle(format!(
                    "run {i} starting at {} overlaps or precedes the previous run",
                    r.start
                )));
            }
            if r.end() > total {
                return Err(Error::BadRle(format!(
                    "run {i} ends at {} past the {total} pixel image",
                    r.end()
                )));
            }
            prev_end = r.end();
            pixel_count += r.len as u64;
        }
        Ok(Self {
            image_id: image_id.into(),
            segment_id,
            height,
            width,
            runs,
            pixel_count,
        })
    }

    /// Encodes a row-major bit array into maximal runs.
    pub fn from_bits(
        image_id: impl Into<String>,
        segment_id: u32,
        height: u32,
        width: u32,
        bits: &[bool],
    ) -> Result<Self> {
        let total = height as usize * width as usize;
        if bits.len() != total {
            return Err(Error::BadRle(format!(
                "expected {total} bits for a {height}x{width} mask, got {}",
                bits.len()
            )));
        }
        let mut runs = Vec::new();
        let mut i = 0;
        while i < total {
            if bits[i] {
                let start = i;
                while i < total && bits[i] {
                    i += 1;
                }
                runs.push(Run {
                    start: start as u32,
                    len: (i - start) as u32,
                });
            } else {
                i += 1;
            }
        }
        Self::from_runs(image_id, segment_id, height, width, runs)
    }

    /// Axis-aligned filled rectangle, clipped to the image.
    pub fn from_rect(
        image_id: impl Into<String>,
        segment_id: u32,
        dims: ImageDims,
        rect: PixelRect,
    ) -> Result<Self> {
        let r = rect.clip(dims);
        let mut runs = Vec::new();
        if !r.is_empty() {
            for y in r.y1..=r.y2 {
                runs.push(Run {
                    start: (y * dims.width as i64 + r.x1) as u32,
                    len: (r.x2 - r.x1 + 1) as u32,
                });
            }
        }
        Self::from_runs(image_id, segment_id, dims.height, dims.width, runs)
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn pixel_count(&self) -> u64 {
        self.pixel_count
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims::new(self.width, self.height)
    }

    pub fn to_bits(&self) -> Vec<bool> {
        let mut bits = vec![false; self.height as usize * self.width as usize];
        for r in &self.runs {
            bits[r.start as usize..r.end() as usize].fill(true);
        }
        bits
    }

    /// Smallest pixel rectangle holding every mask pixel.
    pub fn tight_rect(&self) -> Result<PixelRect> {
        let (first, last) = match (self.runs.first(), self.runs.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::EmptySegment),
        };
        let w = self.width as u64;
        let mut x1 = u64::MAX;
        let mut x2 = 0;
        for r in &self.runs {
            let s = r.start as u64;
            let e = r.end() - 1;
            if s / w == e / w {
                x1 = x1.min(s % w);
                x2 = x2.max(e % w);
            } else {
                // the run wraps a row boundary, so it touches both image edges
                x1 = 0;
                x2 = w - 1;
            }
        }
        Ok(PixelRect {
            x1: x1 as i64,
            y1: (first.start as u64 / w) as i64,
            x2: x2 as i64,
            y2: ((last.end() - 1) / w) as i64,
        })
    }

    pub fn tight_box(&self) -> Result<BoxF> {
        self.tight_rect().map(|r| r.to_box())
    }
}

/// Summed-area table of a binary mask: entry `(i, j)` counts mask pixels in
/// rows `< i` and columns `< j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegralMask {
    height: u32,
    width: u32,
    table: Vec<u32>,
}

impl IntegralMask {
    pub fn new(mask: &SegmentMask) -> Self {
        let h = mask.height as usize;
        let w = mask.width as usize;
        let stride = w + 1;
        let mut table = vec![0u32; (h + 1) * stride];
        let mut row = vec![0u32; w];
        let mut runs = mask.runs().iter().peekable();
        for y in 0..h {
            row.fill(0);
            let row_start = (y * w) as u64;
            let row_end = row_start + w as u64;
            while let Some(r) = runs.peek() {
                if r.start as u64 >= row_end {
                    break;
                }
                let s = (r.start as u64).max(row_start);
                let e = r.end().min(row_end);
                for v in &mut row[(s - row_start) as usize..(e - row_start) as usize] {
                    *v = 1;
                }
                if r.end() <= row_end {
                    runs.next();
                } else {
                    break;
                }
            }
            let mut acc = 0u32;
            for x in 0..w {
                acc += row[x];
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + acc;
            }
        }
        Self {
            height: mask.height,
            width: mask.width,
            table,
        }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    /// Table entry `(i, j)`, `0 <= i <= height`, `0 <= j <= width`.
    pub fn at(&self, i: usize, j: usize) -> u32 {
        self.table[i * (self.width as usize + 1) + j]
    }

    pub fn total(&self) -> u64 {
        self.at(self.height as usize, self.width as usize) as u64
    }

    /// Mask pixels inside `rect`; the parts of `rect` outside the image hold none.
    pub fn rect_count(&self, rect: &PixelRect) -> u64 {
        let r = rect.clip(ImageDims::new(self.width, self.height));
        if r.is_empty() {
            return 0;
        }
        let (x1, y1) = (r.x1 as usize, r.y1 as usize);
        let (x2, y2) = (r.x2 as usize + 1, r.y2 as usize + 1);
        let pos = self.at(y2, x2) as u64 + self.at(y1, x1) as u64;
        let neg = self.at(y1, x2) as u64 + self.at(y2, x1) as u64;
        pos - neg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(h: u32, w: u32, px: &[(u32, u32)]) -> SegmentMask {
        let mut bits = vec![false; (h * w) as usize];
        for &(r, c) in px {
            bits[(r * w + c) as usize] = true;
        }
        SegmentMask::from_bits("img", 0, h, w, &bits).unwrap()
    }

    #[test]
    fn rle_examples() {
        let zero = SegmentMask::from_bits("i", 0, 3, 3, &[false; 9]).unwrap();
        assert!(zero.runs().is_empty());
        assert_eq!(zero.to_bits(), vec![false; 9]);
        let one = SegmentMask::from_bits("i", 0, 3, 3, &[true; 9]).unwrap();
        assert_eq!(one.runs(), &[Run { start: 0, len: 9 }]);
        assert_eq!(one.pixel_count(), 9);
    }

    #[test]
    fn rle_rejects_malformed_runs() {
        let r = |start, len| Run { start, len };
        assert!(matches!(
            SegmentMask::from_runs("i", 0, 2, 2, vec![r(0, 2), r(1, 1)]),
            Err(Error::BadRle(_))
        ));
        assert!(matches!(
            SegmentMask::from_runs("i", 0, 2, 2, vec![r(3, 2)]),
            Err(Error::BadRle(_))
        ));
        assert!(matches!(
            SegmentMask::from_runs("i", 0, 2, 2, vec![r(0, 0)]),
            Err(Error::BadRle(_))
        ));
        assert!(matches!(
            SegmentMask::from_runs("i", 0, 2, 2, vec![r(2, 1), r(0, 1)]),
            Err(Error::BadRle(_))
        ));
        // touching runs are fine
        assert!(SegmentMask::from_runs("i", 0, 2, 2, vec![r(0, 1), r(1, 1)]).is_ok());
    }

    #[test]
    fn random_mask_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let bits: Vec<bool> = (0..256).map(|_| rng.random_bool(0.5)).collect();
        let m = SegmentMask::from_bits("i", 0, 16, 16, &bits).unwrap();
        assert_eq!(m.to_bits(), bits);
        assert_eq!(m.pixel_count(), bits.iter().filter(|b| **b).count() as u64);
    }

    #[test]
    fn tight_box_examples() {
        assert_eq!(
            mask_from(10, 10, &[(3, 7)]).tight_box().unwrap(),
            BoxF {
                x1: 7.0,
                y1: 3.0,
                x2: 7.0,
                y2: 3.0
            }
        );
        let full = SegmentMask::from_bits("i", 0, 4, 4, &[true; 16]).unwrap();
        assert_eq!(
            full.tight_rect().unwrap(),
            PixelRect {
                x1: 0,
                y1: 0,
                x2: 3,
                y2: 3
            }
        );
        assert_eq!(
            mask_from(4, 4, &[(1, 1), (2, 3)]).tight_rect().unwrap(),
            PixelRect {
                x1: 1,
                y1: 1,
                x2: 3,
                y2: 2
            }
        );
        let empty = SegmentMask::from_bits("i", 0, 2, 2, &[false; 4]).unwrap();
        assert!(matches!(empty.tight_box(), Err(Error::EmptySegment)));
    }

    #[test]
    fn integral_small_examples() {
        let empty = SegmentMask::from_bits("i", 0, 2, 2, &[false; 4]).unwrap();
        let t = IntegralMask::new(&empty);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(t.at(i, j), 0);
            }
        }
        let full = SegmentMask::from_bits("i", 0, 2, 2, &[true; 4]).unwrap();
        assert_eq!(IntegralMask::new(&full).at(2, 2), 4);
    }

    #[test]
    fn integral_matches_naive_on_all_rectangles_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bits: Vec<bool> = (0..64).map(|_| rng.random_bool(0.4)).collect();
        let m = SegmentMask::from_bits("i", 0, 8, 8, &bits).unwrap();
        let t = IntegralMask::new(&m);
        let mut checked = 0;
        for y1 in 0..8i64 {
            for y2 in y1..8 {
                for x1 in 0..8i64 {
                    for x2 in x1..8 {
                        let mut naive = 0;
                        for y in y1..=y2 {
                            for x in x1..=x2 {
                                naive += bits[(y * 8 + x) as usize] as u64;
                            }
                        }
                        assert_eq!(t.rect_count(&PixelRect { x1, y1, x2, y2 }), naive);
                        checked += 1;
                    }
                }
            }
        }
        assert_eq!(checked, 1296);
    }

    proptest! {
        #[test]
        fn bits_roundtrip(h in 1u32..12, w in 1u32..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.5)).collect();
            let m = SegmentMask::from_bits("i", 0, h, w, &bits).unwrap();
            prop_assert_eq!(m.to_bits(), bits);
            let t = IntegralMask::new(&m);
            prop_assert_eq!(t.total(), m.pixel_count());
            for i in 1..=h as usize {
                for j in 1..=w as usize {
                    prop_assert!(t.at(i, j) >= t.at(i - 1, j));
                    prop_assert!(t.at(i, j) >= t.at(i, j - 1));
                }
            }
        }

        #[test]
        fn tight_rect_is_minimal(h in 1u32..12, w in 1u32..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.2)).collect();
            prop_assume!(bits.iter().any(|b| *b));
            let m = SegmentMask::from_bits("i", 0, h, w, &bits).unwrap();
            let r = m.tight_rect().unwrap();
            let on = |y: i64, x: i64| bits[(y * w as i64 + x) as usize];
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    if on(y, x) {
                        prop_assert!(r.contains(x, y));
                    }
                }
            }
            prop_assert!((r.x1..=r.x2).any(|x| on(r.y1, x)));
            prop_assert!((r.x1..=r.x2).any(|x| on(r.y2, x)));
            prop_assert!((r.y1..=r.y2).any(|y| on(y, r.x1)));
            prop_assert!((r.y1..=r.y2).any(|y| on(y, r.x2)));
        }
    }
}
