//! Segmentation potentials for (box, segment) pairs.
//!
//! A block for one class has `2K² + 4` entries laid out as
//!
//! ```text
//! [ grid_in (K²) | seg_out | back_in (K²) | back_out | overlap | seg_class ]
//! ```
//!
//! The first `2K² + 3` entries depend only on the box and the segment's mask;
//! `seg_class` is the logistic of the segment's ranker score for the class.
//! All mask counts come from the segment's integral image, so a block costs
//! `O(K²)` lookups regardless of box size. Background counts use the whole
//! image as the pixel universe.

use crate::error::{Error, Result};
use crate::geometry::{rect_iou, BoxF, ImageDims, PixelRect};
use crate::mask::{IntegralMask, SegmentMask};

/// Default bias subtracted from the overlap feature.
pub const DEFAULT_LAMBDA: f64 = -0.7;

/// Side length of the grid laid over a candidate box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    k: u32,
}

impl GridSpec {
    pub fn new(k: u32) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("grid size must be at least 1".into()));
        }
        Ok(Self { k })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn cells(&self) -> usize {
        (self.k * self.k) as usize
    }

    /// Length of one per-class block.
    pub fn block_len(&self) -> usize {
        2 * self.cells() + 4
    }

    /// Length of the block entries that do not depend on the class.
    pub fn geometry_len(&self) -> usize {
        2 * self.cells() + 3
    }

    /// Splits a rounded box into `K×K` row-major cells. Each axis is divided
    /// into `K` spans of `floor(len / K)` pixels with the remainder added to the
    /// last span, so some cells are empty when the box is narrower than `K`.
    pub fn cells_of(&self, rect: &PixelRect) -> Vec<PixelRect> {
        let k = self.k as i64;
        let spans = |lo: i64, hi: i64| -> Vec<(i64, i64)> {
            let step = (hi - lo + 1) / k;
            (0..k)
                .map(|i| {
                    let a = lo + i * step;
                    let b = if i == k - 1 { hi } else { lo + (i + 1) * step - 1 };
                    (a, b)
                })
                .collect()
        };
        let cols = spans(rect.x1, rect.x2);
        let rows = spans(rect.y1, rect.y2);
        rows.iter()
            .flat_map(|&(y1, y2)| cols.iter().map(move |&(x1, x2)| PixelRect { x1, y1, x2, y2 }))
            .collect()
    }
}

/// A segment proposal prepared for feature computation: the mask, its
/// integral image, its tight box and its raw ranker score for every class.
#[derive(Debug, Clone)]
pub struct Segment {
    pub mask: SegmentMask,
    pub integral: IntegralMask,
    pub tight: Option<PixelRect>,
    pub scores: Vec<f64>,
}

impl Segment {
    pub fn new(mask: SegmentMask, scores: Vec<f64>) -> Self {
        let integral = IntegralMask::new(&mask);
        let tight = mask.tight_rect().ok();
        Self {
            mask,
            integral,
            tight,
            scores,
        }
    }

    pub fn id(&self) -> u32 {
        self.mask.segment_id
    }

    pub fn area(&self) -> u64 {
        self.mask.pixel_count()
    }

    pub fn dims(&self) -> ImageDims {
        self.mask.dims()
    }

    fn nonempty_area(&self) -> Result<f64> {
        match self.area() {
            0 => Err(Error::EmptySegment),
            a => Ok(a as f64),
        }
    }
}

/// The six potentials for one (box, segment, class) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct SegFeatureBlock {
    pub grid_in: Vec<f64>,
    pub seg_out: f64,
    pub back_in: Vec<f64>,
    pub back_out: f64,
    pub overlap: f64,
    pub seg_class: f64,
    pub segment_id: Option<u32>,
}

impl SegFeatureBlock {
    /// The block of a class with no segment selected.
    pub fn none(grid: GridSpec) -> Self {
        Self {
            grid_in: vec![0.0; grid.cells()],
            seg_out: 0.0,
            back_in: vec![0.0; grid.cells()],
            back_out: 0.0,
            overlap: 0.0,
            seg_class: 0.0,
            segment_id: None,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.grid_in.len() + 4);
        v.extend_from_slice(&self.grid_in);
        v.push(self.seg_out);
        v.extend_from_slice(&self.back_in);
        v.push(self.back_out);
        v.push(self.overlap);
        v.push(self.seg_class);
        v
    }
}

fn normalizer(largest: u64, area: u64) -> Result<f64> {
    if largest < area {
        return Err(Error::DegenerateNormalizer { largest, area });
    }
    // the largest segment itself would divide by zero
    Ok((largest - area).max(1) as f64)
}

/// Fraction of the segment's pixels in each grid cell of the box.
pub fn seggrid_in(p: &BoxF, s: &Segment, grid: GridSpec) -> Result<Vec<f64>> {
    let area = s.nonempty_area()?;
    Ok(grid
        .cells_of(&p.round())
        .iter()
        .map(|c| s.integral.rect_count(c) as f64 / area)
        .collect())
}

/// Fraction of the segment's pixels outside the box.
pub fn seg_out(p: &BoxF, s: &Segment) -> Result<f64> {
    let area = s.nonempty_area()?;
    let inside = s.integral.rect_count(&p.round());
    Ok((s.area() - inside) as f64 / area)
}

/// Non-segment pixels in each grid cell, normalized by `largest - |S|`.
pub fn backgrid_in(p: &BoxF, s: &Segment, grid: GridSpec, largest: u64) -> Result<Vec<f64>> {
    let norm = normalizer(largest, s.area())?;
    let dims = s.dims();
    Ok(grid
        .cells_of(&p.round())
        .iter()
        .map(|c| (c.clip(dims).area() - s.integral.rect_count(c)) as f64 / norm)
        .collect())
}

/// Non-segment pixels of the image outside the box, normalized by `largest - |S|`.
pub fn back_out(p: &BoxF, s: &Segment, largest: u64) -> Result<f64> {
    let norm = normalizer(largest, s.area())?;
    let dims = s.dims();
    let rect = p.round();
    let box_pixels = rect.clip(dims).area();
    let seg_inside = s.integral.rect_count(&rect);
    let outside_bg = (dims.area() - box_pixels) - (s.area() - seg_inside);
    Ok(outside_bg as f64 / norm)
}

/// IoU between the box and the segment's tight box, minus `lambda`.
pub fn overlap_feat(p: &BoxF, s: &Segment, lambda: f64) -> Result<f64> {
    let tight = s.tight.ok_or(Error::EmptySegment)?;
    Ok(rect_iou(&p.round(), &tight) - lambda)
}

/// Logistic squashing of a segment ranker score.
pub fn segclass_feat(score: f64) -> f64 {
    if score >= 0.0 {
        1.0 / (1.0 + (-score).exp())
    } else {
        let e = score.exp();
        e / (1.0 + e)
    }
}

/// The class-independent part of a block (`2K² + 3` values), sharing the
/// integral lookups between the segment and background features.
pub fn geometry_features(
    p: &BoxF,
    s: &Segment,
    grid: GridSpec,
    lambda: f64,
    largest: u64,
) -> Result<Vec<f64>> {
    let area = s.nonempty_area()?;
    let norm = normalizer(largest, s.area())?;
    let tight = s.tight.ok_or(Error::EmptySegment)?;
    let dims = s.dims();
    let rect = p.round();
    let cells = grid.cells_of(&rect);
    let n = cells.len();
    let mut out = vec![0.0; 2 * n + 3];
    for (i, c) in cells.iter().enumerate() {
        let seg = s.integral.rect_count(c);
        out[i] = seg as f64 / area;
        out[n + 1 + i] = (c.clip(dims).area() - seg) as f64 / norm;
    }
    let seg_inside = s.integral.rect_count(&rect);
    out[n] = (s.area() - seg_inside) as f64 / area;
    let outside_bg = (dims.area() - rect.clip(dims).area()) - (s.area() - seg_inside);
    out[2 * n + 1] = outside_bg as f64 / norm;
    out[2 * n + 2] = rect_iou(&rect, &tight) - lambda;
    Ok(out)
}

/// Full block for `(p, segment, class)`; `None` gives the all-zero block.
pub fn assemble_block(
    p: &BoxF,
    segment: Option<&Segment>,
    class: usize,
    grid: GridSpec,
    lambda: f64,
    largest: u64,
) -> Result<SegFeatureBlock> {
    let s = match segment {
        None => return Ok(SegFeatureBlock::none(grid)),
        Some(s) => s,
    };
    let score = *s.scores.get(class).ok_or_else(|| {
        Error::Dimension(format!(
            "segment {} has {} class scores, class index {class} requested",
            s.id(),
            s.scores.len()
        ))
    })?;
    Ok(SegFeatureBlock {
        grid_in: seggrid_in(p, s, grid)?,
        seg_out: seg_out(p, s)?,
        back_in: backgrid_in(p, s, grid, largest)?,
        back_out: back_out(p, s, largest)?,
        overlap: overlap_feat(p, s, lambda)?,
        seg_class: segclass_feat(score),
        segment_id: Some(s.id()),
    })
}

/// Area of the image's largest segment.
pub fn largest_segment_area<'a>(
    image_id: &str,
    segments: impl IntoIterator<Item = &'a Segment>,
) -> Result<u64> {
    segments
        .into_iter()
        .map(Segment::area)
        .max()
        .ok_or_else(|| Error::NoSegments(image_id.to_string()))
}

/// Per-pixel reference implementations, used by the kernel benchmark.
pub mod naive {
    use super::*;

    fn count_in(bits: &[bool], width: u32, rect: &PixelRect, dims: ImageDims) -> (u64, u64) {
        let r = rect.clip(dims);
        if r.is_empty() {
            return (0, 0);
        }
        let mut seg = 0;
        for y in r.y1..=r.y2 {
            let row = (y * width as i64) as usize;
            for x in r.x1..=r.x2 {
                seg += bits[row + x as usize] as u64;
            }
        }
        (seg, r.area())
    }

    /// Same layout as [`geometry_features`], computed by scanning pixels.
    pub fn geometry_features(
        p: &BoxF,
        mask: &SegmentMask,
        bits: &[bool],
        grid: GridSpec,
        lambda: f64,
        largest: u64,
    ) -> Result<Vec<f64>> {
        let area = match mask.pixel_count() {
            0 => return Err(Error::EmptySegment),
            a => a as f64,
        };
        let norm = normalizer(largest, mask.pixel_count())?;
        let dims = mask.dims();
        let rect = p.round();
        let cells = grid.cells_of(&rect);
        let n = cells.len();
        let mut out = vec![0.0; 2 * n + 3];
        for (i, c) in cells.iter().enumerate() {
            let (seg, px) = count_in(bits, mask.width, c, dims);
            out[i] = seg as f64 / area;
            out[n + 1 + i] = (px - seg) as f64 / norm;
        }
        let (seg_inside, box_px) = count_in(bits, mask.width, &rect, dims);
        out[n] = (mask.pixel_count() - seg_inside) as f64 / area;
        out[2 * n + 1] = ((dims.area() - box_px) - (mask.pixel_count() - seg_inside)) as f64 / norm;
        out[2 * n + 2] = rect_iou(&rect, &mask.tight_rect()?) - lambda;
        Ok(out)
    }
}
