//! Sketches: fixed-size, nonnegative, histogram-like density vectors.
//!
//! A sketch is made of one or more segments (one per modality), each holding
//! `depth` rows of `width` cells, laid out depth-major. Item sketches are
//! one-hot per row; history sketches are decayed sums of item sketches.

use std::io::{Read, Write};
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::artifact::{ArtifactReader, ArtifactWriter};
use crate::codes::CodesMatrix;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TSKSKTCH";

/// Floor applied to every cell before the geometric mean.
pub const SCORE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub depth: usize,
    pub width: usize,
}

impl Segment {
    pub fn new(depth: usize, width: usize) -> Self {
        Segment { depth, width }
    }

    pub fn len(&self) -> usize {
        self.depth * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn layout_len(segments: &[Segment]) -> usize {
    segments.iter().map(Segment::len).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sketch {
    segments: Vec<Segment>,
    cells: Vec<f64>,
}

impl Sketch {
    pub fn zeros(segments: &[Segment]) -> Self {
        Sketch {
            segments: segments.to_vec(),
            cells: vec![0.0; layout_len(segments)],
        }
    }

    pub fn from_cells(segments: &[Segment], cells: Vec<f64>) -> Result<Self> {
        if cells.len() != layout_len(segments) {
            return Err(Error::shape(layout_len(segments), cells.len()));
        }
        if let Some(bad) = cells.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(Error::invalid(
                "cells",
                format!("cell {bad} is not finite and >= 0"),
            ));
        }
        Ok(Sketch {
            segments: segments.to_vec(),
            cells,
        })
    }

    /// One segment with a single 1.0 per row at the given region ids.
    pub fn one_hot(width: usize, regions: &[u16]) -> Self {
        let segment = Segment::new(regions.len(), width);
        let mut cells = vec![0.0; segment.len()];
        for (row, &r) in regions.iter().enumerate() {
            debug_assert!((r as usize) < width);
            cells[row * width + r as usize] = 1.0;
        }
        Sketch {
            segments: vec![segment],
            cells,
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.cells.iter().sum()
    }

    /// Every row of every segment, in layout order.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let mut offset = 0;
        self.segments.iter().flat_map(move |s| {
            let start = offset;
            offset += s.len();
            self.cells[start..start + s.len()].chunks_exact(s.width)
        })
    }

    pub fn scaled(&self, factor: f64) -> Sketch {
        Sketch {
            segments: self.segments.clone(),
            cells: self.cells.iter().map(|c| c * factor).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<W> {
        let mut w = ArtifactWriter::new(out, MAGIC, 0)?;
        w.u32(self.segments.len() as u32)?;
        for s in &self.segments {
            w.u32(s.depth as u32)?;
            w.u32(s.width as u32)?;
        }
        for &c in &self.cells {
            w.f32(c as f32)?;
        }
        w.finish()
    }

    pub fn read_from<R: Read>(input: R) -> Result<Sketch> {
        let mut r = ArtifactReader::new(input, MAGIC)?;
        let n = r.u32()? as usize;
        let segments = (0..n)
            .map(|_| Ok(Segment::new(r.u32()? as usize, r.u32()? as usize)))
            .collect::<Result<Vec<_>>>()?;
        let cells = (0..layout_len(&segments))
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        r.expect_eof()?;
        Sketch::from_cells(&segments, cells)
    }
}

impl Add for &Sketch {
    type Output = Sketch;

    fn add(self, rhs: &Sketch) -> Sketch {
        assert_eq!(self.segments, rhs.segments, "sketch layouts differ");
        Sketch {
            segments: self.segments.clone(),
            cells: self
                .cells
                .iter()
                .zip(&rhs.cells)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

/// Decayed sum of item sketches ordered oldest to newest.
///
/// The newest sketch has weight 1, the one before it `decay`, and so on.
/// An empty history yields the zero sketch of `segments`.
pub fn aggregate(segments: &[Segment], items: &[&Sketch], decay: f64) -> Result<Sketch> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::invalid("decay", format!("{decay} not in (0, 1]")));
    }
    let mut acc = Sketch::zeros(segments);
    for item in items {
        if item.segments != segments {
            return Err(Error::shape(
                format!("{segments:?}"),
                format!("{:?}", item.segments),
            ));
        }
        for (a, &c) in acc.cells.iter_mut().zip(&item.cells) {
            *a = *a * decay + c;
        }
    }
    Ok(acc)
}

/// L2-normalizes every row independently; all-zero rows stay zero.
pub fn normalize_widthwise(sketch: &Sketch) -> Sketch {
    let mut out = sketch.clone();
    let mut offset = 0;
    for s in &sketch.segments {
        for row in out.cells[offset..offset + s.len()].chunks_exact_mut(s.width) {
            let norm = row.iter().map(|c| c * c).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|c| *c /= norm);
            }
        }
        offset += s.len();
    }
    out
}

pub fn concat(sketches: &[&Sketch]) -> Sketch {
    Sketch {
        segments: sketches
            .iter()
            .flat_map(|s| s.segments.iter().copied())
            .collect(),
        cells: sketches
            .iter()
            .flat_map(|s| s.cells.iter().copied())
            .collect(),
    }
}

/// Checks that an output layout matches the concatenated codes layout.
pub(crate) fn check_layout(cells: usize, codes: &[&CodesMatrix]) -> Result<()> {
    let expected: usize = codes.iter().map(|c| c.depth() * c.width()).sum();
    if cells != expected {
        return Err(Error::shape(expected, cells));
    }
    let cities = codes.first().map_or(0, |c| c.len());
    if codes.iter().any(|c| c.len() != cities) {
        return Err(Error::invalid("codes", "modalities disagree on city count"));
    }
    Ok(())
}

/// Mean of `ln(max(cell, eps))` over the cells each city occupies.
///
/// Ranking by this is equivalent to ranking by the geometric mean and is
/// numerically safer for deep sketches.
pub fn log_scores(cells: &[f64], codes: &[&CodesMatrix]) -> Result<Vec<f64>> {
    check_layout(cells.len(), codes)?;
    let logs: Vec<f64> = cells.iter().map(|&c| c.max(SCORE_EPSILON).ln()).collect();
    let total_depth: usize = codes.iter().map(|c| c.depth()).sum();
    let cities = codes.first().map_or(0, |c| c.len());
    let mut scores = vec![0.0; cities];
    let mut offset = 0;
    for m in codes {
        let (depth, width) = (m.depth(), m.width());
        for (city, score) in scores.iter_mut().enumerate() {
            for (row, &r) in m.row(city).iter().enumerate() {
                *score += logs[offset + row * width + r as usize];
            }
        }
        offset += depth * width;
    }
    let inv = 1.0 / total_depth as f64;
    scores.iter_mut().for_each(|s| *s *= inv);
    Ok(scores)
}

/// Per-city geometric mean of the output cells at the city's regions, pooled
/// jointly over every modality and row.
pub fn score_items(output: &Sketch, codes: &[&CodesMatrix]) -> Result<Vec<f64>> {
    let expected: Vec<Segment> = codes
        .iter()
        .map(|c| Segment::new(c.depth(), c.width()))
        .collect();
    if output.segments != expected {
        // A flat single-segment output of the right size is also accepted.
        check_layout(output.len(), codes)?;
    }
    Ok(log_scores(&output.cells, codes)?
        .into_iter()
        .map(f64::exp)
        .collect())
}
