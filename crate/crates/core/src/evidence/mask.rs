use std::fmt;

use serde::{Deserialize, Serialize};

use super::EvidenceError;

/// Binary raster stored as alternating run lengths in row-major order.
///
/// Runs alternate background/foreground and always start with a (possibly
/// empty) background run, so `[3, 2, 1]` is `000110`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn area(&self) -> u64 {
        u64::from(self.x1 - self.x0) * u64::from(self.y1 - self.y0)
    }
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({}x{}, area {}, rle {})", self.width, self.height, self.area(), self.to_rle())
    }
}

struct RunBuilder {
    runs: Vec<u32>,
    pos: u64,
    fg: bool,
}

impl RunBuilder {
    fn new() -> Self {
        Self { runs: vec![0], pos: 0, fg: false }
    }

    /// Appends foreground pixels `[start, end)`; intervals must arrive sorted.
    fn push(&mut self, start: u64, end: u64) {
        if start >= end {
            return;
        }
        debug_assert!(start >= self.pos);
        if start > self.pos {
            if self.fg {
                self.runs.push(0);
            }
            *self.runs.last_mut().unwrap() += (start - self.pos) as u32;
            self.fg = false;
        }
        if !self.fg {
            self.runs.push(0);
            self.fg = true;
        }
        *self.runs.last_mut().unwrap() += (end - start) as u32;
        self.pos = end;
    }

    fn finish(mut self, total: u64) -> Vec<u32> {
        if total > self.pos {
            if self.fg {
                self.runs.push(0);
            }
            *self.runs.last_mut().unwrap() += (total - self.pos) as u32;
        }
        while self.runs.len() > 1 && *self.runs.last().unwrap() == 0 {
            self.runs.pop();
        }
        self.runs
    }
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, runs: vec![width * height] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    fn total(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    /// Builds a mask from sorted, non-overlapping foreground intervals in linear index space.
    fn from_intervals(width: u32, height: u32, intervals: impl IntoIterator<Item = (u64, u64)>) -> Self {
        let mut b = RunBuilder::new();
        for (s, e) in intervals {
            b.push(s, e);
        }
        let total = u64::from(width) * u64::from(height);
        Self { width, height, runs: b.finish(total) }
    }

    /// Builds a mask from row spans `(y, x0, x1)`. Spans may arrive in any order and may overlap.
    pub fn from_spans(width: u32, height: u32, spans: impl IntoIterator<Item = (u32, u32, u32)>) -> Self {
        let mut iv: Vec<(u64, u64)> = spans
            .into_iter()
            .filter(|&(y, x0, x1)| y < height && x0 < x1)
            .map(|(y, x0, x1)| {
                let row = u64::from(y) * u64::from(width);
                (row + u64::from(x0.min(width)), row + u64::from(x1.min(width)))
            })
            .filter(|(s, e)| s < e)
            .collect();
        iv.sort_unstable();
        let mut merged: Vec<(u64, u64)> = Vec::with_capacity(iv.len());
        for (s, e) in iv {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        Self::from_intervals(width, height, merged)
    }

    pub fn from_rect(width: u32, height: u32, rect: PixelRect) -> Self {
        let x1 = rect.x1.min(width);
        Self::from_spans(width, height, (rect.y0..rect.y1.min(height)).map(|y| (y, rect.x0, x1)))
    }

    /// Rasterizes a continuous box: a pixel is foreground when its center lies in
    /// `[x0, x1) x [y0, y1)`.
    pub fn from_box(width: u32, height: u32, bbox: [f64; 4]) -> Self {
        let lo = |v: f64, max: u32| ((v - 0.5).ceil().max(0.0) as u32).min(max);
        let rect = PixelRect {
            x0: lo(bbox[0], width),
            y0: lo(bbox[1], height),
            x1: lo(bbox[2], width),
            y1: lo(bbox[3], height),
        };
        if rect.x0 >= rect.x1 || rect.y0 >= rect.y1 {
            return Self::empty(width, height);
        }
        Self::from_rect(width, height, rect)
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut spans = Vec::new();
        for y in 0..height {
            let mut x = 0;
            while x < width {
                if f(x, y) {
                    let start = x;
                    while x < width && f(x, y) {
                        x += 1;
                    }
                    spans.push((y, start, x));
                } else {
                    x += 1;
                }
            }
        }
        Self::from_spans(width, height, spans)
    }

    /// Foreground intervals `[start, end)` in row-major linear index space.
    pub fn intervals(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.runs.iter().enumerate().filter_map(move |(i, &len)| {
            let start = pos;
            pos += u64::from(len);
            (i % 2 == 1 && len > 0).then_some((start, pos))
        })
    }

    /// Foreground row spans `(y, x0, x1)` with `x1` exclusive.
    pub fn spans(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        let w = u64::from(self.width.max(1));
        self.intervals().flat_map(move |(s, e)| {
            let mut out = Vec::new();
            let mut cur = s;
            while cur < e {
                let y = cur / w;
                let row_end = ((y + 1) * w).min(e);
                out.push((y as u32, (cur - y * w) as u32, (row_end - y * w) as u32));
                cur = row_end;
            }
            out
        })
    }

    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| u64::from(r)).sum()
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        if x >= self.width || y >= self.height {
            return false;
        }
        let idx = u64::from(y) * u64::from(self.width) + u64::from(x);
        self.intervals().any(|(s, e)| s <= idx && idx < e)
    }

    fn same_raster(&self, other: &Mask) -> Result<(), EvidenceError> {
        if self.width != other.width || self.height != other.height {
            return Err(EvidenceError::RasterMismatch {
                left: (self.width, self.height),
                right: (other.width, other.height),
            });
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &Mask) -> Result<u64, EvidenceError> {
        self.same_raster(other)?;
        let a: Vec<_> = self.intervals().collect();
        let b: Vec<_> = other.intervals().collect();
        let (mut i, mut j, mut acc) = (0, 0, 0u64);
        while i < a.len() && j < b.len() {
            let lo = a[i].0.max(b[j].0);
            let hi = a[i].1.min(b[j].1);
            if lo < hi {
                acc += hi - lo;
            }
            if a[i].1 < b[j].1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Ok(acc)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask, EvidenceError> {
        self.same_raster(other)?;
        let mut all: Vec<(u64, u64)> = self.intervals().chain(other.intervals()).collect();
        all.sort_unstable();
        let mut merged: Vec<(u64, u64)> = Vec::new();
        for (s, e) in all {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        Ok(Mask::from_intervals(self.width, self.height, merged))
    }

    pub fn complement(&self) -> Mask {
        let mut gaps = Vec::new();
        let mut pos = 0;
        for (s, e) in self.intervals() {
            if s > pos {
                gaps.push((pos, s));
            }
            pos = e;
        }
        if pos < self.total() {
            gaps.push((pos, self.total()));
        }
        Mask::from_intervals(self.width, self.height, gaps)
    }

    /// Tight bounds of the foreground, or `None` when empty.
    pub fn bounds(&self) -> Option<PixelRect> {
        let mut rect: Option<PixelRect> = None;
        for (y, x0, x1) in self.spans() {
            let r = rect.get_or_insert(PixelRect { x0, y0: y, x1, y1: y + 1 });
            r.x0 = r.x0.min(x0);
            r.x1 = r.x1.max(x1);
            r.y1 = y + 1;
        }
        rect
    }

    /// Sums of pixel-center coordinates `(sum x, sum y)` over the foreground.
    pub fn center_sums(&self) -> (f64, f64) {
        let (mut sx, mut sy) = (0.0, 0.0);
        for (y, x0, x1) in self.spans() {
            let n = f64::from(x1 - x0);
            // sum of (x + 0.5) for x in [x0, x1)
            sx += n * (f64::from(x0) + f64::from(x1)) / 2.0;
            sy += n * (f64::from(y) + 0.5);
        }
        (sx, sy)
    }

    pub fn mirror_x(&self) -> Mask {
        let w = self.width;
        Mask::from_spans(w, self.height, self.spans().map(|(y, x0, x1)| (y, w - x1, w - x0)))
    }

    pub fn mirror_y(&self) -> Mask {
        let h = self.height;
        Mask::from_spans(self.width, h, self.spans().map(|(y, x0, x1)| (h - 1 - y, x0, x1)))
    }

    /// Shifts the foreground; pixels leaving the raster are dropped.
    pub fn translate(&self, dx: i64, dy: i64) -> Mask {
        let (w, h) = (i64::from(self.width), i64::from(self.height));
        let spans = self.spans().filter_map(|(y, x0, x1)| {
            let ny = i64::from(y) + dy;
            let nx0 = (i64::from(x0) + dx).clamp(0, w);
            let nx1 = (i64::from(x1) + dx).clamp(0, w);
            (ny >= 0 && ny < h && nx0 < nx1).then_some((ny as u32, nx0 as u32, nx1 as u32))
        });
        Mask::from_spans(self.width, self.height, spans.collect::<Vec<_>>())
    }

    /// `value,count` pairs, row-major, e.g. `0,118,1,10,0,4`.
    pub fn to_rle(&self) -> String {
        let mut parts = Vec::new();
        for (i, &r) in self.runs.iter().enumerate() {
            if r == 0 {
                continue;
            }
            parts.push(format!("{},{}", i % 2, r));
        }
        parts.join(",")
    }

    pub fn from_rle(width: u32, height: u32, text: &str) -> Result<Mask, EvidenceError> {
        let nums: Vec<u64> = if text.trim().is_empty() {
            Vec::new()
        } else {
            text.split(',')
                .map(|t| t.trim().parse::<u64>())
                .collect::<Result<_, _>>()
                .map_err(|e| EvidenceError::InvalidRle(e.to_string()))?
        };
        if nums.len() % 2 != 0 {
            return Err(EvidenceError::InvalidRle("odd number of fields".into()));
        }
        let mut intervals = Vec::new();
        let mut pos = 0u64;
        for pair in nums.chunks(2) {
            let (value, count) = (pair[0], pair[1]);
            if value > 1 {
                return Err(EvidenceError::InvalidRle(format!("value {value} is not 0 or 1")));
            }
            if value == 1 {
                intervals.push((pos, pos + count));
            }
            pos += count;
        }
        let total = u64::from(width) * u64::from(height);
        if pos != total {
            return Err(EvidenceError::InvalidRle(format!("runs cover {pos} pixels, raster has {total}")));
        }
        // adjacent 1-runs may need merging
        let mut merged: Vec<(u64, u64)> = Vec::new();
        for (s, e) in intervals {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        Ok(Mask::from_intervals(width, height, merged))
    }
}

#[derive(Serialize, Deserialize)]
struct MaskDoc {
    width: u32,
    height: u32,
    rle: String,
}

impl Serialize for Mask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        MaskDoc { width: self.width, height: self.height, rle: self.to_rle() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = MaskDoc::deserialize(d)?;
        Mask::from_rle(doc.width, doc.height, &doc.rle).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(m: &Mask) -> Vec<bool> {
        (0..m.height()).flat_map(|y| (0..m.width()).map(move |x| (x, y))).map(|(x, y)| m.contains(x, y)).collect()
    }

    #[test]
    fn box_rasterization() {
        let m = Mask::from_box(100, 100, [10.0, 10.0, 20.0, 20.0]);
        assert_eq!(m.area(), 100);
        assert_eq!(m.bounds(), Some(PixelRect { x0: 10, y0: 10, x1: 20, y1: 20 }));
        assert!(m.contains(10, 10) && m.contains(19, 19) && !m.contains(20, 19));
    }

    #[test]
    fn rle_text_roundtrip() {
        let m = Mask::from_rect(4, 3, PixelRect { x0: 1, y0: 1, x1: 3, y1: 2 });
        assert_eq!(m.to_rle(), "0,5,1,2,0,5");
        assert_eq!(Mask::from_rle(4, 3, "0,5,1,2,0,5").unwrap(), m);
        assert_eq!(Mask::from_rle(4, 3, "0,5,1,1,1,1,0,5").unwrap(), m);
        assert!(Mask::from_rle(4, 3, "0,5,1,2").is_err());
        assert!(Mask::from_rle(4, 3, "2,12").is_err());
    }

    #[test]
    fn complement_and_union() {
        let a = Mask::from_rect(8, 8, PixelRect { x0: 0, y0: 0, x1: 4, y1: 8 });
        let b = a.complement();
        assert_eq!(b.area(), 32);
        assert_eq!(a.intersection_area(&b).unwrap(), 0);
        assert_eq!(a.union(&b).unwrap().area(), 64);
    }

    #[test]
    fn raster_mismatch() {
        let a = Mask::empty(4, 4);
        let b = Mask::empty(5, 4);
        assert!(matches!(a.intersection_area(&b), Err(EvidenceError::RasterMismatch { .. })));
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (1u32..12, 1u32..12).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<bool>(), (w * h) as usize).prop_map(move |v| {
                Mask::from_fn(w, h, |x, y| v[(y * w + x) as usize])
            })
        })
    }

    proptest! {
        #[test]
        fn rle_roundtrip(m in arb_mask()) {
            let text = m.to_rle();
            let back = Mask::from_rle(m.width(), m.height(), &text).unwrap();
            prop_assert_eq!(bits(&back), bits(&m));
            prop_assert_eq!(back, m);
        }

        #[test]
        fn set_arithmetic_matches_bitwise(bits_a in proptest::collection::vec(any::<bool>(), 49),
                                          bits_b in proptest::collection::vec(any::<bool>(), 49)) {
            let a = Mask::from_fn(7, 7, |x, y| bits_a[(y * 7 + x) as usize]);
            let b = Mask::from_fn(7, 7, |x, y| bits_b[(y * 7 + x) as usize]);
            let inter = bits_a.iter().zip(&bits_b).filter(|(p, q)| **p && **q).count() as u64;
            let uni = bits_a.iter().zip(&bits_b).filter(|(p, q)| **p || **q).count() as u64;
            prop_assert_eq!(a.intersection_area(&b).unwrap(), inter);
            prop_assert_eq!(a.union(&b).unwrap().area(), uni);
            prop_assert_eq!(a.area() + a.complement().area(), 49);
        }

        #[test]
        fn double_mirror_is_identity(m in arb_mask()) {
            prop_assert_eq!(m.mirror_x().mirror_x(), m.clone());
            prop_assert_eq!(m.mirror_y().mirror_y(), m);
        }
    }
}
