//! Multi-Shapes generation: binary scenes of simple solid sprites at random
//! positions, union-composited, with full owner sets in the labels.
//!
//! Sprites have a fixed absolute size on every canvas, so smaller canvases
//! are more crowded and overlap more often. Placement draws the sprite
//! center uniformly over the canvas; parts falling off the border are
//! clipped.

use super::{Dataset, SceneSample};
use crate::error::LdpError;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpriteKind {
    Square,
    TriangleUp,
    TriangleDown,
}

impl SpriteKind {
    const ALL: [SpriteKind; 3] = [SpriteKind::Square, SpriteKind::TriangleUp, SpriteKind::TriangleDown];

    /// Bounding box plus per-row set widths (centered). All three sprites
    /// cover 36 pixels.
    fn stencil(&self) -> (usize, usize, Vec<(usize, usize)>) {
        match self {
            SpriteKind::Square => (6, 6, (0..6).map(|r| (r, 6)).collect()),
            SpriteKind::TriangleUp => (6, 11, (0..6).map(|r| (r, 2 * r + 1)).collect()),
            SpriteKind::TriangleDown => (6, 11, (0..6).map(|r| (r, 11 - 2 * r)).collect()),
        }
    }

    /// Set pixels as (row, col) offsets within the bounding box.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let (_, w, rows) = self.stencil();
        let mut out = Vec::new();
        for (r, width) in rows {
            let start = (w - width) / 2;
            for c in start..start + width {
                out.push((r, c));
            }
        }
        out
    }

    pub fn extent(&self) -> (usize, usize) {
        let (h, w, _) = self.stencil();
        (h, w)
    }
}

/// One placed sprite: kind plus the canvas position of its bounding-box
/// top-left corner (possibly negative: clipped at the border).
#[derive(Clone, Copy, Debug)]
pub struct Placement {
    pub kind: SpriteKind,
    pub top: isize,
    pub left: isize,
}

impl Placement {
    /// Canvas pixels covered by the sprite after clipping.
    pub fn covered(&self, size: usize) -> Vec<usize> {
        self.kind
            .cells()
            .into_iter()
            .filter_map(|(r, c)| {
                let y = self.top + r as isize;
                let x = self.left + c as isize;
                if y >= 0 && x >= 0 && (y as usize) < size && (x as usize) < size {
                    Some(y as usize * size + x as usize)
                } else {
                    None
                }
            })
            .collect()
    }
}

pub(crate) fn generate_sample(size: usize, objects: usize, rng: &mut Rng) -> (SceneSample, Vec<Placement>) {
    let m = size * size;
    let mut pixels = vec![0u8; m];
    let mut labels = vec![0u8; m];
    let mut placements = Vec::with_capacity(objects);
    for obj in 0..objects {
        let kind = SpriteKind::ALL[rng.below(3)];
        let (sh, sw) = kind.extent();
        let cy = rng.below(size) as isize;
        let cx = rng.below(size) as isize;
        let placement = Placement { kind, top: cy - (sh / 2) as isize, left: cx - (sw / 2) as isize };
        for px in placement.covered(size) {
            pixels[px] = 255;
            labels[px] |= 1 << (obj + 1);
        }
        placements.push(placement);
    }
    (SceneSample { pixels, labels }, placements)
}

/// Generate `n` scenes of `objects` sprites each on a `size`-by-`size`
/// canvas. Sample `i` draws from ChaCha stream `start_index + i` under
/// `seed`, so splits can continue each other's index ranges and generation
/// parallelizes per sample without changing the output.
pub fn generate_multi_shapes(
    n: usize,
    size: usize,
    objects: usize,
    seed: u64,
    start_index: u64,
) -> Result<Dataset, LdpError> {
    if n == 0 {
        return Err(LdpError::Config("sample count must be >= 1".into()));
    }
    if objects == 0 || objects > 7 {
        return Err(LdpError::Config(format!(
            "object count must lie in 1..=7 (u8 bitmask with bit 0 reserved), got {}",
            objects
        )));
    }
    let widest = SpriteKind::ALL.iter().map(|k| k.extent().1.max(k.extent().0)).max().unwrap();
    if size < widest {
        return Err(LdpError::Config(format!(
            "canvas {} too small for sprites up to {} wide",
            size, widest
        )));
    }
    let samples = (0..n)
        .map(|i| {
            let mut rng = Rng::seeded(seed, start_index + i as u64);
            generate_sample(size, objects, &mut rng).0
        })
        .collect();
    Ok(Dataset { height: size as u16, width: size as u16, max_objects: objects as u8, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sprite_areas_match() {
        assert_eq!(SpriteKind::Square.cells().len(), 36);
        assert_eq!(SpriteKind::TriangleUp.cells().len(), 36);
        assert_eq!(SpriteKind::TriangleDown.cells().len(), 36);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_multi_shapes(50, 20, 3, 7, 0).unwrap();
        let b = generate_multi_shapes(50, 20, 3, 7, 0).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn labels_use_only_declared_bits() {
        let d = generate_multi_shapes(100, 20, 3, 3, 0).unwrap();
        for s in &d.samples {
            for &l in &s.labels {
                assert_eq!(l & !0b1110, 0, "label byte {:#010b} uses bits outside 1..3", l);
            }
        }
    }

    #[test]
    fn pixels_are_binary_and_match_labels() {
        let d = generate_multi_shapes(100, 28, 2, 99, 0).unwrap();
        for s in &d.samples {
            for (px, (&p, &l)) in s.pixels.iter().zip(s.labels.iter()).enumerate() {
                assert!(p == 0 || p == 255, "pixel {} not binary: {}", px, p);
                assert_eq!(p == 255, l != 0, "pixel {} value and owner set disagree", px);
            }
        }
    }

    #[test]
    fn rerendering_from_placements_reproduces_pixels() {
        for i in 0..50 {
            let mut rng = Rng::seeded(13, i);
            let (sample, placements) = generate_sample(20, 3, &mut rng);
            let mut pixels = vec![0u8; 400];
            for p in &placements {
                for px in p.covered(20) {
                    pixels[px] = 255;
                }
            }
            assert_eq!(pixels, sample.pixels, "sample {} does not re-render", i);
        }
    }

    #[test]
    fn smaller_canvas_overlaps_more() {
        let small = generate_multi_shapes(10_000, 20, 3, 5, 0).unwrap();
        let large = generate_multi_shapes(10_000, 28, 3, 5, 0).unwrap();
        assert!(
            small.overlap_fraction() > large.overlap_fraction(),
            "20x20 overlap {} should exceed 28x28 overlap {}",
            small.overlap_fraction(),
            large.overlap_fraction()
        );
    }

    #[test]
    fn oversized_sprites_rejected() {
        assert!(matches!(generate_multi_shapes(1, 8, 2, 0, 0), Err(LdpError::Config(_))));
    }

    #[test]
    fn too_many_objects_rejected() {
        assert!(matches!(generate_multi_shapes(1, 20, 8, 0, 0), Err(LdpError::Config(_))));
    }
}
