//! Multi-MNIST composition: two glyphs per 48x48 scene, max-composited, with
//! labels wherever a glyph's own intensity exceeds the foreground threshold.

use super::idx::{IdxData, IdxKind};
use super::{Dataset, SceneSample};
use crate::error::LdpError;
use crate::rng::Rng;

pub const GLYPH_SIDE: usize = 28;
pub const CANVAS_SIDE: usize = 48;
/// Foreground threshold on glyph intensity for label assignment.
pub const TAU_FG: f64 = 0.5;

/// How many distinct glyphs may appear across the generated samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UniqueSubset {
    Count(usize),
    All,
}

/// Disjoint glyph partition for the `All` setting: test glyphs never occur
/// in train/val samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HoldoutRole {
    None,
    TrainVal,
    Test,
}

/// Bank of 28x28 grayscale glyphs, stored quantized.
#[derive(Clone)]
pub struct GlyphBank {
    glyphs: Vec<Vec<u8>>,
}

impl GlyphBank {
    pub fn from_idx(idx: &IdxData) -> Result<GlyphBank, LdpError> {
        if idx.kind != IdxKind::Images {
            return Err(LdpError::Config("glyph bank needs an IDX image file".into()));
        }
        if idx.dims.len() != 3 || idx.dims[1] != GLYPH_SIDE || idx.dims[2] != GLYPH_SIDE {
            return Err(LdpError::Config(format!(
                "glyph bank expects n x 28 x 28 images, got {:?}",
                idx.dims
            )));
        }
        let n = idx.dims[0];
        let glyphs = (0..n).map(|i| idx.raw[i * 784..(i + 1) * 784].to_vec()).collect();
        Ok(GlyphBank { glyphs })
    }

    pub fn from_glyphs(glyphs: Vec<Vec<u8>>) -> GlyphBank {
        assert!(glyphs.iter().all(|g| g.len() == GLYPH_SIDE * GLYPH_SIDE));
        GlyphBank { glyphs }
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn glyph(&self, id: usize) -> &[u8] {
        &self.glyphs[id]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GlyphPlacement {
    pub glyph_id: usize,
    pub top: usize,
    pub left: usize,
}

/// Glyph ids available under the unique/holdout policy, in a deterministic
/// seeded order.
fn glyph_pool(
    bank: &GlyphBank,
    unique: UniqueSubset,
    holdout: HoldoutRole,
    seed: u64,
) -> Result<Vec<usize>, LdpError> {
    let mut ids: Vec<usize> = (0..bank.len()).collect();
    let mut rng = Rng::seeded(seed, u64::MAX); // dedicated pool stream
    rng.shuffle(&mut ids);
    match unique {
        UniqueSubset::Count(u) => {
            if u == 0 || u > bank.len() {
                return Err(LdpError::Config(format!(
                    "unique glyph count {} outside 1..={}",
                    u,
                    bank.len()
                )));
            }
            ids.truncate(u);
            Ok(ids)
        }
        UniqueSubset::All => {
            let held = (bank.len() / 10).max(1);
            match holdout {
                HoldoutRole::None => Ok(ids),
                HoldoutRole::TrainVal => {
                    if bank.len() <= held {
                        return Err(LdpError::Config("glyph bank too small to hold out".into()));
                    }
                    Ok(ids[..bank.len() - held].to_vec())
                }
                HoldoutRole::Test => Ok(ids[bank.len() - held..].to_vec()),
            }
        }
    }
}

pub(crate) fn compose_sample(
    bank: &GlyphBank,
    pool: &[usize],
    rng: &mut Rng,
) -> (SceneSample, Vec<GlyphPlacement>) {
    let m = CANVAS_SIDE * CANVAS_SIDE;
    let mut pixels = vec![0u8; m];
    let mut labels = vec![0u8; m];
    let span = CANVAS_SIDE - GLYPH_SIDE + 1;
    let mut placements = Vec::with_capacity(2);
    for obj in 0..2 {
        let glyph_id = pool[rng.below(pool.len())];
        let top = rng.below(span);
        let left = rng.below(span);
        let glyph = bank.glyph(glyph_id);
        for r in 0..GLYPH_SIDE {
            for c in 0..GLYPH_SIDE {
                let v = glyph[r * GLYPH_SIDE + c];
                let px = (top + r) * CANVAS_SIDE + (left + c);
                pixels[px] = pixels[px].max(v);
                if v as f64 / 255.0 > TAU_FG {
                    labels[px] |= 1 << (obj + 1);
                }
            }
        }
        placements.push(GlyphPlacement { glyph_id, top, left });
    }
    (SceneSample { pixels, labels }, placements)
}

/// Compose `n` scenes of two glyphs each. Sample `i` draws from ChaCha
/// stream `start_index + i` under `seed`.
pub fn compose_multi_mnist(
    bank: &GlyphBank,
    n: usize,
    unique: UniqueSubset,
    seed: u64,
    holdout: HoldoutRole,
    start_index: u64,
) -> Result<Dataset, LdpError> {
    if n == 0 {
        return Err(LdpError::Config("sample count must be >= 1".into()));
    }
    if bank.is_empty() {
        return Err(LdpError::Config("glyph bank is empty".into()));
    }
    let pool = glyph_pool(bank, unique, holdout, seed)?;
    let samples = (0..n)
        .map(|i| {
            let mut rng = Rng::seeded(seed, start_index + i as u64);
            compose_sample(bank, &pool, &mut rng).0
        })
        .collect();
    Ok(Dataset {
        height: CANVAS_SIDE as u16,
        width: CANVAS_SIDE as u16,
        max_objects: 2,
        samples,
    })
}
