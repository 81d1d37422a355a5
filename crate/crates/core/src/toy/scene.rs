use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::math::keyed_rng;

const SCENE_STREAM: u64 = 0x5CE0;

/// Synthetic "image" on an `h x w` token grid partitioned into Voronoi
/// regions of constant token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "w")]
    pub width: usize,
    #[serde(rename = "n")]
    pub vocab_size: usize,
    pub num_regions: usize,
    /// Logit noise scale on boundary cells.
    pub boundary_noise: f64,
    /// Logit noise scale away from boundaries.
    pub interior_noise: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            vocab_size: 64,
            num_regions: 5,
            boundary_noise: 2.0,
            interior_noise: 0.1,
            temperature: 0.25,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn seq_len(&self) -> usize {
        self.height * self.width
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(invalid("scene h and w must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(invalid("scene n must be at least 2"));
        }
        if self.num_regions == 0 {
            return Err(invalid("scene num_regions must be positive"));
        }
        if self.num_regions > self.seq_len() {
            return Err(invalid(format!(
                "num_regions = {} exceeds the {} grid cells",
                self.num_regions,
                self.seq_len()
            )));
        }
        for (name, v) in [
            ("boundary_noise", self.boundary_noise),
            ("interior_noise", self.interior_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("scene {name} must be finite and >= 0")));
            }
        }
        if self.interior_noise > self.boundary_noise {
            return Err(invalid("scene interior_noise must not exceed boundary_noise"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(invalid("scene temperature must be positive"));
        }
        Ok(())
    }
}

/// Ground-truth tokens in raster order, with region ids and the boundary
/// mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<usize>,
    pub regions: Vec<usize>,
    /// True for cells with an 8-neighbour in a different region.
    pub boundary_mask: Vec<bool>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, pos: usize) -> usize {
        self.tokens[pos]
    }

    pub fn is_boundary(&self, pos: usize) -> bool {
        self.boundary_mask[pos]
    }

    pub fn boundary_fraction(&self) -> f64 {
        self.boundary_mask.iter().filter(|&&b| b).count() as f64 / self.len() as f64
    }
}

/// Seeded Voronoi partition. Distance ties go to the lower site index.
pub fn generate_scene(spec: &SceneSpec) -> Result<TokenGrid> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let cells = h * w;
    let mut rng = keyed_rng(spec.seed, SCENE_STREAM, 0);

    let sites: Vec<(i64, i64)> = index::sample(&mut rng, cells, spec.num_regions)
        .into_iter()
        .map(|c| ((c / w) as i64, (c % w) as i64))
        .collect();
    let mut palette: Vec<usize> = (0..spec.vocab_size).collect();
    palette.shuffle(&mut rng);

    let mut regions = Vec::with_capacity(cells);
    for cell in 0..cells {
        let (r, c) = ((cell / w) as i64, (cell % w) as i64);
        let mut best = 0;
        let mut best_d = i64::MAX;
        for (k, &(sr, sc)) in sites.iter().enumerate() {
            let d = (r - sr).pow(2) + (c - sc).pow(2);
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        regions.push(best);
    }
    let tokens = regions.iter().map(|&k| palette[k % palette.len()]).collect();

    let mut boundary_mask = vec![false; cells];
    for cell in 0..cells {
        let (r, c) = ((cell / w) as i64, (cell % w) as i64);
        'scan: for dr in -1..=1 {
            for dc in -1..=1 {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                if regions[nr as usize * w + nc as usize] != regions[cell] {
                    boundary_mask[cell] = true;
                    break 'scan;
                }
            }
        }
    }

    Ok(TokenGrid {
        height: h,
        width: w,
        tokens,
        regions,
        boundary_mask,
    })
}
