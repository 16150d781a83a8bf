//! Tile-size selection for vector graphs, matmuls and cube-vector groups.

mod cube;
mod vector;

pub use cube::{tile_cube_vector, tile_matmul, MatmulTiling};
pub(crate) use vector::classify_spaces;
pub use vector::{tile_vector_graph, TensorSpace, VectorLayout};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::TileError;
use crate::graph::{OperatorGraph, TensorId};

/// Modeled per-unit costs used by the timing simulator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingParams {
    pub decode: f64,
    pub dma_per_byte: f64,
    pub vector_per_elem: f64,
    pub cube_per_mac: f64,
    pub sync: f64,
    /// Fixed cost of one kernel launch.
    pub launch: f64,
}

impl Default for TimingParams {
    fn default() -> Self {
        TimingParams {
            decode: 1.0,
            dma_per_byte: 0.5,
            vector_per_elem: 1.0,
            cube_per_mac: 1.0,
            sync: 2.0,
            launch: 50.0,
        }
    }
}

impl TimingParams {
    fn is_valid(&self) -> bool {
        [
            self.decode,
            self.dma_per_byte,
            self.vector_per_elem,
            self.cube_per_mac,
            self.sync,
            self.launch,
        ]
        .iter()
        .all(|c| c.is_finite() && *c >= 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub num_cores: usize,
    pub local_mem_bytes: usize,
    pub instr_width_bytes: usize,
    /// Per-tile overhead term of the cost model.
    pub tile_overhead: u64,
    /// Row/column alignment of matmul tiles.
    pub cube_align: usize,
    pub timing: TimingParams,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            num_cores: 40,
            local_mem_bytes: 192 * 1024,
            instr_width_bytes: 32,
            tile_overhead: 2,
            cube_align: 16,
            timing: TimingParams::default(),
        }
    }
}

impl DeviceConfig {
    pub fn new(
        num_cores: usize,
        local_mem_bytes: usize,
        instr_width_bytes: usize,
    ) -> Result<Self, TileError> {
        let cfg = DeviceConfig {
            num_cores,
            local_mem_bytes,
            instr_width_bytes,
            ..DeviceConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TileError> {
        let bad = |what: &str| {
            Err(TileError::Infeasible(format!(
                "invalid device config: {what}"
            )))
        };
        if self.num_cores == 0 {
            return bad("num_cores must be >= 1");
        }
        if self.local_mem_bytes == 0 {
            return bad("local_mem_bytes must be >= 1");
        }
        if !self.instr_width_bytes.is_power_of_two() {
            return bad("instruction width must be a power of two");
        }
        if self.cube_align == 0 {
            return bad("cube_align must be >= 1");
        }
        if !self.timing.is_valid() {
            return bad("timing parameters must be finite and non-negative");
        }
        Ok(())
    }

    /// Elements of `dtype_bytes` width covered by one hardware instruction.
    pub fn width_elems(&self, dtype_bytes: usize) -> usize {
        (self.instr_width_bytes / dtype_bytes).max(1)
    }
}

/// Bottleneck workload of the busiest core: `ceil(ceil(total/tile)/n) * (tile + 2)`.
pub fn tiling_cost(tile_size: usize, total: usize, n_cores: usize) -> u64 {
    tiling_cost_with(tile_size, total, n_cores, 2)
}

pub fn tiling_cost_with(tile_size: usize, total: usize, n_cores: usize, overhead: u64) -> u64 {
    let tiles = total.div_ceil(tile_size) as u64;
    tiles.div_ceil(n_cores as u64) * (tile_size as u64 + overhead)
}

/// Result of the tile-multiplier search.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignChoice {
    /// Cost-minimizing multiplier before alignment.
    pub best_multiplier: usize,
    pub best_cost: u64,
    /// Multiplier after rounding to the instruction width.
    pub multiplier: usize,
}

/// Searches `t` in `[1, t_max / l_prime]` for the cheapest tile `t * l_prime`
/// (ties to the smaller `t`), then rounds the tile up to the instruction width
/// without exceeding `t_max`.
pub fn align_search(
    t_max: usize,
    l_prime: usize,
    total: usize,
    cfg: &DeviceConfig,
    dtype_bytes: usize,
) -> AlignChoice {
    assert!(
        l_prime >= 1 && l_prime <= t_max,
        "l_prime must be in [1, t_max]"
    );
    let upper = t_max / l_prime;
    // Past one tile the cost only grows.
    let useful = upper.min(total.div_ceil(l_prime)).max(1);
    let mut best = (1, u64::MAX);
    for t in 1..=useful {
        let c = tiling_cost_with(t * l_prime, total, cfg.num_cores, cfg.tile_overhead);
        if c < best.1 {
            best = (t, c);
        }
    }
    let (t_star, best_cost) = best;
    let width = cfg.width_elems(dtype_bytes);
    let multiplier = if l_prime == 1 {
        (t_star.div_ceil(width) * width).min(t_max)
    } else {
        (t_star..=upper)
            .find(|t| (t * l_prime).is_multiple_of(width))
            .unwrap_or(t_star)
    };
    AlignChoice {
        best_multiplier: t_star,
        best_cost,
        multiplier,
    }
}

pub fn hardware_align_div(
    t_max: usize,
    l_prime: usize,
    total: usize,
    cfg: &DeviceConfig,
    dtype_bytes: usize,
) -> usize {
    align_search(t_max, l_prime, total, cfg, dtype_bytes).multiplier
}

#[derive(Clone, Debug, PartialEq)]
pub enum TilingKind {
    Vector(VectorLayout),
    Cube(MatmulTiling),
}

/// A group together with its chosen tiling.
#[derive(Clone, Debug, PartialEq)]
pub struct TiledGraph {
    pub graph: OperatorGraph,
    pub kind: TilingKind,
    /// Iteration space being tiled.
    pub dominant: Vec<usize>,
    /// Full-tile size in elements.
    pub tile_elems: usize,
    pub total_elems: usize,
    pub tiles: usize,
    /// Elements in the last tile.
    pub tail: usize,
    pub t_max: usize,
    pub live_peak: usize,
    /// Byte width of the widest dtype in the group.
    pub elem_bytes: usize,
    /// Cost-minimizing tile size before alignment and its cost.
    pub best_size: usize,
    pub best_cost: u64,
    pub cost: u64,
    /// Output elements per full tile, per op.
    pub op_tiles: Vec<usize>,
    pub spaces: HashMap<TensorId, TensorSpace>,
}

impl TiledGraph {
    pub fn is_cube(&self) -> bool {
        matches!(self.kind, TilingKind::Cube(_))
    }

    pub fn matmul(&self) -> Option<&MatmulTiling> {
        match &self.kind {
            TilingKind::Cube(m) => Some(m),
            TilingKind::Vector(_) => None,
        }
    }

    pub fn space(&self, t: TensorId) -> TensorSpace {
        self.spaces.get(&t).copied().unwrap_or(TensorSpace::Full)
    }

    /// Row width folded out of the tile in row layout; 1 otherwise.
    pub fn row_width(&self) -> usize {
        match self.kind {
            TilingKind::Vector(VectorLayout::Rows { width }) => width,
            _ => 1,
        }
    }

    /// `(elements per full tile, total elements)` of buffers in `space`.
    pub fn extent(&self, space: TensorSpace) -> (usize, usize) {
        match space {
            TensorSpace::Full => (self.tile_elems, self.total_elems),
            TensorSpace::Reduced => {
                let w = self.row_width();
                (self.tile_elems / w, self.total_elems / w)
            }
        }
    }

    /// Tiles per core under the static assignment.
    pub fn body_tile(&self, n_cores: usize) -> usize {
        self.tiles.div_ceil(n_cores.min(self.tiles).max(1))
    }
}

/// Dispatches to the vector or cube tiler depending on the group's ops.
pub fn tile_group(g: &OperatorGraph, cfg: &DeviceConfig) -> Result<TiledGraph, TileError> {
    if g.has_matmul() {
        tile_cube_vector(g, cfg)
    } else {
        tile_vector_graph(g, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_examples() {
        assert_eq!(tiling_cost(820, 32768, 40), 822);
        assert_eq!(tiling_cost(819, 32768, 40), 1642);
        assert_eq!(tiling_cost(32768, 32768, 40), 32770);
    }

    #[test]
    fn golden_alignment() {
        let cfg = DeviceConfig::default();
        let choice = align_search(32768, 1, 32768, &cfg, 2);
        assert_eq!(choice.best_multiplier, 820);
        assert_eq!(choice.best_cost, 822);
        assert_eq!(choice.multiplier, 832);
        assert_eq!(hardware_align_div(16, 16, 16, &cfg, 2), 1);
    }

    #[test]
    fn small_scan_matches_brute_force() {
        let cfg = DeviceConfig {
            num_cores: 10,
            instr_width_bytes: 16,
            ..DeviceConfig::default()
        };
        let brute = (1..=100)
            .min_by_key(|&t| (tiling_cost(t, 1000, 10), t))
            .unwrap();
        let choice = align_search(100, 1, 1000, &cfg, 2);
        assert_eq!(choice.best_multiplier, brute);
        assert_eq!(choice.multiplier, (brute.div_ceil(8) * 8).min(100));
    }

    #[test]
    fn config_validation() {
        assert!(DeviceConfig::new(0, 1024, 32).is_err());
        assert!(DeviceConfig::new(4, 1024, 24).is_err());
        assert!(DeviceConfig::new(4, 1024, 32).is_ok());
    }
}
