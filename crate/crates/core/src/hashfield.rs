//! Unified multi-resolution hash grid with learned, camera-conditioned interpolation.
//!
//! Each level `l` discretizes the unit hypercube of query tokens into
//! `N_l = N_base · 2^(l-1)` cells per axis. A token's enclosing cell has
//! `K = 2^d` corners ("hyper-vertices"). Corners of every level are first
//! rescaled onto the finest grid, so a coarse vertex and the fine vertex at the
//! same position share one slot, and then hashed into a single table that all
//! levels share. Instead of multilinear interpolation, a small MLP reads the
//! token's offset inside its cell together with the camera code and predicts the
//! `K` corner weights.

use rand::Rng;

use crate::autodiff::{Activation, Tape, Var};
use crate::encoders::{CAMERA_CODE, QUERY_DIM};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::Real;

/// Per-axis multipliers of the XOR hash. The first axis uses 1 for cache coherence.
pub const HASH_PRIMES: [u32; 5] = [1, 2_654_435_761, 805_459_861, 3_674_653_429, 2_097_192_037];
/// Number of corners of a cell in the query space.
pub const CORNERS: usize = 1 << QUERY_DIM;
const WEIGHT_HIDDEN: usize = 64;
const TABLE_INIT: f32 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelSpec {
    /// One-based level index.
    pub level: usize,
    /// Cells per axis.
    pub resolution: u32,
}

/// `N_l = n_base · 2^(l-1)` for `l = 1..=levels`.
pub fn level_specs(levels: usize, n_base: u32) -> Result<Vec<LevelSpec>> {
    if levels == 0 || n_base < 2 {
        return Err(Error::Config(format!("need levels >= 1 and n_base >= 2, got {levels} and {n_base}")));
    }
    (1..=levels)
        .map(|level| {
            n_base
                .checked_shl(level as u32 - 1)
                .filter(|r| (r.leading_zeros() as usize) > 1)
                .map(|resolution| LevelSpec { level, resolution })
                .ok_or_else(|| Error::Config(format!("level {level} resolution overflows")))
        })
        .collect()
}

/// Enclosing cell of a point: base corner, offset inside the cell, and all `2^d` corners.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperVertexSet {
    pub base_cell: Vec<u32>,
    pub offset: Vec<f64>,
    pub corners: Vec<Vec<u32>>,
}

/// Base cell is `floor(q·N)` clamped to `[0, N-1]`, so a component equal to 1.0
/// lands in the last cell with offset 1.0.
pub fn quantize(q: &[f64], resolution: u32) -> HyperVertexSet {
    let n = resolution as f64;
    let mut base_cell = Vec::with_capacity(q.len());
    let mut offset = Vec::with_capacity(q.len());
    for &c in q {
        let scaled = c * n;
        let b = (scaled.floor().max(0.0) as u32).min(resolution - 1);
        base_cell.push(b);
        offset.push(scaled - b as f64);
    }
    let d = q.len();
    let corners = (0..1usize << d)
        .map(|k| base_cell.iter().enumerate().map(|(j, &b)| b + ((k >> j) & 1) as u32).collect())
        .collect();
    HyperVertexSet { base_cell, offset, corners }
}

/// Rescales a vertex of a level with `from_resolution` cells onto the finest grid.
pub fn cross_level_map(corner: &[u32], from_resolution: u32, finest_resolution: u32) -> Vec<u32> {
    let factor = finest_resolution / from_resolution;
    corner.iter().map(|&c| c * factor).collect()
}

/// `(⊕_j coords[j]·π_j) mod table_size` with wrapping 32-bit products.
/// `table_size` must be a power of two.
pub fn hash_index(coords: &[u32], table_size: usize) -> usize {
    debug_assert!(table_size.is_power_of_two());
    let h = coords
        .iter()
        .zip(HASH_PRIMES.iter().cycle())
        .fold(0u32, |acc, (&c, &p)| acc ^ c.wrapping_mul(p));
    (h as usize) & (table_size - 1)
}

/// Single `[T, F_h]` table shared by every level.
#[derive(Clone, Debug)]
pub struct UnifiedHashTable {
    pub param: ParamId,
    pub size: usize,
    pub features: usize,
}

impl UnifiedHashTable {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, rng: &mut R, size: usize, features: usize) -> Result<Self> {
        if !size.is_power_of_two() || size > (1 << 31) {
            return Err(Error::Config(format!("table size {size} must be a power of two <= 2^31")));
        }
        if features == 0 {
            return Err(Error::Config("table needs at least one feature per slot".into()));
        }
        let param = store.add("hash.table", uniform(rng, vec![size, features], TABLE_INIT))?;
        Ok(Self { param, size, features })
    }
}

/// `MLP_w`: `[offset (5), camera code (16)] → 64 → K logits`, one network for all levels.
#[derive(Clone, Debug)]
pub struct WeightPredictor {
    pub mlp: Mlp,
    /// Skip the softmax and use raw MLP outputs as weights.
    pub raw: bool,
}

impl WeightPredictor {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, rng: &mut R, raw: bool) -> Result<Self> {
        let mlp = Mlp::new(
            store,
            rng,
            "hash.weights",
            &[QUERY_DIM + CAMERA_CODE, WEIGHT_HIDDEN, CORNERS],
            Activation::Relu,
            None,
        )?;
        Ok(Self { mlp, raw })
    }

    /// `offset: [B, 5]`, `cam: [B, 16]` → `[B, 32]` weights.
    pub fn predict<T: Real>(&self, tape: &mut Tape<'_, T>, offset: Var, cam: Var) -> Result<Var> {
        let x = tape.concat(&[offset, cam])?;
        let logits = self.mlp.forward(tape, x)?;
        Ok(if self.raw { logits } else { tape.softmax(logits) })
    }
}

/// Per-level quantization of a batch of tokens: table slots of all corners and
/// the constant shift that turns `q·N` into the in-cell offset.
pub struct LevelLookup<T> {
    pub slots: Vec<usize>,
    pub shift: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct HashField {
    pub specs: Vec<LevelSpec>,
    pub table: UnifiedHashTable,
    pub weights: WeightPredictor,
}

impl HashField {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        levels: usize,
        n_base: u32,
        table_size: usize,
        features: usize,
        raw_weights: bool,
    ) -> Result<Self> {
        let specs = level_specs(levels, n_base)?;
        let table = UnifiedHashTable::new(store, rng, table_size, features)?;
        let weights = WeightPredictor::new(store, rng, raw_weights)?;
        Ok(Self { specs, table, weights })
    }

    pub fn finest_resolution(&self) -> u32 {
        self.specs.last().unwrap().resolution
    }

    pub fn output_width(&self) -> usize {
        self.specs.len() * self.table.features
    }

    /// Quantizes a `[B, 5]` batch of tokens at one level.
    pub fn lookup<T: Real>(&self, tokens: &[T], spec: LevelSpec) -> LevelLookup<T> {
        let n = spec.resolution;
        let nf = T::from_u32(n).unwrap();
        let factor = self.finest_resolution() / n;
        let rows = tokens.len() / QUERY_DIM;
        let mut slots = Vec::with_capacity(rows * CORNERS);
        let mut shift = Vec::with_capacity(tokens.len());
        let mut base = [0u32; QUERY_DIM];
        let mut corner = [0u32; QUERY_DIM];
        for row in tokens.chunks(QUERY_DIM) {
            for (j, &c) in row.iter().enumerate() {
                let scaled = (c * nf).floor().to_f64_lossy();
                let b = (scaled.max(0.0) as u32).min(n - 1);
                base[j] = b;
                shift.push(-T::from_u32(b).unwrap());
            }
            for k in 0..CORNERS {
                for j in 0..QUERY_DIM {
                    corner[j] = (base[j] + ((k >> j) & 1) as u32) * factor;
                }
                slots.push(hash_index(&corner, self.table.size));
            }
        }
        LevelLookup { slots, shift }
    }

    /// One level: quantize, look up corner features, predict weights, aggregate → `[B, F_h]`.
    pub fn encode_level<T: Real>(&self, tape: &mut Tape<'_, T>, query: Var, cam: Var, spec: LevelSpec) -> Result<Var> {
        let (_, d) = tape.value(query).rows_cols();
        if d != QUERY_DIM {
            return Err(Error::Dimension(format!("query tokens need {QUERY_DIM} components, got {d}")));
        }
        let lk = self.lookup(tape.value(query).values(), spec);
        let offset = tape.affine(query, T::from_u32(spec.resolution).unwrap(), Some(&lk.shift))?;
        let w = self.weights.predict(tape, offset, cam)?;
        let feats = tape.embedding(self.table.param, lk.slots)?;
        tape.weighted_sum(w, feats)
    }

    /// All levels, concatenated in level order → `[B, L·F_h]`.
    pub fn encode_multiscale<T: Real>(&self, tape: &mut Tape<'_, T>, queries: &[Var], cam: Var) -> Result<Var> {
        if queries.len() != self.specs.len() {
            return Err(Error::Contract(format!(
                "{} query tokens for {} levels",
                queries.len(),
                self.specs.len()
            )));
        }
        let parts = queries
            .iter()
            .zip(&self.specs)
            .map(|(&q, &spec)| self.encode_level(tape, q, cam, spec))
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&parts)
    }
}
