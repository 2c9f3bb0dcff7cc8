//! Per-layer, per-KV-group key/value cache.

use super::ModelConfig;

/// One KV group's stored keys and values.
///
/// `keys` and `values` are `[len][head_dim]` row-major; `positions[i]` is
/// the original position id of row `i` and is strictly increasing.
#[derive(Debug, Clone, Default)]
pub struct GroupCache {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    pub positions: Vec<usize>,
}

impl GroupCache {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Keeps only the rows at `rows` (ascending indices into the cache).
    pub fn keep_rows(&mut self, rows: &[usize], head_dim: usize) {
        debug_assert!(rows.windows(2).all(|w| w[0] < w[1]));
        let take = |src: &[f32]| {
            let mut out = Vec::with_capacity(rows.len() * head_dim);
            for &r in rows {
                out.extend_from_slice(&src[r * head_dim..(r + 1) * head_dim]);
            }
            out
        };
        self.keys = take(&self.keys);
        self.values = take(&self.values);
        self.positions = rows.iter().map(|&r| self.positions[r]).collect();
    }

    /// Appends one key/value row.
    pub fn push_row(&mut self, key: &[f32], value: &[f32], position: usize) {
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.positions.push(position);
    }
}

/// One layer's cache: a [`GroupCache`] per KV group.
///
/// Group lengths within a layer are usually equal, but per-group
/// compression may make them differ; decode handles ragged lengths.
#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    pub groups: Vec<GroupCache>,
}

impl LayerCache {
    pub fn new(num_groups: usize) -> Self {
        Self {
            groups: vec![GroupCache::default(); num_groups],
        }
    }

    /// Keeps `rows` in every group.
    pub fn keep_rows_uniform(&mut self, rows: &[usize], head_dim: usize) {
        for g in &mut self.groups {
            g.keep_rows(rows, head_dim);
        }
    }

    /// Length of the longest group.
    pub fn max_len(&self) -> usize {
        self.groups.iter().map(GroupCache::len).max().unwrap_or(0)
    }
}

/// The full per-layer KV cache of one sequence.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
    /// Logical sequence length: 1 + the highest position ever stored.
    /// Decode continues from here, so pruned caches keep original positions.
    pub seq_len: usize,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            layers: (0..config.num_layers)
                .map(|_| LayerCache::new(config.num_kv_heads))
                .collect(),
            seq_len: 0,
        }
    }
}
