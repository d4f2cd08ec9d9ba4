//! Model Weights Manager: weights are loaded exactly once per engine and
//! never physically moved afterwards. TP activation is a set of rank-aware
//! views over the full tensors — column slices for the fused QKV and FFN up
//! projections, row slices for the output and FFN down projections — so a
//! mode switch changes which elements are read, never where they live.
//!
//! Fused-QKV column layout: columns are grouped per attention head, and each
//! head's block is [Q | K | V], each `head_dim` wide. A rank's contiguous
//! column slice under degree m therefore contains whole heads, each with its
//! own Q, K and V sub-blocks.

use crate::comms::{all_reduce, CommsError, GroupHandle, Payload};
use crate::model::ModelSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::io::{self, Read, Write};
use thiserror::Error;

const DUMP_MAGIC: &[u8; 8] = b"PSWSTOR1";
const TOY_AXIS_LIMIT: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum WeightsError {
    #[error("toy dims exceed the {TOY_AXIS_LIMIT}-per-axis dense verification limit")]
    ToyDimsTooLarge,
    #[error("rank {rank} out of range for degree {degree}")]
    RankOutOfRange { rank: usize, degree: usize },
    #[error("degree {degree} does not divide sharding extent {extent} of {tensor:?}")]
    IndivisibleExtent {
        tensor: TensorKind,
        degree: usize,
        extent: usize,
    },
    #[error("degree {0} is not in the supported set")]
    UnsupportedDegree(usize),
    #[error("group of {group} ranks does not match {stores} stores")]
    GroupSizeMismatch { group: usize, stores: usize },
    #[error("store holds byte accounting only, no element data")]
    NoElementStorage,
    #[error(transparent)]
    Comms(#[from] CommsError),
}

/// Dense dimensions for toy-scale stores (small enough to verify against a
/// dense single-rank forward).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyDims {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
}

impl ToyDims {
    pub fn new(hidden_dim: usize, num_heads: usize, head_dim: usize) -> Self {
        ToyDims {
            hidden_dim,
            num_heads,
            head_dim,
            ffn_dim: 2 * hidden_dim,
        }
    }
}

/// Storage scale: Toy materializes seeded f64 elements for numeric
/// verification; Synthetic does byte accounting only so capacity math can
/// run at real model sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Toy(ToyDims),
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    Qkv,
    O,
    Up,
    Down,
}

impl TensorKind {
    pub const ALL: [TensorKind; 4] = [TensorKind::Qkv, TensorKind::O, TensorKind::Up, TensorKind::Down];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardDim {
    Column,
    Row,
}

#[derive(Debug, Clone)]
struct LayerTensors {
    qkv: Vec<f64>,
    o: Vec<f64>,
    up: Vec<f64>,
    down: Vec<f64>,
}

/// Once-loaded parameter storage for one engine.
#[derive(Debug, Clone)]
pub struct WeightStore {
    num_layers: usize,
    hidden_dim: usize,
    num_heads: usize,
    head_dim: usize,
    ffn_dim: usize,
    data: Option<Vec<LayerTensors>>,
    alloc_bytes_total: u64,
    generation: u64,
}

impl WeightStore {
    /// Bumps only on physical (re)allocation; stays at 1 for the lifetime of
    /// a loaded store no matter how many mode switches happen.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn alloc_bytes_total(&self) -> u64 {
        self.alloc_bytes_total
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn has_elements(&self) -> bool {
        self.data.is_some()
    }

    /// (rows, cols) of one tensor.
    pub fn shape(&self, tensor: TensorKind) -> (usize, usize) {
        let proj = self.num_heads * self.head_dim;
        match tensor {
            TensorKind::Qkv => (self.hidden_dim, 3 * proj),
            TensorKind::O => (proj, self.hidden_dim),
            TensorKind::Up => (self.hidden_dim, self.ffn_dim),
            TensorKind::Down => (self.ffn_dim, self.hidden_dim),
        }
    }

    pub fn elem(&self, layer: usize, tensor: TensorKind, row: usize, col: usize) -> Result<f64, WeightsError> {
        let data = self.data.as_ref().ok_or(WeightsError::NoElementStorage)?;
        let (_, cols) = self.shape(tensor);
        let t = &data[layer];
        let buf = match tensor {
            TensorKind::Qkv => &t.qkv,
            TensorKind::O => &t.o,
            TensorKind::Up => &t.up,
            TensorKind::Down => &t.down,
        };
        Ok(buf[row * cols + col])
    }

    /// Overwrites one element in place. Used to demonstrate that views read
    /// through to live storage (no copies anywhere).
    pub fn set_elem(
        &mut self,
        layer: usize,
        tensor: TensorKind,
        row: usize,
        col: usize,
        value: f64,
    ) -> Result<(), WeightsError> {
        let (_, cols) = self.shape(tensor);
        let data = self.data.as_mut().ok_or(WeightsError::NoElementStorage)?;
        let t = &mut data[layer];
        let buf = match tensor {
            TensorKind::Qkv => &mut t.qkv,
            TensorKind::O => &mut t.o,
            TensorKind::Up => &mut t.up,
            TensorKind::Down => &mut t.down,
        };
        buf[row * cols + col] = value;
        Ok(())
    }
}

/// Zero-copy window into one store tensor: a contiguous [offset, offset +
/// extent) slice along the shard dimension. Reads resolve against the store
/// at access time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardView {
    pub layer: usize,
    pub tensor: TensorKind,
    pub shard_dim: ShardDim,
    pub rank: usize,
    pub degree: usize,
    pub offset: usize,
    pub extent: usize,
}

impl ShardView {
    /// (rows, cols) as seen through the view.
    pub fn shape(&self, store: &WeightStore) -> (usize, usize) {
        let (rows, cols) = store.shape(self.tensor);
        match self.shard_dim {
            ShardDim::Column => (rows, self.extent),
            ShardDim::Row => (self.extent, cols),
        }
    }

    /// Element (i, j) in view coordinates, read through to the store.
    pub fn elem(&self, store: &WeightStore, i: usize, j: usize) -> Result<f64, WeightsError> {
        match self.shard_dim {
            ShardDim::Column => store.elem(self.layer, self.tensor, i, self.offset + j),
            ShardDim::Row => store.elem(self.layer, self.tensor, self.offset + i, j),
        }
    }
}

/// Per-layer active view set under one (rank, degree) assignment.
#[derive(Debug, Clone, Copy)]
pub struct LayerViews {
    pub qkv: ShardView,
    pub o: ShardView,
    pub up: ShardView,
    pub down: ShardView,
}

/// Loads weights once. Toy scale fills tensors with seeded pseudo-random
/// values; Synthetic allocates byte accounting only.
pub fn load_weights(spec: &ModelSpec, seed: u64, scale: Scale) -> Result<WeightStore, WeightsError> {
    match scale {
        Scale::Toy(dims) => {
            if dims.hidden_dim > TOY_AXIS_LIMIT
                || dims.num_heads * dims.head_dim > TOY_AXIS_LIMIT
                || dims.ffn_dim > TOY_AXIS_LIMIT
            {
                return Err(WeightsError::ToyDimsTooLarge);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = WeightStore {
                num_layers: spec.num_layers,
                hidden_dim: dims.hidden_dim,
                num_heads: dims.num_heads,
                head_dim: dims.head_dim,
                ffn_dim: dims.ffn_dim,
                data: None,
                alloc_bytes_total: 0,
                generation: 0,
            };
            let mut layers = Vec::with_capacity(spec.num_layers);
            let mut total_elems = 0usize;
            for _ in 0..spec.num_layers {
                let mut fill = |kind: TensorKind| {
                    let (rows, cols) = store.shape(kind);
                    total_elems += rows * cols;
                    (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()
                };
                layers.push(LayerTensors {
                    qkv: fill(TensorKind::Qkv),
                    o: fill(TensorKind::O),
                    up: fill(TensorKind::Up),
                    down: fill(TensorKind::Down),
                });
            }
            store.data = Some(layers);
            store.alloc_bytes_total = (total_elems * std::mem::size_of::<f64>()) as u64;
            store.generation = 1;
            Ok(store)
        }
        Scale::Synthetic => {
            let proj_heads = spec.num_q_heads();
            Ok(WeightStore {
                num_layers: spec.num_layers,
                hidden_dim: spec.hidden_dim,
                num_heads: proj_heads,
                head_dim: spec.head_dim,
                ffn_dim: 4 * spec.hidden_dim,
                data: None,
                alloc_bytes_total: spec.weight_bytes,
                generation: 1,
            })
        }
    }
}

/// Builds the view for one (tensor, rank, degree) assignment. QKV and Up are
/// column-sharded, O and Down row-sharded; QKV slicing is head-aligned so
/// each rank receives whole heads.
pub fn make_shard_view(
    store: &WeightStore,
    layer: usize,
    tensor: TensorKind,
    rank: usize,
    degree: usize,
) -> Result<ShardView, WeightsError> {
    if degree == 0 || rank >= degree {
        return Err(WeightsError::RankOutOfRange { rank, degree });
    }
    let (rows, cols) = store.shape(tensor);
    let (shard_dim, full_extent) = match tensor {
        TensorKind::Qkv | TensorKind::Up => (ShardDim::Column, cols),
        TensorKind::O | TensorKind::Down => (ShardDim::Row, rows),
    };
    let divisible = match tensor {
        // Head alignment: m must divide the head count, not just the columns.
        TensorKind::Qkv => store.num_heads % degree == 0,
        _ => full_extent % degree == 0,
    };
    if !divisible {
        return Err(WeightsError::IndivisibleExtent {
            tensor,
            degree,
            extent: full_extent,
        });
    }
    let extent = full_extent / degree;
    Ok(ShardView {
        layer,
        tensor,
        shard_dim,
        rank,
        degree,
        offset: rank * extent,
        extent,
    })
}

/// Activates the view set for a new degree. Pure metadata: the store's
/// generation and byte counter are untouched.
pub fn switch_weight_mode(
    store: &WeightStore,
    supported_degrees: &BTreeSet<usize>,
    new_degree: usize,
    rank: usize,
) -> Result<Vec<LayerViews>, WeightsError> {
    if new_degree != 1 && !supported_degrees.contains(&new_degree) {
        return Err(WeightsError::UnsupportedDegree(new_degree));
    }
    (0..store.num_layers)
        .map(|layer| {
            Ok(LayerViews {
                qkv: make_shard_view(store, layer, TensorKind::Qkv, rank, new_degree)?,
                o: make_shard_view(store, layer, TensorKind::O, rank, new_degree)?,
                up: make_shard_view(store, layer, TensorKind::Up, rank, new_degree)?,
                down: make_shard_view(store, layer, TensorKind::Down, rank, new_degree)?,
            })
        })
        .collect()
}

/// Row-major matrix of activations for the toy forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn seeded(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }
}

// x (tokens x k) times a view (k x extent or extent x cols), reading weights
// through the view so no shard is ever materialized.
fn matmul_view(x: &Matrix, store: &WeightStore, view: &ShardView) -> Result<Matrix, WeightsError> {
    let (vrows, vcols) = view.shape(store);
    debug_assert_eq!(x.cols, vrows);
    let mut out = Matrix::zeros(x.rows, vcols);
    for t in 0..x.rows {
        for j in 0..vcols {
            let mut acc = 0.0;
            for k in 0..vrows {
                acc += x.get(t, k) * view.elem(store, k, j)?;
            }
            out.set(t, j, acc);
        }
    }
    Ok(out)
}

/// Sharded attention-linear forward over all layers: per rank, x times the
/// QKV column slice, a head-local q+k+v combine standing in for attention
/// (score computation is out of scope; the partition claims concern the
/// GEMMs and the reduction), then the row-parallel O slice producing a
/// partial output that a single all-reduce completes. Stores must be
/// identical DP replicas, one per rank.
pub fn tp_forward_toy(
    stores: &[&WeightStore],
    group: &[usize],
    x: &Matrix,
    handle: &mut GroupHandle,
) -> Result<Matrix, WeightsError> {
    let m = group.len();
    if m == 0 || stores.len() != m {
        return Err(WeightsError::GroupSizeMismatch {
            group: m,
            stores: stores.len(),
        });
    }
    if handle.members().len() != m {
        return Err(WeightsError::GroupSizeMismatch {
            group: m,
            stores: handle.members().len(),
        });
    }
    let tokens = x.rows;
    let hidden = stores[0].hidden_dim;
    let head_dim = stores[0].head_dim;
    let mut activ = x.clone();
    for layer in 0..stores[0].num_layers {
        let mut payloads = Vec::with_capacity(m);
        for (r, store) in stores.iter().enumerate() {
            let qkv_view = make_shard_view(store, layer, TensorKind::Qkv, r, m)?;
            let o_view = make_shard_view(store, layer, TensorKind::O, r, m)?;
            let local_qkv = matmul_view(&activ, store, &qkv_view)?;
            let local_heads = stores[0].num_heads / m;

            // Head-local passthrough: out = q + k + v per head.
            let mut attn = Matrix::zeros(tokens, local_heads * head_dim);
            for t in 0..tokens {
                for h in 0..local_heads {
                    for d in 0..head_dim {
                        let base = h * 3 * head_dim;
                        let v = local_qkv.get(t, base + d)
                            + local_qkv.get(t, base + head_dim + d)
                            + local_qkv.get(t, base + 2 * head_dim + d);
                        attn.set(t, h * head_dim + d, v);
                    }
                }
            }
            let partial = matmul_view(&attn, store, &o_view)?;
            payloads.push((handle.members()[r], Payload::Elems(partial.data)));
        }
        let reduced = all_reduce(handle, &payloads)?;
        let data = match reduced {
            Payload::Elems(v) => v,
            Payload::Bytes(_) => return Err(WeightsError::Comms(CommsError::PayloadShapeMismatch)),
        };
        activ = Matrix { rows: tokens, cols: hidden, data };
    }
    Ok(activ)
}

/// Serializes a toy store as a 32-byte header (magic, dims) followed by
/// little-endian doubles, per layer in QKV, O, Up, Down order.
pub fn dump_toy_store<W: Write>(store: &WeightStore, mut out: W) -> io::Result<()> {
    let data = store
        .data
        .as_ref()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "synthetic store has no elements"))?;
    out.write_all(DUMP_MAGIC)?;
    for dim in [
        store.num_layers,
        store.hidden_dim,
        store.num_heads,
        store.head_dim,
        store.ffn_dim,
    ] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    out.write_all(&[0u8; 4])?; // pad header to 32 bytes
    for layer in data {
        for buf in [&layer.qkv, &layer.o, &layer.up, &layer.down] {
            for v in buf.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn load_toy_store<R: Read>(mut input: R) -> io::Result<WeightStore> {
    let mut header = [0u8; 32];
    input.read_exact(&mut header)?;
    if &header[0..8] != DUMP_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad magic"));
    }
    let dim_at = |i: usize| {
        u32::from_le_bytes(header[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize
    };
    let (num_layers, hidden_dim, num_heads, head_dim, ffn_dim) =
        (dim_at(0), dim_at(1), dim_at(2), dim_at(3), dim_at(4));
    let mut store = WeightStore {
        num_layers,
        hidden_dim,
        num_heads,
        head_dim,
        ffn_dim,
        data: None,
        alloc_bytes_total: 0,
        generation: 0,
    };
    let mut read_tensor = |rows: usize, cols: usize| -> io::Result<Vec<f64>> {
        let mut buf = vec![0u8; rows * cols * 8];
        input.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let mut layers = Vec::with_capacity(num_layers);
    let mut total = 0usize;
    for _ in 0..num_layers {
        let mut tensors = Vec::with_capacity(4);
        for kind in TensorKind::ALL {
            let (rows, cols) = store.shape(kind);
            total += rows * cols;
            tensors.push(read_tensor(rows, cols)?);
        }
        let mut it = tensors.into_iter();
        layers.push(LayerTensors {
            qkv: it.next().unwrap(),
            o: it.next().unwrap(),
            up: it.next().unwrap(),
            down: it.next().unwrap(),
        });
    }
    store.data = Some(layers);
    store.alloc_bytes_total = (total * 8) as u64;
    store.generation = 1;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;

    fn toy_store(seed: u64) -> WeightStore {
        let spec = presets::toy(2, 8, 2, 4);
        load_weights(&spec, seed, Scale::Toy(ToyDims::new(8, 2, 4))).unwrap()
    }

    #[test]
    fn toy_load_shapes_and_determinism() {
        let store = toy_store(7);
        assert_eq!(store.shape(TensorKind::Qkv), (8, 24)); // 3 * 2 * 4 cols
        assert_eq!(store.generation(), 1);

        let again = toy_store(7);
        for layer in 0..2 {
            for kind in TensorKind::ALL {
                let (rows, cols) = store.shape(kind);
                for i in 0..rows {
                    for j in 0..cols {
                        assert_eq!(
                            store.elem(layer, kind, i, j).unwrap(),
                            again.elem(layer, kind, i, j).unwrap()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn synthetic_load_accounts_bytes_only() {
        let spec = presets::llama70b_like();
        let store = load_weights(&spec, 0, Scale::Synthetic).unwrap();
        assert_eq!(store.alloc_bytes_total(), 140_000_000_000);
        assert!(!store.has_elements());
        assert_eq!(store.elem(0, TensorKind::Qkv, 0, 0), Err(WeightsError::NoElementStorage));
    }

    #[test]
    fn toy_dims_too_large_is_rejected() {
        let spec = presets::toy(1, 512, 2, 4);
        let err = load_weights(&spec, 0, Scale::Toy(ToyDims::new(512, 2, 4))).unwrap_err();
        assert_eq!(err, WeightsError::ToyDimsTooLarge);
    }

    #[test]
    fn shard_view_offsets_follow_rank_arithmetic() {
        let store = toy_store(7);
        // QKV: 24 cols, m=2, r=1 -> offset 12, extent 12
        let v = make_shard_view(&store, 0, TensorKind::Qkv, 1, 2).unwrap();
        assert_eq!((v.offset, v.extent), (12, 12));
        assert_eq!(v.shard_dim, ShardDim::Column);

        // O: 8 rows, m=4, r=0 -> offset 0, extent 2
        let v = make_shard_view(&store, 0, TensorKind::O, 0, 4).unwrap();
        assert_eq!((v.offset, v.extent), (0, 2));
        assert_eq!(v.shard_dim, ShardDim::Row);

        // m=3 does not divide the O extent of 8
        let err = make_shard_view(&store, 0, TensorKind::O, 0, 3).unwrap_err();
        assert!(matches!(err, WeightsError::IndivisibleExtent { extent: 8, .. }));

        let err = make_shard_view(&store, 0, TensorKind::Qkv, 2, 2).unwrap_err();
        assert!(matches!(err, WeightsError::RankOutOfRange { rank: 2, degree: 2 }));
    }

    #[test]
    fn qkv_slicing_is_head_aligned() {
        let store = toy_store(3);
        // 2 heads: m=2 gives one whole head per rank, boundary at 3*head_dim
        for r in 0..2 {
            let v = make_shard_view(&store, 0, TensorKind::Qkv, r, 2).unwrap();
            assert_eq!(v.offset % (3 * 4), 0);
            assert_eq!(v.extent % (3 * 4), 0);
        }
        // m=4 would split heads even though 4 divides 24 columns
        let err = make_shard_view(&store, 0, TensorKind::Qkv, 0, 4).unwrap_err();
        assert!(matches!(err, WeightsError::IndivisibleExtent { .. }));
    }

    #[test]
    fn views_tile_the_extent_exactly() {
        let store = toy_store(9);
        for kind in TensorKind::ALL {
            for m in [1usize, 2] {
                let mut covered = Vec::new();
                for r in 0..m {
                    let v = make_shard_view(&store, 0, kind, r, m).unwrap();
                    covered.push((v.offset, v.offset + v.extent));
                }
                covered.sort();
                let full = match kind {
                    TensorKind::Qkv | TensorKind::Up => store.shape(kind).1,
                    TensorKind::O | TensorKind::Down => store.shape(kind).0,
                };
                assert_eq!(covered.first().unwrap().0, 0);
                assert_eq!(covered.last().unwrap().1, full);
                for w in covered.windows(2) {
                    assert_eq!(w[0].1, w[1].0, "views must be disjoint and covering");
                }
            }
        }
    }

    #[test]
    fn view_reads_observe_store_mutation() {
        let mut store = toy_store(1);
        let v = make_shard_view(&store, 0, TensorKind::Qkv, 1, 2).unwrap();
        let before = v.elem(&store, 0, 0).unwrap();
        store.set_elem(0, TensorKind::Qkv, 0, v.offset, 42.0).unwrap();
        assert_ne!(before, 42.0);
        assert_eq!(v.elem(&store, 0, 0).unwrap(), 42.0);
    }

    #[test]
    fn switch_mode_is_pure_metadata() {
        let store = toy_store(5);
        let degrees: BTreeSet<usize> = [2].into_iter().collect();
        let bytes = store.alloc_bytes_total();
        let views = switch_weight_mode(&store, &degrees, 2, 1).unwrap();
        assert_eq!(views.len(), 2);
        assert_eq!(store.generation(), 1);
        assert_eq!(store.alloc_bytes_total(), bytes);

        // degree 1 covers the full extents
        let full = switch_weight_mode(&store, &degrees, 1, 0).unwrap();
        assert_eq!(full[0].qkv.extent, 24);
        assert_eq!(full[0].o.extent, 8);

        assert_eq!(
            switch_weight_mode(&store, &degrees, 16, 0).unwrap_err(),
            WeightsError::UnsupportedDegree(16)
        );
    }

    #[test]
    fn dump_load_round_trip_is_element_identical() {
        let store = toy_store(11);
        let mut buf = Vec::new();
        dump_toy_store(&store, &mut buf).unwrap();
        assert_eq!(buf.len() % 8, 0);
        let loaded = load_toy_store(buf.as_slice()).unwrap();
        for layer in 0..2 {
            for kind in TensorKind::ALL {
                let (rows, cols) = store.shape(kind);
                for i in 0..rows {
                    for j in 0..cols {
                        assert_eq!(
                            store.elem(layer, kind, i, j).unwrap(),
                            loaded.elem(layer, kind, i, j).unwrap()
                        );
                    }
                }
            }
        }
    }
}
