//! Minibatch forward/backward over a sampled computation graph.

use super::{Layer, Matrix, ModelParams, Scalar};
use crate::error::{Error, Result};
use crate::partition::PartitionedSubgraph;
use crate::sampler::{Block, ComputationGraph};

/// Locally cached embeddings of halo vertices, one row per (slot, layer) for
/// layers `1..=layers`. Slots follow the subgraph's remote ordering.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RemoteCache {
    num_remote: usize,
    layers: usize,
    dim: usize,
    data: Vec<f32>,
    present: Vec<bool>,
}

impl RemoteCache {
    pub fn new(num_remote: usize, layers: usize, dim: usize) -> Self {
        RemoteCache {
            num_remote,
            layers,
            dim,
            data: vec![0.0; num_remote * layers * dim],
            present: vec![false; num_remote * layers],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.present.iter().filter(|p| **p).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn at(&self, slot: usize, layer: usize) -> Option<usize> {
        (slot < self.num_remote && (1..=self.layers).contains(&layer))
            .then(|| (layer - 1) * self.num_remote + slot)
    }

    pub fn insert(&mut self, slot: usize, layer: usize, row: &[f32]) -> Result<()> {
        let i = self
            .at(slot, layer)
            .ok_or_else(|| Error::shape(format!("cache slot {slot} layer {layer} out of range")))?;
        if row.len() != self.dim {
            return Err(Error::shape(format!(
                "cached row has {} values, cache dim is {}",
                row.len(),
                self.dim
            )));
        }
        self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(row);
        self.present[i] = true;
        Ok(())
    }

    pub fn get(&self, slot: usize, layer: usize) -> Option<&[f32]> {
        let i = self.at(slot, layer)?;
        self.present[i].then(|| &self.data[i * self.dim..(i + 1) * self.dim])
    }
}

/// Sums `rows` in the given order and divides by their count.
pub fn aggregate_mean<'a, T: Scalar>(rows: impl Iterator<Item = &'a [T]>, out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    let mut count = 0usize;
    for row in rows {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
        count += 1;
    }
    let c = T::from_usize(count.max(1));
    out.iter_mut().for_each(|o| *o = *o / c);
}

/// `out = z . W + b`
pub(crate) fn affine<T: Scalar>(z: &[T], layer: &Layer<T>, out: &mut [T]) {
    out.copy_from_slice(&layer.bias);
    for (i, &zi) in z.iter().enumerate() {
        if zi == T::zero() {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(layer.weight.row(i)) {
            *o += zi * w;
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerOutput<T> {
    /// Mean-aggregated inputs, one row per destination.
    pub z: Matrix<T>,
    /// `z . W + b`
    pub pre: Matrix<T>,
    /// ReLU(pre) for hidden layers, `pre` for the output layer.
    pub h: Matrix<T>,
}

/// Applies one layer to a block, given `h_src` rows aligned with `block.src`.
pub fn layer_forward<T: Scalar>(
    layer: &Layer<T>,
    block: &Block,
    h_src: &Matrix<T>,
    relu: bool,
) -> Result<LayerOutput<T>> {
    let (d_in, d_out) = (layer.weight.rows(), layer.weight.cols());
    if h_src.cols() != d_in {
        return Err(Error::shape(format!(
            "layer expects {d_in}-dim inputs, got {}",
            h_src.cols()
        )));
    }
    if h_src.rows() != block.src.len() {
        return Err(Error::shape(format!(
            "block has {} sources but {} input rows",
            block.src.len(),
            h_src.rows()
        )));
    }
    let n = block.dst.len();
    let mut z = Matrix::zeros(n, d_in);
    let mut pre = Matrix::zeros(n, d_out);
    for i in 0..n {
        aggregate_mean(
            block.members(i).iter().map(|&p| h_src.row(p as usize)),
            z.row_mut(i),
        );
        affine(z.row(i), layer, pre.row_mut(i));
    }
    let mut h = pre.clone();
    if relu {
        h.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = v.max(T::zero()));
    }
    Ok(LayerOutput { z, pre, h })
}

#[derive(Clone, Debug)]
pub struct MinibatchOutput<T> {
    pub inputs: Vec<Matrix<T>>,
    pub layers: Vec<LayerOutput<T>>,
}

impl<T: Scalar> MinibatchOutput<T> {
    /// Output-layer logits, one row per target.
    pub fn logits(&self) -> &Matrix<T> {
        &self.layers.last().expect("at least one layer").h
    }
}

fn gather_inputs<T: Scalar>(
    sub: &PartitionedSubgraph,
    cache: &RemoteCache,
    block: &Block,
    l: usize,
    prev: Option<&Matrix<T>>,
    d_in: usize,
) -> Result<Matrix<T>> {
    let mut h_src = Matrix::zeros(block.src.len(), d_in);
    for (p, &u) in block.src.iter().enumerate() {
        let dst = h_src.row_mut(p);
        if block.src_remote[p] {
            let layer = ComputationGraph::cache_layer(l);
            let row =
                cache
                    .get(block.src_slot[p] as usize, layer)
                    .ok_or(Error::MissingCacheEntry {
                        node: sub.global_id(u).0,
                        layer: layer as u8,
                    })?;
            if row.len() != d_in {
                return Err(Error::shape(
                    "cached embedding width differs from layer input",
                ));
            }
            dst.iter_mut()
                .zip(row)
                .for_each(|(d, &v)| *d = T::from_f32(v));
        } else if let Some(prev) = prev {
            dst.copy_from_slice(prev.row(block.src_slot[p] as usize));
        } else {
            let row = sub.feature_row(u);
            if row.len() != d_in {
                return Err(Error::shape("feature width differs from first layer input"));
            }
            dst.iter_mut()
                .zip(row)
                .for_each(|(d, &v)| *d = T::from_f32(v));
        }
    }
    Ok(h_src)
}

pub fn minibatch_forward<T: Scalar>(
    params: &ModelParams<T>,
    cg: &ComputationGraph,
    sub: &PartitionedSubgraph,
    cache: &RemoteCache,
) -> Result<MinibatchOutput<T>> {
    let layers = params.num_layers();
    if cg.num_layers() != layers {
        return Err(Error::shape(format!(
            "computation graph has {} blocks for a {layers}-layer model",
            cg.num_layers()
        )));
    }
    let mut inputs = Vec::with_capacity(layers);
    let mut outs: Vec<LayerOutput<T>> = Vec::with_capacity(layers);
    for (bi, (block, layer)) in cg.blocks.iter().zip(&params.layers).enumerate() {
        let prev = outs.last().map(|o| &o.h);
        let h_src = gather_inputs(sub, cache, block, bi + 1, prev, layer.weight.rows())?;
        let out = layer_forward(layer, block, &h_src, bi + 1 < layers)?;
        inputs.push(h_src);
        outs.push(out);
    }
    Ok(MinibatchOutput {
        inputs,
        layers: outs,
    })
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[u32]) -> Result<(T, Matrix<T>)> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n || n == 0 {
        return Err(Error::shape("one label per logit row required"));
    }
    let inv_n = T::one() / T::from_usize(n);
    let mut grad = Matrix::zeros(n, c);
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= c {
            return Err(Error::shape(format!("label {y} outside {c} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y];
        for (g, &v) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (v - lse).exp() * inv_n;
        }
        grad.row_mut(i)[y] -= inv_n;
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    Ok((loss, grad))
}

/// Loss of a minibatch and exact gradients for every weight and bias. Cached
/// remote rows are constants: no gradient flows into them.
pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    cg: &ComputationGraph,
    sub: &PartitionedSubgraph,
    cache: &RemoteCache,
) -> Result<(T, ModelParams<T>)> {
    let labels = cg
        .targets()
        .iter()
        .map(|&t| sub.label(t).ok_or(Error::BadTarget(sub.global_id(t).0)))
        .collect::<Result<Vec<_>>>()?;
    let fwd = minibatch_forward(params, cg, sub, cache)?;
    let (loss, mut delta) = cross_entropy(fwd.logits(), &labels)?;

    let mut grads = ModelParams::zeros(&params.dims());
    for l in (0..params.num_layers()).rev() {
        let block = &cg.blocks[l];
        let out = &fwd.layers[l];
        let layer = &params.layers[l];
        let g = &mut grads.layers[l];
        for i in 0..block.dst.len() {
            let (z, d) = (out.z.row(i), delta.row(i));
            for (r, &zr) in z.iter().enumerate() {
                if zr == T::zero() {
                    continue;
                }
                for (gw, &dv) in g.weight.row_mut(r).iter_mut().zip(d) {
                    *gw += zr * dv;
                }
            }
            for (gb, &dv) in g.bias.iter_mut().zip(d) {
                *gb += dv;
            }
        }
        if l == 0 {
            break;
        }
        // Back through W and the mean aggregation into block l-1's outputs.
        let below = &fwd.layers[l - 1];
        let d_in = layer.weight.rows();
        let mut next = Matrix::zeros(below.h.rows(), d_in);
        let mut dz = vec![T::zero(); d_in];
        for i in 0..block.dst.len() {
            let d = delta.row(i);
            for (r, dzr) in dz.iter_mut().enumerate() {
                *dzr = layer
                    .weight
                    .row(r)
                    .iter()
                    .zip(d)
                    .fold(T::zero(), |acc, (&w, &dv)| acc + w * dv);
            }
            let members = block.members(i);
            let share = T::one() / T::from_usize(members.len());
            for &p in members {
                let p = p as usize;
                if block.src_remote[p] {
                    continue;
                }
                let row = next.row_mut(block.src_slot[p] as usize);
                for (acc, &v) in row.iter_mut().zip(&dz) {
                    *acc += v * share;
                }
            }
        }
        for (gv, &pre) in next.as_mut_slice().iter_mut().zip(below.pre.as_slice()) {
            if pre <= T::zero() {
                *gv = T::zero();
            }
        }
        delta = next;
    }
    Ok((loss, grads))
}
