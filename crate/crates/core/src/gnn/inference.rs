//! Full-neighborhood, layer-by-layer inference over a client's local edges.

use super::engine::{affine, aggregate_mean};
use super::{Matrix, ModelParams, Scalar};
use crate::error::{Error, Result};
use crate::graph::Split;
use crate::partition::PartitionedSubgraph;

/// Computes `h^1..h^upto` for every local vertex using only local-local
/// edges; halo vertices are ignored. Rows follow local index order.
pub fn layerwise_inference<T: Scalar>(
    params: &ModelParams<T>,
    sub: &PartitionedSubgraph,
    upto: usize,
) -> Result<Vec<Matrix<T>>> {
    let layers = params.num_layers();
    if upto > layers {
        return Err(Error::param(format!(
            "upto = {upto} exceeds {layers} layers"
        )));
    }
    let n = sub.num_local();
    let d0 = sub.feature_dim();
    if params.layers.first().is_some_and(|l| l.weight.rows() != d0) {
        return Err(Error::shape("first layer width differs from feature dim"));
    }
    // Local indices ascend with global ID, so inserting `v` into its sorted
    // local neighbor list yields the canonical summation order.
    let members: Vec<Vec<u32>> = (0..n as u32)
        .map(|v| {
            let nbrs = sub.local_neighbors(v);
            let at = nbrs.partition_point(|&u| u < v);
            let mut m = Vec::with_capacity(nbrs.len() + 1);
            m.extend_from_slice(&nbrs[..at]);
            m.push(v);
            m.extend_from_slice(&nbrs[at..]);
            m
        })
        .collect();

    let mut h = Matrix::from_vec(
        n,
        d0,
        (0..n as u32)
            .flat_map(|v| sub.feature_row(v).iter().map(|&x| T::from_f32(x)))
            .collect(),
    );
    let mut out = Vec::with_capacity(upto);
    for (l, layer) in params.layers.iter().enumerate().take(upto) {
        let relu = l + 1 < layers;
        let mut z = vec![T::zero(); layer.weight.rows()];
        let mut next = Matrix::zeros(n, layer.weight.cols());
        for (v, m) in members.iter().enumerate() {
            aggregate_mean(m.iter().map(|&u| h.row(u as usize)), &mut z);
            let row = next.row_mut(v);
            affine(&z, layer, row);
            if relu {
                row.iter_mut().for_each(|x| *x = x.max(T::zero()));
            }
        }
        out.push(next.clone());
        h = next;
    }
    Ok(out)
}

/// Predicted class of every local vertex (ties go to the lowest class).
pub fn predict<T: Scalar>(params: &ModelParams<T>, sub: &PartitionedSubgraph) -> Result<Vec<u32>> {
    let logits = layerwise_inference(params, sub, params.num_layers())?
        .pop()
        .ok_or_else(|| Error::param("model has no layers"))?;
    Ok((0..logits.rows())
        .map(|v| {
            let row = logits.row(v);
            let mut best = 0;
            for (c, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect())
}

/// Fraction of vertices in `split` whose predicted class equals their label.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    sub: &PartitionedSubgraph,
    split: Split,
) -> Result<f64> {
    let nodes: Vec<u32> = (0..sub.num_local() as u32)
        .filter(|&v| sub.split(v) == split)
        .collect();
    if nodes.is_empty() {
        return Err(Error::param(format!("no vertices in the {split:?} split")));
    }
    let pred = predict(params, sub)?;
    let correct = nodes
        .iter()
        .filter(|&&v| sub.label(v) == Some(pred[v as usize]))
        .count();
    Ok(correct as f64 / nodes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::{minibatch_forward, Layer, RemoteCache};
    use crate::graph::{synth_graph, Graph, SbmSpec};
    use crate::sampler::{sample_minibatch, Fanout};

    fn identity(d: usize) -> ModelParams<f64> {
        let mut p = ModelParams::zeros(&[d, d]);
        for i in 0..d {
            p.layers[0].weight.row_mut(i)[i] = 1.0;
        }
        p
    }

    #[test]
    fn isolated_vertex_uses_its_own_features() {
        let g = Graph::from_edges(
            2,
            &[],
            2,
            2,
            vec![1.0, -2.0, 3.0, 4.0],
            vec![0, 1],
            vec![Split::Test; 2],
        )
        .unwrap();
        let sub = PartitionedSubgraph::whole(&g);
        let mut p = ModelParams::<f64>::glorot(&[2, 3, 2], 4);
        p.layers[0].bias = vec![0.1, -0.2, 0.3];
        let h1 = &layerwise_inference(&p, &sub, 1).unwrap()[0];
        let mut expect = vec![0.0; 3];
        affine(&[1.0, -2.0], &p.layers[0], &mut expect);
        expect.iter_mut().for_each(|x: &mut f64| *x = x.max(0.0));
        assert_eq!(h1.row(0), expect.as_slice());
    }

    #[test]
    fn clique_rows_equal_centroid() {
        let edges = [(0, 1), (0, 2), (1, 2)];
        let feats = vec![1.0, 0.0, 2.0, 3.0, 0.0, 3.0];
        let g =
            Graph::from_edges(3, &edges, 2, 2, feats, vec![0; 3], vec![Split::None; 3]).unwrap();
        let sub = PartitionedSubgraph::whole(&g);
        // The last layer has no activation, so this one-layer model is linear.
        let h = &layerwise_inference(&identity(2), &sub, 1).unwrap()[0];
        for v in 0..3 {
            assert_eq!(h.row(v), &[1.0, 2.0]);
        }
    }

    #[test]
    fn matches_full_fanout_minibatch_forward() {
        let g = synth_graph(&SbmSpec {
            blocks: 2,
            nodes_per_block: 10,
            p_intra: 0.4,
            p_inter: 0.1,
            feature_dim: 5,
            num_classes: 2,
            seed: 2,
            ..SbmSpec::default()
        })
        .unwrap();
        let sub = PartitionedSubgraph::whole(&g);
        let p = ModelParams::<f32>::glorot(&[5, 6, 2], 8);
        let full = layerwise_inference(&p, &sub, 2).unwrap();
        let train = sub.train_nodes();
        let cg = sample_minibatch(&sub, &train, &Fanout::full(2), 0).unwrap();
        let fwd = minibatch_forward(&p, &cg, &sub, &RemoteCache::default()).unwrap();
        for (i, &t) in cg.targets().iter().enumerate() {
            assert_eq!(fwd.logits().row(i), full[1].row(t as usize));
        }
        for (i, &d) in cg.blocks[0].dst.iter().enumerate() {
            assert_eq!(fwd.layers[0].h.row(i), full[0].row(d as usize));
        }
    }

    #[test]
    fn empty_split_cannot_be_evaluated() {
        let g = Graph::from_edges(1, &[], 1, 1, vec![0.0], vec![0], vec![Split::Train]).unwrap();
        let sub = PartitionedSubgraph::whole(&g);
        let p = ModelParams::<f32>::zeros(&[1, 1]);
        assert!(evaluate(&p, &sub, Split::Test).is_err());
        assert_eq!(evaluate(&p, &sub, Split::Train).unwrap(), 1.0);
        let _ = Layer::<f32> {
            weight: Matrix::zeros(1, 1),
            bias: vec![0.0],
        };
    }
}
