//! Global item representations from the multi-relation transition graph.

use crate::autograd::{Tensor, Var};
use crate::config::WeightTransform;
use crate::error::{Error, Result};
use crate::graph::{GlobalGraph, RelationCsr};
use crate::params::{LayerIds, RelationIds};
use crate::scope::Scope;

#[derive(Debug, Clone, Copy)]
pub struct RelationAttention {
    /// `[n, d]` aggregated messages.
    pub output: Var,
    /// `[E, 1]` edge weights in the relation's edge order.
    pub weights: Var,
}

/// One relation's attention aggregation over `h: [n, d]`.
///
/// Score `e_ij = a · (W_t h_i + W_s h_j + w_w f(w_ij))`, weights are the
/// softmax of `leaky_relu(e)` over the inbound neighbors of `i`, and the
/// message is `Σ_j α_ij W_s h_j`. Returns `None` when the relation has no
/// edges at all (every output row would be zero).
pub fn relation_attention(
    s: &mut Scope<'_, '_>,
    ids: &RelationIds,
    csr: &RelationCsr,
    h: Var,
    transform: WeightTransform,
) -> Result<Option<RelationAttention>> {
    let n = s.tape.shape(h)[0];
    if csr.offsets.len() != n + 1 {
        return Err(Error::shape(
            "relation_attention",
            format!("graph over {} items, features for {n}", csr.offsets.len().saturating_sub(1)),
        ));
    }
    if csr.n_edges() == 0 {
        return Ok(None);
    }
    let a = s.param(ids.a);
    let t = s.linear(h, ids.w_t)?;
    let src = s.linear(h, ids.w_s)?;
    let ta = s.tape.matmul_nt(t, a)?;
    let sa = s.tape.matmul_nt(src, a)?;
    let w_w = s.param(ids.w_w);
    let wa = s.tape.matmul_nt(w_w, a)?;

    let f = s.tape.constant(Tensor::column(csr.weights.iter().map(|&w| transform.apply(w)).collect()));
    let e_t = s.tape.gather_rows(ta, &csr.targets)?;
    let e_s = s.tape.gather_rows(sa, &csr.sources)?;
    let e_w = s.tape.matmul(f, wa)?;
    let e = s.tape.add(e_t, e_s)?;
    let e = s.tape.add(e, e_w)?;
    let e = s.tape.leaky_relu(e)?;
    let alpha = s.tape.segment_softmax(e, &csr.offsets)?;
    let msg = s.tape.gather_rows(src, &csr.sources)?;
    let msg = s.tape.mul_col(msg, alpha)?;
    let output = s.tape.segment_sum(msg, &csr.offsets)?;
    Ok(Some(RelationAttention { output, weights: alpha }))
}

/// `H' = (1/|R|) Σ_r h_r + H W_resᵀ`, with `|R|` the full relation count;
/// `None` entries are all-zero relations.
pub fn cross_relation_fuse(
    s: &mut Scope<'_, '_>,
    relation_outputs: &[Option<Var>],
    h: Var,
    w_res: usize,
) -> Result<Var> {
    let residual = s.linear(h, w_res)?;
    let present: Vec<Var> = relation_outputs.iter().flatten().copied().collect();
    let Some((&first, rest)) = present.split_first() else {
        return Ok(residual);
    };
    let mut acc = first;
    for &r in rest {
        acc = s.tape.add(acc, r)?;
    }
    let mean = s.tape.scalar_mul(acc, 1.0 / relation_outputs.len() as f64)?;
    s.tape.add(mean, residual)
}

pub fn encode_layer(
    s: &mut Scope<'_, '_>,
    layer: &LayerIds,
    graph: &GlobalGraph,
    h: Var,
    transform: WeightTransform,
) -> Result<Var> {
    if layer.relations.len() != graph.n_relations() {
        return Err(Error::shape(
            "encode_layer",
            format!("{} relation parameter sets for {} relations", layer.relations.len(), graph.n_relations()),
        ));
    }
    let outputs = layer
        .relations
        .iter()
        .enumerate()
        .map(|(r, ids)| Ok(relation_attention(s, ids, graph.relation(r), h, transform)?.map(|a| a.output)))
        .collect::<Result<Vec<_>>>()?;
    cross_relation_fuse(s, &outputs, h, layer.w_res)
}

/// Stacks `layers.len()` rounds starting from `h0`; no layers returns `h0`.
pub fn encode_global(
    s: &mut Scope<'_, '_>,
    layers: &[LayerIds],
    graph: &GlobalGraph,
    h0: Var,
    transform: WeightTransform,
) -> Result<Var> {
    let mut h = h0;
    for layer in layers {
        h = encode_layer(s, layer, graph, h, transform)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::{finite_difference_check, Tape};
    use crate::par::Execution;
    use crate::params::{Dims, ModelParams};
    use crate::sessions::IndexedSession;

    fn random_params(dims: Dims, seed: u64) -> ModelParams {
        ModelParams::init(dims, 0.5, seed).unwrap()
    }

    fn graph_of(sessions: &[Vec<(usize, usize)>], n_items: usize, nb: usize) -> GlobalGraph {
        let sessions: Vec<IndexedSession> = sessions
            .iter()
            .map(|e| IndexedSession { session_id: "s".into(), events: e.clone() })
            .collect();
        let behaviors: Vec<String> = (0..nb).map(|b| format!("b{b}")).collect();
        GlobalGraph::build(&sessions, n_items, &behaviors, usize::MAX, Execution::Sequential).unwrap()
    }

    fn mv(w: &Tensor, x: &[f64]) -> Vec<f64> {
        (0..w.rows()).map(|r| w.row_slice(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn dotv(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Direct per-node transcription of one layer.
    fn oracle_layer(p: &ModelParams, g: &GlobalGraph, h: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let layer = &p.layout().layers[0];
        let d = p.dims().d;
        let n_rel = g.n_relations() as f64;
        (0..g.n_items())
            .map(|i| {
                let mut acc = vec![0.0; d];
                for (r, ids) in layer.relations.iter().enumerate() {
                    let rt = g.relation_type(r);
                    let nbrs = g.neighbors(i, rt);
                    if nbrs.is_empty() {
                        continue;
                    }
                    let (wt, ws, a, ww) = (p.get(ids.w_t), p.get(ids.w_s), p.get(ids.a), p.get(ids.w_w));
                    let th = mv(wt, &h[i]);
                    let scores: Vec<f64> = nbrs
                        .iter()
                        .map(|&(j, w)| {
                            let sh = mv(ws, &h[j]);
                            let fw = (w as f64 + 1.0).ln();
                            let inner: Vec<f64> =
                                (0..d).map(|c| th[c] + sh[c] + ww.data()[c] * fw).collect();
                            let e = dotv(a.data(), &inner);
                            if e > 0.0 { e } else { 0.2 * e }
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|e| (e - mx).exp()).sum();
                    for (k, &(j, _)) in nbrs.iter().enumerate() {
                        let alpha = (scores[k] - mx).exp() / z;
                        let sh = mv(ws, &h[j]);
                        for c in 0..d {
                            acc[c] += alpha * sh[c] / n_rel;
                        }
                    }
                }
                let res = mv(p.get(layer.w_res), &h[i]);
                (0..d).map(|c| acc[c] + res[c]).collect()
            })
            .collect()
    }

    fn run(p: &ModelParams, g: &GlobalGraph) -> Tensor {
        let mut tape = Tape::new();
        let mut s = Scope::lazy(&mut tape, p, false);
        let h0 = s.param(p.layout().item_emb);
        let hg = encode_global(&mut s, &p.layout().layers, g, h0, WeightTransform::Log1p).unwrap();
        tape.value(hg).clone()
    }

    #[test]
    fn three_node_graph_matches_transcription() {
        let g = graph_of(&[vec![(0, 0), (1, 0), (2, 1)], vec![(2, 0), (0, 0), (1, 1), (0, 0)]], 3, 2);
        let p = random_params(Dims { n_items: 3, n_behaviors: 2, d: 4, layers: 1, max_len: 4 }, 11);
        let out = run(&p, &g);
        let h: Vec<Vec<f64>> = (0..3).map(|i| p.get(p.layout().item_emb).row_slice(i).to_vec()).collect();
        let want = oracle_layer(&p, &g, &h);
        for i in 0..3 {
            for c in 0..4 {
                assert!((out.get(i, c) - want[i][c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_neighbor_passes_its_message() {
        let g = graph_of(&[vec![(0, 0), (1, 0)]], 2, 1);
        let p = random_params(Dims { n_items: 2, n_behaviors: 1, d: 3, layers: 1, max_len: 2 }, 2);
        let mut tape = Tape::new();
        let mut s = Scope::lazy(&mut tape, &p, false);
        let ids = p.layout().layers[0].relations[0];
        let h0 = s.param(p.layout().item_emb);
        let out = relation_attention(&mut s, &ids, g.relation(0), h0, WeightTransform::Log1p)
            .unwrap()
            .unwrap()
            .output;
        let want = mv(p.get(ids.w_s), p.get(p.layout().item_emb).row_slice(0));
        for c in 0..3 {
            assert!((tape.value(out).get(1, c) - want[c]).abs() < 1e-14);
            assert_eq!(tape.value(out).get(0, c), 0.0);
        }
    }

    #[test]
    fn symmetric_neighbors_split_evenly() {
        let g = graph_of(&[vec![(0, 0), (2, 0)], vec![(1, 0), (2, 0)]], 3, 1);
        let mut p = random_params(Dims { n_items: 3, n_behaviors: 1, d: 2, layers: 1, max_len: 2 }, 3);
        let emb = p.layout().item_emb;
        p.set(emb, Tensor::new(3, 2, vec![0.3, -0.2, 0.3, -0.2, 1.0, 0.5]).unwrap()).unwrap();
        let ids = p.layout().layers[0].relations[0];
        let mut tape = Tape::new();
        let mut s = Scope::lazy(&mut tape, &p, false);
        let h0 = s.param(emb);
        let out = relation_attention(&mut s, &ids, g.relation(0), h0, WeightTransform::Log1p)
            .unwrap()
            .unwrap()
            .output;
        let msg = mv(p.get(ids.w_s), &[0.3, -0.2]);
        for c in 0..2 {
            assert!((tape.value(out).get(2, c) - msg[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn fuse_averages_over_all_relations() {
        let p = ModelParams::zeros(Dims { n_items: 1, n_behaviors: 1, d: 2, layers: 1, max_len: 1 });
        let mut tape = Tape::new();
        let mut s = Scope::lazy(&mut tape, &p, false);
        let h = s.tape.constant(Tensor::row(vec![5.0, 5.0]));
        let a = s.tape.constant(Tensor::row(vec![2.0, 0.0]));
        let b = s.tape.constant(Tensor::row(vec![0.0, 2.0]));
        let out = cross_relation_fuse(&mut s, &[Some(a), Some(b)], h, p.layout().layers[0].w_res).unwrap();
        assert_eq!(tape.value(out).data(), [1.0, 1.0]);

        // an empty relation still counts in the denominator
        let mut tape = Tape::new();
        let mut s = Scope::lazy(&mut tape, &p, false);
        let h = s.tape.constant(Tensor::row(vec![5.0, 5.0]));
        let a = s.tape.constant(Tensor::row(vec![2.0, 0.0]));
        let out = cross_relation_fuse(&mut s, &[Some(a), None], h, p.layout().layers[0].w_res).unwrap();
        assert_eq!(tape.value(out).data(), [1.0, 0.0]);
    }

    #[test]
    fn no_layers_is_identity_and_no_edges_is_residual() {
        let g = graph_of(&[vec![(0, 0)]], 4, 2);
        let p = random_params(Dims { n_items: 4, n_behaviors: 2, d: 3, layers: 0, max_len: 2 }, 5);
        assert_eq!(&run(&p, &g), p.get(p.layout().item_emb));

        let p = random_params(Dims { n_items: 4, n_behaviors: 2, d: 3, layers: 1, max_len: 2 }, 5);
        let out = run(&p, &g);
        let w_res = p.get(p.layout().layers[0].w_res);
        for i in 0..4 {
            let want = mv(w_res, p.get(p.layout().item_emb).row_slice(i));
            for c in 0..3 {
                assert!((out.get(i, c) - want[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mismatched_graph_is_a_shape_error() {
        let g = graph_of(&[vec![(0, 0), (1, 0)]], 2, 1);
        let p = random_params(Dims { n_items: 3, n_behaviors: 1, d: 2, layers: 1, max_len: 2 }, 1);
        let mut tape = Tape::new();
        let mut s = Scope::lazy(&mut tape, &p, false);
        let h0 = s.param(p.layout().item_emb);
        let err = encode_global(&mut s, &p.layout().layers, &g, h0, WeightTransform::Log1p).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn permuting_items_permutes_rows() {
        let sessions = vec![vec![(0, 0), (1, 0), (2, 1), (3, 0)], vec![(3, 1), (1, 0), (0, 0)]];
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<(usize, usize)>> =
            sessions.iter().map(|s| s.iter().map(|&(i, b)| (perm[i], b)).collect()).collect();
        let dims = Dims { n_items: 4, n_behaviors: 2, d: 3, layers: 2, max_len: 2 };
        let p = random_params(dims, 9);
        let mut q = p.clone();
        let emb = p.layout().item_emb;
        let mut moved = Tensor::zeros(4, 3);
        for i in 0..4 {
            moved.row_slice_mut(perm[i]).copy_from_slice(p.get(emb).row_slice(i));
        }
        q.set(emb, moved).unwrap();
        let a = run(&p, &graph_of(&sessions, 4, 2));
        let b = run(&q, &graph_of(&permuted, 4, 2));
        for i in 0..4 {
            for c in 0..3 {
                assert!((a.get(i, c) - b.get(perm[i], c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_check_on_five_items() {
        let g = graph_of(&[vec![(0, 0), (1, 0), (2, 1), (0, 0)], vec![(3, 0), (4, 1), (1, 1)]], 5, 2);
        let p = random_params(Dims { n_items: 5, n_behaviors: 2, d: 3, layers: 1, max_len: 2 }, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probe = Tensor::new(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let check = finite_difference_check(
            p.tensors(),
            |tape, vars| {
                let mut s = Scope::bound(tape, vars);
                let h0 = s.param(p.layout().item_emb);
                let hg = encode_global(&mut s, &p.layout().layers, &g, h0, WeightTransform::Log1p)?;
                let t = s.tape.tanh(hg)?;
                let probe = s.tape.constant(probe.clone());
                s.tape.dot(t, probe)
            },
            1e-6,
        )
        .unwrap();
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }
}
