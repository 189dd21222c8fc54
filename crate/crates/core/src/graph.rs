//! View-temporal graphs over the `V x T` vertex grid and normalized GCN
//! propagation `σ(D̃^{-1/2} Ã D̃^{-1/2} X W)`.
//!
//! Vertex `(v, t)` has flattened index `v * T + t`, the same canonical order
//! used by [`crate::scan::FeatureGrid`].

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tensor::{self, Tensor};

pub type Edge = (usize, usize);

/// Rule edges as unordered pairs `i < j`: every distinct-time pair within a
/// view, then every distinct-view pair at equal time.
pub fn rule_edges(views: usize, steps: usize) -> (Vec<Edge>, Vec<Edge>) {
    let idx = |v: usize, t: usize| v * steps + t;
    let mut time = Vec::with_capacity(views * steps * steps.saturating_sub(1) / 2);
    for v in 0..views {
        for t in 0..steps {
            for t2 in t + 1..steps {
                time.push((idx(v, t), idx(v, t2)));
            }
        }
    }
    let mut view = Vec::with_capacity(steps * views * views.saturating_sub(1) / 2);
    for t in 0..steps {
        for v in 0..views {
            for v2 in v + 1..views {
                view.push((idx(v, t), idx(v2, t)));
            }
        }
    }
    (time, view)
}

/// Pairwise similarity: cosine, or negative Euclidean distance when any row
/// has zero norm.
fn similarity(features: &Tensor) -> Result<Tensor> {
    let (n, _) = features.dims2()?;
    let sq: Vec<f64> = (0..n).map(|i| tensor::dot(features.row(i), features.row(i))).collect();
    let norms: Vec<f64> = sq.iter().map(|x| x.sqrt()).collect();
    let gram = tensor::matmul_nt(features, features)?;
    let cosine = norms.iter().all(|&x| x > 0.0);
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let g = gram.at(i, j);
            s[i * n + j] = if cosine {
                g / (norms[i] * norms[j])
            } else {
                -(sq[i] + sq[j] - 2.0 * g).max(0.0).sqrt()
            };
        }
    }
    Tensor::new(vec![n, n], s)
}

/// Directed edges `i -> j` to the `k` most similar other vertices, ties going
/// to the lower index.
pub fn knn_edges(features: &Tensor, k: usize) -> Result<Vec<Edge>> {
    let (n, _) = features.dims2()?;
    if k == 0 || k + 1 > n {
        return Err(Error::config(format!(
            "knn_k must lie in 1..={} for {n} vertices, got {k}",
            n.saturating_sub(1)
        )));
    }
    features.ensure_finite("KNN features")?;
    let s = similarity(features)?;
    let mut edges = Vec::with_capacity(n * k);
    let mut others: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        others.clear();
        others.extend((0..n).filter(|&j| j != i));
        let row = s.row(i);
        others.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        edges.extend(others[..k].iter().map(|&j| (i, j)));
    }
    Ok(edges)
}

/// Symmetrized union of edge sets plus self-loops: returns `(Ã, D̃)`.
pub fn assemble_adjacency(edge_sets: &[&[Edge]], n: usize) -> Result<(Tensor, Tensor)> {
    let mut a = Tensor::eye(n);
    for &(i, j) in edge_sets.iter().flat_map(|s| s.iter()) {
        if i >= n || j >= n {
            return Err(Error::input(format!("edge ({i}, {j}) out of range for {n} vertices")));
        }
        let d = a.data_mut();
        d[i * n + j] = 1.0;
        d[j * n + i] = 1.0;
    }
    let mut deg = Tensor::zeros(&[n, n]);
    for i in 0..n {
        deg.data_mut()[i * n + i] = a.row(i).iter().sum();
    }
    Ok((a, deg))
}

/// `D̃^{-1/2} Ã D̃^{-1/2}`.
pub fn normalize(a_tilde: &Tensor, d_tilde: &Tensor) -> Result<Tensor> {
    let (n, m) = a_tilde.dims2()?;
    if n != m || d_tilde.shape() != [n, n] {
        return Err(Error::dim("adjacency and degree matrices must be square and equal"));
    }
    let inv: Vec<f64> = (0..n)
        .map(|i| {
            let d = d_tilde.at(i, i);
            if d > 0.0 {
                Ok(1.0 / d.sqrt())
            } else {
                Err(Error::Numeric(format!("vertex {i} has degree {d}")))
            }
        })
        .collect::<Result<_>>()?;
    let mut out = a_tilde.clone();
    for i in 0..n {
        for j in 0..n {
            out.data_mut()[i * n + j] *= inv[i] * inv[j];
        }
    }
    Ok(out)
}

/// Unordered, deduplicated edges of a 0/1 adjacency (self-loops excluded).
fn undirected(adjacency: &Tensor) -> Vec<Edge> {
    let n = adjacency.shape()[0];
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| adjacency.at(i, j) != 0.0)
        .collect()
}

/// Vertex-edge incidence matrix `H: [n, |E|]` of a 0/1 adjacency.
pub fn incidence(adjacency: &Tensor) -> Tensor {
    let n = adjacency.shape()[0];
    let edges = undirected(adjacency);
    let mut h = Tensor::zeros(&[n, edges.len()]);
    let m = edges.len();
    for (e, &(i, j)) in edges.iter().enumerate() {
        h.data_mut()[i * m + e] = 1.0;
        h.data_mut()[j * m + e] = 1.0;
    }
    h
}

#[derive(Clone, Debug, Serialize)]
pub struct ViewTemporalGraph {
    #[serde(rename = "n")]
    pub n_vertices: usize,
    #[serde(rename = "rule_time")]
    pub rule_time_edges: Vec<Edge>,
    #[serde(rename = "rule_view")]
    pub rule_view_edges: Vec<Edge>,
    #[serde(rename = "knn")]
    pub knn_edges: Vec<Edge>,
    /// Symmetric 0/1 adjacency without self-loops.
    #[serde(skip)]
    pub adjacency: Tensor,
}

impl ViewTemporalGraph {
    /// Rule edges, plus KNN edges from `features` when `knn` is given.
    pub fn build(views: usize, steps: usize, knn: Option<(&Tensor, usize)>) -> Result<Self> {
        if views == 0 || steps == 0 {
            return Err(Error::config("graph needs V, T >= 1"));
        }
        let n = views * steps;
        let (rule_time_edges, rule_view_edges) = rule_edges(views, steps);
        let knn_edges = match knn {
            Some((features, k)) => {
                if features.shape()[0] != n {
                    return Err(Error::dim(format!(
                        "{} feature rows for {n} vertices",
                        features.shape()[0]
                    )));
                }
                knn_edges(features, k)?
            }
            None => Vec::new(),
        };
        let (mut adjacency, _) = assemble_adjacency(&[&rule_time_edges, &rule_view_edges, &knn_edges], n)?;
        for i in 0..n {
            adjacency.data_mut()[i * n + i] = 0.0;
        }
        Ok(Self {
            n_vertices: n,
            rule_time_edges,
            rule_view_edges,
            knn_edges,
            adjacency,
        })
    }

    /// `(Ã, D̃)`.
    pub fn with_self_loops(&self) -> (Tensor, Tensor) {
        assemble_adjacency(&[&undirected(&self.adjacency)], self.n_vertices).expect("edges in range")
    }

    pub fn normalized(&self) -> Tensor {
        let (a, d) = self.with_self_loops();
        normalize(&a, &d).expect("self-loops keep degrees positive")
    }

    pub fn incidence(&self) -> Tensor {
        incidence(&self.adjacency)
    }
}

/// One graph convolution `ReLU(Â X W)`; `W` is Glorot-uniform, no bias.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl GcnLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng64) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[d_in, d_out], bound, rng));
        Self { weight, d_in, d_out }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out
    }

    /// `normalized` is the constant operator `D̃^{-1/2} Ã D̃^{-1/2}`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, normalized: &Tensor) -> Result<Var> {
        let op = tape.constant(normalized.clone());
        let mixed = tape.matmul(op, x)?;
        let y = tape.matmul(mixed, p.var(self.weight))?;
        Ok(tape.relu(y))
    }
}

/// Pure form of [`GcnLayer::forward`].
pub fn gcn_propagate(x: &Tensor, a_tilde: &Tensor, d_tilde: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    if a_tilde.shape() != [n, n] {
        return Err(Error::dim(format!("adjacency {:?} for {n} vertices", a_tilde.shape())));
    }
    let op = normalize(a_tilde, d_tilde)?;
    Ok(op.matmul(x)?.matmul(w)?.map(|z| z.max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn random(shape: &[usize], rng: &mut Rng64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn pairs(edges: &[Edge]) -> BTreeSet<Edge> {
        edges.iter().copied().collect()
    }

    #[test]
    fn rule_edge_counts() {
        let (t, v) = rule_edges(1, 1);
        assert!(t.is_empty() && v.is_empty());
        let (t, v) = rule_edges(2, 2);
        assert_eq!((t.len(), v.len()), (2, 2));
        let (t, v) = rule_edges(3, 8);
        assert_eq!((t.len(), v.len()), (84, 24));
    }

    #[test]
    fn rule_edges_match_exhaustive_enumeration() {
        for views in 1..=4 {
            for steps in 1..=6 {
                let mut time = BTreeSet::new();
                let mut view = BTreeSet::new();
                for a in 0..views * steps {
                    for b in 0..views * steps {
                        let (va, ta, vb, tb) = (a / steps, a % steps, b / steps, b % steps);
                        if a < b && va == vb && ta != tb {
                            time.insert((a, b));
                        }
                        if a < b && ta == tb && va != vb {
                            view.insert((a, b));
                        }
                    }
                }
                let (t, v) = rule_edges(views, steps);
                assert_eq!(pairs(&t), time);
                assert_eq!(pairs(&v), view);
                assert_eq!(t.len(), time.len());
                assert_eq!(v.len(), view.len());
            }
        }
    }

    #[test]
    fn knn_negative_distance_fallback() {
        let x = Tensor::from_rows(&[[0.0], [1.0], [10.0]]).unwrap();
        assert_eq!(knn_edges(&x, 1).unwrap(), vec![(0, 1), (1, 0), (2, 1)]);
    }

    #[test]
    fn knn_complete_and_range() {
        let mut rng = seeded(1);
        let x = random(&[5, 3], &mut rng);
        let e = knn_edges(&x, 4).unwrap();
        let all: BTreeSet<Edge> = (0..5)
            .flat_map(|i| (0..5).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        assert_eq!(pairs(&e), all);
        assert!(matches!(knn_edges(&x, 0), Err(Error::Config(_))));
        assert!(matches!(knn_edges(&x, 5), Err(Error::Config(_))));
    }

    #[test]
    fn knn_duplicates_select_each_other() {
        let x = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(knn_edges(&x, 1).unwrap(), vec![(0, 2), (1, 3), (2, 0), (3, 1)]);
        assert_eq!(knn_edges(&x, 1).unwrap(), knn_edges(&x, 1).unwrap());
    }

    fn brute_knn(x: &Tensor, k: usize) -> BTreeSet<Edge> {
        let n = x.shape()[0];
        let norm = |i: usize| x.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut out = BTreeSet::new();
        for i in 0..n {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
                    (d / (norm(i) * norm(j)), j)
                })
                .collect();
            // Stable sort by descending similarity keeps lower indices first on ties.
            cand.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            out.extend(cand[..k].iter().map(|&(_, j)| (i, j)));
        }
        out
    }

    proptest! {
        #[test]
        fn knn_matches_brute_force(seed in 0u64..500, n in 2usize..=24, k in 1usize..=3, d in 1usize..5) {
            prop_assume!(k < n);
            let x = random(&[n, d], &mut seeded(seed));
            let e = knn_edges(&x, k).unwrap();
            prop_assert_eq!(e.len(), n * k);
            prop_assert_eq!(pairs(&e), brute_knn(&x, k));
        }

        #[test]
        fn assembly_is_symmetric_with_consistent_degrees(seed in 0u64..500, n in 1usize..12, m in 0usize..30) {
            let mut rng = seeded(seed);
            let edges: Vec<Edge> = (0..m)
                .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
                .collect();
            let (a, d) = assemble_adjacency(&[&edges], n).unwrap();
            prop_assert_eq!(&a, &a.transpose().unwrap());
            for i in 0..n {
                let mut deg = 1.0;
                for j in 0..n {
                    if i != j && edges.iter().any(|&e| e == (i, j) || e == (j, i)) {
                        deg += 1.0;
                    }
                }
                prop_assert_eq!(d.at(i, i), deg);
            }
            let (a2, d2) = assemble_adjacency(&[&edges, &edges], n).unwrap();
            prop_assert_eq!(a, a2);
            prop_assert_eq!(d, d2);
        }
    }

    #[test]
    fn assembly_small_cases() {
        let (a, d) = assemble_adjacency(&[], 3).unwrap();
        assert_eq!(a, Tensor::eye(3));
        assert_eq!(d, Tensor::eye(3));
        let (a, d) = assemble_adjacency(&[&[(0, 1)]], 2).unwrap();
        assert_eq!(a.data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(d.data(), &[2.0, 0.0, 0.0, 2.0]);
        assert!(matches!(assemble_adjacency(&[&[(0, 2)]], 2), Err(Error::Input(_))));
    }

    #[test]
    fn graph_invariants_and_incidence() {
        let mut rng = seeded(2);
        let x = random(&[24, 6], &mut rng);
        let g = ViewTemporalGraph::build(3, 8, Some((&x, 3))).unwrap();
        let n = g.n_vertices;
        for i in 0..n {
            assert_eq!(g.adjacency.at(i, i), 0.0);
        }
        assert!(g.rule_time_edges.iter().all(|&(a, b)| a / 8 == b / 8 && a != b));
        assert!(g.rule_view_edges.iter().all(|&(a, b)| a % 8 == b % 8 && a != b));
        assert!(g.knn_edges.iter().all(|&(a, b)| a != b));
        assert_eq!(g.adjacency, g.adjacency.transpose().unwrap());
        assert!(g.adjacency.data().iter().all(|&z| z == 0.0 || z == 1.0));
        let h = g.incidence();
        let hht = tensor::matmul_nt(&h, &h).unwrap();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j {
                    g.adjacency.row(i).iter().sum()
                } else {
                    g.adjacency.at(i, j)
                };
                assert_eq!(hht.at(i, j), want);
            }
        }
        let json = serde_json::to_value(&g).unwrap();
        assert_eq!(json["n"], 24);
        assert_eq!(json["rule_time"].as_array().unwrap().len(), 84);
        assert_eq!(json["knn"].as_array().unwrap().len(), 72);
    }

    fn spectral_norm(m: &Tensor) -> f64 {
        let n = m.shape()[0];
        let mut v = Tensor::new(vec![n, 1], (0..n).map(|i| 1.0 + i as f64 * 0.37).collect()).unwrap();
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = m.matmul(&v).unwrap();
            lambda = w.data().iter().map(|a| a * a).sum::<f64>().sqrt();
            v = w.scale(1.0 / lambda);
        }
        lambda
    }

    #[test]
    fn normalized_operator_does_not_amplify() {
        let mut rng = seeded(3);
        for _ in 0..5 {
            let x = random(&[12, 4], &mut rng);
            let g = ViewTemporalGraph::build(3, 4, Some((&x, 2))).unwrap();
            assert!(spectral_norm(&g.normalized()) <= 1.0 + 1e-9);
        }
        // Rule-only graphs are regular, so constant columns are fixed points.
        let g = ViewTemporalGraph::build(3, 4, None).unwrap();
        let (a, d) = g.with_self_loops();
        let x = Tensor::full(&[12, 2], 0.8);
        let y = gcn_propagate(&x, &a, &d, &Tensor::eye(2)).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn propagation_examples() {
        let (a, d) = assemble_adjacency(&[], 3).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0], [0.5, 0.0], [3.0, 4.0]]).unwrap();
        assert!(gcn_propagate(&x, &a, &d, &Tensor::eye(2)).unwrap().max_abs_diff(&x) < 1e-15);
        let (a, d) = assemble_adjacency(&[&[(0, 1)]], 2).unwrap();
        let x = Tensor::from_rows(&[[2.0], [0.0]]).unwrap();
        let y = gcn_propagate(&x, &a, &d, &Tensor::eye(1)).unwrap();
        assert!(y.max_abs_diff(&Tensor::from_rows(&[[1.0], [1.0]]).unwrap()) < 1e-12);
    }

    #[test]
    fn gcn_layer_matches_pure_form_and_gradients() {
        let mut rng = seeded(4);
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut store, "g", 4, 3, &mut rng);
        let x = random(&[6, 4], &mut rng);
        let g = ViewTemporalGraph::build(2, 3, Some((&x, 1))).unwrap();
        let (a, d) = g.with_self_loops();
        let norm = g.normalized();

        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = layer.forward(&mut tape, &p, xv, &norm).unwrap();
        let pure = gcn_propagate(&x, &a, &d, store.get(layer.weight)).unwrap();
        assert!(tape.value(y).max_abs_diff(&pure) < 1e-12);

        let target = random(&[6, 3], &mut rng);
        let report = check_gradients(
            |tape, vars| {
                let p = Bound::from_vars(vec![vars[0]]);
                let y = layer.forward(tape, &p, vars[1], &norm)?;
                let t = tape.constant(target.clone());
                let m = tape.mul(y, t)?;
                Ok(tape.sum(m))
            },
            &[store.get(layer.weight).clone(), x],
            1e-6,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
