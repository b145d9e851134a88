//! Natural visibility graphs.
//!
//! Points `(i, s_i)` and `(j, s_j)` are linked iff every intermediate point
//! lies strictly below the segment joining them. Collinear points block.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityGraph {
    pub n_vertices: usize,
    /// Sorted, deduplicated `(i, j)` pairs with `i < j`.
    pub edges: Vec<(usize, usize)>,
}

impl VisibilityGraph {
    fn from_edges(n_vertices: usize, mut edges: Vec<(usize, usize)>) -> Self {
        edges.sort_unstable();
        edges.dedup();
        Self { n_vertices, edges }
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_vertices];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    pub fn degree_sequence(&self) -> Vec<usize> {
        degree_sequence(self)
    }

    /// One `i j` pair per line.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (i, j) in &self.edges {
            writeln!(out, "{i} {j}")?;
        }
        Ok(())
    }
}

/// `s[k]` lies strictly below the segment from `(i, s[i])` to `(j, s[j])`.
#[inline]
fn below(s: &[f64], i: usize, k: usize, j: usize) -> bool {
    (s[k] - s[j]) * ((j - i) as f64) < (s[i] - s[j]) * ((j - k) as f64)
}

fn check_finite(series: &[f64]) -> Result<()> {
    if series.is_empty() {
        return Err(Error::Empty("series"));
    }
    match series.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Reference construction: tests every pair against every intermediate point.
pub fn build_nvg_naive(series: &[f64]) -> Result<VisibilityGraph> {
    check_finite(series)?;
    let n = series.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if (i + 1..j).all(|k| below(series, i, k, j)) {
                edges.push((i, j));
            }
        }
    }
    Ok(VisibilityGraph::from_edges(n, edges))
}

/// Divide and conquer on the leftmost maximum of each sub-range.
///
/// Nothing left of a range maximum can see anything right of it, so edges
/// only connect the maximum to points on each side (found with a single
/// outward scan tracking the steepest blocker) plus edges inside each half.
pub fn build_nvg_fast(series: &[f64]) -> Result<VisibilityGraph> {
    check_finite(series)?;
    let s = series;
    let n = s.len();
    let mut edges = Vec::with_capacity(4 * n);
    let mut stack = vec![(0usize, n)];
    while let Some((lo, hi)) = stack.pop() {
        if hi - lo < 2 {
            continue;
        }
        let mut m = lo;
        for k in lo + 1..hi {
            if s[k] > s[m] {
                m = k;
            }
        }

        let mut blocker: Option<usize> = None;
        for j in m + 1..hi {
            if blocker.is_none_or(|k| below(s, m, k, j)) {
                edges.push((m, j));
                blocker = Some(j);
            }
        }
        let mut blocker: Option<usize> = None;
        for i in (lo..m).rev() {
            if blocker.is_none_or(|k| below(s, i, k, m)) {
                edges.push((i, m));
                blocker = Some(i);
            }
        }

        stack.push((lo, m));
        stack.push((m + 1, hi));
    }
    Ok(VisibilityGraph::from_edges(n, edges))
}

pub fn degree_sequence(graph: &VisibilityGraph) -> Vec<usize> {
    let mut deg = vec![0; graph.n_vertices];
    for &(i, j) in &graph.edges {
        deg[i] += 1;
        deg[j] += 1;
    }
    deg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_point_examples() {
        let g = build_nvg_naive(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(g.degree_sequence(), vec![2, 2, 2]);
        let collinear = build_nvg_naive(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(collinear.edges, vec![(0, 1), (1, 2)]);
        assert_eq!(collinear.degree_sequence(), vec![1, 2, 1]);
        assert_eq!(build_nvg_fast(&[1.0, 2.0, 3.0]).unwrap(), collinear);
    }

    #[test]
    fn tiny_series() {
        for build in [build_nvg_naive, build_nvg_fast] {
            assert_eq!(build(&[5.0, -1.0]).unwrap().edges, vec![(0, 1)]);
            let single = build(&[1.0]).unwrap();
            assert!(single.edges.is_empty());
            assert_eq!(single.degree_sequence(), vec![0]);
            assert!(matches!(build(&[]), Err(Error::Empty(_))));
            assert!(matches!(build(&[0.0, f64::NAN]), Err(Error::NonFinite { index: 1 })));
        }
    }

    #[test]
    fn decreasing_and_flat_series_match_oracle() {
        let dec: Vec<f64> = (0..30).map(|i| -(i as f64).powf(1.3)).collect();
        assert_eq!(build_nvg_fast(&dec).unwrap(), build_nvg_naive(&dec).unwrap());
        let flat = vec![2.0; 20];
        let g = build_nvg_fast(&flat).unwrap();
        assert_eq!(g, build_nvg_naive(&flat).unwrap());
        assert_eq!(g.n_edges(), 19);
    }

    #[test]
    fn fast_matches_naive_on_random_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.random_range(1..120);
            let s: Vec<f64> = if rng.random_bool(0.3) {
                (0..n).map(|_| rng.random_range(0..5) as f64).collect()
            } else {
                (0..n).map(|_| rng.random::<f64>()).collect()
            };
            assert_eq!(build_nvg_fast(&s).unwrap(), build_nvg_naive(&s).unwrap());
        }
    }

    #[test]
    fn edge_list_format() {
        let g = build_nvg_fast(&[3.0, 1.0, 2.0]).unwrap();
        let mut out = Vec::new();
        g.write_edge_list(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "0 1\n0 2\n1 2\n");
    }
}
