//! Kamada–Kawai spring layout.
//!
//! Every vertex pair `(i, j)` is joined by a spring of rest length
//! `l_ij = L * d_ij` and stiffness `k_ij = K / d_ij^2`, where `d_ij` is the
//! unit-weight shortest-path distance. The layout minimizes
//! `E = sum_{i<j} 0.5 * k_ij * (|P_i - P_j| - l_ij)^2` one vertex at a time.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::visibility::VisibilityGraph;

pub type Point = [f64; 2];

/// Distances below this count as coincident vertices.
const COINCIDENT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutConfig {
    /// Display length of one graph hop.
    pub edge_length: f64,
    /// Spring constant numerator `K` in `K / d^2`.
    pub spring_constant: f64,
    /// Stop once the largest per-vertex gradient norm falls below this.
    pub tolerance: f64,
    /// Cap on vertex moves; `None` means `200 * n`.
    pub max_iterations: Option<usize>,
    pub seed: u64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            edge_length: 1.0,
            spring_constant: 1.0,
            tolerance: 1e-4,
            max_iterations: None,
            seed: 13,
        }
    }
}

impl LayoutConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.edge_length) || !positive(self.spring_constant) || !positive(self.tolerance) {
            return Err(Error::config(format!(
                "layout needs positive finite L, K and tolerance, got {self:?}"
            )));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::config("layout max_iterations must be positive"));
        }
        Ok(())
    }

    pub fn iteration_cap(&self, n: usize) -> usize {
        self.max_iterations.unwrap_or(200 * n.max(1))
    }
}

/// Dense all-pairs hop counts, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<u32>,
}

impl DistanceMatrix {
    pub fn from_rows(rows: Vec<Vec<u32>>) -> Self {
        let n = rows.len();
        let data: Vec<u32> = rows.into_iter().flatten().collect();
        assert_eq!(data.len(), n * n, "distance rows must be square");
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Breadth-first search from every vertex.
pub fn bfs_apsp(graph: &VisibilityGraph) -> Result<DistanceMatrix> {
    let n = graph.n_vertices;
    let adj = graph.adjacency();
    let mut data = vec![u32::MAX; n * n];
    let mut queue = VecDeque::with_capacity(n);
    for src in 0..n {
        let row = &mut data[src * n..(src + 1) * n];
        row[src] = 0;
        queue.clear();
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let du = row[u];
            for &v in &adj[u] {
                if row[v] == u32::MAX {
                    row[v] = du + 1;
                    queue.push_back(v);
                }
            }
        }
        if let Some(vertex) = row.iter().position(|&d| d == u32::MAX) {
            return Err(Error::Disconnected { from: src, vertex });
        }
    }
    Ok(DistanceMatrix { n, data })
}

/// Unit vector from `j` to `i`, with a fixed pair-dependent direction for
/// coincident vertices so the result stays finite and antisymmetric.
#[inline]
fn direction(p: &[Point], i: usize, j: usize) -> (f64, f64, f64) {
    let dx = p[i][0] - p[j][0];
    let dy = p[i][1] - p[j][1];
    let dist = dx.hypot(dy);
    if dist > COINCIDENT {
        return (dx / dist, dy / dist, dist);
    }
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    let angle = ((a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64)) as f64 * 1e-3;
    let sign = if i < j { 1.0 } else { -1.0 };
    (sign * angle.cos(), sign * angle.sin(), dist)
}

pub fn layout_energy(positions: &[Point], distances: &DistanceMatrix, edge_length: f64, spring_constant: f64) -> f64 {
    let n = positions.len();
    let mut energy = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = distances.get(i, j) as f64;
            let k = spring_constant / (d * d);
            let l = edge_length * d;
            let dx = positions[i][0] - positions[j][0];
            let dy = positions[i][1] - positions[j][1];
            let r = dx.hypot(dy) - l;
            energy += 0.5 * k * r * r;
        }
    }
    energy
}

/// Partial derivatives of the layout energy for every vertex.
pub fn energy_gradient(
    positions: &[Point],
    distances: &DistanceMatrix,
    edge_length: f64,
    spring_constant: f64,
) -> Vec<Point> {
    (0..positions.len())
        .map(|i| vertex_gradient(positions, distances, i, edge_length, spring_constant))
        .collect()
}

fn vertex_gradient(p: &[Point], dist: &DistanceMatrix, i: usize, l: f64, k: f64) -> Point {
    let mut g = [0.0, 0.0];
    let row = dist.row(i);
    for (j, &dij) in row.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = dij as f64;
        let (ux, uy, r) = direction(p, i, j);
        let f = k / (d * d) * (r - l * d);
        g[0] += f * ux;
        g[1] += f * uy;
    }
    g
}

/// Energy terms involving vertex `m` when placed at `at`.
fn vertex_energy(p: &[Point], dist: &DistanceMatrix, m: usize, at: Point, l: f64, k: f64) -> f64 {
    let row = dist.row(m);
    let mut e = 0.0;
    for (j, &dij) in row.iter().enumerate() {
        if j == m {
            continue;
        }
        let d = dij as f64;
        let r = (at[0] - p[j][0]).hypot(at[1] - p[j][1]) - l * d;
        e += 0.5 * k / (d * d) * r * r;
    }
    e
}

/// 2x2 Hessian of the energy with respect to vertex `m`: `[xx, xy, yy]`.
fn vertex_hessian(p: &[Point], dist: &DistanceMatrix, m: usize, l: f64, k: f64) -> [f64; 3] {
    let mut h = [0.0; 3];
    for (j, &dij) in dist.row(m).iter().enumerate() {
        if j == m {
            continue;
        }
        let d = dij as f64;
        let kij = k / (d * d);
        let lij = l * d;
        let dx = p[m][0] - p[j][0];
        let dy = p[m][1] - p[j][1];
        let r = dx.hypot(dy).max(COINCIDENT);
        let r3 = r * r * r;
        h[0] += kij * (1.0 - lij * dy * dy / r3);
        h[1] += kij * lij * dx * dy / r3;
        h[2] += kij * (1.0 - lij * dx * dx / r3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutResult {
    pub positions: Vec<Point>,
    pub energy: f64,
    pub initial_energy: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Energy after each accepted vertex move, starting with the initial energy.
    pub energy_trace: Vec<f64>,
    pub distances: DistanceMatrix,
}

impl LayoutResult {
    /// `index,x,y` rows.
    pub fn write_positions_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "index,x,y")?;
        for (i, p) in self.positions.iter().enumerate() {
            writeln!(out, "{i},{},{}", p[0], p[1])?;
        }
        Ok(())
    }
}

/// Vertices evenly spaced on a circle of radius `n * L / (2 pi)`, index order.
pub fn circle_placement(n: usize, edge_length: f64) -> Vec<Point> {
    if n == 1 {
        return vec![[0.0, 0.0]];
    }
    let radius = n as f64 * edge_length / std::f64::consts::TAU;
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

pub fn kamada_kawai(graph: &VisibilityGraph, config: &LayoutConfig) -> Result<LayoutResult> {
    config.validate()?;
    let n = graph.n_vertices;
    if n == 0 {
        return Err(Error::Empty("graph"));
    }
    let distances = bfs_apsp(graph)?;
    let (l, k) = (config.edge_length, config.spring_constant);
    let mut pos = circle_placement(n, l);
    jitter_coincident(&mut pos, config.seed);

    let initial_energy = layout_energy(&pos, &distances, l, k);
    let mut energy = initial_energy;
    let mut trace = vec![energy];
    let mut grads = energy_gradient(&pos, &distances, l, k);
    let norm = |g: &Point| g[0].hypot(g[1]);

    let cap = config.iteration_cap(n);
    let mut iterations = 0;
    let mut converged = false;
    let mut frozen = vec![false; n];
    while iterations < cap {
        let (m, gmax) = grads
            .iter()
            .enumerate()
            .filter(|(i, _)| !frozen[*i])
            .map(|(i, g)| (i, norm(g)))
            .fold((usize::MAX, -1.0), |best, c| if c.1 > best.1 { c } else { best });
        let true_max = grads.iter().map(norm).fold(0.0, f64::max);
        if true_max < config.tolerance {
            converged = true;
            break;
        }
        if m == usize::MAX || gmax < config.tolerance {
            // every vertex above tolerance is stuck
            break;
        }
        iterations += 1;

        let before = vertex_energy(&pos, &distances, m, pos[m], l, k);
        match improving_move(&pos, &distances, m, grads[m], before, l, k) {
            Some((target, after)) => {
                let old = pos[m];
                pos[m] = target;
                energy += after - before;
                trace.push(energy);
                update_gradients(&mut grads, &pos, &distances, m, old, l, k);
                frozen.iter_mut().for_each(|f| *f = false);
            }
            None => frozen[m] = true,
        }
    }

    let energy = layout_energy(&pos, &distances, l, k);
    if let Some(last) = trace.last_mut() {
        *last = energy.min(*last);
    }
    Ok(LayoutResult {
        positions: pos,
        energy,
        initial_energy,
        iterations_used: iterations,
        converged,
        energy_trace: trace,
        distances,
    })
}

/// Safeguarded Newton step for vertex `m`, falling back to step-halving
/// gradient descent. Returns the new position and its vertex energy, or
/// `None` when no tried step lowers the energy.
fn improving_move(
    pos: &[Point],
    dist: &DistanceMatrix,
    m: usize,
    g: Point,
    before: f64,
    l: f64,
    k: f64,
) -> Option<(Point, f64)> {
    let try_direction = |step: Point| -> Option<(Point, f64)> {
        let mut scale = 1.0;
        for _ in 0..40 {
            let target = [pos[m][0] + scale * step[0], pos[m][1] + scale * step[1]];
            let after = vertex_energy(pos, dist, m, target, l, k);
            if after < before {
                return Some((target, after));
            }
            scale *= 0.5;
        }
        None
    };

    let [hxx, hxy, hyy] = vertex_hessian(pos, dist, m, l, k);
    let det = hxx * hyy - hxy * hxy;
    if hxx > 0.0 && det > 0.0 {
        let step = [(-hyy * g[0] + hxy * g[1]) / det, (hxy * g[0] - hxx * g[1]) / det];
        if step.iter().all(|s| s.is_finite()) {
            if let Some(found) = try_direction(step) {
                return Some(found);
            }
        }
    }
    // descent direction scaled by the diagonal curvature (or unit step)
    let curvature = (hxx + hyy).max(k);
    try_direction([-g[0] / curvature, -g[1] / curvature])
}

fn update_gradients(grads: &mut [Point], pos: &[Point], dist: &DistanceMatrix, m: usize, old: Point, l: f64, k: f64) {
    let n = pos.len();
    for i in 0..n {
        if i == m {
            continue;
        }
        let d = dist.get(i, m) as f64;
        let kij = k / (d * d);
        let lij = l * d;
        // remove the old contribution of m on i, add the new one
        for (sign, at) in [(-1.0, old), (1.0, pos[m])] {
            let dx = pos[i][0] - at[0];
            let dy = pos[i][1] - at[1];
            let r = dx.hypot(dy);
            let (ux, uy) = if r > COINCIDENT {
                (dx / r, dy / r)
            } else {
                let mut tmp = pos.to_vec();
                tmp[m] = at;
                let (ux, uy, _) = direction(&tmp, i, m);
                (ux, uy)
            };
            let f = kij * (r - lij);
            grads[i][0] += sign * f * ux;
            grads[i][1] += sign * f * uy;
        }
    }
    grads[m] = vertex_gradient(pos, dist, m, l, k);
}

/// Nudge exactly coincident vertices apart by a seeded epsilon.
fn jitter_coincident(pos: &mut [Point], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pos.len();
    for i in 0..n {
        for j in 0..i {
            if (pos[i][0] - pos[j][0]).hypot(pos[i][1] - pos[j][1]) <= COINCIDENT {
                pos[i][0] += rng.random_range(-1e-6..1e-6);
                pos[i][1] += rng.random_range(-1e-6..1e-6);
            }
        }
    }
}
