use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::semantic_map::{GridCell, NavGrid};

use super::ProposerError;

const SQRT2: f64 = std::f64::consts::SQRT_2;

pub(crate) const NEIGHBORS: [(i64, i64, f64); 8] = [
    (1, 0, 1.0),
    (-1, 0, 1.0),
    (0, 1, 1.0),
    (0, -1, 1.0),
    (1, 1, SQRT2),
    (1, -1, SQRT2),
    (-1, 1, SQRT2),
    (-1, -1, SQRT2),
];

/// Whether the 8-connected move from `(x, y)` by `(dx, dy)` is legal. A diagonal
/// is forbidden only when both axis cells it passes are blocked.
pub fn step_allowed(grid: &NavGrid, x: i64, y: i64, dx: i64, dy: i64) -> bool {
    if !grid.navigable_at(x + dx, y + dy) {
        return false;
    }
    if dx != 0 && dy != 0 {
        return grid.navigable_at(x + dx, y) || grid.navigable_at(x, y + dy);
    }
    true
}

/// Cost in meters of one move between 8-neighbors.
pub fn step_cost(grid: &NavGrid, a: GridCell, b: GridCell) -> f64 {
    let diag = a.x != b.x && a.y != b.y;
    grid.resolution() * if diag { SQRT2 } else { 1.0 }
}

/// Octile distance in meters; admissible and consistent for the move set.
pub fn octile(grid: &NavGrid, a: GridCell, b: GridCell) -> f64 {
    let dx = (a.x as f64 - b.x as f64).abs();
    let dy = (a.y as f64 - b.y as f64).abs();
    grid.resolution() * (dx.max(dy) + (SQRT2 - 1.0) * dx.min(dy))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    pub cells: Vec<GridCell>,
    /// Sum of step costs in meters.
    pub cost: f64,
}

impl GridPath {
    pub fn waypoints(&self, grid: &NavGrid) -> Vec<[f64; 2]> {
        self.cells.iter().map(|&c| grid.cell_center(c)).collect()
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Open {
    f: f64,
    g: f64,
    node: usize,
}

impl Eq for Open {}

impl Ord for Open {
    // Min-heap on f, preferring larger g, then lower index.
    fn cmp(&self, other: &Self) -> Ordering {
        other.f.total_cmp(&self.f).then(self.g.total_cmp(&other.g)).then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn check_endpoint(grid: &NavGrid, c: GridCell) -> Result<(), ProposerError> {
    if grid.is_navigable(c) {
        Ok(())
    } else {
        Err(ProposerError::NotNavigable(c))
    }
}

/// Optimal 8-connected path, or `None` when `g` is unreachable.
pub fn astar(grid: &NavGrid, s: GridCell, g: GridCell) -> Result<Option<GridPath>, ProposerError> {
    check_endpoint(grid, s)?;
    check_endpoint(grid, g)?;
    let n = grid.len();
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![u32::MAX; n];
    let mut closed = vec![false; n];
    let (si, gi) = (grid.linear(s), grid.linear(g));
    best[si] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Open { f: octile(grid, s, g), g: 0.0, node: si });
    while let Some(Open { g: gc, node, .. }) = heap.pop() {
        if closed[node] {
            continue;
        }
        closed[node] = true;
        if node == gi {
            return Ok(Some(GridPath { cells: trace(grid, &parent, si, gi), cost: gc }));
        }
        let c = grid.cell_of(node);
        let (x, y) = (c.x as i64, c.y as i64);
        for &(dx, dy, w) in &NEIGHBORS {
            if !step_allowed(grid, x, y, dx, dy) {
                continue;
            }
            let nc = GridCell::new((x + dx) as u32, (y + dy) as u32);
            let ni = grid.linear(nc);
            if closed[ni] {
                continue;
            }
            let ng = gc + w * grid.resolution();
            if ng < best[ni] {
                best[ni] = ng;
                parent[ni] = node as u32;
                heap.push(Open { f: ng + octile(grid, nc, g), g: ng, node: ni });
            }
        }
    }
    Ok(None)
}

fn trace(grid: &NavGrid, parent: &[u32], si: usize, gi: usize) -> Vec<GridCell> {
    let mut cells = vec![grid.cell_of(gi)];
    let mut cur = gi;
    while cur != si {
        cur = parent[cur] as usize;
        cells.push(grid.cell_of(cur));
    }
    cells.reverse();
    cells
}

/// Single-source geodesic distances, optionally bounded.
#[derive(Debug, Clone)]
pub struct DistanceField {
    source: GridCell,
    dist: Vec<f64>,
    parent: Vec<u32>,
    dims: [u32; 2],
}

impl DistanceField {
    pub fn source(&self) -> GridCell {
        self.source
    }

    /// Geodesic distance in meters, `None` if unreachable within the bound.
    pub fn distance(&self, c: GridCell) -> Option<f64> {
        if c.x >= self.dims[0] || c.y >= self.dims[1] {
            return None;
        }
        let d = self.dist[c.y as usize * self.dims[0] as usize + c.x as usize];
        d.is_finite().then_some(d)
    }

    /// Reached cells in increasing linear order.
    pub fn reached(&self) -> impl Iterator<Item = (GridCell, f64)> + '_ {
        let w = self.dims[0] as usize;
        self.dist
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_finite())
            .map(move |(i, &d)| (GridCell::new((i % w) as u32, (i / w) as u32), d))
    }

    /// Shortest-path tree route from the source to `c`.
    pub fn path_to(&self, grid: &NavGrid, c: GridCell) -> Option<GridPath> {
        let cost = self.distance(c)?;
        Some(GridPath { cells: trace(grid, &self.parent, grid.linear(self.source), grid.linear(c)), cost })
    }
}

/// Dijkstra from `s` over the same move set as [`astar`]; cells farther than
/// `bound` meters are left unreached.
pub fn dijkstra(grid: &NavGrid, s: GridCell, bound: Option<f64>) -> Result<DistanceField, ProposerError> {
    check_endpoint(grid, s)?;
    let limit = bound.unwrap_or(f64::INFINITY);
    let n = grid.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut parent = vec![u32::MAX; n];
    let mut closed = vec![false; n];
    let si = grid.linear(s);
    dist[si] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Open { f: 0.0, g: 0.0, node: si });
    while let Some(Open { g: gc, node, .. }) = heap.pop() {
        if closed[node] {
            continue;
        }
        closed[node] = true;
        let c = grid.cell_of(node);
        let (x, y) = (c.x as i64, c.y as i64);
        for &(dx, dy, w) in &NEIGHBORS {
            if !step_allowed(grid, x, y, dx, dy) {
                continue;
            }
            let ni = grid.linear(GridCell::new((x + dx) as u32, (y + dy) as u32));
            let ng = gc + w * grid.resolution();
            if ng <= limit && ng < dist[ni] {
                dist[ni] = ng;
                parent[ni] = node as u32;
                heap.push(Open { f: ng, g: ng, node: ni });
            }
        }
    }
    Ok(DistanceField { source: s, dist, parent, dims: grid.dims() })
}
