//! Instruction-constrained candidate paths: landmark clustering, turn
//! filtering, bounded sequential A* and the random fallbacks.

mod dbscan;
pub(crate) mod search;

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instruction_parser::{ComponentKind, KeyComponent};
use crate::semantic_map::{wrap_angle, CategoryId, GridCell, InstanceId, NavGrid, Pose, SemanticVoxelMap, NUM_CATEGORIES};

pub use dbscan::{dbscan, representative, Cluster};
pub use search::{astar, dijkstra, octile, step_allowed, step_cost, DistanceField, GridPath};

pub const RANDOM_PATH_MEAN: f64 = 8.89;
pub const RANDOM_PATH_STD: f64 = 2.67;

#[derive(Debug, Error)]
pub enum ProposerError {
    #[error("cell ({}, {}) is not navigable", .0.x, .0.y)]
    NotNavigable(GridCell),
    #[error("no navigable cell near {0:?}")]
    OffGrid([f64; 2]),
    #[error("no endpoint reachable within {0} m")]
    NoReachableEndpoint(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnDir {
    Left,
    Right,
}

/// Tunables for proposal. Distances in meters, angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposerLimits {
    pub eps: f64,
    pub min_pts: usize,
    /// Geodesic bound on each segment toward the next landmark.
    pub segment_bound: f64,
    pub end_radius: f64,
    pub n_end: usize,
    pub max_candidates: usize,
    pub turn_min_deg: f64,
    pub turn_max_deg: f64,
    /// Farthest an approach cell may lie from a landmark representative.
    pub approach_radius: f64,
    pub fallback_radius: f64,
    pub n_fallback: usize,
    pub use_turn_filter: bool,
    pub use_clustering: bool,
    pub seed: u64,
}

impl Default for ProposerLimits {
    fn default() -> Self {
        Self {
            eps: 0.5,
            min_pts: 1,
            segment_bound: 5.0,
            end_radius: 2.0,
            n_end: 3,
            max_candidates: 2000,
            turn_min_deg: 15.0,
            turn_max_deg: 165.0,
            approach_radius: 1.5,
            fallback_radius: 20.0,
            n_fallback: 100,
            use_turn_filter: true,
            use_clustering: true,
            seed: 0,
        }
    }
}

/// Signed bearing of `p` relative to the agent, in degrees in (-180, 180],
/// rounded to 1e-9 degrees so that exact boundary angles compare exactly.
pub fn relative_bearing_deg(position: [f64; 2], heading: f64, p: [f64; 2]) -> f64 {
    let a = wrap_angle((p[1] - position[1]).atan2(p[0] - position[0]) - heading).to_degrees();
    (a * 1e9).round() / 1e9
}

pub fn turn_accepts(position: [f64; 2], heading: f64, p: [f64; 2], dir: TurnDir, limits: &ProposerLimits) -> bool {
    let a = relative_bearing_deg(position, heading, p);
    match dir {
        TurnDir::Left => a > limits.turn_min_deg && a < limits.turn_max_deg,
        TurnDir::Right => a < -limits.turn_min_deg && a > -limits.turn_max_deg,
    }
}

/// Keeps candidates strictly inside the open (15°, 165°) sector on the turn side.
pub fn turn_filter(position: [f64; 2], heading: f64, candidates: &[[f64; 2]], dir: TurnDir) -> Vec<[f64; 2]> {
    let limits = ProposerLimits::default();
    candidates.iter().copied().filter(|&p| turn_accepts(position, heading, p, dir, &limits)).collect()
}

/// A landmark a path can be routed through: a cluster of same-category
/// instances reduced to one representative core sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandmarkTarget {
    pub category: CategoryId,
    pub cluster: usize,
    pub members: Vec<InstanceId>,
    pub core: [f64; 2],
    /// Navigable cell nearest the core.
    pub cell: GridCell,
}

/// Landmark targets per category for one map.
#[derive(Debug, Clone)]
pub struct LandmarkIndex {
    per_category: Vec<Vec<LandmarkTarget>>,
}

impl LandmarkIndex {
    pub fn build(map: &SemanticVoxelMap, grid: &NavGrid, limits: &ProposerLimits) -> Self {
        let mut per_category = vec![Vec::new(); NUM_CATEGORIES];
        for (cat, slot) in per_category.iter_mut().enumerate() {
            let category = CategoryId(cat as u16);
            let instances = map.instances_of(category);
            if instances.is_empty() {
                continue;
            }
            let points: Vec<[f64; 2]> = instances.iter().map(|i| [i.centroid[0], i.centroid[1]]).collect();
            let clusters = if limits.use_clustering {
                dbscan(&points, limits.eps, limits.min_pts)
            } else {
                (0..points.len()).map(|i| Cluster { members: vec![i], cores: vec![i] }).collect()
            };
            for (ci, cluster) in clusters.iter().enumerate() {
                let core = points[representative(&points, cluster)];
                if let Some(cell) = grid.nearest_navigable(core, limits.approach_radius) {
                    slot.push(LandmarkTarget {
                        category,
                        cluster: ci,
                        members: cluster.members.iter().map(|&m| instances[m].instance_id).collect(),
                        core,
                        cell,
                    });
                }
            }
        }
        Self { per_category }
    }

    pub fn targets(&self, category: CategoryId) -> &[LandmarkTarget] {
        &self.per_category[category.index()]
    }

    pub fn len(&self) -> usize {
        self.per_category.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Turn constraint that was active when a landmark was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TurnCheck {
    pub dir: TurnDir,
    pub position: [f64; 2],
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisitedLandmark {
    /// Index into the component sequence.
    pub component: usize,
    pub category: CategoryId,
    pub cluster: usize,
    pub core: [f64; 2],
    pub cell: GridCell,
    /// Index of the landmark cell in the candidate's waypoints.
    pub waypoint_index: usize,
    /// Geodesic length of the segment that reached this landmark.
    pub segment_length: f64,
    pub turn: Option<TurnCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidatePath {
    pub waypoints: Vec<[f64; 2]>,
    #[serde(skip)]
    pub cells: Vec<GridCell>,
    pub visited_landmarks: Vec<VisitedLandmark>,
    pub endpoint: [f64; 2],
    pub geodesic_length: f64,
}

impl CandidatePath {
    fn from_cells(grid: &NavGrid, cells: Vec<GridCell>, visited_landmarks: Vec<VisitedLandmark>) -> Self {
        let waypoints: Vec<[f64; 2]> = cells.iter().map(|&c| grid.cell_center(c)).collect();
        let geodesic_length = cells.windows(2).map(|w| step_cost(grid, w[0], w[1])).sum();
        let endpoint = *waypoints.last().expect("paths have at least one cell");
        Self { waypoints, cells, visited_landmarks, endpoint, geodesic_length }
    }
}

/// Planning context for one map, reusable across episodes.
#[derive(Debug, Clone)]
pub struct PlanningContext {
    pub grid: Arc<NavGrid>,
    pub landmarks: Arc<LandmarkIndex>,
    pub limits: ProposerLimits,
}

impl PlanningContext {
    pub fn new(map: &SemanticVoxelMap, limits: ProposerLimits) -> Self {
        let grid = map.project_navgrid();
        let landmarks = LandmarkIndex::build(map, &grid, &limits);
        Self { grid: Arc::new(grid), landmarks: Arc::new(landmarks), limits }
    }

    pub fn start_cell(&self, pose: &Pose) -> Result<GridCell, ProposerError> {
        let p = pose.xy();
        self.grid.nearest_navigable(p, 1.0).ok_or(ProposerError::OffGrid(p))
    }
}

#[derive(Clone)]
struct Node {
    cell: GridCell,
    heading: f64,
    cells: Vec<GridCell>,
    visited: Vec<VisitedLandmark>,
    pending: Option<TurnDir>,
}

struct SearchCache<'g> {
    grid: &'g NavGrid,
    bound: f64,
    fields: HashMap<GridCell, DistanceField>,
    segments: HashMap<(GridCell, GridCell), Option<Arc<GridPath>>>,
}

impl<'g> SearchCache<'g> {
    fn field(&mut self, c: GridCell) -> &DistanceField {
        let (grid, bound) = (self.grid, self.bound);
        self.fields.entry(c).or_insert_with(|| dijkstra(grid, c, Some(bound)).expect("search starts on navigable cells"))
    }

    fn segment(&mut self, a: GridCell, b: GridCell) -> Option<Arc<GridPath>> {
        let grid = self.grid;
        self.segments
            .entry((a, b))
            .or_insert_with(|| astar(grid, a, b).expect("segment ends are navigable").map(Arc::new))
            .clone()
    }
}

fn last_step_heading(cells: &[GridCell], fallback: f64) -> f64 {
    match cells {
        [.., a, b] => (b.y as f64 - a.y as f64).atan2(b.x as f64 - a.x as f64),
        _ => fallback,
    }
}

/// Enumerates landmark assignments in component order, breadth first, and
/// expands each into up to `n_end` endpoints near its final landmark. Returns
/// an empty set when the components contain no landmark or every branch is
/// pruned.
pub fn propose(ctx: &PlanningContext, components: &[KeyComponent], start: &Pose) -> Result<Vec<CandidatePath>, ProposerError> {
    let grid = &*ctx.grid;
    let limits = &ctx.limits;
    let start_cell = ctx.start_cell(start)?;
    if !components.iter().any(|c| c.landmark().is_some()) || limits.max_candidates == 0 {
        return Ok(Vec::new());
    }
    let mut cache = SearchCache { grid, bound: limits.segment_bound, fields: HashMap::new(), segments: HashMap::new() };
    let mut frontier = vec![Node { cell: start_cell, heading: start.heading, cells: vec![start_cell], visited: Vec::new(), pending: None }];
    for (ci, comp) in components.iter().enumerate() {
        let category = match comp.kind {
            ComponentKind::TurnLeft | ComponentKind::TurnRight => {
                let dir = if comp.kind == ComponentKind::TurnLeft { TurnDir::Left } else { TurnDir::Right };
                frontier.iter_mut().for_each(|n| n.pending = Some(dir));
                continue;
            }
            ComponentKind::Landmark(q) => q,
        };
        let targets = ctx.landmarks.targets(category);
        let mut next = Vec::new();
        'nodes: for node in &frontier {
            let position = grid.cell_center(node.cell);
            let field = cache.field(node.cell);
            let mut options: Vec<(f64, &LandmarkTarget)> = targets
                .iter()
                .filter_map(|t| field.distance(t.cell).filter(|&d| d <= limits.segment_bound).map(|d| (d, t)))
                .collect();
            let check = match (node.pending, limits.use_turn_filter) {
                (Some(dir), true) => {
                    options.retain(|(_, t)| turn_accepts(position, node.heading, t.core, dir, limits));
                    Some(TurnCheck { dir, position, heading: node.heading })
                }
                _ => None,
            };
            options.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cluster.cmp(&b.1.cluster)));
            for (_, t) in options {
                let Some(seg) = cache.segment(node.cell, t.cell) else { continue };
                let mut cells = node.cells.clone();
                cells.extend_from_slice(&seg.cells[1..]);
                let mut visited = node.visited.clone();
                visited.push(VisitedLandmark {
                    component: ci,
                    category,
                    cluster: t.cluster,
                    core: t.core,
                    cell: t.cell,
                    waypoint_index: cells.len() - 1,
                    segment_length: seg.cost,
                    turn: check,
                });
                next.push(Node { cell: t.cell, heading: last_step_heading(&seg.cells, node.heading), cells, visited, pending: None });
                if next.len() >= limits.max_candidates {
                    break 'nodes;
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            return Ok(Vec::new());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(limits.seed);
    let mut pools: HashMap<GridCell, Vec<GridCell>> = HashMap::new();
    let mut out = Vec::new();
    'leaves: for leaf in &frontier {
        let last = leaf.visited.last().expect("leaves visited a landmark");
        let pool = pools.entry(last.cell).or_insert_with(|| {
            let field = dijkstra(grid, last.cell, Some(limits.segment_bound)).expect("landmark cells are navigable");
            field
                .reached()
                .map(|(c, _)| c)
                .filter(|&c| {
                    let p = grid.cell_center(c);
                    ((p[0] - last.core[0]).powi(2) + (p[1] - last.core[1]).powi(2)).sqrt() <= limits.end_radius
                })
                .collect()
        });
        if pool.is_empty() {
            continue;
        }
        let mut picks = sample(&mut rng, pool.len(), limits.n_end.min(pool.len())).into_vec();
        picks.sort_unstable();
        for i in picks {
            let end = pool[i];
            let Some(seg) = cache.segment(leaf.cell, end) else { continue };
            let mut cells = leaf.cells.clone();
            cells.extend_from_slice(&seg.cells[1..]);
            out.push(CandidatePath::from_cells(grid, cells, leaf.visited.clone()));
            if out.len() >= limits.max_candidates {
                break 'leaves;
            }
        }
    }
    Ok(finalize(out))
}

/// Deterministic order (visited clusters, then endpoint) without duplicate
/// waypoint sequences.
fn finalize(mut paths: Vec<CandidatePath>) -> Vec<CandidatePath> {
    paths.sort_by(|a, b| {
        let ka: Vec<(usize, usize)> = a.visited_landmarks.iter().map(|v| (v.category.index(), v.cluster)).collect();
        let kb: Vec<(usize, usize)> = b.visited_landmarks.iter().map(|v| (v.category.index(), v.cluster)).collect();
        ka.cmp(&kb).then(a.cells.last().cmp(&b.cells.last())).then(a.cells.cmp(&b.cells))
    });
    let mut seen = HashSet::new();
    paths.retain(|p| seen.insert(p.cells.clone()));
    paths
}

/// A* paths from the start to up to `n_fallback` random endpoints within the
/// fallback radius (geodesic).
pub fn fallback_random(ctx: &PlanningContext, start: &Pose, seed: u64) -> Result<Vec<CandidatePath>, ProposerError> {
    let grid = &*ctx.grid;
    let limits = &ctx.limits;
    let start_cell = ctx.start_cell(start)?;
    let field = dijkstra(grid, start_cell, Some(limits.fallback_radius))?;
    let reachable: Vec<GridCell> = field.reached().map(|(c, _)| c).filter(|&c| c != start_cell).collect();
    if reachable.is_empty() {
        return Err(ProposerError::NoReachableEndpoint(limits.fallback_radius));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, reachable.len(), limits.n_fallback.min(reachable.len())).into_vec();
    picks.sort_unstable();
    let mut out = Vec::with_capacity(picks.len());
    for i in picks {
        if let Some(p) = astar(grid, start_cell, reachable[i])? {
            out.push(CandidatePath::from_cells(grid, p.cells, Vec::new()));
        }
    }
    Ok(finalize(out))
}

/// Target length for the random-path agent: N(8.89, 2.67) clamped to [1, 20] m.
pub fn sample_random_length(rng: &mut impl Rng) -> f64 {
    let normal = Normal::new(RANDOM_PATH_MEAN, RANDOM_PATH_STD).expect("valid normal");
    normal.sample(rng).clamp(1.0, 20.0)
}

/// Random-path agent: chains A* hops toward random reachable cells until the
/// walked length reaches a sampled target.
pub fn random_baseline(grid: &NavGrid, start: &Pose, seed: u64) -> Result<CandidatePath, ProposerError> {
    let p = start.xy();
    let start_cell = grid.nearest_navigable(p, 1.0).ok_or(ProposerError::OffGrid(p))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = sample_random_length(&mut rng);
    let field = dijkstra(grid, start_cell, None)?;
    let reachable: Vec<GridCell> = field.reached().map(|(c, _)| c).collect();
    let mut cells = vec![start_cell];
    let mut length = 0.0;
    'hops: for _ in 0..64 {
        let cur = *cells.last().expect("non-empty");
        let goal = reachable[rng.random_range(0..reachable.len())];
        let Some(hop) = astar(grid, cur, goal)? else { continue };
        for w in hop.cells.windows(2) {
            length += step_cost(grid, w[0], w[1]);
            cells.push(w[1]);
            if length >= target {
                break 'hops;
            }
        }
    }
    Ok(CandidatePath::from_cells(grid, cells, Vec::new()))
}
