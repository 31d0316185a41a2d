//! Deterministic synthetic floorplans, episodes and template instructions.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write as _};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instruction_parser::{ComponentKind, InstructionParser, LanguageAssets, PosTag};
use crate::path_proposer::{astar, propose, step_allowed, CandidatePath, PlanningContext, ProposerLimits};
use crate::semantic_map::{
    wrap_angle, CategoryId, CategoryTable, GridCell, InstanceId, MapBuilder, MapError, NavGrid, ObjectInstance, Pose,
    SemanticVoxelMap, Voxel, DEFAULT_RESOLUTION, NUM_CATEGORIES,
};

pub const MIN_EPISODE_LENGTH: f64 = 4.0;
pub const MAX_EPISODE_LENGTH: f64 = 20.0;
pub const TURN_THRESHOLD_DEG: f64 = 45.0;
pub const LANDMARK_RADIUS: f64 = 3.0;
pub const GOAL_ANCHOR_RADIUS: f64 = 1.5;

const WALL_THICKNESS: f64 = 0.15;
const DOOR_WIDTH: f64 = 1.0;
const WALL_CLEARANCE: f64 = 0.6;
const OBJECT_GAP: f64 = 0.6;
const EXTRA_DOOR_PROB: f64 = 0.25;
const MAP_HEIGHT: f64 = 2.0;
const SAMPLE_RETRIES: usize = 500;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment spec: {0}")]
    Spec(String),
    #[error("rooms of {0:.2} m cannot hold the walls and doors")]
    Infeasible(f64),
    #[error("no valid episode after {0} attempts")]
    SamplingFailed(usize),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed episode on line {line}: {message}")]
    Episode { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub seed: u64,
    /// (rows, cols).
    pub grid_rooms: (u32, u32),
    /// Room side lengths in meters, inclusive range.
    pub room_size_range: (f64, f64),
    pub objects_per_room_range: (u32, u32),
    pub category_pool: Vec<CategoryId>,
    pub resolution: f64,
}

impl EnvSpec {
    pub fn new(seed: u64, category_pool: Vec<CategoryId>) -> Self {
        Self {
            seed,
            grid_rooms: (2, 3),
            room_size_range: (3.0, 5.0),
            objects_per_room_range: (2, 5),
            category_pool,
            resolution: DEFAULT_RESOLUTION,
        }
    }

    /// Spec with a seeded random pool of `pool_size` categories.
    pub fn with_random_pool(seed: u64, pool_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x706f_6f6c);
        let mut ids: Vec<CategoryId> = (0..NUM_CATEGORIES as u16).map(CategoryId).collect();
        ids.shuffle(&mut rng);
        ids.truncate(pool_size.clamp(1, NUM_CATEGORIES));
        ids.sort();
        Self::new(seed, ids)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let (rows, cols) = self.grid_rooms;
        if rows == 0 || cols == 0 || rows * cols < 2 {
            return Err(EnvError::Spec(format!("need at least 2 rooms, got {rows}x{cols}")));
        }
        let (lo, hi) = self.room_size_range;
        if !(lo >= 2.0 && hi >= lo && hi.is_finite()) {
            return Err(EnvError::Spec(format!("room sizes must be >= 2 m, got {lo}..{hi}")));
        }
        if self.objects_per_room_range.0 > self.objects_per_room_range.1 {
            return Err(EnvError::Spec("objects_per_room_range is reversed".into()));
        }
        if self.category_pool.is_empty() {
            return Err(EnvError::Spec("category pool is empty".into()));
        }
        if self.category_pool.iter().any(|c| c.index() >= NUM_CATEGORIES) {
            return Err(EnvError::Spec("category pool has an unknown id".into()));
        }
        if !(self.resolution > 0.0) {
            return Err(EnvError::Spec("resolution must be positive".into()));
        }
        if lo < DOOR_WIDTH + 2.0 * 0.3 {
            return Err(EnvError::Infeasible(lo));
        }
        Ok(())
    }
}

fn cells(meters: f64, res: f64) -> u32 {
    (meters / res).round() as u32
}

/// Cell ranges `[start, end)` of each room along one axis, walls in between.
fn axis_layout(sizes: &[f64], res: f64) -> (Vec<(u32, u32)>, u32) {
    let wall = cells(WALL_THICKNESS, res).max(1);
    let mut pos = wall;
    let mut out = Vec::with_capacity(sizes.len());
    for &s in sizes {
        let n = cells(s, res);
        out.push((pos, pos + n));
        pos += n + wall;
    }
    (out, pos)
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    parent[i] = r;
    r
}

pub fn generate_map(spec: &EnvSpec) -> Result<SemanticVoxelMap, EnvError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let res = spec.resolution;
    let (rows, cols) = (spec.grid_rooms.0 as usize, spec.grid_rooms.1 as usize);
    let (lo, hi) = spec.room_size_range;
    let widths: Vec<f64> = (0..cols).map(|_| rng.random_range(lo..=hi)).collect();
    let heights: Vec<f64> = (0..rows).map(|_| rng.random_range(lo..=hi)).collect();
    let (xs, nx) = axis_layout(&widths, res);
    let (ys, ny) = axis_layout(&heights, res);
    let nz = cells(MAP_HEIGHT, res).max(2);
    let mut floor = vec![false; nx as usize * ny as usize];
    let idx = |x: u32, y: u32| y as usize * nx as usize + x as usize;
    for &(y0, y1) in &ys {
        for &(x0, x1) in &xs {
            for y in y0..y1 {
                for x in x0..x1 {
                    floor[idx(x, y)] = true;
                }
            }
        }
    }

    // Doors: a random spanning tree over adjacent rooms plus some extra links.
    let room = |r: usize, c: usize| r * cols + c;
    let mut edges: Vec<(usize, usize, bool)> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push((room(r, c), room(r, c + 1), true));
            }
            if r + 1 < rows {
                edges.push((room(r, c), room(r + 1, c), false));
            }
        }
    }
    edges.shuffle(&mut rng);
    let mut parent: Vec<usize> = (0..rows * cols).collect();
    let door_cells = cells(DOOR_WIDTH, res);
    let margin = cells(0.3, res);
    for &(a, b, horizontal) in &edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        let tree = ra != rb;
        if tree {
            parent[ra] = rb;
        }
        if !tree && !rng.random_bool(EXTRA_DOOR_PROB) {
            continue;
        }
        let (r, c) = (a / cols, a % cols);
        if horizontal {
            let (wx0, wx1) = (xs[c].1, xs[c + 1].0);
            let (y0, y1) = ys[r];
            let start = rng.random_range(y0 + margin..=y1 - margin - door_cells);
            for y in start..start + door_cells {
                for x in wx0..wx1 {
                    floor[idx(x, y)] = true;
                }
            }
        } else {
            let (wy0, wy1) = (ys[r].1, ys[r + 1].0);
            let (x0, x1) = xs[c];
            let start = rng.random_range(x0 + margin..=x1 - margin - door_cells);
            for x in start..start + door_cells {
                for y in wy0..wy1 {
                    floor[idx(x, y)] = true;
                }
            }
        }
    }

    // Objects: axis-aligned blocks clear of walls and of each other.
    let mut placed: Vec<([f64; 4], CategoryId, f64)> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let (x0, x1) = (xs[c].0 as f64 * res, xs[c].1 as f64 * res);
            let (y0, y1) = (ys[r].0 as f64 * res, ys[r].1 as f64 * res);
            let count = rng.random_range(spec.objects_per_room_range.0..=spec.objects_per_room_range.1);
            for _ in 0..count {
                let category = *spec.category_pool.choose(&mut rng).expect("pool is non-empty");
                let (w, h) = (rng.random_range(0.4..0.9), rng.random_range(0.4..0.9));
                let height = rng.random_range(0.3..1.2);
                for _ in 0..30 {
                    let lo_x = x0 + WALL_CLEARANCE;
                    let hi_x = x1 - WALL_CLEARANCE - w;
                    let lo_y = y0 + WALL_CLEARANCE;
                    let hi_y = y1 - WALL_CLEARANCE - h;
                    if hi_x <= lo_x || hi_y <= lo_y {
                        break;
                    }
                    let bx = rng.random_range(lo_x..hi_x);
                    let by = rng.random_range(lo_y..hi_y);
                    let rect = [bx, by, bx + w, by + h];
                    let clear = placed.iter().all(|(o, _, _)| {
                        rect[0] >= o[2] + OBJECT_GAP || o[0] >= rect[2] + OBJECT_GAP || rect[1] >= o[3] + OBJECT_GAP || o[1] >= rect[3] + OBJECT_GAP
                    });
                    if clear {
                        placed.push((rect, category, height));
                        break;
                    }
                }
            }
        }
    }

    let mut b = MapBuilder::new(res, [nx, ny, nz], [0.0; 3])?;
    let mut object_cells: Vec<Vec<(u32, u32, u32)>> = Vec::with_capacity(placed.len());
    for (rect, _, height) in &placed {
        let (cx0, cy0) = (cells(rect[0], res), cells(rect[1], res));
        let (cx1, cy1) = (cells(rect[2], res).max(cx0 + 1), cells(rect[3], res).max(cy0 + 1));
        let hz = cells(*height, res).clamp(1, nz - 1);
        let mut shell = Vec::new();
        for x in cx0..cx1 {
            for y in cy0..cy1 {
                floor[idx(x, y)] = false;
                for z in 1..=hz {
                    let boundary = x == cx0 || x + 1 == cx1 || y == cy0 || y + 1 == cy1 || z == 1 || z == hz;
                    if boundary {
                        shell.push((x, y, z));
                    }
                }
            }
        }
        object_cells.push(shell);
    }

    // Keep only the largest navigable component.
    let grid = NavGrid::from_fn(res, [nx, ny], [0.0, 0.0], |c| floor[idx(c.x, c.y)]);
    let keep = largest_component(&grid);
    for y in 0..ny {
        for x in 0..nx {
            if keep[idx(x, y)] {
                b.set([x, y, 0], Voxel::floor())?;
            } else if !floor[idx(x, y)] && is_wall(x, y, &xs, &ys) {
                b.set([x, y, 1], Voxel::blocked())?;
            }
        }
    }
    for (i, ((_, category, _), shell)) in placed.iter().zip(&object_cells).enumerate() {
        let v = Voxel::object(InstanceId(i as u32 + 1), *category);
        for &(x, y, z) in shell {
            b.set([x, y, z], v)?;
        }
    }
    Ok(b.build()?)
}

fn is_wall(x: u32, y: u32, xs: &[(u32, u32)], ys: &[(u32, u32)]) -> bool {
    let in_room_x = xs.iter().any(|&(a, b)| x >= a && x < b);
    let in_room_y = ys.iter().any(|&(a, b)| y >= a && y < b);
    !(in_room_x && in_room_y)
}

/// Cells of the largest 8-connected navigable component (same move rules as
/// the planner); ties go to the component found first in scan order.
pub fn largest_component(grid: &NavGrid) -> Vec<bool> {
    let n = grid.len();
    let mut comp = vec![u32::MAX; n];
    let mut best = (0usize, u32::MAX);
    let mut next_id = 0u32;
    for start in grid.navigable_cells() {
        let si = grid.linear(start);
        if comp[si] != u32::MAX {
            continue;
        }
        let id = next_id;
        next_id += 1;
        comp[si] = id;
        let mut size = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(c) = queue.pop_front() {
            size += 1;
            for &(dx, dy, _) in &crate::path_proposer::search::NEIGHBORS {
                let (x, y) = (c.x as i64, c.y as i64);
                if step_allowed(grid, x, y, dx, dy) {
                    let nc = GridCell::new((x + dx) as u32, (y + dy) as u32);
                    let ni = grid.linear(nc);
                    if comp[ni] == u32::MAX {
                        comp[ni] = id;
                        queue.push_back(nc);
                    }
                }
            }
        }
        if size > best.0 {
            best = (size, id);
        }
    }
    comp.into_iter().map(|c| c == best.1 && c != u32::MAX).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub map_id: String,
    pub instruction: String,
    pub start_pose: Pose,
    pub gt_path: Vec<[f64; 2]>,
    pub goal: [f64; 3],
}

impl Episode {
    pub fn goal_xy(&self) -> [f64; 2] {
        [self.goal[0], self.goal[1]]
    }
}

pub fn path_length(path: &[[f64; 2]]) -> f64 {
    path.windows(2).map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt()).sum()
}

/// Direction from the first waypoint toward the first one at least 0.5 m away.
fn initial_heading(path: &[[f64; 2]]) -> f64 {
    let p0 = path[0];
    let target = path
        .iter()
        .find(|p| ((p[0] - p0[0]).powi(2) + (p[1] - p0[1]).powi(2)).sqrt() >= 0.5)
        .or(path.last())
        .copied()
        .unwrap_or(p0);
    if target == p0 {
        0.0
    } else {
        (target[1] - p0[1]).atan2(target[0] - p0[0])
    }
}

/// Samples a goal cell within 1.5 m of a random instance and a start whose A*
/// path to it measures 4 to 20 m, then verbalizes that path.
pub fn generate_episode(map: &SemanticVoxelMap, map_id: &str, seed: u64) -> Result<Episode, EnvError> {
    generate_episode_with(map, map_id, seed, &VerbalizeOptions::default())
}

pub fn generate_episode_with(
    map: &SemanticVoxelMap,
    map_id: &str,
    seed: u64,
    options: &VerbalizeOptions,
) -> Result<Episode, EnvError> {
    let grid = map.project_navgrid();
    let instances = map.instances();
    let nav: Vec<GridCell> = grid.navigable_cells().collect();
    if instances.is_empty() || nav.is_empty() {
        return Err(EnvError::SamplingFailed(0));
    }
    let ctx = PlanningContext::new(map, ProposerLimits::default());
    let parser = InstructionParser::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SAMPLE_RETRIES {
        let anchor = &instances[rng.random_range(0..instances.len())];
        let near = cells_near(&grid, [anchor.centroid[0], anchor.centroid[1]], GOAL_ANCHOR_RADIUS);
        if near.is_empty() {
            continue;
        }
        let goal = near[rng.random_range(0..near.len())];
        let start = nav[rng.random_range(0..nav.len())];
        let Some(path) = astar(&grid, start, goal).expect("sampled cells are navigable") else { continue };
        if !(MIN_EPISODE_LENGTH..=MAX_EPISODE_LENGTH).contains(&path.cost) {
            continue;
        }
        let gt_path = path.waypoints(&grid);
        let heading = initial_heading(&gt_path);
        let instruction = verbalize_with(map, &gt_path, rng.random(), options).text;
        let start_xy = gt_path[0];
        let start_pose = Pose::new([start_xy[0], start_xy[1], 0.0], heading);
        // Only instructions the default proposer can execute are kept.
        let components = parser.extract_key_components(&instruction);
        if propose(&ctx, &components, &start_pose).map_or(true, |c| c.is_empty()) {
            continue;
        }
        let end = *gt_path.last().expect("non-empty path");
        return Ok(Episode {
            id: format!("{map_id}-{seed}"),
            map_id: map_id.to_string(),
            instruction,
            start_pose,
            gt_path,
            goal: [end[0], end[1], 0.0],
        });
    }
    Err(EnvError::SamplingFailed(SAMPLE_RETRIES))
}

fn cells_near(grid: &NavGrid, p: [f64; 2], r: f64) -> Vec<GridCell> {
    let res = grid.resolution();
    let k = (r / res).ceil() as i64 + 1;
    let cx = ((p[0] - grid.origin()[0]) / res).floor() as i64;
    let cy = ((p[1] - grid.origin()[1]) / res).floor() as i64;
    let mut out = Vec::new();
    for y in cy - k..=cy + k {
        for x in cx - k..=cx + k {
            if grid.navigable_at(x, y) {
                let c = GridCell::new(x as u32, y as u32);
                let q = grid.cell_center(c);
                if ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt() <= r {
                    out.push(c);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerbalizeOptions {
    /// Replace category words with synonyms or hyponyms from the lexicon.
    pub paraphrase: bool,
    /// Longest stretch of straight path described by one landmark clause.
    pub chunk_length: f64,
}

impl Default for VerbalizeOptions {
    fn default() -> Self {
        Self { paraphrase: false, chunk_length: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verbalization {
    pub text: String,
    /// Components the text encodes, in order; the stop clause is the last landmark.
    pub components: Vec<ComponentKind>,
    pub landmark_instances: Vec<InstanceId>,
}

pub fn verbalize(map: &SemanticVoxelMap, path: &[[f64; 2]], seed: u64) -> String {
    verbalize_with(map, path, seed, &VerbalizeOptions::default()).text
}

struct Event {
    at: f64,
    clause: String,
    kind: ComponentKind,
    instance: Option<InstanceId>,
}

fn point_at(path: &[[f64; 2]], cum: &[f64], s: f64) -> [f64; 2] {
    let i = cum.partition_point(|&c| c <= s).clamp(1, path.len() - 1);
    let (a, b) = (path[i - 1], path[i]);
    let seg = cum[i] - cum[i - 1];
    let t = if seg > 0.0 { ((s - cum[i - 1]) / seg).clamp(0.0, 1.0) } else { 0.0 };
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

fn nearest_instance(instances: &[ObjectInstance], p: [f64; 2], r: Option<f64>) -> Option<&ObjectInstance> {
    let mut best: Option<(f64, &ObjectInstance)> = None;
    for inst in instances.iter().filter(|i| i.category.is_some()) {
        let d = ((inst.centroid[0] - p[0]).powi(2) + (inst.centroid[1] - p[1]).powi(2)).sqrt();
        if r.is_some_and(|r| d > r) {
            continue;
        }
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, inst));
        }
    }
    best.map(|(_, i)| i)
}

fn paraphrases(assets: &LanguageAssets, category: CategoryId) -> Vec<String> {
    let target = assets.object_synsets.get(category);
    let label = assets.categories.label(category);
    assets
        .lexicon
        .words()
        .iter()
        .filter(|w| w.as_str() != label)
        .filter(|w| {
            let e = assets.lexicon.get(w).expect("listed word");
            e.tags[0] == PosTag::NN
                && e.synsets.first().is_some_and(|&s| s == target || assets.taxonomy.parent(s) == Some(target))
        })
        .cloned()
        .collect()
}

/// Template instruction for a path: a turn clause wherever the accumulated
/// heading change exceeds 45 degrees, a landmark clause for the nearest
/// instance within 3 m of each straight chunk midpoint, and a final stop
/// clause for the instance nearest the goal.
pub fn verbalize_with(map: &SemanticVoxelMap, path: &[[f64; 2]], seed: u64, options: &VerbalizeOptions) -> Verbalization {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assets = LanguageAssets::bundled();
    let categories = CategoryTable::bundled();
    let instances = map.instances();
    let mut cum = vec![0.0];
    for w in path.windows(2) {
        let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();

    let mut events: Vec<Event> = Vec::new();
    let mut breaks = vec![0.0];
    let mut prev_dir: Option<f64> = None;
    let mut acc = 0.0;
    for (i, w) in path.windows(2).enumerate() {
        if w[0] == w[1] {
            continue;
        }
        let dir = (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]);
        if let Some(p) = prev_dir {
            acc += wrap_angle(dir - p);
            if acc.abs() > TURN_THRESHOLD_DEG.to_radians() + 1e-9 {
                let left = acc > 0.0;
                let side = if left { "left" } else { "right" };
                let template = rng.random_range(0..3);
                let clause = match template {
                    0 => format!("turn {side}"),
                    1 => format!("take a {side} turn"),
                    _ => format!("head to the {side}"),
                };
                let kind = if left { ComponentKind::TurnLeft } else { ComponentKind::TurnRight };
                events.push(Event { at: cum[i], clause, kind, instance: None });
                breaks.push(cum[i]);
                acc = 0.0;
            }
        }
        prev_dir = Some(dir);
    }
    breaks.push(total);

    let word = |rng: &mut ChaCha8Rng, cat: CategoryId| -> String {
        if options.paraphrase {
            let alts = paraphrases(&assets, cat);
            if let Some(w) = alts.choose(rng) {
                return w.clone();
            }
        }
        categories.label(cat).to_string()
    };
    let mut landmark_events: Vec<Event> = Vec::new();
    let mut last: Option<InstanceId> = None;
    for seg in breaks.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        if b <= a {
            continue;
        }
        let n = ((b - a) / options.chunk_length).ceil().max(1.0) as usize;
        for k in 0..n {
            let s = a + (k as f64 + 0.5) * (b - a) / n as f64;
            let Some(inst) = nearest_instance(instances, point_at(path, &cum, s), Some(LANDMARK_RADIUS)) else { continue };
            if last == Some(inst.instance_id) {
                continue;
            }
            last = Some(inst.instance_id);
            let cat = inst.category.expect("labeled");
            landmark_events.push(Event {
                at: s,
                clause: format!("walk past the {}", word(&mut rng, cat)),
                kind: ComponentKind::Landmark(cat),
                instance: Some(inst.instance_id),
            });
        }
    }
    events.extend(landmark_events);
    events.sort_by(|x, y| x.at.total_cmp(&y.at));
    if let Some(inst) = nearest_instance(instances, *path.last().expect("non-empty path"), None) {
        let cat = inst.category.expect("labeled");
        events.push(Event {
            at: total,
            clause: format!("stop near the {}", word(&mut rng, cat)),
            kind: ComponentKind::Landmark(cat),
            instance: Some(inst.instance_id),
        });
    }
    let text = if events.is_empty() {
        "stop.".to_string()
    } else {
        let mut t = events.iter().map(|e| e.clause.as_str()).collect::<Vec<_>>().join(". ");
        t.push('.');
        t
    };
    Verbalization {
        text,
        components: events.iter().map(|e| e.kind).collect(),
        landmark_instances: events.iter().filter_map(|e| e.instance).collect(),
    }
}

pub fn write_episodes(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<(), EnvError> {
    let mut out = Vec::new();
    for e in episodes {
        serde_json::to_writer(&mut out, e).map_err(|e| EnvError::Io(e.into()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_episodes(path: impl AsRef<Path>) -> Result<Vec<Episode>, EnvError> {
    let f = std::io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Episode =
            serde_json::from_str(&line).map_err(|err| EnvError::Episode { line: i + 1, message: err.to_string() })?;
        if e.gt_path.len() < 2 {
            return Err(EnvError::Episode { line: i + 1, message: "gt_path needs at least 2 waypoints".into() });
        }
        out.push(e);
    }
    Ok(out)
}

const PX_PER_M: f64 = 40.0;
const PATH_COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Top-down SVG: navigable floor, object footprints colored by category and
/// one polyline per path.
pub fn render_svg(map: &SemanticVoxelMap, paths: &[Vec<[f64; 2]>]) -> String {
    let grid = map.project_navgrid();
    let [nx, ny] = grid.dims();
    let res = grid.resolution();
    let (w, h) = (nx as f64 * res * PX_PER_M, ny as f64 * res * PX_PER_M);
    let o = grid.origin();
    // y grows upward in the world and downward in SVG.
    let tx = |x: f64| (x - o[0]) * PX_PER_M;
    let ty = |y: f64| h - (y - o[1]) * PX_PER_M;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.1}" height="{h:.1}" viewBox="0 0 {w:.1} {h:.1}">"#).unwrap();
    writeln!(s, r##"<rect x="0" y="0" width="{w:.1}" height="{h:.1}" fill="#404040"/>"##).unwrap();
    for y in 0..ny {
        let mut x = 0;
        while x < nx {
            if !grid.is_navigable(GridCell::new(x, y)) {
                x += 1;
                continue;
            }
            let x0 = x;
            while x < nx && grid.is_navigable(GridCell::new(x, y)) {
                x += 1;
            }
            let (wx, wy) = (o[0] + x0 as f64 * res, o[1] + (y + 1) as f64 * res);
            writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#f4f1e8"/>"##,
                tx(wx),
                ty(wy),
                (x - x0) as f64 * res * PX_PER_M,
                res * PX_PER_M
            )
            .unwrap();
        }
    }
    let mut boxes: std::collections::BTreeMap<u32, ([f64; 4], u16)> = std::collections::BTreeMap::new();
    for (idx, v) in map.voxels() {
        let (Some(inst), Some(cat)) = (v.instance, v.category) else { continue };
        let p = map.voxel_to_world(*idx);
        let half = res / 2.0;
        let e = boxes.entry(inst.0).or_insert(([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], cat.0));
        e.0 = [e.0[0].min(p[0] - half), e.0[1].min(p[1] - half), e.0[2].max(p[0] + half), e.0[3].max(p[1] + half)];
    }
    for (id, (b, cat)) in &boxes {
        let hue = (*cat as f64 * 360.0 / NUM_CATEGORIES as f64).round();
        writeln!(
            s,
            r#"<rect data-instance="{id}" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="hsl({hue},65%,55%)"/>"#,
            tx(b[0]),
            ty(b[3]),
            (b[2] - b[0]) * PX_PER_M,
            (b[3] - b[1]) * PX_PER_M
        )
        .unwrap();
    }
    for (i, p) in paths.iter().enumerate() {
        let pts: Vec<String> = p.iter().map(|q| format!("{:.2},{:.2}", tx(q[0]), ty(q[1]))).collect();
        writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="3"/>"#,
            pts.join(" "),
            PATH_COLORS[i % PATH_COLORS.len()]
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

pub fn render(map: &SemanticVoxelMap, paths: &[Vec<[f64; 2]>], out: impl AsRef<Path>) -> Result<(), EnvError> {
    fs::write(out, render_svg(map, paths))?;
    Ok(())
}

/// Waypoints of candidate paths, for rendering.
pub fn candidate_polylines(candidates: &[CandidatePath]) -> Vec<Vec<[f64; 2]>> {
    candidates.iter().map(|c| c.waypoints.clone()).collect()
}
