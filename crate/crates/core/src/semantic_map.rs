//! Sparse 3D semantic voxel maps, their binary file format, instance queries and
//! the 2D navigable projection used for planning.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_CATEGORIES: usize = 40;
pub const DEFAULT_RESOLUTION: f64 = 0.05;

const MAP_MAGIC: &[u8; 8] = b"IPPDMAP1";
const MAP_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 3 * 4 + 3 * 8 + 8;
const RECORD_LEN: usize = 3 * 4 + 4 + 4 + 1;
const BUCKET_SIZE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic number")]
    BadMagic,
    #[error("unsupported map version {0}")]
    Version(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("point {0:?} is outside the map bounds")]
    OutOfBounds([f64; 3]),
    #[error("voxel index {0:?} is outside the map dims")]
    IndexOutOfBounds([u32; 3]),
    #[error("instance {instance} has voxels labeled with categories {first:?} and {second:?}")]
    InconsistentInstance {
        instance: u32,
        first: Option<CategoryId>,
        second: Option<CategoryId>,
    },
    #[error("invalid map: {0}")]
    Invalid(String),
    #[error("invalid category table: {0}")]
    Categories(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CategoryId(pub u16);

impl CategoryId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceId(pub u32);

/// The label set: exactly forty lowercase category names, id = position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryTable {
    labels: Vec<String>,
}

impl CategoryTable {
    pub fn bundled() -> Self {
        Self::from_text(include_str!("../assets/categories.txt")).expect("bundled categories are valid")
    }

    /// Parses the one-label-per-line text format (line number = id).
    pub fn from_text(text: &str) -> Result<Self, MapError> {
        let labels: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
        if labels.len() != NUM_CATEGORIES {
            return Err(MapError::Categories(format!("expected {NUM_CATEGORIES} labels, found {}", labels.len())));
        }
        for (i, label) in labels.iter().enumerate() {
            if label.chars().any(|c| c.is_uppercase()) {
                return Err(MapError::Categories(format!("label {label:?} is not lowercase")));
            }
            if labels[..i].contains(label) {
                return Err(MapError::Categories(format!("duplicate label {label:?}")));
            }
        }
        Ok(Self { labels })
    }

    pub fn to_text(&self) -> String {
        let mut out = self.labels.join("\n");
        out.push('\n');
        out
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, id: CategoryId) -> &str {
        &self.labels[id.index()]
    }

    pub fn id(&self, label: &str) -> Option<CategoryId> {
        self.labels.iter().position(|l| l == label).map(|i| CategoryId(i as u16))
    }

    pub fn ids(&self) -> impl Iterator<Item = CategoryId> + '_ {
        (0..self.labels.len()).map(|i| CategoryId(i as u16))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Voxel {
    pub instance: Option<InstanceId>,
    pub category: Option<CategoryId>,
    pub navigable: bool,
}

impl Voxel {
    pub fn floor() -> Self {
        Voxel { instance: None, category: None, navigable: true }
    }

    pub fn blocked() -> Self {
        Voxel { instance: None, category: None, navigable: false }
    }

    pub fn object(instance: InstanceId, category: CategoryId) -> Self {
        Voxel { instance: Some(instance), category: Some(category), navigable: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectInstance {
    pub instance_id: InstanceId,
    pub category: Option<CategoryId>,
    pub centroid: [f64; 3],
    pub voxel_count: usize,
}

/// Sparse voxel map. Immutable once built; derived instance data is cached on
/// first use.
#[derive(Debug)]
pub struct SemanticVoxelMap {
    resolution: f64,
    dims: [u32; 3],
    origin: [f64; 3],
    voxels: BTreeMap<[u32; 3], Voxel>,
    index: OnceLock<InstanceIndex>,
}

impl Clone for SemanticVoxelMap {
    fn clone(&self) -> Self {
        Self {
            resolution: self.resolution,
            dims: self.dims,
            origin: self.origin,
            voxels: self.voxels.clone(),
            index: OnceLock::new(),
        }
    }
}

impl PartialEq for SemanticVoxelMap {
    fn eq(&self, other: &Self) -> bool {
        self.resolution.to_bits() == other.resolution.to_bits()
            && self.dims == other.dims
            && self.origin.map(f64::to_bits) == other.origin.map(f64::to_bits)
            && self.voxels == other.voxels
    }
}

/// Accumulates voxels and validates them into a [`SemanticVoxelMap`].
#[derive(Debug, Clone)]
pub struct MapBuilder {
    resolution: f64,
    dims: [u32; 3],
    origin: [f64; 3],
    voxels: BTreeMap<[u32; 3], Voxel>,
}

impl MapBuilder {
    pub fn new(resolution: f64, dims: [u32; 3], origin: [f64; 3]) -> Result<Self, MapError> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(MapError::Invalid(format!("resolution must be positive, got {resolution}")));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(MapError::Invalid("origin must be finite".into()));
        }
        Ok(Self { resolution, dims, origin, voxels: BTreeMap::new() })
    }

    pub fn set(&mut self, index: [u32; 3], voxel: Voxel) -> Result<(), MapError> {
        if (0..3).any(|a| index[a] >= self.dims[a]) {
            return Err(MapError::IndexOutOfBounds(index));
        }
        self.voxels.insert(index, voxel);
        Ok(())
    }

    pub fn get(&self, index: [u32; 3]) -> Option<&Voxel> {
        self.voxels.get(&index)
    }

    pub fn remove(&mut self, index: [u32; 3]) -> Option<Voxel> {
        self.voxels.remove(&index)
    }

    pub fn dims(&self) -> [u32; 3] {
        self.dims
    }

    pub fn voxels_mut(&mut self) -> impl Iterator<Item = (&[u32; 3], &mut Voxel)> {
        self.voxels.iter_mut()
    }

    pub fn build(self) -> Result<SemanticVoxelMap, MapError> {
        let mut seen: HashMap<u32, Option<CategoryId>> = HashMap::new();
        for voxel in self.voxels.values() {
            if let Some(inst) = voxel.instance {
                match seen.get(&inst.0) {
                    Some(&cat) if cat != voxel.category => {
                        return Err(MapError::InconsistentInstance { instance: inst.0, first: cat, second: voxel.category });
                    }
                    Some(_) => {}
                    None => {
                        seen.insert(inst.0, voxel.category);
                    }
                }
            }
            if let Some(cat) = voxel.category {
                if cat.index() >= NUM_CATEGORIES {
                    return Err(MapError::Invalid(format!("category id {} out of range", cat.0)));
                }
            }
        }
        Ok(SemanticVoxelMap {
            resolution: self.resolution,
            dims: self.dims,
            origin: self.origin,
            voxels: self.voxels,
            index: OnceLock::new(),
        })
    }
}

impl SemanticVoxelMap {
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn dims(&self) -> [u32; 3] {
        self.dims
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    /// World-space extent as (min corner, max corner).
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let max = std::array::from_fn(|a| self.origin[a] + self.dims[a] as f64 * self.resolution);
        (self.origin, max)
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    pub fn voxels(&self) -> impl Iterator<Item = (&[u32; 3], &Voxel)> {
        self.voxels.iter()
    }

    pub fn voxel(&self, index: [u32; 3]) -> Option<&Voxel> {
        self.voxels.get(&index)
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> Result<[u32; 3], MapError> {
        let mut out = [0u32; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.resolution).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return Err(MapError::OutOfBounds(p));
            }
            out[a] = f as u32;
        }
        Ok(out)
    }

    pub fn voxel_to_world(&self, index: [u32; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + (index[a] as f64 + 0.5) * self.resolution)
    }

    fn index(&self) -> &InstanceIndex {
        self.index.get_or_init(|| InstanceIndex::new(self.compute_instances()))
    }

    fn compute_instances(&self) -> Vec<ObjectInstance> {
        let mut acc: BTreeMap<u32, (Option<CategoryId>, [f64; 3], usize)> = BTreeMap::new();
        for (idx, voxel) in &self.voxels {
            if let Some(inst) = voxel.instance {
                let c = self.voxel_to_world(*idx);
                let e = acc.entry(inst.0).or_insert((voxel.category, [0.0; 3], 0));
                for a in 0..3 {
                    e.1[a] += c[a];
                }
                e.2 += 1;
            }
        }
        acc.into_iter()
            .map(|(id, (category, sum, n))| ObjectInstance {
                instance_id: InstanceId(id),
                category,
                centroid: sum.map(|s| s / n as f64),
                voxel_count: n,
            })
            .collect()
    }

    /// One entry per instance id, ordered by id.
    pub fn instances(&self) -> &[ObjectInstance] {
        self.index().instances()
    }

    pub fn instances_of(&self, category: CategoryId) -> Vec<ObjectInstance> {
        self.instances().iter().filter(|i| i.category == Some(category)).cloned().collect()
    }

    pub fn instance_index(&self) -> &InstanceIndex {
        self.index()
    }

    /// Instances whose centroid lies in the closed ball of radius `r`.
    pub fn radius_query(&self, center: [f64; 3], r: f64) -> Vec<ObjectInstance> {
        self.index().radius_query(center, r)
    }

    pub fn project_navgrid(&self) -> NavGrid {
        let [nx, ny, _] = self.dims;
        let mut grid = NavGrid::empty(self.resolution, [nx, ny], [self.origin[0], self.origin[1]]);
        for (idx, voxel) in &self.voxels {
            if voxel.navigable {
                grid.set(GridCell::new(idx[0], idx[1]), true);
            }
        }
        grid
    }
}

/// Instances bucketed on a uniform 1 m xy grid for radius queries.
#[derive(Debug, Clone)]
pub struct InstanceIndex {
    instances: Vec<ObjectInstance>,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl InstanceIndex {
    pub fn new(instances: Vec<ObjectInstance>) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, inst) in instances.iter().enumerate() {
            buckets.entry(bucket_of(inst.centroid[0], inst.centroid[1])).or_default().push(i);
        }
        Self { instances, buckets }
    }

    pub fn instances(&self) -> &[ObjectInstance] {
        &self.instances
    }

    /// Sorted by distance, then instance id.
    pub fn radius_query(&self, center: [f64; 3], r: f64) -> Vec<ObjectInstance> {
        if !(r > 0.0) {
            return Vec::new();
        }
        let (bx0, by0) = bucket_of(center[0] - r, center[1] - r);
        let (bx1, by1) = bucket_of(center[0] + r, center[1] + r);
        let mut hits: Vec<(f64, usize)> = Vec::new();
        for bx in bx0..=bx1 {
            for by in by0..=by1 {
                let Some(ids) = self.buckets.get(&(bx, by)) else { continue };
                for &i in ids {
                    let d = distance3(self.instances[i].centroid, center);
                    if d <= r {
                        hits.push((d, i));
                    }
                }
            }
        }
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(self.instances[a.1].instance_id.cmp(&self.instances[b.1].instance_id)));
        hits.into_iter().map(|(_, i)| self.instances[i].clone()).collect()
    }
}

fn bucket_of(x: f64, y: f64) -> (i64, i64) {
    ((x / BUCKET_SIZE).floor() as i64, (y / BUCKET_SIZE).floor() as i64)
}

pub fn distance3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub x: u32,
    pub y: u32,
}

impl GridCell {
    pub const fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

/// 2D navigability projection of a voxel map.
#[derive(Debug, Clone, PartialEq)]
pub struct NavGrid {
    resolution: f64,
    dims: [u32; 2],
    origin: [f64; 2],
    bits: Vec<u64>,
}

impl NavGrid {
    pub fn empty(resolution: f64, dims: [u32; 2], origin: [f64; 2]) -> Self {
        let n = dims[0] as usize * dims[1] as usize;
        Self { resolution, dims, origin, bits: vec![0; n.div_ceil(64)] }
    }

    pub fn from_fn(resolution: f64, dims: [u32; 2], origin: [f64; 2], mut f: impl FnMut(GridCell) -> bool) -> Self {
        let mut g = Self::empty(resolution, dims, origin);
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let c = GridCell::new(x, y);
                if f(c) {
                    g.set(c, true);
                }
            }
        }
        g
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn dims(&self) -> [u32; 2] {
        self.dims
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.dims[0] as usize * self.dims[1] as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn linear(&self, c: GridCell) -> usize {
        c.y as usize * self.dims[0] as usize + c.x as usize
    }

    pub fn cell_of(&self, linear: usize) -> GridCell {
        let w = self.dims[0] as usize;
        GridCell::new((linear % w) as u32, (linear / w) as u32)
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.dims[0] as i64 && y < self.dims[1] as i64
    }

    pub fn set(&mut self, c: GridCell, navigable: bool) {
        let i = self.linear(c);
        if navigable {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn is_navigable(&self, c: GridCell) -> bool {
        if c.x >= self.dims[0] || c.y >= self.dims[1] {
            return false;
        }
        let i = self.linear(c);
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn navigable_at(&self, x: i64, y: i64) -> bool {
        self.contains(x, y) && self.is_navigable(GridCell::new(x as u32, y as u32))
    }

    pub fn navigable_count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn navigable_cells(&self) -> impl Iterator<Item = GridCell> + '_ {
        (0..self.len()).filter(move |&i| self.bits[i / 64] >> (i % 64) & 1 == 1).map(move |i| self.cell_of(i))
    }

    pub fn cell_center(&self, c: GridCell) -> [f64; 2] {
        [
            self.origin[0] + (c.x as f64 + 0.5) * self.resolution,
            self.origin[1] + (c.y as f64 + 0.5) * self.resolution,
        ]
    }

    pub fn world_to_cell(&self, p: [f64; 2]) -> Option<GridCell> {
        let x = ((p[0] - self.origin[0]) / self.resolution).floor();
        let y = ((p[1] - self.origin[1]) / self.resolution).floor();
        if x >= 0.0 && y >= 0.0 && x < self.dims[0] as f64 && y < self.dims[1] as f64 {
            Some(GridCell::new(x as u32, y as u32))
        } else {
            None
        }
    }

    /// Navigable cell whose center is closest to `p`, searched within `max_radius` meters.
    pub fn nearest_navigable(&self, p: [f64; 2], max_radius: f64) -> Option<GridCell> {
        let r = (max_radius / self.resolution).ceil() as i64 + 1;
        let cx = ((p[0] - self.origin[0]) / self.resolution).floor() as i64;
        let cy = ((p[1] - self.origin[1]) / self.resolution).floor() as i64;
        let mut best: Option<(f64, GridCell)> = None;
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if !self.navigable_at(x, y) {
                    continue;
                }
                let c = GridCell::new(x as u32, y as u32);
                let q = self.cell_center(c);
                let d = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
                if d <= max_radius && best.is_none_or(|(bd, bc)| d < bd || (d == bd && c < bc)) {
                    best = Some((d, c));
                }
            }
        }
        best.map(|(_, c)| c)
    }
}

/// Agent pose: world position and heading in radians, counter-clockwise from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    pub heading: f64,
}

impl Pose {
    pub fn new(position: [f64; 3], heading: f64) -> Self {
        Self { position, heading }
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.position[0], self.position[1]]
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

pub fn encode_map(map: &SemanticVoxelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * map.voxels.len());
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&MAP_VERSION.to_le_bytes());
    out.extend_from_slice(&map.resolution.to_le_bytes());
    for d in map.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for o in map.origin {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.extend_from_slice(&(map.voxels.len() as u64).to_le_bytes());
    for (idx, v) in &map.voxels {
        for i in idx {
            out.extend_from_slice(&i.to_le_bytes());
        }
        let inst = v.instance.map_or(-1, |i| i.0 as i32);
        let cat = v.category.map_or(-1, |c| c.0 as i32);
        out.extend_from_slice(&inst.to_le_bytes());
        out.extend_from_slice(&cat.to_le_bytes());
        out.push(v.navigable as u8);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    expected: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], MapError> {
        if self.pos + N > self.buf.len() {
            return Err(MapError::Truncated { expected: self.expected.max(self.pos + N), found: self.buf.len() });
        }
        let out = self.buf[self.pos..self.pos + N].try_into().expect("slice length");
        self.pos += N;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, MapError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn i32(&mut self) -> Result<i32, MapError> {
        Ok(i32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64, MapError> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64, MapError> {
        Ok(u64::from_le_bytes(self.take()?))
    }
}

pub fn decode_map(buf: &[u8]) -> Result<SemanticVoxelMap, MapError> {
    if buf.len() < MAP_MAGIC.len() {
        return Err(MapError::Truncated { expected: HEADER_LEN, found: buf.len() });
    }
    if &buf[..8] != MAP_MAGIC {
        return Err(MapError::BadMagic);
    }
    let mut r = Reader { buf, pos: 8, expected: HEADER_LEN };
    let version = r.u32()?;
    if version != MAP_VERSION {
        return Err(MapError::Version(version));
    }
    let resolution = r.f64()?;
    let dims = [r.u32()?, r.u32()?, r.u32()?];
    let origin = [r.f64()?, r.f64()?, r.f64()?];
    let count = r.u64()? as usize;
    r.expected = HEADER_LEN.saturating_add(count.saturating_mul(RECORD_LEN));
    if buf.len() < r.expected {
        return Err(MapError::Truncated { expected: r.expected, found: buf.len() });
    }
    if buf.len() > r.expected {
        return Err(MapError::Invalid(format!("{} trailing bytes", buf.len() - r.expected)));
    }
    let mut builder = MapBuilder::new(resolution, dims, origin)?;
    for _ in 0..count {
        let idx = [r.u32()?, r.u32()?, r.u32()?];
        let inst = r.i32()?;
        let cat = r.i32()?;
        let nav = r.take::<1>()?[0];
        let voxel = Voxel {
            instance: decode_label(inst, "instance")?.map(InstanceId),
            category: decode_label(cat, "category")?.map(|c| CategoryId(c as u16)),
            navigable: match nav {
                0 => false,
                1 => true,
                b => return Err(MapError::Invalid(format!("navigable flag {b}"))),
            },
        };
        if builder.voxels.insert(idx, voxel).is_some() {
            return Err(MapError::Invalid(format!("duplicate voxel {idx:?}")));
        }
        if (0..3).any(|a| idx[a] >= dims[a]) {
            return Err(MapError::IndexOutOfBounds(idx));
        }
    }
    builder.build()
}

fn decode_label(v: i32, what: &str) -> Result<Option<u32>, MapError> {
    match v {
        -1 => Ok(None),
        v if v >= 0 => Ok(Some(v as u32)),
        v => Err(MapError::Invalid(format!("{what} id {v}"))),
    }
}

pub fn save_map(map: &SemanticVoxelMap, path: impl AsRef<Path>) -> Result<(), MapError> {
    fs::write(path, encode_map(map))?;
    Ok(())
}

pub fn load_map(path: impl AsRef<Path>) -> Result<SemanticVoxelMap, MapError> {
    decode_map(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_map() -> MapBuilder {
        MapBuilder::new(0.05, [100, 100, 20], [0.0; 3]).unwrap()
    }

    #[test]
    fn bundled_categories_are_forty_unique() {
        let t = CategoryTable::bundled();
        assert_eq!(t.len(), NUM_CATEGORIES);
        assert_eq!(t.id("sofa"), Some(CategoryId(2)));
        assert_eq!(CategoryTable::from_text(&t.to_text()).unwrap(), t);
        assert!(CategoryTable::from_text("a\nb\n").is_err());
    }

    #[test]
    fn empty_and_single_voxel_roundtrip() {
        let empty = small_map().build().unwrap();
        assert_eq!(decode_map(&encode_map(&empty)).unwrap(), empty);
        let mut b = small_map();
        b.set([0, 0, 0], Voxel { instance: Some(InstanceId(7)), category: Some(CategoryId(3)), navigable: true }).unwrap();
        let one = b.build().unwrap();
        let bytes = encode_map(&one);
        assert_eq!(bytes.len(), HEADER_LEN + RECORD_LEN);
        assert_eq!(decode_map(&bytes).unwrap(), one);
    }

    #[test]
    fn decode_rejects_corrupt_files() {
        let mut b = small_map();
        b.set([1, 2, 3], Voxel::floor()).unwrap();
        let bytes = encode_map(&b.build().unwrap());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_map(&bad), Err(MapError::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(decode_map(&bad), Err(MapError::Version(2))));
        assert!(matches!(decode_map(&bytes[..bytes.len() - 1]), Err(MapError::Truncated { .. })));
        assert!(matches!(decode_map(&bytes[..20]), Err(MapError::Truncated { .. })));
    }

    #[test]
    fn inconsistent_instance_is_rejected() {
        let mut b = small_map();
        b.set([0, 0, 1], Voxel::object(InstanceId(1), CategoryId(0))).unwrap();
        b.set([0, 0, 2], Voxel::object(InstanceId(1), CategoryId(1))).unwrap();
        assert!(matches!(b.build(), Err(MapError::InconsistentInstance { instance: 1, .. })));
    }

    #[test]
    fn world_voxel_floor_binning() {
        let m = small_map().build().unwrap();
        assert_eq!(m.world_to_voxel([0.0, 0.0, 0.0]).unwrap(), [0, 0, 0]);
        assert_eq!(m.world_to_voxel([0.049, 0.0, 0.0]).unwrap(), [0, 0, 0]);
        assert_eq!(m.world_to_voxel([0.05, 0.0, 0.0]).unwrap(), [1, 0, 0]);
        assert!(m.world_to_voxel([-0.01, 0.0, 0.0]).is_err());
        assert!(m.world_to_voxel([5.0, 0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn voxel_reconstruction_within_half_resolution(x in 0.0..4.999f64, y in 0.0..4.999f64, z in 0.0..0.999f64) {
            let m = MapBuilder::new(0.05, [100, 100, 20], [0.0; 3]).unwrap().build().unwrap();
            let c = m.voxel_to_world(m.world_to_voxel([x, y, z]).unwrap());
            for (a, p) in [x, y, z].iter().enumerate() {
                prop_assert!((c[a] - p).abs() <= 0.025 + 1e-12);
            }
        }
    }

    #[test]
    fn instance_centroids_and_filters() {
        let m = small_map().build().unwrap();
        assert!(m.instances().is_empty());
        let mut b = small_map();
        b.set([0, 0, 0], Voxel::object(InstanceId(5), CategoryId(2))).unwrap();
        b.set([1, 0, 0], Voxel::object(InstanceId(5), CategoryId(2))).unwrap();
        b.set([9, 9, 0], Voxel::object(InstanceId(2), CategoryId(4))).unwrap();
        let m = b.build().unwrap();
        let inst = m.instances();
        assert_eq!(inst.iter().map(|i| i.instance_id.0).collect::<Vec<_>>(), vec![2, 5]);
        let five = &inst[1];
        assert_eq!(five.voxel_count, 2);
        for (a, want) in [0.05, 0.025, 0.025].iter().enumerate() {
            assert!((five.centroid[a] - want).abs() < 1e-12);
        }
        assert_eq!(m.instances_of(CategoryId(2)).len(), 1);
        assert!(m.instances_of(CategoryId(30)).is_empty());
    }

    fn point_instance(id: u32, c: [f64; 3]) -> ObjectInstance {
        ObjectInstance { instance_id: InstanceId(id), category: Some(CategoryId(0)), centroid: c, voxel_count: 1 }
    }

    #[test]
    fn radius_query_closed_ball() {
        let idx = InstanceIndex::new(vec![point_instance(1, [2.0, 0.0, 0.0]), point_instance(2, [0.0, 3.0, 0.0])]);
        assert!(idx.radius_query([0.0; 3], 1.5).is_empty());
        let hits = idx.radius_query([0.0; 3], 3.0);
        assert_eq!(hits.iter().map(|i| i.instance_id.0).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn radius_query_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let instances: Vec<_> = (0..100)
            .map(|i| point_instance(i, [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(0.0..2.0)]))
            .collect();
        let idx = InstanceIndex::new(instances.clone());
        for _ in 0..200 {
            let c = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(0.0..2.0)];
            let mut want: Vec<_> = instances.iter().filter(|i| distance3(i.centroid, c) <= 3.0).cloned().collect();
            want.sort_by(|a, b| distance3(a.centroid, c).total_cmp(&distance3(b.centroid, c)).then(a.instance_id.cmp(&b.instance_id)));
            assert_eq!(idx.radius_query(c, 3.0), want);
        }
    }

    #[test]
    fn navgrid_projection() {
        let mut b = MapBuilder::new(0.05, [4, 4, 2], [0.0; 3]).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..2 {
                    b.set([x, y, z], Voxel::floor()).unwrap();
                }
            }
        }
        let g = b.build().unwrap().project_navgrid();
        assert_eq!(g.navigable_count(), 16);

        let mut b = MapBuilder::new(0.05, [4, 4, 2], [0.0; 3]).unwrap();
        b.set([1, 1, 0], Voxel::blocked()).unwrap();
        b.set([1, 1, 1], Voxel::object(InstanceId(0), CategoryId(0))).unwrap();
        b.set([2, 1, 1], Voxel::floor()).unwrap();
        let g = b.build().unwrap().project_navgrid();
        assert!(!g.is_navigable(GridCell::new(1, 1)));
        assert!(g.is_navigable(GridCell::new(2, 1)));
    }

    #[test]
    fn navgrid_projection_matches_column_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = MapBuilder::new(0.1, [12, 9, 4], [1.0, -2.0, 0.0]).unwrap();
        for _ in 0..150 {
            let idx = [rng.random_range(0..12), rng.random_range(0..9), rng.random_range(0..4)];
            b.set(idx, Voxel { instance: None, category: None, navigable: rng.random_bool(0.4) }).unwrap();
        }
        let m = b.build().unwrap();
        let g = m.project_navgrid();
        for x in 0..12 {
            for y in 0..9 {
                let want = (0..4).any(|z| m.voxel([x, y, z]).is_some_and(|v| v.navigable));
                assert_eq!(g.is_navigable(GridCell::new(x, y)), want);
            }
        }
        assert_eq!(g.cell_center(GridCell::new(0, 0)), [1.05, -1.95]);
    }
}
