//! Keypoint features for candidate paths: an egocentric object compass summarized
//! by a point-set network, and a frequency-encoded pose.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instruction_parser::{tokenize, LanguageAssets};
use crate::nn::{Linear, ParamId, Params};
use crate::semantic_map::{wrap_angle, CategoryId, InstanceId, Pose, SemanticVoxelMap};
use crate::Scalar;

pub const EMBED_DIM: usize = 50;
pub const UNK: &str = "[UNK]";

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("pose ({0:.3}, {1:.3}, {2:.3}) lies outside the map bounds")]
    OutOfBounds(f64, f64, f64),
    #[error("path has no waypoints")]
    EmptyPath,
    #[error("category {0:?} has no vocabulary entry")]
    UnknownCategory(CategoryId),
    #[error("non-finite encoder parameters")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Arc-length spacing of keypoints in meters.
    pub spacing: f64,
    pub max_keypoints: usize,
    pub compass_radius: f64,
    pub l_pos: usize,
    pub l_theta: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { spacing: 1.0, max_keypoints: 64, compass_radius: 3.0, l_pos: 6, l_theta: 4 }
    }
}

impl EncoderConfig {
    /// Width of `[PE(x), PE(y), PE(z), PE(theta)]`.
    pub fn pe_dim(&self) -> usize {
        3 * 2 * self.l_pos + 2 * self.l_theta
    }
}

/// Token vocabulary: `[UNK]` followed by the lexicon words in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
    categories: Vec<u32>,
}

impl Vocab {
    pub fn from_assets(assets: &LanguageAssets) -> Self {
        let mut words = vec![UNK.to_string()];
        words.extend(assets.lexicon.words().iter().cloned());
        let index: HashMap<String, u32> = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let categories = assets
            .categories
            .ids()
            .map(|c| index.get(assets.category_word(c)).copied().unwrap_or(0))
            .collect();
        Self { words, index, categories }
    }

    pub fn bundled() -> Arc<Self> {
        static VOCAB: std::sync::OnceLock<Arc<Vocab>> = std::sync::OnceLock::new();
        VOCAB.get_or_init(|| Arc::new(Self::from_assets(&LanguageAssets::bundled()))).clone()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    /// Unknown words map to `[UNK]` (id 0).
    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Token whose embedding stands for a category in the compass.
    pub fn category_token(&self, c: CategoryId) -> Result<u32, EncoderError> {
        match self.categories.get(c.index()) {
            Some(&t) if t != 0 => Ok(t),
            _ => Err(EncoderError::UnknownCategory(c)),
        }
    }
}

/// Deterministic unit-norm rows, one per vocabulary entry.
pub fn embedding_table<T: Scalar>(vocab_len: usize, seed: u64) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Array2::<f64>::zeros((vocab_len, EMBED_DIM));
    for mut row in t.rows_mut() {
        row.mapv_inplace(|_| StandardNormal.sample(&mut rng));
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    t.mapv(T::of)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub position: [f64; 2],
    pub heading: f64,
}

impl Keypoint {
    pub fn pose(&self) -> Pose {
        Pose::new([self.position[0], self.position[1], 0.0], self.heading)
    }
}

/// Resamples a polyline at `spacing` meters of arc length, keeping both ends, then
/// subsamples uniformly down to `cap` keypoints. Headings point to the next
/// keypoint; the last one repeats its predecessor.
pub fn discretize(waypoints: &[[f64; 2]], spacing: f64, cap: usize) -> Result<Vec<Keypoint>, EncoderError> {
    let first = *waypoints.first().ok_or(EncoderError::EmptyPath)?;
    let mut cum = vec![0.0];
    for w in waypoints.windows(2) {
        cum.push(cum.last().unwrap() + ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt());
    }
    let total = *cum.last().unwrap();
    let mut points = vec![first];
    let mut seg = 0;
    let mut k = 1;
    while (k as f64) * spacing < total - 1e-9 {
        let s = k as f64 * spacing;
        while cum[seg + 1] < s {
            seg += 1;
        }
        let span = cum[seg + 1] - cum[seg];
        let t = if span > 0.0 { (s - cum[seg]) / span } else { 0.0 };
        let (a, b) = (waypoints[seg], waypoints[seg + 1]);
        points.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        k += 1;
    }
    points.push(*waypoints.last().unwrap());
    if points.len() > cap {
        let n = points.len();
        points = (0..cap).map(|i| points[(i * (n - 1) + (cap - 1) / 2) / (cap - 1)]).collect();
    }
    let mut out: Vec<Keypoint> = Vec::with_capacity(points.len());
    for i in 0..points.len() {
        let prev = out.last().map_or(0.0, |k| k.heading);
        let heading = match points.get(i + 1) {
            Some(n) if *n != points[i] => (n[1] - points[i][1]).atan2(n[0] - points[i][0]),
            _ => prev,
        };
        out.push(Keypoint { position: points[i], heading });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompassPoint {
    /// Egocentric offset: x ahead, y to the left, z up.
    pub offset: [f64; 3],
    pub category: CategoryId,
    pub instance: InstanceId,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjectCompass {
    pub points: Vec<CompassPoint>,
}

/// Labeled instances whose centroid lies within `radius` of the pose, in the
/// agent frame (translate, then rotate by `-heading`).
pub fn object_compass(map: &SemanticVoxelMap, pose: &Pose, radius: f64) -> ObjectCompass {
    let (sn, cs) = pose.heading.sin_cos();
    let points = map
        .radius_query(pose.position, radius)
        .into_iter()
        .filter_map(|inst| {
            let c = inst.category?;
            let d = [inst.centroid[0] - pose.position[0], inst.centroid[1] - pose.position[1], inst.centroid[2] - pose.position[2]];
            Some(CompassPoint { offset: [cs * d[0] + sn * d[1], -sn * d[0] + cs * d[1], d[2]], category: c, instance: inst.instance_id })
        })
        .collect();
    ObjectCompass { points }
}

/// Affine map of world positions onto `[-1, 1]^3` by the map bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseNormalizer {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl PoseNormalizer {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Self {
        Self { lo, hi }
    }

    pub fn for_map(map: &SemanticVoxelMap) -> Self {
        let (lo, hi) = map.bounds();
        Self { lo, hi }
    }

    /// Derivative of each normalized position axis with respect to its world coordinate.
    pub fn scale(&self) -> [f64; 3] {
        std::array::from_fn(|a| if self.hi[a] > self.lo[a] { 2.0 / (self.hi[a] - self.lo[a]) } else { 0.0 })
    }

    /// `(x, y, z)` in `[-1, 1]` and heading divided by pi in `(-1, 1]`.
    pub fn normalize(&self, pose: &Pose) -> Result<[f64; 4], EncoderError> {
        let p = pose.position;
        let tol = 1e-9;
        if (0..3).any(|a| !(p[a] >= self.lo[a] - tol && p[a] <= self.hi[a] + tol)) {
            return Err(EncoderError::OutOfBounds(p[0], p[1], p[2]));
        }
        let k = self.scale();
        let v: [f64; 3] = std::array::from_fn(|a| ((p[a] - self.lo[a]) * k[a] - 1.0).clamp(-1.0, 1.0));
        Ok([v[0], v[1], v[2], wrap_angle(pose.heading) / std::f64::consts::PI])
    }
}

/// `(sin(2^l pi v), cos(2^l pi v))` for `l = 0..levels`.
pub fn positional_encoding(v: f64, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * levels);
    for l in 0..levels {
        let (sn, cs) = ((1u64 << l) as f64 * std::f64::consts::PI * v).sin_cos();
        out.push(sn);
        out.push(cs);
    }
    out
}

fn positional_encoding_grad(v: f64, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * levels);
    for l in 0..levels {
        let f = (1u64 << l) as f64 * std::f64::consts::PI;
        let (sn, cs) = (f * v).sin_cos();
        out.push(f * cs);
        out.push(-f * sn);
    }
    out
}

/// Concatenated encoding of a normalized pose.
pub fn pose_features(normalized: [f64; 4], cfg: &EncoderConfig) -> Vec<f64> {
    let mut pe = Vec::with_capacity(cfg.pe_dim());
    for &v in &normalized[..3] {
        pe.extend(positional_encoding(v, cfg.l_pos));
    }
    pe.extend(positional_encoding(normalized[3], cfg.l_theta));
    pe
}

/// Network input for one keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointInput {
    /// Egocentric offsets paired with the category token.
    pub compass: Vec<([f64; 3], u32)>,
    pub pe: Vec<f64>,
}

/// Network input for one candidate path, in path order.
#[derive(Debug, Clone, PartialEq)]
pub struct PathInput {
    pub keypoints: Vec<KeypointInput>,
}

impl PathInput {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// Geometry stage of the encoder: keypoints, compasses and pose encodings.
pub fn prepare_path(
    map: &SemanticVoxelMap,
    vocab: &Vocab,
    waypoints: &[[f64; 2]],
    cfg: &EncoderConfig,
) -> Result<PathInput, EncoderError> {
    let norm = PoseNormalizer::for_map(map);
    let keypoints = discretize(waypoints, cfg.spacing, cfg.max_keypoints)?
        .into_iter()
        .map(|k| {
            let pose = k.pose();
            let compass = object_compass(map, &pose, cfg.compass_radius)
                .points
                .into_iter()
                .map(|p| Ok((p.offset, vocab.category_token(p.category)?)))
                .collect::<Result<Vec<_>, EncoderError>>()?;
            Ok(KeypointInput { compass, pe: pose_features(norm.normalize(&pose)?, cfg) })
        })
        .collect::<Result<Vec<_>, EncoderError>>()?;
    Ok(PathInput { keypoints })
}

/// Per-keypoint `(h, s)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PathFeatureSequence<T> {
    pub h: Array2<T>,
    pub s: Array2<T>,
}

impl<T> PathFeatureSequence<T> {
    pub fn len(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.nrows() == 0
    }
}

pub const POINTNET_HIDDEN: usize = 64;

/// Learned half of the encoder. Tensors live in the caller's parameter store.
#[derive(Debug, Clone, Copy)]
pub struct PathEncoder {
    pub words: ParamId,
    pub point1: Linear,
    pub point2: Linear,
    pub point_out: Linear,
    pub empty: ParamId,
    pub pose: Linear,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    x: Array2<T>,
    tokens: Vec<u32>,
    a1: Array2<T>,
    a2: Array2<T>,
    pooled: Array2<T>,
    /// Source row in `a2` per pooled entry; `None` for empty compasses.
    argmax: Vec<Option<Vec<usize>>>,
    pe: Array2<T>,
}

impl PathEncoder {
    /// Registers the encoder tensors; `words` must already hold the embedding table.
    pub fn new<T: Scalar>(p: &mut Params<T>, words: ParamId, d: usize, pe_dim: usize, rng: &mut impl Rng) -> Self {
        let he = |i: usize| (2.0 / i as f64).sqrt();
        let xavier = |i: usize, o: usize| (2.0 / (i + o) as f64).sqrt();
        let point1 = Linear::new(p, "encoder.point1", 3 + EMBED_DIM, POINTNET_HIDDEN, he(3 + EMBED_DIM), rng);
        let point2 = Linear::new(p, "encoder.point2", POINTNET_HIDDEN, d, he(POINTNET_HIDDEN), rng);
        let point_out = Linear::new(p, "encoder.point_out", d, d, xavier(d, d), rng);
        let empty = p.zeros("encoder.empty", 1, d);
        let pose = Linear::new(p, "encoder.pose", pe_dim, d, xavier(pe_dim, d), rng);
        Self { words, point1, point2, point_out, empty, pose }
    }

    fn point_rows<T: Scalar>(&self, p: &Params<T>, points: &[([f64; 3], u32)], x: &mut Array2<T>, tokens: &mut Vec<u32>) {
        let table = p.get(self.words);
        for (i, (off, tok)) in points.iter().enumerate() {
            let mut row = x.row_mut(tokens.len() + i);
            for a in 0..3 {
                row[a] = T::of(off[a]);
            }
            row.slice_mut(s![3..]).assign(&table.row(*tok as usize));
        }
        tokens.extend(points.iter().map(|(_, t)| *t));
    }

    /// Batched forward over all keypoints of `paths`, rows in path order.
    pub fn forward<T: Scalar>(&self, p: &Params<T>, paths: &[&PathInput]) -> (PathFeatureSequence<T>, EncoderCache<T>) {
        let kps: Vec<&KeypointInput> = paths.iter().flat_map(|q| q.keypoints.iter()).collect();
        let n_points: usize = kps.iter().map(|k| k.compass.len()).sum();
        let mut x = Array2::zeros((n_points, 3 + EMBED_DIM));
        let mut tokens = Vec::with_capacity(n_points);
        for k in &kps {
            self.point_rows(p, &k.compass, &mut x, &mut tokens);
        }
        let relu = |v: T| v.max(T::zero());
        let a1 = self.point1.forward(p, x.view()).mapv(relu);
        let a2 = self.point2.forward(p, a1.view()).mapv(relu);
        let d = a2.ncols();
        let mut pooled = Array2::zeros((kps.len(), d));
        let mut argmax = Vec::with_capacity(kps.len());
        let mut start = 0;
        for (i, k) in kps.iter().enumerate() {
            let n = k.compass.len();
            if n == 0 {
                pooled.row_mut(i).assign(&p.get(self.empty).row(0));
                argmax.push(None);
                continue;
            }
            let mut idx = vec![start; d];
            for r in start + 1..start + n {
                for c in 0..d {
                    if a2[[r, c]] > a2[[idx[c], c]] {
                        idx[c] = r;
                    }
                }
            }
            for c in 0..d {
                pooled[[i, c]] = a2[[idx[c], c]];
            }
            argmax.push(Some(idx));
            start += n;
        }
        let h = self.point_out.forward(p, pooled.view());
        let pe = Array2::from_shape_fn((kps.len(), kps.first().map_or(0, |k| k.pe.len())), |(i, j)| T::of(kps[i].pe[j]));
        let s = self.pose.forward(p, pe.view());
        (PathFeatureSequence { h, s }, EncoderCache { x, tokens, a1, a2, pooled, argmax, pe })
    }

    pub fn backward<T: Scalar>(&self, p: &Params<T>, g: &mut Params<T>, cache: &EncoderCache<T>, dh: &Array2<T>, ds: &Array2<T>) {
        self.pose.backward_params(g, cache.pe.view(), ds.view());
        let dpooled = self.point_out.backward(p, g, cache.pooled.view(), dh.view());
        let mut da2 = Array2::zeros(cache.a2.raw_dim());
        let mut dempty = Array1::<T>::zeros(dpooled.ncols());
        for (i, am) in cache.argmax.iter().enumerate() {
            match am {
                None => dempty += &dpooled.row(i),
                Some(idx) => {
                    for (c, &r) in idx.iter().enumerate() {
                        da2[[r, c]] += dpooled[[i, c]];
                    }
                }
            }
        }
        {
            let mut ge = g.get_mut(self.empty).row_mut(0);
            ge += &dempty;
        }
        if cache.x.nrows() == 0 {
            return;
        }
        let gate = |d: &mut Array2<T>, a: &Array2<T>| ndarray::Zip::from(d).and(a).for_each(|d, &a| if a <= T::zero() { *d = T::zero() });
        gate(&mut da2, &cache.a2);
        let mut da1 = self.point2.backward(p, g, cache.a1.view(), da2.view());
        gate(&mut da1, &cache.a1);
        if p.is_trainable(self.words) {
            let dx = self.point1.backward(p, g, cache.x.view(), da1.view());
            let gw = g.get_mut(self.words);
            for (r, &tok) in cache.tokens.iter().enumerate() {
                let mut row = gw.row_mut(tok as usize);
                row += &dx.slice(s![r, 3..]);
            }
        } else {
            self.point1.backward_params(g, cache.x.view(), da1.view());
        }
    }

    /// `h` for one compass.
    pub fn pointset_encode<T: Scalar>(&self, p: &Params<T>, compass: &[([f64; 3], u32)]) -> Result<Array1<T>, EncoderError> {
        let path = PathInput { keypoints: vec![KeypointInput { compass: compass.to_vec(), pe: vec![0.0; p.get(self.pose.w).nrows()] }] };
        let (f, _) = self.forward_checked(p, &path)?;
        Ok(f.h.row(0).to_owned())
    }

    /// `s` for one pose.
    pub fn pose_encode<T: Scalar>(
        &self,
        p: &Params<T>,
        norm: &PoseNormalizer,
        pose: &Pose,
        cfg: &EncoderConfig,
    ) -> Result<Array1<T>, EncoderError> {
        let pe = pose_features(norm.normalize(pose)?, cfg);
        let x = Array2::from_shape_fn((1, pe.len()), |(_, j)| T::of(pe[j]));
        Ok(self.pose.forward(p, x.view()).row(0).to_owned())
    }

    /// Analytic `ds / d(x, y, z, heading)` as a `d x 4` matrix.
    pub fn pose_jacobian<T: Scalar>(
        &self,
        p: &Params<T>,
        norm: &PoseNormalizer,
        pose: &Pose,
        cfg: &EncoderConfig,
    ) -> Result<Array2<T>, EncoderError> {
        let v = norm.normalize(pose)?;
        let k = norm.scale();
        let w = p.get(self.pose.w);
        let mut jac = Array2::zeros((w.ncols(), 4));
        let mut row = 0;
        for axis in 0..4 {
            let (levels, dv) = if axis < 3 { (cfg.l_pos, k[axis]) } else { (cfg.l_theta, 1.0 / std::f64::consts::PI) };
            for (j, g) in positional_encoding_grad(v[axis], levels).into_iter().enumerate() {
                let coeff = T::of(g * dv);
                let mut col = jac.column_mut(axis);
                col.scaled_add(coeff, &w.row(row + j));
            }
            row += 2 * levels;
        }
        Ok(jac)
    }

    /// `(h, s)` per keypoint of one prepared path.
    pub fn encode_path<T: Scalar>(&self, p: &Params<T>, path: &PathInput) -> Result<PathFeatureSequence<T>, EncoderError> {
        Ok(self.forward_checked(p, path)?.0)
    }

    fn forward_checked<T: Scalar>(&self, p: &Params<T>, path: &PathInput) -> Result<(PathFeatureSequence<T>, EncoderCache<T>), EncoderError> {
        let ids = [self.words, self.point1.w, self.point1.b, self.point2.w, self.point2.b, self.point_out.w, self.point_out.b, self.empty, self.pose.w, self.pose.b];
        if ids.iter().any(|&id| p.get(id).iter().any(|v| !v.is_finite())) {
            return Err(EncoderError::NonFinite);
        }
        Ok(self.forward(p, &[path]))
    }
}
