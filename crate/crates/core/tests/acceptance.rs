//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Criteria can be selected by number: `cargo test --test acceptance -- 3 7`.

use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ippd::config::{Agent, RunConfig};
use ippd::discriminator::{train, ModelConfig, Sample, TrainConfig, TrainEpisode};
use ippd::envgen::{generate_map, EnvSpec};
use ippd::instruction_parser::{ComponentKind, InstructionParser, LanguageAssets, SynsetId};
use ippd::metrics::{ndtw, EvalReport};
use ippd::path_encoder::{object_compass, KeypointInput, PathInput, Vocab};
use ippd::path_proposer::{astar, dbscan, step_allowed, turn_accepts, TurnDir};
use ippd::pipeline::{self, Split, Workspace};
use ippd::semantic_map::{decode_map, encode_map, GridCell, MapBuilder, NavGrid, Pose, SemanticVoxelMap, Voxel};
use ippd::{Model64, Scalar};
use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, budget: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t <= budget, || format!("took {:.1}s, budget {:.0}s", t.as_secs_f64(), budget.as_secs_f64()))
}

// 1. nDTW against a plain full-matrix dynamic program.

fn reference_ndtw(pred: &[[f64; 2]], gt: &[[f64; 2]], d_th: f64) -> f64 {
    let (n, m) = (pred.len(), gt.len());
    let mut table = vec![vec![f64::INFINITY; m + 1]; n + 1];
    table[0][0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let c = ((pred[i - 1][0] - gt[j - 1][0]).powi(2) + (pred[i - 1][1] - gt[j - 1][1]).powi(2)).sqrt();
            table[i][j] = c + table[i - 1][j].min(table[i][j - 1]).min(table[i - 1][j - 1]);
        }
    }
    (-table[n][m] / (m as f64 * d_th)).exp()
}

fn random_polyline(rng: &mut ChaCha8Rng, len: usize) -> Vec<[f64; 2]> {
    let mut p = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
    (0..len)
        .map(|_| {
            p = [p[0] + rng.random_range(-1.0..1.0), p[1] + rng.random_range(-1.0..1.0)];
            p
        })
        .collect()
}

fn c1_ndtw() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (la, lb) = (rng.random_range(2..=100), rng.random_range(2..=100));
        let a = random_polyline(&mut rng, la);
        let b = random_polyline(&mut rng, lb);
        let got = ndtw(&a, &b, 3.0).map_err(|e| e.to_string())?;
        worst = worst.max((got - reference_ndtw(&a, &b, 3.0)).abs());
    }
    ensure(worst <= 1e-9, || format!("max abs diff {worst:e}"))?;
    within(start, Duration::from_secs(10))?;
    Ok(format!("200 pairs, max abs diff {worst:.1e}, {:.2}s", start.elapsed().as_secs_f64()))
}

// 2. A* against an independent Dijkstra over the same move rule.

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

fn free(open: &[bool], w: i64, h: i64, x: i64, y: i64) -> bool {
    x >= 0 && y >= 0 && x < w && y < h && open[(y * w + x) as usize]
}

fn reference_dijkstra(open: &[bool], w: i64, h: i64, res: f64, s: (i64, i64)) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; open.len()];
    let mut heap = BinaryHeap::new();
    let si = (s.1 * w + s.0) as usize;
    dist[si] = 0.0;
    heap.push(Entry(0.0, si));
    while let Some(Entry(d, i)) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        let (x, y) = (i as i64 % w, i as i64 / w);
        for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                if (dx, dy) == (0, 0) || !free(open, w, h, x + dx, y + dy) {
                    continue;
                }
                if dx != 0 && dy != 0 && !free(open, w, h, x + dx, y) && !free(open, w, h, x, y + dy) {
                    continue;
                }
                let step = if dx != 0 && dy != 0 { res * std::f64::consts::SQRT_2 } else { res };
                let j = ((y + dy) * w + x + dx) as usize;
                if d + step < dist[j] {
                    dist[j] = d + step;
                    heap.push(Entry(d + step, j));
                }
            }
        }
    }
    dist
}

fn c2_astar() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (w, h, res) = (64i64, 64i64, 0.05);
    let mut queries = 0;
    let mut unreachable = 0;
    for _ in 0..50 {
        let open: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.7)).collect();
        let grid = NavGrid::from_fn(res, [w as u32, h as u32], [0.0, 0.0], |c| open[(c.y as i64 * w + c.x as i64) as usize]);
        let cells: Vec<usize> = (0..open.len()).filter(|&i| open[i]).collect();
        for _ in 0..4 {
            let s = cells[rng.random_range(0..cells.len())];
            let source = (s as i64 % w, s as i64 / w);
            let dist = reference_dijkstra(&open, w, h, res, source);
            for _ in 0..10 {
                let t = cells[rng.random_range(0..cells.len())];
                let sc = GridCell::new(source.0 as u32, source.1 as u32);
                let tc = GridCell::new((t as i64 % w) as u32, (t as i64 / w) as u32);
                let got = astar(&grid, sc, tc).map_err(|e| e.to_string())?;
                queries += 1;
                match got {
                    None => {
                        ensure(dist[t].is_infinite(), || format!("A* found no path but Dijkstra reached {:?} at {}", tc, dist[t]))?;
                        unreachable += 1;
                    }
                    Some(p) => {
                        ensure((p.cost - dist[t]).abs() <= 1e-9, || format!("cost {} vs {} for {:?}->{:?}", p.cost, dist[t], sc, tc))?;
                        ensure(p.cells.first() == Some(&sc) && p.cells.last() == Some(&tc), || "path endpoints".into())?;
                        let mut walked = 0.0;
                        for pair in p.cells.windows(2) {
                            let (x, y) = (pair[0].x as i64, pair[0].y as i64);
                            let (dx, dy) = (pair[1].x as i64 - x, pair[1].y as i64 - y);
                            ensure(dx.abs() <= 1 && dy.abs() <= 1 && (dx, dy) != (0, 0), || "non-adjacent step".into())?;
                            ensure(free(&open, w, h, x + dx, y + dy), || "step into an obstacle".into())?;
                            let squeezed = dx != 0 && dy != 0 && !free(&open, w, h, x + dx, y) && !free(&open, w, h, x, y + dy);
                            ensure(!squeezed, || format!("diagonal between two blocked cells at ({x},{y})"))?;
                            ensure(step_allowed(&grid, x, y, dx, dy), || "step rule disagrees".into())?;
                            walked += if dx != 0 && dy != 0 { res * std::f64::consts::SQRT_2 } else { res };
                        }
                        ensure((walked - p.cost).abs() <= 1e-9, || "reported cost differs from walked length".into())?;
                    }
                }
            }
        }
    }
    within(start, Duration::from_secs(30))?;
    Ok(format!("{queries} queries on 50 grids ({unreachable} unreachable), {:.2}s", start.elapsed().as_secs_f64()))
}

// 3. Parser against the hand-traced corpus.

fn c3_parser() -> Check {
    let parser = InstructionParser::bundled();
    let assets = parser.assets().clone();
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/parser_corpus.tsv")).map_err(|e| e.to_string())?;
    let mut n = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let (instruction, expected) = line.split_once('\t').ok_or_else(|| format!("malformed fixture line {line:?}"))?;
        let comps = parser.extract_key_components(instruction);
        let got: Vec<String> = comps
            .iter()
            .map(|c| match c.kind {
                ComponentKind::TurnLeft => "turn:left".to_string(),
                ComponentKind::TurnRight => "turn:right".to_string(),
                ComponentKind::Landmark(q) => assets.categories.label(q).to_string(),
            })
            .collect();
        let want: Vec<String> = if expected.trim() == "-" { Vec::new() } else { expected.split(',').map(|s| s.trim().to_string()).collect() };
        ensure(got == want, || format!("{instruction:?}: got {got:?}, expected {want:?}"))?;
        ensure(comps.windows(2).all(|w| w[0].token_index < w[1].token_index), || format!("{instruction:?}: token indices not increasing"))?;
        n += 1;
    }
    ensure(n >= 40, || format!("corpus has only {n} lines"))?;
    Ok(format!("{n} instructions match"))
}

// 4. Wu-Palmer values and nearest-label search.

fn reference_wup(assets: &LanguageAssets, a: SynsetId, b: SynsetId) -> Ratio<u32> {
    let chain = |mut s: SynsetId| {
        let mut out = vec![s];
        while let Some(p) = assets.taxonomy.parent(s) {
            out.push(p);
            s = p;
        }
        out
    };
    let (ca, cb) = (chain(a), chain(b));
    let lca = *ca.iter().find(|s| cb.contains(s)).expect("single root");
    let depth = |s: SynsetId| chain(s).len() as u32;
    Ratio::new(2 * depth(lca), depth(a) + depth(b))
}

fn c4_wu_palmer() -> Check {
    let assets = LanguageAssets::bundled();
    let t = &assets.taxonomy;
    let pairs: [(&str, &str, u32, u32); 22] = [
        ("chair.n.01", "chair.n.01", 1, 1),
        ("chair.n.01", "table.n.01", 5, 6),
        ("chair.n.01", "armchair.n.01", 12, 13),
        ("armchair.n.01", "recliner.n.01", 6, 7),
        ("sofa.n.01", "loveseat.n.01", 12, 13),
        ("chair.n.01", "sink.n.01", 2, 3),
        ("entity.n.01", "entity.n.01", 1, 1),
        ("entity.n.01", "chair.n.01", 2, 7),
        ("physical_entity.n.01", "abstraction.n.01", 1, 2),
        ("object.n.01", "location.n.01", 2, 3),
        ("painting.n.01", "photograph.n.01", 6, 7),
        ("picture.n.01", "picture.n.02", 1, 5),
        ("plant.n.02", "houseplant.n.01", 12, 13),
        ("plant.n.01", "plant.n.02", 6, 13),
        ("kitchen.n.01", "bedroom.n.01", 6, 7),
        ("wall.n.01", "picture.n.01", 2, 3),
        ("table.n.01", "table.n.02", 2, 11),
        ("turn.n.01", "walk.n.01", 3, 4),
        ("laptop.n.01", "television.n.01", 10, 13),
        ("pillow.n.01", "sofa.n.01", 8, 13),
        ("corner.n.01", "side.n.01", 4, 5),
        ("meter.n.01", "cupboard.n.01", 2, 11),
    ];
    for (a, b, n, d) in pairs {
        let ia = t.id(a).ok_or_else(|| format!("missing synset {a}"))?;
        let ib = t.id(b).ok_or_else(|| format!("missing synset {b}"))?;
        let got = assets.wu_palmer(ia, ib).map_err(|e| e.to_string())?.ratio();
        ensure(got == Ratio::new(n, d), || format!("wup({a}, {b}) = {got}, expected {n}/{d}"))?;
        ensure(assets.wu_palmer(ib, ia).map_err(|e| e.to_string())?.ratio() == got, || format!("wup({a}, {b}) not symmetric"))?;
    }
    let targets: Vec<_> = assets.object_synsets.iter().collect();
    let mut n = 0;
    for s in t.ids() {
        let mut best: Option<(usize, Ratio<u32>)> = None;
        for &(cat, target) in &targets {
            let r = reference_wup(&assets, s, target);
            if best.is_none_or(|(bc, br)| r > br || (r == br && cat.index() < bc)) {
                best = Some((cat.index(), r));
            }
        }
        let (bc, br) = best.expect("categories");
        let (cat, sim) = assets.nearest_label(s).map_err(|e| e.to_string())?;
        ensure(cat.index() == bc && sim.ratio() == br, || format!("nearest_label({}) = ({}, {}), expected ({bc}, {br})", t.name(s), cat.index(), sim.ratio()))?;
        n += 1;
    }
    Ok(format!("22 pairs exact, nearest_label matches brute force on {n} synsets"))
}

// 5. DBSCAN with eps 0.5 and one point per core.

fn canonical(mut groups: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    groups.iter_mut().for_each(|g| g.sort_unstable());
    groups.sort();
    groups
}

fn c5_dbscan() -> Check {
    let cases: Vec<(&str, Vec<[f64; 2]>, Vec<Vec<usize>>)> = vec![
        ("single point", vec![[1.0, 1.0]], vec![vec![0]]),
        ("pair at eps", vec![[0.0, 0.0], [0.5, 0.0]], vec![vec![0, 1]]),
        ("pair beyond eps", vec![[0.0, 0.0], [0.5000001, 0.0]], vec![vec![0], vec![1]]),
        ("chain at eps steps", vec![[0.0, 0.0], [0.5, 0.0], [1.0, 0.0], [1.5, 0.0]], vec![vec![0, 1, 2, 3]]),
        ("chain with a gap", vec![[0.0, 0.0], [0.5, 0.0], [1.0, 0.0], [1.6, 0.0], [2.1, 0.0]], vec![vec![0, 1, 2], vec![3, 4]]),
        ("two groups", vec![[0.0, 0.0], [0.2, 0.1], [5.0, 5.0], [5.1, 5.2], [4.9, 5.3]], vec![vec![0, 1], vec![2, 3, 4]]),
        ("spaced singletons", vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]], vec![vec![0], vec![1], vec![2], vec![3]]),
        ("interleaved order", vec![[0.0, 0.0], [10.0, 0.0], [0.3, 0.0], [10.3, 0.0], [0.6, 0.0]], vec![vec![0, 2, 4], vec![1, 3]]),
        ("axis chain and a far point", vec![[0.0, 0.0], [0.0, 0.5], [0.5, 0.5], [3.0, 3.0]], vec![vec![0, 1, 2], vec![3]]),
        ("duplicates", vec![[2.0, 2.0], [2.0, 2.0], [2.0, 2.0]], vec![vec![0, 1, 2]]),
        ("empty", vec![], vec![]),
    ];
    for (name, points, want) in &cases {
        let got: Vec<Vec<usize>> = dbscan(points, 0.5, 1).into_iter().map(|c| c.members).collect();
        ensure(canonical(got.clone()) == canonical(want.clone()), || format!("{name}: got {got:?}, expected {want:?}"))?;
    }
    Ok(format!("{} point sets", cases.len()))
}

// 6. Point-set encoder symmetries.

fn c6_pointset() -> Check {
    let model = Model64::new(ModelConfig::default(), Vocab::bundled()).map_err(|e| e.to_string())?;
    let (enc, params) = (model.encoder(), model.params());
    let vocab = model.vocab().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let n = rng.random_range(1..=12);
        let compass: Vec<([f64; 3], u32)> = (0..n)
            .map(|_| ([rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..2.0)], rng.random_range(0..vocab.len() as u32)))
            .collect();
        let mut shuffled = compass.clone();
        shuffled.shuffle(&mut rng);
        let a = enc.pointset_encode(params, &compass).map_err(|e| e.to_string())?;
        let b = enc.pointset_encode(params, &shuffled).map_err(|e| e.to_string())?;
        ensure(a == b, || "encoding changed under a permutation".into())?;
    }

    // Rotate a map by 90 degrees through voxel index remapping, then move its origin.
    let res = 0.1;
    let dims = [60u32, 40, 20];
    let origin = [1.3, -2.7, 0.0];
    let mut builder = MapBuilder::new(res, dims, origin).map_err(|e| e.to_string())?;
    let mut rotated = MapBuilder::new(res, [dims[1], dims[0], dims[2]], [-origin[1] - dims[1] as f64 * res + 4.2, origin[0] - 7.9, 0.0]).map_err(|e| e.to_string())?;
    let shift = [4.2, -7.9];
    let mut placed = 0;
    for inst in 0..14u32 {
        let cat = ippd::semantic_map::CategoryId(rng.random_range(0..40));
        let (x0, y0, z0) = (rng.random_range(0..dims[0] - 4), rng.random_range(0..dims[1] - 4), rng.random_range(0..dims[2] - 4));
        for dx in 0..rng.random_range(1..4) {
            for dy in 0..rng.random_range(1..4) {
                for dz in 0..rng.random_range(1..4) {
                    let (x, y, z) = (x0 + dx, y0 + dy, z0 + dz);
                    let v = Voxel::object(ippd::semantic_map::InstanceId(inst), cat);
                    builder.set([x, y, z], v).map_err(|e| e.to_string())?;
                    rotated.set([dims[1] - 1 - y, x, z], v).map_err(|e| e.to_string())?;
                    placed += 1;
                }
            }
        }
    }
    let (m0, m1) = (builder.build().map_err(|e| e.to_string())?, rotated.build().map_err(|e| e.to_string())?);
    let rot = |p: [f64; 3]| [-p[1] + shift[0], p[0] + shift[1], p[2]];
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = [origin[0] + rng.random_range(0.5..5.5), origin[1] + rng.random_range(0.5..3.5), rng.random_range(0.0..1.5)];
        let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let c0 = object_compass(&m0, &Pose::new(p, heading), 3.0);
        let c1 = object_compass(&m1, &Pose::new(rot(p), heading + std::f64::consts::FRAC_PI_2), 3.0);
        let sorted = |c: &ippd::path_encoder::ObjectCompass| {
            let mut v: Vec<_> = c.points.iter().map(|q| (q.instance.0, q.offset, vocab.category_token(q.category).unwrap())).collect();
            v.sort_by_key(|t| t.0);
            v
        };
        let (s0, s1) = (sorted(&c0), sorted(&c1));
        ensure(s0.len() == s1.len(), || format!("compass sizes {} vs {}", s0.len(), s1.len()))?;
        for (a, b) in s0.iter().zip(&s1) {
            ensure(a.0 == b.0, || "different instances in range".into())?;
            worst = worst.max((0..3).map(|k| (a.1[k] - b.1[k]).abs()).fold(0.0, f64::max));
        }
        let h0 = enc.pointset_encode(params, &s0.iter().map(|t| (t.1, t.2)).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
        let h1 = enc.pointset_encode(params, &s1.iter().map(|t| (t.1, t.2)).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
        worst = worst.max(h0.iter().zip(h1.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    ensure(worst <= 1e-9, || format!("rigid motion changed the encoding by {worst:e}"))?;
    Ok(format!("100 permutations exact; 100 rotated poses on a {placed}-voxel map within {worst:.1e}"))
}

// 7. Finite-difference check of the full loss.

fn random_input(rng: &mut ChaCha8Rng, k: usize, vocab: usize, pe: usize) -> PathInput {
    PathInput {
        keypoints: (0..k)
            .map(|_| KeypointInput {
                compass: (0..rng.random_range(0..4))
                    .map(|_| ([rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..1.0)], rng.random_range(0..vocab as u32)))
                    .collect(),
                pe: (0..pe).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect(),
    }
}

fn c7_gradients() -> Check {
    let start = Instant::now();
    let cfg = ModelConfig { d: 24, heads: 3, layers: 2, max_len: 64, dropout: 0.0, train_embeddings: true, ..Default::default() };
    let pe = cfg.encoder.pe_dim();
    let mut m = Model64::new(cfg, Vocab::bundled()).map_err(|e| e.to_string())?;
    let v = m.vocab().len();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let empty = m.encoder().empty;
    m.params_mut().get_mut(empty).mapv_inplace(|_| 0.1);
    let toks: Vec<Vec<u32>> = (0..3).map(|i| (0..6 + 2 * i).map(|_| rng.random_range(0..v as u32)).collect()).collect();
    let paths: Vec<PathInput> = (0..3).map(|i| random_input(&mut rng, 2 + i, v, pe)).collect();
    let masks = [vec![1usize, 4], vec![], vec![0, 3, 9]];
    let targets = [0.8, 0.1, 0.45];
    let samples: Vec<Sample> = (0..3).map(|i| Sample { tokens: &toks[i], path: &paths[i], masked: &masks[i] }).collect();
    let mut g = m.params().zeros_like();
    m.loss(&samples, &targets, None, Some(&mut g)).map_err(|e| e.to_string())?;
    let ids: Vec<_> = m.params().ids().collect();
    let (mut worst, mut checked) = (0.0f64, 0);
    for id in ids {
        let n = m.params().get(id).len();
        let mut idx: Vec<usize> = (0..n).collect();
        // Prefer entries that receive gradient: rows of unused tokens are all zero.
        idx.sort_by_key(|&k| g.get(id).as_slice().unwrap()[k] == 0.0);
        let mut nonzero = 0;
        for &k in idx.iter().take(16) {
            let ana = g.get(id).as_slice().unwrap()[k];
            let orig = m.params().get(id).as_slice().unwrap()[k];
            let h = 1e-5;
            m.params_mut().get_mut(id).as_slice_mut().unwrap()[k] = orig + h;
            let up = m.loss(&samples, &targets, None, None).map_err(|e| e.to_string())?.total;
            m.params_mut().get_mut(id).as_slice_mut().unwrap()[k] = orig - h;
            let dn = m.loss(&samples, &targets, None, None).map_err(|e| e.to_string())?.total;
            m.params_mut().get_mut(id).as_slice_mut().unwrap()[k] = orig;
            let num = (up - dn) / (2.0 * h);
            let err = if (num - ana).abs() < 1e-9 { 0.0 } else { (num - ana).abs() / num.abs().max(ana.abs()) };
            ensure(err < 1e-4, || format!("{}[{k}]: numeric {num:e} vs analytic {ana:e}", m.params().name(id)))?;
            worst = worst.max(err);
            checked += 1;
            nonzero += usize::from(ana != 0.0);
        }
        ensure(nonzero > 0, || format!("{} received no gradient", m.params().name(id)))?;
    }
    within(start, Duration::from_secs(120))?;
    Ok(format!("{} tensors, {checked} entries, max rel err {worst:.1e}, {:.1}s", m.params().len(), start.elapsed().as_secs_f64()))
}

// 8. Memorizing a small training set.

fn overfit_set(cfg: &RunConfig) -> Result<Vec<TrainEpisode>, String> {
    let spec = cfg.gen.env_spec(pipeline::derive_seed(8, &[]));
    let map = generate_map(&spec).map_err(|e| e.to_string())?;
    let mut maps = BTreeMap::new();
    maps.insert("overfit".to_string(), map);
    let ws = Workspace::new(cfg, maps).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for i in 0..200u64 {
        let Ok(e) = ippd::envgen::generate_episode(&ws.maps["overfit"], "overfit", pipeline::derive_seed(80, &[i])) else { continue };
        let mut t = ws.training_episode(&e).map_err(|e| e.to_string())?;
        if t.candidates.len() < 20 {
            continue;
        }
        t.candidates.truncate(20);
        out.push(t);
        if out.len() == 8 {
            return Ok(out);
        }
    }
    Err(format!("only {} episodes with 20 candidates", out.len()))
}

fn c8_overfit() -> Check {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.model.dropout = 0.0;
    let data = overfit_set(&cfg)?;
    let tc = TrainConfig { epochs: 20, candidates_per_episode: 20, ..overfit_train_config() };
    let mut model = ippd::Model::new(cfg.model.clone(), Vocab::bundled()).map_err(|e| e.to_string())?;
    train(&mut model, &data, &tc, None).map_err(|e| e.to_string())?;
    let (mut se, mut n, mut hits) = (0.0, 0.0, 0);
    for e in &data {
        let paths: Vec<PathInput> = e.candidates.iter().map(|c| c.path.clone()).collect();
        let r = model.rank(&e.tokens, &paths).map_err(|e| e.to_string())?;
        for (c, s) in e.candidates.iter().zip(&r.scores) {
            se += (s.as_f64() - c.target).powi(2);
            n += 1.0;
        }
        let top = e.candidates.iter().map(|c| c.target).fold(f64::NEG_INFINITY, f64::max);
        hits += usize::from(e.candidates[r.best].target == top);
    }
    let mse = se / n;
    let acc = hits as f64 / data.len() as f64;
    let summary = format!("ranking accuracy {acc:.3}, mse {mse:.2e}, {:.0}s", start.elapsed().as_secs_f64());
    ensure(acc == 1.0 && mse < 1e-3, || summary.clone())?;
    within(start, Duration::from_secs(600))?;
    Ok(summary)
}

fn overfit_train_config() -> TrainConfig {
    TrainConfig { batch_size: 4, ..TrainConfig::default() }
}

// 9. Full default suite: proposal plus discrimination against both baselines.

fn c9_suite() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::default();
    cfg.paths.root = dir.path().to_path_buf();
    cfg.run.workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    pipeline::cmd_gen(&cfg).map_err(|e| e.to_string())?;
    pipeline::cmd_train(&cfg).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for split in [Split::EvalSeen, Split::EvalUnseen] {
        let mut r: HashMap<Agent, EvalReport> = HashMap::new();
        for agent in Agent::ALL {
            r.insert(agent, pipeline::cmd_run(&cfg, split, agent).map_err(|e| e.to_string())?);
        }
        let get = |a: Agent| (r[&a].aggregate.sr, r[&a].aggregate.ndtw);
        let (ip, un, rd) = (get(Agent::Ippd), get(Agent::ProposalOnlyUniform), get(Agent::RandomPath));
        lines.push(format!(
            "{}: SR {:.2}/{:.2}/{:.2} nDTW {:.3}/{:.3}/{:.3}",
            split.name(),
            ip.0,
            un.0,
            rd.0,
            ip.1,
            un.1,
            rd.1
        ));
        if !(ip.0 > un.0 && un.0 > rd.0) {
            failures.push(format!("{} SR order", split.name()));
        }
        if !(ip.1 > un.1 && un.1 > rd.1) {
            failures.push(format!("{} nDTW order", split.name()));
        }
        if ip.0 - un.0 < 0.15 {
            failures.push(format!("{} SR gain over uniform {:.2} < 0.15", split.name(), ip.0 - un.0));
        }
        if rd.1 >= 0.15 {
            failures.push(format!("{} random nDTW {:.3} >= 0.15", split.name(), rd.1));
        }
    }
    if start.elapsed() > Duration::from_secs(3600) {
        failures.push(format!("took {:.0}s", start.elapsed().as_secs_f64()));
    }
    let summary = format!("ippd/uniform/random {}; {:.0}s", lines.join("; "), start.elapsed().as_secs_f64());
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}: {summary}", failures.join(", ")))
    }
}

// 10. Candidate paths honour component order, the segment bound, the turn rule and the cap.

fn heading_at(waypoints: &[[f64; 2]], i: usize, start: f64) -> f64 {
    if i == 0 {
        start
    } else {
        let (a, b) = (waypoints[i - 1], waypoints[i]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }
}

fn c10_candidates() -> Check {
    let mut cfg = RunConfig::default();
    cfg.gen.train_maps = 4;
    let parser = InstructionParser::bundled();
    let mut checked = 0;
    let mut turns = 0;
    let mut capped = 0;
    'maps: for m in 0..4u64 {
        let map = generate_map(&cfg.gen.env_spec(pipeline::derive_seed(10, &[m]))).map_err(|e| e.to_string())?;
        let mut maps = BTreeMap::new();
        maps.insert("m".to_string(), map);
        let ws = Workspace::new(&cfg, maps).map_err(|e| e.to_string())?;
        for i in 0..60u64 {
            let Ok(e) = ippd::envgen::generate_episode(&ws.maps["m"], "m", pipeline::derive_seed(100 + m, &[i])) else { continue };
            let comps = parser.extract_key_components(&e.instruction);
            let ctx = ws.context(&e);
            for cap in [ctx.limits.max_candidates, 3] {
                let mut limited = ctx.clone();
                limited.limits.max_candidates = cap;
                let cands = ippd::path_proposer::propose(&limited, &comps, &e.start_pose).map_err(|e| e.to_string())?;
                ensure(cands.len() <= cap, || format!("{}: {} candidates over cap {cap}", e.id, cands.len()))?;
                if cap == 3 {
                    capped += 1;
                    continue;
                }
                let landmarks: Vec<usize> = comps.iter().enumerate().filter(|(_, c)| c.landmark().is_some()).map(|(i, _)| i).collect();
                for c in &cands {
                    let v = &c.visited_landmarks;
                    ensure(v.iter().map(|l| l.component).collect::<Vec<_>>() == landmarks, || format!("{}: landmarks out of component order", e.id))?;
                    let mut prev = 0usize;
                    for (j, l) in v.iter().enumerate() {
                        ensure(j == 0 || l.waypoint_index > prev || (l.waypoint_index == prev && l.segment_length == 0.0), || format!("{}: waypoint order", e.id))?;
                        ensure(comps[l.component].landmark() == Some(l.category), || format!("{}: category mismatch", e.id))?;
                        ensure(c.waypoints[l.waypoint_index] == ctx.grid.cell_center(l.cell), || format!("{}: landmark cell not on path", e.id))?;
                        let walked: f64 = c.waypoints[prev..=l.waypoint_index].windows(2).map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt()).sum();
                        ensure((walked - l.segment_length).abs() < 1e-9, || format!("{}: segment length {} vs walked {walked}", e.id, l.segment_length))?;
                        ensure(l.segment_length <= ctx.limits.segment_bound + 1e-9, || format!("{}: segment {} over bound", e.id, l.segment_length))?;
                        let since = if j == 0 { 0 } else { v[j - 1].component + 1 };
                        let pending = comps[since..l.component].iter().rev().find_map(|k| match k.kind {
                            ComponentKind::TurnLeft => Some(TurnDir::Left),
                            ComponentKind::TurnRight => Some(TurnDir::Right),
                            ComponentKind::Landmark(_) => None,
                        });
                        match (pending, l.turn) {
                            (None, None) => {}
                            (Some(dir), Some(t)) => {
                                let position = c.waypoints[prev];
                                let heading = heading_at(&c.waypoints, prev, e.start_pose.heading);
                                ensure(t.dir == dir && t.position == position, || format!("{}: turn context", e.id))?;
                                ensure((t.heading - heading).abs() < 1e-12, || format!("{}: heading {} vs {heading}", e.id, t.heading))?;
                                ensure(turn_accepts(position, heading, l.core, dir, &ctx.limits), || format!("{}: landmark outside the turn sector", e.id))?;
                                turns += 1;
                            }
                            _ => return Err(format!("{}: turn check {:?} for pending {:?}", e.id, l.turn, pending)),
                        }
                        prev = l.waypoint_index;
                    }
                    checked += 1;
                    if checked >= 1000 {
                        break 'maps;
                    }
                }
            }
        }
    }
    ensure(checked >= 1000, || format!("only {checked} candidates generated"))?;
    Ok(format!("{checked} candidates ({turns} turn-constrained landmarks), cap respected on {capped} episodes"))
}

// 11. Map serialization and run reproducibility.

fn tiny_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.paths.root = root.to_path_buf();
    cfg.gen.train_maps = 2;
    cfg.gen.seen_maps = 1;
    cfg.gen.unseen_maps = 1;
    cfg.gen.train_episodes = 6;
    cfg.gen.seen_episodes = 4;
    cfg.gen.unseen_episodes = 4;
    cfg.model = ModelConfig { d: 24, heads: 3, layers: 1, ..Default::default() };
    cfg.train.epochs = 1;
    cfg.train.candidates_per_episode = 3;
    cfg.run.deterministic = true;
    cfg
}

fn c11_reproducibility() -> Check {
    for seed in 0..20u64 {
        let map: SemanticVoxelMap = generate_map(&EnvSpec::with_random_pool(seed, 6)).map_err(|e| e.to_string())?;
        let bytes = encode_map(&map);
        let back = decode_map(&bytes).map_err(|e| e.to_string())?;
        ensure(encode_map(&back) == bytes, || format!("seed {seed}: re-encoding differs"))?;
        let voxels = |m: &SemanticVoxelMap| m.voxels().map(|(k, v)| (*k, *v)).collect::<Vec<_>>();
        ensure(voxels(&back) == voxels(&map) && back.dims() == map.dims() && back.origin() == map.origin(), || format!("seed {seed}: decoded map differs"))?;
    }
    let mut reports = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = tiny_config(dir.path());
        pipeline::cmd_gen(&cfg).map_err(|e| e.to_string())?;
        pipeline::cmd_train(&cfg).map_err(|e| e.to_string())?;
        let mut files = Vec::new();
        for agent in Agent::ALL {
            pipeline::cmd_run(&cfg, Split::EvalSeen, agent).map_err(|e| e.to_string())?;
            let stem = pipeline::report_stem(Split::EvalSeen, agent);
            for ext in ["json", "csv"] {
                let p = cfg.paths.output_dir().join(format!("{stem}.{ext}"));
                files.push(std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()))?);
            }
        }
        reports.push(files);
    }
    ensure(reports[0] == reports[1], || "reports differ between identical deterministic runs".into())?;
    Ok("20 map round-trips; two deterministic runs give byte-identical reports".into())
}

type Criterion = (u32, &'static str, fn() -> Check);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        (1, "nDTW matches a full-matrix dynamic program", c1_ndtw),
        (2, "A* matches Dijkstra without corner squeezing", c2_astar),
        (3, "parser reproduces the hand-traced corpus", c3_parser),
        (4, "Wu-Palmer values and nearest-label search are exact", c4_wu_palmer),
        (5, "DBSCAN clusters the reference point sets", c5_dbscan),
        (6, "point-set encoding is permutation and rigid-motion invariant", c6_pointset),
        (7, "analytic gradients match finite differences", c7_gradients),
        (8, "discriminator memorizes a small training set", c8_overfit),
        (9, "discrimination beats both baselines on the default suite", c9_suite),
        (10, "candidate paths satisfy order, bound, turn and cap rules", c10_candidates),
        (11, "maps round-trip and deterministic runs reproduce", c11_reproducibility),
    ];
    let only: HashSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
