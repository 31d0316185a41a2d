use std::collections::VecDeque;

/// One DBSCAN cluster as indices into the input points.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Ascending.
    pub members: Vec<usize>,
    /// Ascending subset of `members`.
    pub cores: Vec<usize>,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// DBSCAN over planar points. Neighborhoods are closed balls that include the
/// point itself; clusters are numbered in order of their first core point.
/// Noise points become singleton clusters appended after the dense ones.
pub fn dbscan(points: &[[f64; 2]], eps: f64, min_pts: usize) -> Vec<Cluster> {
    let n = points.len();
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| dist2(points[i], points[j]) <= eps2).collect()).collect();
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts.max(1)).collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut clusters: Vec<Cluster> = Vec::new();
    for seed in 0..n {
        if label[seed].is_some() || !is_core[seed] {
            continue;
        }
        let id = clusters.len();
        let mut members = Vec::new();
        let mut queue = VecDeque::from([seed]);
        label[seed] = Some(id);
        while let Some(p) = queue.pop_front() {
            members.push(p);
            if !is_core[p] {
                continue;
            }
            for &q in &neighbors[p] {
                if label[q].is_none() {
                    label[q] = Some(id);
                    queue.push_back(q);
                }
            }
        }
        members.sort_unstable();
        let cores = members.iter().copied().filter(|&m| is_core[m]).collect();
        clusters.push(Cluster { members, cores });
    }
    for (i, l) in label.iter().enumerate() {
        if l.is_none() {
            clusters.push(Cluster { members: vec![i], cores: Vec::new() });
        }
    }
    clusters
}

/// Core point nearest the member mean (ties to the lower index); noise
/// singletons use their only point.
pub fn representative(points: &[[f64; 2]], cluster: &Cluster) -> usize {
    let n = cluster.members.len() as f64;
    let mean = cluster.members.iter().fold([0.0, 0.0], |acc, &m| [acc[0] + points[m][0] / n, acc[1] + points[m][1] / n]);
    let pool = if cluster.cores.is_empty() { &cluster.members } else { &cluster.cores };
    let mut best = pool[0];
    for &c in &pool[1..] {
        if dist2(points[c], mean) < dist2(points[best], mean) {
            best = c;
        }
    }
    best
}
