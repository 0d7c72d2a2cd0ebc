//! Exact nearest neighbours in 3D, Chamfer distance and minimum matching distance.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

#[inline]
pub fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

const LEAF: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static kd-tree over a point set; immutable once built.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut pts = points.to_vec();
        let mut nodes = Vec::new();
        if !pts.is_empty() {
            let n = pts.len();
            build(&mut pts, 0, n, &mut nodes);
        }
        Self { points: pts, nodes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Smallest squared distance from `q` to the set (`inf` when empty).
    pub fn nearest_sq(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        if !self.nodes.is_empty() {
            self.search(0, q, &mut best);
        }
        best
    }

    fn search(&self, node: usize, q: &[f64; 3], best: &mut f64) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for p in &self.points[start..end] {
                    let d = sq_dist(q, p);
                    if d < *best {
                        *best = d;
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= *best {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn build(pts: &mut [[f64; 3]], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if end - start <= LEAF {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let slice = &mut pts[start..end];
    let mut axis = 0;
    let mut spread = -1.0;
    for a in 0..3 {
        let (lo, hi) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p[a]), h.max(p[a])));
        if hi - lo > spread {
            spread = hi - lo;
            axis = a;
        }
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
    let value = slice[mid][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    // left holds coordinates <= value, right holds >= value
    let left = build(pts, start, start + mid, nodes);
    let right = build(pts, start + mid, end, nodes);
    nodes[id] = Node::Split { axis, value, left, right };
    id
}

fn check_nonempty(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("chamfer distance needs two non-empty clouds".into()));
    }
    Ok(())
}

/// `½·mean_a min_b |a-b|² + ½·mean_b min_a |a-b|²`.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    check_nonempty(a, b)?;
    Ok(chamfer_trees(a, &KdTree::new(a), b, &KdTree::new(b), f64::INFINITY).expect("unbounded"))
}

fn directed_sum(from: &[[f64; 3]], to: &KdTree, stop_above: f64, n: f64) -> Option<f64> {
    let mut s = 0.0;
    for (i, p) in from.iter().enumerate() {
        s += to.nearest_sq(p);
        if i % 64 == 63 && 0.5 * (s / n) > stop_above {
            return None;
        }
    }
    Some(s)
}

/// Chamfer distance using prebuilt trees; gives up (`None`) as soon as the
/// result is certain to exceed `bound`.
pub fn chamfer_trees(a: &[[f64; 3]], ta: &KdTree, b: &[[f64; 3]], tb: &KdTree, bound: f64) -> Option<f64> {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let sa = directed_sum(a, tb, bound, na)?;
    let half_a = 0.5 * (sa / na);
    if half_a > bound {
        return None;
    }
    let sb = directed_sum(b, ta, bound - half_a, nb)?;
    let d = half_a + 0.5 * (sb / nb);
    (d <= bound).then_some(d)
}

/// Up to `k` points drawn without replacement, in their original order.
pub fn subsample<R: Rng + ?Sized>(points: &[[f64; 3]], k: usize, rng: &mut R) -> Vec<[f64; 3]> {
    if points.len() <= k {
        return points.to_vec();
    }
    let mut idx = sample(rng, points.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

fn centroid(p: &[[f64; 3]]) -> [f64; 3] {
    let n = p.len() as f64;
    let s = p.iter().fold([0.0; 3], |a, q| [a[0] + q[0], a[1] + q[1], a[2] + q[2]]);
    [s[0] / n, s[1] / n, s[2] / n]
}

/// Mean over `reference` clouds of the smallest Chamfer distance to any
/// `generated` cloud. Clouds must already be subsampled.
pub fn mmd(generated: &[Vec<[f64; 3]>], reference: &[Vec<[f64; 3]>]) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Empty("minimum matching distance needs two non-empty sets".into()));
    }
    if let Some(c) = generated.iter().chain(reference).find(|c| c.is_empty()) {
        let _ = c;
        return Err(Error::Empty("minimum matching distance got an empty cloud".into()));
    }
    let gtrees: Vec<KdTree> = generated.iter().map(|c| KdTree::new(c)).collect();
    let gcent: Vec<[f64; 3]> = generated.iter().map(|c| centroid(c)).collect();
    let mut total = 0.0;
    for r in reference {
        let tr = KdTree::new(r);
        let rc = centroid(r);
        // likely matches first so later candidates can stop early
        let mut order: Vec<usize> = (0..generated.len()).collect();
        order.sort_by(|&i, &j| sq_dist(&gcent[i], &rc).total_cmp(&sq_dist(&gcent[j], &rc)).then(i.cmp(&j)));
        let mut best = f64::INFINITY;
        for i in order {
            if let Some(d) = chamfer_trees(r, &tr, &generated[i], &gtrees[i], best) {
                if d < best {
                    best = d;
                }
            }
        }
        total += best;
    }
    Ok(total / reference.len() as f64)
}
