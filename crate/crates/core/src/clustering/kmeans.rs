use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ClusterError;
use crate::seeding;

/// Result of Lloyd's algorithm; `assignment[i]` is the nearest centroid of point `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Euclidean distance from each point to every centroid.
    pub distances: Vec<Vec<f64>>,
    /// Within-cluster SSE after each centroid update.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterState {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == cluster)
            .collect()
    }

    /// Cluster ids for point `i` in ascending distance, ties by cluster id.
    pub fn candidates(&self, point: usize) -> Vec<usize> {
        let row = &self.distances[point];
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        order
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = squared_distance(point, &centroids[0]);
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter().map(|p| nearest(p, centroids)).collect()
}

fn mean_of(points: &[Vec<f64>], assignment: &[usize], cluster: usize, dim: usize) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for (p, _) in points.iter().zip(assignment).filter(|(_, &a)| a == cluster) {
        for (s, x) in sum.iter_mut().zip(p) {
            *s += x;
        }
        n += 1;
    }
    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
}

fn sse(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

/// Seeded farthest-point initialization: a seeded random first point, then
/// repeatedly the point with the largest squared distance to its closest
/// chosen centroid (ties to the lowest index).
pub fn farthest_point_init(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let first = seeding::rng(seed, seeding::stream::KMEANS, 0).gen_range(0..points.len());
    let mut centroids = vec![points[first].clone()];
    let mut closest: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let mut pick = 0;
        for i in 1..points.len() {
            if closest[i] > closest[pick] {
                pick = i;
            }
        }
        let chosen = points[pick].clone();
        for (d, p) in closest.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &chosen));
        }
        centroids.push(chosen);
    }
    centroids
}

/// Recomputes means; each empty cluster takes the point farthest from its
/// own centroid among clusters with at least two members.
fn update(points: &[Vec<f64>], assignment: &mut [usize], k: usize, dim: usize, previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = (0..k)
        .map(|c| mean_of(points, assignment, c, dim).unwrap_or_else(|| previous[c].clone()))
        .collect();
    let mut sizes = vec![0usize; k];
    for &a in assignment.iter() {
        sizes[a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut pick: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let donor = assignment[i];
            if sizes[donor] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[donor]);
            if pick.map_or(true, |(_, best)| d > best) {
                pick = Some((i, d));
            }
        }
        let (i, _) = pick.expect("k <= n guarantees a donor with two members");
        let donor = assignment[i];
        assignment[i] = empty;
        sizes[donor] -= 1;
        sizes[empty] = 1;
        centroids[empty] = points[i].clone();
        centroids[donor] = mean_of(points, assignment, donor, dim).expect("donor keeps a member");
    }
    centroids
}

pub(super) fn validate(points: &[Vec<f64>], k: usize) -> Result<usize, ClusterError> {
    if k == 0 {
        return Err(ClusterError::InvalidK);
    }
    if points.len() < k {
        return Err(ClusterError::TooFewPoints { k, n: points.len() });
    }
    let dim = points[0].len();
    if dim == 0 {
        return Err(ClusterError::ZeroDimension);
    }
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(ClusterError::DimensionMismatch {
            expected: dim,
            got: p.len(),
        });
    }
    Ok(dim)
}

/// Lloyd iterations with Euclidean distance until assignments stabilize or
/// `max_iterations` centroid updates have run.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iterations: usize) -> Result<ClusterState, ClusterError> {
    if max_iterations == 0 {
        return Err(ClusterError::InvalidIterations);
    }
    let dim = validate(points, k)?;
    let mut centroids = farthest_point_init(points, k, seed);
    let mut previous: Option<Vec<usize>> = None;
    let mut sse_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iterations {
        let mut assignment = assign_all(points, &centroids);
        if previous.as_ref() == Some(&assignment) {
            converged = true;
            break;
        }
        centroids = update(points, &mut assignment, k, dim, &centroids);
        sse_history.push(sse(points, &assignment, &centroids));
        previous = Some(assignment);
        iterations += 1;
    }
    if !converged && previous.as_ref() == Some(&assign_all(points, &centroids)) {
        converged = true;
    }
    let assignment = assign_all(points, &centroids);
    let distances = points
        .iter()
        .map(|p| centroids.iter().map(|c| squared_distance(p, c).sqrt()).collect())
        .collect();
    Ok(ClusterState {
        centroids,
        assignment,
        distances,
        sse_history,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(raw: &[[f64; 2]]) -> Vec<Vec<f64>> {
        raw.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn single_cluster_is_mean() {
        let points = pts(&[[0.0, 0.0], [2.0, 0.0], [1.0, 3.0]]);
        let state = kmeans(&points, 1, 7, 10).unwrap();
        assert_eq!(state.centroids[0], vec![1.0, 1.0]);
        assert!(state.assignment.iter().all(|&a| a == 0));
    }

    #[test]
    fn separates_two_blobs() {
        let points = pts(&[[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]]);
        for seed in 0..10 {
            let state = kmeans(&points, 2, seed, 50).unwrap();
            let a = &state.assignment;
            assert_eq!(a[0], a[1]);
            assert_eq!(a[2], a[3]);
            assert_ne!(a[0], a[2]);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let points: Vec<Vec<f64>> = (0..20).map(|i| vec![(i * 7 % 11) as f64, (i * 3 % 5) as f64]).collect();
        assert_eq!(kmeans(&points, 3, 4, 50).unwrap(), kmeans(&points, 3, 4, 50).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        let points = pts(&[[0.0, 0.0]]);
        assert!(matches!(kmeans(&points, 2, 0, 5), Err(ClusterError::TooFewPoints { k: 2, n: 1 })));
        assert!(matches!(kmeans(&[vec![], vec![]], 1, 0, 5), Err(ClusterError::ZeroDimension)));
        assert!(matches!(kmeans(&points, 1, 0, 0), Err(ClusterError::InvalidIterations)));
        assert!(matches!(
            kmeans(&[vec![0.0], vec![0.0, 1.0]], 1, 0, 5),
            Err(ClusterError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_points_keep_k_clusters() {
        let points = vec![vec![1.0]; 5];
        let state = kmeans(&points, 3, 0, 10).unwrap();
        assert_eq!(state.k(), 3);
        assert_eq!(state.assignment.len(), 5);
    }
}
