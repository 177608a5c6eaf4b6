//! k-means trajectory anchors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PolicyError, Trajectory};
use crate::geometry::Vec2;

const MAX_ITERS: usize = 200;
const MAX_RESTARTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: Vec<Trajectory>,
    /// Largest member-to-centroid distance of each cluster (flattened L2).
    pub max_intra: Vec<f64>,
    pub dataset_hash: String,
    pub seed: u64,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.anchors.first().map_or(0, |a| a.len())
    }

    /// Nearest anchor index and its flattened distance; ties go low.
    pub fn nearest(&self, traj: &[Vec2]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, a) in self.anchors.iter().enumerate() {
            let d = flat_dist2(a, traj);
            if d < best.1 {
                best = (i, d);
            }
        }
        (best.0, best.1.sqrt())
    }
}

fn flat_dist2(a: &[Vec2], b: &[Vec2]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (*p - *q).dot(*p - *q)).sum()
}

pub fn dataset_hash(trajs: &[Trajectory]) -> String {
    let mut h = Sha256::new();
    for t in trajs {
        h.update((t.len() as u64).to_le_bytes());
        for p in t {
            h.update(p.x.to_le_bytes());
            h.update(p.y.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn nearest_center(p: &[Vec2], centers: &[Trajectory]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = flat_dist2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init(trajs: &[Trajectory], m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Trajectory>, PolicyError> {
    let mut centers = vec![trajs[rng.gen_range(0..trajs.len())].clone()];
    let mut d2: Vec<f64> = trajs.iter().map(|t| flat_dist2(t, &centers[0])).collect();
    while centers.len() < m {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            return Err(PolicyError::Clustering(format!(
                "only {} distinct trajectories for {m} anchors",
                centers.len()
            )));
        }
        let mut r = rng.gen_range(0.0..total);
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("positive total");
        for (i, &d) in d2.iter().enumerate() {
            if r < d {
                pick = i;
                break;
            }
            r -= d;
        }
        centers.push(trajs[pick].clone());
        for (i, t) in trajs.iter().enumerate() {
            d2[i] = d2[i].min(flat_dist2(t, centers.last().unwrap()));
        }
    }
    Ok(centers)
}

/// Lloyd iterations from k-means++ seeding. Empty clusters trigger a reseeded
/// restart, up to a fixed bound.
pub fn cluster_anchors(trajs: &[Trajectory], m: usize, seed: u64) -> Result<AnchorSet, PolicyError> {
    if m == 0 || trajs.len() < m {
        return Err(PolicyError::Clustering(format!("{} trajectories for {m} anchors", trajs.len())));
    }
    let h = trajs[0].len();
    if h == 0 || trajs.iter().any(|t| t.len() != h) {
        return Err(PolicyError::Shape("trajectories must share a non-zero horizon".into()));
    }
    if trajs.iter().flatten().any(|p| !p.is_finite()) {
        return Err(PolicyError::NonFinite("anchor dataset".into()));
    }
    for restart in 0..MAX_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64 * 0x9E37_79B9));
        let mut centers = plus_plus_init(trajs, m, &mut rng)?;
        let mut assign = vec![usize::MAX; trajs.len()];
        let mut empty = false;
        for _ in 0..MAX_ITERS {
            let mut changed = false;
            for (i, t) in trajs.iter().enumerate() {
                let (c, _) = nearest_center(t, &centers);
                if assign[i] != c {
                    assign[i] = c;
                    changed = true;
                }
            }
            // Running means keep identical members exactly representable.
            let mut sums = vec![vec![Vec2::default(); h]; m];
            let mut counts = vec![0usize; m];
            for (i, t) in trajs.iter().enumerate() {
                let c = assign[i];
                counts[c] += 1;
                let n = counts[c] as f64;
                for (s, p) in sums[c].iter_mut().zip(t) {
                    *s = *s + (*p - *s) * (1.0 / n);
                }
            }
            if counts.contains(&0) {
                empty = true;
                break;
            }
            centers = sums;
            if !changed {
                break;
            }
        }
        if empty {
            log::debug!("anchor clustering restart {restart}: empty cluster");
            continue;
        }
        let mut max_intra = vec![0.0f64; m];
        for (i, t) in trajs.iter().enumerate() {
            let c = assign[i];
            max_intra[c] = max_intra[c].max(flat_dist2(t, &centers[c]).sqrt());
        }
        for a in 0..m {
            for b in a + 1..m {
                if centers[a] == centers[b] {
                    return Err(PolicyError::Clustering(format!("anchors {a} and {b} coincide")));
                }
            }
        }
        return Ok(AnchorSet { anchors: centers, max_intra, dataset_hash: dataset_hash(trajs), seed });
    }
    Err(PolicyError::Clustering(format!("empty clusters after {MAX_RESTARTS} restarts")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand_distr::{Distribution, Normal};

    fn line(dx: f64, dy: f64) -> Trajectory {
        (1..=8).map(|i| Vec2::new(dx * i as f64, dy * i as f64)).collect()
    }

    #[test]
    fn two_point_fixed_point_is_exact() {
        let a = line(0.5, 0.0);
        let b = line(0.4, 0.13);
        let data: Vec<Trajectory> = std::iter::repeat_n(a.clone(), 50).chain(std::iter::repeat_n(b.clone(), 50)).collect();
        let set = cluster_anchors(&data, 2, 7).unwrap();
        assert!(set.anchors.contains(&a) && set.anchors.contains(&b));
        assert_eq!(set.max_intra, vec![0.0, 0.0]);
    }

    #[test]
    fn single_anchor_is_mean() {
        let data = vec![line(0.5, 0.0), line(0.5, 0.2), line(0.3, -0.2)];
        let set = cluster_anchors(&data, 1, 0).unwrap();
        for k in 0..8 {
            let mean = (data[0][k] + data[1][k] + data[2][k]) * (1.0 / 3.0);
            assert!((set.anchors[0][k] - mean).norm() < 1e-12);
        }
    }

    #[test]
    fn degenerate_dataset_is_rejected() {
        let data = vec![line(0.5, 0.0); 10];
        assert!(matches!(cluster_anchors(&data, 2, 0), Err(PolicyError::Clustering(_))));
        assert!(cluster_anchors(&data[..1], 2, 0).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 0.3).unwrap();
        let data: Vec<Trajectory> = (0..200).map(|_| line(0.5 + n.sample(&mut rng) * 0.1, n.sample(&mut rng) * 0.2)).collect();
        assert_eq!(cluster_anchors(&data, 5, 3).unwrap(), cluster_anchors(&data, 5, 3).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn every_member_is_covered(seed in 0u64..1000, m in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<Trajectory> = (0..60).map(|_| line(rng.gen_range(0.0..0.6), rng.gen_range(-0.3..0.3))).collect();
            let set = cluster_anchors(&data, m, seed).unwrap();
            for t in &data {
                let (i, d) = set.nearest(t);
                prop_assert!(d <= set.max_intra[i] + 1e-9);
            }
        }
    }
}
