use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{dot, Matrix};

/// Cluster centroids in greedy nearest-neighbour tour order.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    vectors: Matrix,
    /// unit-length copies of `vectors`, used for cosine assignment
    unit: Matrix,
    epoch: u64,
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn unit_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Invalid(format!("centroid {i} has zero or non-finite norm")));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Orders centroids as a greedy tour: start at the first raw centroid, then
/// repeatedly step to the unused centroid with the highest cosine similarity to
/// the previous pick (lowest raw index on ties).
pub fn order_centroids_greedy(raw: &Matrix) -> Result<Matrix> {
    let p = raw.rows();
    if p == 0 {
        return Err(Error::Invalid("no centroids to order".into()));
    }
    let unit = unit_rows(raw)?;
    let mut used = vec![false; p];
    let mut order = Vec::with_capacity(p);
    let mut cur = 0;
    used[0] = true;
    order.push(0);
    for _ in 1..p {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..p).filter(|&j| !used[j]) {
            let c = dot(unit.row(cur), unit.row(j));
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((j, c));
            }
        }
        let (next, _) = best.expect("an unused centroid remains");
        used[next] = true;
        order.push(next);
        cur = next;
    }
    Ok(raw.gather_rows(&order))
}

impl Centroids {
    /// Wraps centroids that are already in tour order.
    pub fn from_ordered(vectors: Matrix, epoch: u64) -> Result<Self> {
        let unit = unit_rows(&vectors)?;
        Ok(Self { vectors, unit, epoch })
    }

    /// Orders raw k-means output into a tour.
    pub fn from_raw(raw: &Matrix, epoch: u64) -> Result<Self> {
        Self::from_ordered(order_centroids_greedy(raw)?, epoch)
    }

    /// Initial centroids before any data is seen: `p` seeded random unit vectors, toured.
    pub fn random(p: usize, width: usize, seed: u64) -> Result<Self> {
        if p == 0 || width == 0 {
            return Err(Error::Invalid("need at least one centroid of positive width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = unit_rows(&Matrix::random_normal(p, width, 1.0, &mut rng))?;
        Self::from_raw(&raw, 0)
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.vectors.cols()
    }

    /// Number of refreshes since initialisation.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Cosine similarity between consecutive centroids of the tour.
    pub fn tour_cosines(&self) -> Vec<f64> {
        (1..self.len()).map(|i| dot(self.unit.row(i - 1), self.unit.row(i))).collect()
    }

    /// Cosine similarity of every row against every centroid.
    pub fn cosine(&self, row: &[f64]) -> Vec<f64> {
        let n = norm(row);
        (0..self.len())
            .map(|c| if n == 0.0 { 0.0 } else { dot(row, self.unit.row(c)) / n })
            .collect()
    }
}

/// Index of the centroid with the highest cosine similarity for each row.
/// Ties go to the lowest index; zero rows go to centroid 0.
pub fn assign_clusters(rows: &Matrix, centroids: &Centroids) -> Result<Vec<usize>> {
    if rows.cols() != centroids.width() {
        return Err(Error::shape(
            "assign_clusters",
            format!("rows of width {}, centroids of width {}", rows.cols(), centroids.width()),
        ));
    }
    Ok((0..rows.rows())
        .map(|i| {
            let r = rows.row(i);
            // the row norm is a common positive factor, so raw dots rank the same as cosines
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..centroids.len() {
                let s = dot(r, centroids.unit.row(c));
                if s > best.1 {
                    best = (c, s);
                }
            }
            best.0
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_order_example() {
        let raw = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.9, 0.1]]);
        let ordered = order_centroids_greedy(&raw).unwrap();
        assert_eq!(ordered, Matrix::from_rows(&[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]]));
    }

    #[test]
    fn single_centroid_is_identity() {
        let raw = Matrix::from_rows(&[[0.3, -2.0]]);
        assert_eq!(order_centroids_greedy(&raw).unwrap(), raw);
    }

    #[test]
    fn orthogonal_set_keeps_index_order() {
        let raw = Matrix::from_rows(&[[0.0, 0.0, 2.0], [1.0, 0.0, 0.0], [0.0, 3.0, 0.0]]);
        assert_eq!(order_centroids_greedy(&raw).unwrap(), raw);
    }

    #[test]
    fn zero_norm_rejected() {
        let raw = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        assert!(order_centroids_greedy(&raw).is_err());
    }

    #[test]
    fn assignment_examples() {
        let c = Centroids::from_ordered(Matrix::from_rows(&[[2.0, 0.0], [0.0, 5.0]]), 0).unwrap();
        let rows = Matrix::from_rows(&[[1.0, 0.0], [7.0, 0.0], [0.0, 0.0], [-1.0, 0.2]]);
        assert_eq!(assign_clusters(&rows, &c).unwrap(), vec![0, 0, 0, 1]);

        let c = Centroids::from_ordered(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]), 0).unwrap();
        assert_eq!(assign_clusters(&Matrix::from_rows(&[[1.0, 1.0]]), &c).unwrap(), vec![0]);
    }

    #[test]
    fn random_init_is_seeded_and_unit() {
        let a = Centroids::random(6, 5, 9).unwrap();
        let b = Centroids::random(6, 5, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.epoch(), 0);
        for i in 0..6 {
            assert!((norm(a.vectors().row(i)) - 1.0).abs() < 1e-12);
        }
        assert_ne!(a, Centroids::random(6, 5, 10).unwrap());
    }
}
