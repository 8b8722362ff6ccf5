use crate::attention::TokenGroup;
use crate::error::{Error, Result};
use crate::nn::Matrix;

/// How flattened rows were sorted by cluster id and cut into chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterRoute {
    assignment: Vec<usize>,
    order: Vec<usize>,
    inverse: Vec<usize>,
    /// group `k` is `order[bounds[k]..bounds[k + 1]]`
    bounds: Vec<usize>,
}

impl ClusterRoute {
    /// Stable argsort of `assignment`; equal ids keep their original row order.
    /// Sorted rows are cut into chunks of `chunk` rows, the last one ragged.
    pub fn new(assignment: Vec<usize>, chunk: usize) -> Result<Self> {
        if chunk == 0 {
            return Err(Error::Invalid("chunk size must be positive".into()));
        }
        let t = assignment.len();
        let mut bounds: Vec<usize> = (0..t).step_by(chunk).collect();
        bounds.push(t);
        Ok(Self::with_bounds(assignment, bounds))
    }

    /// One group per distinct id, in ascending id order.
    pub fn by_id(assignment: Vec<usize>) -> Self {
        let mut route = Self::with_bounds(assignment, Vec::new());
        let mut bounds = vec![0];
        for i in 1..route.order.len() {
            if route.assignment[route.order[i]] != route.assignment[route.order[i - 1]] {
                bounds.push(i);
            }
        }
        bounds.push(route.order.len());
        if route.order.is_empty() {
            bounds.truncate(1);
        }
        route.bounds = bounds;
        route
    }

    fn with_bounds(assignment: Vec<usize>, bounds: Vec<usize>) -> Self {
        let mut order: Vec<usize> = (0..assignment.len()).collect();
        order.sort_by_key(|&i| assignment[i]);
        let mut inverse = vec![0; order.len()];
        for (sorted, &orig) in order.iter().enumerate() {
            inverse[orig] = sorted;
        }
        Self { assignment, order, inverse, bounds }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// `order[i]` is the original row placed at sorted slot `i`.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// `inverse[row]` is the sorted slot of original row `row`.
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn chunk_count(&self) -> usize {
        self.bounds.len().saturating_sub(1)
    }

    /// Original row indices of chunk `k`; for uniform chunking `order[m·k .. min(m·(k+1), T)]`.
    pub fn group(&self, k: usize) -> &[usize] {
        &self.order[self.bounds[k]..self.bounds[k + 1]]
    }

    pub fn groups(&self) -> impl Iterator<Item = &[usize]> {
        (0..self.chunk_count()).map(|k| self.group(k))
    }
}

/// Sorts rows by cluster id and cuts them into chunks of `m` rows (last chunk ragged).
pub fn sort_and_chunk(flat: &TokenGroup, assignment: Vec<usize>, m: usize) -> Result<(Vec<TokenGroup>, ClusterRoute)> {
    if assignment.len() != flat.len() {
        return Err(Error::shape(
            "sort_and_chunk",
            format!("{} ids for {} rows", assignment.len(), flat.len()),
        ));
    }
    let route = ClusterRoute::new(assignment, m)?;
    Ok((gather_groups(flat, &route), route))
}

/// The token group of every chunk of `route`.
pub fn gather_groups(flat: &TokenGroup, route: &ClusterRoute) -> Vec<TokenGroup> {
    route.groups().map(|idx| gather_group(flat, idx)).collect()
}

fn gather_group(flat: &TokenGroup, idx: &[usize]) -> TokenGroup {
    TokenGroup {
        states: flat.states.gather_rows(idx),
        positions: idx.iter().map(|&i| flat.positions[i]).collect(),
    }
}

/// Concatenates chunk outputs and restores the pre-sort row order.
pub fn scatter_back(outputs: &[Matrix], route: &ClusterRoute) -> Result<Matrix> {
    if outputs.len() != route.chunk_count() {
        return Err(Error::shape(
            "scatter_back",
            format!("{} outputs for {} chunks", outputs.len(), route.chunk_count()),
        ));
    }
    let d = outputs.first().map_or(0, |o| o.cols());
    let mut out = Matrix::zeros(route.len(), d);
    for (k, o) in outputs.iter().enumerate() {
        let idx = route.group(k);
        if o.rows() != idx.len() || o.cols() != d {
            return Err(Error::shape(
                "scatter_back",
                format!("chunk {k} output {:?}, expected ({}, {d})", o.shape(), idx.len()),
            ));
        }
        for (r, &dst) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(o.row(r));
        }
    }
    Ok(out)
}
