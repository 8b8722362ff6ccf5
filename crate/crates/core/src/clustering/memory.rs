use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Bounded FIFO of recent hidden-state rows. Rows are detached copies.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    width: usize,
    capacity: usize,
    buf: VecDeque<f64>,
}

impl MemoryBank {
    pub fn new(width: usize, capacity: usize) -> Self {
        Self { width, capacity, buf: VecDeque::new() }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buf.len() / self.width.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// Appends rows in order, then evicts the oldest rows until `len <= capacity`.
    pub fn push(&mut self, rows: &Matrix) -> Result<()> {
        if rows.rows() == 0 {
            return Ok(());
        }
        if rows.cols() != self.width {
            return Err(Error::shape(
                "memory_push",
                format!("row width {} for a bank of width {}", rows.cols(), self.width),
            ));
        }
        // Only the newest `capacity` rows of this batch can survive.
        let skip = rows.rows().saturating_sub(self.capacity);
        self.buf.extend(&rows.data()[skip * self.width..]);
        let excess = self.len().saturating_sub(self.capacity);
        if excess > 0 {
            self.buf.drain(..excess * self.width);
        }
        Ok(())
    }

    /// Bank contents, oldest row first.
    pub fn to_matrix(&self) -> Matrix {
        let data: Vec<f64> = self.buf.iter().copied().collect();
        Matrix::from_vec(self.len(), self.width, data).expect("bank holds whole rows")
    }

    pub(crate) fn restore(width: usize, capacity: usize, rows: &Matrix) -> Result<Self> {
        let mut bank = Self::new(width, capacity);
        bank.push(rows)?;
        Ok(bank)
    }
}
