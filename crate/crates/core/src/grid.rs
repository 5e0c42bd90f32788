//! Dense 3D grids in row-major `(x, y, z)` order.

use crate::geometry::{flat_index, unflatten};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

pub type OccupancyGrid = Grid3<bool>;
pub type ProbGrid = Grid3<f64>;

impl<T: Clone> Grid3<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Grid3 { dims, data: vec![value; dims.iter().product()] }
    }
}

impl<T> Grid3<T> {
    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(data.len(), dims.iter().product::<usize>(), "grid data does not match dims {dims:?}");
        Grid3 { dims, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, idx: [usize; 3]) -> usize {
        flat_index(self.dims, idx)
    }

    pub fn coords(&self, flat: usize) -> [usize; 3] {
        unflatten(self.dims, flat)
    }

    pub fn get(&self, idx: [usize; 3]) -> &T {
        &self.data[self.index(idx)]
    }

    pub fn set(&mut self, idx: [usize; 3], value: T) {
        let i = self.index(idx);
        self.data[i] = value;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid3<U> {
        Grid3 { dims: self.dims, data: self.data.iter().map(f).collect() }
    }
}

impl OccupancyGrid {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Flat indices of occupied cells in ascending order.
    pub fn occupied(&self) -> Vec<usize> {
        self.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    /// Logical OR over non-overlapping 2x2x2 blocks.
    pub fn or_pool(&self) -> OccupancyGrid {
        assert!(self.dims.iter().all(|d| d % 2 == 0), "or_pool needs even dims, got {:?}", self.dims);
        let dims = self.dims.map(|d| d / 2);
        let mut out = Grid3::filled(dims, false);
        for (f, &b) in self.data.iter().enumerate() {
            if b {
                let [x, y, z] = self.coords(f);
                out.set([x / 2, y / 2, z / 2], true);
            }
        }
        out
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| b as u8 as f64).collect()
    }
}

/// Builds the coarser levels of a pyramid from its finest level by repeated
/// OR-pooling; the result is ordered coarsest first.
pub fn or_pyramid(finest: OccupancyGrid, levels: usize) -> Vec<OccupancyGrid> {
    let mut out = vec![finest];
    while out.len() < levels {
        let next = out.last().unwrap().or_pool();
        out.push(next);
    }
    out.reverse();
    out
}
