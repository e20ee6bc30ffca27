use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::volume::VolumeGrid;

pub const DEFAULT_BIAS_ORDER: [usize; 3] = [3, 3, 3];

/// Separable DCT-II basis evaluated on every voxel, row-major `I x P`.
/// Column `p = px + ox * (py + oy * pz)`; column 0 is the constant function.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasBasis {
    order: [usize; 3],
    n_voxels: usize,
    values: Vec<f64>,
    matrix: DMatrix<f64>,
}

impl BiasBasis {
    pub fn order(&self) -> [usize; 3] {
        self.order
    }

    pub fn n_basis(&self) -> usize {
        self.order.iter().product()
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_basis();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn column(&self, p: usize) -> Vec<f64> {
        let np = self.n_basis();
        self.values.iter().skip(p).step_by(np).copied().collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The basis as an `I x P` matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Bias field `A C^T`, row-major `I x N`.
    pub fn field(&self, bias_coeffs: &DMatrix<f64>) -> Vec<f64> {
        let f = &self.matrix * bias_coeffs.transpose();
        let (rows, cols) = f.shape();
        let mut out = vec![0.0; rows * cols];
        for c in 0..cols {
            for r in 0..rows {
                out[r * cols + c] = f[(r, c)];
            }
        }
        out
    }
}

fn dct_axis(n: usize, order: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * order];
    for x in 0..n {
        for k in 0..order {
            out[x * order + k] = (PI * k as f64 * (2 * x + 1) as f64 / (2 * n) as f64).cos();
        }
    }
    out
}

pub fn eval_bias_basis(grid: &VolumeGrid, order: [usize; 3]) -> Result<BiasBasis> {
    let dims = grid.dims();
    for a in 0..3 {
        if order[a] == 0 {
            return Err(Error::InvalidInput("bias basis order must be >= 1 per axis".into()));
        }
        if order[a] > dims[a] {
            return Err(Error::InvalidInput(format!(
                "bias basis order {} exceeds grid size {} on axis {a}",
                order[a], dims[a]
            )));
        }
    }
    let ax: Vec<Vec<f64>> = (0..3).map(|a| dct_axis(dims[a], order[a])).collect();
    let p = order[0] * order[1] * order[2];
    let mut values = Vec::with_capacity(grid.n_voxels() * p);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                for kz in 0..order[2] {
                    let bz = ax[2][z * order[2] + kz];
                    for ky in 0..order[1] {
                        let byz = bz * ax[1][y * order[1] + ky];
                        for kx in 0..order[0] {
                            values.push(byz * ax[0][x * order[0] + kx]);
                        }
                    }
                }
            }
        }
    }
    let matrix = DMatrix::from_row_slice(grid.n_voxels(), p, &values);
    Ok(BiasBasis { order, n_voxels: grid.n_voxels(), values, matrix })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_order_is_constant() {
        let g = VolumeGrid::new([3, 4, 2], [1.0; 3]).unwrap();
        let b = eval_bias_basis(&g, [1, 1, 1]).unwrap();
        assert_eq!(b.n_basis(), 1);
        assert!(b.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn second_cosine_on_four_voxels() {
        let g = VolumeGrid::new([4, 1, 1], [1.0; 3]).unwrap();
        let b = eval_bias_basis(&g, [2, 1, 1]).unwrap();
        let col = b.column(1);
        for (x, v) in col.iter().enumerate() {
            let expect = (PI * (2.0 * x as f64 + 1.0) / 8.0).cos();
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_column_norm_is_voxel_count() {
        let g = VolumeGrid::new([5, 6, 7], [1.0; 3]).unwrap();
        let b = eval_bias_basis(&g, [3, 3, 3]).unwrap();
        let c0 = b.column(0);
        assert_eq!(c0.iter().map(|v| v * v).sum::<f64>(), g.n_voxels() as f64);
        // DCT columns are mutually orthogonal on the grid
        let c5 = b.column(5);
        let c13 = b.column(13);
        assert!(c5.iter().zip(&c13).map(|(a, b)| a * b).sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn order_beyond_grid_rejected() {
        let g = VolumeGrid::new([2, 4, 4], [1.0; 3]).unwrap();
        assert!(eval_bias_basis(&g, [3, 1, 1]).is_err());
    }
}
