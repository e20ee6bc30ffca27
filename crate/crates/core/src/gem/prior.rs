use crate::atlas::{interpolate_vertex_table, AtlasMesh, Rasterization, BACKGROUND_LABEL};
use crate::error::{Error, Result};
use crate::likelihood::ClassSharingMap;

/// Per-vertex class probabilities (labels summed into their shared classes).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior {
    table: Vec<f64>,
    n_classes: usize,
    outside: Vec<f64>,
}

impl ClassPrior {
    /// `label_table` is `J x K` row-major with `K = sharing.n_labels()`.
    pub fn new(label_table: &[f64], sharing: &ClassSharingMap) -> Result<Self> {
        let k = sharing.n_labels();
        let g = sharing.n_classes();
        if k == 0 || label_table.len() % k != 0 {
            return Err(Error::InvalidInput("label table does not match the sharing map".into()));
        }
        let j = label_table.len() / k;
        let mut table = vec![0.0; j * g];
        for v in 0..j {
            for (l, &c) in sharing.label_to_class.iter().enumerate() {
                table[v * g + c] += label_table[v * k + l];
            }
        }
        let mut outside = vec![0.0; g];
        outside[sharing.label_to_class[BACKGROUND_LABEL]] = 1.0;
        Ok(Self { table, n_classes: g, outside })
    }

    pub fn from_mesh(mesh: &AtlasMesh, sharing: &ClassSharingMap) -> Result<Self> {
        if sharing.n_labels() != mesh.n_labels() {
            return Err(Error::InvalidInput(format!(
                "sharing map covers {} labels, atlas has {}",
                sharing.n_labels(),
                mesh.n_labels()
            )));
        }
        Self::new(mesh.alpha(), sharing)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub(crate) fn outside(&self) -> &[f64] {
        &self.outside
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Row-major `I x G` class prior at the voxels of `rast`.
    pub fn interpolate(&self, rast: &Rasterization) -> Vec<f64> {
        interpolate_vertex_table(&self.table, self.n_classes, rast, &self.outside)
    }
}
