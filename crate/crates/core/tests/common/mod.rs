#![allow(dead_code)]

use lesionseg::atlas::{build_atlas, AtlasMesh};
use lesionseg::likelihood::ClassSharingMap;
use lesionseg::phantom::{training_set, PhantomSpec};

/// Atlas built from `n` phantoms drawn from `template` with seeds far from the test subjects.
pub fn phantom_atlas(template: &PhantomSpec, n: usize, res: [usize; 3]) -> AtlasMesh {
    let set = training_set(template, n, 10_000).unwrap();
    let labels: Vec<_> = set.iter().map(|p| p.labels.clone()).collect();
    let masks: Vec<_> = set.iter().map(|p| p.lesions.clone()).collect();
    build_atlas(&labels, &masks, res).unwrap()
}

/// Background, CSF, GM, WM with one Gaussian each.
pub fn brain_sharing() -> ClassSharingMap {
    ClassSharingMap::identity(4).with_tissues(3, 2)
}
