use lesionseg::metrics::{dice, precision_recall, volumes};
use lesionseg::volume::{LabelMap, LesionMask, VolumeGrid};
use proptest::prelude::*;

fn grid(n: usize) -> VolumeGrid {
    VolumeGrid::new([n, 1, 1], [1.0, 1.5, 2.0]).unwrap()
}

proptest! {
    #[test]
    fn dice_is_symmetric(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..64)) {
        let g = grid(bits.len());
        let x = LesionMask::new(g.clone(), bits.iter().map(|b| b.0).collect()).unwrap();
        let y = LesionMask::new(g, bits.iter().map(|b| b.1).collect()).unwrap();
        let d = dice(&x, &y).unwrap();
        prop_assert_eq!(d, dice(&y, &x).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn precision_is_swapped_recall(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..64)) {
        let g = grid(bits.len());
        let x = LesionMask::new(g.clone(), bits.iter().map(|b| b.0).collect()).unwrap();
        let y = LesionMask::new(g, bits.iter().map(|b| b.1).collect()).unwrap();
        let (p, _) = precision_recall(&x, &y).unwrap();
        let (_, r) = precision_recall(&y, &x).unwrap();
        prop_assert_eq!(p, r);
    }

    #[test]
    fn volumes_match_recount(labels in prop::collection::vec(1u16..6, 1..80)) {
        let map = LabelMap::new(grid(labels.len()), labels.clone()).unwrap();
        let v = volumes(&map);
        for l in 1u16..6 {
            let n = labels.iter().filter(|&&x| x == l).count();
            let got = v.get(&l).copied().unwrap_or(0.0);
            prop_assert!((got - n as f64 * 3.0).abs() < 1e-12);
        }
    }
}
