use canard_core::manifold::find_folds;
use canard_core::sweep::{classify_cell, planes};
use canard_core::{sweep, CellClass};

fn csv_bytes(map: &canard_core::RegionMap) -> Vec<u8> {
    let mut out = Vec::new();
    map.write_csv(&mut out).unwrap();
    out
}

#[test]
fn result_does_not_depend_on_worker_count() {
    let spec = planes::alpha_gamma(24);
    let one = csv_bytes(&sweep(&spec, 1).unwrap());
    let four = csv_bytes(&sweep(&spec, 4).unwrap());
    let all = csv_bytes(&sweep(&spec, 0).unwrap());
    assert_eq!(one, four);
    assert_eq!(one, all);
}

// Cell centres of an n-grid are the centres of every third cell of the
// 3n-grid, so refining by three compares the same parameter points.
#[test]
fn refinement_keeps_interior_classes() {
    for spec in [planes::alpha_gamma(20), planes::alpha_beta(20)] {
        let coarse = sweep(&spec, 0).unwrap();
        let mut fine_spec = spec.clone();
        fine_spec.x.n *= 3;
        fine_spec.y.n *= 3;
        let fine = sweep(&fine_spec, 0).unwrap();
        for iy in 0..spec.y.n {
            for ix in 0..spec.x.n {
                if coarse.distance_to_boundary(ix, iy) < 2 {
                    continue;
                }
                let (c, f) = (coarse.cell(ix, iy), fine.cell(3 * ix + 1, 3 * iy + 1));
                assert!((c.px - f.px).abs() < 1e-12 && (c.py - f.py).abs() < 1e-12);
                assert_eq!(f.class, c.class, "coarse ({ix}, {iy})");
            }
        }
    }
}

#[test]
fn single_cell_agrees_with_fold_search() {
    let spec = planes::alpha_gamma(12);
    for iy in 0..spec.y.n {
        for ix in 0..spec.x.n {
            let cell = classify_cell(&spec, ix, iy);
            let CellClass::Folds(n) = cell.class else { continue };
            let folds = find_folds(&spec.params_at(ix, iy).unwrap(), &spec.search).unwrap();
            assert_eq!(folds.len(), n);
            for (f, c) in folds.iter().zip(&cell.folds) {
                assert_eq!((f.x_star, f.y_star), *c);
            }
        }
    }
}

#[test]
fn marked_cells_fall_in_three_classes() {
    let base = planes::alpha_gamma(2).base;
    let count = |alpha: f64, gamma: f64| {
        let p = canard_core::DecisionParamsReduced { alpha, gamma, ..base };
        find_folds(&p, &canard_core::FoldSearch::default()).unwrap().len()
    };
    assert_eq!(count(2.5, 4.25), 0);
    assert_eq!(count(0.5, 4.25), 2);
    assert_eq!(count(1.25, 4.25), 4);
}

#[test]
fn appendix_planes_use_known_classes() {
    for (name, spec) in planes::appendix(30) {
        let map = sweep(&spec, 0).unwrap();
        for c in &map.cells {
            let ok = matches!(c.class, CellClass::Folds(0 | 2 | 4) | CellClass::Invalid | CellClass::Error);
            assert!(ok, "{name}: class {:?} at ({}, {})", c.class, c.ix, c.iy);
        }
        let errors = map.cells.iter().filter(|c| c.class == CellClass::Error).count();
        assert!(errors * 50 < map.cells.len(), "{name}: {errors} error cells");
    }
}
