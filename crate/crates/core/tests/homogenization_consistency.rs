//! Frame and resolution consistency of the FFT homogenization.

use spinodoid::geometry::generate_seeded;
use spinodoid::homogenization::{effective_elasticity, reuss_bound, voigt_bound};
use spinodoid::{GeometryConfig, Materials, SolverConfig, StructureParams, VoxelGrid};

fn spinodoid_grid(resolution: usize) -> VoxelGrid {
    let s = StructureParams::new([30.0, 50.0, 0.0], 0.6).unwrap();
    let cfg = GeometryConfig { resolution, n_waves: 1000, ..Default::default() };
    generate_seeded(&s, &cfg, 12).unwrap()
}

/// Each voxel split into `f³` identical voxels.
fn refine(grid: &VoxelGrid, f: usize) -> VoxelGrid {
    VoxelGrid::from_fn(grid.nx * f, |i, j, k| grid.get(i / f, j / f, k / f)).unwrap()
}

#[test]
fn permuted_grid_gives_permuted_tensor() {
    let grid = spinodoid_grid(12);
    let m = Materials::default();
    let cfg = SolverConfig::default();
    let c = effective_elasticity(&grid, &m, &cfg).unwrap().tensor;
    for perm in [[1, 0, 2], [2, 0, 1], [1, 2, 0]] {
        let cp = effective_elasticity(&grid.permute_axes(perm), &m, &cfg).unwrap().tensor;
        let expected = c.permuted(perm);
        let err = (cp.mandel() - expected.mandel()).norm() / c.norm();
        assert!(err < 1e-5, "perm {perm:?}: relative error {err}");
    }
}

#[test]
fn refinement_converges_and_respects_bounds() {
    let m = Materials::default();
    let cfg = SolverConfig::default();
    let coarse = spinodoid_grid(8);
    let tensors: Vec<_> =
        [1, 2, 4].iter().map(|&f| effective_elasticity(&refine(&coarse, f), &m, &cfg).unwrap().tensor).collect();
    let d1 = (tensors[1].mandel() - tensors[0].mandel()).norm() / tensors[2].norm();
    let d2 = (tensors[2].mandel() - tensors[1].mandel()).norm() / tensors[2].norm();
    assert!(d2 < d1, "successive differences {d1} then {d2}");

    let f = coarse.solid_fraction();
    let upper = voigt_bound(&m, f);
    let lower = reuss_bound(&m, f).unwrap();
    for c in &tensors {
        let above = (upper - c.mandel()).symmetric_eigenvalues().min();
        let below = (c.mandel() - lower).symmetric_eigenvalues().min();
        assert!(above > -1e-9 && below > -1e-9, "bounds violated: {above} {below}");
    }
}
