//! Invariants checked on randomly generated inputs.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use proptest::prelude::*;
use tracefem::assembly::*;
use tracefem::fe::{FeSpace, TetGeometry};
use tracefem::estimator::mark_dorfler;
use tracefem::levelset::{extract_cut_topology, interpolate_levelset, triangles_inside_parents};
use tracefem::mesh::{bisect_refine, build_box_mesh, face_adjacency, BoxDomain, Vec3};
use tracefem::norms::eoc;
use tracefem::sparse::TripletBuilder;
use tracefem::study::{parse_config, StudyConfig, StudyKind};
use tracefem::surface::AnalyticSurface;

fn sphere_disc(m: usize) -> &'static Discretization {
    static DISCS: [OnceLock<Discretization>; 2] = [OnceLock::new(), OnceLock::new()];
    DISCS[m - 1].get_or_init(|| {
        let mesh = Arc::new(build_box_mesh(BoxDomain::cube(-4.0 / 3.0, 4.0 / 3.0), 4).unwrap());
        Discretization::new(&AnalyticSurface::sphere(1.0), mesh, m, m).unwrap()
    })
}

fn barycentric() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(0.01f64..1.0).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.map(|x| x / s)
    })
}

fn tetrahedron() -> impl Strategy<Value = [Vec3; 4]> {
    prop::array::uniform12(-0.2f64..0.2).prop_map(|d| {
        let base = [Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()];
        std::array::from_fn(|i| base[i] + Vec3::new(d[3 * i], d[3 * i + 1], d[3 * i + 2]))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basis_is_a_partition_of_unity(m in 1usize..=2, lambda in barycentric(), v in tetrahedron()) {
        let mesh = Arc::new(build_box_mesh(BoxDomain::cube(0.0, 1.0), 1).unwrap());
        let space = FeSpace::new(mesh, m).unwrap();
        let geo = TetGeometry::from_vertices(v).unwrap();
        let b = space.eval_basis(&geo, &lambda);
        let sum: f64 = b.values[..b.n].iter().sum();
        let grad: Vec3 = b.grads[..b.n].iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(grad.norm() < 1e-10);
    }

    #[test]
    fn dorfler_marks_a_minimal_bulk(eta in prop::collection::vec(0.0f64..10.0, 1..60), theta in 0.05f64..=1.0) {
        let marked = mark_dorfler(&eta, theta).unwrap();
        prop_assert!(marked.windows(2).all(|w| w[0] < w[1]));
        let total: f64 = eta.iter().map(|e| e * e).sum();
        let got: f64 = marked.iter().map(|&i| eta[i] * eta[i]).sum();
        prop_assert!(got >= theta * theta * total * (1.0 - 1e-12));
        if total > 0.0 {
            // Dropping the smallest marked indicator falls short of the bulk.
            let smallest = marked.iter().map(|&i| eta[i]).fold(f64::INFINITY, f64::min);
            prop_assert!(got - smallest * smallest < theta * theta * total);
            // Every unmarked indicator is at most the smallest marked one.
            for (i, e) in eta.iter().enumerate() {
                if !marked.contains(&i) {
                    prop_assert!(*e <= smallest);
                }
            }
        }
    }

    #[test]
    fn eoc_recovers_power_laws(c in 0.01f64..100.0, p in 0.5f64..4.0, h in 0.01f64..1.0, r in 1.5f64..4.0) {
        let e = eoc(Some(c * h.powf(p)), Some(c * (h / r).powf(p)), h, h / r).unwrap();
        prop_assert!((e - p).abs() < 1e-9);
    }

    #[test]
    fn supg_delta_respects_its_caps(h in 1e-3f64..1.0, w in 1e-3f64..10.0, eps in 1e-8f64..1.0, c in 0.0f64..10.0) {
        let p = SupgParams::default();
        let d = supg_delta(h, w, eps, c, &p);
        prop_assert!(d > 0.0);
        prop_assert!(d <= (p.delta0 * h / w).max(p.delta1 * h * h / eps) * (1.0 + 1e-15));
        if c > 0.0 {
            prop_assert!(d <= 1.0 / c);
        }
    }

    #[test]
    fn sparse_assembly_matches_dense_accumulation(
        entries in prop::collection::vec((0usize..8, 0usize..8, -5.0f64..5.0), 0..80),
        x in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let mut b = TripletBuilder::new(8, 8);
        let mut dense = DMatrix::<f64>::zeros(8, 8);
        for &(i, j, v) in &entries {
            b.push(i, j, v);
            dense[(i, j)] += v;
        }
        let a = b.build();
        prop_assert!((a.to_dense() - &dense).amax() < 1e-12);
        let y = a.mul_vec(&x);
        let yd = &dense * nalgebra::DVector::from_column_slice(&x);
        for i in 0..8 {
            prop_assert!((y[i] - yd[i]).abs() < 1e-12);
        }
        let sym = a.add_scaled(&a.transpose(), 1.0).unwrap();
        let mut out = Vec::new();
        sym.write_matrix_market_to(&mut out).unwrap();
        prop_assert!(String::from_utf8(out).unwrap().starts_with("%%MatrixMarket matrix coordinate real symmetric"));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stabilizations_are_nonnegative_and_consistent(m in 1usize..=2, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let disc = sphere_disc(m);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..disc.n_active_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for kind in StabKind::ALL {
            let rho = kind.default_rho(disc.h());
            let direct = stabilization_form(disc, kind, rho, &u).unwrap();
            let matrix = assemble_stabilization(disc, kind, rho).unwrap().quadratic_form(&u);
            prop_assert!(direct >= 0.0);
            prop_assert!((direct - matrix).abs() <= 1e-10 * direct.max(1e-300) + 1e-14, "{kind}: {direct} {matrix}");
        }
    }

    #[test]
    fn shifted_sphere_cuts_are_closed(shift in prop::array::uniform3(-0.3f64..0.3), r in 0.5f64..1.0, n in 3usize..7) {
        let surface = AnalyticSurface::sphere(r).shifted(Vec3::from(shift));
        let mesh = Arc::new(build_box_mesh(BoxDomain::cube(-4.0 / 3.0, 4.0 / 3.0), n).unwrap());
        let cut = extract_cut_topology(&interpolate_levelset(&surface, mesh, 1).unwrap()).unwrap();
        prop_assert!(cut.check_closed().is_ok());
        prop_assert!(triangles_inside_parents(&cut));
        prop_assert!(cut.area() > 0.0 && cut.area() < 4.0 * std::f64::consts::PI * r * r * 1.01);
    }

    #[test]
    fn bisection_preserves_volume_and_conformity(marks in prop::collection::vec(0usize..48, 0..12)) {
        let mesh = build_box_mesh(BoxDomain::cube(0.0, 1.0), 2).unwrap();
        let fine = bisect_refine(&mesh, &marks).unwrap();
        prop_assert!((fine.total_volume() - 1.0).abs() < 1e-12);
        let grown = usize::from(!marks.is_empty());
        prop_assert!(fine.n_tets() >= mesh.n_tets() + grown);
        let faces = face_adjacency(fine.tets(), fine.n_vertices()).unwrap();
        // A conforming mesh of the cube has exactly the boundary faces on its surface.
        let boundary_area: f64 = faces
            .faces
            .iter()
            .filter(|f| !f.is_interior())
            .map(|f| {
                let v = f.vertices.map(|i| *fine.vertex(i));
                0.5 * (v[1] - v[0]).cross(&(v[2] - v[0])).norm()
            })
            .sum();
        prop_assert!((boundary_area - 6.0).abs() < 1e-12);
    }

    #[test]
    fn config_echo_round_trips(
        study in 0usize..5,
        m in 1usize..=2,
        k_low in any::<bool>(),
        stab in 0usize..5,
        rho in prop::option::of(0.01f64..10.0),
        levels in 2usize..6,
        seed in any::<u64>(),
        theta in 0.05f64..=1.0,
        eps in 1e-8f64..1.0,
        flags in prop::array::uniform4(any::<bool>()),
        out in "[a-z][a-z0-9_/]{0,12}",
    ) {
        let cfg = StudyConfig {
            study: StudyKind::ALL[study],
            m,
            k: if k_low { 1 } else { m },
            stab: StabKind::ALL[stab],
            rho,
            levels,
            seed,
            theta,
            eps,
            cond: flags[0],
            timings: flags[1],
            vtk: flags[2],
            export_matrix: flags[3],
            out: PathBuf::from(out),
            ..StudyConfig::default()
        };
        prop_assume!(cfg.validate().is_ok());
        prop_assert_eq!(parse_config(&cfg.echo()).unwrap(), cfg);
    }
}
