use std::sync::Arc;

use faer::{Mat, Side};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thm_core::PolyMesh;
use thm_core::forms::*;
use thm_core::mesh::{Rect, generate_voronoi, parse_mesh, structured_quads};
use thm_core::sparse::Coo;

fn lloyd(n: usize, seed: u64) -> Arc<PolyMesh> {
    Arc::new(generate_voronoi(n, Rect::unit(), seed, 30).unwrap())
}

fn unit_square() -> Arc<PolyMesh> {
    Arc::new(parse_mesh("4 1\n0 0\n1 0\n1 1\n0 1\n4 0 1 2 3\n").unwrap())
}

fn disc_with(mesh: Arc<PolyMesh>, ell: usize, material: Material) -> Discretization {
    let params = ModelParams::uniform(material, mesh.n_cells());
    Discretization::new(mesh, ell, ell, params, PenaltyParams::default()).unwrap()
}

/// Materials with cell-wise varying anisotropic tensors.
fn heterogeneous(mesh: &PolyMesh, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = (0..mesh.n_cells())
        .map(|_| {
            let (a, c): (f64, f64) = (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
            let b = rng.random_range(-0.5..0.5) * (a * c).sqrt();
            let s: f64 = rng.random_range(1e-3..1.0);
            Material {
                theta: [[a, b], [b, c]],
                k: [[s * c, -s * b], [-s * b, s * a]],
                mu: rng.random_range(0.5..3.0),
                lambda: rng.random_range(1.0..10.0),
                ..Material::reference()
            }
        })
        .collect();
    ModelParams::from_cells(cells)
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dense(coo: &Coo) -> Mat<f64> {
    let d = coo.to_dense();
    Mat::from_fn(coo.nrows(), coo.ncols(), |i, j| d[i][j])
}

fn max_asymmetry(coo: &Coo) -> f64 {
    let d = coo.to_dense();
    let mut worst: f64 = 0.0;
    for i in 0..d.len() {
        for j in 0..i {
            worst = worst.max((d[i][j] - d[j][i]).abs());
        }
    }
    worst
}

fn eig_range(coo: &Coo) -> (f64, f64) {
    let e = dense(coo).self_adjoint_eigenvalues(Side::Lower).unwrap();
    (e[0], e[e.len() - 1])
}

fn zero_s(_: [f64; 2]) -> f64 {
    0.0
}

fn zero_v(_: [f64; 2]) -> [f64; 2] {
    [0.0, 0.0]
}

#[test]
fn face_coefficient_examples() {
    let side = 0.1 / 2f64.sqrt();
    let mesh: PolyMesh = structured_quads(1, 1, Rect::new([0.0, 0.0], [side, side])).unwrap();
    let params = ModelParams::uniform(Material { theta: scaled_identity(1.0), ..Material::reference() }, 1);
    let fc = face_coefficients(&mesh, 0, &params, &PenaltyParams::default(), 2, 2).unwrap();
    assert!((fc.sigma - 400.0).abs() < 1e-10);
    assert_eq!(fc.omega_theta[0], 1.0);

    assert_eq!(wsip_weights(1.0, 1.0), ([0.5, 0.5], 0.5));
    assert_eq!(wsip_weights(1.0, 0.0), ([0.0, 1.0], 0.0));
    let negative = ModelParams::uniform(Material { theta: [[1.0, 0.0], [0.0, -1.0]], ..Material::reference() }, 1);
    assert!(face_coefficients(&mesh, 0, &negative, &PenaltyParams::default(), 2, 2).is_err());
}

#[test]
fn interior_face_weights_are_convex() {
    let mesh = lloyd(40, 3);
    let params = heterogeneous(&mesh, 4);
    for f in mesh.interior_faces() {
        let fc = face_coefficients(&mesh, f, &params, &PenaltyParams::default(), 2, 2).unwrap();
        let face = mesh.face(f);
        let (mp, mm) = (params.cell(face.owner), params.cell(face.neighbor.unwrap()));
        for (w, g, tp, tm) in [
            (fc.omega_theta, fc.gamma_theta, &mp.theta, &mm.theta),
            (fc.omega_k, fc.gamma_k, &mp.k, &mm.k),
        ] {
            assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
            let (dp, dm) = (normal_component(tp, face.normal), normal_component(tm, face.normal));
            assert!(g <= dp.min(dm) * (1.0 + 1e-14));
        }
        let ratio = (4.0 / mesh.diameter(face.owner)).max(4.0 / mesh.diameter(face.neighbor.unwrap()));
        assert!((fc.sigma - 10.0 * fc.gamma_theta * ratio).abs() <= 1e-12 * fc.sigma);
    }
}

#[test]
fn zero_theta_gives_zero_thermal_matrix() {
    let mesh = lloyd(20, 1);
    let disc = disc_with(mesh, 2, Material { theta: scaled_identity(0.0), ..Material::reference() });
    let (coo, rhs) = assemble_at(&disc, &|x| x[0] + 1.0);
    assert!(coo.values().iter().all(|&v| v == 0.0));
    assert!(rhs.iter().all(|&v| v == 0.0));
}

#[test]
fn single_square_constant_entry_is_boundary_penalty() {
    let disc = disc_with(unit_square(), 1, Material { theta: scaled_identity(1.0), ..Material::reference() });
    let d = assemble_at(&disc, &zero_s).0.to_dense();
    // The constant mode of an orthonormal basis on the unit square is 1.
    let expected = 10.0 / 2f64.sqrt() * 4.0;
    assert!((d[0][0] - expected).abs() < 1e-12, "{} vs {expected}", d[0][0]);
}

#[test]
fn diffusion_and_mass_matrices_are_symmetric() {
    let mesh = lloyd(100, 2);
    let base = disc_with(mesh.clone(), 2, Material::reference());
    let disc = base.with_params(heterogeneous(&mesh, 9)).unwrap();
    for coo in [
        assemble_at(&disc, &zero_s).0,
        assemble_ap(&disc, &zero_s).0,
        assemble_ae(&disc, &zero_v).0,
        assemble_m(&disc),
        assemble_d(&disc),
    ] {
        let scale = coo.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_asymmetry(&coo) <= 1e-12, "asymmetry {:e} scale {scale:e}", max_asymmetry(&coo));
    }
}

#[test]
fn diffusion_operators_are_positive_definite() {
    let mesh = lloyd(40, 5);
    for ell in 1..=4 {
        let disc = disc_with(mesh.clone(), ell, Material::reference()).with_params(heterogeneous(&mesh, ell as u64)).unwrap();
        for (name, coo) in [
            ("A_T", assemble_at(&disc, &zero_s).0),
            ("A_p", assemble_ap(&disc, &zero_s).0),
            ("A_e", assemble_ae(&disc, &zero_v).0),
        ] {
            let (lo, hi) = eig_range(&coo);
            assert!(lo > 0.0, "{name} ell {ell}: smallest eigenvalue {lo:e} (largest {hi:e})");
        }
    }
}

#[test]
fn pressure_matrix_is_linear_in_k() {
    let mesh = lloyd(100, 6);
    let unit_k = disc_with(mesh.clone(), 2, Material { k: scaled_identity(1.0), ..Material::reference() });
    let small_k = disc_with(mesh.clone(), 2, Material { k: scaled_identity(1e-10), ..Material::reference() });
    let theta_i = disc_with(mesh, 2, Material { theta: scaled_identity(1.0), ..Material::reference() });
    let (a, b, t) = (assemble_ap(&unit_k, &zero_s).0, assemble_ap(&small_k, &zero_s).0, assemble_at(&theta_i, &zero_s).0);
    let scale = a.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for ((x, y), z) in a.values().iter().zip(b.values()).zip(t.values()) {
        assert!((y - 1e-10 * x).abs() <= 1e-12 * 1e-10 * scale);
        assert!((x - z).abs() <= 1e-12 * scale);
    }
}

#[test]
fn rigid_translation_is_in_the_kernel() {
    let mesh = lloyd(30, 7);
    let disc = disc_with(mesh, 2, Material::reference());
    let c = [0.7, -1.3];
    let (coo, lift) = assemble_ae(&disc, &move |_| c);
    let u = disc.space().with_components(2).unwrap().project(move |_| c);
    let au = coo.matvec(&u);
    let scale = lift.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, l) in au.iter().zip(&lift) {
        assert!((a - l).abs() <= 1e-10 * scale);
    }
}

#[test]
fn divergence_pairing_single_cell() {
    let disc = disc_with(unit_square(), 1, Material::reference());
    let (b, lift) = assemble_b(&disc, &zero_v);
    assert!(lift.iter().all(|&v| v == 0.0));
    let v = disc.space().with_components(2).unwrap().project(|x| [x[0], 0.0]);
    let phi = disc.space_q().project_scalar(|_| 1.0);
    let value = b.bilinear(&phi, &v);
    assert!(value.abs() < 1e-13, "{value}");
    // Hand integration: -int 1 + int x n_x = -1 + 1.
    let volume = -1.0;
    let boundary = 1.0;
    let direct = b_functional(disc.mesh(), 4, &|_, _| 1.0, &|_, x| ([x[0], 0.0], 1.0));
    assert!((direct - (volume + boundary)).abs() < 1e-14);
}

#[test]
fn divergence_pairing_vanishes_for_tangential_continuous_fields() {
    let mesh = lloyd(50, 8);
    let disc = disc_with(mesh, 2, Material::reference());
    let (b, _) = assemble_b(&disc, &zero_v);
    // v vanishes on the boundary of the unit square, is continuous and quadratic.
    let v = disc.space().with_components(2).unwrap().project(|x| [x[0] * (1.0 - x[0]), x[1] * (1.0 - x[1])]);
    let phi = disc.space_q().project_scalar(|_| 1.0);
    assert!(b.bilinear(&phi, &v).abs() < 1e-12);
}

#[test]
fn divergence_pairing_is_bounded_by_broken_div_seminorm() {
    let mesh = lloyd(30, 9);
    let ell = 2;
    let disc = disc_with(mesh.clone(), ell, Material::reference());
    let (b, _) = assemble_b(&disc, &zero_v);
    let vspace = disc.space().with_components(2).unwrap();
    let sq = disc.space_q();
    let order = disc.volume_order();
    let l2 = (ell * ell) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let v = random_vec(vspace.n_dofs(), &mut rng);
        let phi = random_vec(sq.n_dofs(), &mut rng);
        let value = b.bilinear(&phi, &v).abs();
        let (mut div2, mut phi2) = (0.0, 0.0);
        let mut trace: f64 = 0.0;
        for c in 0..mesh.n_cells() {
            let mut cell_phi2 = 0.0;
            for (x, w) in vspace.element_quadrature(c, order).iter() {
                div2 += w * vspace.evaluate(&v, c, x).div().powi(2);
                cell_phi2 += w * sq.evaluate(&phi, c, x).value[0].powi(2);
            }
            let boundary2: f64 = mesh
                .cell_faces(c)
                .iter()
                .map(|&f| sq.face_quadrature(f, order).integrate(|x| sq.evaluate(&phi, c, x).value[0].powi(2)))
                .sum();
            trace = trace.max((boundary2 * mesh.diameter(c)).sqrt() / (ell as f64 * cell_phi2.sqrt()));
            phi2 += cell_phi2;
        }
        let mut jump2 = 0.0;
        for f in 0..mesh.n_faces() {
            let face = mesh.face(f);
            let weight = match face.neighbor {
                Some(nb) => (l2 / mesh.diameter(face.owner)).max(l2 / mesh.diameter(nb)),
                None => l2 / mesh.diameter(face.owner),
            };
            for (x, w) in vspace.face_quadrature(f, order).iter() {
                let vp = vspace.evaluate(&v, face.owner, x).value;
                let vm = face.neighbor.map(|nb| vspace.evaluate(&v, nb, x).value).unwrap_or([0.0; 2]);
                let jn = (vp[0] - vm[0]) * face.normal[0] + (vp[1] - vm[1]) * face.normal[1];
                jump2 += w * weight * jn * jn;
            }
        }
        let seminorm = (div2 + jump2).sqrt();
        // Cauchy-Schwarz plus the trace-inverse inequality for phi.
        let constant = (1.0 + trace * trace).sqrt();
        let bound = constant * seminorm * phi2.sqrt();
        assert!(value <= bound * (1.0 + 1e-12), "{value} > {bound}");
    }
}

#[test]
fn jump_stabilization_properties() {
    let disc = disc_with(lloyd(40, 11), 2, Material::reference());
    let d = assemble_d(&disc);
    let one = disc.space_q().project_scalar(|_| 1.0);
    assert!(d.matvec(&one).iter().all(|v| v.abs() < 1e-12));
    let (lo, hi) = eig_range(&d);
    assert!(lo >= -1e-12 * hi.max(1.0));
    let single = disc_with(unit_square(), 2, Material::reference());
    assert!(assemble_d(&single).values().iter().all(|&v| v == 0.0));
}

#[test]
fn mass_form_single_cell_value() {
    let disc = disc_with(unit_square(), 1, Material::reference());
    let blocks = ScalarBlocks::new(&disc);
    let mut x = vec![0.0; blocks.size];
    x[blocks.phi] = 1.0;
    let value = assemble_m(&disc).bilinear(&x, &x);
    assert!((value - 1.0 / 5.0).abs() < 1e-14);
}

#[test]
fn mass_form_matches_pointwise_oracle() {
    let mesh = lloyd(15, 12);
    let disc = disc_with(mesh.clone(), 2, Material::reference()).with_params(heterogeneous(&mesh, 13)).unwrap();
    let blocks = ScalarBlocks::new(&disc);
    let m = assemble_m(&disc);
    let (space, sq) = (disc.space(), disc.space_q());
    let (nb, nc) = (space.n_dofs(), sq.n_dofs());
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..5 {
        let x = random_vec(blocks.size, &mut rng);
        let y = random_vec(blocks.size, &mut rng);
        let (p, t, phi) = (&x[..nb], &x[nb..2 * nb], &x[2 * nb..2 * nb + nc]);
        let (q, s, psi) = (&y[..nb], &y[nb..2 * nb], &y[2 * nb..2 * nb + nc]);
        let mut oracle = 0.0;
        for c in 0..mesh.n_cells() {
            let mat = disc.params().cell(c);
            for (pt, w) in space.element_quadrature(c, 6).iter() {
                let ev = |f: &[f64], sp: &thm_core::fespace::FESpace| sp.evaluate(f, c, pt).value[0];
                let (pv, tv, fv) = (ev(p, space), ev(t, space), ev(phi, sq));
                let (qv, sv, gv) = (ev(q, space), ev(s, space), ev(psi, sq));
                oracle += w
                    * (mat.b0 * (pv - tv) * (qv - sv)
                        + (mat.a0 - mat.b0) * tv * sv
                        + (mat.c0 - mat.b0) * pv * qv
                        + (fv + mat.alpha * pv + mat.beta * tv) * (gv + mat.alpha * qv + mat.beta * sv) / mat.lambda);
            }
        }
        let assembled = m.bilinear(&y, &x);
        assert!((assembled - oracle).abs() <= 1e-12 * oracle.abs().max(1.0), "{assembled} vs {oracle}");
    }
    assert_eq!(blocks.t, nb);
}

#[test]
fn mass_form_is_positive_semidefinite() {
    let mesh = lloyd(30, 15);
    for material in [Material { a0: 0.0, b0: 0.0, c0: 0.0, ..Material::reference() }, Material::reference()] {
        let disc = disc_with(mesh.clone(), 2, material);
        let m = assemble_m(&disc);
        assert!(max_asymmetry(&m) <= 1e-12);
        let (lo, hi) = eig_range(&m);
        assert!(lo >= -1e-12 * hi.max(1.0), "{lo:e}");
    }
}

#[test]
fn homogeneous_data_gives_zero_lifting() {
    let disc = disc_with(lloyd(20, 16), 2, Material::reference());
    assert!(assemble_at(&disc, &zero_s).1.iter().all(|&v| v == 0.0));
    assert!(assemble_ap(&disc, &zero_s).1.iter().all(|&v| v == 0.0));
    assert!(assemble_ae(&disc, &zero_v).1.iter().all(|&v| v == 0.0));
    assert!(assemble_b(&disc, &zero_v).1.iter().all(|&v| v == 0.0));
    let p = disc.space().project_scalar(|x| (x[0] * 3.0).sin() + x[1]);
    let eta = EtaField::new(disc.space(), &p, disc.params());
    let (_, rhs) = assemble_c(&disc, TransportVariant::Stab, TransportOptions::default(), &eta, None, &zero_s).unwrap();
    assert!(rhs.iter().all(|&v| v == 0.0));
}

#[test]
fn transport_vanishes_for_constant_pressure_or_zero_coupling() {
    let mesh = lloyd(20, 17);
    let disc = disc_with(mesh.clone(), 2, Material::reference());
    let constant = disc.space().project_scalar(|_| 2.5);
    let t_prev = disc.space().project_scalar(|x| x[0] * x[1]);
    let eta = EtaField::new(disc.space(), &constant, disc.params());
    // The frozen-gradient variant lags the temperature instead of the pressure.
    let lagged = |v: TransportVariant| if v == TransportVariant::Old { constant.as_slice() } else { t_prev.as_slice() };
    let no_cf = disc.with_params(ModelParams::uniform(Material { cf: 0.0, ..Material::reference() }, mesh.n_cells())).unwrap();
    let p = disc.space().project_scalar(|x| x[0] * x[0] - x[1]);
    let eta_cf0 = EtaField::new(no_cf.space(), &p, no_cf.params());
    for variant in [TransportVariant::Old, TransportVariant::Vol, TransportVariant::Plain, TransportVariant::Stab] {
        for (d, e) in [(&disc, &eta), (&no_cf, &eta_cf0)] {
            let t = if std::ptr::eq(d, &no_cf) { t_prev.as_slice() } else { lagged(variant) };
            let (coo, _) = assemble_c(d, variant, TransportOptions::default(), e, Some(t), &|_| 1.0).unwrap();
            let worst = coo.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst < 1e-11, "{variant:?} {worst:e}");
        }
    }
    assert!(assemble_c(&disc, TransportVariant::Old, TransportOptions::default(), &eta, None, &zero_s).is_err());
}

#[test]
fn eta_of_linear_pressure() {
    let mesh = lloyd(10, 18);
    let params = ModelParams::uniform(Material { k: scaled_identity(1.0), ..Material::reference() }, mesh.n_cells());
    let disc = Discretization::new(mesh.clone(), 2, 2, params, PenaltyParams::default()).unwrap();
    let p = disc.space().project_scalar(|x| x[0]);
    let eta = EtaField::new(disc.space(), &p, disc.params());
    for c in 0..mesh.n_cells() {
        let (v, div) = eta.value_and_div(c, mesh.centroid(c));
        assert!((v[0] + 1.0).abs() < 1e-10 && v[1].abs() < 1e-10 && div.abs() < 1e-8);
    }
}

/// Both sides of the transport energy identities, computed by quadrature.
struct Identity {
    lhs_plain: f64,
    lhs_stab: f64,
    volume: f64,
    faces: f64,
    upwind: f64,
    inflow: f64,
    b_half: f64,
}

fn identity_terms(disc: &Discretization, t: &[f64], p: &[f64]) -> Identity {
    let space = disc.space();
    let mesh = space.mesh();
    let eta = EtaField::new(space, p, disc.params());
    let opts = TransportOptions::default();
    let plain = assemble_c(disc, TransportVariant::Plain, opts, &eta, None, &zero_s).unwrap().0;
    let stab = assemble_c(disc, TransportVariant::Stab, opts, &eta, None, &zero_s).unwrap().0;
    let order = disc.volume_order();
    let tv = |c: usize, x: [f64; 2]| space.evaluate(t, c, x).value[0];
    let mut volume = 0.0;
    for c in 0..mesh.n_cells() {
        for (x, w) in space.element_quadrature(c, order).iter() {
            volume -= 0.5 * w * eta.value_and_div(c, x).1 * tv(c, x).powi(2);
        }
    }
    let (mut faces, mut upwind, mut inflow) = (0.0, 0.0, 0.0);
    for f in 0..mesh.n_faces() {
        let face = mesh.face(f);
        let n = face.normal;
        for (x, w) in space.face_quadrature(f, order).iter() {
            let ep = eta.value(face.owner, x);
            let tp = tv(face.owner, x);
            match face.neighbor {
                Some(nb) => {
                    let em = eta.value(nb, x);
                    let tm = tv(nb, x);
                    let jump_n = (ep[0] - em[0]) * n[0] + (ep[1] - em[1]) * n[1];
                    faces += 0.5 * w * jump_n * 0.5 * (tp * tp + tm * tm);
                    let avg_n = 0.5 * ((ep[0] + em[0]) * n[0] + (ep[1] + em[1]) * n[1]);
                    upwind += w * avg_n.abs() / 2.0 * (tp - tm).powi(2);
                }
                None => {
                    let en = ep[0] * n[0] + ep[1] * n[1];
                    faces += 0.5 * w * en * tp * tp;
                    inflow += w * (en.abs() - en) / 2.0 * tp * tp;
                }
            }
        }
    }
    let b_half = 0.5 * b_functional(mesh, order, &|c, x| tv(c, x).powi(2), &|c, x| eta.value_and_div(c, x));
    Identity {
        lhs_plain: plain.bilinear(t, t),
        lhs_stab: stab.bilinear(t, t),
        volume,
        faces,
        upwind,
        inflow,
        b_half,
    }
}

#[test]
fn transport_energy_identities() {
    let mesh = lloyd(20, 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut pairs = 0;
    for ell in 1..=3 {
        let disc = disc_with(mesh.clone(), ell, Material::reference()).with_params(heterogeneous(&mesh, 21)).unwrap();
        let n = disc.space().n_dofs();
        for _ in 0..17 {
            let t = random_vec(n, &mut rng);
            let p = random_vec(n, &mut rng);
            let id = identity_terms(&disc, &t, &p);
            let scale = id.volume.abs() + id.faces.abs() + id.upwind + id.inflow;
            let plain_rhs = id.volume + id.faces;
            assert!((id.lhs_plain - plain_rhs).abs() <= 1e-10 * scale, "ell {ell}: {} vs {plain_rhs}", id.lhs_plain);
            assert!((id.b_half - plain_rhs).abs() <= 1e-10 * scale);
            let stab_rhs = id.b_half + id.upwind + id.inflow;
            assert!((id.lhs_stab - stab_rhs).abs() <= 1e-10 * scale, "ell {ell}: {} vs {stab_rhs}", id.lhs_stab);
            pairs += 1;
        }
    }
    assert!(pairs >= 50);
}

#[test]
fn upwind_and_inflow_forms_are_psd() {
    let mesh = lloyd(25, 22);
    let disc = disc_with(mesh, 2, Material::reference());
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..3 {
        let p = random_vec(disc.space().n_dofs(), &mut rng);
        let eta = EtaField::new(disc.space(), &p, disc.params());
        let (uw, inflow) = assemble_upwind_parts(&disc, &eta);
        for coo in [uw, inflow] {
            assert!(max_asymmetry(&coo) <= 1e-12);
            let (lo, hi) = eig_range(&coo);
            assert!(lo >= -1e-12 * hi.max(1.0), "{lo:e}");
        }
    }
}

#[test]
fn evaluate_form_matches_assembled_matrices() {
    let disc = disc_with(lloyd(15, 24), 2, Material::reference());
    let n = disc.space().n_dofs();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..100 {
        let t = random_vec(n, &mut rng);
        assert!(evaluate_form(&disc, FormHandle::At, &t, &t) >= 0.0);
    }
    let t = random_vec(n, &mut rng);
    let s = random_vec(n, &mut rng);
    let a = assemble_at(&disc, &zero_s).0;
    assert!((evaluate_form(&disc, FormHandle::At, &t, &s) - a.bilinear(&s, &t)).abs() < 1e-10);
    let zero_t = vec![0.0; n];
    let p = random_vec(n, &mut rng);
    let eta = EtaField::new(disc.space(), &p, disc.params());
    let space = disc.space();
    let b = b_functional(disc.mesh(), disc.volume_order(), &|c, x| space.evaluate(&zero_t, c, x).value[0].powi(2), &|c, x| {
        eta.value_and_div(c, x)
    });
    assert_eq!(b, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn thermal_matrix_scales_linearly(c in 1e-6f64..1e3, seed in 0u64..100) {
        let mesh = lloyd(12, seed);
        let base = disc_with(mesh.clone(), 2, Material::reference()).with_params(heterogeneous(&mesh, seed)).unwrap();
        let scaled = base.with_params(base.params().map(|m| Material { theta: [[c * m.theta[0][0], c * m.theta[0][1]], [c * m.theta[1][0], c * m.theta[1][1]]], ..*m })).unwrap();
        let (a, b) = (assemble_at(&base, &zero_s).0, assemble_at(&scaled, &zero_s).0);
        let scale = a.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((y - c * x).abs() <= 1e-12 * c * scale);
        }
    }

    #[test]
    fn weights_are_convex_with_bounded_gamma(dp in 0.0f64..10.0, dm in 0.0f64..10.0) {
        let (w, g) = wsip_weights(dp, dm);
        prop_assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
        prop_assert!(w[0] >= 0.0 && w[1] >= 0.0);
        prop_assert!(g <= dp.min(dm) * (1.0 + 1e-15) + 1e-300);
    }

    #[test]
    fn negative_part_is_nonnegative(x in -1e6f64..1e6) {
        let n = negative_part(x);
        prop_assert!(n >= 0.0);
        prop_assert!((n - (x.abs() - x) / 2.0).abs() == 0.0);
    }
}
