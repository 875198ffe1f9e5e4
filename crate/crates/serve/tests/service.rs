mod common;

use common::{mesh_entry, service, small_spec};
use nd_serve::service::pick_to_collision;
use nd_serve::{Pick, ServeError, StepFrame, StepRequest};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::sync::Arc;

fn pick(face: u32, depth: f64, n_faces: usize) -> Pick {
    Pick {
        face,
        bary: [0.2, 0.3, 0.5],
        depth_mm: depth,
        dir: [0.0, 0.0, -2.0],
        n_faces,
    }
}

fn domain_face(s: &nd_serve::Service) -> u32 {
    *s.registry().mesh("small").unwrap().domain.face_ids.iter().next().unwrap()
}

#[test]
fn new_session_is_at_rest() {
    let s = service();
    let info = s.create_session("small", "tiny").unwrap();
    let (step, u) = s.snapshot(&info.id).unwrap();
    assert_eq!(step, 0);
    assert_eq!(u.len(), info.n_nodes);
    assert!(u.iter().flatten().all(|&x| x == 0.0));
    assert_eq!(info.supernodes.len(), 8);
    assert!(matches!(s.create_session("nope", "tiny"), Err(ServeError::UnknownMesh(_))));
    assert!(matches!(s.create_session("small", "nope"), Err(ServeError::UnknownModel(_))));
    assert!(matches!(s.step_blocking("s99", StepRequest::release()), Err(ServeError::UnknownSession(_))));
}

#[test]
fn sessions_are_independent() {
    let s = service();
    let a = s.create_session("small", "tiny").unwrap().id;
    let b = s.create_session("small", "tiny").unwrap().id;
    let f = domain_face(&s);
    for _ in 0..5 {
        s.step_blocking(&a, StepRequest::pick(pick(f, 5.0, 4))).unwrap();
    }
    let (step, u) = s.snapshot(&b).unwrap();
    assert_eq!(step, 0);
    assert!(u.iter().flatten().all(|&x| x == 0.0));
    assert_eq!(s.snapshot(&a).unwrap().0, 5);
}

#[test]
fn counters_and_latency_in_every_frame() {
    let s = service();
    let id = s.create_session("small", "tiny").unwrap().id;
    let f = domain_face(&s);
    for i in 1..=20u32 {
        let req = if i % 3 == 0 {
            StepRequest::release()
        } else {
            StepRequest::pick(pick(f, i as f64 * 0.5, 3))
        };
        let frame = s.step_blocking(&id, req).unwrap();
        assert_eq!(frame.step, i);
        assert!(frame.latency_ms > 0.0);
        assert_eq!(StepFrame::decode(&frame.encode()).unwrap(), frame);
    }
    let st = s.stats(&id).unwrap();
    assert_eq!(st.step, 20);
    assert_eq!(st.window, 20);
    assert!(st.median_ms.unwrap() > 0.0);
}

fn run(s: &nd_serve::Service, id: &str, f: u32) -> Vec<StepFrame> {
    (0..6)
        .map(|i| {
            let req = if i < 4 {
                StepRequest::pick(pick(f, 2.0 * i as f64, 5))
            } else {
                StepRequest::release()
            };
            s.step_blocking(id, req).unwrap()
        })
        .collect()
}

#[test]
fn reset_restores_rest_and_replays() {
    let s = service();
    let id = s.create_session("small", "tiny").unwrap().id;
    let f = domain_face(&s);
    let first = run(&s, &id, f);
    s.reset_blocking(&id).unwrap();
    let (step, u) = s.snapshot(&id).unwrap();
    assert_eq!(step, 0);
    assert!(u.iter().flatten().all(|&x| x == 0.0));
    assert_eq!(s.stats(&id).unwrap().window, 0);
    s.reset_blocking(&id).unwrap();
    assert_eq!(s.snapshot(&id).unwrap(), (step, u));
    let second = run(&s, &id, f);
    for (a, b) in first.iter().zip(&second) {
        assert_eq!((a.step, &a.u), (b.step, &b.u));
    }
}

#[test]
fn non_finite_prediction_poisons_until_reset() {
    let s = service();
    let id = s.create_session("small", "fragile").unwrap().id;
    let all: Vec<u32> = (0..s.registry().mesh("small").unwrap().n_nodes() as u32).collect();
    s.step_blocking(&id, StepRequest::release()).unwrap();
    assert!(matches!(s.step_blocking(&id, StepRequest::raw(all, [0.0, 0.0, 3.0])), Err(ServeError::Poisoned)));
    assert!(s.stats(&id).unwrap().poisoned);
    assert!(matches!(s.step_blocking(&id, StepRequest::release()), Err(ServeError::Poisoned)));
    s.reset_blocking(&id).unwrap();
    let frame = s.step_blocking(&id, StepRequest::release()).unwrap();
    assert_eq!(frame.step, 1);
    assert!(frame.u.iter().flatten().all(|x| x.is_finite()));
}

#[test]
fn invalid_requests_are_rejected_without_side_effects() {
    let s = service();
    let id = s.create_session("small", "tiny").unwrap().id;
    let f = domain_face(&s);
    let mesh = s.registry().mesh("small").unwrap();
    let outside = (0..mesh.surface.n_faces() as u32).find(|x| !mesh.domain.contains(*x)).unwrap();
    let bad = [
        StepRequest::pick(pick(f, 15.5, 3)),
        StepRequest::pick(pick(f, -1.0, 3)),
        StepRequest::pick(pick(f, f64::NAN, 3)),
        StepRequest::pick(Pick { dir: [0.0; 3], ..pick(f, 1.0, 3) }),
        StepRequest::pick(Pick { bary: [0.5, 0.5, 0.5], ..pick(f, 1.0, 3) }),
        StepRequest::pick(pick(f, 1.0, 0)),
        StepRequest::pick(pick(f, 1.0, 101)),
        StepRequest::raw(vec![u32::MAX], [0.0, 0.0, 1.0]),
        StepRequest::raw(vec![0], [0.0, 0.0, 16.0]),
        StepRequest::raw(vec![0], [f64::INFINITY, 0.0, 0.0]),
        StepRequest {
            pick: Some(pick(f, 1.0, 3)),
            raw: Some(nd_serve::RawCollision { nodes: vec![0], vec: [0.0; 3] }),
        },
    ];
    for req in bad {
        assert!(s.step_blocking(&id, req.clone()).is_err(), "{req:?}");
    }
    match s.step_blocking(&id, StepRequest::pick(pick(outside, 1.0, 3))) {
        Err(ServeError::OutsideDomain { face, domain }) => {
            assert_eq!(face, outside);
            assert_eq!(domain, mesh.domain.face_ids.iter().copied().collect::<Vec<_>>());
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(s.snapshot(&id).unwrap().0, 0);
}

#[test]
fn zero_depth_and_single_face_picks() {
    let mesh = mesh_entry("m", small_spec());
    let f = *mesh.domain.face_ids.iter().next().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let zero = pick_to_collision(&mesh, &pick(f, 0.0, 10), &mut rng).unwrap();
    assert!(zero.to_dense(mesh.n_nodes()).iter().all(|v| v.norm() == 0.0));
    let one = pick_to_collision(&mesh, &pick(f, 4.0, 1), &mut rng).unwrap();
    let seed_nodes: BTreeSet<u32> = mesh.surface.faces[f as usize].iter().copied().collect();
    let dense = one.to_dense(mesh.n_nodes());
    for (n, v) in dense.iter().enumerate() {
        assert_eq!(v.norm() > 0.0, seed_nodes.contains(&(n as u32)));
    }
}

#[test]
fn concurrent_clients_see_ordered_counters() {
    let s = Arc::new(service());
    let shared = s.create_session("small", "tiny").unwrap().id;
    let own: Vec<String> = (0..3).map(|_| s.create_session("small", "tiny").unwrap().id).collect();
    let f = domain_face(&s);
    let handles: Vec<_> = (0..6)
        .map(|t| {
            let s = s.clone();
            let id = if t < 3 { shared.clone() } else { own[t - 3].clone() };
            std::thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
                let mut seen = Vec::new();
                for _ in 0..40 {
                    use rand::Rng;
                    let req = match rng.gen_range(0..4) {
                        0 => StepRequest::release(),
                        1 => StepRequest::pick(pick(f, rng.gen_range(0.0..15.0), rng.gen_range(1..20))),
                        2 => StepRequest::pick(pick(f, 30.0, 3)),
                        _ => StepRequest::raw(vec![rng.gen_range(0..50)], [0.0, 1.0, 0.0]),
                    };
                    if let Ok(frame) = s.step_blocking(&id, req) {
                        seen.push(frame.step);
                    }
                }
                (id, seen)
            })
        })
        .collect();
    let mut per_session: std::collections::BTreeMap<String, Vec<u32>> = Default::default();
    for h in handles {
        let (id, seen) = h.join().unwrap();
        assert!(seen.windows(2).all(|w| w[0] < w[1]), "client saw {seen:?}");
        per_session.entry(id).or_default().extend(seen);
    }
    for (id, mut all) in per_session {
        all.sort_unstable();
        let n = all.len() as u32;
        assert_eq!(all, (1..=n).collect::<Vec<_>>(), "session {id} counters interleaved");
        assert_eq!(s.snapshot(&id).unwrap().0, n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn pick_fields_satisfy_site_invariants(
        face_pick in 0usize..10_000,
        depth in 0.0f64..15.0,
        n_faces in 1usize..=100,
        dir in prop::array::uniform3(-1.0f64..1.0),
        seed: u64,
    ) {
        prop_assume!(dir.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let mesh = mesh_entry("m", small_spec());
        let faces: Vec<u32> = mesh.domain.face_ids.iter().copied().collect();
        let f = faces[face_pick % faces.len()];
        let p = Pick { face: f, bary: [1.0, 0.0, 0.0], depth_mm: depth, dir, n_faces };
        let field = pick_to_collision(&mesh, &p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let domain_nodes: BTreeSet<u32> = faces.iter().flat_map(|&g| mesh.surface.faces[g as usize]).collect();
        prop_assert!(field.site_nodes.iter().all(|n| domain_nodes.contains(n)));
        prop_assert!(mesh.surface.faces[f as usize].iter().all(|n| field.site_nodes.contains(n)));
        prop_assert!(field.site_nodes.len() <= 2 + n_faces);
        for v in field.values.values() {
            prop_assert!((v.norm() - depth).abs() < 1e-9);
            let d = nd_core::mesh::Vec3::from(dir).normalize();
            prop_assert!((v - d * depth).norm() < 1e-9);
        }
    }
}
