use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tlqg_core::error_analysis::{
    linear_kf_belief_jacobians, recursive_belief_errors, recursive_errors, theorem1_cost_error_check,
    trace_identity_check, BeliefComposites, Composites, CostJacobians, ErrorRealization, LtvSystem,
};
use tlqg_core::CostWeights;

#[test]
fn closed_forms_match_recursion_on_random_systems() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let sys = LtvSystem::random(2, 1, 2, 5, &mut rng).unwrap();
        let c = Composites::new(&sys);
        for _ in 0..100 {
            let real = ErrorRealization::sample(&sys, &mut rng);
            let seq = recursive_errors(&sys, &real).unwrap();
            for t in -1..5i64 {
                let i = (t + 1) as usize;
                worst = worst.max((c.estimation_error(&real, t).unwrap() - &seq.x_check[i]).amax());
                worst = worst.max((c.state_error(&real, t).unwrap() - &seq.x_tilde[i]).amax());
                if t <= 3 {
                    worst = worst.max((c.control_error(&real, t).unwrap() - &seq.u_tilde[i]).amax());
                }
                if t >= 0 {
                    worst = worst.max((c.observation_error(&real, t).unwrap() - &seq.z_tilde[i]).amax());
                }
            }
        }
    }
    assert!(worst <= 1e-10, "largest closed-form residual {worst:e}");
}

#[test]
fn belief_closed_form_matches_linearized_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..10 {
        let sys = LtvSystem::random(1, 1, 1, 3, &mut rng).unwrap();
        let u: Vec<_> = (0..3).map(|t| DVector::from_element(1, 0.3 * t as f64 - 0.2)).collect();
        let jac = linear_kf_belief_jacobians(&sys, &DVector::from_element(1, 0.5), &u, 1e-6).unwrap();
        let bc = BeliefComposites::new(&Composites::new(&sys), &jac).unwrap();
        for _ in 0..50 {
            let real = ErrorRealization::sample(&sys, &mut rng);
            let rec = recursive_belief_errors(&recursive_errors(&sys, &real).unwrap(), &jac);
            for (t, expected) in rec.iter().enumerate() {
                assert!((bc.belief_error(&real, t).unwrap() - expected).amax() <= 1e-8);
            }
        }
    }
}

#[test]
fn expected_linear_cost_error_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sys = LtvSystem::random(1, 1, 1, 4, &mut rng).unwrap();
    let u = vec![DVector::zeros(1); 4];
    let jac = linear_kf_belief_jacobians(&sys, &DVector::zeros(1), &u, 1e-6).unwrap();
    let costs = CostJacobians {
        cb: (0..5).map(|t| DMatrix::from_row_slice(1, 2, &[1.0 + t as f64, 0.5])).collect(),
        cu: (0..4).map(|t| DMatrix::from_element(1, 1, 0.3 * t as f64 - 0.4)).collect(),
    };
    let est = theorem1_cost_error_check(&sys, &jac, &costs, 20_000, 9).unwrap();
    assert!(est.standard_error > 0.0);
    assert!(est.within(4.0), "{est:?}");
}

#[test]
fn estimation_cost_matches_covariance_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sys = LtvSystem::random(2, 1, 2, 5, &mut rng).unwrap();
    let w = CostWeights::uniform(5, DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]), DMatrix::identity(1, 1))
        .unwrap();
    let check = trace_identity_check(&sys, &w, 20_000, 3).unwrap();
    assert!(check.z_score() < 4.0, "{check:?}");
}
