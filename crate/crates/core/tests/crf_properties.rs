mod common;

use common::{brute_force, random_beliefs, random_instance};
use gridattn::crf::{exact_inference, mean_field_free_energy, Beliefs, PotentialTable};
use gridattn::inference::{
    beliefs_to_attention, lbp_infer, lbp_on_tape, mean_field_infer, mean_field_on_tape, InferenceConfig, Schedule,
};
use gridattn::rng::seeded;
use proptest::prelude::*;

fn cfg(steps: usize, schedule: Schedule) -> InferenceConfig {
    InferenceConfig {
        steps,
        schedule,
        damping: 0.0,
    }
}

#[test]
fn two_by_two_matches_sixteen_term_sum() {
    let mut rng = seeded(11);
    for _ in 0..50 {
        let (g, p) = random_instance(&mut rng, 2, 2);
        // edges of the 2x2 grid: (0,1) (0,2) (1,3) (2,3)
        assert_eq!(g.edges(), &[(0, 1), (0, 2), (1, 3), (2, 3)]);
        let (mut z, mut one0) = (0.0, 0.0);
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        let w = p.unary[0][a]
                            * p.unary[1][b]
                            * p.unary[2][c]
                            * p.unary[3][d]
                            * p.pairwise[0][a * 2 + b]
                            * p.pairwise[1][a * 2 + c]
                            * p.pairwise[2][b * 2 + d]
                            * p.pairwise[3][c * 2 + d];
                        z += w;
                        if a == 1 {
                            one0 += w;
                        }
                    }
                }
            }
        }
        let ex = exact_inference(&g, &p).unwrap();
        assert!((ex.log_z - z.ln()).abs() < 1e-12);
        assert!((ex.beliefs.0[0][1] - one0 / z).abs() < 1e-12);
    }
}

#[test]
fn exact_matches_linear_space_enumeration() {
    let mut rng = seeded(12);
    for (h, w) in [(1, 5), (2, 3), (3, 3)] {
        let (g, p) = random_instance(&mut rng, h, w);
        let (ones, z) = brute_force(&g, &p);
        let ex = exact_inference(&g, &p).unwrap();
        assert!((ex.log_z - z.ln()).abs() < 1e-10);
        for (b, o) in ex.beliefs.0.iter().zip(&ones) {
            assert!((b[1] - o).abs() < 1e-12);
        }
    }
}

#[test]
fn lbp_exact_on_chains() {
    let mut rng = seeded(13);
    for w in 2..=8 {
        for _ in 0..20 {
            let (g, p) = random_instance(&mut rng, 1, w);
            let ex = exact_inference(&g, &p).unwrap();
            let lbp = lbp_infer(&g, &p, &cfg(w, Schedule::Parallel)).unwrap();
            assert!(lbp.beliefs.max_abs_diff(&ex.beliefs) < 1e-10);
        }
    }
}

#[test]
fn uniform_pairwise_is_a_fixed_point() {
    let mut rng = seeded(14);
    for _ in 0..20 {
        let (g, p) = random_instance(&mut rng, 3, 3);
        let psi: Vec<f64> = p.unary.iter().map(|u| u[1]).collect();
        let flat = PotentialTable::uniform_pairwise(&g, &psi, 1.7);
        let log_pair = vec![[1.7f64.ln(); 4]; g.num_edges()];
        for t in 0..=5 {
            for s in [Schedule::Parallel, Schedule::Sequential] {
                let mf = mean_field_infer(&g, &flat.unary, &log_pair, &cfg(t, s)).unwrap();
                assert!(mf.beliefs.max_abs_diff(&Beliefs(flat.unary.clone())) < 1e-12);
            }
            let lbp = lbp_infer(&g, &flat, &cfg(t, Schedule::Parallel)).unwrap();
            assert!(lbp.beliefs.max_abs_diff(&Beliefs(flat.unary.clone())) < 1e-12);
        }
    }
}

#[test]
fn zero_steps_return_unary() {
    let mut rng = seeded(15);
    let (g, p) = random_instance(&mut rng, 3, 3);
    let mf = mean_field_infer(&g, &p.unary, &p.log_pairwise, &cfg(0, Schedule::Parallel)).unwrap();
    assert_eq!(mf.beliefs.0, p.unary);
    assert_eq!(mf.trajectory.len(), 1);
}

#[test]
fn sequential_mean_field_descends_free_energy() {
    let mut rng = seeded(16);
    for _ in 0..30 {
        let (g, p) = random_instance(&mut rng, 3, 3);
        let ex = exact_inference(&g, &p).unwrap();
        let mf = mean_field_infer(&g, &p.unary, &p.log_pairwise, &cfg(8, Schedule::Sequential)).unwrap();
        let f: Vec<f64> = mf
            .trajectory
            .iter()
            .map(|b| mean_field_free_energy(&g, &p, b).unwrap())
            .collect();
        for pair in f.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "{f:?}");
        }
        assert!(*f.last().unwrap() >= -ex.log_z - 1e-12);
    }
}

#[test]
fn edge_marginals_consistent_with_nodes() {
    let mut rng = seeded(17);
    let (g, p) = random_instance(&mut rng, 3, 3);
    let ex = exact_inference(&g, &p).unwrap();
    for (e, &(i, j)) in g.edges().iter().enumerate() {
        let em = ex.edge_marginals[e];
        assert!((em.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((em[2] + em[3] - ex.beliefs.0[i][1]).abs() < 1e-12);
        assert!((em[1] + em[3] - ex.beliefs.0[j][1]).abs() < 1e-12);
    }
}

#[test]
fn attention_is_expected_selection() {
    let mut rng = seeded(18);
    let (g, p) = random_instance(&mut rng, 2, 3);
    let ex = exact_inference(&g, &p).unwrap();
    let att = beliefs_to_attention(&ex.beliefs);
    // E[Σ_i z_i] by direct enumeration
    let (mut z, mut count) = (0.0, 0.0);
    for state in 0..1usize << g.num_nodes() {
        let labels: Vec<u8> = (0..g.num_nodes()).map(|i| ((state >> i) & 1) as u8).collect();
        let w = gridattn::crf::joint_log_score(&g, &p, &labels).unwrap().exp();
        z += w;
        count += w * labels.iter().map(|&l| l as f64).sum::<f64>();
    }
    assert!((att.iter().sum::<f64>() - count / z).abs() < 1e-12);
}

fn grid_strategy() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 1usize..=3, 1usize..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn free_energy_bounds_log_partition((seed, h, w) in grid_strategy()) {
        let mut rng = seeded(seed);
        let (g, p) = random_instance(&mut rng, h, w);
        let log_z = exact_inference(&g, &p).unwrap().log_z;
        for _ in 0..20 {
            let b = random_beliefs(&mut rng, g.num_nodes());
            prop_assert!(mean_field_free_energy(&g, &p, &b).unwrap() >= -log_z - 1e-12);
        }
    }

    #[test]
    fn inference_outputs_are_normalized((seed, h, w) in grid_strategy(), steps in 0usize..6) {
        let mut rng = seeded(seed);
        let (g, p) = random_instance(&mut rng, h, w);
        for s in [Schedule::Parallel, Schedule::Sequential] {
            let mf = mean_field_infer(&g, &p.unary, &p.log_pairwise, &cfg(steps, s)).unwrap();
            prop_assert!(mf.trajectory.iter().all(|b| b.is_normalized(1e-12)));
        }
        let lbp = lbp_infer(&g, &p, &cfg(steps, Schedule::Parallel)).unwrap();
        prop_assert!(lbp.beliefs.is_normalized(1e-12));
        prop_assert!(lbp.beliefs.0.iter().all(|b| b[1] >= 0.0 && b[1] <= 1.0));
    }

    #[test]
    fn single_grid_node_is_exact(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let (g, p) = random_instance(&mut rng, 1, 1);
        let ex = exact_inference(&g, &p).unwrap();
        prop_assert!((ex.beliefs.0[0][1] - p.unary[0][1]).abs() < 1e-12);
    }
}

#[test]
fn tape_inference_matches_standalone() {
    use gridattn::autodiff::Tape;
    use gridattn::tensor::Tensor;
    use std::sync::Arc;
    let mut rng = seeded(19);
    for _ in 0..30 {
        let (g, p) = random_instance(&mut rng, 3, 3);
        let g = Arc::new(g);
        let flat = |rows: &[[f64; 2]]| rows.iter().flatten().copied().collect::<Vec<_>>();
        let table = |rows: &[[f64; 4]]| {
            Tensor::new(&[rows.len(), 4], rows.iter().flatten().copied().collect()).unwrap()
        };
        for steps in 0..=4 {
            for schedule in [Schedule::Parallel, Schedule::Sequential] {
                let c = cfg(steps, schedule);
                let mut t = Tape::new();
                let u = t.input(Tensor::new(&[9, 2], flat(&p.unary)).unwrap());
                let l = t.input(table(&p.log_pairwise));
                let traj = mean_field_on_tape(&mut t, &g, u, l, &c).unwrap();
                let want = mean_field_infer(&g, &p.unary, &p.log_pairwise, &c).unwrap();
                for (v, b) in traj.iter().zip(&want.trajectory) {
                    for (a, e) in t.value(*v).data().iter().zip(flat(&b.0)) {
                        assert!((a - e).abs() < 1e-12, "MF {schedule:?} T={steps}");
                    }
                }
            }
            let c = cfg(steps, Schedule::Parallel);
            let mut t = Tape::new();
            let u = t.input(Tensor::new(&[9, 2], flat(&p.unary)).unwrap());
            let pw = t.input(table(&p.pairwise));
            let b = lbp_on_tape(&mut t, &g, u, pw, &c).unwrap();
            let want = lbp_infer(&g, &p, &c).unwrap();
            for (a, e) in t.value(b).data().iter().zip(flat(&want.beliefs.0)) {
                assert!((a - e).abs() < 1e-12, "LBP T={steps}");
            }
        }
    }
}
