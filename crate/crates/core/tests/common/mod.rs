#![allow(dead_code)]

use gridattn::autodiff::ParamStore;
use gridattn::crf::{Beliefs, GridGraph, PotentialTable};
use gridattn::gradcheck::{compare, finite_difference, GradReport, REL_FLOOR};
use gridattn::model::{Model, ModelConfig, Variant};
use gridattn::rng::{seeded, Rng};
use gridattn::shapes::{generate_dataset, GenerateOptions, ShapesSample, Split};
use rand::Rng as _;

/// Unary `ψ_i(1)` in `[0.05, 0.95]`, log-pairwise entries in `[-1, 1]`.
pub fn random_instance(rng: &mut Rng, h: usize, w: usize) -> (GridGraph, PotentialTable) {
    let g = GridGraph::new(h, w).unwrap();
    let unary = (0..g.num_nodes())
        .map(|_| {
            let p = rng.random_range(0.05..0.95);
            [1.0 - p, p]
        })
        .collect();
    let log_pair = (0..g.num_edges())
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect();
    (g, PotentialTable::from_log_pairwise(unary, log_pair))
}

pub fn random_beliefs(rng: &mut Rng, m: usize) -> Beliefs {
    Beliefs(
        (0..m)
            .map(|_| {
                let p: f64 = rng.random_range(0.0..=1.0);
                [1.0 - p, p]
            })
            .collect(),
    )
}

/// Direct sum over every labeling in linear space: `(p(z_i = 1), Z)`.
pub fn brute_force(g: &GridGraph, p: &PotentialTable) -> (Vec<f64>, f64) {
    let m = g.num_nodes();
    let mut z = 0.0;
    let mut ones = vec![0.0; m];
    for state in 0..1usize << m {
        let bit = |i: usize| (state >> i) & 1;
        let mut w = 1.0;
        for i in 0..m {
            w *= p.unary[i][bit(i)];
        }
        for (e, &(i, j)) in g.edges().iter().enumerate() {
            w *= p.pairwise[e][bit(i) * 2 + bit(j)];
        }
        z += w;
        for (i, o) in ones.iter_mut().enumerate() {
            if bit(i) == 1 {
                *o += w;
            }
        }
    }
    (ones.into_iter().map(|o| o / z).collect(), z)
}

/// 3×3 grid, `n_I = 4`, `n_Q = 6`, `n_c = 5`, `T = 2`.
pub fn micro(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        steps: 2,
        n_i: 4,
        n_q: 6,
        n_c: 5,
        n_e: 3,
        conv_channels: 2,
        ..ModelConfig::default()
    }
}

pub fn samples(n: usize) -> Vec<ShapesSample> {
    generate_dataset(21, n, Split::Train, GenerateOptions::default()).unwrap().samples
}

/// Central differences (`h = 1e-5`) of the evaluation-mode loss of a micro-model against
/// the tape gradient, over every parameter. Also returns the worst parameter's name.
pub fn micro_gradient_error(v: Variant) -> (GradReport, String) {
    let s = samples(3).into_iter().find(|s| s.query_len == 5).unwrap();
    let mut m = Model::new(micro(v), 10).unwrap();
    // zero biases put ReLU inputs from the black background exactly on the kink
    let mut rng = seeded(11);
    for name in ["conv1.bias", "conv2.bias"] {
        let id = m.params.id(name).unwrap();
        for b in m.params.get_mut(id).data_mut() {
            *b = rng.random_range(0.05..0.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
    }
    let mut analytic = m.params.zeros_like();
    m.accumulate_gradients(&s.image, &s.tokens, s.answer as usize, None, 1.0, &mut analytic)
        .unwrap();
    let mut store = std::mem::replace(&mut m.params, ParamStore::new());
    let numeric = finite_difference(&mut store, 1e-5, |p| {
        let mut probe = m.clone();
        probe.params = p.clone();
        probe.loss(&s.image, &s.tokens, s.answer as usize).unwrap()
    });
    let r = compare(&analytic, &numeric, REL_FLOOR);
    let worst = r.worst.map_or(String::new(), |w| store.iter().nth(w.0).unwrap().0.to_string());
    (r, worst)
}
