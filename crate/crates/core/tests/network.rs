mod common;

use made::network::{forward_passes, nll};
use made::{
    brute_force_pmf, build_masks, forward, init_params, log_prob, loss_and_gradients,
    natural_ordering, Activation, Architecture, Connectivity, MadeError, Params,
};
use ndarray::{array, Array1, Array2};
use rand::Rng;

fn to_f64(rows: &[Vec<u8>]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| f64::from(rows[i][j]))
}

#[test]
fn init_shapes_and_determinism() {
    let arch = Architecture::new(3, vec![2], Activation::Relu);
    let p: Params = init_params(&arch, &mut common::rng(5)).unwrap();
    assert_eq!(p.w[0].dim(), (2, 3));
    assert_eq!(p.v.dim(), (3, 2));
    assert_eq!(p.b[0], Array1::<f64>::zeros(2));
    assert_eq!(p.c, Array1::<f64>::zeros(3));
    let q: Params = init_params(&arch, &mut common::rng(5)).unwrap();
    assert_eq!(p, q);
}

#[test]
fn zero_parameters_give_uniform_conditionals() {
    let arch = Architecture::new(3, vec![4], Activation::Softplus).with_direct(true);
    let p = Params::zeros(&arch).unwrap();
    let masks = made::make_mask_list(1, 3, &[4], 0, true).unwrap().remove(0);
    let x = to_f64(&common::all_inputs(3));
    let trace = forward(&p, &masks, x.view()).unwrap();
    assert!(trace.probabilities().iter().all(|&q| q == 0.5));
    let expected = -3.0 * std::f64::consts::LN_2;
    assert!(log_prob(&p, &masks, x.view())
        .unwrap()
        .iter()
        .all(|&v| (v - expected).abs() < 1e-15));
    assert!((trace.nll(x.view())[0] - 2.0794415416798357).abs() < 1e-12);
}

#[test]
fn first_conditional_ignores_the_input() {
    let conn = Connectivity::new(3, vec![vec![1, 2]]).unwrap();
    let masks = build_masks(&natural_ordering(3).unwrap(), &conn, false).unwrap();
    let arch = Architecture::new(3, vec![2], Activation::Relu);
    let mut p = Params::random_uniform(&arch, 1.0, &mut common::rng(6)).unwrap();
    p.v.row_mut(0).fill(0.0);
    let x = to_f64(&common::all_inputs(3));
    let probs = forward(&p, &masks, x.view()).unwrap().probabilities();
    let expected = 1.0 / (1.0 + (-p.c[0]).exp());
    assert!(probs
        .column(0)
        .iter()
        .all(|&q| (q - expected).abs() < 1e-15));
}

#[test]
fn large_logits_give_vanishing_nll() {
    let z = Array1::from_elem(4, 50.0);
    let x = Array1::from_elem(4, 1.0);
    assert!(nll(x.view(), z.view()) < 1e-20);
}

#[test]
fn non_binary_and_misshapen_inputs_are_rejected() {
    let arch = Architecture::new(3, vec![2], Activation::Relu);
    let p = Params::zeros(&arch).unwrap();
    let masks = made::make_mask_list(1, 3, &[2], 0, false)
        .unwrap()
        .remove(0);
    assert!(matches!(
        forward(&p, &masks, array![[0.0, 0.5, 1.0]].view()),
        Err(MadeError::Domain(_))
    ));
    assert!(matches!(
        forward(&p, &masks, array![[0.0, 1.0]].view()),
        Err(MadeError::Shape(_))
    ));
}

/// Batched library log-probabilities equal the loop-based reference for every
/// input, and they exponentiate to a distribution.
#[test]
fn log_prob_matches_scalar_reference() {
    let mut rng = common::rng(7);
    for trial in 0..40 {
        let dim = rng.gen_range(2..=6);
        let act = if trial % 2 == 0 {
            Activation::Relu
        } else {
            Activation::Softplus
        };
        let layers = rng.gen_range(1..=3);
        let (p, masks) = common::random_model(
            &mut rng,
            dim,
            layers,
            10,
            act,
            trial % 3 != 0,
            trial % 4 == 1,
        );
        let inputs = common::all_inputs(dim);
        let lp = log_prob(&p, &masks, to_f64(&inputs).view()).unwrap();
        let mut total = 0.0;
        for (x, &v) in inputs.iter().zip(lp.iter()) {
            let reference = common::naive_log_prob(&p, &masks, x);
            assert!(
                (v - reference).abs() < 1e-10,
                "trial {trial}: {v} vs {reference}"
            );
            total += reference.exp();
        }
        assert!((total - 1.0).abs() < 1e-9, "trial {trial}: sum {total}");
        let pmf = brute_force_pmf(&p, &masks).unwrap();
        assert!((pmf.sum() - 1.0).abs() < 1e-9);
    }
}

/// Flipping an input can only change conditionals of dimensions that come
/// later in the ordering.
#[test]
fn outputs_never_see_current_or_later_inputs() {
    let mut rng = common::rng(8);
    for case in 0..200 {
        let dim = rng.gen_range(2..=10);
        let act = if case % 2 == 0 {
            Activation::Relu
        } else {
            Activation::Softplus
        };
        let layers = rng.gen_range(1..=3);
        let (p, masks) =
            common::random_model(&mut rng, dim, layers, 16, act, case % 2 == 1, case % 3 == 0);
        let x: Vec<u8> = (0..dim).map(|_| rng.gen_range(0..=1)).collect();
        let flip = rng.gen_range(0..dim);
        let mut y = x.clone();
        y[flip] ^= 1;
        let batch = to_f64(&[x, y]);
        let logits = forward(&p, &masks, batch.view()).unwrap().logits;
        let m0 = masks.ordering().positions();
        for d in 0..dim {
            if m0[d] <= m0[flip] {
                assert_eq!(
                    logits[(0, d)],
                    logits[(1, d)],
                    "case {case}: output {d} saw input {flip}"
                );
            }
        }
    }
}

#[test]
fn one_pass_per_log_prob() {
    let (p, masks) = common::random_model(
        &mut common::rng(9),
        20,
        2,
        30,
        Activation::Relu,
        true,
        false,
    );
    let x = Array2::from_shape_fn((100, 20), |(i, j)| ((i * 7 + j * 3) % 2) as f64);
    let before = forward_passes();
    log_prob(&p, &masks, x.view()).unwrap();
    assert_eq!(forward_passes() - before, 1);
}

fn mean_reference_nll(p: &Params, masks: &made::MaskSet, rows: &[Vec<u8>]) -> f64 {
    -rows
        .iter()
        .map(|x| common::naive_log_prob(p, masks, x))
        .sum::<f64>()
        / rows.len() as f64
}

/// Backpropagated gradients against central differences of the scalar
/// reference, over every parameter entry.
#[test]
fn gradients_match_central_differences() {
    let mut rng = common::rng(10);
    let h = 1e-5;
    for (trial, act) in [
        Activation::Softplus,
        Activation::Relu,
        Activation::Softplus,
        Activation::Relu,
    ]
    .into_iter()
    .enumerate()
    {
        let (p, masks) = common::random_model(&mut rng, 5, 2, 6, act, true, true);
        let rows: Vec<Vec<u8>> = (0..4)
            .map(|_| (0..5).map(|_| rng.gen_range(0..=1)).collect())
            .collect();
        let (loss, grads) = loss_and_gradients(&p, &masks, to_f64(&rows).view()).unwrap();
        assert!((loss - mean_reference_nll(&p, &masks, &rows)).abs() < 1e-10);
        let analytic: Vec<f64> = grads
            .tensors()
            .iter()
            .flat_map(|t| t.iter().copied().collect::<Vec<_>>())
            .collect();
        let mut index = 0;
        let mut worst: f64 = 0.0;
        let n_tensors = p.tensors().len();
        for t in 0..n_tensors {
            let len = p.tensors()[t].len();
            for e in 0..len {
                let mut plus = p.clone();
                *plus.tensors_mut()[t].iter_mut().nth(e).unwrap() += h;
                let mut minus = p.clone();
                *minus.tensors_mut()[t].iter_mut().nth(e).unwrap() -= h;
                let numeric = (mean_reference_nll(&plus, &masks, &rows)
                    - mean_reference_nll(&minus, &masks, &rows))
                    / (2.0 * h);
                let a = analytic[index];
                index += 1;
                // Skip entries whose perturbation crosses a ReLU kink.
                if act == Activation::Relu {
                    let kinked = |q: &Params| {
                        rows.iter().any(|x| {
                            let base = forward(&p, &masks, to_f64(std::slice::from_ref(x)).view())
                                .unwrap()
                                .pre;
                            let moved = forward(q, &masks, to_f64(std::slice::from_ref(x)).view())
                                .unwrap()
                                .pre;
                            base.iter().zip(&moved).any(|(b, m)| {
                                b.iter()
                                    .zip(m.iter())
                                    .any(|(&u, &v)| (u > 0.0) != (v > 0.0) || u.abs() < 1e-6)
                            })
                        })
                    };
                    if kinked(&plus) || kinked(&minus) {
                        continue;
                    }
                }
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
                worst = worst.max(rel);
            }
        }
        assert!(
            worst < 1e-6,
            "trial {trial} ({act}): max relative error {worst}"
        );
    }
}

#[test]
fn zero_parameter_output_bias_gradient() {
    let arch = Architecture::new(4, vec![3], Activation::Relu);
    let p = Params::zeros(&arch).unwrap();
    let masks = made::make_mask_list(1, 4, &[3], 0, false)
        .unwrap()
        .remove(0);
    let (_, g) = loss_and_gradients(&p, &masks, Array2::ones((1, 4)).view()).unwrap();
    assert_eq!(g.c, Array1::from_elem(4, -0.5));
}

#[test]
fn single_precision_agrees_with_double() {
    let (p, masks) = common::random_model(
        &mut common::rng(11),
        6,
        2,
        8,
        Activation::Softplus,
        true,
        true,
    );
    let p32 = made::MadeParams::<f32> {
        arch: p.arch.clone(),
        w: p.w.iter().map(|t| t.mapv(|v| v as f32)).collect(),
        b: p.b.iter().map(|t| t.mapv(|v| v as f32)).collect(),
        v: p.v.mapv(|v| v as f32),
        c: p.c.mapv(|v| v as f32),
        a: p.a.as_ref().map(|t| t.mapv(|v| v as f32)),
        u: p.u
            .as_ref()
            .map(|u| u.iter().map(|t| t.mapv(|v| v as f32)).collect()),
        u_out: p.u_out.as_ref().map(|t| t.mapv(|v| v as f32)),
    };
    let inputs = common::all_inputs(6);
    let lp64 = log_prob(&p, &masks, to_f64(&inputs).view()).unwrap();
    let lp32 = log_prob(&p32, &masks, to_f64(&inputs).mapv(|v| v as f32).view()).unwrap();
    for (a, b) in lp64.iter().zip(lp32.iter()) {
        assert!((a - f64::from(*b)).abs() < 1e-4);
    }
}
