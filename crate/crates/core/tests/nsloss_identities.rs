use proptest::prelude::*;
use rand::Rng as _;
use sensireg::model::{ActivationTrace, Model, ModelSpec};
use sensireg::nsloss::{
    nsloss, nsloss_on_tape_with, sample_sphere, search_lambda, select_lambda, total_loss, Aggregation, NsConfig,
    SensitivityStats, LAMBDA_PROBES,
};
use sensireg::rng::{rng_from, Rng};
use sensireg::{Error, Tape, Tensor};

fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn random_net(seed: u64) -> (Model, Tensor) {
    let mut r = rng_from(seed, &[1]);
    let d = r.random_range(2..7);
    let depth = r.random_range(1..4);
    let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(1..8)).collect();
    let classes = r.random_range(2..5);
    let mut model = Model::init(ModelSpec::mlp(&[d], &hidden, classes), seed).unwrap();
    for (i, t) in model.params.tensors.iter_mut().enumerate() {
        if i % 2 == 1 {
            *t = uniform(&mut r, t.shape(), -0.3, 0.3);
        }
    }
    let b = r.random_range(1..6);
    let x = uniform(&mut r, &[b, d], -1.0, 1.0);
    (model, x)
}

fn cfg(eps_ns: f64, n_perturb: usize, lambda: f64) -> NsConfig {
    NsConfig {
        eps_ns,
        n_perturb,
        lambda,
        seed: 0,
    }
}

/// Value and parameter gradients of NsLoss under one aggregation.
fn loss_and_grads(model: &Model, x: &Tensor, c: &NsConfig, seed: u64, agg: Aggregation) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let mut rng = rng_from(seed, &[]);
    let terms = nsloss_on_tape_with(&bound, &mut tape, x, c, &mut rng, agg).unwrap();
    let value = tape.value(terms.loss).item().unwrap();
    let grads = tape.backward(terms.loss).unwrap();
    let flat = bound.params.iter().flat_map(|&p| grads.get(p).into_data()).collect();
    (value, flat)
}

#[test]
fn weighted_form_equals_cancelled_form() {
    for seed in 0..100 {
        let (model, x) = random_net(seed);
        let c = cfg(0.4, 3, 1.0);
        let (vw, gw) = loss_and_grads(&model, &x, &c, seed, Aggregation::Weighted);
        let (vc, gc) = loss_and_grads(&model, &x, &c, seed, Aggregation::Cancelled);
        assert!((vw - vc).abs() <= 1e-12 * vc.abs().max(1.0), "net {seed}: {vw} vs {vc}");
        for (a, b) in gw.iter().zip(&gc) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "net {seed}: grad {a} vs {b}");
        }
    }
}

/// Direct per-neuron evaluation from separately computed activations.
fn loop_oracle(model: &Model, x: &Tensor, perturbed: &[Tensor], eps: f64) -> f64 {
    let acts = |batch: &Tensor| model.forward_traced_values(batch).unwrap().1;
    let clean = acts(x);
    let perts: Vec<ActivationTrace> = perturbed.iter().map(acts).collect();
    let b = x.rows();
    let mut total = 0.0;
    for (i, layer) in clean.layers().iter().enumerate() {
        let w = layer.row_len();
        for j in 0..w {
            let mut ma = 0.0;
            let mut md = 0.0;
            for m in 0..b {
                let a = layer.row(m)[j];
                ma += a.abs() / b as f64;
                for p in &perts {
                    md += (a - p.layer(i).row(m)[j]).abs() / (b * perts.len()) as f64;
                }
            }
            if ma > 0.0 {
                let ns = md / (eps * w as f64 * ma);
                total += ns * ma;
            } else {
                total += md / (eps * w as f64);
            }
        }
    }
    total
}

#[test]
fn per_neuron_loop_oracle() {
    for seed in 0..40 {
        let (model, x) = random_net(seed);
        let c = cfg(0.25, 4, 1.0);
        let perturbed = sample_sphere(&x, c.eps_ns, c.n_perturb, &mut rng_from(seed, &[])).unwrap();
        let want = loop_oracle(&model, &x, &perturbed, c.eps_ns);
        let got = nsloss(&model, &x, &c, &mut rng_from(seed, &[])).unwrap();
        assert!((got - want).abs() <= 1e-10 * want.max(1.0), "net {seed}: {got} vs {want}");

        let (_, trace) = model.forward_traced_values(&x).unwrap();
        let traces: Vec<_> = perturbed
            .iter()
            .map(|p| model.forward_traced_values(p).unwrap().1)
            .collect();
        let stats = SensitivityStats::from_traces(&trace, &traces, c.eps_ns).unwrap();
        assert!((stats.nsloss() - want).abs() <= 1e-10 * want.max(1.0));
        assert!((stats.nsloss_cancelled() - want).abs() <= 1e-10 * want.max(1.0));
    }
}

#[test]
fn sphere_samples_have_exact_radius_and_no_drift() {
    let d = 8;
    let eps = 0.7;
    let x = uniform(&mut rng_from(3, &[]), &[1, d], 0.0, 1.0);
    let draws = sample_sphere(&x, eps, 10_000, &mut rng_from(4, &[])).unwrap();
    let mut mean = vec![0.0; d];
    for p in &draws {
        let delta: Vec<f64> = p.row(0).iter().zip(x.row(0)).map(|(a, b)| a - b).collect();
        let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - eps).abs() <= 1e-9, "radius {norm}");
        for (m, v) in mean.iter_mut().zip(&delta) {
            *m += v / eps / draws.len() as f64;
        }
    }
    let bound = 4.0 / (10_000.0 * d as f64).sqrt();
    for m in mean {
        assert!(m.abs() <= bound, "direction mean {m} exceeds {bound}");
    }
}

#[test]
fn constant_network_has_zero_loss_and_zero_md() {
    let (mut model, x) = random_net(7);
    for (i, t) in model.params.tensors.iter_mut().enumerate() {
        if i % 2 == 0 {
            *t = Tensor::zeros(t.shape());
        }
    }
    let c = cfg(0.5, 3, 1.0);
    assert_eq!(nsloss(&model, &x, &c, &mut rng_from(1, &[])).unwrap(), 0.0);
}

fn trace_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (1usize..4, 1usize..5).prop_flat_map(|(b, w)| {
        (
            prop::collection::vec(-2.0f64..2.0, b * w),
            prop::collection::vec(-2.0f64..2.0, b * w),
            Just(w),
        )
    })
}

fn trace_of(data: &[f64], w: usize) -> ActivationTrace {
    ActivationTrace::new(vec![Tensor::new(vec![data.len() / w, w], data.to_vec()).unwrap()]).unwrap()
}

proptest! {
    #[test]
    fn loss_vanishes_exactly_when_md_does((clean, pert, w) in trace_strategy(), same in any::<bool>()) {
        let pert = if same { clean.clone() } else { pert };
        let stats = SensitivityStats::from_traces(&trace_of(&clean, w), &[trace_of(&pert, w)], 0.3).unwrap();
        let md_zero = stats.layers.iter().all(|l| l.md.iter().all(|&v| v == 0.0));
        prop_assert_eq!(stats.nsloss() == 0.0, md_zero);
    }

    #[test]
    fn ns_is_invariant_to_activation_scale((clean, pert, w) in trace_strategy(), c in 0.01f64..100.0) {
        let base = SensitivityStats::from_traces(&trace_of(&clean, w), &[trace_of(&pert, w)], 0.3).unwrap();
        let scale = |v: &[f64]| v.iter().map(|a| a * c).collect::<Vec<_>>();
        let scaled = SensitivityStats::from_traces(
            &trace_of(&scale(&clean), w),
            &[trace_of(&scale(&pert), w)],
            0.3,
        )
        .unwrap();
        for ((a, b), &ma) in base.layers[0].ns.iter().zip(&scaled.layers[0].ns).zip(&base.layers[0].ma) {
            if ma > 0.0 {
                prop_assert!((a - b).abs() <= 1e-10 * a.abs(), "{} vs {}", a, b);
            }
        }
    }
}

#[test]
fn descent_on_nsloss_lowers_it() {
    for seed in 0..20 {
        let (model, x) = random_net(seed);
        let c = cfg(0.3, 3, 1.0);
        let (before, grads) = loss_and_grads(&model, &x, &c, 9, Aggregation::Weighted);
        if before == 0.0 {
            continue;
        }
        let norm2: f64 = grads.iter().map(|g| g * g).sum();
        let step = 1e-3 * before / norm2.max(1e-12);
        let mut moved = model.clone();
        let mut k = 0;
        for t in moved.params.tensors.iter_mut() {
            for v in t.data_mut() {
                *v -= step * grads[k];
                k += 1;
            }
        }
        let after = nsloss(&moved, &x, &c, &mut rng_from(9, &[])).unwrap();
        assert!(after < before, "net {seed}: {after} >= {before}");
    }
}

#[test]
fn zero_lambda_is_plain_cross_entropy() {
    let (model, x) = random_net(11);
    let classes = model.spec.num_classes;
    let labels: Vec<usize> = (0..x.rows()).map(|i| i % classes).collect();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let mut rng = rng_from(5, &[]);
    let tl = total_loss(&bound, &mut tape, &x, &labels, &cfg(0.3, 3, 0.0), &mut rng).unwrap();
    assert!(tl.nsloss.is_none());
    let g = tape.backward(tl.loss).unwrap();

    let mut tape2 = Tape::new();
    let bound2 = model.bind(&mut tape2, true);
    let xv = tape2.constant(x.clone());
    let logits = sensireg::ModelFn::forward(&bound2, &mut tape2, xv).unwrap();
    let ce = tape2.cross_entropy(logits, &labels).unwrap();
    let g2 = tape2.backward(ce).unwrap();

    assert_eq!(tape.value(tl.loss), tape2.value(ce));
    for (a, b) in bound.params.iter().zip(&bound2.params) {
        assert_eq!(g.get(*a), g2.get(*b));
    }
    assert_eq!(rng.random::<u64>(), rng_from(5, &[]).random::<u64>(), "no draws consumed");
}

#[test]
fn dead_model_is_already_insensitive() {
    let (mut model, x) = random_net(2);
    for t in model.params.tensors.iter_mut() {
        *t = Tensor::zeros(t.shape());
    }
    let err = select_lambda(&model, &[x], &cfg(0.3, 2, 0.0), 3, |_| Ok(0.0)).unwrap_err();
    assert!(matches!(err, Error::AlreadyInsensitive), "{err}");
}

#[test]
fn search_brackets_the_collapse_point() {
    let classes = 10;
    let limit = (classes as f64).log2();
    let lambda0 = 2.0;
    for critical in [0.8, 1.3, 2.0, 3.7, 6.0] {
        let mut calls = Vec::new();
        let (probes, best) = search_lambda(lambda0, classes, |l| {
            calls.push(l);
            Ok(if l < critical { limit * 0.5 } else { limit })
        })
        .unwrap();
        assert_eq!(probes.len(), LAMBDA_PROBES);
        assert_eq!(calls[0], lambda0);
        let (lo, hi) = (lambda0 / 10f64.sqrt(), lambda0 * 10f64.sqrt());
        assert!(calls.iter().all(|&l| l >= lo && l <= hi));
        assert!(best < critical);
        assert_eq!(best, probes.iter().filter(|p| p.accepted).map(|p| p.lambda).fold(0.0, f64::max));
        if critical < hi {
            let gap = (critical / best).ln();
            assert!(gap <= 10f64.ln() / (1u64 << LAMBDA_PROBES) as f64 + 1e-12, "gap {gap}");
        }
    }
    // Non-finite probe results are rejections.
    let (_, best) = search_lambda(1.0, 2, |l| Ok(if l > 1.0 { f64::NAN } else { 0.1 })).unwrap();
    assert_eq!(best, 1.0);
    assert!(matches!(
        search_lambda(1.0, 2, |_| Ok(f64::INFINITY)),
        Err(Error::LambdaSearch(_))
    ));
}
