//! Statistical estimator properties: relaxation bias decay, Monte Carlo
//! agreement of the Taylor and pathwise control variates, and paired
//! variance of the relaxed control variate.

use std::collections::BTreeMap;

use bpq_core::approx::QApproximator;
use bpq_core::dist::DistributionSpec;
use bpq_core::estimators::{
    cv_reparam, cv_reparam_relaxed, q_control_variate, q_soft_extension, reinforce,
    relaxed_reparam, taylor_cv, TaylorTarget,
};
use bpq_core::model::{CostId, NodeId, ScgModel, ValidatedScg};
use bpq_core::quad;
use bpq_core::rng::RngContext;
use bpq_core::sample::{ancestral_sample_with, ForcedDraw, NodePlan, SamplePlan};
use bpq_core::scope::ScopeSet;
use bpq_core::{Expr, Value};

fn coin(theta: f64) -> ValidatedScg {
    ScgModel::new()
        .param("p", vec![theta])
        .stochastic(
            "x",
            &[],
            DistributionSpec::Bernoulli {
                prob: Expr::param("p"),
            },
        )
        .cost("f", &["x"], Expr::node("x"))
        .validate()
        .unwrap()
}

/// Exact mean of the relaxed pathwise estimator at one temperature, by
/// quadrature over the single uniform draw. The estimator is smooth in
/// the noise, so one Gauss-Legendre rule suffices.
fn relaxed_grad_exact(scg: &ValidatedScg, temperature: f64) -> f64 {
    let plan = SamplePlan::plain().with("x", NodePlan::Relaxed { temperature });
    let (us, ws) = quad::gauss_legendre_on(96, 0.0, 1.0);
    let mut total = 0.0;
    for (&u, &w) in us.iter().zip(&ws) {
        let mut source = ForcedDraw::new(RngContext::new(0));
        source.force_noise("x", vec![u]);
        let tr =
            bpq_core::sample::sample_with_source(scg, scg.params(), &plan, &mut source, 0).unwrap();
        let fid = tr.cost_ids[&CostId::from("f")];
        let s = relaxed_reparam(&tr, &NodeId::from("x"), fid).unwrap();
        total += w * tr.tape.backward_scalar(s.objective)["p"][0];
    }
    total
}

#[test]
fn relaxation_bias_shrinks_with_temperature() {
    // Linear cost on a coin: the analytic gradient is 1. The relaxed
    // pathwise estimator is biased, with the bias vanishing as the
    // temperature drops.
    let scg = coin(0.3);
    let biases: Vec<f64> = [1.0, 0.5, 0.1]
        .iter()
        .map(|&t| (relaxed_grad_exact(&scg, t) - 1.0).abs())
        .collect();
    assert!(
        biases[0] >= biases[1] - 1e-9 && biases[1] >= biases[2] - 1e-9,
        "bias sequence {biases:?}"
    );
    assert!(biases[2] < biases[0], "bias actually decreases: {biases:?}");

    // Monte Carlo at the low temperature lands within 0.05 of 1.
    let plan = SamplePlan::plain().with("x", NodePlan::Relaxed { temperature: 0.1 });
    let base = RngContext::new(2025);
    let n = 40_000u64;
    let mut mean = 0.0;
    for i in 0..n {
        let tr = ancestral_sample_with(&scg, scg.params(), &base.at_step(i), &plan).unwrap();
        let fid = tr.cost_ids[&CostId::from("f")];
        let s = relaxed_reparam(&tr, &NodeId::from("x"), fid).unwrap();
        mean += tr.tape.backward_scalar(s.objective)["p"][0];
    }
    mean /= n as f64;
    assert!((mean - 1.0).abs() < 0.05, "low-temperature estimate {mean}");
}

#[test]
fn trained_relaxed_control_variate_beats_plain_score() {
    // Paired-seed variance: the relaxed control variate built from the
    // exact surrogate table beats the plain score estimator.
    let scg = coin(0.4);
    let scope: ScopeSet = [NodeId::from("x")].into_iter().collect();
    let mut q = QApproximator::tabular(&scg, &NodeId::from("x"), &scope).unwrap();
    // exact table: Q(x) = f(x) = x
    {
        let mut a = BTreeMap::new();
        a.insert(NodeId::from("x"), Value::Scalar(1.0));
        let g = q.eval_grad(&a).unwrap().1;
        q.apply_step(1.0, 1.0, &g);
    }
    let plan = SamplePlan::plain().with("x", NodePlan::RelaxedPair { temperature: 0.5 });
    let base = RngContext::new(909);
    let n = 10_000u64;
    let (mut rf, mut cv) = (Vec::new(), Vec::new());
    for i in 0..n {
        let mut tr = ancestral_sample_with(&scg, scg.params(), &base.at_step(i), &plan).unwrap();
        let signal = tr.total_cost;
        let a = reinforce(&mut tr, &NodeId::from("x"), signal).unwrap();
        rf.push(tr.tape.backward_scalar(a.objective)["p"][0]);
        let relaxed = tr.relaxed[&NodeId::from("x")].clone();
        let z_post = relaxed.z_post.clone().unwrap();
        let lp = tr.log_prob_ids[&NodeId::from("x")];
        let c_post =
            q_soft_extension(&mut tr, &scg, &NodeId::from("x"), &q, &z_post.ids, 0.5).unwrap();
        let c_prior =
            q_soft_extension(&mut tr, &scg, &NodeId::from("x"), &q, &relaxed.z.ids, 0.5).unwrap();
        let c_post_value = tr.tape.value(c_post);
        let score = tr.tape.scale(lp, signal - c_post_value);
        let neg = tr.tape.neg(c_post);
        let partial = tr.tape.add(score, neg);
        let objective = tr.tape.add(partial, c_prior);
        cv.push(tr.tape.backward_scalar(objective)["p"][0]);
    }
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
    };
    let (v_rf, v_cv) = (var(&rf), var(&cv));
    assert!(v_cv < v_rf, "variance {v_cv} vs score {v_rf}");
    // and both remain unbiased around the analytic gradient 1
    let mean_cv = cv.iter().sum::<f64>() / cv.len() as f64;
    let se = (v_cv / cv.len() as f64).sqrt();
    assert!((mean_cv - 1.0).abs() < 4.0 * se + 1e-9, "mean {mean_cv}");
}

#[test]
fn taylor_on_a_gaussian_quadratic_matches_finite_differences() {
    // E[z^2] with z ~ N(mu, sigma): gradient 2 mu.
    let scg = ScgModel::new()
        .param("mu", vec![0.6])
        .stochastic(
            "z",
            &[],
            DistributionSpec::Gaussian {
                mean: Expr::param("mu"),
                scale: Expr::Const(0.9),
            },
        )
        .cost("f", &["z"], Expr::mul(Expr::node("z"), Expr::node("z")))
        .validate()
        .unwrap();
    let base = RngContext::new(31);
    let n = 60_000u64;
    let (mut sum, mut sq) = (0.0, 0.0);
    for i in 0..n {
        let mut tr =
            ancestral_sample_with(&scg, scg.params(), &base.at_step(i), &SamplePlan::plain())
                .unwrap();
        let signal = tr.total_cost;
        let s = taylor_cv(
            &mut tr,
            &scg,
            scg.params(),
            &NodeId::from("z"),
            signal,
            TaylorTarget::MeanFieldCosts,
        )
        .unwrap();
        let g = tr.tape.backward_scalar(s.objective)["mu"][0];
        sum += g;
        sq += g * g;
    }
    let mean = sum / n as f64;
    let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
    let h = 1e-5;
    let j = |mu: f64| mu * mu + 0.81;
    let fd = (j(0.6 + h) - j(0.6 - h)) / (2.0 * h);
    assert!(
        (mean - fd).abs() < 3.0 * se + 1e-9,
        "mean {mean}, oracle {fd}, se {se}"
    );
}

#[test]
fn pathwise_cv_is_unbiased_for_random_quadratics() {
    let scg = ScgModel::new()
        .param("mu", vec![0.3])
        .stochastic(
            "z",
            &[],
            DistributionSpec::Gaussian {
                mean: Expr::param("mu"),
                scale: Expr::Const(0.7),
            },
        )
        .cost("f", &["z"], Expr::mul(Expr::node("z"), Expr::node("z")))
        .validate()
        .unwrap();
    let plan = SamplePlan::plain().with(
        "z",
        NodePlan::Pathwise {
            through_costs: false,
        },
    );
    // dJ/dmu of E[z^2] is 2 mu
    let want = 0.6;
    let mut coeff_stream = RngContext::new(8).stream("coeffs");
    for trial in 0..3 {
        let (a, b, c0) = (
            coeff_stream.uniform() * 2.0 - 1.0,
            coeff_stream.uniform() * 2.0 - 1.0,
            coeff_stream.uniform() * 2.0 - 1.0,
        );
        let base = RngContext::new(100 + trial);
        let n = 60_000u64;
        let (mut sum, mut sq) = (0.0, 0.0);
        for i in 0..n {
            let mut tr =
                ancestral_sample_with(&scg, scg.params(), &base.at_step(i), &plan).unwrap();
            let signal = tr.total_cost;
            let mut cv = |tape: &mut bpq_core::Tape, ids: &[bpq_core::TapeId]| {
                let z2 = tape.mul(ids[0], ids[0]);
                let t1 = tape.scale(z2, a);
                let t2 = tape.scale(ids[0], b);
                let t3 = tape.add(t1, t2);
                tape.add_const(t3, c0)
            };
            let s = cv_reparam(&mut tr, &NodeId::from("z"), signal, &mut cv).unwrap();
            let g = tr.tape.backward_scalar(s.objective)["mu"][0];
            sum += g;
            sq += g * g;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - want).abs() < 3.0 * se + 1e-9,
            "trial {trial} (a={a:.2}, b={b:.2}, c={c0:.2}): mean {mean}, se {se}"
        );
    }
}

#[test]
fn exact_surrogate_zeroes_the_score_coefficient() {
    // Deterministic downstream of z: the return equals Q(z) exactly, so
    // with scale 1 and shift 0 the score coefficient vanishes and the
    // entire estimator rides the pathwise term.
    let scg = ScgModel::new()
        .param("mu", vec![0.2])
        .stochastic(
            "z",
            &[],
            DistributionSpec::Gaussian {
                mean: Expr::param("mu"),
                scale: Expr::Const(1.0),
            },
        )
        .cost("f", &["z"], Expr::mul(Expr::node("z"), Expr::node("z")))
        .validate()
        .unwrap();
    let scope: ScopeSet = [NodeId::from("z")].into_iter().collect();
    let mut q = QApproximator::linear(&scg, &NodeId::from("z"), &scope).unwrap();
    // features [z, z^2, 1]: Q(z) = z^2
    q.weights_mut().copy_from_slice(&[0.0, 1.0, 0.0]);
    let plan = SamplePlan::plain().with(
        "z",
        NodePlan::Pathwise {
            through_costs: false,
        },
    );
    for seed in 0..20 {
        let mut tr =
            ancestral_sample_with(&scg, scg.params(), &RngContext::new(seed), &plan).unwrap();
        let r = tr.total_cost;
        let s = q_control_variate(&mut tr, &NodeId::from("z"), r, &q, 1.0, 0.0).unwrap();
        // the score term's value is coefficient * logp; the coefficient
        // is R - Q(z) = 0 up to rounding
        let lp = tr.log_probs[&NodeId::from("z")];
        let score_value = tr.tape.value(s.score.unwrap());
        assert!(
            score_value.abs() <= 1e-12 * lp.abs().max(1.0),
            "{score_value}"
        );
        // so the gradient is exactly the pathwise 2z
        let z = tr.values[&NodeId::from("z")].as_scalar().unwrap();
        let g = tr.tape.backward_scalar(s.objective)["mu"][0];
        assert!((g - 2.0 * z).abs() < 1e-10);
    }
}

#[test]
fn relaxed_pair_control_variate_is_exactly_unbiased_with_nonlinear_costs() {
    // Same construction the acceptance suite checks, at a second
    // temperature and cost to cover the operator more broadly.
    let theta = 0.55;
    let scg = ScgModel::new()
        .param("p", vec![theta])
        .stochastic(
            "x",
            &[],
            DistributionSpec::Bernoulli {
                prob: Expr::param("p"),
            },
        )
        .cost(
            "f",
            &["x"],
            Expr::add(
                Expr::mul(Expr::Const(2.0), Expr::node("x")),
                Expr::exp(Expr::node("x")),
            ),
        )
        .validate()
        .unwrap();
    // J = (1-p) + p (2 + e): dJ/dp = 1 + e
    let want = 1.0 + libm::exp(1.0);
    let plan = SamplePlan::plain().with("x", NodePlan::RelaxedPair { temperature: 0.3 });
    let (vs, wvs) = quad::gauss_legendre_on(48, 0.0, 1.0);
    let mut total = 0.0;
    for (ua, ub) in [(0.0, 1.0 - theta), (1.0 - theta, 1.0)] {
        let (us, wus) = quad::gauss_legendre_on(48, ua, ub);
        for (&u, &wu) in us.iter().zip(&wus) {
            for (&v, &wv) in vs.iter().zip(&wvs) {
                let mut source = ForcedDraw::new(RngContext::new(0));
                source.force_noise("x", vec![u, v]);
                let mut tr =
                    bpq_core::sample::sample_with_source(&scg, scg.params(), &plan, &mut source, 0)
                        .unwrap();
                let signal = tr.total_cost;
                let mut c = |tape: &mut bpq_core::Tape, ids: &[bpq_core::TapeId]| {
                    let s = tape.sigmoid(ids[0]);
                    let t = tape.scale(s, 2.4);
                    tape.add_const(t, 0.7)
                };
                let s = cv_reparam_relaxed(&mut tr, &NodeId::from("x"), signal, &mut c).unwrap();
                total += wu * wv * tr.tape.backward_scalar(s.objective)["p"][0];
            }
        }
    }
    assert!((total - want).abs() < 1e-8, "{total} vs {want}");
}
