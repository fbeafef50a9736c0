mod common;

use common::{check_model_gradients, micro_instance, GRAD_H, GRAD_TOL};
use php_av::model::ComponentSet;

#[test]
fn full_model_gradients_match_finite_differences() {
    let (model, batch) = micro_instance(ComponentSet::all());
    let reports = check_model_gradients(&model, &batch, true);
    let mut worst = reports
        .iter()
        .map(|r| (r.max_rel_err, r.param_name.as_str()))
        .collect::<Vec<_>>();
    worst.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (e, n) in worst.iter().take(8) {
        eprintln!("{n}: {e:.3e}");
    }
    let prefixes = [
        "tma.layer0.alpha",
        "tma.layer0.rnn_a",
        "tmdg.task.t.pool",
        "tmdg.task.t.delta_s",
        "tmdg.summarizer",
        "tmi.task.t.layer2.video",
        "heads.t.mlp_v",
        "temperature.log_tau_v",
    ];
    for p in prefixes {
        assert!(
            reports.iter().any(|r| r.param_name.starts_with(p)),
            "no gradient reported for {p}"
        );
    }
    for r in &reports {
        assert!(
            r.passes(GRAD_TOL),
            "{}: {:.3e}",
            r.param_name,
            r.max_rel_err
        );
    }
}

fn assert_all_pass(components: &str, expect: &[&str]) {
    let (model, batch) = micro_instance(components.parse().unwrap());
    let reports = check_model_gradients(&model, &batch, false);
    for p in expect {
        assert!(
            reports.iter().any(|r| r.param_name.starts_with(p)),
            "{components}: no gradient for {p}"
        );
    }
    for r in &reports {
        assert!(
            r.passes(GRAD_TOL),
            "{components} {}: {:.3e}",
            r.param_name,
            r.max_rel_err
        );
    }
}

#[test]
fn tma_alone() {
    assert_all_pass(
        "TMA",
        &[
            "tma.layer0.alpha",
            "tma.layer0.beta",
            "tma.layer0.gamma",
            "tma.layer0.rnn_v.w_hh",
            "tma.layer0.psi_a",
        ],
    );
}

#[test]
fn tmdg_alone() {
    assert_all_pass("TMDG", &["tmdg.task.t.pool", "tmdg.task.t.delta_s"]);
}

#[test]
fn tmi_alone() {
    assert_all_pass(
        "TMI",
        &["tmi.task.t.layer2.video", "tmi.task.t.layer2.audio"],
    );
}

#[test]
fn heads_and_temperatures_alone() {
    assert_all_pass(
        "none",
        &[
            "heads.t.mlp_v.w1",
            "heads.t.mlp_ta.b2",
            "temperature.log_tau_v",
            "temperature.log_tau_a",
        ],
    );
}

#[test]
fn contrastive_loss_gradients() {
    use php_av::heads::{contrastive_loss, contrastive_loss_backward, l2_normalize};
    use php_av::oracles::finite_diff_grad;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let f = l2_normalize(php_av::tensor::normal::<f64, _, _, _>(
        &mut rng,
        (4, 3),
        1.0,
    ))
    .0;
    let t = l2_normalize(php_av::tensor::normal::<f64, _, _, _>(
        &mut rng,
        (4, 3),
        1.0,
    ))
    .0;
    let lt = 0.07f64.ln();
    let (_, cache) = contrastive_loss(f.view(), t.view(), lt).unwrap();
    let (df, dt, dl) = contrastive_loss_backward(&cache, f.view(), t.view(), lt, 1.0);
    let shape = f.raw_dim();
    let loss = |f: &[f64], t: &[f64], lt: f64| {
        let f = ndarray::Array2::from_shape_vec(shape.clone(), f.to_vec()).unwrap();
        let t = ndarray::Array2::from_shape_vec(shape.clone(), t.to_vec()).unwrap();
        contrastive_loss(f.view(), t.view(), lt).unwrap().0
    };
    let (fv, tv) = (
        f.iter().copied().collect::<Vec<_>>(),
        t.iter().copied().collect::<Vec<_>>(),
    );
    let r = finite_diff_grad(
        "F",
        &fv,
        &df.iter().copied().collect::<Vec<_>>(),
        GRAD_H,
        |x| loss(x, &tv, lt),
    )
    .unwrap();
    assert!(r.passes(GRAD_TOL), "{}", r.max_rel_err);
    let r = finite_diff_grad(
        "T",
        &tv,
        &dt.iter().copied().collect::<Vec<_>>(),
        GRAD_H,
        |x| loss(&fv, x, lt),
    )
    .unwrap();
    assert!(r.passes(GRAD_TOL), "{}", r.max_rel_err);
    let r = finite_diff_grad("log_tau", &[lt], &[dl], GRAD_H, |x| loss(&fv, &tv, x[0])).unwrap();
    assert!(r.passes(GRAD_TOL), "{}", r.max_rel_err);
}
