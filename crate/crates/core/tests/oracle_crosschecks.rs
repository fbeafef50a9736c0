//! The main pipeline against the scalar reference implementations.

use ndarray::{Array2, Array3, Array4, Axis};
use php_av::attention::MultiHeadAttention;
use php_av::gru::GruCell;
use php_av::heads::{argmax, contrastive_loss, l2_normalize, Mlp2};
use php_av::oracles::{
    brute_argmax, finite_diff_grad, naive_attention, naive_channel_gate, naive_contrastive,
    naive_fuse, naive_gru_step, naive_mlp, naive_softmax_mix, Matrix, NaiveAttentionWeights,
};
use php_av::tensor::normal;
use php_av::tma::{TmaDims, TmaParams};
use php_av::tmdg::{generate, TmdgConfig, TmdgTask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn to_matrix(a: &Array2<f64>) -> Matrix {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn quadratic_gradient_is_exact() {
    let r = finite_diff_grad("x", &[1.0, 2.0], &[1.0, 2.0], 1e-4, |x| {
        0.5 * (x[0] * x[0] + x[1] * x[1])
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-8);
    assert!(finite_diff_grad("x", &[1.0], &[0.0], 1e-4, |_| f64::NAN).is_err());
}

#[test]
fn attention_matches_scalar_reference_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..50 {
        let heads = [1, 2, 4][case % 3];
        let d = 4 * heads;
        let n = 1 + case % 7;
        let mut mha = MultiHeadAttention::<f64>::new(&mut rng, d, heads).unwrap();
        mha.b_q = normal(&mut rng, d, 0.3);
        mha.b_v = normal(&mut rng, d, 0.3);
        mha.b_o = normal(&mut rng, d, 0.3);
        let x: Array3<f64> = normal(&mut rng, (1, n, d), 1.0);
        let (out, cache) = mha.forward(x.view()).unwrap();
        let mut b_qkv = mha.b_q.to_vec();
        b_qkv.extend(std::iter::repeat_n(0.0, d));
        b_qkv.extend(mha.b_v.iter());
        let w = NaiveAttentionWeights {
            w_qkv: to_matrix(&mha.w_qkv),
            b_qkv,
            w_o: to_matrix(&mha.w_o),
            b_o: mha.b_o.to_vec(),
            heads,
        };
        let tokens = to_matrix(&x.index_axis(Axis(0), 0).to_owned());
        let (reference, probs) = naive_attention(&tokens, &w);
        let got = to_matrix(&out.index_axis(Axis(0), 0).to_owned());
        assert!(max_abs_diff(&got, &reference) < 1e-6, "case {case}");
        for (h, ph) in probs.iter().enumerate() {
            for (i, row) in ph.iter().enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (j, p) in row.iter().enumerate() {
                    assert!((cache.probs()[[h, i, j]] - p).abs() < 1e-9);
                }
            }
        }
    }
}

fn tma_instance(seed: u64) -> (TmaParams<f64>, Array4<f64>, Array4<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = TmaDims {
        video_channels: 5,
        audio_channels: 3,
        video_positions: 4,
        audio_positions: 6,
        rnn_hidden: 4,
    };
    let mut p = TmaParams::new(&mut rng, dims);
    p.alpha = rng.random_range(0.0..1.0);
    p.beta = rng.random_range(0.0..1.0);
    p.gamma = rng.random_range(0.0..1.0);
    let v = normal(&mut rng, (2, 3, 4, 5), 1.0);
    let a = normal(&mut rng, (2, 3, 6, 3), 1.0);
    (p, v, a)
}

#[test]
fn attention_maps_lie_in_open_unit_interval() {
    for seed in 0..20 {
        let (p, v, a) = tma_instance(seed);
        let maps = p.attention_maps(v.view(), a.view()).unwrap();
        assert!(maps.in_open_unit_interval(), "seed {seed}");
        let mut big = v.clone();
        big.mapv_inplace(|x| x * 1e3);
        assert!(p
            .attention_maps(big.view(), a.view())
            .unwrap()
            .iter()
            .all(|(_, m)| m.iter().all(|x| x.is_finite())));
    }
}

#[test]
fn fusion_matches_triple_loop() {
    for seed in 0..10 {
        let (p, v, a) = tma_instance(seed);
        let maps = p.attention_maps(v.view(), a.view()).unwrap();
        let (fv, fa) = p.fuse(v.view(), a.view(), &maps, false);
        let coef = (p.alpha, p.beta, p.gamma);
        for b in 0..2 {
            let block = |x: &Array4<f64>| -> Vec<Matrix> {
                x.index_axis(Axis(0), b)
                    .outer_iter()
                    .map(|t| to_matrix(&t.to_owned()))
                    .collect()
            };
            let want_v = naive_fuse(
                &block(&v),
                &maps.m_vc.row(b).to_vec(),
                &maps.m_vs.row(b).to_vec(),
                &maps.m_vt.row(b).to_vec(),
                coef,
            );
            let want_a = naive_fuse(
                &block(&a),
                &maps.m_ac.row(b).to_vec(),
                &maps.m_as.row(b).to_vec(),
                &maps.m_at.row(b).to_vec(),
                coef,
            );
            for (got, want) in [(block(&fv), want_v), (block(&fa), want_a)] {
                for (g, w) in got.iter().zip(&want) {
                    assert!(max_abs_diff(g, w) < 1e-6);
                }
            }
        }
    }
}

#[test]
fn channel_gate_and_recurrence_match_references() {
    let (p, v, a) = tma_instance(3);
    let (m_vc, _) = p.channel_attention(v.view(), a.view()).unwrap();
    let a_bar: Vec<f64> = (0..3)
        .map(|c| {
            a.index_axis(Axis(0), 0)
                .index_axis(Axis(2), c)
                .mean()
                .unwrap()
        })
        .collect();
    let want = naive_channel_gate(&to_matrix(&p.w_v), &to_matrix(&p.delta_v), &a_bar);
    for (g, w) in m_vc.row(0).iter().zip(&want) {
        assert!((g - w).abs() < 1e-9);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cell = GruCell::<f64>::new(&mut rng, 3, 4);
    let x: Array3<f64> = normal(&mut rng, (1, 4, 3), 1.0);
    let (h, _) = cell.forward(x.view()).unwrap();
    let mut prev = vec![0.0; 4];
    for t in 0..4 {
        let step = naive_gru_step(
            &x.slice(ndarray::s![0, t, ..]).to_vec(),
            &prev,
            &to_matrix(&cell.w_ih),
            &to_matrix(&cell.w_hh),
            &cell.b_ih.to_vec(),
            &cell.b_hh.to_vec(),
        );
        for (g, w) in h.slice(ndarray::s![0, t, ..]).iter().zip(&step) {
            assert!((g - w).abs() < 1e-9);
        }
        prev = step;
    }
}

#[test]
fn generated_prompts_are_convex_combinations_of_the_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = TmdgConfig {
        pool_size: 6,
        prompt_len: 3,
        heads: 1,
    };
    let task = TmdgTask::<f64>::new(&mut rng, "t", &cfg, 8);
    let summary: Array2<f64> = normal(&mut rng, (4, 8), 3.0);
    let (g, cache) = generate(summary.view(), &task).unwrap();
    for (b, w) in cache.weights().outer_iter().enumerate() {
        for row in w.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
        let logits = task.delta_s.dot(&summary.row(b));
        let (ref_w, ref_g) = naive_softmax_mix(&logits.to_vec(), 3, &to_matrix(&task.pool.prompts));
        assert!(max_abs_diff(&to_matrix(&w.to_owned()), &ref_w) < 1e-9);
        assert!(max_abs_diff(&to_matrix(&g.index_axis(Axis(0), b).to_owned()), &ref_g) < 1e-9);
    }
}

#[test]
fn heads_mlp_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mlp = Mlp2::<f64>::new(&mut rng, 6, 5);
    let x: Array2<f64> = normal(&mut rng, (7, 6), 1.0);
    let (y, _) = mlp.forward(x.view()).unwrap();
    for (i, row) in x.rows().into_iter().enumerate() {
        let want = naive_mlp(
            &row.to_vec(),
            &to_matrix(&mlp.w1),
            &mlp.b1.to_vec(),
            &to_matrix(&mlp.w2),
            &mlp.b2.to_vec(),
        );
        for (g, w) in y.row(i).iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn contrastive_loss_and_argmax_match_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in 1..6 {
        let f = l2_normalize(normal::<f64, _, _, _>(&mut rng, (n, 4), 1.0)).0;
        let t = l2_normalize(normal::<f64, _, _, _>(&mut rng, (n, 4), 1.0)).0;
        let tau: f64 = rng.random_range(0.05..1.0);
        let (loss, _) = contrastive_loss(f.view(), t.view(), tau.ln()).unwrap();
        assert!((loss - naive_contrastive(&to_matrix(&f), &to_matrix(&t), tau)).abs() < 1e-9);
    }
    for _ in 0..200 {
        let k = rng.random_range(2..9);
        let scores: Vec<f64> = (0..k)
            .map(|_| (rng.random_range(0..4) as f64) * 0.5)
            .collect();
        assert_eq!(
            argmax(ndarray::ArrayView1::from(&scores)),
            brute_argmax(&scores)
        );
    }
}
