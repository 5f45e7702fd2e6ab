#![allow(clippy::needless_range_loop)]

use super::*;
use crate::testutil::{central_diff, fd_max_rel_err};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn seq(t: &[u32]) -> TokenSequence {
    TokenSequence::from_raw(t.to_vec())
}

fn cfg(v: usize, l: usize, d: usize) -> PolicyConfig {
    PolicyConfig::new(v, l, d).unwrap()
}

/// Independent evaluation of the per-position distribution: explicit loops
/// and a plain exp/sum softmax.
fn oracle_probs(p: &PolicyParams, x: &[u32], t: usize) -> Vec<f64> {
    let c = p.config();
    let (v, d) = (c.vocab_size, c.dim);
    let mut h = vec![0.0; d];
    for j in 0..d {
        let mut s = 0.0;
        for &tok in x {
            s += p.input_embed()[tok as usize * d + j];
        }
        let ctx = if x.is_empty() { 0.0 } else { s / x.len() as f64 };
        h[j] = ctx + p.pos_embed()[t * d + j];
    }
    let mut logits = vec![0.0; v];
    for k in 0..v {
        logits[k] = p.output_bias()[k];
        for j in 0..d {
            logits[k] += h[j] * p.output_proj()[j * v + k];
        }
    }
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    logits.iter().map(|l| l.exp() / z).collect()
}

#[test]
fn context_of_singleton_is_its_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = PolicyParams::random(cfg(6, 3, 4), 0.5, &mut rng);
    let ctx = context_encode(&p, &seq(&[2])).unwrap();
    assert_eq!(ctx, p.input_embed()[8..12].to_vec());
}

#[test]
fn context_of_empty_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = PolicyParams::random(cfg(6, 3, 4), 0.5, &mut rng);
    assert_eq!(context_encode(&p, &seq(&[])).unwrap(), vec![0.0; 4]);
}

#[test]
fn context_of_pair_is_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = PolicyParams::random(cfg(6, 3, 4), 0.5, &mut rng);
    let ctx = context_encode(&p, &seq(&[1, 4])).unwrap();
    for j in 0..4 {
        let expect = (p.input_embed()[4 + j] + p.input_embed()[16 + j]) / 2.0;
        assert!((ctx[j] - expect).abs() < 1e-15);
    }
    assert!(context_encode(&p, &seq(&[6])).is_err());
}

#[test]
fn zero_params_give_uniform() {
    let p = PolicyParams::zeros(cfg(20, 5, 3));
    let logits = step_logits(&p, &[0.0; 3], 2).unwrap();
    assert_eq!(logits, vec![0.0; 20]);
    for q in softmax(&logits) {
        assert!((q - 0.05).abs() < 1e-15);
    }
    assert!(matches!(
        step_logits(&p, &[0.0; 3], 5),
        Err(PolicyError::PositionOutOfRange { .. })
    ));
}

#[test]
fn bias_only_logits_equal_bias() {
    let mut p = PolicyParams::zeros(cfg(5, 3, 2));
    p.output_bias_mut().copy_from_slice(&[0.1, -0.2, 0.7, 0.0, 0.3]);
    for t in 0..3 {
        assert_eq!(step_logits(&p, &[0.0; 2], t).unwrap(), p.output_bias().to_vec());
    }
}

#[test]
fn softmax_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = PolicyParams::random(cfg(7, 4, 3), 0.3, &mut rng);
    let x = [0u32, 3, 5];
    let lp = position_log_probs(&p, &seq(&x), 4).unwrap();
    for t in 0..4 {
        let o = oracle_probs(&p, &x, t);
        for k in 0..7 {
            assert!((lp[t][k].exp() - o[k]).abs() < 1e-14);
        }
    }
}

#[test]
fn uniform_logprob() {
    let p = PolicyParams::zeros(cfg(20, 5, 3));
    let lp = logprob(&p, &seq(&[0, 1]), &seq(&[3, 7, 19])).unwrap();
    assert!((lp - 3.0 * (1.0f64 / 20.0).ln()).abs() < 1e-12);
    assert!((lp + 8.987196820661973).abs() < 1e-12);
    assert_eq!(logprob(&p, &seq(&[0]), &seq(&[])).unwrap(), 0.0);
    assert!(matches!(
        logprob(&p, &seq(&[0]), &seq(&[0; 6])),
        Err(PolicyError::TooLong { .. })
    ));
}

#[test]
fn logprob_matches_distribution_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let p = PolicyParams::random(cfg(9, 4, 3), 0.8, &mut rng);
        let x: Vec<u32> = (0..3).map(|_| rng.random_range(0..9)).collect();
        let y: Vec<u32> = (0..4).map(|_| rng.random_range(0..9)).collect();
        let expect: f64 = y
            .iter()
            .enumerate()
            .map(|(t, &tok)| oracle_probs(&p, &x, t)[tok as usize].ln())
            .sum();
        assert!((logprob(&p, &seq(&x), &seq(&y)).unwrap() - expect).abs() < 1e-12);
    }
}

fn all_sequences(v: u32, l: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for _ in 0..l {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..v).map(move |t| {
                    let mut s2 = s.clone();
                    s2.push(t);
                    s2
                })
            })
            .collect();
    }
    out
}

#[test]
fn sequence_probabilities_normalise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (v, l) in [(2, 1), (3, 2), (4, 3), (3, 3)] {
        let p = PolicyParams::random(cfg(v, l, 2), 1.0, &mut rng);
        let x = seq(&[0, (v - 1) as u32]);
        let total: f64 = all_sequences(v as u32, l)
            .iter()
            .map(|y| logprob(&p, &x, &seq(y)).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-10, "v={v} l={l} total={total}");
    }
}

#[test]
fn greedy_on_bias_only_repeats_argmax() {
    let mut p = PolicyParams::zeros(cfg(5, 4, 2));
    p.output_bias_mut().copy_from_slice(&[0.1, 0.9, 0.9, -1.0, 0.3]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = sample(&p, &seq(&[0]), &mut rng, 0.0, 1.0).unwrap();
    assert_eq!(y.tokens(), &[1, 1, 1, 1]);
    assert_eq!(greedy(&p, &seq(&[0])).unwrap(), y);
}

#[test]
fn greedy_is_per_position_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = PolicyParams::random(cfg(8, 5, 3), 1.0, &mut rng);
    let x = seq(&[1, 2]);
    let lp = position_log_probs(&p, &x, 5).unwrap();
    let expect: Vec<u32> = lp
        .iter()
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter().position(|&q| q == m).unwrap() as u32
        })
        .collect();
    assert_eq!(greedy(&p, &x).unwrap().tokens(), expect.as_slice());
}

#[test]
fn sampling_frequencies_match_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = PolicyParams::random(cfg(6, 2, 3), 0.7, &mut rng);
    let x = seq(&[0, 1]);
    let lp = position_log_probs(&p, &x, 2).unwrap();
    let n = 100_000;
    let mut counts = [[0usize; 6]; 2];
    for _ in 0..n {
        let y = sample(&p, &x, &mut rng, 1.0, 1.0).unwrap();
        for (t, &tok) in y.tokens().iter().enumerate() {
            counts[t][tok as usize] += 1;
        }
    }
    for t in 0..2 {
        for k in 0..6 {
            let q = lp[t][k].exp();
            let se = (q * (1.0 - q) / n as f64).sqrt();
            let freq = counts[t][k] as f64 / n as f64;
            assert!((freq - q).abs() < 3.0 * se, "t={t} k={k} freq={freq} q={q}");
        }
    }
}

#[test]
fn sampling_is_deterministic_per_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = PolicyParams::random(cfg(10, 5, 3), 1.0, &mut rng);
    let draw = || {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        (0..10)
            .map(|_| sample(&p, &seq(&[1]), &mut r, 1.0, 0.9).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(), draw());
}

#[test]
fn tiny_nucleus_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = PolicyParams::random(cfg(10, 5, 3), 1.0, &mut rng);
    let x = seq(&[2]);
    let g = greedy(&p, &x).unwrap();
    for _ in 0..50 {
        assert_eq!(sample(&p, &x, &mut rng, 1.0, 1e-9).unwrap(), g);
    }
}

#[test]
fn nucleus_renormalises_over_kept_tokens() {
    let probs = [0.5, 0.3, 0.15, 0.05];
    assert_eq!(draw_nucleus(&probs, 0.8, 0.0), 0);
    assert_eq!(draw_nucleus(&probs, 0.8, 0.99), 1);
    assert_eq!(draw_nucleus(&probs, 1.0, 0.99), 3);
}

#[test]
fn invalid_sampling_settings() {
    let p = PolicyParams::zeros(cfg(3, 2, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (t, q) in [(-1.0, 1.0), (1.0, 0.0), (1.0, 1.5), (f64::NAN, 1.0)] {
        assert!(matches!(
            sample(&p, &seq(&[]), &mut rng, t, q),
            Err(PolicyError::InvalidSampling { .. })
        ));
    }
}

#[test]
fn grad_logprob_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..10 {
        let p = PolicyParams::random(cfg(7, 4, 3), 0.6, &mut rng);
        let x = seq(&[0, 2, 2, 5]);
        let y: Vec<u32> = (0..4).map(|_| rng.random_range(0..7)).collect();
        let y = seq(&y);
        let g = grad_logprob(&p, &x, &y).unwrap();
        let f = |q: &PolicyParams| logprob(q, &x, &y).unwrap();
        assert!(fd_max_rel_err(&f, &p, &g, 20, &mut rng) < 1e-5);
    }
}

#[test]
fn grad_of_empty_rewrite_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = PolicyParams::random(cfg(7, 4, 3), 0.6, &mut rng);
    let g = grad_logprob(&p, &seq(&[1]), &seq(&[])).unwrap();
    assert!(g.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn bias_gradient_is_onehot_minus_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = PolicyParams::random(cfg(6, 3, 2), 0.6, &mut rng);
    let x = seq(&[4, 1]);
    let y = seq(&[2, 2, 5]);
    let g = grad_logprob(&p, &x, &y).unwrap();
    let mut expect = [0.0; 6];
    for (t, &tok) in y.tokens().iter().enumerate() {
        let q = oracle_probs(&p, &[4, 1], t);
        for k in 0..6 {
            expect[k] += f64::from(k as u32 == tok) - q[k];
        }
    }
    for k in 0..6 {
        assert!((g.output_bias()[k] - expect[k]).abs() < 1e-12);
    }
}

#[test]
fn sft_loss_on_uniform_policy() {
    let p = PolicyParams::zeros(cfg(20, 5, 3));
    let batch: Vec<SftExample> = (0..4)
        .map(|i| SftExample {
            x: seq(&[i]),
            y_target: seq(&[i, i + 1, i + 2]),
        })
        .collect();
    let (loss, _) = sft_loss_and_grad(&p, &batch).unwrap();
    assert!((loss - 3.0 * 20f64.ln()).abs() < 1e-12);
    assert!(matches!(sft_loss_and_grad(&p, &[]), Err(PolicyError::EmptyBatch)));
}

#[test]
fn sft_loss_of_single_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = PolicyParams::random(cfg(8, 4, 3), 0.5, &mut rng);
    let ex = SftExample {
        x: seq(&[1, 3]),
        y_target: seq(&[0, 5, 5, 7]),
    };
    let (loss, grad) = sft_loss_and_grad(&p, std::slice::from_ref(&ex)).unwrap();
    assert_eq!(loss, -logprob(&p, &ex.x, &ex.y_target).unwrap());
    assert!(loss >= 0.0);
    let mut expect = grad_logprob(&p, &ex.x, &ex.y_target).unwrap();
    expect.scale(-1.0);
    assert!(grad.max_abs_diff(&expect) < 1e-15);
}

#[test]
fn sft_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = PolicyParams::random(cfg(8, 4, 3), 0.5, &mut rng);
    let batch: Vec<SftExample> = (0..3)
        .map(|_| SftExample {
            x: seq(&[rng.random_range(0..8), rng.random_range(0..8)]),
            y_target: seq(&(0..4).map(|_| rng.random_range(0..8)).collect::<Vec<_>>()),
        })
        .collect();
    let (_, g) = sft_loss_and_grad(&p, &batch).unwrap();
    let f = |q: &PolicyParams| sft_loss_and_grad(q, &batch).unwrap().0;
    assert!(fd_max_rel_err(&f, &p, &g, 40, &mut rng) < 1e-5);
    let _ = central_diff(&f, &p, 0, 1e-5);
}

#[test]
fn sft_memorises_a_single_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let init = PolicyParams::random(cfg(20, 5, 8), 0.1, &mut rng);
    let ex = SftExample {
        x: seq(&[0, 1, 2, 3, 12]),
        y_target: seq(&[0, 1, 2, 5, 5]),
    };
    let cfg = SftConfig {
        epochs: 200,
        batch_size: 1,
        ..SftConfig::default()
    };
    let out = sft_train(&init, std::slice::from_ref(&ex), &cfg, &mut rng).unwrap();
    let lp = logprob(&out.params, &ex.x, &ex.y_target).unwrap();
    assert!(lp > 0.9f64.ln() * 5.0, "logprob {lp}");
    assert_eq!(out.epoch_losses.len(), 200);
}

#[test]
fn sft_with_zero_lr_is_a_no_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let init = PolicyParams::random(cfg(10, 3, 4), 0.1, &mut rng);
    let corpus = vec![
        SftExample {
            x: seq(&[0]),
            y_target: seq(&[1, 2, 3]),
        };
        5
    ];
    let cfg = SftConfig {
        lr: 0.0,
        ..SftConfig::default()
    };
    let out = sft_train(&init, &corpus, &cfg, &mut rng).unwrap();
    assert_eq!(out.params, init);
    assert!(matches!(
        sft_train(&init, &[], &cfg, &mut rng),
        Err(PolicyError::EmptyBatch)
    ));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let p = PolicyParams::random(cfg(9, 4, 3), 1e-3, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    p.save(&path).unwrap();
    let back = PolicyParams::load(&path).unwrap();
    assert_eq!(
        back.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        p.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    let json = PolicyCheckpoint::from_params(&p).to_json();
    assert!(json.starts_with("{\"version\":1,\"config\":{\"vocab_size\":9,\"max_len\":4,\"dim\":3}"));
    let mut ck = PolicyCheckpoint::from_json(&json).unwrap();
    ck.output_bias.pop();
    assert!(ck.into_params().is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn checkpoint_json_is_lossless(vals in proptest::collection::vec(-1e6f64..1e6, 2 * 3 + 2 * 3 + 3 * 2 + 2)) {
            let c = cfg(2, 2, 3);
            let p = PolicyParams::from_parts(c, &vals[..6], &vals[6..12], &vals[12..18], &vals[18..]).unwrap();
            let back = PolicyCheckpoint::from_json(&PolicyCheckpoint::from_params(&p).to_json()).unwrap().into_params().unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn sft_loss_is_non_negative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = PolicyParams::random(cfg(5, 3, 2), 2.0, &mut rng);
            let ex = SftExample { x: seq(&[1]), y_target: seq(&[rand::Rng::random_range(&mut rng, 0..5), 0, 4]) };
            prop_assert!(sft_loss_and_grad(&p, &[ex]).unwrap().0 >= 0.0);
        }
    }
}
