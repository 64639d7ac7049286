mod common;

use common::{max_fd_rel_error, random_table_lm, toy_captioner, TableLm, EOS, PAD};
use dicolab::captioner::{
    beam_search, greedy_decode, sequence_log_prob, xe_loss, xe_loss_with_grad, Captioner, ConditionalLm,
};
use dicolab::objectives::{dico_loss, dico_loss_grad, scst_logp_coefficients, scst_loss, GroupLogProbs};
use dicolab::types::TokenId;
use dicolab::{Context, TokenSequence};

fn ctx() -> Context {
    Context::new("c0", vec![0.3, -0.2, 0.9], 3).unwrap()
}

fn seq(content: &[TokenId]) -> TokenSequence {
    TokenSequence::from_content(content, EOS)
}

fn uniform(n_words: usize, max_len: usize) -> TableLm {
    TableLm { vocab_size: n_words + 3, max_len, logits: Box::new(move |_| vec![0.0; n_words + 3]) }
}

/// Vocabulary {a = 3, b = 4} plus specials, hand-set logits, max_len 3.
fn two_word_lm() -> TableLm {
    TableLm {
        vocab_size: 5,
        max_len: 3,
        logits: Box::new(|prefix| match prefix {
            [] => vec![0.0, 0.2, 0.0, 1.0, -0.5],
            [3] => vec![0.0, 0.3, 0.0, -1.0, 0.7],
            [4] => vec![0.0, -0.2, 0.0, 0.4, 0.1],
            _ => vec![0.0; 5],
        }),
    }
}

/// Probability of `tok` among the allowed tokens `(eos, a, b)` with raw scores `s`.
fn softmax3(s: [f64; 3], tok: usize) -> f64 {
    let z: f64 = s.iter().map(|x| x.exp()).sum();
    s[tok].exp() / z
}

#[test]
fn uniform_model_log_prob_and_xe() {
    // 7 words + eos are emittable.
    let m = uniform(7, 6);
    let s = seq(&[3, 4]);
    let lp = sequence_log_prob(&m, &ctx(), &s).unwrap();
    assert!((lp - (-3.0 * 8f64.ln())).abs() < 1e-12);
    assert!((lp + 6.2383).abs() < 1e-4);
    assert!((xe_loss(&m, &ctx(), &s).unwrap() - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn deterministic_model_has_zero_loss() {
    let target = [5usize, 3, 4];
    let m = TableLm {
        vocab_size: 6,
        max_len: 6,
        logits: Box::new(move |prefix| {
            let next = target.get(prefix.len()).copied().unwrap_or(EOS);
            (0..6).map(|t| if t == next { 0.0 } else { f64::NEG_INFINITY }).collect()
        }),
    };
    let s = seq(&target);
    assert_eq!(sequence_log_prob(&m, &ctx(), &s).unwrap(), 0.0);
    assert_eq!(xe_loss(&m, &ctx(), &s).unwrap(), 0.0);
}

#[test]
fn two_word_log_probs_match_brute_force() {
    let m = two_word_lm();
    let first = [0.2, 1.0, -0.5];
    let after_a = [0.3, -1.0, 0.7];
    let after_b = [-0.2, 0.4, 0.1];
    let cases: [(&[TokenId], f64); 5] = [
        (&[], softmax3(first, 0)),
        (&[3], softmax3(first, 1) * softmax3(after_a, 0)),
        (&[3, 4], softmax3(first, 1) * softmax3(after_a, 2)),
        (&[4, 3], softmax3(first, 2) * softmax3(after_b, 1)),
        (&[4, 4], softmax3(first, 2) * softmax3(after_b, 2)),
    ];
    for (content, p) in cases {
        let lp = sequence_log_prob(&m, &ctx(), &seq(content)).unwrap();
        assert!((lp - p.ln()).abs() < 1e-12, "{content:?}: {lp} vs {}", p.ln());
    }
}

#[test]
fn out_of_range_token_is_an_input_error() {
    let m = two_word_lm();
    assert!(sequence_log_prob(&m, &ctx(), &seq(&[9])).is_err());
    assert!(sequence_log_prob(&m, &ctx(), &seq(&[3, 3, 3])).is_err(), "longer than max_len");
}

/// Every complete sequence ranked by total log-prob, ties by token ids.
fn enumerate_ranked(m: &TableLm) -> Vec<(Vec<TokenId>, f64)> {
    let words: Vec<TokenId> = (3..m.vocab_size).collect();
    let mut all: Vec<Vec<TokenId>> = vec![vec![]];
    let mut frontier: Vec<Vec<TokenId>> = vec![vec![]];
    for _ in 1..m.max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for &w in &words {
                let mut q = p.clone();
                q.push(w);
                next.push(q);
            }
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    let mut scored: Vec<(Vec<TokenId>, f64)> = all
        .into_iter()
        .map(|c| {
            let lp = sequence_log_prob(m, &ctx(), &seq(&c)).unwrap();
            let mut ids = c;
            ids.push(EOS);
            (ids, lp)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}

#[test]
fn beam_matches_exhaustive_enumeration() {
    let m = two_word_lm();
    let oracle = enumerate_ranked(&m);
    assert_eq!(oracle.len(), 7);
    let beam = beam_search(&m, &ctx(), 4, 3).unwrap();
    assert_eq!(beam.len(), 4);
    for (b, (ids, lp)) in beam.iter().zip(&oracle) {
        assert_eq!(b.seq.tokens(), ids.as_slice());
        assert!((b.log_prob - lp).abs() < 1e-12);
    }
    let full = beam_search(&m, &ctx(), 7, 3).unwrap();
    let got: Vec<&[TokenId]> = full.iter().map(|b| b.seq.tokens()).collect();
    let want: Vec<&[TokenId]> = oracle.iter().map(|(ids, _)| ids.as_slice()).collect();
    assert_eq!(got, want);
}

#[test]
fn full_width_beam_is_exact_on_random_models() {
    for seed in 0..20 {
        let m = random_table_lm(seed, 3, 4);
        let oracle = enumerate_ranked(&m);
        let beam = beam_search(&m, &ctx(), oracle.len(), 4).unwrap();
        assert_eq!(beam.len(), oracle.len());
        for (b, (ids, lp)) in beam.iter().zip(&oracle) {
            assert_eq!(b.seq.tokens(), ids.as_slice(), "seed {seed}");
            assert!((b.log_prob - lp).abs() < 1e-12);
        }
    }
}

#[test]
fn narrow_beam_is_prefix_of_wider_beam() {
    let m = two_word_lm();
    let two = beam_search(&m, &ctx(), 2, 3).unwrap();
    let four = beam_search(&m, &ctx(), 4, 3).unwrap();
    assert_eq!(two[..], four[..2]);
}

#[test]
fn wider_beam_never_scores_worse() {
    // Not a prefix relation in general: a narrow beam can prune a short
    // hypothesis early. Rank by rank, the wider beam is at least as good.
    for seed in 0..50 {
        let m = random_table_lm(seed, 2, 3);
        let two = beam_search(&m, &ctx(), 2, 3).unwrap();
        let four = beam_search(&m, &ctx(), 4, 3).unwrap();
        for (a, b) in two.iter().zip(&four) {
            assert!(b.log_prob >= a.log_prob, "seed {seed}");
        }
    }
}

#[test]
fn beam_results_are_sorted_and_end_in_eos() {
    for seed in 0..20 {
        let m = random_table_lm(seed, 4, 5);
        let beam = beam_search(&m, &ctx(), 5, 5).unwrap();
        assert_eq!(beam.len(), 5);
        for w in beam.windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
        }
        for b in &beam {
            assert_eq!(*b.seq.tokens().last().unwrap(), EOS);
            assert!(b.seq.len() <= 5);
        }
    }
}

#[test]
fn greedy_equals_beam_of_one() {
    for seed in 0..50 {
        let m = random_table_lm(seed, 4, 6);
        let g = greedy_decode(&m, &ctx(), 6);
        let b = beam_search(&m, &ctx(), 1, 6).unwrap();
        assert_eq!(b[0].seq, g, "seed {seed}");
    }
    for seed in 0..5 {
        let (m, _) = toy_captioner(seed);
        assert_eq!(beam_search(&m, &ctx(), 1, 5).unwrap()[0].seq, greedy_decode(&m, &ctx(), 5));
    }
}

#[test]
fn dominant_path_is_followed() {
    let path = [4usize, 3, 5];
    let m = TableLm {
        vocab_size: 6,
        max_len: 8,
        logits: Box::new(move |prefix| {
            let next = path.get(prefix.len()).copied().unwrap_or(EOS);
            (0..6).map(|t| if t == next { 10.0 } else { 0.0 }).collect()
        }),
    };
    assert_eq!(greedy_decode(&m, &ctx(), 8), seq(&path));
    assert_eq!(beam_search(&m, &ctx(), 1, 8).unwrap()[0].seq, seq(&path));
}

#[test]
fn immediate_eos_gives_length_one() {
    let m = TableLm {
        vocab_size: 6,
        max_len: 5,
        logits: Box::new(|_| (0..6).map(|t| if t == EOS { 5.0 } else { 0.0 }).collect()),
    };
    let g = greedy_decode(&m, &ctx(), 5);
    assert_eq!(g.len(), 1);
    assert_eq!(g.tokens(), &[EOS]);
    assert_eq!(beam_search(&m, &ctx(), 3, 5).unwrap()[0].seq, g);
}

#[test]
fn xe_is_negative_log_prob_over_length() {
    let (m, _) = toy_captioner(3);
    for content in [vec![], vec![3], vec![3, 5, 4], vec![5, 5, 5, 5]] {
        let s = seq(&content);
        let lp = sequence_log_prob(&m, &ctx(), &s).unwrap();
        let xe = xe_loss(&m, &ctx(), &s).unwrap();
        assert!((xe + lp / s.len() as f64).abs() < 1e-12);
        assert!(xe >= 0.0);
    }
}

#[test]
fn log_prob_sums_the_rows_used_by_xe() {
    let (m, _) = toy_captioner(4);
    let s = seq(&[4, 3, 5]);
    let rows = m.step_log_probs(ctx().features(), s.tokens());
    let manual: f64 = s.tokens().iter().zip(&rows).map(|(&t, r)| r[t]).sum();
    let lp = sequence_log_prob(&m, &ctx(), &s).unwrap();
    assert!((lp - manual).abs() < 1e-10);
    let mut grads = m.zero_grads();
    let with_grad = m.log_prob_with_grad(ctx().features(), s.tokens(), 0.0, &mut grads);
    assert!((lp - with_grad).abs() < 1e-10);
    // Step-wise rows agree with incremental next-token calls.
    for t in 0..s.len() {
        let inc = m.next_log_probs(ctx().features(), &s.tokens()[..t]);
        for (a, b) in inc.iter().zip(&rows[t]) {
            assert!(a == b || (a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn trailing_pads_do_not_change_xe() {
    let (m, _) = toy_captioner(5);
    let s = seq(&[3, 4]);
    let padded = s.with_padding(5, PAD);
    assert_eq!(padded.ids().len(), 5);
    assert_eq!(xe_loss(&m, &ctx(), &s).unwrap(), xe_loss(&m, &ctx(), &padded).unwrap());
    let (mut g1, mut g2) = (m.zero_grads(), m.zero_grads());
    xe_loss_with_grad(&m, &ctx(), &s, &mut g1).unwrap();
    xe_loss_with_grad(&m, &ctx(), &padded, &mut g2).unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn xe_gradient_matches_finite_differences() {
    let (m, _) = toy_captioner(6);
    assert!(m.n_params() < 10_000);
    let s = seq(&[4, 3, 5]);
    let mut grads = m.zero_grads();
    xe_loss_with_grad(&m, &ctx(), &s, &mut grads).unwrap();
    let err = max_fd_rel_error(&m, &grads, |p| xe_loss(p, &ctx(), &s).unwrap());
    assert!(err < 1e-4, "max relative error {err}");
}

fn lp(m: &Captioner, s: &TokenSequence) -> f64 {
    sequence_log_prob(m, &ctx(), s).unwrap()
}

#[test]
fn dico_gradient_matches_finite_differences() {
    let (m, _) = toy_captioner(7);
    let (reference, _) = toy_captioner(8);
    let winner = seq(&[3, 4]);
    let losers = [seq(&[5]), seq(&[4, 4, 3]), seq(&[])];
    let gammas = vec![0.5, 0.3, 0.2];
    let group = |p: &Captioner| GroupLogProbs {
        policy_winner: lp(p, &winner),
        ref_winner: lp(&reference, &winner),
        policy_losers: losers.iter().map(|l| lp(p, l)).collect(),
        ref_losers: losers.iter().map(|l| lp(&reference, l)).collect(),
        gammas: gammas.clone(),
        beta: 0.2,
    };
    let g = dico_loss_grad(&group(&m));
    let mut grads = m.zero_grads();
    m.log_prob_with_grad(ctx().features(), winner.tokens(), g.d_policy_winner, &mut grads);
    for (l, d) in losers.iter().zip(&g.d_policy_losers) {
        m.log_prob_with_grad(ctx().features(), l.tokens(), *d, &mut grads);
    }
    let err = max_fd_rel_error(&m, &grads, |p| dico_loss(&group(p)));
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn scst_gradient_matches_finite_differences() {
    let (m, _) = toy_captioner(9);
    let samples = [seq(&[3, 4]), seq(&[5]), seq(&[4, 4, 3]), seq(&[])];
    let rewards = [0.7, 0.2, 0.9, 0.1];
    let baseline = 0.4;
    let coeffs = scst_logp_coefficients(&rewards, baseline, samples.len()).unwrap();
    let mut grads = m.zero_grads();
    for (s, c) in samples.iter().zip(&coeffs) {
        m.log_prob_with_grad(ctx().features(), s.tokens(), *c, &mut grads);
    }
    let err = max_fd_rel_error(&m, &grads, |p| {
        let lps: Vec<f64> = samples.iter().map(|s| lp(p, s)).collect();
        scst_loss(&lps, &rewards, baseline).unwrap()
    });
    assert!(err < 1e-4, "max relative error {err}");
}
