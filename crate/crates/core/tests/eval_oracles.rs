mod common;

use common::{brute_bleu, random_pairs};
use proptest::prelude::*;
use racoln::eval::{bleu_corpus, g_score, perplexity, KneserNeyLm, LanguageModel, UniformLm};
use racoln::synthetic::make_synthetic;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn bleu_matches_brute_force_on_fifty_pairs() {
    let (cands, refs) = random_pairs(11, 50);
    let corpus = bleu_corpus(&cands, &refs).unwrap();
    let oracle = brute_bleu(&cands, &refs);
    assert!(oracle > 0.0);
    assert!((corpus - oracle).abs() < 1e-9, "{corpus} vs {oracle}");
    let mut nonzero = 0;
    for (c, r) in cands.iter().zip(&refs) {
        let got = bleu_corpus(std::slice::from_ref(c), std::slice::from_ref(r)).unwrap();
        let want = brute_bleu(std::slice::from_ref(c), std::slice::from_ref(r));
        assert!((got - want).abs() < 1e-9, "{c:?} {r:?}: {got} vs {want}");
        nonzero += (want > 0.0) as usize;
    }
    assert!(nonzero >= 5, "too few pairs exercise higher orders");
}

#[test]
fn bleu_of_a_corpus_against_itself_is_one_hundred() {
    let (cands, _) = random_pairs(5, 50);
    let long: Vec<Vec<String>> = cands.into_iter().filter(|c| c.len() >= 4).collect();
    let refs: Vec<Vec<Vec<String>>> = long.iter().map(|c| vec![c.clone()]).collect();
    assert_eq!(bleu_corpus(&long, &refs).unwrap(), 100.0);
}

#[test]
fn kneser_ney_order_two_by_hand() {
    // Both orders fall back to discounts (0.5, 1, 1.5). Unigram continuation
    // counts are a:2 b:2 </s>:2, so p(w) = 1/6 + 0.5/4 = 7/24 and p(<unk>) = 1/8.
    let lm = KneserNeyLm::train(&["a b a", "b a b"], 2).unwrap();
    assert_eq!(lm.discounts(1), [0.5, 1.0, 1.5]);
    assert_eq!(lm.discounts(2), [0.5, 1.0, 1.5]);
    let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    close(lm.prob(&[], "a"), 7.0 / 24.0);
    close(lm.prob(&[], "zzz"), 1.0 / 8.0);
    close(lm.prob(&["a"], "b"), 23.0 / 48.0);
    close(lm.prob(&["a"], "</s>"), 15.0 / 48.0);
    close(lm.prob(&["a"], "a"), 7.0 / 48.0);
    close(lm.prob(&["a"], "<unk>"), 3.0 / 48.0);
    close(lm.prob(&["<s>"], "a"), 19.0 / 48.0);
    let (lp, n) = lm.sentence_log_prob(&["a", "b"]);
    assert_eq!(n, 3);
    close(lp, (19.0f64 / 48.0).ln() + (23.0f64 / 48.0).ln() + (15.0f64 / 48.0).ln());
}

#[test]
fn kneser_ney_normalizes_over_a_hundred_histories() {
    let corpus = make_synthetic(2, 400).unwrap();
    let text: Vec<String> = corpus.train.iter().map(|e| e.text()).collect();
    let lm = KneserNeyLm::train(&text, 5).unwrap();
    let vocab: Vec<String> = lm.vocabulary().iter().filter(|w| *w != "<s>").cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..100 {
        let history: Vec<String> = if i % 2 == 0 {
            let e = &corpus.test[rng.random_range(0..corpus.test.len())];
            let cut = rng.random_range(0..e.tokens.len());
            std::iter::once("<s>".to_string()).chain(e.tokens[..cut].iter().cloned()).collect()
        } else {
            (0..rng.random_range(0..6)).map(|_| vocab[rng.random_range(0..vocab.len())].clone()).collect()
        };
        let h: Vec<&str> = history.iter().map(String::as_str).collect();
        let total: f64 = vocab.iter().map(|w| lm.prob(&h, w)).sum();
        assert!((total - 1.0).abs() < 1e-6, "{history:?}: {total}");
    }
}

#[test]
fn uniform_model_perplexity_is_the_vocabulary_size() {
    let lm = UniformLm { vocab: 93 };
    let ppl = perplexity(&lm, &["a b c", "d", "e f g h i j"]).unwrap();
    assert!((ppl - 93.0).abs() < 1e-9);
}

#[test]
fn kneser_ney_survives_a_text_round_trip() {
    let corpus = make_synthetic(3, 200).unwrap();
    let text: Vec<String> = corpus.train.iter().map(|e| e.text()).collect();
    let lm = KneserNeyLm::train(&text, 3).unwrap();
    let back = KneserNeyLm::from_text(&lm.to_text()).unwrap();
    let test: Vec<String> = corpus.test.iter().map(|e| e.text()).collect();
    let (a, b) = (perplexity(&lm, &test).unwrap(), perplexity(&back, &test).unwrap());
    assert!((a - b).abs() < 1e-9 * a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bleu_agrees_with_brute_force(seed in 0u64..100_000, n in 1usize..8) {
        let (cands, refs) = random_pairs(seed, n);
        let got = bleu_corpus(&cands, &refs).unwrap();
        prop_assert!((0.0..=100.0).contains(&got));
        prop_assert!((got - brute_bleu(&cands, &refs)).abs() < 1e-9);
    }

    #[test]
    fn perplexity_ignores_sentence_order(seed in 0u64..1000) {
        let corpus = make_synthetic(1, 200).unwrap();
        let text: Vec<String> = corpus.train.iter().map(|e| e.text()).collect();
        let lm = KneserNeyLm::train(&text, 3).unwrap();
        let mut test: Vec<String> = corpus.test.iter().map(|e| e.text()).collect();
        let before = perplexity(&lm, &test).unwrap();
        use rand::seq::SliceRandom;
        test.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let after = perplexity(&lm, &test).unwrap();
        prop_assert!((before - after).abs() <= 1e-9 * before);
    }

    #[test]
    fn g_score_lies_between_its_inputs(a in 0.0f64..100.0, b in 0.0f64..100.0) {
        let g = g_score(a, b).unwrap();
        prop_assert!(g >= a.min(b) - 1e-12 && g <= a.max(b) + 1e-12);
    }
}
