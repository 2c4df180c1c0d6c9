//! Evaluation metrics: exact match, pass@n, ROUGE-1/2/L, and token-level F1
//! (the declared stand-in for neural quality metrics at this scale).

use std::collections::HashMap;

use crate::toymodel::generate::{GenMode, Generator};
use crate::toymodel::{DataSample, TokenId};
use crate::util::derive_seed;

use super::{Result, TaskError, TOK_EOS};

/// Tokens up to (excluding) the first end token.
pub fn clean(seq: &[TokenId]) -> &[TokenId] {
    match seq.iter().position(|&t| t == TOK_EOS) {
        Some(i) => &seq[..i],
        None => seq,
    }
}

/// Exact token-sequence match after end-token truncation on both sides.
pub fn is_exact_match(output: &[TokenId], sample: &DataSample) -> bool {
    clean(output) == clean(&sample.target)
}

fn gen_budget(sample: &DataSample) -> usize {
    sample.target.len() + 1
}

/// Greedy exact-match accuracy over a test set.
pub fn eval_exact<G: Generator>(gen: &G, testset: &[DataSample]) -> Result<f64> {
    if testset.is_empty() {
        return Err(TaskError::InvalidParam("empty test set".into()));
    }
    let mut hits = 0usize;
    for s in testset {
        let out = gen
            .generate(&s.prompt, gen_budget(s), &GenMode::Greedy)
            .map_err(|e| TaskError::InvalidParam(e.to_string()))?;
        if is_exact_match(&out, s) {
            hits += 1;
        }
    }
    Ok(hits as f64 / testset.len() as f64)
}

/// pass@n: per item, n seeded samples; the item passes if any matches.
/// Draw j of item i always uses the same derived seed, so the draw set for
/// n is a prefix of the draw set for n+1.
pub fn eval_pass_at_n<G: Generator>(
    gen: &G,
    testset: &[DataSample],
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<f64> {
    if testset.is_empty() {
        return Err(TaskError::InvalidParam("empty test set".into()));
    }
    if n == 0 {
        return Err(TaskError::InvalidParam("pass@n needs n >= 1".into()));
    }
    let mut passes = 0usize;
    for (i, s) in testset.iter().enumerate() {
        for j in 0..n {
            let draw_seed = derive_seed(seed, ((i as u64) << 24) | j as u64);
            let mode = GenMode::Sample {
                temperature,
                seed: draw_seed,
            };
            let out = gen
                .generate(&s.prompt, gen_budget(s), &mode)
                .map_err(|e| TaskError::InvalidParam(e.to_string()))?;
            if is_exact_match(&out, s) {
                passes += 1;
                break;
            }
        }
    }
    Ok(passes as f64 / testset.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrfScore {
    fn from_counts(matched: usize, hyp_total: usize, ref_total: usize) -> PrfScore {
        if hyp_total == 0 || ref_total == 0 {
            return PrfScore::default();
        }
        let precision = matched as f64 / hyp_total as f64;
        let recall = matched as f64 / ref_total as f64;
        let f1 = if matched == 0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        PrfScore {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RougeScores {
    pub rouge1: PrfScore,
    pub rouge2: PrfScore,
    pub rouge_l: PrfScore,
}

/// Clipped n-gram overlap for ROUGE-1/2 plus LCS-based ROUGE-L.
/// Precision counts are relative to the hypothesis, recall to the reference.
pub fn rouge(reference: &[TokenId], hypothesis: &[TokenId]) -> RougeScores {
    RougeScores {
        rouge1: ngram_prf(reference, hypothesis, 1),
        rouge2: ngram_prf(reference, hypothesis, 2),
        rouge_l: {
            let lcs = lcs_len(reference, hypothesis);
            PrfScore::from_counts(lcs, hypothesis.len(), reference.len())
        },
    }
}

fn ngram_prf(reference: &[TokenId], hypothesis: &[TokenId], n: usize) -> PrfScore {
    let ref_grams = count_ngrams(reference, n);
    let hyp_grams = count_ngrams(hypothesis, n);
    let ref_total: usize = ref_grams.values().sum();
    let hyp_total: usize = hyp_grams.values().sum();
    let matched: usize = hyp_grams
        .iter()
        .map(|(g, &c)| c.min(*ref_grams.get(g).unwrap_or(&0)))
        .sum();
    PrfScore::from_counts(matched, hyp_total, ref_total)
}

fn count_ngrams(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut map = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Longest common subsequence length (quadratic DP).
pub fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Multiset token overlap F1.
pub fn token_f1(reference: &[TokenId], hypothesis: &[TokenId]) -> f64 {
    ngram_prf(reference, hypothesis, 1).f1
}

/// Per-sample output score used by causal filtering and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MetricKind {
    Exact,
    TokenF1,
    Rouge1F,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Exact => "exact",
            MetricKind::TokenF1 => "token_f1",
            MetricKind::Rouge1F => "rouge1_f",
        }
    }

    pub fn score(&self, output: &[TokenId], sample: &DataSample) -> f64 {
        let reference = clean(&sample.target);
        let hypothesis = clean(output);
        match self {
            MetricKind::Exact => {
                if reference == hypothesis {
                    1.0
                } else {
                    0.0
                }
            }
            MetricKind::TokenF1 => token_f1(reference, hypothesis),
            MetricKind::Rouge1F => rouge(reference, hypothesis).rouge1.f1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{ModelError, SampleMeta};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(prompt: Vec<TokenId>, target: Vec<TokenId>) -> DataSample {
        let critical_pos = prompt.len() - 1;
        DataSample {
            prompt,
            target,
            critical_pos,
            meta: SampleMeta {
                source: "test".into(),
                on_task: true,
            },
        }
    }

    /// Emits `target.len()` uniform tokens over a 4-symbol alphabet (then an
    /// end token), deterministically per (prompt, draw seed).
    struct RandomStub {
        alphabet: [TokenId; 4],
    }

    impl Generator for RandomStub {
        fn generate(
            &self,
            prompt: &[TokenId],
            max_new: usize,
            mode: &GenMode,
        ) -> std::result::Result<Vec<TokenId>, ModelError> {
            let mut hash = 0xcbf29ce484222325u64;
            for &t in prompt {
                hash = (hash ^ t as u64).wrapping_mul(0x100000001b3);
            }
            if let GenMode::Sample { seed, .. } = mode {
                hash = (hash ^ *seed).wrapping_mul(0x100000001b3);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(hash);
            // max_new is target.len() + 1 and targets end with the end
            // token, so emit max_new - 2 content tokens then stop.
            let mut out: Vec<TokenId> = (0..max_new.saturating_sub(2))
                .map(|_| self.alphabet[rng.gen_range(0..4)])
                .collect();
            out.push(TOK_EOS);
            Ok(out)
        }
    }

    /// Succeeds (emits the exact target) with probability p per draw.
    struct BernoulliStub {
        p: f64,
        answers: HashMap<Vec<TokenId>, Vec<TokenId>>,
    }

    impl Generator for BernoulliStub {
        fn generate(
            &self,
            prompt: &[TokenId],
            _max_new: usize,
            mode: &GenMode,
        ) -> std::result::Result<Vec<TokenId>, ModelError> {
            let seed = match mode {
                GenMode::Sample { seed, .. } => *seed,
                GenMode::Greedy => 0,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if rng.gen::<f64>() < self.p {
                Ok(self.answers[prompt].clone())
            } else {
                Ok(vec![20, TOK_EOS])
            }
        }
    }

    #[test]
    fn random_model_exact_match_matches_binomial_expectation() {
        let alphabet = [30u32, 31, 32, 33];
        let stub = RandomStub { alphabet };
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 2000usize;
        let testset: Vec<DataSample> = (0..n)
            .map(|i| {
                // distinct prompts so stub outputs are independent per item
                let prompt = vec![(i % 40) as TokenId, (i / 40) as TokenId];
                let target: Vec<TokenId> = (0..3)
                    .map(|_| alphabet[rng.gen_range(0..4)])
                    .chain(std::iter::once(TOK_EOS))
                    .collect();
                sample(prompt, target)
            })
            .collect();
        let acc = eval_exact(&stub, &testset).unwrap();
        let p = 4.0f64.powi(-3);
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (acc - p).abs() <= 3.0 * sigma,
            "acc {acc} vs expectation {p} (3 sigma {})",
            3.0 * sigma
        );
    }

    #[test]
    fn pass_at_n_matches_closed_form() {
        let p = 0.3;
        let n_items = 400;
        let testset: Vec<DataSample> = (0..n_items)
            .map(|i| sample(vec![i as TokenId % 40, 1], vec![5, TOK_EOS]))
            .collect();
        let answers = testset
            .iter()
            .map(|s| (s.prompt.clone(), s.target.clone()))
            .collect();
        let stub = BernoulliStub { p, answers };
        let n = 4;
        let rate = eval_pass_at_n(&stub, &testset, n, 0.7, 99).unwrap();
        let expect = 1.0 - (1.0 - p).powi(n as i32);
        let sigma = (expect * (1.0 - expect) / n_items as f64).sqrt();
        assert!(
            (rate - expect).abs() <= 3.0 * sigma,
            "rate {rate} vs closed form {expect}"
        );
    }

    #[test]
    fn pass_at_n_is_nondecreasing_in_n() {
        let p = 0.25;
        let testset: Vec<DataSample> = (0..100)
            .map(|i| sample(vec![i as TokenId % 40, 1], vec![7, TOK_EOS]))
            .collect();
        let answers = testset
            .iter()
            .map(|s| (s.prompt.clone(), s.target.clone()))
            .collect();
        let stub = BernoulliStub { p, answers };
        let mut last = 0.0;
        for n in 1..=6 {
            let rate = eval_pass_at_n(&stub, &testset, n, 0.7, 5).unwrap();
            assert!(rate >= last, "pass@{n} {rate} < pass@{} {last}", n - 1);
            last = rate;
        }
    }

    #[test]
    fn rouge_identical_sequences() {
        let s = vec![1u32, 2, 3, 4];
        let r = rouge(&s, &s);
        assert_eq!(r.rouge1.f1, 1.0);
        assert_eq!(r.rouge2.f1, 1.0);
        assert_eq!(r.rouge_l.f1, 1.0);
    }

    #[test]
    fn rouge_hand_enumerated_overlap() {
        // ref "the cat sat on the mat", hyp "the cat sat" as token ids.
        let reference = vec![1u32, 2, 3, 4, 1, 5];
        let hypothesis = vec![1u32, 2, 3];
        let r = rouge(&reference, &hypothesis);
        assert_eq!(r.rouge1.precision, 1.0);
        assert_eq!(r.rouge1.recall, 0.5);
        assert!((r.rouge1.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_disjoint_vocabularies() {
        let r = rouge(&[1, 2, 3], &[4, 5, 6]);
        assert_eq!(r.rouge1, PrfScore::default());
        assert_eq!(r.rouge2, PrfScore::default());
        assert_eq!(r.rouge_l, PrfScore::default());
    }

    #[test]
    fn rouge_empty_vs_anything_is_zero() {
        let r = rouge(&[], &[1, 2]);
        assert_eq!(r.rouge1.f1, 0.0);
        assert_eq!(r.rouge_l.f1, 0.0);
    }

    #[test]
    fn rouge_swap_swaps_precision_and_recall() {
        let a = vec![1u32, 2, 2, 3, 7];
        let b = vec![2u32, 3, 3, 9];
        let ab = rouge(&a, &b);
        let ba = rouge(&b, &a);
        assert_eq!(ab.rouge1.precision, ba.rouge1.recall);
        assert_eq!(ab.rouge1.recall, ba.rouge1.precision);
        assert_eq!(ab.rouge_l.precision, ba.rouge_l.recall);
        assert_eq!(ab.rouge2.precision, ba.rouge2.recall);
    }

    #[test]
    fn rouge_f1_bounded_by_max_component() {
        let a = vec![1u32, 2, 3, 4, 5];
        let b = vec![3u32, 4, 5, 6];
        let r = rouge(&a, &b);
        for prf in [r.rouge1, r.rouge2, r.rouge_l] {
            assert!(prf.f1 <= prf.precision.max(prf.recall) + 1e-15);
            assert!((0.0..=1.0).contains(&prf.precision));
            assert!((0.0..=1.0).contains(&prf.recall));
            assert!((0.0..=1.0).contains(&prf.f1));
        }
    }

    #[test]
    fn lcs_matches_quadratic_oracle() {
        // Independent recursive (memoized) oracle on short sequences.
        fn oracle(a: &[TokenId], b: &[TokenId]) -> usize {
            if a.is_empty() || b.is_empty() {
                0
            } else if a[a.len() - 1] == b[b.len() - 1] {
                oracle(&a[..a.len() - 1], &b[..b.len() - 1]) + 1
            } else {
                oracle(&a[..a.len() - 1], b).max(oracle(a, &b[..b.len() - 1]))
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..30 {
            let a: Vec<TokenId> = (0..rng.gen_range(0..10)).map(|_| rng.gen_range(0..4)).collect();
            let b: Vec<TokenId> = (0..rng.gen_range(0..10)).map(|_| rng.gen_range(0..4)).collect();
            assert_eq!(lcs_len(&a, &b), oracle(&a, &b));
        }
    }

    #[test]
    fn token_f1_multiset_overlap() {
        // ref [a,a,b], hyp [a,b,b]: overlap 2, P = R = 2/3, F1 = 2/3.
        let f = token_f1(&[1, 1, 2], &[1, 2, 2]);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(token_f1(&[1, 2], &[3, 4]), 0.0);
    }

    #[test]
    fn metric_kind_scores_respect_eos() {
        let s = sample(vec![1, TOK_EOS - 1], vec![5, TOK_EOS]);
        assert_eq!(MetricKind::Exact.score(&[5, TOK_EOS], &s), 1.0);
        assert_eq!(MetricKind::Exact.score(&[5, 9], &s), 0.0);
        assert_eq!(MetricKind::TokenF1.score(&[5, TOK_EOS], &s), 1.0);
    }
}
