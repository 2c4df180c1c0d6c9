//! Synthetic task families with exact ground truth, the contaminated
//! selection pool, and the evaluation metrics.
//!
//! All families share one fixed vocabulary: digits, two operators, the
//! separator token that marks the critical position, an end token, and a
//! bank of content tokens. Every prompt ends with the separator and every
//! target ends with the end token, so the critical position is always the
//! final prompt token and generation quality is judged up to the first
//! end token.

pub mod metrics;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::toymodel::{DataSample, SampleMeta, TokenId};
use crate::util::{derive_seed, round_count};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task parameter: {0}")]
    InvalidParam(String),
    #[error("malformed dataset line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TaskError>;

// ── Fixed vocabulary ─────────────────────────────────────────────────────

pub const TOK_PLUS: TokenId = 10;
pub const TOK_TIMES: TokenId = 11;
pub const TOK_SEP: TokenId = 12;
pub const TOK_EOS: TokenId = 13;
pub const CONTENT_BASE: TokenId = 14;
pub const N_CONTENT: usize = 32;
pub const VOCAB_SIZE: usize = CONTENT_BASE as usize + N_CONTENT;

pub fn token_name(t: TokenId) -> String {
    match t {
        0..=9 => t.to_string(),
        TOK_PLUS => "+".to_string(),
        TOK_TIMES => "*".to_string(),
        TOK_SEP => "=".to_string(),
        TOK_EOS => "</s>".to_string(),
        _ => format!("w{:02}", t - CONTENT_BASE),
    }
}

// ── Task specifications ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CipherPerm {
    Identity,
    Seeded(u64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskFamily {
    /// Prompt `a + b * c =`, target `((a+b)*c) mod modulus`.
    ModMath { modulus: u32 },
    /// Prompt of `content_tokens` content tokens; target is the two most
    /// frequent tokens in first-appearance order.
    ExtractSummary { content_tokens: usize },
    /// Prompt of content tokens; target applies a fixed bijective token
    /// permutation to the prompt.
    CipherTranslate { perm: CipherPerm },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub family: TaskFamily,
}

pub const SUMMARY_LEN: usize = 2;
pub const CIPHER_SRC_LEN: usize = 4;

impl TaskSpec {
    pub fn modmath(modulus: u32) -> Self {
        TaskSpec {
            family: TaskFamily::ModMath { modulus },
        }
    }

    pub fn extract_summary(content_tokens: usize) -> Self {
        TaskSpec {
            family: TaskFamily::ExtractSummary { content_tokens },
        }
    }

    pub fn cipher(perm: CipherPerm) -> Self {
        TaskSpec {
            family: TaskFamily::CipherTranslate { perm },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            TaskFamily::ModMath { modulus } => {
                if !(2..=10).contains(&modulus) {
                    return Err(TaskError::InvalidParam(format!(
                        "modmath modulus must be in 2..=10, got {modulus}"
                    )));
                }
            }
            TaskFamily::ExtractSummary { content_tokens } => {
                if !(3..=24).contains(&content_tokens) {
                    return Err(TaskError::InvalidParam(format!(
                        "extract_summary content_tokens must be in 3..=24, got {content_tokens}"
                    )));
                }
            }
            TaskFamily::CipherTranslate { .. } => {}
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn family_tag(&self) -> &'static str {
        match self.family {
            TaskFamily::ModMath { .. } => "modmath",
            TaskFamily::ExtractSummary { .. } => "extract_summary",
            TaskFamily::CipherTranslate { .. } => "cipher_translate",
        }
    }
}

/// Evaluate a modmath prompt left to right: alternating digits and
/// operators, ending with the separator. Returns the answer digit.
pub fn modmath_eval(prompt: &[TokenId], modulus: u32) -> Result<TokenId> {
    if prompt.len() < 2 || *prompt.last().unwrap() != TOK_SEP {
        return Err(TaskError::InvalidParam(
            "modmath prompt must end with the separator".into(),
        ));
    }
    let body = &prompt[..prompt.len() - 1];
    if body.is_empty() || body.len() % 2 == 0 {
        return Err(TaskError::InvalidParam(
            "modmath prompt must alternate digit/op".into(),
        ));
    }
    let digit = |t: TokenId| -> Result<u64> {
        if t <= 9 {
            Ok(t as u64)
        } else {
            Err(TaskError::InvalidParam(format!(
                "expected digit, got token {t}"
            )))
        }
    };
    let mut acc = digit(body[0])?;
    let mut i = 1;
    while i < body.len() {
        let rhs = digit(body[i + 1])?;
        acc = match body[i] {
            TOK_PLUS => acc + rhs,
            TOK_TIMES => acc * rhs,
            t => {
                return Err(TaskError::InvalidParam(format!(
                    "expected operator, got token {t}"
                )))
            }
        };
        i += 2;
    }
    Ok((acc % modulus as u64) as TokenId)
}

/// The extract_summary ground truth: the `SUMMARY_LEN` most frequent
/// content tokens (ties to the earliest first appearance), emitted in
/// first-appearance order.
pub fn summary_answer(content: &[TokenId]) -> Vec<TokenId> {
    let mut counts: Vec<(TokenId, usize, usize)> = Vec::new(); // (token, count, first_pos)
    for (pos, &t) in content.iter().enumerate() {
        match counts.iter_mut().find(|(tok, _, _)| *tok == t) {
            Some(entry) => entry.1 += 1,
            None => counts.push((t, 1, pos)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let mut top: Vec<(TokenId, usize)> = counts
        .into_iter()
        .take(SUMMARY_LEN)
        .map(|(t, _, pos)| (t, pos))
        .collect();
    top.sort_by_key(|&(_, pos)| pos);
    top.into_iter().map(|(t, _)| t).collect()
}

/// The cipher's content-token permutation as a lookup table.
pub fn cipher_table(perm: CipherPerm) -> Vec<TokenId> {
    let mut table: Vec<TokenId> = (0..N_CONTENT as TokenId)
        .map(|i| CONTENT_BASE + i)
        .collect();
    if let CipherPerm::Seeded(seed) = perm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        table.shuffle(&mut rng);
    }
    table
}

/// Deterministic on-task sample generation.
pub fn gen_task_data(spec: &TaskSpec, n: usize, seed: u64) -> Result<Vec<DataSample>> {
    spec.validate()?;
    if n == 0 {
        return Err(TaskError::InvalidParam("n must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = spec.family_tag().to_string();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (prompt, target) = match spec.family {
            TaskFamily::ModMath { modulus } => {
                let a = rng.gen_range(0..10u32);
                let b = rng.gen_range(0..10u32);
                let c = rng.gen_range(0..10u32);
                let prompt = vec![a, TOK_PLUS, b, TOK_TIMES, c, TOK_SEP];
                let ans = modmath_eval(&prompt, modulus)?;
                (prompt, vec![ans, TOK_EOS])
            }
            TaskFamily::ExtractSummary { content_tokens } => {
                // Three topic tokens dominate each prompt so the frequency
                // ranking is informative.
                let mut bank: Vec<TokenId> =
                    (0..N_CONTENT as TokenId).map(|i| CONTENT_BASE + i).collect();
                bank.shuffle(&mut rng);
                let topic = &bank[..3];
                let mut content = Vec::with_capacity(content_tokens);
                for _ in 0..content_tokens {
                    if rng.gen_bool(0.7) {
                        content.push(topic[rng.gen_range(0..3)]);
                    } else {
                        content.push(CONTENT_BASE + rng.gen_range(0..N_CONTENT as TokenId));
                    }
                }
                let mut answer = summary_answer(&content);
                answer.push(TOK_EOS);
                let mut prompt = content;
                prompt.push(TOK_SEP);
                (prompt, answer)
            }
            TaskFamily::CipherTranslate { perm } => {
                let table = cipher_table(perm);
                let src: Vec<TokenId> = (0..CIPHER_SRC_LEN)
                    .map(|_| CONTENT_BASE + rng.gen_range(0..N_CONTENT as TokenId))
                    .collect();
                let mut target: Vec<TokenId> = src
                    .iter()
                    .map(|&t| table[(t - CONTENT_BASE) as usize])
                    .collect();
                target.push(TOK_EOS);
                let mut prompt = src;
                prompt.push(TOK_SEP);
                (prompt, target)
            }
        };
        let critical_pos = prompt.len() - 1;
        out.push(DataSample {
            prompt,
            target,
            critical_pos,
            meta: SampleMeta {
                source: tag.clone(),
                on_task: true,
            },
        });
    }
    Ok(out)
}

// ── Pool generation ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistractorKind {
    /// Same prompts as the task, targets permuted within the sample.
    ShuffledTarget,
    /// Content-token noise prompts with random targets.
    OffTask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolSpec {
    pub n_total: usize,
    pub on_task_fraction: f64,
    pub distractor_kind: DistractorKind,
    pub seed: u64,
}

impl PoolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_total == 0 {
            return Err(TaskError::InvalidParam("n_total must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.on_task_fraction) {
            return Err(TaskError::InvalidParam(format!(
                "on_task_fraction must be in [0,1], got {}",
                self.on_task_fraction
            )));
        }
        Ok(())
    }
}

/// Contaminated selection pool: exactly round(on_task_fraction * n_total)
/// on-task samples, the rest distractors, shuffled by the pool seed.
pub fn gen_pool(spec: &TaskSpec, pool: &PoolSpec) -> Result<Vec<DataSample>> {
    spec.validate()?;
    pool.validate()?;
    let n_on = round_count(pool.on_task_fraction, pool.n_total);
    let n_off = pool.n_total - n_on;

    let mut samples = Vec::with_capacity(pool.n_total);
    if n_on > 0 {
        samples.extend(gen_task_data(spec, n_on, derive_seed(pool.seed, 1))?);
    }
    if n_off > 0 {
        match pool.distractor_kind {
            DistractorKind::ShuffledTarget => {
                let mut base = gen_task_data(spec, n_off, derive_seed(pool.seed, 2))?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(pool.seed, 3));
                for s in base.iter_mut() {
                    s.target.shuffle(&mut rng);
                    s.meta.on_task = false;
                    s.meta.source = "shuffled_target".into();
                }
                samples.extend(base);
            }
            DistractorKind::OffTask => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(pool.seed, 2));
                for _ in 0..n_off {
                    let plen = rng.gen_range(4..=8usize);
                    let mut prompt: Vec<TokenId> = (0..plen)
                        .map(|_| CONTENT_BASE + rng.gen_range(0..N_CONTENT as TokenId))
                        .collect();
                    prompt.push(TOK_SEP);
                    let tlen = rng.gen_range(2..=4usize);
                    let mut target: Vec<TokenId> = (0..tlen)
                        .map(|_| CONTENT_BASE + rng.gen_range(0..N_CONTENT as TokenId))
                        .collect();
                    target.push(TOK_EOS);
                    let critical_pos = prompt.len() - 1;
                    samples.push(DataSample {
                        prompt,
                        target,
                        critical_pos,
                        meta: SampleMeta {
                            source: "off_task".into(),
                            on_task: false,
                        },
                    });
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(pool.seed, 4));
    samples.shuffle(&mut rng);
    Ok(samples)
}

// ── Dataset file format ──────────────────────────────────────────────────

fn join_ids(ids: &[TokenId]) -> String {
    ids.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_ids(s: &str, line: usize) -> Result<Vec<TokenId>> {
    s.split_whitespace()
        .map(|tok| {
            tok.parse::<TokenId>().map_err(|_| TaskError::Parse {
                line,
                reason: format!("bad token id {tok:?}"),
            })
        })
        .collect()
}

/// One line per sample:
/// `prompt=<ids> target=<ids> tstar=<u32> ontask=<0|1> family=<tag>`.
pub fn format_dataset(samples: &[DataSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&format!(
            "prompt={} target={} tstar={} ontask={} family={}\n",
            join_ids(&s.prompt),
            join_ids(&s.target),
            s.critical_pos,
            if s.meta.on_task { 1 } else { 0 },
            s.meta.source,
        ));
    }
    out
}

pub fn parse_dataset(text: &str) -> Result<Vec<DataSample>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rest = raw.strip_prefix("prompt=").ok_or(TaskError::Parse {
            line,
            reason: "missing prompt=".into(),
        })?;
        let (prompt_s, rest) = rest.split_once(" target=").ok_or(TaskError::Parse {
            line,
            reason: "missing target=".into(),
        })?;
        let (target_s, rest) = rest.split_once(" tstar=").ok_or(TaskError::Parse {
            line,
            reason: "missing tstar=".into(),
        })?;
        let (tstar_s, rest) = rest.split_once(" ontask=").ok_or(TaskError::Parse {
            line,
            reason: "missing ontask=".into(),
        })?;
        let (ontask_s, family_s) = rest.split_once(" family=").ok_or(TaskError::Parse {
            line,
            reason: "missing family=".into(),
        })?;
        let sample = DataSample {
            prompt: parse_ids(prompt_s, line)?,
            target: parse_ids(target_s, line)?,
            critical_pos: tstar_s.parse().map_err(|_| TaskError::Parse {
                line,
                reason: format!("bad tstar {tstar_s:?}"),
            })?,
            meta: SampleMeta {
                on_task: match ontask_s {
                    "1" => true,
                    "0" => false,
                    other => {
                        return Err(TaskError::Parse {
                            line,
                            reason: format!("bad ontask flag {other:?}"),
                        })
                    }
                },
                source: family_s.to_string(),
            },
        };
        sample.validate().map_err(|e| TaskError::Parse {
            line,
            reason: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn modmath_eval_single_operation() {
        // "3+5=" under modulus 7 -> 1
        let prompt = vec![3, TOK_PLUS, 5, TOK_SEP];
        assert_eq!(modmath_eval(&prompt, 7).unwrap(), 1);
    }

    #[test]
    fn modmath_eval_two_operations_left_associative() {
        // (2+3)*4 mod 7 = 20 mod 7 = 6
        let prompt = vec![2, TOK_PLUS, 3, TOK_TIMES, 4, TOK_SEP];
        assert_eq!(modmath_eval(&prompt, 7).unwrap(), 6);
    }

    #[test]
    fn gen_task_data_matches_oracle() {
        let spec = TaskSpec::modmath(7);
        let data = gen_task_data(&spec, 50, 9).unwrap();
        for s in &data {
            let ans = modmath_eval(&s.prompt, 7).unwrap();
            assert_eq!(s.target, vec![ans, TOK_EOS]);
            assert_eq!(s.critical_pos, s.prompt.len() - 1);
            assert_eq!(s.prompt[s.critical_pos], TOK_SEP);
            assert!(s.meta.on_task);
        }
    }

    #[test]
    fn modmath_bad_modulus_is_rejected() {
        assert!(gen_task_data(&TaskSpec::modmath(1), 4, 0).is_err());
    }

    #[test]
    fn identity_cipher_copies_source() {
        let spec = TaskSpec::cipher(CipherPerm::Identity);
        let data = gen_task_data(&spec, 20, 3).unwrap();
        for s in &data {
            let src = &s.prompt[..s.prompt.len() - 1];
            assert_eq!(&s.target[..s.target.len() - 1], src);
            assert_eq!(*s.target.last().unwrap(), TOK_EOS);
        }
    }

    #[test]
    fn seeded_cipher_is_a_bijection() {
        let table = cipher_table(CipherPerm::Seeded(5));
        let mut seen = std::collections::HashSet::new();
        for &t in &table {
            assert!(t >= CONTENT_BASE && t < CONTENT_BASE + N_CONTENT as TokenId);
            assert!(seen.insert(t));
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        for spec in [
            TaskSpec::modmath(7),
            TaskSpec::extract_summary(10),
            TaskSpec::cipher(CipherPerm::Seeded(2)),
        ] {
            let a = gen_task_data(&spec, 30, 42).unwrap();
            let b = gen_task_data(&spec, 30, 42).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn summary_answer_frequency_and_order() {
        // counts: 20 x3, 21 x2, 22 x1 -> top-2 {20, 21}, first-appearance
        // order puts 21 first.
        let content = vec![21, 20, 20, 22, 21, 20];
        assert_eq!(summary_answer(&content), vec![21, 20]);
    }

    #[test]
    fn summary_samples_match_oracle() {
        let spec = TaskSpec::extract_summary(10);
        let data = gen_task_data(&spec, 40, 8).unwrap();
        for s in &data {
            let content = &s.prompt[..s.prompt.len() - 1];
            let mut expect = summary_answer(content);
            expect.push(TOK_EOS);
            assert_eq!(s.target, expect);
        }
    }

    #[test]
    fn pool_on_task_count_is_exact() {
        let spec = TaskSpec::modmath(7);
        let pool = gen_pool(
            &spec,
            &PoolSpec {
                n_total: 2000,
                on_task_fraction: 0.5,
                distractor_kind: DistractorKind::OffTask,
                seed: 4,
            },
        )
        .unwrap();
        assert_eq!(pool.len(), 2000);
        assert_eq!(pool.iter().filter(|s| s.meta.on_task).count(), 1000);
    }

    #[test]
    fn pool_fraction_one_is_all_on_task() {
        let spec = TaskSpec::modmath(5);
        let pool = gen_pool(
            &spec,
            &PoolSpec {
                n_total: 64,
                on_task_fraction: 1.0,
                distractor_kind: DistractorKind::OffTask,
                seed: 4,
            },
        )
        .unwrap();
        assert!(pool.iter().all(|s| s.meta.on_task));
    }

    #[test]
    fn shuffled_target_distractors_are_permutations() {
        let spec = TaskSpec::extract_summary(8);
        let pool_spec = PoolSpec {
            n_total: 100,
            on_task_fraction: 0.5,
            distractor_kind: DistractorKind::ShuffledTarget,
            seed: 77,
        };
        let pool = gen_pool(&spec, &pool_spec).unwrap();
        // Distractors derive from a deterministic regeneration; match them up
        // by prompt and compare target multisets.
        let base = gen_task_data(&spec, 50, derive_seed(77, 2)).unwrap();
        let by_prompt: HashMap<Vec<TokenId>, Vec<TokenId>> = base
            .into_iter()
            .map(|s| (s.prompt, s.target))
            .collect();
        let mut checked = 0;
        for s in pool.iter().filter(|s| !s.meta.on_task) {
            let orig = &by_prompt[&s.prompt];
            let mut a = s.target.clone();
            let mut b = orig.clone();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b, "shuffled target is not a permutation");
            checked += 1;
        }
        assert_eq!(checked, 50);
    }

    #[test]
    fn dataset_file_round_trip() {
        let spec = TaskSpec::modmath(7);
        let pool = gen_pool(
            &spec,
            &PoolSpec {
                n_total: 40,
                on_task_fraction: 0.5,
                distractor_kind: DistractorKind::OffTask,
                seed: 11,
            },
        )
        .unwrap();
        let text = format_dataset(&pool);
        let parsed = parse_dataset(&text).unwrap();
        assert_eq!(parsed, pool);
        // bit-exact rewrite
        assert_eq!(format_dataset(&parsed), text);
    }

    #[test]
    fn dataset_parse_rejects_garbage() {
        assert!(parse_dataset("prompt=1 2 target=").is_err());
        assert!(parse_dataset("nonsense").is_err());
    }
}
