//! Quality and diversity metrics: smoothed BLEU, exact match, SELF-BLEU,
//! corpus evaluation with MBR selection, and the few-step degradation
//! report.
//!
//! BLEU here is add-one smoothed at every n-gram order:
//! `p_n = (matches_n + 1) / (total_n + 1)`, geometric mean over n = 1..4,
//! times the brevity penalty `min(1, exp(1 - r/c))`. Corpus-level scores
//! aggregate the match/total counts over all pairs before smoothing.

use std::collections::HashMap;
use std::time::Instant;

use serde::Serialize;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::infer::{derive_seed, generate_many, mbr_select, GenJob, InferencePlan};
use crate::model::Denoiser;
use crate::schedule::{NoiseSchedule, TimestepPlan};
use crate::train::EncodedCorpus;

pub const BLEU_MAX_N: usize = 4;

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut map: HashMap<&[usize], usize> = HashMap::new();
    if seq.len() >= n {
        for i in 0..=seq.len() - n {
            *map.entry(&seq[i..i + n]).or_insert(0) += 1;
        }
    }
    map
}

/// Clipped n-gram matches of `hyp` against the per-gram maximum over `refs`.
fn clipped_matches(hyp: &[usize], refs: &[&[usize]], n: usize) -> (usize, usize) {
    let hyp_counts = ngram_counts(hyp, n);
    let total: usize = hyp_counts.values().sum();
    let ref_counts: Vec<HashMap<&[usize], usize>> =
        refs.iter().map(|r| ngram_counts(r, n)).collect();
    let mut matches = 0;
    for (gram, &count) in &hyp_counts {
        let best_ref = ref_counts
            .iter()
            .map(|rc| rc.get(gram).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        matches += count.min(best_ref);
    }
    (matches, total)
}

/// Reference length closest to the hypothesis length (shorter wins ties).
fn closest_ref_len(hyp_len: usize, refs: &[&[usize]]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| {
            let diff = (l as isize - hyp_len as isize).unsigned_abs();
            (diff, l)
        })
        .unwrap_or(0)
}

fn bleu_from_counts(matches: &[usize], totals: &[usize], hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..BLEU_MAX_N {
        let p = (matches[n] + 1) as f64 / (totals[n] + 1) as f64;
        log_sum += p.ln();
    }
    let geo = (log_sum / BLEU_MAX_N as f64).exp();
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * geo
}

/// Sentence-level smoothed BLEU of `hyp` against one or more references.
pub fn bleu_multi(hyp: &[usize], refs: &[&[usize]]) -> Result<f64> {
    let refs: Vec<&[usize]> = refs.iter().copied().filter(|r| !r.is_empty()).collect();
    if refs.is_empty() {
        return Err(Error::InvalidArgument("bleu needs a non-empty reference".into()));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let mut matches = [0usize; BLEU_MAX_N];
    let mut totals = [0usize; BLEU_MAX_N];
    for n in 1..=BLEU_MAX_N {
        let (m, t) = clipped_matches(hyp, &refs, n);
        matches[n - 1] = m;
        totals[n - 1] = t;
    }
    Ok(bleu_from_counts(
        &matches,
        &totals,
        hyp.len(),
        closest_ref_len(hyp.len(), &refs),
    ))
}

/// Single-reference sentence BLEU in [0, 100].
pub fn bleu(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    bleu_multi(hyp, &[reference])
}

/// Corpus-level smoothed BLEU: counts aggregated over all pairs, then
/// smoothed once.
pub fn corpus_bleu(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("corpus_bleu needs pairs".into()));
    }
    if pairs.iter().any(|(_, r)| r.is_empty()) {
        return Err(Error::InvalidArgument("bleu needs non-empty references".into()));
    }
    let mut matches = [0usize; BLEU_MAX_N];
    let mut totals = [0usize; BLEU_MAX_N];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in pairs {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=BLEU_MAX_N {
            let (m, t) = clipped_matches(hyp, &[reference.as_slice()], n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    Ok(bleu_from_counts(&matches, &totals, hyp_len, ref_len))
}

/// SELF-BLEU of a candidate set: mean over i of BLEU(c_i | rest as
/// multi-reference). 100 means all candidates identical; lower means more
/// diverse.
pub fn self_bleu(candidates: &[Vec<usize>]) -> Result<f64> {
    if candidates.len() < 2 {
        return Err(Error::InvalidArgument(
            "self_bleu needs at least two candidates".into(),
        ));
    }
    let mut sum = 0.0;
    for i in 0..candidates.len() {
        let refs: Vec<&[usize]> = candidates
            .iter()
            .enumerate()
            .filter(|(j, c)| *j != i && !c.is_empty())
            .map(|(_, c)| c.as_slice())
            .collect();
        let score = if refs.is_empty() {
            // All other candidates empty: identical iff this one is too.
            if candidates[i].is_empty() {
                100.0
            } else {
                0.0
            }
        } else {
            bleu_multi(&candidates[i], &refs)?
        };
        sum += score;
    }
    Ok(sum / candidates.len() as f64)
}

/// Symmetrized sentence BLEU in [0, 1]; the default MBR risk metric.
pub fn mbr_bleu_metric(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let ab = bleu(a, b).unwrap_or(0.0);
    let ba = bleu(b, a).unwrap_or(0.0);
    (ab + ba) / 200.0
}

/// Per-example generation output retained for reports and JSONL dumps.
#[derive(Debug, Clone, Serialize)]
pub struct ExampleOutput {
    pub src: Vec<usize>,
    pub reference: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub mbr_index: usize,
    pub risks: Vec<f64>,
}

/// Corpus-level evaluation result.
#[derive(Debug, Clone)]
pub struct CorpusEval {
    pub bleu: f64,
    pub token_em: f64,
    pub seq_em: f64,
    pub self_bleu: Option<f64>,
    pub outputs: Vec<ExampleOutput>,
    pub runtime_per_step_ms: f64,
}

/// Generate (with `plan.candidates` samples and MBR selection) and score an
/// encoded corpus. Candidate seeds for example `i` are
/// `derive_seed(base_seed, i) + j`.
pub fn evaluate_corpus(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    corpus: &EncodedCorpus,
    plan: &InferencePlan,
    base_seed: u64,
    timing: bool,
) -> Result<CorpusEval> {
    let k = plan.candidates;
    let mut jobs = Vec::with_capacity(corpus.len() * k);
    for (i, src) in corpus.src.iter().enumerate() {
        let example_seed = derive_seed(base_seed, i as u64);
        for j in 0..k {
            jobs.push(GenJob {
                src_ids: src.clone(),
                seed: example_seed.wrapping_add(j as u64),
            });
        }
    }
    let started = Instant::now();
    let generated = generate_many(model, schedule, plan, &jobs, false, crate::infer::DEFAULT_CHUNK)?;
    let gen_ms = started.elapsed().as_secs_f64() * 1e3;

    let mut outputs = Vec::with_capacity(corpus.len());
    let mut pairs = Vec::with_capacity(corpus.len());
    let mut token_hits = 0usize;
    let mut token_total = 0usize;
    let mut seq_hits = 0usize;
    let mut self_bleu_sum = 0.0;
    for (i, tgt) in corpus.tgt.iter().enumerate() {
        let cands = &generated[i * k..(i + 1) * k];
        let trimmed: Vec<Vec<usize>> = cands.iter().map(|c| c.ids.clone()).collect();
        let (mbr_index, risks) = mbr_select(&trimmed, mbr_bleu_metric)?;
        let selected = &cands[mbr_index];
        let reference = Vocabulary::trim_ids(tgt);

        // Token accuracy over non-pad reference positions (padding carries
        // no training signal).
        for (a, b) in selected.raw_ids.iter().zip(tgt.iter()) {
            if *b == crate::data::PAD_ID {
                continue;
            }
            if a == b {
                token_hits += 1;
            }
            token_total += 1;
        }
        if selected.ids == reference {
            seq_hits += 1;
        }
        pairs.push((selected.ids.clone(), reference.clone()));
        if k >= 2 {
            self_bleu_sum += self_bleu(&trimmed)?;
        }
        outputs.push(ExampleOutput {
            src: corpus.src[i].clone(),
            reference,
            candidates: trimmed,
            mbr_index,
            risks,
        });
    }
    Ok(CorpusEval {
        bleu: corpus_bleu(&pairs)?,
        token_em: token_hits as f64 / token_total.max(1) as f64,
        seq_em: seq_hits as f64 / corpus.len() as f64,
        self_bleu: (k >= 2).then(|| self_bleu_sum / corpus.len() as f64),
        outputs,
        runtime_per_step_ms: if timing {
            gen_ms / plan.steps as f64
        } else {
            0.0
        },
    })
}

/// A named (model, plan) pair to evaluate side by side.
pub struct EvalSystem<'a> {
    pub name: String,
    pub model: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub plan: TimestepPlan,
}

#[derive(Debug, Clone, Serialize)]
pub struct FewStepRow {
    pub system: String,
    pub steps: usize,
    pub bleu: f64,
    pub token_exact_match: f64,
    pub seq_exact_match: f64,
    /// Mean of the BLEU drop and the (percentage-scaled) sequence
    /// exact-match drop relative to the system's first step-count row.
    pub avg_drop: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub exact_match: f64,
    pub self_bleu: Option<f64>,
    pub runtime_per_step_ms: f64,
    pub rows: Vec<FewStepRow>,
}

/// Evaluate every system at every step count on the same corpus, reporting
/// absolute scores plus drops against each system's first step count.
pub fn few_step_report(
    systems: &[EvalSystem<'_>],
    corpus: &EncodedCorpus,
    step_counts: &[usize],
    k: usize,
    seed: u64,
    timing: bool,
) -> Result<EvalReport> {
    if systems.is_empty() || step_counts.is_empty() {
        return Err(Error::InvalidArgument(
            "few_step_report needs systems and step counts".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut headline: Option<CorpusEval> = None;
    for sys in systems {
        let mut base: Option<(f64, f64)> = None;
        for &m in step_counts {
            let ip = crate::infer::make_plan(sys.plan.clone(), m, k, seed)?;
            let eval = evaluate_corpus(sys.model, sys.schedule, corpus, &ip, seed, timing)?;
            let (base_bleu, base_seq) = *base.get_or_insert((eval.bleu, eval.seq_em));
            rows.push(FewStepRow {
                system: sys.name.clone(),
                steps: m,
                bleu: eval.bleu,
                token_exact_match: eval.token_em,
                seq_exact_match: eval.seq_em,
                avg_drop: ((base_bleu - eval.bleu) + 100.0 * (base_seq - eval.seq_em)) / 2.0,
            });
            if headline.is_none() {
                headline = Some(eval);
            }
        }
    }
    let headline = headline.expect("at least one evaluation ran");
    Ok(EvalReport {
        bleu: headline.bleu,
        exact_match: headline.seq_em,
        self_bleu: headline.self_bleu,
        runtime_per_step_ms: headline.runtime_per_step_ms,
        rows,
    })
}

/// Render the few-step table as CSV.
pub fn few_step_csv(report: &EvalReport) -> String {
    let mut out = String::from("system,steps,bleu,token_exact_match,seq_exact_match,avg_drop\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{:.4}\n",
            row.system,
            row.steps,
            row.bleu,
            row.token_exact_match,
            row.seq_exact_match,
            row.avg_drop
        ));
    }
    out
}

/// For each position, the first decoding step from which the argmax token id
/// never changes again.
pub fn stabilization_steps(trace: &crate::infer::GenerationTrace) -> Vec<usize> {
    let steps = &trace.steps;
    if steps.is_empty() {
        return Vec::new();
    }
    let n = steps[0].argmax_ids.len();
    let last = steps.len() - 1;
    (0..n)
        .map(|pos| {
            let final_id = steps[last].argmax_ids[pos];
            let mut stab = 0;
            for (i, s) in steps.iter().enumerate() {
                if s.argmax_ids[pos] != final_id {
                    stab = i + 1;
                }
            }
            stab
        })
        .collect()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &orig in &idx[i..=j] {
            out[orig] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    pearson(&ranks(xs), &ranks(ys))
}

/// One-sided permutation test for `spearman(xs, ys) > 0`. Returns
/// (rho, p-value).
pub fn spearman_pvalue_greater(
    xs: &[f64],
    ys: &[f64],
    n_perm: usize,
    seed: u64,
) -> (f64, f64) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let rho = spearman(xs, ys);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = ys.to_vec();
    let mut at_least = 0usize;
    for _ in 0..n_perm {
        shuffled.shuffle(&mut rng);
        if spearman(xs, &shuffled) >= rho - 1e-12 {
            at_least += 1;
        }
    }
    (rho, (at_least + 1) as f64 / (n_perm + 1) as f64)
}
