//! Word error rate and bootstrap confidence intervals.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentCounts {
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
    pub ref_len: u64,
}

impl AlignmentCounts {
    pub fn edits(&self) -> u64 {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn wer(&self) -> Result<f64> {
        if self.ref_len == 0 {
            return Err(Error::Domain("WER undefined for an empty reference".into()));
        }
        Ok(self.edits() as f64 / self.ref_len as f64)
    }
}

impl std::ops::Add for AlignmentCounts {
    type Output = AlignmentCounts;

    fn add(self, o: AlignmentCounts) -> AlignmentCounts {
        AlignmentCounts {
            substitutions: self.substitutions + o.substitutions,
            deletions: self.deletions + o.deletions,
            insertions: self.insertions + o.insertions,
            ref_len: self.ref_len + o.ref_len,
        }
    }
}

impl std::iter::Sum for AlignmentCounts {
    fn sum<I: Iterator<Item = AlignmentCounts>>(iter: I) -> AlignmentCounts {
        iter.fold(AlignmentCounts::default(), |a, b| a + b)
    }
}

/// Minimum edit distance alignment with unit costs.
///
/// Among alignments of equal cost the traceback prefers a substitution over
/// a deletion over an insertion, so the split of the total into S/D/I is
/// deterministic.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> AlignmentCounts {
    let n = reference.len();
    let m = hypothesis.len();
    let width = m + 1;
    let mut cost = vec![0u32; (n + 1) * width];
    for (j, c) in cost[..width].iter_mut().enumerate() {
        *c = j as u32;
    }
    for i in 1..=n {
        cost[i * width] = i as u32;
        for j in 1..=m {
            let diag = cost[(i - 1) * width + j - 1] + u32::from(reference[i - 1] != hypothesis[j - 1]);
            let del = cost[(i - 1) * width + j] + 1;
            let ins = cost[i * width + j - 1] + 1;
            cost[i * width + j] = diag.min(del).min(ins);
        }
    }

    let mut counts = AlignmentCounts {
        ref_len: n as u64,
        ..AlignmentCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * width + j];
        if i > 0 && j > 0 {
            let mismatch = reference[i - 1] != hypothesis[j - 1];
            if cost[(i - 1) * width + j - 1] + u32::from(mismatch) == here {
                if mismatch {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[(i - 1) * width + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: u64,
    pub counts: AlignmentCounts,
}

/// Align one utterance. The reference must be non-empty.
pub fn score_utterance<T: PartialEq>(id: u64, reference: &[T], hypothesis: &[T]) -> Result<UtteranceScore> {
    if reference.is_empty() {
        return Err(Error::Domain(format!(
            "utterance {id} has an empty reference ({} hypothesis tokens)",
            hypothesis.len()
        )));
    }
    Ok(UtteranceScore {
        id,
        counts: align(reference, hypothesis),
    })
}

/// Error-weighted corpus WER: total edits over total reference length.
pub fn corpus_wer(scores: &[UtteranceScore]) -> Result<f64> {
    let total: AlignmentCounts = scores.iter().map(|s| s.counts).sum();
    if total.ref_len == 0 {
        return Err(Error::Domain("corpus WER undefined: total reference length is 0".into()));
    }
    total.wer()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiReport {
    pub point_wer: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl CiReport {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

pub const DEFAULT_RESAMPLES: usize = 1000;

/// 1-based nearest rank of quantile `q` among `n` sorted values.
fn nearest_rank(q: f64, n: usize) -> usize {
    // Guard against 0.025 * 1000 landing a hair above 25.
    let rank = (q * n as f64 - 1e-9).ceil() as usize;
    rank.clamp(1, n)
}

/// Percentile bootstrap over utterances.
///
/// Each of the `resamples` draws picks `scores.len()` utterances with
/// replacement and recomputes the corpus WER. Resample `b` has its own
/// generator derived from `(seed, b)`, so results do not depend on the order
/// resamples are evaluated in.
pub fn bootstrap_ci(scores: &[UtteranceScore], resamples: usize, level: f64, seed: u64) -> Result<CiReport> {
    if scores.is_empty() {
        return Err(Error::Domain("bootstrap needs at least one scored utterance".into()));
    }
    if resamples < 100 {
        return Err(Error::Config(format!("bootstrap needs at least 100 resamples, got {resamples}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level must be in (0, 1), got {level}")));
    }
    let point_wer = corpus_wer(scores)?;
    let edits: Vec<u64> = scores.iter().map(|s| s.counts.edits()).collect();
    let lens: Vec<u64> = scores.iter().map(|s| s.counts.ref_len).collect();
    let n = scores.len();
    let mut stats: Vec<f64> = (0..resamples)
        .map(|b| {
            let mut rng = seed::rng(seed::derive(seed, "bootstrap", b as u64));
            let (mut e, mut l) = (0u64, 0u64);
            for _ in 0..n {
                let k = rng.random_range(0..n);
                e += edits[k];
                l += lens[k];
            }
            e as f64 / l as f64
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lo = stats[nearest_rank(tail, resamples) - 1];
    let hi = stats[nearest_rank(1.0 - tail, resamples) - 1];
    Ok(CiReport {
        point_wer,
        lo,
        hi,
        level,
        resamples,
        seed,
    })
}

/// Totals for a scored corpus, as written by the `score` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub utterances: usize,
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
    pub ref_len: u64,
    pub wer: f64,
}

/// Score line-aligned transcripts: one utterance per line, whitespace-separated tokens.
pub fn score_transcripts(reference: &str, hypothesis: &str) -> Result<(Vec<UtteranceScore>, ScoreSummary)> {
    let refs: Vec<&str> = reference.lines().collect();
    let hyps: Vec<&str> = hypothesis.lines().collect();
    if refs.len() != hyps.len() {
        return Err(Error::Format(format!(
            "reference has {} lines but hypothesis has {}",
            refs.len(),
            hyps.len()
        )));
    }
    let scores = refs
        .iter()
        .zip(&hyps)
        .enumerate()
        .map(|(i, (r, h))| {
            let r: Vec<&str> = r.split_whitespace().collect();
            let h: Vec<&str> = h.split_whitespace().collect();
            score_utterance(i as u64 + 1, &r, &h)
        })
        .collect::<Result<Vec<_>>>()?;
    let total: AlignmentCounts = scores.iter().map(|s| s.counts).sum();
    let summary = ScoreSummary {
        utterances: scores.len(),
        substitutions: total.substitutions,
        deletions: total.deletions,
        insertions: total.insertions,
        ref_len: total.ref_len,
        wer: corpus_wer(&scores)?,
    };
    Ok((scores, summary))
}
