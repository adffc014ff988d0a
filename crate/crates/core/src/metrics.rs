//! Agreement metrics between label and rationale attribution vectors, the
//! sanity metrics reported next to them, and corpus summaries.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(a: &[f64], b: &[f64], min_len: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() < min_len {
        return Err(Error::Metric(format!("need at least {min_len} entries, got {}", a.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite entry".into()));
    }
    Ok(())
}

/// Number of pairs among `n` items.
fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Sum of pairs within runs of equal adjacent values in `keys[idx]`.
fn tied_pairs(idx: &[usize], keys: &[f64]) -> u64 {
    let mut total = 0;
    let mut run = 1u64;
    for w in idx.windows(2) {
        if keys[w[0]] == keys[w[1]] {
            run += 1;
        } else {
            total += pairs(run);
            run = 1;
        }
    }
    total + pairs(run)
}

/// Merge sort of `idx` by `keys`, counting inversions.
fn sort_counting_swaps(idx: &mut [usize], keys: &[f64], buf: &mut Vec<usize>) -> u64 {
    let n = idx.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut idx[..mid], keys, buf) + sort_counting_swaps(&mut idx[mid..], keys, buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if keys[idx[j]] < keys[idx[i]] {
            buf.push(idx[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf.push(idx[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&idx[i..mid]);
    buf.extend_from_slice(&idx[j..n]);
    idx.copy_from_slice(buf);
    swaps
}

/// Raw pair counts behind Kendall's tau-b.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TauCounts {
    /// Concordant minus discordant pairs.
    pub score: i64,
    pub pairs: u64,
    pub ties_a: u64,
    pub ties_b: u64,
}

impl TauCounts {
    /// `(c - d) / sqrt((n0 - n1)(n0 - n2))`; undefined when either
    /// ranking is constant.
    pub fn tau_b(&self) -> Result<f64> {
        let da = (self.pairs - self.ties_a) as f64;
        let db = (self.pairs - self.ties_b) as f64;
        if da == 0.0 || db == 0.0 {
            return Err(Error::Metric("tau-b is undefined for a constant ranking".into()));
        }
        Ok(self.score as f64 / (da * db).sqrt())
    }
}

/// Pair counts in O(n log n) (Knight's algorithm).
pub fn kendall_counts(a: &[f64], b: &[f64]) -> Result<TauCounts> {
    check_pair(a, b, 2)?;
    // -0.0 and 0.0 tie under == but not under total_cmp
    let a: &[f64] = &a.iter().map(|x| x + 0.0).collect::<Vec<_>>();
    let b: &[f64] = &b.iter().map(|x| x + 0.0).collect::<Vec<_>>();
    let n = a.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let ties_a = tied_pairs(&idx, a);
    // pairs tied in both
    let mut joint = 0u64;
    let mut run = 1u64;
    for w in idx.windows(2) {
        if a[w[0]] == a[w[1]] && b[w[0]] == b[w[1]] {
            run += 1;
        } else {
            joint += pairs(run);
            run = 1;
        }
    }
    joint += pairs(run);
    let mut buf = Vec::with_capacity(n);
    let swaps = sort_counting_swaps(&mut idx, b, &mut buf);
    let ties_b = tied_pairs(&idx, b);
    let n0 = pairs(n as u64);
    let score = n0 as i64 - ties_a as i64 - ties_b as i64 + joint as i64 - 2 * swaps as i64;
    Ok(TauCounts {
        score,
        pairs: n0,
        ties_a,
        ties_b,
    })
}

/// Kendall's tau-b between the rankings induced by `a` and `b`.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    kendall_counts(a, b)?.tau_b()
}

/// Cosine similarity, optionally of the absolute values. Clamped to the
/// mathematical range to absorb rounding.
pub fn cosine(a: &[f64], b: &[f64], absolute: bool) -> Result<f64> {
    check_pair(a, b, 1)?;
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = if absolute {
        a.iter().zip(b).map(|(x, y)| x.abs() * y.abs()).sum()
    } else {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    };
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k_indices(v: &[f64], k: usize, by_abs: bool) -> Vec<usize> {
    let key = |i: usize| if by_abs { v[i].abs() } else { v[i] };
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| key(j).total_cmp(&key(i)).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

/// Size of the intersection of the two top-k index sets.
pub fn topk_overlap(a: &[f64], b: &[f64], k: usize, by_abs: bool) -> Result<usize> {
    check_pair(a, b, 1)?;
    if k == 0 || k > a.len() {
        return Err(Error::Metric(format!("k={k} outside 1..={}", a.len())));
    }
    let ta = top_k_indices(a, k, by_abs);
    let tb = top_k_indices(b, k, by_abs);
    Ok(ta.iter().filter(|i| tb.contains(i)).count())
}

/// Jensen-Shannon divergence (natural log) between the distribution of
/// |v| and the uniform distribution over its entries. At most ln 2.
pub fn jsd_uniform(v: &[f64]) -> Result<f64> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Metric("non-finite entry".into()));
    }
    let total: f64 = v.iter().map(|x| x.abs()).sum();
    if total == 0.0 {
        return Err(Error::ZeroVector);
    }
    let q = 1.0 / v.len() as f64;
    let kl_term = |p: f64, m: f64| if p == 0.0 { 0.0 } else { p * (p / m).ln() };
    let mut js = 0.0;
    for x in v {
        let p = x.abs() / total;
        let m = 0.5 * (p + q);
        js += 0.5 * kl_term(p, m) + 0.5 * kl_term(q, m);
    }
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, 2)?;
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Metric("spearman correlation is undefined for a constant input".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Agreement between one instance's label and rationale attributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationRecord {
    pub id: String,
    pub kendall_tau_raw: f64,
    pub kendall_tau_abs: f64,
    pub cosine_raw: f64,
    pub cosine_abs: f64,
    pub topk_overlap: usize,
    pub jsd_label_uniform: f64,
    pub jsd_rationale_uniform: f64,
    pub l1_norm_label: f64,
    pub l1_norm_rationale: f64,
}

pub const DEFAULT_TOP_K: usize = 5;

impl AssociationRecord {
    /// All metrics for one (label, rationale) pair; `k` is capped at the
    /// vector length.
    pub fn compute(id: &str, label: &[f64], rationale: &[f64], k: usize) -> Result<Self> {
        let abs = |v: &[f64]| v.iter().map(|x| x.abs()).collect::<Vec<_>>();
        Ok(AssociationRecord {
            id: id.to_string(),
            kendall_tau_raw: kendall_tau(label, rationale)?,
            kendall_tau_abs: kendall_tau(&abs(label), &abs(rationale))?,
            cosine_raw: cosine(label, rationale, false)?,
            cosine_abs: cosine(label, rationale, true)?,
            topk_overlap: topk_overlap(label, rationale, k.min(label.len()), false)?,
            jsd_label_uniform: jsd_uniform(label)?,
            jsd_rationale_uniform: jsd_uniform(rationale)?,
            l1_norm_label: label.iter().map(|x| x.abs()).sum(),
            l1_norm_rationale: rationale.iter().map(|x| x.abs()).sum(),
        })
    }

    pub fn check_ranges(&self) -> Result<()> {
        let checks = [
            ("kendall_tau_raw", self.kendall_tau_raw, -1.0, 1.0),
            ("kendall_tau_abs", self.kendall_tau_abs, -1.0, 1.0),
            ("cosine_raw", self.cosine_raw, -1.0, 1.0),
            ("cosine_abs", self.cosine_abs, 0.0, 1.0),
            ("jsd_label_uniform", self.jsd_label_uniform, 0.0, std::f64::consts::LN_2),
            ("jsd_rationale_uniform", self.jsd_rationale_uniform, 0.0, std::f64::consts::LN_2),
            ("l1_norm_label", self.l1_norm_label, 0.0, f64::INFINITY),
            ("l1_norm_rationale", self.l1_norm_rationale, 0.0, f64::INFINITY),
        ];
        for (name, v, lo, hi) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(Error::Metric(format!("{name}={v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

pub const BIN_WIDTH: f64 = 0.05;

/// Fixed-width histogram over `[lo, hi]`; the top edge falls in the last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub metric: String,
    pub lo: f64,
    pub width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(metric: &str, lo: f64, hi: f64, width: f64) -> Self {
        let bins = ((hi - lo) / width - 1e-9).ceil().max(1.0) as usize;
        Histogram {
            metric: metric.to_string(),
            lo,
            width,
            counts: vec![0; bins],
        }
    }

    pub fn bin_of(&self, v: f64) -> usize {
        (((v - self.lo) / self.width).floor().max(0.0) as usize).min(self.counts.len() - 1)
    }

    pub fn add(&mut self, v: f64) {
        let b = self.bin_of(v);
        self.counts[b] += 1;
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        (self.lo + bin as f64 * self.width, self.lo + (bin + 1) as f64 * self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
}

fn stat(values: &[f64]) -> Stat {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Stat {
        mean: values.iter().sum::<f64>() / n as f64,
        median,
    }
}

/// Corpus-level view of a set of association records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub instances: usize,
    pub parse_failures: usize,
    pub kendall_tau_raw: Stat,
    pub kendall_tau_abs: Stat,
    pub cosine_raw: Stat,
    pub cosine_abs: Stat,
    pub topk_overlap: Stat,
    pub jsd_label_uniform: Stat,
    pub jsd_rationale_uniform: Stat,
    pub l1_norm_label: Stat,
    pub l1_norm_rationale: Stat,
    pub histograms: Vec<Histogram>,
}

type Field = (&'static str, fn(&AssociationRecord) -> f64, f64, f64);

const FIELDS: [Field; 7] = [
    ("kendall_tau_raw", |r| r.kendall_tau_raw, -1.0, 1.0),
    ("kendall_tau_abs", |r| r.kendall_tau_abs, -1.0, 1.0),
    ("cosine_raw", |r| r.cosine_raw, -1.0, 1.0),
    ("cosine_abs", |r| r.cosine_abs, 0.0, 1.0),
    ("jsd_label_uniform", |r| r.jsd_label_uniform, 0.0, std::f64::consts::LN_2),
    ("jsd_rationale_uniform", |r| r.jsd_rationale_uniform, 0.0, std::f64::consts::LN_2),
    ("topk_overlap", |r| r.topk_overlap as f64, 0.0, DEFAULT_TOP_K as f64 + 1.0),
];

/// Means, medians and histograms. `parse_failures` counts instances
/// excluded before the records were computed.
pub fn summarize(records: &[AssociationRecord], parse_failures: usize) -> Result<CorpusSummary> {
    if records.is_empty() {
        return Err(Error::Metric("cannot summarize an empty corpus".into()));
    }
    let col = |f: fn(&AssociationRecord) -> f64| stat(&records.iter().map(f).collect::<Vec<_>>());
    let histograms = FIELDS
        .iter()
        .map(|(name, f, lo, hi)| {
            // overlap counts are integers: one bin per value
            let width = if *name == "topk_overlap" { 1.0 } else { BIN_WIDTH };
            let mut h = Histogram::new(name, *lo, *hi, width);
            for r in records {
                h.add(f(r));
            }
            h
        })
        .collect();
    Ok(CorpusSummary {
        instances: records.len(),
        parse_failures,
        kendall_tau_raw: col(|r| r.kendall_tau_raw),
        kendall_tau_abs: col(|r| r.kendall_tau_abs),
        cosine_raw: col(|r| r.cosine_raw),
        cosine_abs: col(|r| r.cosine_abs),
        topk_overlap: col(|r| r.topk_overlap as f64),
        jsd_label_uniform: col(|r| r.jsd_label_uniform),
        jsd_rationale_uniform: col(|r| r.jsd_rationale_uniform),
        l1_norm_label: col(|r| r.l1_norm_label),
        l1_norm_rationale: col(|r| r.l1_norm_rationale),
        histograms,
    })
}

impl CorpusSummary {
    /// Flat `key,value` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["key", "value"])?;
        w.write_record(["instances", &self.instances.to_string()])?;
        w.write_record(["parse_failures", &self.parse_failures.to_string()])?;
        let stats = [
            ("kendall_tau_raw", self.kendall_tau_raw),
            ("kendall_tau_abs", self.kendall_tau_abs),
            ("cosine_raw", self.cosine_raw),
            ("cosine_abs", self.cosine_abs),
            ("topk_overlap", self.topk_overlap),
            ("jsd_label_uniform", self.jsd_label_uniform),
            ("jsd_rationale_uniform", self.jsd_rationale_uniform),
            ("l1_norm_label", self.l1_norm_label),
            ("l1_norm_rationale", self.l1_norm_rationale),
        ];
        for (name, s) in stats {
            w.write_record([format!("{name}_mean"), format!("{:.17e}", s.mean)])?;
            w.write_record([format!("{name}_median"), format!("{:.17e}", s.median)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rows `metric,bin_lo,bin_hi,count`.
    pub fn write_histograms_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "bin_lo", "bin_hi", "count"])?;
        for h in &self.histograms {
            for (i, c) in h.counts.iter().enumerate() {
                let (lo, hi) = h.edges(i);
                w.write_record([h.metric.clone(), format!("{lo:.4}"), format!("{hi:.4}"), c.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-instance records as CSV, one column per field.
pub fn write_records_csv<W: Write>(out: W, records: &[AssociationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: std::io::Read>(input: R) -> Result<Vec<AssociationRecord>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Orders records by id so reductions do not depend on evaluation order.
pub fn sort_records(records: &mut [AssociationRecord]) {
    records.sort_by(|a, b| a.id.cmp(&b.id));
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn tau_examples() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_abs_diff_eq!(kendall_tau(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.8165, epsilon = 1e-4);
        assert!(matches!(kendall_tau(&[1.0], &[1.0]), Err(Error::Metric(_))));
        assert!(matches!(kendall_tau(&[1.0, 2.0], &[1.0]), Err(Error::Metric(_))));
        assert!(matches!(kendall_tau(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Metric(_))));
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine(&[1.0, 2.0], &[2.0, 4.0], false).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0], false).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine(&[1.0, -1.0], &[-1.0, 1.0], false).unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine(&[1.0, -1.0], &[-1.0, 1.0], true).unwrap(), 1.0, epsilon = 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 1.0], false), Err(Error::ZeroVector)));
    }

    #[test]
    fn topk_examples() {
        let v = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6];
        assert_eq!(topk_overlap(&v, &v, 5, false).unwrap(), 5);
        let a = [9.0, 8.0, 7.0, 0.0, 0.0, 0.0];
        let b = [0.0, 0.0, 0.0, 9.0, 8.0, 7.0];
        assert_eq!(topk_overlap(&a, &b, 3, false).unwrap(), 0);
        assert_eq!(topk_overlap(&[5.0, 4.0, 3.0, 2.0], &[2.0, 3.0, 4.0, 5.0], 2, false).unwrap(), 0);
        assert!(matches!(topk_overlap(&a, &b, 0, false), Err(Error::Metric(_))));
        // ties broken towards lower index
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0], 2, false), vec![0, 1]);
        assert_eq!(top_k_indices(&[-5.0, 1.0, 2.0], 1, true), vec![0]);
    }

    #[test]
    fn jsd_examples() {
        assert_abs_diff_eq!(jsd_uniform(&[0.3, -0.3, 0.3]).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(jsd_uniform(&[1.0, 0.0]).unwrap(), 0.2158, epsilon = 1e-4);
        let mut spike = vec![0.0; 10_000];
        spike[0] = 1.0;
        let v = jsd_uniform(&spike).unwrap();
        assert!(v <= 0.6932 && v > 0.69);
        assert!(matches!(jsd_uniform(&[0.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn spearman_examples() {
        assert_abs_diff_eq!(spearman(&[0.0, 5.0, 10.0], &[0.0, 0.1, 0.4]).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0, epsilon = 1e-15);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0, 2.0], &[0.0, 0.0]).is_err());
    }

    fn record(tau: f64) -> AssociationRecord {
        AssociationRecord {
            id: "a".into(),
            kendall_tau_raw: tau,
            kendall_tau_abs: tau,
            cosine_raw: 0.5,
            cosine_abs: 0.6,
            topk_overlap: 2,
            jsd_label_uniform: 0.1,
            jsd_rationale_uniform: 0.2,
            l1_norm_label: 3.0,
            l1_norm_rationale: 4.0,
        }
    }

    #[test]
    fn summary_of_one_record() {
        let s = summarize(&[record(0.3)], 2).unwrap();
        assert_eq!(s.kendall_tau_raw.mean, 0.3);
        assert_eq!(s.cosine_abs.median, 0.6);
        assert_eq!(s.l1_norm_rationale.mean, 4.0);
        assert_eq!(s.parse_failures, 2);
        assert!(matches!(summarize(&[], 0), Err(Error::Metric(_))));
    }

    #[test]
    fn zero_tau_lands_in_the_zero_bin() {
        let s = summarize(&vec![record(0.0); 7], 0).unwrap();
        let h = s.histograms.iter().find(|h| h.metric == "kendall_tau_raw").unwrap();
        assert_eq!(h.counts.len(), 40);
        let zero_bin = h.bin_of(0.0);
        assert_eq!(h.edges(zero_bin).0, 0.0);
        assert_eq!(h.counts[zero_bin], 7);
        assert_eq!(h.counts.iter().sum::<usize>(), 7);
        let jsd = s.histograms.iter().find(|h| h.metric == "jsd_label_uniform").unwrap();
        assert_eq!(jsd.counts.len(), 14);
        assert_eq!(jsd.bin_of(std::f64::consts::LN_2), 13);
    }

    #[test]
    fn records_csv_round_trip() {
        let rs = vec![record(0.25), record(-1.0 / 3.0)];
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &rs).unwrap();
        assert_eq!(read_records_csv(buf.as_slice()).unwrap(), rs);
    }
}
