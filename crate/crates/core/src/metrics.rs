//! Verification and ranking metrics.

use std::cmp::Ordering;

use rand::Rng;

use crate::data::{DescriptorSet, UNLABELED};
use crate::error::{Error, Result};
use crate::seed;

/// Which direction of a score means "more similar".
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    LargerIsSimilar,
    SmallerIsSimilar,
}

/// Cap on negative pairs scored by [`verification_scores`].
pub const MAX_NEGATIVES: usize = 2_000_000;

/// False positive rate at the most stringent threshold that still accepts
/// at least `recall` of the positives. Scores tied with the threshold are
/// accepted.
pub fn fpr_at_recall(pos: &[f64], neg: &[f64], recall: f64, polarity: Polarity) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("fpr_at_recall needs positive and negative scores"));
    }
    if !(recall > 0.0 && recall <= 1.0) {
        return Err(Error::invalid(format!("recall {recall} outside (0, 1]")));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    // orient so that larger is more similar
    let orient = |v: f64| match polarity {
        Polarity::LargerIsSimilar => v,
        Polarity::SmallerIsSimilar => -v,
    };
    let mut p: Vec<f64> = pos.iter().map(|&v| orient(v)).collect();
    p.sort_by(|a, b| b.partial_cmp(a).expect("no NaN"));
    let need = ((recall * p.len() as f64) - 1e-9).ceil().clamp(1.0, p.len() as f64) as usize;
    let threshold = p[need - 1];
    let passing = neg.iter().filter(|&&v| orient(v) >= threshold).count();
    Ok(passing as f64 / neg.len() as f64)
}

/// Average precision of a ranked relevance list.
pub fn average_precision(relevant: &[bool]) -> Result<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::invalid("ranking without relevant items"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

fn unit_f64(row: &[f32]) -> Vec<f64> {
    let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v
    } else {
        v.into_iter().map(|x| x / n).collect()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distances from `query` to every gallery row, ranked ascending with the
/// gallery index breaking ties.
fn ranked(query: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
    let d: Vec<f64> = gallery.iter().map(|g| distance(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

fn check_dims(a: &DescriptorSet, b: &DescriptorSet) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::invalid(format!("descriptor dimensions differ: {} vs {}", a.dim, b.dim)));
    }
    Ok(())
}

/// Mean average precision of ranking `gallery` for every query by
/// normalized-L2 distance, co-identity items relevant.
pub fn matching_map(query: &DescriptorSet, gallery: &DescriptorSet) -> Result<f64> {
    check_dims(query, gallery)?;
    if query.is_empty() {
        return Err(Error::invalid("empty query set"));
    }
    let g: Vec<Vec<f64>> = (0..gallery.len()).map(|i| unit_f64(gallery.row(i))).collect();
    let mut sum = 0.0;
    for qi in 0..query.len() {
        let label = query.labels[qi];
        if label == UNLABELED {
            return Err(Error::invalid(format!("query {qi} has no identity label")));
        }
        if !gallery.labels.contains(&label) {
            return Err(Error::invalid(format!("identity {label} of query {qi} is absent from the gallery")));
        }
        let order = ranked(&unit_f64(query.row(qi)), &g);
        let rel: Vec<bool> = order.iter().map(|&k| gallery.labels[k] == label).collect();
        sum += average_precision(&rel)?;
    }
    Ok(sum / query.len() as f64)
}

/// Leave-one-out retrieval mAP: every descriptor with at least one
/// co-identity partner queries all others.
pub fn retrieval_map(set: &DescriptorSet) -> Result<f64> {
    let rows: Vec<Vec<f64>> = (0..set.len()).map(|i| unit_f64(set.row(i))).collect();
    let mut sum = 0.0;
    let mut queries = 0usize;
    for q in 0..set.len() {
        let label = set.labels[q];
        if label == UNLABELED {
            return Err(Error::invalid(format!("descriptor {q} has no identity label")));
        }
        let others: Vec<usize> = (0..set.len()).filter(|&k| k != q).collect();
        if !others.iter().any(|&k| set.labels[k] == label) {
            continue;
        }
        let gallery: Vec<Vec<f64>> = others.iter().map(|&k| rows[k].clone()).collect();
        let order = ranked(&rows[q], &gallery);
        let rel: Vec<bool> = order.iter().map(|&k| set.labels[others[k]] == label).collect();
        sum += average_precision(&rel)?;
        queries += 1;
    }
    if queries == 0 {
        return Err(Error::invalid("no identity has two descriptors"));
    }
    Ok(sum / queries as f64)
}

/// Normalized-L2 distances of all co-identity pairs and of cross-identity
/// pairs (all of them, or a seeded sample of [`MAX_NEGATIVES`]).
pub fn verification_scores(set: &DescriptorSet) -> Result<(Vec<f64>, Vec<f64>)> {
    if set.labels.contains(&UNLABELED) {
        return Err(Error::invalid("verification needs identity labels"));
    }
    let rows: Vec<Vec<f64>> = (0..set.len()).map(|i| unit_f64(set.row(i))).collect();
    let n = set.len();
    let mut pos = Vec::new();
    let mut cross = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if set.labels[i] == set.labels[j] {
                pos.push(distance(&rows[i], &rows[j]));
            } else {
                cross += 1;
            }
        }
    }
    let mut neg = Vec::new();
    if cross <= MAX_NEGATIVES {
        for i in 0..n {
            for j in i + 1..n {
                if set.labels[i] != set.labels[j] {
                    neg.push(distance(&rows[i], &rows[j]));
                }
            }
        }
    } else {
        let mut rng = seed::rng(0, "verification-negatives");
        while neg.len() < MAX_NEGATIVES {
            let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if set.labels[i] != set.labels[j] {
                neg.push(distance(&rows[i], &rows[j]));
            }
        }
    }
    Ok((pos, neg))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub fpr95: f64,
    pub map_matching: f64,
    pub map_retrieval: f64,
    pub positives: usize,
    pub negatives: usize,
    pub queries: usize,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "fpr95,map_matching,map_retrieval,positives,negatives,queries";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.fpr95, self.map_matching, self.map_retrieval, self.positives, self.negatives, self.queries
        )
    }
}

/// Splits a labelled set into matching queries (first descriptor of every
/// identity with a partner) and the gallery (everything else).
pub fn matching_split(set: &DescriptorSet) -> (Vec<usize>, Vec<usize>) {
    let mut count = std::collections::HashMap::<u32, usize>::new();
    for &l in &set.labels {
        *count.entry(l).or_default() += 1;
    }
    let mut seen = std::collections::HashSet::new();
    let (mut query, mut gallery) = (Vec::new(), Vec::new());
    for (i, &l) in set.labels.iter().enumerate() {
        if count[&l] >= 2 && seen.insert(l) {
            query.push(i);
        } else {
            gallery.push(i);
        }
    }
    (query, gallery)
}

/// All three metrics on one labelled set.
pub fn evaluate(set: &DescriptorSet) -> Result<Metrics> {
    let (pos, neg) = verification_scores(set)?;
    let fpr95 = fpr_at_recall(&pos, &neg, 0.95, Polarity::SmallerIsSimilar)?;
    let (q, g) = matching_split(set);
    let map_matching = matching_map(&set.subset(&q), &set.subset(&g))?;
    let map_retrieval = retrieval_map(set)?;
    Ok(Metrics {
        fpr95,
        map_matching,
        map_retrieval,
        positives: pos.len(),
        negatives: neg.len(),
        queries: q.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_scores_give_zero() {
        let pos = [0.1, 0.2, 0.3];
        let neg = [0.5, 0.9];
        assert_eq!(fpr_at_recall(&pos, &neg, 0.95, Polarity::SmallerIsSimilar).unwrap(), 0.0);
        assert_eq!(fpr_at_recall(&neg, &pos, 0.95, Polarity::LargerIsSimilar).unwrap(), 0.0);
    }

    #[test]
    fn all_tied_gives_one() {
        assert_eq!(fpr_at_recall(&[0.5; 4], &[0.5; 6], 0.95, Polarity::SmallerIsSimilar).unwrap(), 1.0);
    }

    #[test]
    fn empty_is_invalid() {
        assert!(fpr_at_recall(&[], &[1.0], 0.95, Polarity::LargerIsSimilar).is_err());
        assert!(fpr_at_recall(&[1.0], &[], 0.95, Polarity::LargerIsSimilar).is_err());
    }

    #[test]
    fn hand_computed_ap() {
        // relevant at ranks 1, 3, 5: (1 + 2/3 + 3/5) / 3
        let ap = average_precision(&[true, false, true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0 + 0.6) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn self_gallery_is_perfect() {
        let set = DescriptorSet::new(2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0], vec![0, 1, 2]).unwrap();
        assert_eq!(matching_map(&set, &set).unwrap(), 1.0);
    }

    #[test]
    fn absent_identity_is_invalid() {
        let q = DescriptorSet::new(2, vec![1.0, 0.0], vec![7]).unwrap();
        let g = DescriptorSet::new(2, vec![1.0, 0.0], vec![3]).unwrap();
        assert!(matching_map(&q, &g).is_err());
    }
}
