//! Accuracy for classification; MAP and MRR for answer selection.

use crate::error::{Error, Result};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::dim("accuracy", &[preds.len()], &[labels.len()]));
    }
    if preds.is_empty() {
        return Err(Error::InvalidData("accuracy of an empty set".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// A candidate's model score and gold relevance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub relevant: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingMetrics {
    pub map: f64,
    pub mrr: f64,
    /// Groups that entered the averages.
    pub groups: usize,
}

/// Sorts by descending score; equal scores keep their input order.
fn ranked(group: &[Scored]) -> Vec<Scored> {
    let mut v = group.to_vec();
    v.sort_by(|a, b| b.score.total_cmp(&a.score));
    v
}

/// Average precision and reciprocal rank of one group, or `None` with no relevant candidate.
pub fn average_precision_and_rr(group: &[Scored]) -> Option<(f64, f64)> {
    let ranked = ranked(group);
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut rr = None;
    for (k, c) in ranked.iter().enumerate() {
        if c.relevant {
            hits += 1;
            precision_sum += hits as f64 / (k + 1) as f64;
            rr.get_or_insert(1.0 / (k + 1) as f64);
        }
    }
    rr.map(|rr| (precision_sum / hits as f64, rr))
}

/// MAP and MRR over groups. Groups without a relevant candidate are skipped,
/// or counted as zero when `include_unanswerable` is set.
pub fn map_mrr(groups: &[Vec<Scored>], include_unanswerable: bool) -> Result<RankingMetrics> {
    let mut ap_sum = 0.0;
    let mut rr_sum = 0.0;
    let mut counted = 0usize;
    for g in groups {
        match average_precision_and_rr(g) {
            Some((ap, rr)) => {
                ap_sum += ap;
                rr_sum += rr;
                counted += 1;
            }
            None if include_unanswerable => counted += 1,
            None => {}
        }
    }
    if counted == 0 {
        return Err(Error::InvalidData("no group with a relevant candidate".into()));
    }
    Ok(RankingMetrics {
        map: ap_sum / counted as f64,
        mrr: rr_sum / counted as f64,
        groups: counted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(scores: &[f64], relevant: &[usize]) -> Vec<Scored> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &score)| Scored {
                score,
                relevant: relevant.contains(&i),
            })
            .collect()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 1]).unwrap(), 2.0 / 3.0);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn closed_form_rankings() {
        let top = group(&[0.9, 0.1, 0.2], &[0]);
        let m = map_mrr(&[top], false).unwrap();
        assert_eq!((m.map, m.mrr), (1.0, 1.0));

        let third = group(&[0.9, 0.8, 0.7, 0.6, 0.5], &[2]);
        let m = map_mrr(&[third], false).unwrap();
        assert_eq!((m.map, m.mrr), (1.0 / 3.0, 1.0 / 3.0));

        let two = group(&[0.9, 0.8, 0.7], &[0, 2]);
        let m = map_mrr(&[two], false).unwrap();
        assert_eq!(m.map, (1.0 + 2.0 / 3.0) / 2.0);
        assert_eq!(m.mrr, 1.0);
    }

    #[test]
    fn ties_keep_input_order() {
        let g = group(&[0.5, 0.5, 0.5], &[1]);
        assert_eq!(average_precision_and_rr(&g), Some((0.5, 0.5)));
    }

    #[test]
    fn unanswerable_groups() {
        let answered = group(&[0.9, 0.1], &[0]);
        let none = group(&[0.3, 0.2], &[]);
        let m = map_mrr(&[answered.clone(), none.clone()], false).unwrap();
        assert_eq!((m.map, m.groups), (1.0, 1));
        let m = map_mrr(&[answered, none.clone()], true).unwrap();
        assert_eq!((m.map, m.groups), (0.5, 2));
        assert!(map_mrr(&[none], false).is_err());
    }
}
