//! Retrieval metrics and the cross-camera ranking protocol.
//!
//! Each query is ranked against every test state at another camera.
//! Relevant items share the query's vehicle. Ties in score are broken by
//! ascending state id.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mrf::PathProposal;
use crate::network::{distance, Dataset, Split, StateId, StateIx};

/// `Σ_k P(k)·rel(k) / N_gt` over a ranked list of relevance flags.
///
/// The sum is accumulated as an exact fraction while it fits in `u128`, so
/// small cases such as `5/6` come out correctly rounded.
pub fn average_precision(relevant: &[bool], n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::InvalidArgument("average precision needs N_gt ≥ 1".into()));
    }
    let mut hits = 0u128;
    let mut exact = Some((0u128, 1u128));
    let mut float_sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            let k = k as u128 + 1;
            float_sum += hits as f64 / k as f64;
            exact = exact.and_then(|(n, d)| add_fraction(n, d, hits, k));
        }
    }
    if hits > n_gt as u128 {
        return Err(Error::InvalidArgument(format!(
            "{hits} relevant items exceed N_gt = {n_gt}"
        )));
    }
    let n_gt = n_gt as u128;
    Ok(match exact.and_then(|(n, d)| Some((n, d.checked_mul(n_gt)?))) {
        Some((n, d)) => {
            let g = gcd(n, d);
            (n / g) as f64 / (d / g) as f64
        }
        None => float_sum / n_gt as f64,
    })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

fn add_fraction(n1: u128, d1: u128, n2: u128, d2: u128) -> Option<(u128, u128)> {
    let g = gcd(d1, d2);
    let d = (d1 / g).checked_mul(d2)?;
    let n = n1.checked_mul(d2 / g)?.checked_add(n2.checked_mul(d1 / g)?)?;
    let r = gcd(n, d);
    Some((n / r, d / r))
}

pub fn mean_ap(aps: &[f64]) -> Result<f64> {
    mean(aps, "mean AP of an empty query list")
}

fn mean(values: &[f64], what: &str) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(what.into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// `|A ∩ B| / |A ∪ B|`.
pub fn jaccard(proposed: &BTreeSet<StateId>, truth: &BTreeSet<StateId>) -> Result<f64> {
    let union = proposed.union(truth).count();
    if union == 0 {
        return Err(Error::InvalidArgument("jaccard of two empty sets".into()));
    }
    Ok(proposed.intersection(truth).count() as f64 / union as f64)
}

/// Average Jaccard similarity over positive query pairs.
pub fn ajs(values: &[f64]) -> Result<f64> {
    mean(values, "AJS needs at least one positive pair")
}

/// Hand-crafted spatio-temporal relation: normalized time gap times
/// normalized camera distance. Larger means less related.
pub fn str_baseline(
    t_i: f64,
    t_j: f64,
    camera_i: [f64; 2],
    camera_j: [f64; 2],
    t_max: f64,
    d_max: f64,
) -> Result<f64> {
    if !(t_max > 0.0 && d_max > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "STR normalizers must be positive (T_max = {t_max}, D_max = {d_max})"
        )));
    }
    Ok((t_i - t_j).abs() / t_max * (distance(camera_i, camera_j) / d_max))
}

/// Scores a (query, gallery) pair; larger is more similar.
pub trait PairScorer: Sync {
    fn score(&self, query: StateIx, gallery: StateIx) -> Result<f64>;
}

impl<F> PairScorer for F
where
    F: Fn(StateIx, StateIx) -> Result<f64> + Sync,
{
    fn score(&self, query: StateIx, gallery: StateIx) -> Result<f64> {
        self(query, gallery)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedResult {
    pub query: StateId,
    /// Gallery ids by descending score, ties by ascending id.
    pub gallery: Vec<StateId>,
    pub scores: Vec<f64>,
    pub relevant: Vec<bool>,
    pub n_gt: usize,
}

impl RankedResult {
    /// 1-based rank of the first relevant item.
    pub fn first_hit(&self) -> Option<usize> {
        self.relevant.iter().position(|&r| r).map(|p| p + 1)
    }

    pub fn average_precision(&self) -> Result<f64> {
        average_precision(&self.relevant, self.n_gt)
    }
}

/// Fraction of queries with a relevant item within the top `k`.
pub fn cmc_topk(results: &[RankedResult], k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results
        .iter()
        .filter(|r| r.first_hit().is_some_and(|h| h <= k))
        .count();
    hits as f64 / results.len() as f64
}

/// Test states at other cameras than `query`, in dataset order.
pub fn gallery_of(ds: &Dataset, query: StateIx) -> Vec<StateIx> {
    let cam = ds.state(query).camera;
    ds.split_indices(Split::Test)
        .into_iter()
        .filter(|&g| ds.state(g).camera != cam)
        .collect()
}

fn is_relevant(ds: &Dataset, query: StateIx, g: StateIx) -> bool {
    let v = ds.state(query).vehicle;
    v.is_some() && ds.state(g).vehicle == v
}

/// Ranks the gallery of one query. `None` if the query has no cross-camera
/// ground truth.
pub fn rank_query<S: PairScorer + ?Sized>(ds: &Dataset, query: StateIx, scorer: &S) -> Result<Option<RankedResult>> {
    let gallery = gallery_of(ds, query);
    let n_gt = gallery.iter().filter(|&&g| is_relevant(ds, query, g)).count();
    if n_gt == 0 {
        return Ok(None);
    }
    let mut scored = Vec::with_capacity(gallery.len());
    for g in gallery {
        let s = scorer.score(query, g)?;
        if !s.is_finite() {
            return Err(Error::NonFinite(format!(
                "score of query {} against {}",
                ds.state(query).id,
                ds.state(g).id
            )));
        }
        scored.push((s, ds.state(g).id, is_relevant(ds, query, g)));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(Some(RankedResult {
        query: ds.state(query).id,
        gallery: scored.iter().map(|s| s.1).collect(),
        scores: scored.iter().map(|s| s.0).collect(),
        relevant: scored.iter().map(|s| s.2).collect(),
        n_gt,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub results: Vec<RankedResult>,
    /// Queries without any cross-camera ground truth.
    pub excluded: Vec<StateId>,
}

/// Ranks every query of the dataset. Output order follows the query order of
/// the dataset regardless of `threads`.
pub fn rank_queries<S: PairScorer + ?Sized>(ds: &Dataset, scorer: &S, threads: usize) -> Result<Ranking> {
    let queries = ds.split_indices(Split::Query);
    let ranked: Vec<Option<RankedResult>> = if threads <= 1 {
        queries.iter().map(|&q| rank_query(ds, q, scorer)).collect::<Result<_>>()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(|| queries.par_iter().map(|&q| rank_query(ds, q, scorer)).collect::<Result<_>>())?
    };
    let mut results = Vec::new();
    let mut excluded = Vec::new();
    for (&q, r) in queries.iter().zip(ranked) {
        match r {
            Some(r) => results.push(r),
            None => {
                tracing::warn!(query = ds.state(q).id.0, "query has no cross-camera ground truth, excluded");
                excluded.push(ds.state(q).id);
            }
        }
    }
    Ok(Ranking { results, excluded })
}

/// The vehicle's test sightings with timestamps in `[t_a, t_b]`.
pub fn ground_truth_path(ds: &Dataset, a: StateIx, b: StateIx) -> BTreeSet<StateId> {
    let (sa, sb) = (ds.state(a), ds.state(b));
    let (lo, hi) = (sa.timestamp.min(sb.timestamp), sa.timestamp.max(sb.timestamp));
    let Some(v) = sa.vehicle else {
        return BTreeSet::new();
    };
    ds.split_indices(Split::Test)
        .into_iter()
        .map(|ix| ds.state(ix))
        .filter(|s| s.vehicle == Some(v) && s.timestamp >= lo && s.timestamp <= hi)
        .map(|s| s.id)
        .collect()
}

/// Jaccard between a proposal's states (endpoints included) and the ground
/// truth path. An infeasible proposal counts as the empty set.
pub fn path_jaccard(ds: &Dataset, a: StateIx, b: StateIx, proposal: Option<&PathProposal>) -> Result<f64> {
    let truth = ground_truth_path(ds, a, b);
    let proposed: BTreeSet<StateId> = proposal
        .map(|p| p.state_ids(ds).into_iter().collect())
        .unwrap_or_default();
    jaccard(&proposed, &truth)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRecord {
    pub query: StateId,
    pub ap: f64,
    pub first_hit: Option<usize>,
    pub n_gt: usize,
}

/// Metrics of one scorer over all evaluated queries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    /// `(k, accuracy)` for every `k` up to the largest gallery.
    pub cmc: Vec<(usize, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ajs: Option<f64>,
    pub n_queries: usize,
    pub excluded: Vec<StateId>,
    pub per_query: Vec<QueryRecord>,
}

impl Metrics {
    pub fn from_ranking(ranking: &Ranking) -> Result<Self> {
        let per_query: Vec<QueryRecord> = ranking
            .results
            .iter()
            .map(|r| {
                Ok(QueryRecord {
                    query: r.query,
                    ap: r.average_precision()?,
                    first_hit: r.first_hit(),
                    n_gt: r.n_gt,
                })
            })
            .collect::<Result<_>>()?;
        let aps: Vec<f64> = per_query.iter().map(|q| q.ap).collect();
        let max_k = ranking.results.iter().map(|r| r.gallery.len()).max().unwrap_or(0);
        Ok(Metrics {
            map: mean_ap(&aps)?,
            top1: cmc_topk(&ranking.results, 1),
            top5: cmc_topk(&ranking.results, 5),
            top10: cmc_topk(&ranking.results, 10),
            cmc: (1..=max_k).map(|k| (k, cmc_topk(&ranking.results, k))).collect(),
            ajs: None,
            n_queries: per_query.len(),
            excluded: ranking.excluded.clone(),
            per_query,
        })
    }

    /// CMC curve as `k,accuracy` lines with a header.
    pub fn cmc_csv(&self) -> String {
        let mut out = String::from("k,accuracy\n");
        for (k, acc) in &self.cmc {
            out.push_str(&format!("{k},{acc}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures::{cameras, meta, state};
    use proptest::prelude::*;

    fn ids(v: &[u64]) -> BTreeSet<StateId> {
        v.iter().map(|&i| StateId(i)).collect()
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true, false], 2).unwrap(), 1.0);
        assert_eq!(average_precision(&[true, false, true], 2).unwrap(), 5.0 / 6.0);
        assert_eq!(average_precision(&[false, false], 2).unwrap(), 0.0);
        assert!(average_precision(&[true], 0).is_err());
        assert!(average_precision(&[true, true], 1).is_err());
    }

    #[test]
    fn mean_ap_examples() {
        assert_eq!(mean_ap(&[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mean_ap(&[1.0, 0.0]).unwrap(), 0.5);
        assert!(mean_ap(&[]).is_err());
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&ids(&[1, 2]), &ids(&[1, 2])).unwrap(), 1.0);
        assert_eq!(jaccard(&ids(&[1]), &ids(&[2])).unwrap(), 0.0);
        assert_eq!(jaccard(&ids(&[1, 2]), &ids(&[1, 2, 3])).unwrap(), 2.0 / 3.0);
        assert_eq!(jaccard(&ids(&[]), &ids(&[3])).unwrap(), 0.0);
        assert!(jaccard(&ids(&[]), &ids(&[])).is_err());
    }

    #[test]
    fn ajs_examples() {
        assert_eq!(ajs(&[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(ajs(&[1.0, 0.5]).unwrap(), 0.75);
        assert!(ajs(&[]).is_err());
    }

    #[test]
    fn str_examples() {
        let (o, x) = ([0.0, 0.0], [30.0, 40.0]);
        assert_eq!(str_baseline(0.0, 10.0, o, x, 10.0, 50.0).unwrap(), 1.0);
        assert_eq!(str_baseline(0.0, 10.0, x, x, 10.0, 50.0).unwrap(), 0.0);
        assert_eq!(str_baseline(5.0, 10.0, o, [15.0, 20.0], 10.0, 50.0).unwrap(), 0.25);
        assert!(str_baseline(0.0, 1.0, o, x, 0.0, 50.0).is_err());
        assert!(str_baseline(0.0, 1.0, o, x, 1.0, -1.0).is_err());
    }

    #[test]
    fn cmc_threshold() {
        let r = RankedResult {
            query: StateId(0),
            gallery: (1..=7).map(StateId).collect(),
            scores: vec![0.0; 7],
            relevant: vec![false, false, false, false, false, true, false],
            n_gt: 1,
        };
        assert_eq!(cmc_topk(std::slice::from_ref(&r), 5), 0.0);
        assert_eq!(cmc_topk(std::slice::from_ref(&r), 10), 1.0);
    }

    /// Query 0 (vehicle 1, camera 0); gallery 1..=4 at cameras 1 and 2, two of
    /// them vehicle 1; state 5 shares the query's camera.
    fn five_state() -> Dataset {
        let states = vec![
            state(0, 0, 0.0, Some(1)),
            state(4, 1, 1.0, Some(1)),
            state(2, 2, 2.0, Some(2)),
            state(3, 1, 3.0, Some(1)),
            state(1, 2, 4.0, Some(3)),
            state(5, 0, 5.0, Some(1)),
        ];
        Dataset::new(cameras(3), states, meta(&[], &[0, 1, 2, 3, 4, 5], &[0])).unwrap()
    }

    #[test]
    fn oracle_scorer_is_perfect() {
        let ds = five_state();
        let oracle = |q: StateIx, g: StateIx| Ok(if is_relevant(&ds, q, g) { 1.0 } else { 0.0 });
        let ranking = rank_queries(&ds, &oracle, 1).unwrap();
        let m = Metrics::from_ranking(&ranking).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(ranking.results[0].n_gt, 2);
        assert!(!ranking.results[0].gallery.contains(&StateId(5)));
    }

    #[test]
    fn constant_scorer_follows_id_order() {
        let ds = five_state();
        let ranking = rank_queries(&ds, &|_: StateIx, _: StateIx| Ok(0.5), 1).unwrap();
        let r = &ranking.results[0];
        assert_eq!(r.gallery, vec![StateId(1), StateId(2), StateId(3), StateId(4)]);
        // relevant ids 3 and 4 sit at ranks 3 and 4: (1/3 + 2/4) / 2 = 5/12
        assert_eq!(r.average_precision().unwrap(), 5.0 / 12.0);
    }

    #[test]
    fn queries_without_ground_truth_are_excluded() {
        let states = vec![state(0, 0, 0.0, Some(1)), state(1, 1, 1.0, Some(2))];
        let ds = Dataset::new(cameras(2), states, meta(&[], &[0, 1], &[0])).unwrap();
        let ranking = rank_queries(&ds, &|_: StateIx, _: StateIx| Ok(0.0), 1).unwrap();
        assert!(ranking.results.is_empty());
        assert_eq!(ranking.excluded, vec![StateId(0)]);
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let ds = five_state();
        assert!(rank_queries(&ds, &|_: StateIx, _: StateIx| Ok(f64::NAN), 1).is_err());
    }

    #[test]
    fn ground_truth_path_spans_the_query_times() {
        let ds = five_state();
        let q = ds.index_of(StateId(0)).unwrap();
        let g = ds.index_of(StateId(3)).unwrap();
        assert_eq!(ground_truth_path(&ds, q, g), ids(&[0, 4, 3]));
        assert_eq!(path_jaccard(&ds, q, g, None).unwrap(), 0.0);
    }

    fn flags() -> impl Strategy<Value = Vec<bool>> {
        proptest::collection::vec(any::<bool>(), 1..30).prop_filter("needs a hit", |v| v.iter().any(|&b| b))
    }

    proptest! {
        #[test]
        fn ap_is_one_iff_relevant_items_lead(v in flags()) {
            let n_gt = v.iter().filter(|&&b| b).count();
            let leading = v.iter().take_while(|&&b| b).count() == n_gt;
            let ap = average_precision(&v, n_gt).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert_eq!(ap == 1.0, leading);
        }

        #[test]
        fn ap_invariant_under_monotone_transform(scores in proptest::collection::vec(-5.0f64..5.0, 2..20), seed in any::<u64>()) {
            let rel: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            prop_assume!(rel.iter().any(|&b| b));
            let n_gt = rel.iter().filter(|&&b| b).count();
            let rank = |f: &dyn Fn(f64) -> f64| {
                let mut ix: Vec<usize> = (0..scores.len()).collect();
                ix.sort_by(|&a, &b| f(scores[b]).total_cmp(&f(scores[a])).then(a.cmp(&b)));
                average_precision(&ix.iter().map(|&i| rel[i]).collect::<Vec<_>>(), n_gt).unwrap()
            };
            prop_assert_eq!(rank(&|x| x), rank(&|x| x.exp() * 3.0 + 1.0));
        }

        #[test]
        fn jaccard_properties(a in proptest::collection::btree_set(0u64..12, 0..8), b in proptest::collection::btree_set(0u64..12, 1..8)) {
            let (a, b) = (ids(&a.into_iter().collect::<Vec<_>>()), ids(&b.into_iter().collect::<Vec<_>>()));
            let ab = jaccard(&a, &b).unwrap();
            prop_assert_eq!(ab, jaccard(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(jaccard(&b, &b).unwrap(), 1.0);
        }

        #[test]
        fn means_are_permutation_invariant(mut v in proptest::collection::vec(0.0f64..1.0, 1..20)) {
            let before = (mean_ap(&v).unwrap(), ajs(&v).unwrap());
            v.reverse();
            let after = (mean_ap(&v).unwrap(), ajs(&v).unwrap());
            prop_assert!((before.0 - after.0).abs() < 1e-12 && (before.1 - after.1).abs() < 1e-12);
        }

        #[test]
        fn str_symmetric_and_linear(ti in 0.0f64..100.0, tj in 0.0f64..100.0, x in -50.0f64..50.0, k in 0.1f64..4.0) {
            let (a, b) = ([0.0, 0.0], [x, 1.0]);
            let s = str_baseline(ti, tj, a, b, 100.0, 60.0).unwrap();
            prop_assert_eq!(s, str_baseline(tj, ti, b, a, 100.0, 60.0).unwrap());
            let scaled = str_baseline(ti * k, tj * k, a, b, 100.0, 60.0).unwrap();
            prop_assert!((scaled - k * s).abs() <= 1e-12 * (1.0 + scaled.abs()));
        }
    }
}
