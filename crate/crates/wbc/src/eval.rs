//! Single-shot retrieval evaluation: per-probe gallery ranking by Euclidean
//! distance, the CMC curve, and mean average precision.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::aggregation::FinalFeature;
use crate::error::{Error, Result};
use crate::loss::euclid_dist;
use crate::model::{forward, ModelParams, RasterSample};
use crate::scalar::Scalar;

/// Per-probe ranked gallery indices plus the aggregate metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub rankings: Vec<Vec<usize>>,
    /// `cmc[r-1]` = fraction of probes whose first correct match has rank ≤ r.
    pub cmc: Vec<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
}

impl RankingReport {
    /// CMC at rank `r` (1-based); clamps to the gallery size.
    pub fn cmc_at(&self, r: usize) -> f64 {
        let r = r.min(self.cmc.len());
        self.cmc[r - 1]
    }
}

/// Gallery indices in ascending distance order; ties break toward the
/// smaller gallery index, so the ordering is total and reproducible.
pub fn rank_gallery<F: Scalar>(
    probe: &FinalFeature<F>,
    gallery: &[FinalFeature<F>],
) -> Result<Vec<usize>> {
    let mut scored = Vec::with_capacity(gallery.len());
    for (i, g) in gallery.iter().enumerate() {
        scored.push((euclid_dist(probe, g)?, i));
    }
    scored.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("distances are finite")
            .then(a.1.cmp(&b.1))
    });
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

fn first_match_rank(
    ranking: &[usize],
    probe_label: usize,
    gallery_labels: &[usize],
) -> Option<usize> {
    ranking
        .iter()
        .position(|&g| gallery_labels[g] == probe_label)
        .map(|pos| pos + 1)
}

/// Cumulative matching characteristic over ranks `1..=G`. Every probe must
/// have at least one true match in the gallery.
pub fn cmc(
    rankings: &[Vec<usize>],
    probe_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<Vec<f64>> {
    if rankings.len() != probe_labels.len() {
        return Err(Error::dimension(format!(
            "{} rankings vs {} probe labels",
            rankings.len(),
            probe_labels.len()
        )));
    }
    let g = gallery_labels.len();
    let mut hits_at = vec![0usize; g];
    for (ranking, &label) in rankings.iter().zip(probe_labels) {
        if ranking.len() != g {
            return Err(Error::dimension(format!(
                "ranking lists {} gallery entries, gallery has {g}",
                ranking.len()
            )));
        }
        match first_match_rank(ranking, label, gallery_labels) {
            Some(rank) => hits_at[rank - 1] += 1,
            None => {
                return Err(Error::protocol(format!(
                    "probe with label {label} has no true match in the gallery"
                )))
            }
        }
    }
    let n = probe_labels.len() as f64;
    let mut curve = Vec::with_capacity(g);
    let mut cumulative = 0usize;
    for r in 0..g {
        cumulative += hits_at[r];
        curve.push(cumulative as f64 / n);
    }
    Ok(curve)
}

/// Mean average precision: per probe, the mean over its true matches of
/// (matches found so far / rank), averaged over probes.
pub fn mean_ap(
    rankings: &[Vec<usize>],
    probe_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<f64> {
    if rankings.len() != probe_labels.len() {
        return Err(Error::dimension(format!(
            "{} rankings vs {} probe labels",
            rankings.len(),
            probe_labels.len()
        )));
    }
    let mut ap_sum = 0.0;
    for (ranking, &label) in rankings.iter().zip(probe_labels) {
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &g) in ranking.iter().enumerate() {
            if gallery_labels[g] == label {
                found += 1;
                precision_sum += found as f64 / (pos + 1) as f64;
            }
        }
        if found == 0 {
            return Err(Error::protocol(format!(
                "probe with label {label} has no true match in the gallery"
            )));
        }
        ap_sum += precision_sum / found as f64;
    }
    Ok(ap_sum / rankings.len() as f64)
}

/// Forward every probe and gallery sample through the model, rank, and
/// aggregate CMC plus mAP.
pub fn evaluate<F: Scalar>(
    params: &ModelParams<F>,
    probes: &[RasterSample<F>],
    gallery: &[RasterSample<F>],
) -> Result<RankingReport> {
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::protocol("evaluation needs probes and a gallery".to_string()));
    }
    let mut gallery_features = Vec::with_capacity(gallery.len());
    for s in gallery {
        gallery_features.push(forward(s, params)?.0);
    }
    let mut rankings = Vec::with_capacity(probes.len());
    for s in probes {
        let (feature, _) = forward(s, params)?;
        rankings.push(rank_gallery(&feature, &gallery_features)?);
    }
    let probe_labels: Vec<usize> = probes.iter().map(|s| s.label).collect();
    let gallery_labels: Vec<usize> = gallery.iter().map(|s| s.label).collect();
    let curve = cmc(&rankings, &probe_labels, &gallery_labels)?;
    let map = mean_ap(&rankings, &probe_labels, &gallery_labels)?;
    Ok(RankingReport {
        rankings,
        cmc: curve,
        map,
    })
}

/// CSV report: a `r,cmc` row per rank, then a trailing `mAP,<value>` record.
pub fn write_report_csv(report: &RankingReport, mut w: impl Write) -> Result<()> {
    writeln!(w, "r,cmc")?;
    for (i, v) in report.cmc.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, v)?;
    }
    writeln!(w, "mAP,{}", report.map)?;
    Ok(())
}

/// JSON report with the same fields as the CSV.
pub fn write_report_json(report: &RankingReport, mut w: impl Write) -> Result<()> {
    #[derive(Serialize)]
    struct JsonReport<'a> {
        cmc: &'a [f64],
        #[serde(rename = "mAP")]
        map: f64,
    }
    let body = serde_json::to_string_pretty(&JsonReport {
        cmc: &report.cmc,
        map: report.map,
    })?;
    w.write_all(body.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::concat_normalize;

    fn unit(values: Vec<f64>) -> FinalFeature<f64> {
        concat_normalize(&[values]).unwrap()
    }

    #[test]
    fn probe_itself_ranks_first() {
        let probe = unit(vec![1.0, 2.0, 3.0]);
        let gallery = vec![unit(vec![0.0, 1.0, 0.0]), probe.clone(), unit(vec![1.0, 0.0, 0.0])];
        assert_eq!(rank_gallery(&probe, &gallery).unwrap()[0], 1);
    }

    #[test]
    fn duplicate_gallery_keeps_index_order() {
        let probe = unit(vec![1.0, 1.0]);
        let dup = unit(vec![0.0, 1.0]);
        let gallery = vec![dup.clone(), dup.clone(), dup];
        assert_eq!(rank_gallery(&probe, &gallery).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn ranking_sorts_by_distance() {
        // Distances 0.5, 0.1, 0.3 → order [1, 2, 0].
        let probe = unit(vec![1.0, 0.0]);
        let at = |d: f64| {
            let phi = 2.0 * (d / 2.0).asin();
            unit(vec![phi.cos(), phi.sin()])
        };
        let gallery = vec![at(0.5), at(0.1), at(0.3)];
        assert_eq!(rank_gallery(&probe, &gallery).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn cmc_single_probe_examples() {
        // Correct at rank 1 in a 3-gallery.
        let c = cmc(&[vec![0, 1, 2]], &[7], &[7, 1, 2]).unwrap();
        assert_eq!(c, vec![1.0, 1.0, 1.0]);
        // Correct at rank 2.
        let c = cmc(&[vec![1, 0, 2]], &[7], &[7, 1, 2]).unwrap();
        assert_eq!(c, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn cmc_averages_step_functions() {
        let rankings = vec![vec![0, 1, 2], vec![0, 1, 2]];
        // First probe hits at rank 1, second at rank 3.
        let c = cmc(&rankings, &[5, 6], &[5, 9, 6]).unwrap();
        assert_eq!(c, vec![0.5, 0.5, 1.0]);
    }

    #[test]
    fn cmc_rejects_matchless_probe() {
        let err = cmc(&[vec![0, 1]], &[3], &[1, 2]).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn ap_examples() {
        // Single match at rank 1.
        assert_eq!(mean_ap(&[vec![0, 1]], &[1], &[1, 0]).unwrap(), 1.0);
        // Single match at rank 2.
        assert_eq!(mean_ap(&[vec![1, 0]], &[1], &[1, 0]).unwrap(), 0.5);
        // Matches at ranks 1 and 3: (1/1 + 2/3) / 2.
        let ap = mean_ap(&[vec![0, 1, 2]], &[1], &[1, 0, 1]).unwrap();
        assert_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn cmc_is_monotone_and_ends_at_one() {
        let rankings = vec![vec![2, 0, 3, 1], vec![3, 1, 0, 2]];
        let c = cmc(&rankings, &[0, 1], &[0, 1, 1, 0]).unwrap();
        for w in c.windows(2) {
            assert!(w[0] <= w[1]);
        }
        assert_eq!(*c.last().unwrap(), 1.0);
        assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn map_is_one_iff_all_matches_rank_first() {
        // Both matches ahead of non-matches.
        let perfect = mean_ap(&[vec![1, 2, 0]], &[4], &[0, 4, 4]).unwrap();
        assert_eq!(perfect, 1.0);
        // One non-match interleaved.
        let worse = mean_ap(&[vec![1, 0, 2]], &[4], &[0, 4, 4]).unwrap();
        assert!(worse < 1.0);
    }

    #[test]
    fn report_csv_shape() {
        let report = RankingReport {
            rankings: vec![vec![0, 1]],
            cmc: vec![0.5, 1.0],
            map: 0.75,
        };
        let mut buf = Vec::new();
        write_report_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "r,cmc\n1,0.5\n2,1\nmAP,0.75\n");

        let mut buf = Vec::new();
        write_report_json(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\"mAP\": 0.75"));
    }
}
