//! Retrieval metrics under the cross-camera protocol.

use crate::error::{Error, Result};

/// Row-major `Q×G` cosine similarities between `[Q, D]` and `[G, D]` rows.
pub fn cosine_sim_matrix(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let unit = |set: &[Vec<f64>], what: &str| -> Result<Vec<Vec<f64>>> {
        set.iter()
            .enumerate()
            .map(|(i, v)| {
                let n = norm(v);
                if !(n > 0.0 && n.is_finite()) {
                    return Err(Error::Numeric(format!("{what} vector {i} has norm {n}")));
                }
                Ok(v.iter().map(|x| x / n).collect())
            })
            .collect()
    };
    let (q, g) = (unit(queries, "query")?, unit(gallery, "gallery")?);
    if let Some(d) = q.first().map(Vec::len) {
        if q.iter().chain(&g).any(|v| v.len() != d) {
            return Err(Error::InvalidArgument("descriptor lengths differ".into()));
        }
    }
    Ok(q.iter()
        .map(|a| g.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
        .collect())
}

/// Identity and camera of one query or gallery item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label {
    pub id: usize,
    pub cam: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query: usize,
    pub ap: f64,
    /// 1-based rank of the first relevant item in the filtered ranking.
    pub first_hit_rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub map: f64,
    /// `cmc[k]`: fraction of evaluated queries with a hit in the top `k+1`.
    pub cmc: Vec<f64>,
    pub per_query: Vec<QueryResult>,
    /// Queries without any valid positive; not part of the averages.
    pub skipped: Vec<usize>,
}

impl RetrievalResult {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

/// Gallery indices sorted by descending similarity, ties by index, with
/// same-identity same-camera entries removed.
pub fn filtered_ranking(sims: &[f64], query: Label, gallery: &[Label]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&j| !(gallery[j].id == query.id && gallery[j].cam == query.cam))
        .collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// Mean average precision and CMC curve.
pub fn compute_map_cmc(sim: &[Vec<f64>], queries: &[Label], gallery: &[Label]) -> Result<RetrievalResult> {
    if sim.len() != queries.len() || sim.iter().any(|r| r.len() != gallery.len()) {
        return Err(Error::InvalidArgument(format!(
            "similarity matrix does not match {} queries x {} gallery",
            queries.len(),
            gallery.len()
        )));
    }
    let mut per_query = Vec::new();
    let mut skipped = Vec::new();
    let mut hits = vec![0usize; gallery.len()];
    for (qi, (row, &q)) in sim.iter().zip(queries).enumerate() {
        let order = filtered_ranking(row, q, gallery);
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (r, &j) in order.iter().enumerate() {
            if gallery[j].id == q.id {
                found += 1;
                precision_sum += found as f64 / (r + 1) as f64;
                first.get_or_insert(r + 1);
            }
        }
        let Some(first) = first else {
            log::warn!("query {qi} (id {}) has no cross-camera positive; skipped", q.id);
            skipped.push(qi);
            continue;
        };
        hits[first - 1] += 1;
        per_query.push(QueryResult {
            query: qi,
            ap: precision_sum / found as f64,
            first_hit_rank: first,
        });
    }
    let n = per_query.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no query has a valid positive".into()));
    }
    let mut cmc = Vec::with_capacity(gallery.len());
    let mut cum = 0usize;
    for h in hits {
        cum += h;
        cmc.push(cum as f64 / n as f64);
    }
    let map = per_query.iter().map(|r| r.ap).sum::<f64>() / n as f64;
    Ok(RetrievalResult {
        map,
        cmc,
        per_query,
        skipped,
    })
}

/// Per-query CSV `query_id,ap,first_hit_rank` followed by a summary line.
pub fn result_csv(result: &RetrievalResult, query_ids: &[String]) -> String {
    let mut out = String::from("query_id,ap,first_hit_rank\n");
    for r in &result.per_query {
        out.push_str(&format!("{},{:.6},{}\n", query_ids[r.query], r.ap, r.first_hit_rank));
    }
    let cmc5 = result.cmc.get(4).or(result.cmc.last()).copied().unwrap_or(0.0);
    out.push_str(&format!(
        "# summary map={:.6} rank1={:.6} rank5={:.6} queries={} skipped={}\n",
        result.map,
        result.rank1(),
        cmc5,
        result.per_query.len(),
        result.skipped.len()
    ));
    out
}
