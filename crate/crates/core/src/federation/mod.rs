//! Periodic federation: clustering on middle-layer discriminator activations,
//! divergence-weighted scores, per-cluster client-side and global
//! server-side averaging.

mod kmeans;

pub use kmeans::{kmeans, lloyd, sq_dist, KMeansFit, MAX_ITER, RESTARTS};

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Net, ParamKey, ParamStore};
use crate::split::SplitSystem;
use crate::tensor::{Scalar, Tensor};

const Q_FLOOR: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-9;

/// Running mean of flattened middle-layer activations on real rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationSummary {
    pub sum: Vec<f64>,
    pub count: u64,
}

impl ActivationSummary {
    pub fn add_rows(&mut self, rows: &Tensor) {
        let width = rows.row_len();
        if self.sum.is_empty() {
            self.sum = vec![0.0; width];
        }
        for r in 0..rows.rows() {
            for (s, &v) in self.sum.iter_mut().zip(rows.row(r)) {
                *s += v as f64;
            }
        }
        self.count += rows.rows() as u64;
    }

    pub fn mean(&self) -> Option<Vec<f64>> {
        (self.count > 0).then(|| self.sum.iter().map(|s| s / self.count as f64).collect())
    }

    pub fn reset(&mut self) {
        self.sum.clear();
        self.count = 0;
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `sum P(i) ln(P(i) / Q(i))`, with `0 ln 0 = 0` and Q floored at 1e-12.
pub fn kld(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Invariant(format!(
            "kld of distributions with {} and {} entries",
            p.len(),
            q.len()
        )));
    }
    let d: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(Q_FLOOR)).ln())
        .sum();
    Ok(d.max(0.0))
}

/// Normalize log-weights onto the simplex.
pub fn normalize_log(lw: &[f64]) -> Vec<f64> {
    let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![1.0 / lw.len() as f64; lw.len()];
    }
    let e: Vec<f64> = lw.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `ln(n_k) - beta KLD_k`; the score is this normalized over a group.
pub fn log_weight(n: f64, kld: f64, beta: f64) -> f64 {
    n.ln() - beta * kld
}

/// `n_k e^(-beta KLD_k) / sum_j n_j e^(-beta KLD_j)`.
pub fn score_weights(n: &[f64], klds: &[f64], beta: f64) -> Vec<f64> {
    let lw: Vec<f64> = n.iter().zip(klds).map(|(&n, &d)| log_weight(n, d, beta)).collect();
    normalize_log(&lw)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub kld: f64,
    pub s: f64,
    pub log_weight: f64,
}

/// Scores of `members`: each P_k against the mean of the other members'
/// distributions. A singleton gets `s = 1` and `KLD = 0`.
pub fn scores(
    members: &[usize],
    dists: &BTreeMap<usize, Vec<f64>>,
    sizes: &BTreeMap<usize, f64>,
    beta: f64,
) -> Result<BTreeMap<usize, Score>> {
    let mut klds = Vec::with_capacity(members.len());
    for &k in members {
        if members.len() == 1 {
            klds.push(0.0);
            continue;
        }
        let pk = &dists[&k];
        let mut pj = vec![0.0; pk.len()];
        for &x in members.iter().filter(|&&x| x != k) {
            for (a, b) in pj.iter_mut().zip(&dists[&x]) {
                *a += b;
            }
        }
        let m = (members.len() - 1) as f64;
        pj.iter_mut().for_each(|a| *a /= m);
        klds.push(kld(pk, &pj)?);
    }
    let n: Vec<f64> = members.iter().map(|k| sizes[k]).collect();
    let s = score_weights(&n, &klds, beta);
    Ok(members
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            (
                k,
                Score {
                    kld: klds[i],
                    s: s[i],
                    log_weight: log_weight(n[i], klds[i], beta),
                },
            )
        })
        .collect())
}

/// Elementwise `sum w_i t_i`.
pub fn weighted_average<S: Scalar>(tensors: &[&Tensor<S>], weights: &[f64]) -> Tensor<S> {
    let shape = tensors[0].shape();
    let mut acc = vec![0.0f64; tensors[0].len()];
    for (t, &w) in tensors.iter().zip(weights) {
        for (a, &v) in acc.iter_mut().zip(t.data()) {
            *a += w * v.as_f64();
        }
    }
    Tensor::from_vec(shape, acc.into_iter().map(S::lit).collect())
}

/// Replace every selected tensor of every member with the weighted average
/// over members. Members must hold the same selected keys and shapes.
pub fn aggregate<S: Scalar>(
    members: &mut [(usize, &mut ParamStore<S>)],
    select: impl Fn(&ParamKey) -> bool,
    weights: &[f64],
) -> Result<()> {
    let ids: Vec<usize> = members.iter().map(|(k, _)| *k).collect();
    if weights.len() != members.len() {
        return Err(Error::Aggregation {
            clients: ids,
            message: format!("{} weights for {} members", weights.len(), members.len()),
        });
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Aggregation {
            clients: ids,
            message: format!("weights sum to {total}, not 1"),
        });
    }
    if members.is_empty() {
        return Ok(());
    }
    let keys: Vec<ParamKey> = members[0].1.keys().filter(|k| select(k)).copied().collect();
    for (k, store) in members.iter() {
        let theirs: Vec<ParamKey> = store.keys().filter(|k| select(k)).copied().collect();
        if theirs != keys {
            return Err(Error::Aggregation {
                clients: vec![ids[0], *k],
                message: "members hold different segments".into(),
            });
        }
    }
    for key in &keys {
        let shape = members[0].1.get(key).expect("listed").value.shape().to_vec();
        if let Some((k, _)) = members
            .iter()
            .find(|(_, s)| s.get(key).expect("listed").value.shape() != shape.as_slice())
        {
            return Err(Error::Aggregation {
                clients: vec![ids[0], *k],
                message: format!("shape mismatch at {key:?}"),
            });
        }
        let avg = {
            let parts: Vec<&Tensor<S>> = members.iter().map(|(_, s)| &s.get(key).expect("listed").value).collect();
            weighted_average(&parts, weights)
        };
        for (_, s) in members.iter_mut() {
            s.get_mut(key).expect("listed").value = avg.clone();
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KldSource {
    #[default]
    Activations,
    Labels,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub beta: f64,
    pub k: usize,
    pub clustering: bool,
    pub kld_weighting: bool,
    pub source: KldSource,
    /// Rounds that use plain size-weighted averaging before clustering starts.
    pub warmup_rounds: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            beta: 150.0,
            k: 1,
            clustering: true,
            kld_weighting: true,
            source: KldSource::Activations,
            warmup_rounds: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundKind {
    Vanilla,
    Clustered,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub cluster: usize,
    pub kld: f64,
    pub score: f64,
    pub global_kld: f64,
    pub global_score: f64,
    /// Unnormalized `ln n_k - beta KLD_k`, for renormalizing over sub-groups.
    pub log_weight: f64,
    pub global_log_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub round: usize,
    pub kind: RoundKind,
    pub clusters: Vec<Vec<usize>>,
    pub clients: BTreeMap<usize, ClientRecord>,
    /// P_k used for the scores (empty in vanilla rounds).
    pub distributions: BTreeMap<usize, Vec<f64>>,
}

impl ClusterState {
    pub fn labels(&self) -> BTreeMap<usize, usize> {
        self.clients.iter().map(|(&k, r)| (k, r.cluster)).collect()
    }
}

/// Per-client inputs to a round.
#[derive(Clone, Debug, Default)]
pub struct RoundInput {
    pub summaries: BTreeMap<usize, ActivationSummary>,
    pub sizes: BTreeMap<usize, usize>,
    pub label_counts: BTreeMap<usize, Vec<usize>>,
}

fn group_by_range(members: &[usize], range: impl Fn(usize) -> Range<usize>) -> Vec<(Range<usize>, Vec<usize>)> {
    let mut groups: Vec<(Range<usize>, Vec<usize>)> = Vec::new();
    for &k in members {
        let r = range(k);
        match groups.iter_mut().find(|(g, _)| *g == r) {
            Some((_, v)) => v.push(k),
            None => groups.push((r, vec![k])),
        }
    }
    groups
}

fn weights_for(group: &[usize], lw: &BTreeMap<usize, f64>) -> Vec<f64> {
    normalize_log(&group.iter().map(|k| lw[k]).collect::<Vec<_>>())
}

/// Decide clusters and scores for round `round` (1-based) without touching
/// parameters.
pub fn plan_round(round: usize, input: &RoundInput, config: &FederationConfig, seed: u64) -> Result<ClusterState> {
    let clients: Vec<usize> = input.sizes.keys().copied().collect();
    let sizes: BTreeMap<usize, f64> = input.sizes.iter().map(|(&k, &n)| (k, n as f64)).collect();
    if round <= config.warmup_rounds {
        let n: Vec<f64> = clients.iter().map(|k| sizes[k]).collect();
        let s = score_weights(&n, &vec![0.0; n.len()], 0.0);
        return Ok(ClusterState {
            round,
            kind: RoundKind::Vanilla,
            clusters: vec![clients.clone()],
            clients: clients
                .iter()
                .zip(s)
                .map(|(&k, s)| {
                    (
                        k,
                        ClientRecord {
                            cluster: 0,
                            kld: 0.0,
                            score: s,
                            global_kld: 0.0,
                            global_score: s,
                            log_weight: sizes[&k].ln(),
                            global_log_weight: sizes[&k].ln(),
                        },
                    )
                })
                .collect(),
            distributions: BTreeMap::new(),
        });
    }

    let mut means = BTreeMap::new();
    for &k in &clients {
        let m = input
            .summaries
            .get(&k)
            .and_then(ActivationSummary::mean)
            .ok_or_else(|| Error::Invariant(format!("client {k} has no activation summary for round {round}")))?;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!("client {k}: non-finite activation summary")));
        }
        means.insert(k, m);
    }
    let labels: Vec<usize> = if config.clustering && config.k > 1 {
        let points: Vec<Vec<f64>> = clients.iter().map(|k| means[k].clone()).collect();
        kmeans(&points, config.k, seed ^ (round as u64).wrapping_mul(0x9E37_79B9))?.labels
    } else {
        vec![0; clients.len()]
    };
    let count = labels.iter().max().map_or(0, |m| m + 1);
    let clusters: Vec<Vec<usize>> = (0..count)
        .map(|c| clients.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(&k, _)| k).collect())
        .collect();

    let dists: BTreeMap<usize, Vec<f64>> = match config.source {
        KldSource::Activations => means.iter().map(|(&k, m)| (k, softmax(m))).collect(),
        KldSource::Labels => {
            let mut d = BTreeMap::new();
            for &k in &clients {
                let h = input
                    .label_counts
                    .get(&k)
                    .ok_or_else(|| Error::Invariant(format!("client {k} has no label histogram")))?;
                let total: usize = h.iter().sum();
                d.insert(k, h.iter().map(|&c| c as f64 / total.max(1) as f64).collect());
            }
            d
        }
    };
    let beta = if config.kld_weighting { config.beta } else { 0.0 };
    let global = scores(&clients, &dists, &sizes, beta)?;
    let mut records = BTreeMap::new();
    for (c, members) in clusters.iter().enumerate() {
        for (k, s) in scores(members, &dists, &sizes, beta)? {
            records.insert(
                k,
                ClientRecord {
                    cluster: c,
                    kld: s.kld,
                    score: s.s,
                    global_kld: global[&k].kld,
                    global_score: global[&k].s,
                    log_weight: s.log_weight,
                    global_log_weight: global[&k].log_weight,
                },
            );
        }
    }
    Ok(ClusterState {
        round,
        kind: RoundKind::Clustered,
        clusters,
        clients: records,
        distributions: dists,
    })
}

/// Average client-side segments within each cluster (sub-grouped by cut
/// index) and server-side blocks over their participants.
pub fn apply_round(sys: &mut SplitSystem, state: &ClusterState) -> Result<()> {
    let local: BTreeMap<usize, f64> = state.clients.iter().map(|(&k, r)| (k, r.log_weight)).collect();
    let global: BTreeMap<usize, f64> = state.clients.iter().map(|(&k, r)| (k, r.global_log_weight)).collect();
    let cuts: BTreeMap<usize, crate::latency::Cuts> = sys.clients.iter().map(|(&k, c)| (k, c.cuts)).collect();

    for members in &state.clusters {
        for net in [Net::Generator, Net::Discriminator] {
            let n = sys.network(net).major_count();
            let heads = group_by_range(members, |k| cuts[&k].head_blocks(net));
            let tails = group_by_range(members, |k| cuts[&k].tail_blocks(net, n));
            for (range, group) in heads.into_iter().chain(tails) {
                let w = weights_for(&group, &local);
                let mut stores: Vec<(usize, &mut ParamStore)> = sys
                    .clients
                    .iter_mut()
                    .filter(|(k, _)| group.contains(k))
                    .map(|(&k, c)| (k, &mut c.store))
                    .collect();
                aggregate(&mut stores, |key| key.net == net && range.contains(&key.block), &w)?;
            }
        }
    }
    for net in [Net::Generator, Net::Discriminator] {
        let n = sys.network(net).major_count();
        for b in 0..n {
            let group = sys.participation(net).active(b);
            if group.is_empty() {
                continue;
            }
            let w = weights_for(&group, &global);
            let mut stores: Vec<(usize, &mut ParamStore)> = sys
                .server
                .iter_mut()
                .filter(|(k, _)| group.contains(k))
                .map(|(&k, s)| (k, s))
                .collect();
            aggregate(&mut stores, |key| key.net == net && key.block == b, &w)?;
        }
    }
    sys.params_changed(Net::Generator);
    sys.params_changed(Net::Discriminator);
    Ok(())
}

/// `plan_round` then `apply_round`; summaries are reset afterward.
pub fn federation_round(
    sys: &mut SplitSystem,
    round: usize,
    input: &mut RoundInput,
    config: &FederationConfig,
    seed: u64,
) -> Result<ClusterState> {
    let state = plan_round(round, input, config, seed)?;
    apply_round(sys, &state)?;
    for s in input.summaries.values_mut() {
        s.reset();
    }
    Ok(state)
}
