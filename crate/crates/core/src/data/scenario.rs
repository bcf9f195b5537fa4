//! Scenario documents and the non-IID partitioner.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{synth_domain, GaussianDomain};
use super::{idx, Dataset};
use crate::error::{Error, Result};

pub const PRESETS: &[(&str, &str)] = &[
    ("1-domain-iid", include_str!("../../assets/scenario/1-domain-iid.toml")),
    ("1-domain-non-iid", include_str!("../../assets/scenario/1-domain-non-iid.toml")),
    ("2-domain-iid", include_str!("../../assets/scenario/2-domain-iid.toml")),
    ("2-domain-non-iid", include_str!("../../assets/scenario/2-domain-non-iid.toml")),
    (
        "2-domain-highly-non-iid",
        include_str!("../../assets/scenario/2-domain-highly-non-iid.toml"),
    ),
    ("4-domain-iid", include_str!("../../assets/scenario/4-domain-iid.toml")),
    ("desk-1-domain-iid", include_str!("../../assets/scenario/desk-1-domain-iid.toml")),
    (
        "desk-1-domain-non-iid",
        include_str!("../../assets/scenario/desk-1-domain-non-iid.toml"),
    ),
    ("desk-2-domain-iid", include_str!("../../assets/scenario/desk-2-domain-iid.toml")),
    (
        "desk-2-domain-non-iid",
        include_str!("../../assets/scenario/desk-2-domain-non-iid.toml"),
    ),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainSpec {
    #[serde(rename = "gaussian-mixture-2d")]
    GaussianMixture2d {
        name: String,
        #[serde(flatten)]
        layout: GaussianDomain,
        /// Training pool size per class.
        per_class: usize,
    },
    IdxImage {
        name: String,
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl DomainSpec {
    pub fn name(&self) -> &str {
        match self {
            DomainSpec::GaussianMixture2d { name, .. } | DomainSpec::IdxImage { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientGroup {
    pub domain: usize,
    pub count: usize,
    /// Sizes cycled over the group's clients.
    pub samples: Vec<usize>,
    /// Number of labels each client drops, drawn per client from the seed.
    #[serde(default)]
    pub exclude: usize,
    /// Explicit excluded label sets, cycled over the group's clients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub classes: usize,
    pub domains: Vec<DomainSpec>,
    pub groups: Vec<ClientGroup>,
    /// Held-out real samples per class for synthetic domains.
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
}

fn default_test_per_class() -> usize {
    500
}

/// One client's resolved data recipe.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPlan {
    pub client: usize,
    pub domain: usize,
    pub samples: usize,
    pub excluded: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client: usize,
    pub domain: usize,
    pub excluded: Vec<usize>,
    /// Row indices into the domain's training pool.
    pub indices: Vec<usize>,
    pub data: Dataset,
}

impl ClientShard {
    pub fn size(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub name: String,
    pub train: Dataset,
    pub test: Dataset,
}

impl Scenario {
    pub fn bundled(name: &str) -> Option<Self> {
        PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(n, text)| Self::from_toml(text, Path::new(n)).expect("bundled scenario parses"))
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    /// A preset name or a path to a scenario file.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(s) = Self::bundled(spec) {
            return Ok(s);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn client_count(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(format!("{}: {m}", self.name)));
        if self.classes < 2 {
            return bad(format!("class count {} is below 2", self.classes));
        }
        if self.domains.is_empty() || self.groups.is_empty() {
            return bad("needs at least one domain and one client group".into());
        }
        for d in &self.domains {
            if let DomainSpec::GaussianMixture2d { layout, .. } = d {
                layout.validate(self.classes)?;
            }
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.domain >= self.domains.len() {
                return bad(format!("group {i} names domain {} of {}", g.domain, self.domains.len()));
            }
            if g.count == 0 {
                return bad(format!("group {i} has no clients"));
            }
            if g.samples.is_empty() || g.samples.contains(&0) {
                return bad(format!("group {i} needs non-empty positive sizes"));
            }
            match &g.excluded {
                Some(_) if g.exclude != 0 => {
                    return bad(format!("group {i} sets both exclude and excluded"));
                }
                Some(sets) => {
                    if sets.is_empty() {
                        return bad(format!("group {i} has an empty excluded list"));
                    }
                    for set in sets {
                        let uniq: BTreeSet<_> = set.iter().collect();
                        if set.iter().any(|&l| l >= self.classes) {
                            return bad(format!("group {i} excludes {set:?}, outside 0..{}", self.classes));
                        }
                        if uniq.len() != set.len() || uniq.len() >= self.classes {
                            return bad(format!("group {i} excluded set {set:?} is invalid"));
                        }
                    }
                }
                None if g.exclude >= self.classes => {
                    return bad(format!(
                        "group {i} excludes {} of {} labels",
                        g.exclude, self.classes
                    ));
                }
                None => {}
            }
        }
        Ok(())
    }

    /// Resolve every client's domain, size and excluded labels.
    pub fn plan(&self, seed: u64) -> Vec<ClientPlan> {
        let mut out = Vec::with_capacity(self.client_count());
        for g in &self.groups {
            for j in 0..g.count {
                let client = out.len();
                let mut excluded = match &g.excluded {
                    Some(sets) => sets[j % sets.len()].clone(),
                    None if g.exclude > 0 => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(1 << 32 | client as u64);
                        sample(&mut rng, self.classes, g.exclude).into_vec()
                    }
                    None => Vec::new(),
                };
                excluded.sort_unstable();
                out.push(ClientPlan {
                    client,
                    domain: g.domain,
                    samples: g.samples[j % g.samples.len()],
                    excluded,
                });
            }
        }
        out
    }

    /// Build training pools and held-out test sets. Idx paths are relative
    /// to `data_root`.
    pub fn load_domains(&self, data_root: &Path, seed: u64) -> Result<Vec<DomainData>> {
        self.domains
            .iter()
            .enumerate()
            .map(|(d, spec)| match spec {
                DomainSpec::GaussianMixture2d {
                    name,
                    layout,
                    per_class,
                } => {
                    let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (d as u64) << 8;
                    Ok(DomainData {
                        name: name.clone(),
                        train: synth_domain(layout, self.classes, *per_class, base)?,
                        test: synth_domain(layout, self.classes, self.test_per_class, base ^ 1)?,
                    })
                }
                DomainSpec::IdxImage {
                    name,
                    train_images,
                    train_labels,
                    test_images,
                    test_labels,
                } => Ok(DomainData {
                    name: name.clone(),
                    train: idx::load_idx(
                        &data_root.join(train_images),
                        &data_root.join(train_labels),
                        self.classes,
                    )?,
                    test: idx::load_idx(
                        &data_root.join(test_images),
                        &data_root.join(test_labels),
                        self.classes,
                    )?,
                }),
            })
            .collect()
    }
}

/// Per-label sample counts for one client: an even split over the allowed
/// labels, the remainder going to labels in an order rotated by client id.
pub fn label_quota(plan: &ClientPlan, classes: usize) -> Vec<usize> {
    let allowed: Vec<usize> = (0..classes).filter(|l| !plan.excluded.contains(l)).collect();
    let mut quota = vec![0; classes];
    let (base, rem) = (plan.samples / allowed.len(), plan.samples % allowed.len());
    for (j, &l) in allowed.iter().enumerate() {
        quota[l] = base;
        let rotated = (j + allowed.len() - plan.client % allowed.len()) % allowed.len();
        if rotated < rem {
            quota[l] += 1;
        }
    }
    quota
}

/// Deal each client its quota from per-domain label pools shuffled by the
/// seed, without replacement.
pub fn partition(domains: &[Dataset], scenario: &Scenario, seed: u64) -> Result<Vec<ClientShard>> {
    scenario.validate()?;
    if domains.len() != scenario.domains.len() {
        return Err(Error::Scenario(format!(
            "{} datasets supplied for {} domains",
            domains.len(),
            scenario.domains.len()
        )));
    }
    let c = scenario.classes;
    let plans = scenario.plan(seed);
    let quotas: Vec<Vec<usize>> = plans.iter().map(|p| label_quota(p, c)).collect();

    let mut pools: Vec<Vec<Vec<usize>>> = Vec::with_capacity(domains.len());
    for (d, ds) in domains.iter().enumerate() {
        if ds.classes != c {
            return Err(Error::Scenario(format!(
                "domain {d} has {} classes, scenario has {c}",
                ds.classes
            )));
        }
        let mut by_label = vec![Vec::new(); c];
        for (i, &l) in ds.labels.iter().enumerate() {
            by_label[l].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(d as u64);
        for p in by_label.iter_mut() {
            p.shuffle(&mut rng);
        }
        pools.push(by_label);
    }

    let mut shortfalls = Vec::new();
    for (d, pool) in pools.iter().enumerate() {
        for (l, have) in pool.iter().enumerate() {
            let need: usize = plans
                .iter()
                .zip(&quotas)
                .filter(|(p, _)| p.domain == d)
                .map(|(_, q)| q[l])
                .sum();
            if need > have.len() {
                shortfalls.push(format!(
                    "domain {d} label {l}: need {need}, have {} (short {})",
                    have.len(),
                    need - have.len()
                ));
            }
        }
    }
    if !shortfalls.is_empty() {
        return Err(Error::InsufficientData(shortfalls.join("; ")));
    }

    let mut cursor = vec![vec![0usize; c]; domains.len()];
    let mut shards = Vec::with_capacity(plans.len());
    for (plan, quota) in plans.into_iter().zip(quotas) {
        let d = plan.domain;
        let mut indices = Vec::with_capacity(plan.samples);
        for (l, &q) in quota.iter().enumerate() {
            let at = cursor[d][l];
            indices.extend_from_slice(&pools[d][l][at..at + q]);
            cursor[d][l] += q;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 << 32 | plan.client as u64);
        indices.shuffle(&mut rng);
        shards.push(ClientShard {
            client: plan.client,
            domain: d,
            data: domains[d].subset(&indices),
            excluded: plan.excluded,
            indices,
        });
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn uniform_pool(classes: usize, per_class: usize) -> Dataset {
        let n = classes * per_class;
        Dataset {
            sample_shape: vec![1],
            features: (0..n).map(|i| i as f32).collect(),
            labels: (0..n).map(|i| i % classes).collect(),
            classes,
        }
    }

    fn iid(clients: usize, size: usize, classes: usize) -> Scenario {
        Scenario {
            name: "t".into(),
            classes,
            domains: vec![DomainSpec::GaussianMixture2d {
                name: "a".into(),
                layout: GaussianDomain {
                    radius: 1.0,
                    spread: 0.1,
                    rotation_slots: 0,
                    offset: [0.0, 0.0],
                },
                per_class: 100,
            }],
            groups: vec![ClientGroup {
                domain: 0,
                count: clients,
                samples: vec![size],
                exclude: 0,
                excluded: None,
            }],
            test_per_class: 10,
        }
    }

    #[test]
    fn iid_split_is_even() {
        let s = iid(4, 100, 4);
        let shards = partition(&[uniform_pool(4, 100)], &s, 1).unwrap();
        for sh in &shards {
            assert_eq!(sh.data.label_histogram(), vec![25; 4]);
        }
        let s = iid(3, 10, 4);
        for sh in partition(&[uniform_pool(4, 100)], &s, 1).unwrap() {
            let h = sh.data.label_histogram();
            assert_eq!(h.iter().sum::<usize>(), 10);
            assert!(h.iter().all(|&x| x == 2 || x == 3));
        }
    }

    #[test]
    fn explicit_exclusions_are_honoured() {
        let mut s = iid(2, 40, 4);
        s.groups[0].excluded = Some(vec![vec![0, 1]]);
        for sh in partition(&[uniform_pool(4, 100)], &s, 5).unwrap() {
            let h = sh.data.label_histogram();
            assert_eq!(h[0] + h[1], 0);
            assert_eq!(h[2] + h[3], 40);
        }
    }

    #[test]
    fn non_iid_recipe_histogram() {
        let s = Scenario::bundled("1-domain-non-iid").unwrap();
        assert_eq!(s.client_count(), 100);
        let plans = s.plan(3);
        let mut hist = std::collections::BTreeMap::new();
        for p in &plans {
            *hist.entry(p.excluded.len()).or_insert(0) += 1;
        }
        assert_eq!(hist.get(&2), Some(&40));
        assert_eq!(hist.get(&3), Some(&10));
        assert_eq!(hist.get(&4), Some(&10));
        assert_eq!(hist.get(&0), Some(&40));
        let sizes: BTreeSet<usize> = plans.iter().map(|p| p.samples).collect();
        assert_eq!(sizes, BTreeSet::from([400, 600]));
    }

    #[test]
    fn literal_multi_domain_recipes() {
        let s = Scenario::bundled("2-domain-non-iid").unwrap();
        for d in 0..2 {
            let mut hist = [0usize; 5];
            for p in s.plan(0).iter().filter(|p| p.domain == d) {
                hist[p.excluded.len()] += 1;
            }
            assert_eq!(hist, [20, 0, 20, 5, 5]);
        }
        let s = Scenario::bundled("2-domain-highly-non-iid").unwrap();
        for d in 0..2 {
            let mut hist = [0usize; 4];
            for p in s.plan(0).iter().filter(|p| p.domain == d) {
                hist[p.excluded.len()] += 1;
            }
            assert_eq!(hist, [10, 0, 20, 20]);
        }
        let sizes: BTreeSet<usize> = s.plan(0).iter().map(|p| p.samples).collect();
        assert_eq!(sizes, BTreeSet::from([100, 200, 600]));
        let s = Scenario::bundled("4-domain-iid").unwrap();
        assert_eq!(s.domains.len(), 4);
        assert!(s.plan(0).iter().all(|p| p.samples == 600 && p.excluded.is_empty()));
    }

    #[test]
    fn every_preset_parses() {
        for (name, _) in PRESETS {
            let s = Scenario::bundled(name).unwrap();
            assert_eq!(Scenario::from_toml(&s.to_toml(), Path::new("x")).unwrap(), s);
        }
    }

    #[test]
    fn shortfall_lists_labels() {
        let s = iid(4, 100, 4);
        match partition(&[uniform_pool(4, 90)], &s, 0) {
            Err(Error::InsufficientData(m)) => {
                assert!(m.contains("label 0: need 100, have 90 (short 10)"), "{m}");
                assert!(m.contains("label 3"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_scenarios_rejected() {
        let mut s = iid(2, 10, 4);
        s.groups[0].exclude = 4;
        assert!(s.validate().is_err());
        let mut s = iid(2, 10, 4);
        s.groups[0].excluded = Some(vec![vec![7]]);
        assert!(s.validate().is_err());
        let mut s = iid(2, 10, 4);
        s.groups[0].domain = 1;
        assert!(s.validate().is_err());
        assert!(Scenario::from_toml("name = 1", Path::new("bad.toml")).is_err());
    }

    #[test]
    fn synthetic_desk_domains_load() {
        let s = Scenario::bundled("desk-2-domain-non-iid").unwrap();
        let doms = s.load_domains(Path::new("."), 4).unwrap();
        assert_eq!(doms.len(), 2);
        let train: Vec<Dataset> = doms.iter().map(|d| d.train.clone()).collect();
        let shards = partition(&train, &s, 4).unwrap();
        assert_eq!(shards.len(), 8);
        assert_eq!(doms, s.load_domains(Path::new("."), 4).unwrap());
    }

    fn arb_scenario() -> impl Strategy<Value = (Scenario, u64)> {
        (2usize..7, 1usize..4, any::<u64>()).prop_flat_map(|(classes, n_groups, seed)| {
            let group = (1usize..5, 1usize..40, 0..classes, any::<bool>(), 0usize..2);
            proptest::collection::vec(group, n_groups).prop_map(move |gs| {
                let groups = gs
                    .into_iter()
                    .map(|(count, size, ex, explicit, domain)| ClientGroup {
                        domain,
                        count,
                        samples: vec![size, size + 3],
                        exclude: if explicit { 0 } else { ex },
                        excluded: explicit.then(|| vec![(0..ex).collect(), vec![classes - 1]]),
                    })
                    .collect();
                let mut s = iid(1, 1, classes);
                s.domains.push(s.domains[0].clone());
                s.groups = groups;
                (s, seed)
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn shards_respect_exclusions_and_stay_disjoint((s, seed) in arb_scenario()) {
            let pools = vec![uniform_pool(s.classes, 600), uniform_pool(s.classes, 600)];
            let shards = partition(&pools, &s, seed).unwrap();
            let plans = s.plan(seed);
            let mut used = [BTreeSet::new(), BTreeSet::new()];
            for (sh, p) in shards.iter().zip(&plans) {
                prop_assert_eq!(sh.size(), p.samples);
                for &l in &sh.data.labels {
                    prop_assert!(!sh.excluded.contains(&l));
                }
                for &i in &sh.indices {
                    prop_assert!(used[sh.domain].insert(i));
                }
            }
            let total: usize = shards.iter().map(ClientShard::size).sum();
            prop_assert!(total <= 2 * 600 * s.classes);
            prop_assert_eq!(partition(&pools, &s, seed).unwrap(), shards);
        }
    }
}
