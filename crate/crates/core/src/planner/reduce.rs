//! Proportional down-sampling of a fleet by device profile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::{CutAssignment, Cuts, Fleet};

/// Client indices grouped by identical profile, groups in order of first
/// appearance.
pub(crate) fn profile_groups(fleet: &Fleet) -> Vec<Vec<usize>> {
    let mut keys: Vec<[u64; 3]> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, c) in fleet.clients.iter().enumerate() {
        let key = c.profile.key();
        match keys.iter().position(|k| *k == key) {
            Some(g) => groups[g].push(i),
            None => {
                keys.push(key);
                groups.push(vec![i]);
            }
        }
    }
    groups
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub fleet: Fleet,
    /// Representative index for every client of the full fleet.
    pub expansion: Vec<usize>,
}

impl Reduction {
    /// Copy each representative's quadruple to the clients it stands for.
    pub fn expand(&self, reduced: &[Cuts]) -> CutAssignment {
        CutAssignment::new(self.expansion.iter().map(|&r| reduced[r]).collect())
    }
}

/// Largest-remainder apportionment of `target` seats over group sizes with
/// at least one seat per group.
pub fn apportion(sizes: &[usize], target: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let mut seats: Vec<usize> = sizes.iter().map(|&s| s * target / total).collect();
    let rem: Vec<usize> = sizes.iter().map(|&s| s * target % total).collect();
    for (s, &size) in seats.iter_mut().zip(sizes) {
        *s = (*s).max(1).min(size);
    }
    // Largest remainder first, earlier groups win ties.
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
    while seats.iter().sum::<usize>() < target {
        let before = seats.iter().sum::<usize>();
        for &g in &order {
            if seats.iter().sum::<usize>() == target {
                break;
            }
            if seats[g] < sizes[g] {
                seats[g] += 1;
            }
        }
        if seats.iter().sum::<usize>() == before {
            break;
        }
    }
    // Minimum-seat bumps can overshoot; take back from the smallest remainders.
    while seats.iter().sum::<usize>() > target {
        let Some(&g) = order.iter().rev().find(|&&g| seats[g] > 1) else {
            break;
        };
        seats[g] -= 1;
    }
    seats
}

pub fn reduce_fleet(fleet: &Fleet, target: usize) -> Result<Reduction> {
    fleet.validate()?;
    let groups = profile_groups(fleet);
    if target > fleet.len() {
        return Err(Error::config(
            "ga.reduced_target",
            format!("target {target} exceeds {} clients", fleet.len()),
        ));
    }
    if target < groups.len() {
        return Err(Error::config(
            "ga.reduced_target",
            format!(
                "target {target} is below the {} distinct device profiles",
                groups.len()
            ),
        ));
    }
    if target == fleet.len() {
        return Ok(Reduction {
            fleet: fleet.clone(),
            expansion: (0..fleet.len()).collect(),
        });
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let seats = apportion(&sizes, target);
    let mut reduced = fleet.clone();
    reduced.clients.clear();
    let mut expansion = vec![0usize; fleet.len()];
    for (members, &a) in groups.iter().zip(&seats) {
        let base = reduced.clients.len();
        for r in 0..a {
            let mut c = fleet.clients[members[r * members.len() / a]].clone();
            c.id = base + r;
            reduced.clients.push(c);
        }
        for (j, &m) in members.iter().enumerate() {
            expansion[m] = base + j * a / members.len();
        }
    }
    Ok(Reduction {
        fleet: reduced,
        expansion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_to_twenty_by_hand() {
        // Sizes 15, 15, 14 x 5 scaled by 0.2: 3, 3, 2.8 x 5. Floors sum to 16;
        // four of the five 0.8 remainders get a seat, earliest first.
        assert_eq!(apportion(&[15, 15, 14, 14, 14, 14, 14], 20), vec![3, 3, 3, 3, 3, 3, 2]);
        let f = Fleet::bundled("edge100").unwrap();
        let r = reduce_fleet(&f, 20).unwrap();
        assert_eq!(r.fleet.len(), 20);
        let per_rep = |rep: usize| r.expansion.iter().filter(|&&e| e == rep).count();
        assert_eq!((0..20).map(per_rep).sum::<usize>(), 100);
        for (i, &rep) in r.expansion.iter().enumerate() {
            assert_eq!(f.clients[i].profile, r.fleet.clients[rep].profile);
        }
    }

    #[test]
    fn minimum_seat_and_overshoot() {
        assert_eq!(apportion(&[98, 1, 1], 3), vec![1, 1, 1]);
        assert_eq!(apportion(&[90, 5, 5], 4), vec![2, 1, 1]);
        assert_eq!(apportion(&[3], 1), vec![1]);
    }

    #[test]
    fn homogeneous_to_one() {
        let mut f = Fleet::bundled("edge7").unwrap();
        let p = f.clients[0].clone();
        f.clients = (0..9).map(|id| crate::latency::Client { id, ..p.clone() }).collect();
        let r = reduce_fleet(&f, 1).unwrap();
        assert_eq!(r.fleet.len(), 1);
        assert!(r.expansion.iter().all(|&e| e == 0));
    }

    #[test]
    fn full_target_is_identity() {
        let f = Fleet::bundled("edge7").unwrap();
        let r = reduce_fleet(&f, 7).unwrap();
        assert_eq!(r.fleet, f);
        assert_eq!(r.expansion, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_seats_is_an_error() {
        let f = Fleet::bundled("edge100").unwrap();
        assert!(reduce_fleet(&f, 6).is_err());
    }
}
