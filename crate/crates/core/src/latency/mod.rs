//! Analytical latency of one training iteration for a cut assignment.
//!
//! Client and server compute is `b * flops / (freq * flops_per_cycle)`;
//! links move `b * bytes` at the sender's rate. The server walks its layers
//! forward and backward keeping the latest completion time `S_i`, and each
//! network's latency is the slowest client to finish its tail (forward) or
//! head (backward). The discriminator runs three times per iteration.

mod cuts;
mod fleet;

use serde::{Deserialize, Serialize};

pub use cuts::{CutAssignment, Cuts};
pub use fleet::{
    Client, ClientDoc, DeviceProfile, Fleet, FleetDoc, ProfileDoc, ServerDoc, BUNDLED_FLEETS,
};

use crate::error::{Error, Result};
use crate::graph::{ModelProfile, Net};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Head,
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Link {
    Uplink,
    Downlink,
}

fn compute_time(batch: usize, flops: f64, dev: &DeviceProfile) -> f64 {
    batch as f64 * flops / (dev.freq_hz * dev.flops_per_cycle)
}

/// Client `k` running one of its segments of `net`.
pub fn client_compute(
    fleet: &Fleet,
    profile: &ModelProfile,
    k: usize,
    cuts: &Cuts,
    net: Net,
    segment: Segment,
    direction: Direction,
) -> Result<f64> {
    let np = profile.net(net);
    let n = np.major_count();
    let (first, last) = match segment {
        Segment::Head => (1, cuts.head(net)),
        Segment::Tail => (cuts.tail(net), n),
    };
    if first > last || first < 1 || last > n {
        return Err(Error::Invariant(format!(
            "client {k}: empty {} {segment:?} segment (layers {first}..={last})",
            net.tag()
        )));
    }
    let flops = match direction {
        Direction::Forward => np.flops_fwd(first, last),
        Direction::Backward => np.flops_bwd(first, last),
    };
    Ok(compute_time(fleet.batch, flops, &fleet.clients[k].profile))
}

/// Server time for one batch of one client through 1-based layer `i`.
pub fn server_layer_compute(
    fleet: &Fleet,
    profile: &ModelProfile,
    net: Net,
    i: usize,
    direction: Direction,
) -> f64 {
    let l = profile.net(net).layer(i);
    let flops = match direction {
        Direction::Forward => l.flops_fwd,
        Direction::Backward => l.flops_bwd,
    };
    compute_time(fleet.batch, flops, &fleet.server)
}

/// Moving the batch's tensor at 1-based boundary layer `l` over a link of
/// client `k` (uplink at the client's rate, downlink at the server's).
pub fn transmission(
    fleet: &Fleet,
    profile: &ModelProfile,
    k: usize,
    net: Net,
    l: usize,
    link: Link,
) -> f64 {
    let rate = match link {
        Link::Uplink => fleet.clients[k].profile.rate,
        Link::Downlink => fleet.server.rate,
    };
    fleet.batch as f64 * profile.net(net).activation_bytes(l) / rate
}

/// Boundary layer whose tensor crosses the link.
///
/// Uplink forward sends the head output `l_H`; uplink backward sends the
/// gradient of the tail input, which is the output of `l_T - 1`. Downlinks
/// use `l_T - 1` forward and `l_H + 1` backward.
pub fn boundary(cuts: &Cuts, net: Net, link: Link, direction: Direction) -> usize {
    match (link, direction) {
        (Link::Uplink, Direction::Forward) => cuts.head(net),
        (Link::Uplink, Direction::Backward) => cuts.tail(net) - 1,
        (Link::Downlink, Direction::Forward) => cuts.tail(net) - 1,
        (Link::Downlink, Direction::Backward) => cuts.head(net) + 1,
    }
}

/// Every per-client term of one network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientTerms {
    pub head_fwd: f64,
    pub head_bwd: f64,
    pub tail_fwd: f64,
    pub tail_bwd: f64,
    pub uplink_fwd: f64,
    pub uplink_bwd: f64,
    pub downlink_fwd: f64,
    pub downlink_bwd: f64,
}

impl ClientTerms {
    fn arrive_fwd(&self) -> f64 {
        self.head_fwd + self.uplink_fwd
    }
    fn arrive_bwd(&self) -> f64 {
        self.tail_bwd + self.uplink_bwd
    }
    fn finish_fwd(&self) -> f64 {
        self.downlink_fwd + self.tail_fwd
    }
    fn finish_bwd(&self) -> f64 {
        self.downlink_bwd + self.head_bwd
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetLatency {
    pub clients: Vec<ClientTerms>,
    /// Server time per client batch, index `i - 1` for layer `i`.
    pub server_fwd: Vec<f64>,
    pub server_bwd: Vec<f64>,
    /// `N_i`, index `i - 1`.
    pub participants: Vec<usize>,
    /// `S^F_i` for `i = 0..=n`.
    pub s_fwd: Vec<f64>,
    /// `S^B_i` for `i = 0..=n+1`; entry 0 is unused and kept at 0.
    pub s_bwd: Vec<f64>,
    pub forward: f64,
    pub backward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub generator: NetLatency,
    pub discriminator: NetLatency,
    /// `L_G^F + L_G^B + 3 (L_D^F + L_D^B)`.
    pub total: f64,
}

impl LatencyBreakdown {
    pub fn net(&self, net: Net) -> &NetLatency {
        match net {
            Net::Generator => &self.generator,
            Net::Discriminator => &self.discriminator,
        }
    }
}

pub fn combine(g_fwd: f64, g_bwd: f64, d_fwd: f64, d_bwd: f64) -> f64 {
    g_fwd + g_bwd + 3.0 * (d_fwd + d_bwd)
}

struct Fold {
    participants: Vec<usize>,
    s_fwd: Vec<f64>,
    s_bwd: Vec<f64>,
    forward: f64,
    backward: f64,
}

/// Both recursions and the final maxima for one network. `arrive_*` and
/// `finish_*` are per client, in fleet order.
#[allow(clippy::too_many_arguments)]
fn fold(
    n: usize,
    server_fwd: &[f64],
    server_bwd: &[f64],
    heads: &[usize],
    tails: &[usize],
    arrive_fwd: &[f64],
    arrive_bwd: &[f64],
    finish_fwd: &[f64],
    finish_bwd: &[f64],
) -> Fold {
    let mut participants = vec![0usize; n];
    let mut head_arrival = vec![0.0f64; n + 2];
    let mut tail_arrival = vec![0.0f64; n + 2];
    for k in 0..heads.len() {
        for p in &mut participants[heads[k]..tails[k] - 1] {
            *p += 1;
        }
        head_arrival[heads[k]] = head_arrival[heads[k]].max(arrive_fwd[k]);
        tail_arrival[tails[k]] = tail_arrival[tails[k]].max(arrive_bwd[k]);
    }

    let mut s_fwd = vec![0.0f64; n + 1];
    for i in 1..=n {
        let chained = s_fwd[i - 1] + server_fwd[i - 1] * participants[i - 1] as f64;
        s_fwd[i] = chained.max(head_arrival[i]);
    }
    let mut s_bwd = vec![0.0f64; n + 2];
    for i in (1..=n).rev() {
        let chained = s_bwd[i + 1] + server_bwd[i - 1] * participants[i - 1] as f64;
        s_bwd[i] = chained.max(tail_arrival[i]);
    }

    let mut forward = 0.0f64;
    let mut backward = 0.0f64;
    for k in 0..heads.len() {
        forward = forward.max(s_fwd[tails[k] - 1] + finish_fwd[k]);
        backward = backward.max(s_bwd[heads[k] + 1] + finish_bwd[k]);
    }
    Fold {
        participants,
        s_fwd,
        s_bwd,
        forward,
        backward,
    }
}

fn server_times(fleet: &Fleet, profile: &ModelProfile, net: Net) -> (Vec<f64>, Vec<f64>) {
    let n = profile.net(net).major_count();
    (1..=n)
        .map(|i| {
            (
                server_layer_compute(fleet, profile, net, i, Direction::Forward),
                server_layer_compute(fleet, profile, net, i, Direction::Backward),
            )
        })
        .unzip()
}

fn client_terms(
    fleet: &Fleet,
    profile: &ModelProfile,
    k: usize,
    cuts: &Cuts,
    net: Net,
) -> Result<ClientTerms> {
    use Direction::*;
    use Segment::*;
    let link = |link, dir| transmission(fleet, profile, k, net, boundary(cuts, net, link, dir), link);
    Ok(ClientTerms {
        head_fwd: client_compute(fleet, profile, k, cuts, net, Head, Forward)?,
        head_bwd: client_compute(fleet, profile, k, cuts, net, Head, Backward)?,
        tail_fwd: client_compute(fleet, profile, k, cuts, net, Tail, Forward)?,
        tail_bwd: client_compute(fleet, profile, k, cuts, net, Tail, Backward)?,
        uplink_fwd: link(Link::Uplink, Forward),
        uplink_bwd: link(Link::Uplink, Backward),
        downlink_fwd: link(Link::Downlink, Forward),
        downlink_bwd: link(Link::Downlink, Backward),
    })
}

fn net_latency(
    fleet: &Fleet,
    profile: &ModelProfile,
    assignment: &CutAssignment,
    net: Net,
) -> Result<NetLatency> {
    let n = profile.net(net).major_count();
    let clients: Vec<ClientTerms> = assignment
        .cuts
        .iter()
        .enumerate()
        .map(|(k, c)| client_terms(fleet, profile, k, c, net))
        .collect::<Result<_>>()?;
    let (server_fwd, server_bwd) = server_times(fleet, profile, net);
    let heads: Vec<usize> = assignment.cuts.iter().map(|c| c.head(net)).collect();
    let tails: Vec<usize> = assignment.cuts.iter().map(|c| c.tail(net)).collect();
    let col = |f: fn(&ClientTerms) -> f64| clients.iter().map(f).collect::<Vec<f64>>();
    let f = fold(
        n,
        &server_fwd,
        &server_bwd,
        &heads,
        &tails,
        &col(ClientTerms::arrive_fwd),
        &col(ClientTerms::arrive_bwd),
        &col(ClientTerms::finish_fwd),
        &col(ClientTerms::finish_bwd),
    );
    Ok(NetLatency {
        clients,
        server_fwd,
        server_bwd,
        participants: f.participants,
        s_fwd: f.s_fwd,
        s_bwd: f.s_bwd,
        forward: f.forward,
        backward: f.backward,
    })
}

fn check(fleet: &Fleet, assignment: &CutAssignment, profile: &ModelProfile) -> Result<()> {
    if assignment.len() != fleet.len() {
        return Err(Error::Invariant(format!(
            "assignment covers {} clients, fleet has {}",
            assignment.len(),
            fleet.len()
        )));
    }
    assignment.validate(profile)
}

/// `S` vector of one network and direction.
pub fn cumulative(
    fleet: &Fleet,
    assignment: &CutAssignment,
    profile: &ModelProfile,
    net: Net,
    direction: Direction,
) -> Result<Vec<f64>> {
    check(fleet, assignment, profile)?;
    let nl = net_latency(fleet, profile, assignment, net)?;
    Ok(match direction {
        Direction::Forward => nl.s_fwd,
        Direction::Backward => nl.s_bwd,
    })
}

pub fn total_latency(
    fleet: &Fleet,
    assignment: &CutAssignment,
    profile: &ModelProfile,
) -> Result<LatencyBreakdown> {
    check(fleet, assignment, profile)?;
    let generator = net_latency(fleet, profile, assignment, Net::Generator)?;
    let discriminator = net_latency(fleet, profile, assignment, Net::Discriminator)?;
    let total = combine(
        generator.forward,
        generator.backward,
        discriminator.forward,
        discriminator.backward,
    );
    Ok(LatencyBreakdown {
        generator,
        discriminator,
        total,
    })
}

/// Per-client terms for every possible cut, so that search loops only run
/// the recursions. Produces bit-identical totals to [`total_latency`].
#[derive(Clone, Debug)]
pub struct Evaluator {
    nets: [NetTables; 2],
}

#[derive(Clone, Debug)]
struct NetTables {
    n: usize,
    server_fwd: Vec<f64>,
    server_bwd: Vec<f64>,
    /// `[client][cut]`, indexed by the 1-based head or tail cut.
    arrive_fwd: Vec<Vec<f64>>,
    arrive_bwd: Vec<Vec<f64>>,
    finish_fwd: Vec<Vec<f64>>,
    finish_bwd: Vec<Vec<f64>>,
}

impl Evaluator {
    pub fn new(fleet: &Fleet, profile: &ModelProfile) -> Result<Self> {
        fleet.validate()?;
        let tables = |net: Net| -> Result<NetTables> {
            let n = profile.net(net).major_count();
            let (server_fwd, server_bwd) = server_times(fleet, profile, net);
            let mut t = NetTables {
                n,
                server_fwd,
                server_bwd,
                arrive_fwd: Vec::new(),
                arrive_bwd: Vec::new(),
                finish_fwd: Vec::new(),
                finish_bwd: Vec::new(),
            };
            for k in 0..fleet.len() {
                let mut af = vec![f64::NAN; n + 1];
                let mut ab = vec![f64::NAN; n + 1];
                let mut ff = vec![f64::NAN; n + 1];
                let mut fb = vec![f64::NAN; n + 1];
                // Heads and tails are filled independently; the other cut is
                // set to an extreme that keeps the segment non-empty.
                for h in 1..n {
                    let c = cuts_for(net, h, n);
                    let terms = client_terms(fleet, profile, k, &c, net)?;
                    af[h] = terms.arrive_fwd();
                    fb[h] = terms.finish_bwd();
                }
                for tl in 2..=n {
                    let c = cuts_for(net, 1, tl);
                    let terms = client_terms(fleet, profile, k, &c, net)?;
                    ab[tl] = terms.arrive_bwd();
                    ff[tl] = terms.finish_fwd();
                }
                t.arrive_fwd.push(af);
                t.arrive_bwd.push(ab);
                t.finish_fwd.push(ff);
                t.finish_bwd.push(fb);
            }
            Ok(t)
        };
        Ok(Self {
            nets: [tables(Net::Generator)?, tables(Net::Discriminator)?],
        })
    }

    /// `L_T` of an assignment assumed valid.
    pub fn latency(&self, cuts: &[Cuts]) -> f64 {
        let mut l = [0.0f64; 4];
        for (j, (net, t)) in [Net::Generator, Net::Discriminator]
            .into_iter()
            .zip(&self.nets)
            .enumerate()
        {
            let heads: Vec<usize> = cuts.iter().map(|c| c.head(net)).collect();
            let tails: Vec<usize> = cuts.iter().map(|c| c.tail(net)).collect();
            let pick = |table: &Vec<Vec<f64>>, idx: &[usize]| -> Vec<f64> {
                idx.iter().enumerate().map(|(k, &i)| table[k][i]).collect()
            };
            let f = fold(
                t.n,
                &t.server_fwd,
                &t.server_bwd,
                &heads,
                &tails,
                &pick(&t.arrive_fwd, &heads),
                &pick(&t.arrive_bwd, &tails),
                &pick(&t.finish_fwd, &tails),
                &pick(&t.finish_bwd, &heads),
            );
            l[2 * j] = f.forward;
            l[2 * j + 1] = f.backward;
        }
        combine(l[0], l[1], l[2], l[3])
    }
}

/// A quadruple with `head`/`tail` set on `net` only; the other network's
/// cuts are irrelevant for per-network terms.
fn cuts_for(net: Net, head: usize, tail: usize) -> Cuts {
    match net {
        Net::Generator => Cuts::new(head, tail, 1, 2),
        Net::Discriminator => Cuts::new(1, 2, head, tail),
    }
}
