//! U-shaped split execution: clients run head and tail blocks, the server
//! runs every client's middle span with per-layer row concatenation.

mod step;
#[cfg(test)]
mod tests;

pub use step::{bce, gan_losses, training_step, ClientBatch, GanLosses, StepReport};

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BlockCache, Mode, Net, Network, ParamStore, SegmentCache};
use crate::latency::Cuts;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Activation,
    Gradient,
}

/// The only thing that crosses the client/server boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMessage {
    pub kind: MessageKind,
    pub client: usize,
    pub network: Net,
    /// 1-based major layer whose output (or output gradient) is carried.
    pub boundary: usize,
    pub payload: Tensor,
    pub rows: usize,
}

/// Header of a delivered message, kept for audits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub kind: MessageKind,
    pub client: usize,
    pub network: Net,
    pub boundary: usize,
    pub rows: usize,
    pub shape: Vec<usize>,
}

/// Delivery boundary between clients and server. The in-process bus hands
/// the message over unchanged; a socket transport would serialize here.
pub trait Transport {
    fn carry(&mut self, msg: SplitMessage) -> SplitMessage;
}

#[derive(Clone, Debug, Default)]
pub struct InProcessBus {
    pub log: Vec<MessageRecord>,
    pub record: bool,
}

impl InProcessBus {
    pub fn recording() -> Self {
        Self {
            log: Vec::new(),
            record: true,
        }
    }
}

impl Transport for InProcessBus {
    fn carry(&mut self, msg: SplitMessage) -> SplitMessage {
        if self.record {
            self.log.push(MessageRecord {
                kind: msg.kind,
                client: msg.client,
                network: msg.network,
                boundary: msg.boundary,
                rows: msg.rows,
                shape: msg.payload.shape().to_vec(),
            });
        }
        msg
    }
}

/// Server blocks (0-based, half-open) covered by each client for one network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participation {
    pub net: Net,
    pub spans: BTreeMap<usize, Range<usize>>,
}

impl Participation {
    pub fn new(net: Net, cuts: &BTreeMap<usize, Cuts>) -> Self {
        Self {
            net,
            spans: cuts.iter().map(|(&k, c)| (k, c.server_blocks(net))).collect(),
        }
    }

    /// Clients whose span covers `block`, ascending.
    pub fn active(&self, block: usize) -> Vec<usize> {
        self.spans
            .iter()
            .filter(|(_, s)| s.contains(&block))
            .map(|(&k, _)| k)
            .collect()
    }

    /// 1-based entry layer `l_H + 1`.
    pub fn entry(&self, client: usize) -> usize {
        self.spans[&client].start + 1
    }

    /// 1-based exit layer `l_T - 1`.
    pub fn exit(&self, client: usize) -> usize {
        self.spans[&client].end
    }
}

/// One client's half of the model: head and tail blocks of both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientModel {
    pub id: usize,
    pub cuts: Cuts,
    pub store: ParamStore,
}

#[derive(Debug)]
struct ServerLayer {
    block: usize,
    layout: Vec<(usize, Range<usize>)>,
    cache: BlockCache<f32>,
}

/// Intermediates of the server part of one pass.
#[derive(Debug)]
pub struct ServerCache {
    net: Net,
    version: u64,
    layers: Vec<ServerLayer>,
}

/// Everything needed to run a backward pass over one network.
#[derive(Debug)]
pub struct PassCache {
    net: Net,
    heads: BTreeMap<usize, SegmentCache<f32>>,
    server: ServerCache,
    tails: BTreeMap<usize, SegmentCache<f32>>,
}

#[derive(Debug)]
pub struct ServerOutput {
    pub exits: Vec<SplitMessage>,
    /// Output rows of the middle block per client.
    pub middle: BTreeMap<usize, Tensor>,
    pub cache: Option<ServerCache>,
}

#[derive(Debug)]
pub struct PassOutput {
    pub outputs: BTreeMap<usize, Tensor>,
    pub middle: BTreeMap<usize, Tensor>,
    pub cache: Option<PassCache>,
}

/// Per-client input to a pass: rows and the client-local labels.
pub type PassInput = BTreeMap<usize, (Tensor, Vec<usize>)>;

/// Both networks split across a fleet. The server keeps one replica of its
/// blocks per client so that federation can weight them.
#[derive(Clone, Debug)]
pub struct SplitSystem {
    pub generator: Network,
    pub discriminator: Network,
    pub clients: BTreeMap<usize, ClientModel>,
    pub server: BTreeMap<usize, ParamStore>,
    participation: [Participation; 2],
    versions: [u64; 2],
    forward_calls: [u64; 2],
}

fn idx(net: Net) -> usize {
    match net {
        Net::Generator => 0,
        Net::Discriminator => 1,
    }
}

impl SplitSystem {
    /// All clients start from the same initial weights drawn from `rng`.
    pub fn new<R: Rng>(
        generator: Network,
        discriminator: Network,
        cuts: &BTreeMap<usize, Cuts>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut full: ParamStore = generator.init_params(rng);
        full.merge(discriminator.init_params(rng));
        let mut clients = BTreeMap::new();
        let mut server = BTreeMap::new();
        for (&k, c) in cuts {
            for net in [&generator, &discriminator] {
                let n = net.major_count();
                if let Some(v) = Cuts::violation(c.head(net.net), c.tail(net.net), n) {
                    return Err(Error::Invariant(format!(
                        "client {k}: {} cuts ({}, {}): {v}",
                        net.net.tag(),
                        c.head(net.net),
                        c.tail(net.net)
                    )));
                }
                if let Some(b) = c.server_blocks(net.net).find(|&b| net.blocks[b].needs_labels()) {
                    return Err(Error::Invariant(format!(
                        "client {k}: {} block {} needs labels and cannot run on the server",
                        net.net.tag(),
                        b + 1
                    )));
                }
            }
            let mut store = ParamStore::new();
            let mut replica = ParamStore::new();
            for net in [&generator, &discriminator] {
                let n = net.major_count();
                store.merge(full.extract(net.net, c.head_blocks(net.net)));
                store.merge(full.extract(net.net, c.tail_blocks(net.net, n)));
                replica.merge(full.extract(net.net, c.server_blocks(net.net)));
            }
            clients.insert(
                k,
                ClientModel {
                    id: k,
                    cuts: *c,
                    store,
                },
            );
            server.insert(k, replica);
        }
        Ok(Self {
            participation: [
                Participation::new(Net::Generator, cuts),
                Participation::new(Net::Discriminator, cuts),
            ],
            generator,
            discriminator,
            clients,
            server,
            versions: [0; 2],
            forward_calls: [0; 2],
        })
    }

    pub fn network(&self, net: Net) -> &Network {
        match net {
            Net::Generator => &self.generator,
            Net::Discriminator => &self.discriminator,
        }
    }

    pub fn participation(&self, net: Net) -> &Participation {
        &self.participation[idx(net)]
    }

    /// Full-network forward passes started since construction.
    pub fn forward_calls(&self, net: Net) -> u64 {
        self.forward_calls[idx(net)]
    }

    /// Invalidate outstanding caches of `net` after its parameters change.
    pub fn params_changed(&mut self, net: Net) {
        self.versions[idx(net)] += 1;
    }

    /// Client store merged with its server replica: the monolithic
    /// per-client model.
    pub fn monolithic_store(&self, client: usize) -> ParamStore {
        let mut s = self.clients[&client].store.clone();
        s.merge(self.server[&client].clone());
        s
    }

    pub fn client_forward_head(
        &mut self,
        client: usize,
        net: Net,
        x: Tensor,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(SplitMessage, Option<SegmentCache<f32>>)> {
        let network = match net {
            Net::Generator => &self.generator,
            Net::Discriminator => &self.discriminator,
        };
        let c = self
            .clients
            .get_mut(&client)
            .ok_or_else(|| Error::Protocol(format!("unknown client {client}")))?;
        let h = c.cuts.head(net);
        let rows = x.rows();
        let (payload, cache) = network.forward(0..h, &mut c.store, x, Some(labels), mode)?;
        Ok((
            SplitMessage {
                kind: MessageKind::Activation,
                client,
                network: net,
                boundary: h,
                payload,
                rows,
            },
            cache,
        ))
    }

    /// Run every server block, concatenating the rows of all clients active
    /// at that block in ascending client order.
    pub fn server_forward(
        &mut self,
        net: Net,
        expected: &[usize],
        messages: Vec<SplitMessage>,
        mode: Mode,
    ) -> Result<ServerOutput> {
        let part = &self.participation[idx(net)];
        let network = match net {
            Net::Generator => &self.generator,
            Net::Discriminator => &self.discriminator,
        };
        let mut pending: BTreeMap<usize, Tensor> = BTreeMap::new();
        for m in messages {
            if m.kind != MessageKind::Activation || m.network != net {
                return Err(Error::Protocol(format!(
                    "client {}: expected a {} activation, got {:?} for {}",
                    m.client,
                    net.tag(),
                    m.kind,
                    m.network.tag()
                )));
            }
            if !part.spans.contains_key(&m.client) {
                return Err(Error::Protocol(format!("unknown client {}", m.client)));
            }
            if m.boundary + 1 != part.entry(m.client) || m.payload.rows() != m.rows {
                return Err(Error::Protocol(format!(
                    "client {}: activation at layer {} does not match entry layer {}",
                    m.client,
                    m.boundary,
                    part.entry(m.client)
                )));
            }
            if pending.insert(m.client, m.payload).is_some() {
                return Err(Error::Protocol(format!("client {}: duplicate message", m.client)));
            }
        }
        let expected: BTreeSet<usize> = expected.iter().copied().collect();
        if let Some(k) = expected.iter().find(|k| !pending.contains_key(k)) {
            return Err(Error::Protocol(format!("missing activation from client {k}")));
        }
        if let Some(k) = pending.keys().find(|k| !expected.contains(k)) {
            return Err(Error::Protocol(format!("unexpected message from client {k}")));
        }
        if expected.is_empty() {
            return Ok(ServerOutput {
                exits: Vec::new(),
                middle: BTreeMap::new(),
                cache: (mode == Mode::Train).then(|| ServerCache {
                    net,
                    version: self.versions[idx(net)],
                    layers: Vec::new(),
                }),
            });
        }

        let lo = expected.iter().map(|&k| part.spans[&k].start).min().unwrap_or(0);
        let hi = expected.iter().map(|&k| part.spans[&k].end).max().unwrap_or(0);
        let mid = network.middle() - 1;
        let mut current: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut exits = Vec::new();
        let mut middle = BTreeMap::new();
        let mut layers = Vec::new();
        for b in lo..hi {
            for &k in &expected {
                if part.spans[&k].start == b {
                    current.insert(k, pending.remove(&k).expect("checked above"));
                }
            }
            let mut layout = Vec::with_capacity(current.len());
            let mut row = 0;
            for (&k, t) in &current {
                layout.push((k, row..row + t.rows()));
                row += t.rows();
            }
            let parts: Vec<&Tensor> = current.values().collect();
            let x = Tensor::concat_rows(&parts);
            let groups: Vec<Range<usize>> = layout.iter().map(|(_, r)| r.clone()).collect();
            let mut stores: Vec<&mut ParamStore> = self
                .server
                .iter_mut()
                .filter(|(k, _)| current.contains_key(k))
                .map(|(_, s)| s)
                .collect();
            let (y, cache) = network.block_forward(b, &mut stores, &groups, x, None, mode)?;
            for (k, r) in &layout {
                let rows = y.slice_rows(r.start, r.end);
                if b == mid {
                    middle.insert(*k, rows.clone());
                }
                current.insert(*k, rows);
            }
            for &k in &expected {
                if part.spans[&k].end == b + 1 {
                    let payload = current.remove(&k).expect("active until exit");
                    exits.push(SplitMessage {
                        kind: MessageKind::Activation,
                        client: k,
                        network: net,
                        boundary: b + 1,
                        rows: payload.rows(),
                        payload,
                    });
                }
            }
            if let Some(cache) = cache {
                layers.push(ServerLayer {
                    block: b,
                    layout,
                    cache,
                });
            }
        }
        Ok(ServerOutput {
            exits,
            middle,
            cache: (mode == Mode::Train).then(|| ServerCache {
                net,
                version: self.versions[idx(net)],
                layers,
            }),
        })
    }

    pub fn client_forward_tail(
        &mut self,
        net: Net,
        msg: SplitMessage,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(Tensor, Option<SegmentCache<f32>>)> {
        let network = match net {
            Net::Generator => &self.generator,
            Net::Discriminator => &self.discriminator,
        };
        let n = network.major_count();
        let c = self
            .clients
            .get_mut(&msg.client)
            .ok_or_else(|| Error::Protocol(format!("unknown client {}", msg.client)))?;
        if msg.boundary + 1 != c.cuts.tail(net) {
            return Err(Error::Protocol(format!(
                "client {}: exit at layer {} but tail starts at {}",
                msg.client,
                msg.boundary,
                c.cuts.tail(net)
            )));
        }
        network.forward(c.cuts.tail_blocks(net, n), &mut c.store, msg.payload, Some(labels), mode)
    }

    pub fn client_backward_tail(
        &mut self,
        client: usize,
        net: Net,
        cache: SegmentCache<f32>,
        gy: Tensor,
    ) -> Result<SplitMessage> {
        let network = match net {
            Net::Generator => &self.generator,
            Net::Discriminator => &self.discriminator,
        };
        let c = self
            .clients
            .get_mut(&client)
            .ok_or_else(|| Error::Protocol(format!("unknown client {client}")))?;
        let payload = network.backward(&mut c.store, cache, gy)?;
        Ok(SplitMessage {
            kind: MessageKind::Gradient,
            client,
            network: net,
            boundary: c.cuts.tail(net) - 1,
            rows: payload.rows(),
            payload,
        })
    }

    /// Reverse of `server_forward`: per-layer row splitting, gradient
    /// messages at each client's entry layer.
    pub fn server_backward(&mut self, cache: ServerCache, messages: Vec<SplitMessage>) -> Result<Vec<SplitMessage>> {
        let net = cache.net;
        if cache.version != self.versions[idx(net)] {
            return Err(Error::Protocol(format!(
                "stale {} cache: parameters changed after the forward pass",
                net.tag()
            )));
        }
        let part = &self.participation[idx(net)];
        let network = match net {
            Net::Generator => &self.generator,
            Net::Discriminator => &self.discriminator,
        };
        let mut pending: BTreeMap<usize, Tensor> = BTreeMap::new();
        for m in messages {
            if m.kind != MessageKind::Gradient || m.network != net {
                return Err(Error::Protocol(format!("client {}: expected a gradient", m.client)));
            }
            if !part.spans.contains_key(&m.client) || m.boundary != part.exit(m.client) {
                return Err(Error::Protocol(format!(
                    "client {}: gradient at layer {} does not match its exit",
                    m.client, m.boundary
                )));
            }
            pending.insert(m.client, m.payload);
        }
        let mut current: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut out = Vec::new();
        for layer in cache.layers.into_iter().rev() {
            for (k, _) in &layer.layout {
                if part.spans[k].end == layer.block + 1 {
                    let g = pending
                        .remove(k)
                        .ok_or_else(|| Error::Protocol(format!("missing gradient from client {k}")))?;
                    current.insert(*k, g);
                }
            }
            let parts: Vec<&Tensor> = layer
                .layout
                .iter()
                .map(|(k, _)| {
                    current
                        .get(k)
                        .ok_or_else(|| Error::Protocol(format!("client {k} lost its rows")))
                })
                .collect::<Result<_>>()?;
            let g = Tensor::concat_rows(&parts);
            let groups: Vec<Range<usize>> = layer.layout.iter().map(|(_, r)| r.clone()).collect();
            let members: BTreeSet<usize> = layer.layout.iter().map(|(k, _)| *k).collect();
            let mut stores: Vec<&mut ParamStore> = self
                .server
                .iter_mut()
                .filter(|(k, _)| members.contains(k))
                .map(|(_, s)| s)
                .collect();
            let gx = network.block_backward(layer.block, &mut stores, &groups, layer.cache, g)?;
            for (k, r) in &layer.layout {
                let rows = gx.slice_rows(r.start, r.end);
                if part.spans[k].start == layer.block {
                    current.remove(k);
                    out.push(SplitMessage {
                        kind: MessageKind::Gradient,
                        client: *k,
                        network: net,
                        boundary: layer.block,
                        rows: rows.rows(),
                        payload: rows,
                    });
                } else {
                    current.insert(*k, rows);
                }
            }
        }
        if let Some(k) = pending.keys().next() {
            return Err(Error::Protocol(format!("gradient from client {k} was never consumed")));
        }
        Ok(out)
    }

    pub fn client_backward_head(
        &mut self,
        net: Net,
        cache: SegmentCache<f32>,
        msg: SplitMessage,
    ) -> Result<Tensor> {
        let network = match net {
            Net::Generator => &self.generator,
            Net::Discriminator => &self.discriminator,
        };
        let c = self
            .clients
            .get_mut(&msg.client)
            .ok_or_else(|| Error::Protocol(format!("unknown client {}", msg.client)))?;
        if msg.boundary != c.cuts.head(net) {
            return Err(Error::Protocol(format!(
                "client {}: gradient at layer {} but head ends at {}",
                msg.client,
                msg.boundary,
                c.cuts.head(net)
            )));
        }
        network.backward(&mut c.store, cache, msg.payload)
    }

    /// Head, server and tail for every client in `inputs`.
    pub fn forward(
        &mut self,
        net: Net,
        inputs: PassInput,
        mode: Mode,
        bus: &mut dyn Transport,
    ) -> Result<PassOutput> {
        self.forward_calls[idx(net)] += 1;
        let mut heads = BTreeMap::new();
        let mut msgs = Vec::with_capacity(inputs.len());
        let mut labels = BTreeMap::new();
        for (k, (x, l)) in inputs {
            let (msg, cache) = self.client_forward_head(k, net, x, &l, mode)?;
            msgs.push(bus.carry(msg));
            heads.extend(cache.map(|c| (k, c)));
            labels.insert(k, l);
        }
        let expected: Vec<usize> = labels.keys().copied().collect();
        let server = self.server_forward(net, &expected, msgs, mode)?;
        let mut outputs = BTreeMap::new();
        let mut tails = BTreeMap::new();
        for msg in server.exits {
            let msg = bus.carry(msg);
            let k = msg.client;
            let (y, cache) = self.client_forward_tail(net, msg, &labels[&k], mode)?;
            outputs.insert(k, y);
            tails.extend(cache.map(|c| (k, c)));
        }
        let cache = server.cache.map(|server| PassCache {
            net,
            heads,
            server,
            tails,
        });
        Ok(PassOutput {
            outputs,
            middle: server.middle,
            cache,
        })
    }

    /// Tail, server and head backward; returns the gradient with respect to
    /// each client's input rows.
    pub fn backward(
        &mut self,
        cache: PassCache,
        mut grads: BTreeMap<usize, Tensor>,
        bus: &mut dyn Transport,
    ) -> Result<BTreeMap<usize, Tensor>> {
        let net = cache.net;
        let mut msgs = Vec::with_capacity(cache.tails.len());
        for (k, c) in cache.tails {
            let gy = grads
                .remove(&k)
                .ok_or_else(|| Error::Protocol(format!("no loss gradient for client {k}")))?;
            msgs.push(bus.carry(self.client_backward_tail(k, net, c, gy)?));
        }
        let back = self.server_backward(cache.server, msgs)?;
        let mut heads = cache.heads;
        let mut out = BTreeMap::new();
        for msg in back {
            let msg = bus.carry(msg);
            let k = msg.client;
            let c = heads
                .remove(&k)
                .ok_or_else(|| Error::Protocol(format!("no head cache for client {k}")))?;
            out.insert(k, self.client_backward_head(net, c, msg)?);
        }
        Ok(out)
    }

    /// Zero gradients of `net` on every client store and server replica.
    pub fn zero_grad(&mut self, net: Net) {
        for c in self.clients.values_mut() {
            c.store.zero_grad_net(net);
        }
        for s in self.server.values_mut() {
            s.zero_grad_net(net);
        }
    }
}
