//! Cut quadruples. Indices are 1-based major layers: the head holds
//! `1..=head`, the server `head+1..=tail-1`, the tail `tail..=n`.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelProfile, Net};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cuts {
    pub g_head: usize,
    pub g_tail: usize,
    pub d_head: usize,
    pub d_tail: usize,
}

impl Cuts {
    pub fn new(g_head: usize, g_tail: usize, d_head: usize, d_tail: usize) -> Self {
        Self {
            g_head,
            g_tail,
            d_head,
            d_tail,
        }
    }

    pub fn head(&self, net: Net) -> usize {
        match net {
            Net::Generator => self.g_head,
            Net::Discriminator => self.d_head,
        }
    }

    pub fn tail(&self, net: Net) -> usize {
        match net {
            Net::Generator => self.g_tail,
            Net::Discriminator => self.d_tail,
        }
    }

    pub fn get(&self, slot: usize) -> usize {
        [self.g_head, self.g_tail, self.d_head, self.d_tail][slot]
    }

    pub fn set(&mut self, slot: usize, v: usize) {
        match slot {
            0 => self.g_head = v,
            1 => self.g_tail = v,
            2 => self.d_head = v,
            3 => self.d_tail = v,
            _ => panic!("cut slot {slot} out of range"),
        }
    }

    /// 0-based block ranges of the three segments.
    pub fn head_blocks(&self, net: Net) -> Range<usize> {
        0..self.head(net)
    }

    pub fn server_blocks(&self, net: Net) -> Range<usize> {
        self.head(net)..self.tail(net) - 1
    }

    pub fn tail_blocks(&self, net: Net, n: usize) -> Range<usize> {
        self.tail(net) - 1..n
    }

    /// Major layers kept on the client across both networks.
    pub fn client_layers(&self, n_g: usize, n_d: usize) -> usize {
        self.g_head + (n_g + 1 - self.g_tail) + self.d_head + (n_d + 1 - self.d_tail)
    }

    /// Check one network's pair against `n` major layers; `None` when valid.
    pub fn violation(head: usize, tail: usize, n: usize) -> Option<String> {
        let mid = n.div_ceil(2);
        if head < 1 {
            Some(format!("head cut {head} < 1"))
        } else if tail > n {
            Some(format!("tail cut {tail} > n = {n}"))
        } else if head + 1 > mid {
            Some(format!("head cut {head} leaves middle layer {mid} on the client"))
        } else if mid + 1 > tail {
            Some(format!("tail cut {tail} leaves middle layer {mid} on the client"))
        } else {
            None
        }
    }

    pub fn validate(&self, client: usize, profile: &ModelProfile) -> Result<()> {
        for net in [Net::Generator, Net::Discriminator] {
            let n = profile.net(net).major_count();
            if let Some(v) = Self::violation(self.head(net), self.tail(net), n) {
                return Err(Error::Invariant(format!(
                    "client {client}: {} cuts ({}, {}): {v}",
                    net.tag(),
                    self.head(net),
                    self.tail(net)
                )));
            }
        }
        Ok(())
    }

    /// Every valid (head, tail) pair for a network with `n` major layers.
    pub fn pairs(n: usize) -> Vec<(usize, usize)> {
        let mid = n.div_ceil(2);
        let mut out = Vec::new();
        for h in 1..mid {
            for t in mid + 1..=n {
                out.push((h, t));
            }
        }
        out
    }

    /// Every valid quadruple, G pairs outermost.
    pub fn all(n_g: usize, n_d: usize) -> Vec<Cuts> {
        let dp = Self::pairs(n_d);
        Self::pairs(n_g)
            .into_iter()
            .flat_map(|(gh, gt)| dp.iter().map(move |&(dh, dt)| Cuts::new(gh, gt, dh, dt)))
            .collect()
    }
}

impl fmt::Display for Cuts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.g_head, self.g_tail, self.d_head, self.d_tail
        )
    }
}

/// One quadruple per client, in fleet order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CutAssignment {
    pub cuts: Vec<Cuts>,
}

impl CutAssignment {
    pub fn new(cuts: Vec<Cuts>) -> Self {
        Self { cuts }
    }

    pub fn uniform(cuts: Cuts, clients: usize) -> Self {
        Self {
            cuts: vec![cuts; clients],
        }
    }

    pub fn len(&self) -> usize {
        self.cuts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cuts.is_empty()
    }

    pub fn validate(&self, profile: &ModelProfile) -> Result<()> {
        for (k, c) in self.cuts.iter().enumerate() {
            c.validate(k, profile)?;
        }
        Ok(())
    }
}
