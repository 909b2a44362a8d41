//! Cluster configuration files.
//!
//! ```text
//! # two processes on one host
//! transport = tcp
//! unit_heap_size = 67108864
//! color_bits = 16
//! quantum = 10
//! [servers]
//! 0 127.0.0.1 7000 7100
//! 1 127.0.0.1 7001 7101
//! ```
//!
//! A loopback configuration may give `nodes = N` instead of a servers
//! block. `OWNDSM_COLOR_BITS` and `OWNDSM_TRANSPORT` override the file.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::addressing::{ColorBits, NodeId};
use crate::error::{Error, Result};
use crate::transport::loopback::ClusterSpec;
use crate::transport::tcp::Peer;

pub const ENV_COLOR_BITS: &str = "OWNDSM_COLOR_BITS";
pub const ENV_TRANSPORT: &str = "OWNDSM_TRANSPORT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transport {
    Loopback,
    Tcp,
}

impl FromStr for Transport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loopback" => Ok(Transport::Loopback),
            "tcp" => Ok(Transport::Tcp),
            _ => Err(Error::Config(format!("transport must be loopback or tcp, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub servers: Vec<Peer>,
    pub unit_heap_size: u64,
    pub color_bits: u8,
    pub transport: Transport,
    /// Scheduler quanta between heartbeats.
    pub quantum: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            servers: Vec::new(),
            unit_heap_size: crate::bench::BENCH_UNIT,
            color_bits: ColorBits::DEFAULT.get(),
            transport: Transport::Loopback,
            quantum: 10,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("line {line}: bad value `{v}` for {key}")))
}

impl ClusterConfig {
    /// Loopback cluster of `nodes` with default settings.
    pub fn loopback(nodes: u16) -> Self {
        ClusterConfig { servers: placeholder_servers(nodes), ..Default::default() }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ClusterConfig::default();
        let mut nodes: Option<u16> = None;
        let mut in_servers = false;
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line == "[servers]" || line == "servers:" {
                in_servers = true;
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                let (k, v) = (k.trim(), v.trim());
                match k {
                    "unit_heap_size" => c.unit_heap_size = num(k, v, ln)?,
                    "color_bits" => c.color_bits = num(k, v, ln)?,
                    "transport" => c.transport = v.parse()?,
                    "quantum" => c.quantum = num(k, v, ln)?,
                    "nodes" => nodes = Some(num(k, v, ln)?),
                    _ => return Err(Error::Config(format!("line {ln}: unknown key `{k}`"))),
                }
                continue;
            }
            if !in_servers {
                return Err(Error::Config(format!("line {ln}: expected key = value, got `{line}`")));
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::Config(format!("line {ln}: expected `index host data_port control_port`")));
            }
            let idx: NodeId = num("index", f[0], ln)?;
            if seen.contains(&idx) {
                return Err(Error::Config(format!("line {ln}: duplicate server index {idx}")));
            }
            seen.push(idx);
            let peer = Peer { host: f[1].to_string(), data_port: num("data_port", f[2], ln)?, control_port: num("control_port", f[3], ln)? };
            c.servers.push(peer);
        }
        let mut order: Vec<usize> = (0..seen.len()).collect();
        order.sort_by_key(|&i| seen[i]);
        if seen.iter().enumerate().any(|(i, _)| !seen.contains(&(i as NodeId))) {
            return Err(Error::Config(format!("server indices must be dense from 0, got {seen:?}")));
        }
        c.servers = order.into_iter().map(|i| c.servers[i].clone()).collect();
        match (nodes, c.servers.is_empty()) {
            (Some(n), true) => c.servers = placeholder_servers(n),
            (Some(n), false) if n as usize != c.servers.len() => {
                return Err(Error::Config(format!("nodes = {n} but {} servers listed", c.servers.len())))
            }
            (None, true) => return Err(Error::Config("no servers block and no `nodes`".into())),
            _ => {}
        }
        c.apply_env()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(ENV_COLOR_BITS) {
            self.color_bits = num(ENV_COLOR_BITS, v.trim(), 0)?;
        }
        if let Ok(v) = std::env::var(ENV_TRANSPORT) {
            self.transport = v.trim().parse()?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        ColorBits::new(self.color_bits)?;
        if self.servers.is_empty() {
            return Err(Error::Config("cluster has no nodes".into()));
        }
        if self.servers.len() > u16::MAX as usize {
            return Err(Error::Config("too many servers".into()));
        }
        crate::addressing::PartitionMap::new(self.nodes(), self.unit_heap_size)?;
        Ok(())
    }

    pub fn nodes(&self) -> u16 {
        self.servers.len() as u16
    }

    pub fn spec(&self) -> Result<ClusterSpec> {
        let mut s = ClusterSpec::new(self.nodes(), self.unit_heap_size);
        s.color_bits = ColorBits::new(self.color_bits)?;
        Ok(s)
    }
}

fn placeholder_servers(n: u16) -> Vec<Peer> {
    (0..n).map(|_| Peer { host: "127.0.0.1".into(), data_port: 0, control_port: 0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TCP: &str = "transport = tcp\nunit_heap_size = 1048576\ncolor_bits = 4 # small\n[servers]\n1 127.0.0.1 7001 7101\n0 127.0.0.1 7000 7100\n";

    #[test]
    fn parses_servers_in_index_order() {
        let c = ClusterConfig::parse(TCP).unwrap();
        assert_eq!(c.transport, Transport::Tcp);
        assert_eq!(c.color_bits, 4);
        assert_eq!(c.servers[0].data_port, 7000);
        assert_eq!(c.servers[1].control_port, 7101);
    }

    #[test]
    fn rejects_bad_files() {
        for bad in [
            "nodes = 2\nbogus = 1\n",
            "[servers]\n0 h 1 2\n0 h 3 4\n",
            "[servers]\n0 h 1 2\n2 h 3 4\n",
            "[servers]\n0 h 1\n",
            "nodes = 2\ncolor_bits = 17\n",
            "transport = rdma\nnodes = 2\n",
            "unit_heap_size = 1\n",
        ] {
            assert!(ClusterConfig::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn loopback_by_count() {
        let c = ClusterConfig::parse("nodes = 4\n").unwrap();
        assert_eq!(c.nodes(), 4);
        assert_eq!(c.transport, Transport::Loopback);
    }
}
