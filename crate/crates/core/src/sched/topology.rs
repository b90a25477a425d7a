use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::partition::node_of_worker;

/// Environment variable that forces the NUMA node count.
pub const NODES_ENV: &str = "KNOR_NUMA_NODES";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologySource {
    Detected,
    Override,
}

/// Worker-to-node layout for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: usize,
    pub workers: usize,
    pub node_of: Vec<usize>,
    pub source: TopologySource,
    /// CPUs of each physical node, when the platform exposes them. Empty
    /// when the node count is an override or detection failed.
    #[serde(skip)]
    pub node_cpus: Vec<Vec<usize>>,
}

impl Topology {
    /// `override_nodes` wins over [`NODES_ENV`], which wins over detection.
    /// The node count is clamped to the worker count.
    pub fn build(workers: usize, override_nodes: Option<usize>) -> Self {
        let workers = workers.max(1);
        let env = std::env::var(NODES_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0);
        let (nodes, source, node_cpus) = match override_nodes.filter(|&n| n > 0).or(env) {
            Some(n) => (n, TopologySource::Override, Vec::new()),
            None => {
                let cpus = detect_node_cpus(Path::new("/sys/devices/system/node"));
                let n = cpus.len().max(1);
                (n, TopologySource::Detected, cpus)
            }
        };
        Self::with_nodes(workers, nodes, source, node_cpus)
    }

    fn with_nodes(
        workers: usize,
        nodes: usize,
        source: TopologySource,
        node_cpus: Vec<Vec<usize>>,
    ) -> Self {
        let nodes = nodes.clamp(1, workers);
        Self {
            nodes,
            workers,
            node_of: (0..workers)
                .map(|w| node_of_worker(w, workers, nodes))
                .collect(),
            source,
            node_cpus,
        }
    }

    /// Restricts the calling thread to the CPUs of `worker`'s node.
    ///
    /// Best effort: returns `false` if the node's CPUs are unknown or the
    /// platform refuses.
    pub fn bind_current_thread(&self, worker: usize) -> bool {
        if self.node_cpus.len() < 2 {
            return false;
        }
        match self.node_cpus.get(self.node_of[worker]) {
            Some(cpus) if !cpus.is_empty() => set_affinity(cpus),
            _ => false,
        }
    }
}

fn detect_node_cpus(root: &Path) -> Vec<Vec<usize>> {
    let Ok(online) = fs::read_to_string(root.join("online")) else {
        return Vec::new();
    };
    parse_cpulist(&online)
        .into_iter()
        .map(|node| {
            fs::read_to_string(root.join(format!("node{node}/cpulist")))
                .map(|s| parse_cpulist(&s))
                .unwrap_or_default()
        })
        .collect()
}

/// Parses the kernel's list format, e.g. `0-3,8,10-11`.
pub fn parse_cpulist(s: &str) -> Vec<usize> {
    let mut out = Vec::new();
    for part in s.trim().split(',').filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                if let (Ok(a), Ok(b)) = (a.trim().parse::<usize>(), b.trim().parse::<usize>()) {
                    out.extend(a..=b);
                }
            }
            None => {
                if let Ok(a) = part.trim().parse() {
                    out.push(a);
                }
            }
        }
    }
    out
}

#[cfg(target_os = "linux")]
fn set_affinity(cpus: &[usize]) -> bool {
    // SAFETY: cpu_set_t is plain data; CPU_SET only touches bits inside it and
    // sched_setaffinity(0, ..) targets the calling thread.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        for &c in cpus {
            if c < libc::CPU_SETSIZE as usize {
                libc::CPU_SET(c, &mut set);
            }
        }
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
}

#[cfg(not(target_os = "linux"))]
fn set_affinity(_cpus: &[usize]) -> bool {
    false
}
