//! Dynamic slicing of control-data writers.
//!
//! Each test input is run twice. The first run records loads to learn the
//! concrete address every load site reads. The second run watches those
//! addresses; whichever store last wrote a byte before a load site reads it
//! becomes an edge from that store's WIO to the slot.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{CodeLocation, Program};
use crate::ident::{ControlDataReport, LoadSite, UnresolvedSite};
use crate::inputs::TestInput;
use crate::machine::{
    coverage_fraction, AnnounceMode, CostModel, Coverage, LoadEvent, Machine, MachineError,
    MemoryLayout, RunEnd, TraceOptions, TrapInfo, Watchpoint, WriteEvent, DEFAULT_STEP_BUDGET,
};

pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.92;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SliceError {
    #[error("empty test suite")]
    EmptySuite,
    #[error("input `{input}`: {error}")]
    Machine { input: String, error: MachineError },
    #[error("benign input `{input}` trapped: {trap}")]
    BenignTrap { input: String, trap: TrapInfo },
    #[error("unknown slot `{0}`")]
    UnknownSlot(String),
}

mod hex_addrs {
    use std::collections::BTreeSet;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BTreeSet<u32>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|a| format!("{a:#x}")))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeSet<u32>, D::Error> {
        let v: Vec<String> = Vec::deserialize(d)?;
        v.iter()
            .map(|s| {
                let t = s.trim_start_matches("0x");
                u32::from_str_radix(t, 16).map_err(serde::de::Error::custom)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlDataSlot {
    pub id: String,
    pub origin: LoadSite,
    #[serde(with = "hex_addrs")]
    pub observed_addresses: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: CodeLocation,
    pub to: String,
}

/// Bipartite graph from write instructions to the control data they write.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DataSourceGraph {
    pub slots: BTreeMap<String, ControlDataSlot>,
    pub edges: BTreeSet<Edge>,
}

#[derive(Serialize, Deserialize)]
struct Nodes {
    writers: Vec<CodeLocation>,
    slots: Vec<ControlDataSlot>,
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    nodes: Nodes,
    edges: Vec<Edge>,
}

impl Serialize for DataSourceGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GraphRepr {
            nodes: Nodes {
                writers: self.writers().into_iter().cloned().collect(),
                slots: self.slots.values().cloned().collect(),
            },
            edges: self.edges.iter().cloned().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DataSourceGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = GraphRepr::deserialize(d)?;
        let slots: BTreeMap<_, _> = r.nodes.slots.into_iter().map(|s| (s.id.clone(), s)).collect();
        for e in &r.edges {
            if !slots.contains_key(&e.to) {
                return Err(serde::de::Error::custom(format!(
                    "edge targets unknown slot `{}`",
                    e.to
                )));
            }
        }
        Ok(DataSourceGraph {
            slots,
            edges: r.edges.into_iter().collect(),
        })
    }
}

impl DataSourceGraph {
    pub fn writers(&self) -> BTreeSet<&CodeLocation> {
        self.edges.iter().map(|e| &e.from).collect()
    }

    pub fn writers_of(&self, slot: &str) -> BTreeSet<&CodeLocation> {
        self.edges
            .iter()
            .filter(|e| e.to == slot)
            .map(|e| &e.from)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    fn merge(&mut self, other: DataSourceGraph) {
        for (id, s) in other.slots {
            self.slots
                .entry(id)
                .and_modify(|e| e.observed_addresses.extend(&s.observed_addresses))
                .or_insert(s);
        }
        self.edges.extend(other.edges);
    }
}

/// True iff the graph has an edge `wio -> slot`.
pub fn wio_permitted(
    g: &DataSourceGraph,
    wio: &CodeLocation,
    slot: &str,
) -> Result<bool, SliceError> {
    if !g.slots.contains_key(slot) {
        return Err(SliceError::UnknownSlot(slot.to_string()));
    }
    Ok(g.edges.contains(&Edge {
        from: wio.clone(),
        to: slot.to_string(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceResult {
    pub graph: DataSourceGraph,
    pub coverage: f64,
    pub runs: usize,
    pub threshold: f64,
    pub finalized: bool,
    /// Sites phase 1 could not tie to memory.
    pub unresolved: Vec<UnresolvedSite>,
    /// Load sites no input reached.
    pub unexecuted: Vec<String>,
    pub diagnostics: Vec<String>,
}

impl SliceResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("slice result serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceConfig {
    pub layout: MemoryLayout,
    pub threshold: f64,
    pub step_budget: u64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        SliceConfig {
            layout: MemoryLayout::default(),
            threshold: DEFAULT_COVERAGE_THRESHOLD,
            step_budget: DEFAULT_STEP_BUDGET,
        }
    }
}

/// Load events of `trace` that belong to `site`.
pub fn site_loads<'a>(
    site: &'a LoadSite,
    loads: &'a [LoadEvent],
) -> impl Iterator<Item = &'a LoadEvent> + 'a {
    loads
        .iter()
        .filter(move |l| &l.loc == site.watch_loc() && l.dest == site.target_register)
}

struct TracedRun {
    writes: Vec<WriteEvent>,
    loads: Vec<LoadEvent>,
    coverage: Coverage,
}

fn traced_run(
    p: &Program,
    cfg: &SliceConfig,
    input: &TestInput,
    opts: TraceOptions,
) -> Result<TracedRun, SliceError> {
    let machine_err = |error| SliceError::Machine {
        input: input.name.clone(),
        error,
    };
    let mut m = Machine::new(
        p,
        &cfg.layout,
        CostModel::default(),
        AnnounceMode::SimulatedSyscall,
        input,
    )
    .map_err(machine_err)?
    .with_trace(opts);
    match m.run(cfg.step_budget).map_err(machine_err)? {
        RunEnd::Exit(_) => {}
        RunEnd::Trap(trap) => {
            return Err(SliceError::BenignTrap {
                input: input.name.clone(),
                trap,
            })
        }
    }
    let (state, trace) = m.into_parts();
    Ok(TracedRun {
        writes: trace.writes,
        loads: trace.loads,
        coverage: state.coverage,
    })
}

/// Concrete addresses each load site reads on `input`, keyed by slot id.
/// Sites the input never reaches map to an empty set.
pub fn resolve_watch_addresses(
    p: &Program,
    cfg: &SliceConfig,
    input: &TestInput,
    report: &ControlDataReport,
) -> Result<BTreeMap<String, BTreeSet<(u32, u32)>>, SliceError> {
    let run = traced_run(
        p,
        cfg,
        input,
        TraceOptions {
            record_loads: true,
            ..TraceOptions::default()
        },
    )?;
    Ok(report
        .load_sites
        .iter()
        .map(|ls| {
            let addrs = site_loads(ls, &run.loads)
                .map(|l| (l.address, l.width))
                .collect();
            (ls.slot_id(), addrs)
        })
        .collect())
}

/// For every load by a load site, the last store to each byte before it.
pub fn reaching_writers(
    site: &LoadSite,
    loads: &[LoadEvent],
    writes: &[WriteEvent],
) -> BTreeSet<CodeLocation> {
    let mut out = BTreeSet::new();
    for l in site_loads(site, loads) {
        for b in l.address..l.address + l.width {
            let last = writes
                .iter()
                .take_while(|w| w.seq < l.seq)
                .filter(|w| (w.address..w.address + w.width).contains(&b))
                .last();
            if let Some(w) = last {
                out.insert(w.wio.clone());
            }
        }
    }
    out
}

fn slice_one(
    p: &Program,
    cfg: &SliceConfig,
    report: &ControlDataReport,
    input: &TestInput,
) -> Result<(DataSourceGraph, Coverage), SliceError> {
    let resolved = resolve_watch_addresses(p, cfg, input, report)?;
    let watchpoints: Vec<Watchpoint> = resolved
        .values()
        .flatten()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|(a, w)| Watchpoint::new(*a, *w))
        .collect();
    let run = traced_run(
        p,
        cfg,
        input,
        TraceOptions {
            watchpoints,
            record_loads: true,
            ..TraceOptions::default()
        },
    )?;
    let mut g = DataSourceGraph::default();
    for ls in &report.load_sites {
        let id = ls.slot_id();
        let observed = resolved[&id].iter().map(|(a, _)| *a).collect();
        for wio in reaching_writers(ls, &run.loads, &run.writes) {
            g.edges.insert(Edge {
                from: wio,
                to: id.clone(),
            });
        }
        g.slots.insert(
            id.clone(),
            ControlDataSlot {
                id,
                origin: ls.clone(),
                observed_addresses: observed,
            },
        );
    }
    Ok((g, run.coverage))
}

/// Runs the suite and builds the data source graph.
pub fn build_dsg(
    p: &Program,
    cfg: &SliceConfig,
    report: &ControlDataReport,
    suite: &[TestInput],
) -> Result<SliceResult, SliceError> {
    if suite.is_empty() {
        return Err(SliceError::EmptySuite);
    }
    let per_input: Vec<_> = suite
        .par_iter()
        .map(|input| slice_one(p, cfg, report, input))
        .collect::<Result<_, _>>()?;
    let mut graph = DataSourceGraph::default();
    let mut coverages = Vec::new();
    for (g, c) in per_input {
        graph.merge(g);
        coverages.push(c);
    }
    let coverage = coverage_fraction(p, &coverages);
    let finalized = coverage >= cfg.threshold;
    let unexecuted: Vec<String> = graph
        .slots
        .values()
        .filter(|s| s.observed_addresses.is_empty())
        .map(|s| s.id.clone())
        .collect();
    let mut diagnostics = Vec::new();
    if !finalized {
        diagnostics.push(format!(
            "basic-block coverage {:.4} is below the threshold {:.4}",
            coverage, cfg.threshold
        ));
    }
    for id in &unexecuted {
        diagnostics.push(format!("load site {id} was never executed"));
    }
    Ok(SliceResult {
        graph,
        coverage,
        runs: suite.len(),
        threshold: cfg.threshold,
        finalized,
        unresolved: report.unresolved.clone(),
        unexecuted,
        diagnostics,
    })
}

/// Edges recomputed without watchpoints: every store and every load is
/// recorded, and each byte a load site reads is attributed to the newest
/// earlier store covering it. Slow; meant as a reference for [`build_dsg`].
pub fn brute_force_edges(
    p: &Program,
    cfg: &SliceConfig,
    report: &ControlDataReport,
    suite: &[TestInput],
) -> Result<BTreeSet<Edge>, SliceError> {
    let mut watched: BTreeMap<(&CodeLocation, _), Vec<String>> = BTreeMap::new();
    for ls in &report.load_sites {
        watched
            .entry((ls.watch_loc(), ls.target_register))
            .or_default()
            .push(ls.slot_id());
    }
    let mut edges = BTreeSet::new();
    for input in suite {
        let run = traced_run(
            p,
            cfg,
            input,
            TraceOptions {
                record_all_stores: true,
                record_loads: true,
                ..TraceOptions::default()
            },
        )?;
        // newest store per byte, replayed in sequence order
        let mut last: BTreeMap<u32, &CodeLocation> = BTreeMap::new();
        let mut writes = run.writes.iter().peekable();
        for l in &run.loads {
            while let Some(w) = writes.next_if(|w| w.seq < l.seq) {
                for b in w.address..w.address + w.width {
                    last.insert(b, &w.wio);
                }
            }
            let Some(slots) = watched.get(&(&l.loc, l.dest)) else { continue };
            for b in l.address..l.address + l.width {
                if let Some(wio) = last.get(&b) {
                    for s in slots {
                        edges.insert(Edge {
                            from: (*wio).clone(),
                            to: s.clone(),
                        });
                    }
                }
            }
        }
    }
    Ok(edges)
}
