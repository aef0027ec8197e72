//! Run logs: the sampled convergence series, heat-map snapshots and the
//! per-step transient series recorded after a world edit. All CSV output is
//! headed and uses shortest round-trip float formatting, so identical runs
//! produce identical bytes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::world::{AgentId, NodeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub mean_insufficiency: f64,
    pub comm_count: u64,
    pub epsilon: f64,
    /// Sizes of this step's contact components; empty when nobody met.
    pub components: Vec<usize>,
    /// I_i per node, in [`RunLog::nodes`] order.
    pub insufficiency: Vec<f64>,
    /// D_i = f_i − F_i per node.
    pub difference: Vec<f64>,
}

/// Per-agent per-node visitation frequencies at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSnapshot {
    pub step: u64,
    pub window: usize,
    pub nodes: Vec<NodeId>,
    pub required: Vec<f64>,
    pub agents: Vec<AgentId>,
    /// `frequency[a][i]`: percent of agent `a`'s last `window` steps at node `i`.
    pub frequency: Vec<Vec<f64>>,
}

impl HeatmapSnapshot {
    pub fn column_totals(&self) -> Vec<f64> {
        (0..self.nodes.len())
            .map(|i| self.frequency.iter().map(|row| row[i]).sum())
            .collect()
    }

    /// Long format: `step,agent,node,frequency`, with the requirement row
    /// under agent label `required`.
    pub fn write_long<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "agent", "node", "frequency"])?;
        for (a, row) in self.agents.iter().zip(&self.frequency) {
            for (n, f) in self.nodes.iter().zip(row) {
                w.write_record([
                    self.step.to_string(),
                    a.to_string(),
                    n.to_string(),
                    f.to_string(),
                ])?;
            }
        }
        for (n, f) in self.nodes.iter().zip(&self.required) {
            w.write_record([
                self.step.to_string(),
                "required".to_string(),
                n.to_string(),
                f.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_long<R: std::io::Read>(input: R, window: usize) -> anyhow::Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut step = None;
        let mut nodes: Vec<NodeId> = Vec::new();
        let mut agents: Vec<AgentId> = Vec::new();
        let mut cells: Vec<(Option<AgentId>, NodeId, f64)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let s: u64 = rec[0].parse()?;
            step.get_or_insert(s);
            let node = NodeId(rec[2].parse()?);
            let value: f64 = rec[3].parse()?;
            let agent = match &rec[1] {
                "required" => None,
                a => Some(AgentId(a.parse()?)),
            };
            if !nodes.contains(&node) {
                nodes.push(node);
            }
            if let Some(a) = agent {
                if !agents.contains(&a) {
                    agents.push(a);
                }
            }
            cells.push((agent, node, value));
        }
        let idx = |n: NodeId, nodes: &[NodeId]| nodes.iter().position(|&x| x == n).unwrap();
        let mut frequency = vec![vec![0.0; nodes.len()]; agents.len()];
        let mut required = vec![0.0; nodes.len()];
        for (agent, node, value) in cells {
            let i = idx(node, &nodes);
            match agent {
                Some(a) => frequency[agents.iter().position(|&x| x == a).unwrap()][i] = value,
                None => required[i] = value,
            }
        }
        Ok(HeatmapSnapshot {
            step: step.ok_or_else(|| anyhow::anyhow!("empty snapshot"))?,
            window,
            nodes,
            required,
            agents,
            frequency,
        })
    }

    /// Matrix format: one row per agent, then `total` and `required`.
    pub fn write_matrix<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["row".to_string()];
        header.extend(self.nodes.iter().map(|n| format!("node_{n}")));
        w.write_record(&header)?;
        for (a, row) in self.agents.iter().zip(&self.frequency) {
            let mut rec = vec![format!("agent_{a}")];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        let mut total = vec!["total".to_string()];
        total.extend(self.column_totals().iter().map(f64::to_string));
        w.write_record(&total)?;
        let mut req = vec!["required".to_string()];
        req.extend(self.required.iter().map(f64::to_string));
        w.write_record(&req)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub nodes: Vec<NodeId>,
    pub rows: Vec<LogRow>,
    pub snapshots: Vec<HeatmapSnapshot>,
}

impl RunLog {
    pub fn new(nodes: Vec<NodeId>) -> Self {
        RunLog {
            nodes,
            rows: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "step",
            "mean_insufficiency",
            "comm_count",
            "epsilon",
            "contact",
            "components",
        ]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(self.nodes.iter().map(|n| format!("I_{n}")));
        h.extend(self.nodes.iter().map(|n| format!("D_{n}")));
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for row in &self.rows {
            let mut rec = vec![
                row.step.to_string(),
                row.mean_insufficiency.to_string(),
                row.comm_count.to_string(),
                row.epsilon.to_string(),
                u8::from(!row.components.is_empty()).to_string(),
                row.components
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("|"),
            ];
            rec.extend(row.insufficiency.iter().map(f64::to_string));
            rec.extend(row.difference.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a CSV written by [`RunLog::write_csv`]; snapshots are not part of it.
    pub fn read_csv<R: std::io::Read>(input: R) -> anyhow::Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let nodes: Vec<NodeId> = header
            .iter()
            .filter_map(|h| h.strip_prefix("I_"))
            .map(|n| n.parse().map(NodeId))
            .collect::<Result<_, _>>()?;
        let n = nodes.len();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let floats = |range: std::ops::Range<usize>| -> anyhow::Result<Vec<f64>> {
                range.map(|i| Ok(rec[i].parse::<f64>()?)).collect()
            };
            rows.push(LogRow {
                step: rec[0].parse()?,
                mean_insufficiency: rec[1].parse()?,
                comm_count: rec[2].parse()?,
                epsilon: rec[3].parse()?,
                components: rec[5]
                    .split('|')
                    .filter(|c| !c.is_empty())
                    .map(str::parse)
                    .collect::<Result<_, _>>()?,
                insufficiency: floats(6..6 + n)?,
                difference: floats(6 + n..6 + 2 * n)?,
            });
        }
        Ok(RunLog {
            nodes,
            rows,
            snapshots: Vec::new(),
        })
    }

    /// Mean of `mean_insufficiency` over rows with `step > after`.
    pub fn mean_insufficiency_after(&self, after: u64) -> Option<f64> {
        let tail: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.step > after)
            .map(|r| r.mean_insufficiency)
            .collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }

    /// First logged step whose mean insufficiency is below `threshold`.
    pub fn convergence_step(&self, threshold: f64) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r.mean_insufficiency < threshold)
            .map(|r| r.step)
    }

    pub fn snapshot_at_or_before(&self, step: u64) -> Option<&HeatmapSnapshot> {
        self.snapshots.iter().filter(|s| s.step <= step).max_by_key(|s| s.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransientRow {
    /// Steps since the edit; 0 is the instant the edit took effect.
    pub offset: u64,
    pub step: u64,
    pub difference: Vec<f64>,
}

impl TransientRow {
    pub fn span(&self) -> (f64, f64) {
        self.difference
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)))
    }

    /// Per-node insufficiency `max(0, −D_i)`.
    pub fn insufficiency(&self) -> impl Iterator<Item = f64> + '_ {
        self.difference.iter().map(|d| (-d).max(0.0))
    }
}

/// D_i per node at every step for a bounded stretch after a world edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransientLog {
    pub start_step: u64,
    pub length: u64,
    pub nodes: Vec<NodeId>,
    pub rows: Vec<TransientRow>,
}

impl TransientLog {
    pub fn new(start_step: u64, length: u64, nodes: Vec<NodeId>) -> Self {
        TransientLog {
            start_step,
            length,
            nodes,
            rows: Vec::new(),
        }
    }

    pub fn wants(&self, step: u64) -> bool {
        step >= self.start_step && step - self.start_step <= self.length
    }

    pub fn at_offset(&self, offset: u64) -> Option<&TransientRow> {
        self.rows.iter().find(|r| r.offset == offset)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["offset".to_string(), "step".to_string()];
        header.extend(self.nodes.iter().map(|n| format!("D_{n}")));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.offset.to_string(), row.step.to_string()];
            rec.extend(row.difference.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
