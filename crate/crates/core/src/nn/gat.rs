use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::he_normal;
use crate::error::TensorError;
use crate::tensor::{ParamBinding, ParameterStore, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatConfig {
    pub in_width: usize,
    /// Output width of every layer; split evenly across heads.
    pub width: usize,
    pub heads: usize,
    pub slope: f64,
    pub layers: usize,
}

impl GatConfig {
    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 || self.layers == 0 || self.in_width == 0 {
            return Err(TensorError::Invalid {
                op: "gat",
                msg: format!("invalid configuration {self:?}: heads must divide width and counts be positive"),
            });
        }
        Ok(())
    }
}

/// Edge structure for a batch of attention graphs sharing one node table.
///
/// Receiver `r` (node `receivers[r]`) attends over the senders listed in
/// `senders[offsets[r]..offsets[r + 1]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionGraph {
    pub num_nodes: usize,
    pub receivers: Vec<usize>,
    pub offsets: Vec<usize>,
    pub senders: Vec<usize>,
}

impl AttentionGraph {
    /// Complete graphs with self-loops; graph `g` owns nodes
    /// `graph_offsets[g]..graph_offsets[g + 1]`.
    pub fn complete(graph_offsets: &[usize]) -> Self {
        Self::build(graph_offsets, false)
    }

    /// Like [`AttentionGraph::complete`], but only the first node of each
    /// graph receives messages.
    pub fn readout(graph_offsets: &[usize]) -> Self {
        Self::build(graph_offsets, true)
    }

    fn build(graph_offsets: &[usize], first_only: bool) -> Self {
        let mut g = AttentionGraph {
            num_nodes: graph_offsets.last().copied().unwrap_or(0),
            receivers: Vec::new(),
            offsets: vec![0],
            senders: Vec::new(),
        };
        for win in graph_offsets.windows(2) {
            let nodes = win[0]..win[1];
            let recv_end = if first_only { (win[0] + 1).min(win[1]) } else { win[1] };
            for i in win[0]..recv_end {
                g.receivers.push(i);
                g.senders.extend(nodes.clone());
                g.offsets.push(g.senders.len());
            }
        }
        g
    }

    /// Receiver index owning each edge.
    fn edge_receivers(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.senders.len());
        for (r, win) in self.offsets.windows(2).enumerate() {
            out.extend(std::iter::repeat_n(self.receivers[r], win[1] - win[0]));
        }
        out
    }

    fn validate(&self, rows: usize) -> Result<(), TensorError> {
        let bad = |msg: String| TensorError::Invalid { op: "gat_layer", msg };
        if self.num_nodes != rows {
            return Err(bad(format!("graph has {} nodes, features have {rows} rows", self.num_nodes)));
        }
        if self.receivers.is_empty() {
            return Err(bad("empty node list".into()));
        }
        if self.offsets.len() != self.receivers.len() + 1 || self.offsets.last() != Some(&self.senders.len()) {
            return Err(bad("edge offsets inconsistent with receivers".into()));
        }
        if self.offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("every receiver needs at least one sender".into()));
        }
        if self.receivers.iter().chain(&self.senders).any(|&i| i >= rows) {
            return Err(bad("node index out of range".into()));
        }
        Ok(())
    }
}

/// One multi-head attention layer. `w` is in×width, `att` holds per-head
/// pairs `(a_recv, a_send)` of shape head_width×1. Returns one row per
/// receiver with the head outputs concatenated.
pub fn gat_layer<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    w: Var,
    att: &[(Var, Var)],
    slope: f64,
    graph: &AttentionGraph,
) -> Result<Var, TensorError> {
    let rows = tape.shape(h).first().copied().unwrap_or(0);
    graph.validate(rows)?;
    let width = tape.shape(w).get(1).copied().unwrap_or(0);
    if att.is_empty() || width % att.len() != 0 {
        return Err(TensorError::Invalid {
            op: "gat_layer",
            msg: format!("{} heads do not divide width {width}", att.len()),
        });
    }
    let hw = width / att.len();
    let wh = tape.matmul(h, w)?;
    let edge_recv = graph.edge_receivers();
    let mut outs = Vec::with_capacity(att.len());
    for (k, &(a_recv, a_send)) in att.iter().enumerate() {
        let z = if att.len() == 1 { wh } else { tape.slice_cols(wh, k * hw, hw)? };
        let s_recv = tape.matmul(z, a_recv)?;
        let s_send = tape.matmul(z, a_send)?;
        let e_recv = tape.gather_rows(s_recv, edge_recv.clone())?;
        let e_send = tape.gather_rows(s_send, graph.senders.clone())?;
        let e = tape.add(e_recv, e_send)?;
        let e = tape.leaky_relu(e, T::from_f64(slope));
        let alpha = tape.segment_softmax(e, graph.offsets.clone())?;
        let msgs = tape.gather_rows(z, graph.senders.clone())?;
        let msgs = tape.scale_rows(msgs, alpha)?;
        outs.push(tape.segment_sum(msgs, graph.offsets.clone())?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

/// Stack of attention layers with relu between layers and none after the last.
#[derive(Clone, Debug)]
pub struct Gat {
    pub name: String,
    pub config: GatConfig,
}

impl Gat {
    pub fn new(name: impl Into<String>, config: GatConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), TensorError> {
        self.config.validate()?;
        let c = &self.config;
        let hw = c.head_width();
        for l in 0..c.layers {
            let fan_in = if l == 0 { c.in_width } else { c.width };
            store.insert(format!("{}.l{l}.w", self.name), he_normal(rng, &[fan_in, c.width], fan_in))?;
            for k in 0..c.heads {
                store.insert(format!("{}.l{l}.h{k}.ai", self.name), he_normal(rng, &[hw, 1], hw))?;
                store.insert(format!("{}.l{l}.h{k}.aj", self.name), he_normal(rng, &[hw, 1], hw))?;
            }
        }
        Ok(())
    }

    /// Runs all layers. Inner layers use `complete`; the last uses `last`,
    /// whose receivers determine the output rows.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &ParamBinding,
        x: Var,
        complete: &AttentionGraph,
        last: &AttentionGraph,
    ) -> Result<Var, TensorError> {
        let c = &self.config;
        let mut h = x;
        for l in 0..c.layers {
            let w = p.get(&format!("{}.l{l}.w", self.name))?;
            let att = (0..c.heads)
                .map(|k| {
                    Ok((
                        p.get(&format!("{}.l{l}.h{k}.ai", self.name))?,
                        p.get(&format!("{}.l{l}.h{k}.aj", self.name))?,
                    ))
                })
                .collect::<Result<Vec<_>, TensorError>>()?;
            let is_last = l + 1 == c.layers;
            h = gat_layer(tape, h, w, &att, c.slope, if is_last { last } else { complete })?;
            if !is_last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}
