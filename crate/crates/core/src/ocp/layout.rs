use std::ops::Range;

use crate::model::{CouplingGraph, INPUT_DIM, STATE_DIM};

/// `(N+1)·n_x + N·n_u + neighbors·(N+1)·n_x + slacks`
pub fn decision_dims(horizon: usize, state_dim: usize, input_dim: usize, neighbor_count: usize, slack_count: usize) -> usize {
    (horizon + 1) * state_dim + horizon * input_dim + neighbor_count * (horizon + 1) * state_dim + slack_count
}

/// Soft position-box rows per prediction stage: `p_x` upper/lower, `p_y` upper/lower.
pub const BOX_ROWS: usize = 4;

/// Fixed ordering of one agent's decision vector:
///
/// ```text
/// [ x[0..=N] | u[0..N] | w_j[0..=N] for each neighbor j (ascending) | slacks ]
/// ```
///
/// Slacks are stage-major; stage `τ` holds the four box slacks, then one
/// slack per neighbor, then one obstacle slack if obstacles are modelled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionLayout {
    horizon: usize,
    neighbors: Vec<usize>,
    obstacle: bool,
}

impl DecisionLayout {
    pub fn new(horizon: usize, mut neighbors: Vec<usize>, obstacle: bool) -> Self {
        neighbors.sort_unstable();
        neighbors.dedup();
        Self { horizon, neighbors, obstacle }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn neighbors(&self) -> &[usize] {
        &self.neighbors
    }

    pub fn has_obstacle(&self) -> bool {
        self.obstacle
    }

    /// Slot of `neighbor` in the copy block, if coupled.
    pub fn slot_of(&self, neighbor: usize) -> Option<usize> {
        self.neighbors.binary_search(&neighbor).ok()
    }

    pub fn trajectory_len(&self) -> usize {
        (self.horizon + 1) * STATE_DIM
    }

    pub fn state(&self, stage: usize) -> usize {
        stage * STATE_DIM
    }

    pub fn input(&self, stage: usize) -> usize {
        self.trajectory_len() + stage * INPUT_DIM
    }

    pub fn states(&self) -> Range<usize> {
        0..self.trajectory_len()
    }

    pub fn inputs(&self) -> Range<usize> {
        self.trajectory_len()..self.trajectory_len() + self.horizon * INPUT_DIM
    }

    pub fn copies(&self, slot: usize) -> Range<usize> {
        let start = self.inputs().end + slot * self.trajectory_len();
        start..start + self.trajectory_len()
    }

    pub fn copy(&self, slot: usize, stage: usize) -> usize {
        self.copies(slot).start + stage * STATE_DIM
    }

    pub fn soft_rows_per_stage(&self) -> usize {
        BOX_ROWS + self.neighbors.len() + usize::from(self.obstacle)
    }

    pub fn slack_count(&self) -> usize {
        (self.horizon + 1) * self.soft_rows_per_stage()
    }

    pub fn slacks(&self) -> Range<usize> {
        let start = self.inputs().end + self.neighbors.len() * self.trajectory_len();
        start..start + self.slack_count()
    }

    /// Slack for soft row `row` (see [`DecisionLayout`]) at `stage`.
    pub fn slack(&self, stage: usize, row: usize) -> usize {
        self.slacks().start + stage * self.soft_rows_per_stage() + row
    }

    pub fn neighbor_slack(&self, stage: usize, slot: usize) -> usize {
        self.slack(stage, BOX_ROWS + slot)
    }

    pub fn obstacle_slack(&self, stage: usize) -> Option<usize> {
        self.obstacle.then(|| self.slack(stage, BOX_ROWS + self.neighbors.len()))
    }

    pub fn len(&self) -> usize {
        decision_dims(self.horizon, STATE_DIM, INPUT_DIM, self.neighbors.len(), self.slack_count())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn len_without_slacks(&self) -> usize {
        decision_dims(self.horizon, STATE_DIM, INPUT_DIM, self.neighbors.len(), 0)
    }
}

/// One copy block: `holder` keeps a copy of `owner`'s state trajectory in `slot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopyLink {
    pub holder: usize,
    pub slot: usize,
    pub owner: usize,
}

/// Implicit `E_i` matrices: each consensus row reads `w_ji[τ][c] − x_j[τ][c]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CouplingMap {
    layouts: Vec<DecisionLayout>,
    links: Vec<CopyLink>,
}

impl CouplingMap {
    pub fn new(layouts: Vec<DecisionLayout>) -> Self {
        let mut links = Vec::new();
        for (holder, layout) in layouts.iter().enumerate() {
            for (slot, &owner) in layout.neighbors().iter().enumerate() {
                links.push(CopyLink { holder, slot, owner });
            }
        }
        Self { layouts, links }
    }

    pub fn from_graph(graph: &CouplingGraph, horizon: usize, obstacle: bool) -> Self {
        let layouts = (0..graph.agent_count())
            .map(|i| DecisionLayout::new(horizon, graph.neighbors(i).expect("index in range"), obstacle))
            .collect();
        Self::new(layouts)
    }

    pub fn layouts(&self) -> &[DecisionLayout] {
        &self.layouts
    }

    pub fn links(&self) -> &[CopyLink] {
        &self.links
    }

    pub fn agent_count(&self) -> usize {
        self.layouts.len()
    }

    /// Total number of consensus rows `n_c`.
    pub fn row_count(&self) -> usize {
        self.links.iter().map(|l| self.layouts[l.holder].trajectory_len()).sum()
    }

    /// Offsets of each agent's block in the stacked vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.layouts
            .iter()
            .map(|l| {
                let o = acc;
                acc += l.len();
                o
            })
            .collect()
    }

    pub fn total_len(&self) -> usize {
        self.layouts.iter().map(DecisionLayout::len).sum()
    }

    /// Calls `f(row, holder_index, owner_index)` for each consensus row, with
    /// indices into the stacked vector.
    pub fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize)) {
        let offsets = self.offsets();
        let mut row = 0;
        for link in &self.links {
            let copy = self.layouts[link.holder].copies(link.slot);
            let own = self.layouts[link.owner].states();
            for (c, o) in copy.zip(own) {
                f(row, offsets[link.holder] + c, offsets[link.owner] + o);
                row += 1;
            }
        }
    }

    /// `Σ_i E_i z_i` for per-agent vectors.
    pub fn residual(&self, z: &[Vec<f64>]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.row_count());
        for link in &self.links {
            let copy = &z[link.holder][self.layouts[link.holder].copies(link.slot)];
            let own = &z[link.owner][self.layouts[link.owner].states()];
            out.extend(copy.iter().zip(own).map(|(w, x)| w - x));
        }
        out
    }
}
