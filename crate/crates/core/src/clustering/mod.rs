//! Output-aware clustering.
//!
//! Inputs are clustered with seeded KMeans. Outputs become groups, either
//! directly (few distinct labels) or by clustering output embeddings with the
//! same K. Each example is then offered to clusters in order of centroid
//! distance and goes to the first one whose output distribution gets no
//! farther from the global one by receiving it. Finally clusters holding a
//! single output class are dissolved into the nearest mixed clusters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::normalize;

mod kmeans;

pub use kmeans::{farthest_point_init, kmeans, ClusterState};
pub(crate) use kmeans::squared_distance;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("K must be positive")]
    InvalidK,
    #[error("max_iterations must be positive")]
    InvalidIterations,
    #[error("K = {k} exceeds the number of points ({n})")]
    TooFewPoints { k: usize, n: usize },
    #[error("vectors are zero-dimensional")]
    ZeroDimension,
    #[error("dimensionality mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("distribution lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("outputs are not discrete and no output embeddings were given")]
    MissingOutputEmbeddings,
    #[error("{what}: expected {expected} entries, got {got}")]
    Misaligned {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iterations: usize,
    pub seed: u64,
    /// At most this many distinct normalized outputs are treated as labels.
    pub discrete_output_threshold: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 5,
            max_iterations: 100,
            seed: 0,
            discrete_output_threshold: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    Discrete,
    Embedded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputGroups {
    pub group_of: Vec<usize>,
    pub group_count: usize,
    pub mode: GroupMode,
    /// Normalized label per group in discrete mode; empty otherwise.
    pub labels: Vec<String>,
}

/// Maps outputs to dense group ids. Discrete labels are numbered in sorted
/// order of their normalized text.
pub fn detect_output_groups(
    outputs: &[String],
    output_embeddings: Option<&[Vec<f64>]>,
    config: &ClusterConfig,
) -> Result<OutputGroups, ClusterError> {
    let normalized: Vec<String> = outputs.iter().map(|o| normalize(o)).collect();
    let mut labels = normalized.clone();
    labels.sort();
    labels.dedup();
    if labels.len() <= config.discrete_output_threshold {
        let group_of = normalized
            .iter()
            .map(|n| labels.binary_search(n).expect("label present"))
            .collect();
        return Ok(OutputGroups {
            group_of,
            group_count: labels.len().max(1),
            mode: GroupMode::Discrete,
            labels,
        });
    }
    let embeddings = output_embeddings.ok_or(ClusterError::MissingOutputEmbeddings)?;
    if embeddings.len() != outputs.len() {
        return Err(ClusterError::Misaligned {
            what: "output embeddings",
            expected: outputs.len(),
            got: embeddings.len(),
        });
    }
    let k = config.k.min(embeddings.len());
    let state = kmeans(embeddings, k, config.seed, config.max_iterations)?;
    // relabel densely in case a cluster ended up empty
    let mut remap = vec![usize::MAX; k];
    let mut next = 0;
    let group_of = state
        .assignment
        .iter()
        .map(|&c| {
            if remap[c] == usize::MAX {
                remap[c] = next;
                next += 1;
            }
            remap[c]
        })
        .collect();
    Ok(OutputGroups {
        group_of,
        group_count: next,
        mode: GroupMode::Embedded,
        labels: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub counts: Vec<usize>,
    pub probabilities: Vec<f64>,
}

impl Distribution {
    pub fn from_counts(counts: Vec<usize>) -> Self {
        let total: usize = counts.iter().sum();
        let probabilities = counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect();
        Self {
            counts,
            probabilities,
        }
    }

    /// Frequencies of the listed group ids over `group_count` groups.
    pub fn of_groups(groups: impl IntoIterator<Item = usize>, group_count: usize) -> Self {
        let mut counts = vec![0usize; group_count];
        for g in groups {
            counts[g] += 1;
        }
        Self::from_counts(counts)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// An empty cluster's distribution: all zeros.
    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

pub fn global_distribution(groups: &OutputGroups) -> Distribution {
    Distribution::of_groups(groups.group_of.iter().copied(), groups.group_count)
}

/// Mean over group ids of squared probability differences.
pub fn distribution_mse(local: &Distribution, global: &Distribution) -> Result<f64, ClusterError> {
    let (a, b) = (&local.probabilities, &global.probabilities);
    if a.len() != b.len() {
        return Err(ClusterError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `sum_i (c_i * N - G_i * n)^2`: the MSE of counts `c` (size `n`) against
/// global counts `G` (size `N`), scaled by `len * n^2 * N^2`.
fn scaled_error(counts: &[usize], n: usize, global: &[usize], big_n: usize) -> u128 {
    counts
        .iter()
        .zip(global)
        .map(|(&c, &g)| {
            let d = c as i128 * big_n as i128 - g as i128 * n as i128;
            (d * d) as u128
        })
        .sum()
}

/// True when adding one member of `group` to a cluster with counts `base`
/// leaves its MSE to `global` no larger. Exact integer arithmetic.
pub fn insertion_keeps_or_improves(base: &[usize], group: usize, global: &[usize]) -> bool {
    let n: usize = base.iter().sum();
    let big_n: usize = global.iter().sum();
    let mut after = base.to_vec();
    after[group] += 1;
    let after_err = scaled_error(&after, n + 1, global, big_n);
    if n == 0 {
        // empty cluster: all-zero distribution, MSE = sum (G_i / N)^2
        let before: u128 = global.iter().map(|&g| (g as u128) * (g as u128)).sum();
        return after_err <= before;
    }
    let before_err = scaled_error(base, n, global, big_n);
    let n = n as u128;
    after_err * n * n <= before_err * (n + 1) * (n + 1)
}

fn cluster_counts(assignment: &[usize], groups: &OutputGroups, k: usize) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0usize; groups.group_count]; k];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c][groups.group_of[i]] += 1;
    }
    counts
}

/// One example's pass through the reassignment scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub example: usize,
    pub from: usize,
    pub to: usize,
    /// Candidate clusters tried, in scan order, up to and including the winner.
    pub tried: Vec<usize>,
    /// Receiving cluster counts with the example excluded, at the moment of the move.
    pub base_counts: Vec<usize>,
    pub qualified: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reassignment {
    pub state: ClusterState,
    pub placements: Vec<Placement>,
}

impl Reassignment {
    pub fn moves(&self) -> impl Iterator<Item = &Placement> {
        self.placements.iter().filter(|p| p.from != p.to)
    }
}

/// Single pass in ascending id order. Each example is compared against
/// clusters in ascending centroid distance; cluster membership excludes the
/// example itself, so its current cluster is tested like any other. The
/// first cluster for which insertion does not increase the MSE to `global`
/// receives it; otherwise it stays. Centroids are not recomputed.
pub fn reassign(
    state: &ClusterState,
    ids: &[String],
    groups: &OutputGroups,
    global: &Distribution,
) -> Result<Reassignment, ClusterError> {
    let n = state.assignment.len();
    for (what, got) in [("ids", ids.len()), ("output groups", groups.group_of.len())] {
        if got != n {
            return Err(ClusterError::Misaligned { what, expected: n, got });
        }
    }
    if global.counts.len() != groups.group_count {
        return Err(ClusterError::LengthMismatch(global.counts.len(), groups.group_count));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]).then(a.cmp(&b)));

    let mut assignment = state.assignment.clone();
    let mut counts = cluster_counts(&assignment, groups, state.k());
    let mut placements = Vec::with_capacity(n);
    for x in order {
        let group = groups.group_of[x];
        let from = assignment[x];
        counts[from][group] -= 1;
        let mut tried = Vec::new();
        let mut winner = None;
        for c in state.candidates(x) {
            tried.push(c);
            if insertion_keeps_or_improves(&counts[c], group, &global.counts) {
                winner = Some(c);
                break;
            }
        }
        let to = winner.unwrap_or(from);
        placements.push(Placement {
            example: x,
            from,
            to,
            tried,
            base_counts: counts[to].clone(),
            qualified: winner.is_some(),
        });
        counts[to][group] += 1;
        assignment[x] = to;
    }
    Ok(Reassignment {
        state: ClusterState {
            assignment,
            ..state.clone()
        },
        placements,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairMove {
    pub example: usize,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Repair {
    pub state: ClusterState,
    pub dissolved: Vec<usize>,
    pub moves: Vec<RepairMove>,
    /// Set when single-class clusters exist but no cluster has two classes.
    pub warning: bool,
}

fn class_count(counts: &[usize]) -> usize {
    counts.iter().filter(|&&c| c > 0).count()
}

/// Dissolves every non-empty single-class cluster, moving each member to its
/// nearest cluster that has at least two output classes.
pub fn repair_single_class(state: &ClusterState, groups: &OutputGroups) -> Repair {
    let counts = cluster_counts(&state.assignment, groups, state.k());
    let single: Vec<usize> = (0..state.k()).filter(|&c| class_count(&counts[c]) == 1).collect();
    let eligible: Vec<bool> = counts.iter().map(|c| class_count(c) >= 2).collect();
    let unchanged = |warning| Repair {
        state: state.clone(),
        dissolved: Vec::new(),
        moves: Vec::new(),
        warning,
    };
    if single.is_empty() {
        return unchanged(false);
    }
    if !eligible.iter().any(|&e| e) {
        tracing::warn!("every non-empty cluster is single-class; repair skipped");
        return unchanged(true);
    }
    let mut assignment = state.assignment.clone();
    let mut moves = Vec::new();
    for i in 0..assignment.len() {
        let from = state.assignment[i];
        if !single.contains(&from) {
            continue;
        }
        let to = state
            .candidates(i)
            .into_iter()
            .find(|&c| eligible[c])
            .expect("an eligible cluster exists");
        assignment[i] = to;
        moves.push(RepairMove { example: i, from, to });
    }
    Repair {
        state: ClusterState {
            assignment,
            ..state.clone()
        },
        dissolved: single,
        moves,
        warning: false,
    }
}

/// Everything the cluster stage produced, for downstream use and reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutcome {
    pub groups: OutputGroups,
    pub global: Distribution,
    pub initial: ClusterState,
    pub reassigned: Reassignment,
    pub repair: Repair,
}

impl ClusterOutcome {
    pub fn final_assignment(&self) -> &[usize] {
        &self.repair.state.assignment
    }

    pub fn k(&self) -> usize {
        self.initial.k()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.repair.state.members(cluster)
    }

    /// One report line per cluster.
    pub fn report(&self, ids: &[String]) -> Vec<ClusterReportLine> {
        let k = self.k();
        let initial = cluster_counts(&self.initial.assignment, &self.groups, k);
        let reassigned = cluster_counts(&self.reassigned.state.assignment, &self.groups, k);
        let final_counts = cluster_counts(self.final_assignment(), &self.groups, k);
        let mse = |counts: &[usize]| {
            let d = Distribution::from_counts(counts.to_vec());
            (!d.is_empty()).then(|| distribution_mse(&d, &self.global).expect("same length"))
        };
        (0..k)
            .map(|c| ClusterReportLine {
                cluster: c,
                members: self.members(c).into_iter().map(|i| ids[i].clone()).collect(),
                histogram: final_counts[c].clone(),
                initial_histogram: initial[c].clone(),
                mse_before_reassign: mse(&initial[c]),
                mse_after_reassign: mse(&reassigned[c]),
                mse_final: mse(&final_counts[c]),
                moved_in: self.reassigned.moves().filter(|p| p.to == c).count(),
                moved_out: self.reassigned.moves().filter(|p| p.from == c).count(),
                dissolved: self.repair.dissolved.contains(&c),
                repair_received: self.repair.moves.iter().filter(|m| m.to == c).count(),
                repair_warning: self.repair.warning,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReportLine {
    pub cluster: usize,
    pub members: Vec<String>,
    pub histogram: Vec<usize>,
    pub initial_histogram: Vec<usize>,
    pub mse_before_reassign: Option<f64>,
    pub mse_after_reassign: Option<f64>,
    pub mse_final: Option<f64>,
    pub moved_in: usize,
    pub moved_out: usize,
    pub dissolved: bool,
    pub repair_received: usize,
    pub repair_warning: bool,
}

/// kmeans → output groups → reassignment → repair.
pub fn cluster_stage(
    ids: &[String],
    input_embeddings: &[Vec<f64>],
    outputs: &[String],
    output_embeddings: Option<&[Vec<f64>]>,
    config: &ClusterConfig,
) -> Result<ClusterOutcome, ClusterError> {
    if outputs.len() != input_embeddings.len() {
        return Err(ClusterError::Misaligned {
            what: "outputs",
            expected: input_embeddings.len(),
            got: outputs.len(),
        });
    }
    let initial = kmeans(input_embeddings, config.k, config.seed, config.max_iterations)?;
    let groups = detect_output_groups(outputs, output_embeddings, config)?;
    let global = global_distribution(&groups);
    let reassigned = reassign(&initial, ids, &groups, &global)?;
    let repair = repair_single_class(&reassigned.state, &groups);
    Ok(ClusterOutcome {
        groups,
        global,
        initial,
        reassigned,
        repair,
    })
}
