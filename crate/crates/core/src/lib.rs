//! Automated instruction revision (AIR).
//!
//! Turns a labeled task dataset into a compact set of IF/THEN rules, renders
//! them as a system prompt, and refines individual rules on freshly sampled
//! training cases. The pipeline is:
//!
//! 1. [`corpus`]: canonical input/output columns, splits, task metrics.
//! 2. [`clustering`]: KMeans on input embeddings, output groups, and
//!    distribution-aware reassignment plus single-class repair.
//! 3. [`induction`]: balanced A/B contrast sets per cluster, rule elicitation.
//! 4. [`compiler`]: rule aggregation and plain/traced prompt rendering.
//! 5. [`refinery`]: traced evaluation, mistake/anchor batches, minimal revisions.
//!
//! [`modelio`] is the uniform model client (OpenAI-compatible HTTP or a
//! deterministic mock) with per-role token accounting, and [`harness`] wires
//! everything together behind the `air` CLI.

pub mod clustering;
pub mod compiler;
pub mod corpus;
pub mod harness;
pub mod induction;
pub mod modelio;
pub mod refinery;
pub mod seeding;
pub mod templates;
