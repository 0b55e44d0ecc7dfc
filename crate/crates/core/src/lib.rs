//! Round-synchronous simulator for distributed transactive control of a
//! power network: generator and consumer agents on a sparse communication
//! graph coordinate generation and flexible demand through a shared price,
//! using only neighbor-to-neighbor messages.
//!
//! The crate is layered bottom-up:
//!
//! * [`graph`]: agent ids, the communication topology, distances.
//! * [`mdst`]: distributed construction of a small-diameter spanning tree.
//! * [`consensus`]: finite-time exact summation over that tree.
//! * [`agents`]: generator and consumer state, costs, utilities, gradients.
//! * [`oracle`]: centralized welfare optimum, used to judge the distributed runs.
//! * [`engine`]: the round-synchronous simulation loop and event handling.
//! * [`scenario`]: the on-disk scenario format.
//! * [`output`]: CSV records and SVG charts.
//! * [`cli`]: the `transactive` binary's subcommands.
//!
//! Every collection that affects iteration order is a `BTreeMap`/`BTreeSet`
//! and every tie breaks on `AgentId`, so a run is a pure function of its
//! scenario file.

pub mod agents;
pub mod cli;
pub mod consensus;
pub mod engine;
pub mod graph;
pub mod mdst;
pub mod oracle;
pub mod output;
pub mod scenario;
