//! Message transports for the commit protocol: a deterministic simulator with
//! fault injection and exhaustive schedule enumeration, and a live TCP
//! backend.

pub mod enumerate;
pub mod faults;
pub mod live;
pub mod sim;
pub mod trace;
pub mod wire;

pub use enumerate::{sim_enumerate, EnumReport, FaultTemplate, ScheduleVerdict, VariedFault, Verdict};
pub use faults::{FaultEvent, FaultSchedule, MatchRule};
pub use live::{LiveCluster, LiveError, LiveOptions, NodeView, PeerLink};
pub use sim::{sim_run, Outcome, SimError, SimOptions, SimResult, SimStats, Simulator};
pub use trace::{MsgSummary, Trace, TraceEntry, TraceEvent};
pub use wire::WireError;
