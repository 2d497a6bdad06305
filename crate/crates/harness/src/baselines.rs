//! The three protocols behind one signature.
//!
//! The hub baseline adds a dedicated witness chain after the transaction
//! chains, so `cfg.chains` always counts the chains that run transactions.

use cbt_core::{ChainId, ClusterConfig, ProtocolKind, Workload};
use cbt_transport::{sim_run, FaultSchedule, SimError, SimOptions, SimResult};

/// Config actually simulated for `protocol` on `base`.
pub fn effective_config(base: &ClusterConfig, protocol: ProtocolKind) -> ClusterConfig {
    let mut cfg = base.clone();
    cfg.protocol = protocol;
    match protocol {
        ProtocolKind::Hub => {
            if cfg.hub.is_none() {
                cfg.hub = Some(ChainId(cfg.chains));
                cfg.chains += 1;
                // Votes travel two hops each way.
                cfg.timeouts.vote_timeout *= 2;
            }
        }
        _ => cfg.hub = None,
    }
    cfg
}

pub fn run_protocol(
    protocol: ProtocolKind,
    cfg: &ClusterConfig,
    workload: &Workload,
    faults: &FaultSchedule,
    opts: SimOptions,
) -> Result<SimResult, SimError> {
    let cfg = effective_config(cfg, protocol);
    cfg.validate_cross_chain()?;
    sim_run(&cfg, workload, faults, opts)
}

pub fn run_cbt(cfg: &ClusterConfig, workload: &Workload, faults: &FaultSchedule, opts: SimOptions) -> Result<SimResult, SimError> {
    run_protocol(ProtocolKind::Cbt, cfg, workload, faults, opts)
}

/// Recovery and heartbeat off: uncertain participants wait forever.
pub fn run_blocking_2pc(
    cfg: &ClusterConfig,
    workload: &Workload,
    faults: &FaultSchedule,
    opts: SimOptions,
) -> Result<SimResult, SimError> {
    run_protocol(ProtocolKind::Blocking2pc, cfg, workload, faults, opts)
}

/// Every cross-chain message takes two hops through the witness chain.
pub fn run_hub(cfg: &ClusterConfig, workload: &Workload, faults: &FaultSchedule, opts: SimOptions) -> Result<SimResult, SimError> {
    run_protocol(ProtocolKind::Hub, cfg, workload, faults, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hub_gets_its_own_chain() {
        let cfg = effective_config(&ClusterConfig::new(3, 2, ProtocolKind::Cbt), ProtocolKind::Hub);
        assert_eq!((cfg.chains, cfg.hub), (4, Some(ChainId(3))));
        assert!(cfg.dedicated_hub());
        let back = effective_config(&cfg, ProtocolKind::Cbt);
        assert_eq!(back.hub, None);
    }

    #[test]
    fn explicit_hub_is_kept() {
        let mut base = ClusterConfig::new(3, 2, ProtocolKind::Hub);
        base.hub = Some(ChainId(0));
        let cfg = effective_config(&base, ProtocolKind::Hub);
        assert_eq!((cfg.chains, cfg.hub), (3, Some(ChainId(0))));
        assert!(!cfg.dedicated_hub());
    }
}
