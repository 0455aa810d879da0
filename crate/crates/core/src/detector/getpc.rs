//! GetPC event extraction from execution traces.

use serde::{Deserialize, Serialize};

use crate::cpu::chain::ExecutionTrace;
use crate::cpu::exec::{ControlRecord, FPU_ENV_IP_OFFSET};
use crate::cpu::memory::AccessKind;

#[derive(Debug, Copy, Clone, Eq, PartialEq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GetPcKind {
    CallRel,
    CallIndirect,
    Fstenv,
    FsStackProbe,
}

impl GetPcKind {
    pub fn name(self) -> &'static str {
        match self {
            GetPcKind::CallRel => "call_rel",
            GetPcKind::CallIndirect => "call_indirect",
            GetPcKind::Fstenv => "fstenv",
            GetPcKind::FsStackProbe => "fs_stack_probe",
        }
    }
}

/// Which GetPC idioms the scan recognizes. `call_rel` and `fstenv` are the
/// libemu-parity baseline; the other two are the extended profile.
#[derive(Debug, Copy, Clone, Eq, PartialEq, Serialize, Deserialize)]
pub struct GetPcModes {
    pub call_rel: bool,
    pub fstenv: bool,
    pub call_indirect: bool,
    pub stack_scan_fs: bool,
}

impl GetPcModes {
    pub fn baseline() -> GetPcModes {
        GetPcModes { call_rel: true, fstenv: true, call_indirect: false, stack_scan_fs: false }
    }

    pub fn extended() -> GetPcModes {
        GetPcModes { call_rel: true, fstenv: true, call_indirect: true, stack_scan_fs: true }
    }

    pub fn enabled(&self, kind: GetPcKind) -> bool {
        match kind {
            GetPcKind::CallRel => self.call_rel,
            GetPcKind::CallIndirect => self.call_indirect,
            GetPcKind::Fstenv => self.fstenv,
            GetPcKind::FsStackProbe => self.stack_scan_fs,
        }
    }
}

/// A point in the trace where the chain learned its own address.
#[derive(Debug, Copy, Clone, Eq, PartialEq, Serialize, Deserialize)]
pub struct GetPcEvent {
    pub kind: GetPcKind,
    pub at_eip: u32,
    /// The address value the chain recovered (return address, saved FPU
    /// instruction pointer, or TIB stack bound).
    pub recovered: u32,
    /// Access-log position; reads "after" this event are `events[pos..]`.
    pub pos: usize,
    pub retired: u32,
}

fn read_at_exact(trace: &ExecutionTrace, from: usize, addr: u32) -> bool {
    trace.events[from..]
        .iter()
        .any(|e| e.kind == AccessKind::Read && e.addr == addr)
}

/// Extracts GetPC events from a completed trace, in execution order.
///
/// - `call_rel`: an executed `CALL rel32` whose destination lies in the buffer.
/// - `call_indirect`: an indirect call whose dynamic target lies in the buffer
///   or stack, where the pushed return address is read afterwards.
/// - `fstenv`: a stored FPU environment whose saved-IP field points into the
///   buffer or stack and is read afterwards.
/// - `fs_stack_probe`: a read of the TIB stack-top/bottom slot (first read of
///   each slot is reported).
pub fn detect_getpc_events(trace: &ExecutionTrace, modes: &GetPcModes) -> Vec<GetPcEvent> {
    let mut out = Vec::new();
    let layout = &trace.layout;

    for rec in &trace.control {
        match *rec {
            ControlRecord::Call { indirect: false, at_eip, dest, ret_addr, log_pos, retired, .. } => {
                if modes.call_rel && layout.in_buffer(dest) {
                    out.push(GetPcEvent {
                        kind: GetPcKind::CallRel,
                        at_eip,
                        recovered: ret_addr,
                        pos: log_pos,
                        retired,
                    });
                }
            }
            ControlRecord::Call { indirect: true, at_eip, dest, ret_addr, ret_slot, log_pos, retired } => {
                if modes.call_indirect
                    && (layout.in_buffer(dest) || layout.in_stack(dest))
                    && read_at_exact(trace, log_pos, ret_slot)
                {
                    out.push(GetPcEvent {
                        kind: GetPcKind::CallIndirect,
                        at_eip,
                        recovered: ret_addr,
                        pos: log_pos,
                        retired,
                    });
                }
            }
            ControlRecord::EnvStore { at_eip, env_addr, saved_ip, log_pos, retired } => {
                if modes.fstenv
                    && (layout.in_buffer(saved_ip) || layout.in_stack(saved_ip))
                    && read_at_exact(trace, log_pos, env_addr.wrapping_add(FPU_ENV_IP_OFFSET))
                {
                    out.push(GetPcEvent {
                        kind: GetPcKind::Fstenv,
                        at_eip,
                        recovered: saved_ip,
                        pos: log_pos,
                        retired,
                    });
                }
            }
        }
    }

    if modes.stack_scan_fs {
        let top_slot = layout.fs_base.wrapping_add(0x04);
        let bottom_slot = layout.fs_base.wrapping_add(0x08);
        let mut seen_top = false;
        let mut seen_bottom = false;
        for (i, ev) in trace.events.iter().enumerate() {
            if ev.kind != AccessKind::Read {
                continue;
            }
            let recovered = if ev.addr == top_slot && !seen_top {
                seen_top = true;
                layout.stack_top
            } else if ev.addr == bottom_slot && !seen_bottom {
                seen_bottom = true;
                layout.stack_base
            } else {
                continue;
            };
            out.push(GetPcEvent {
                kind: GetPcKind::FsStackProbe,
                at_eip: ev.at_eip,
                recovered,
                // The probe read itself is not a payload read.
                pos: i + 1,
                retired: 0,
            });
            if seen_top && seen_bottom {
                break;
            }
        }
    }

    out.sort_by_key(|e| e.pos);
    out
}
