//! One SM's cycle-stepped SIMT pipeline: greedy-then-oldest warp selection,
//! SIMT reconvergence stack, scoreboard, SIMD-width issue occupancy, and the
//! stall/activity counters the metric layer reads.
//!
//! Warps are lane-indirect: each lane points at a (source warp, source lane)
//! of its CTA's generated streams, so a 32-wide warp, a 64-wide fused warp,
//! and a regrouped mixed-origin warp all execute through the same pipeline.

use crate::memsys::{self, CoalescedAccess};
use crate::workload::{AbstractInstr, CtaStream, NULL_ADDR, WARP_LANES};
use serde::{Deserialize, Serialize};

/// Per-core capacity limits. Defaults are the documented platform model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SmConfig {
    pub warp_size: u32,
    pub simd_width: u32,
    pub max_threads: u32,
    pub max_ctas: u32,
    pub registers: u32,
    pub schedulers: u32,
    pub l1d_kb: u32,
    pub l1d_ways: u32,
    pub l1i_kb: u32,
    pub l1i_ways: u32,
    pub shared_kb: u32,
    pub l2_slice_kb: u32,
    pub l2_ways: u32,
    pub mshr_entries: u32,
    pub mshr_merge_cap: u32,
}

impl Default for SmConfig {
    fn default() -> Self {
        SmConfig {
            warp_size: 32,
            simd_width: 8,
            max_threads: 1024,
            max_ctas: 8,
            registers: 16384,
            schedulers: 1,
            l1d_kb: 16,
            l1d_ways: 4,
            l1i_kb: 4,
            l1i_ways: 4,
            shared_kb: 48,
            l2_slice_kb: 128,
            l2_ways: 8,
            mshr_entries: 64,
            mshr_merge_cap: 8,
        }
    }
}

/// Pipeline latencies and related knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Timing {
    pub compute_latency: u32,
    pub l1_hit_latency: u32,
    pub l2_hit_latency: u32,
    pub dram_latency: u32,
    pub branch_bubble: u32,
    pub coalesce_window: u32,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            compute_latency: 4,
            l1_hit_latency: 28,
            l2_hit_latency: 120,
            dram_latency: 220,
            branch_bubble: 2,
            coalesce_window: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpState {
    Ready,
    WaitingMem,
    WaitingBarrier,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneRef {
    /// Warp index within the owning CTA's stream list.
    pub warp: u16,
    pub lane: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackFrame {
    pub reconv: u32,
    pub mask: u64,
}

/// One outstanding piece of a blocking load (one cache line).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingPart {
    pub line: u64,
    pub lanes: u64,
    pub issued: u64,
}

#[derive(Debug, Clone)]
pub struct WarpContext {
    pub warp_id: u32,
    /// Global CTA id (index into the kernel's stream list).
    pub cta: u32,
    pub pc: u32,
    pub active_mask: u64,
    pub simt_stack: Vec<StackFrame>,
    pub lane_refs: Vec<LaneRef>,
    pub state: WarpState,
    pub ready_at: u64,
    pub last_issue_cycle: u64,
    pub pending_parts: Vec<PendingPart>,
    /// Flagged divergent by the split policy; rides along to SM_1.
    pub divergent_tag: bool,
}

impl WarpContext {
    /// Fresh full-width warp over the given lane sources.
    pub fn new(warp_id: u32, cta: u32, lane_refs: Vec<LaneRef>) -> Self {
        let width = lane_refs.len();
        assert!(width == 32 || width == 64, "warp width is 32 or 64 lanes");
        WarpContext {
            warp_id,
            cta,
            pc: 0,
            active_mask: full_mask(width),
            simt_stack: Vec::new(),
            lane_refs,
            state: WarpState::Ready,
            ready_at: 0,
            last_issue_cycle: 0,
            pending_parts: Vec::new(),
            divergent_tag: false,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.lane_refs.len()
    }

    #[inline]
    pub fn issueable(&self, now: u64) -> bool {
        self.state == WarpState::Ready && self.ready_at <= now
    }

    /// Pops reconvergence frames whose point has been reached. Divergent
    /// bodies clip to their parent's limit, so several frames can share one
    /// reconvergence pc.
    pub fn reconverge(&mut self) {
        while let Some(top) = self.simt_stack.last() {
            if top.reconv == self.pc {
                self.active_mask = top.mask;
                self.simt_stack.pop();
            } else {
                break;
            }
        }
    }

    /// Marks one line of the blocking load as filled. Returns true when the
    /// warp became ready again.
    pub fn resolve_line(&mut self, line: u64, now: u64) -> bool {
        let before = self.pending_parts.len();
        self.pending_parts.retain(|p| p.line != line);
        if before == self.pending_parts.len() || self.state != WarpState::WaitingMem {
            return false;
        }
        if self.pending_parts.is_empty() {
            self.state = WarpState::Ready;
            self.ready_at = now;
            return true;
        }
        false
    }

    /// Age of the oldest outstanding load line, if any.
    pub fn oldest_load_age(&self, now: u64) -> Option<u64> {
        self.pending_parts
            .iter()
            .map(|p| now.saturating_sub(p.issued))
            .max()
    }

    /// Slowness score of one lane: outstanding-load age when the lane is
    /// waiting on memory, else how deep in the SIMT stack its reactivation
    /// frame sits (counted from the top), else 0 for an active fast lane.
    pub fn lane_slowness(&self, lane: usize, now: u64) -> u64 {
        let bit = 1u64 << lane;
        if let Some(age) = self
            .pending_parts
            .iter()
            .filter(|p| p.lanes & bit != 0)
            .map(|p| now.saturating_sub(p.issued))
            .max()
        {
            return age;
        }
        if self.active_mask & bit != 0 {
            return 0;
        }
        for (depth, frame) in self.simt_stack.iter().rev().enumerate() {
            if frame.mask & bit != 0 {
                return depth as u64 + 1;
            }
        }
        0
    }
}

#[inline]
pub fn full_mask(width: usize) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

#[inline]
pub fn occupancy(active: u32, simd_width: u32) -> u64 {
    active.div_ceil(simd_width).max(1) as u64
}

/// Per-warp pending-writeback flags; a flagged warp is never scheduled.
#[derive(Debug, Clone, Default)]
pub struct Scoreboard {
    pending: Vec<bool>,
}

impl Scoreboard {
    pub fn ensure(&mut self, slots: usize) {
        if self.pending.len() < slots {
            self.pending.resize(slots, false);
        }
    }

    pub fn set(&mut self, slot: usize) {
        self.ensure(slot + 1);
        self.pending[slot] = true;
    }

    pub fn clear(&mut self, slot: usize) {
        self.ensure(slot + 1);
        self.pending[slot] = false;
    }

    pub fn is_pending(&self, slot: usize) -> bool {
        self.pending.get(slot).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SmCounters {
    pub issued_instrs: u64,
    pub thread_instructions: u64,
    pub active_thread_cycles: u64,
    pub inactive_thread_cycles: u64,
    pub idle_cycles: u64,
    pub issue_busy_cycles: u64,
    /// Lane-cycles frozen by divergent-branch bubbles.
    pub bubble_lane_cycles: u64,
    /// (width − active) × occupancy, accumulated per issue: lane-cycles the
    /// masked-off lanes spend waiting while a partial warp owns the pipeline.
    pub deficit_lane_cycles: u64,
    pub branches: u64,
    pub divergent_branches: u64,
    pub loads_issued: u64,
    pub stores_issued: u64,
    /// Per-lane memory touches (coalescer input).
    pub lane_mem_accesses: u64,
    /// Distinct-line transactions after intra-warp coalescing.
    pub coalesced_accesses: u64,
}

#[derive(Debug, Clone)]
pub struct ResidentCta {
    pub cta: u32,
    pub live_warps: u32,
    pub barrier_waiting: u32,
}

/// One scheduler unit: a baseline SM, a fused pair, or one half of a split
/// pair, depending on how the owner populated it.
#[derive(Debug, Clone)]
pub struct SmState {
    pub id: usize,
    pub warps: Vec<WarpContext>,
    pub scoreboard: Scoreboard,
    pub last_issued: Option<usize>,
    pub issue_free_at: u64,
    pub max_ctas_eff: u32,
    pub max_threads_eff: u32,
    pub next_warp_id: u32,
    pub resident: Vec<ResidentCta>,
    pub counters: SmCounters,
}

impl SmState {
    pub fn new(id: usize, max_ctas_eff: u32, max_threads_eff: u32) -> Self {
        SmState {
            id,
            warps: Vec::new(),
            scoreboard: Scoreboard::default(),
            last_issued: None,
            issue_free_at: 0,
            max_ctas_eff,
            max_threads_eff,
            next_warp_id: 0,
            resident: Vec::new(),
            counters: SmCounters::default(),
        }
    }

    pub fn live_warp_count(&self) -> usize {
        self.warps.iter().filter(|w| w.state != WarpState::Done).count()
    }

    pub fn resident_threads(&self) -> u32 {
        self.warps
            .iter()
            .filter(|w| w.state != WarpState::Done)
            .map(|w| w.width() as u32)
            .sum()
    }

    pub fn ready_warp_count(&self, now: u64) -> usize {
        self.warps
            .iter()
            .enumerate()
            .filter(|(s, w)| w.issueable(now) && !self.scoreboard.is_pending(*s))
            .count()
    }

    pub fn all_done(&self) -> bool {
        self.warps.iter().all(|w| w.state == WarpState::Done)
    }
}

/// Greedy-then-oldest: the last-issued warp again if it is ready, otherwise
/// the ready warp with the oldest last-issue cycle, ties to the lower warp
/// id. None means an idle cycle.
pub fn schedule(sm: &SmState, now: u64) -> Option<usize> {
    let ok = |slot: usize| {
        sm.warps[slot].issueable(now) && !sm.scoreboard.is_pending(slot)
    };
    if let Some(last) = sm.last_issued {
        if last < sm.warps.len() && ok(last) {
            return Some(last);
        }
    }
    sm.warps
        .iter()
        .enumerate()
        .filter(|(slot, _)| ok(*slot))
        .min_by_key(|(_, w)| (w.last_issue_cycle, w.warp_id))
        .map(|(slot, _)| slot)
}

/// Memory-side sink for issued accesses; the engine routes these into the
/// LSU, while unit tests substitute fixed-latency stubs.
pub trait MemoryPort {
    fn issue_load(
        &mut self,
        sm: usize,
        warp_slot: usize,
        accesses: &[CoalescedAccess],
        now: u64,
    );
    fn issue_store(&mut self, sm: usize, accesses: &[CoalescedAccess], now: u64);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IssueRecord {
    pub slot: usize,
    pub pc: u32,
    pub active_mask: u64,
    pub width: u8,
}

#[derive(Debug, Default, Clone)]
pub struct StepEvents {
    pub issued: Option<IssueRecord>,
    pub completed_ctas: Vec<u32>,
}

/// Gathers the per-lane view of the instruction at `pc` across the warp's
/// source streams. All warps of a kernel share the stream shape, so the
/// kind/reconvergence payload comes from lane 0's source.
fn fetched_kind<'k>(warp: &WarpContext, ctas: &'k [CtaStream]) -> &'k AbstractInstr {
    let cta = &ctas[warp.cta as usize];
    let r = warp.lane_refs[0];
    &cta.warps[r.warp as usize][warp.pc as usize]
}

fn gather_addresses(warp: &WarpContext, ctas: &[CtaStream], out: &mut [u64; 64]) {
    let cta = &ctas[warp.cta as usize];
    for (i, r) in warp.lane_refs.iter().enumerate() {
        if warp.active_mask & (1 << i) == 0 {
            out[i] = NULL_ADDR;
            continue;
        }
        out[i] = match &cta.warps[r.warp as usize][warp.pc as usize] {
            AbstractInstr::Load { addrs } | AbstractInstr::Store { addrs } => {
                addrs[r.lane as usize]
            }
            other => panic!("address gather on non-memory instr {other:?}"),
        };
    }
}

fn gather_taken(warp: &WarpContext, ctas: &[CtaStream]) -> (u64, u32) {
    let cta = &ctas[warp.cta as usize];
    let mut taken = 0u64;
    let mut reconv = None;
    for (i, r) in warp.lane_refs.iter().enumerate() {
        match &cta.warps[r.warp as usize][warp.pc as usize] {
            AbstractInstr::Branch { taken: t, reconv: rc } => {
                match reconv {
                    None => reconv = Some(*rc),
                    Some(prev) => debug_assert_eq!(prev, *rc, "shared stream shape"),
                }
                if t & (1 << r.lane) != 0 {
                    taken |= 1 << i;
                }
            }
            other => panic!("taken gather on non-branch instr {other:?}"),
        }
    }
    (taken, reconv.expect("warp has lanes"))
}

/// Advances one scheduler unit by one cycle: pick a warp, issue its next
/// instruction, account stalls and activity. Memory wake-ups are driven
/// externally via [`WarpContext::resolve_line`].
pub fn step_sm<M: MemoryPort>(
    sm: &mut SmState,
    ctas: &[CtaStream],
    cfg: &SmConfig,
    timing: &Timing,
    now: u64,
    port: &mut M,
) -> StepEvents {
    let mut events = StepEvents::default();
    if sm.issue_free_at > now {
        sm.counters.issue_busy_cycles += 1;
        return events;
    }
    let Some(slot) = schedule(sm, now) else {
        sm.counters.idle_cycles += 1;
        return events;
    };
    debug_assert!(!sm.scoreboard.is_pending(slot));

    sm.warps[slot].reconverge();
    let width = sm.warps[slot].width();
    let mask = sm.warps[slot].active_mask;
    debug_assert_ne!(mask, 0, "non-done warp always has active lanes");
    let active = mask.count_ones();
    let occ = occupancy(active, cfg.simd_width);

    sm.counters.issued_instrs += 1;
    sm.counters.thread_instructions += active as u64;
    sm.counters.active_thread_cycles += active as u64;
    sm.counters.inactive_thread_cycles += width as u64 - active as u64;
    sm.counters.deficit_lane_cycles += (width as u64 - active as u64) * occ;
    sm.issue_free_at = now + occ;
    let pc = sm.warps[slot].pc;
    events.issued = Some(IssueRecord {
        slot,
        pc,
        active_mask: mask,
        width: width as u8,
    });

    enum Fetched {
        Compute(u32),
        Load,
        Store,
        Branch,
        Barrier,
        Exit,
    }
    let fetched = match fetched_kind(&sm.warps[slot], ctas) {
        AbstractInstr::Compute { latency } => Fetched::Compute(*latency),
        AbstractInstr::Load { .. } => Fetched::Load,
        AbstractInstr::Store { .. } => Fetched::Store,
        AbstractInstr::Branch { .. } => Fetched::Branch,
        AbstractInstr::Barrier => Fetched::Barrier,
        AbstractInstr::Exit => Fetched::Exit,
    };

    match fetched {
        Fetched::Compute(latency) => {
            let w = &mut sm.warps[slot];
            w.ready_at = now + (latency as u64).max(occ);
            w.pc += 1;
        }
        Fetched::Load => {
            let mut addrs = [NULL_ADDR; 64];
            gather_addresses(&sm.warps[slot], ctas, &mut addrs);
            let accesses = memsys::coalesce(&addrs[..width], memsys::LINE_BYTES);
            sm.counters.loads_issued += 1;
            sm.counters.lane_mem_accesses += active as u64;
            sm.counters.coalesced_accesses += accesses.len() as u64;
            let w = &mut sm.warps[slot];
            w.pending_parts = accesses
                .iter()
                .map(|a| PendingPart {
                    line: a.line,
                    lanes: a.lanes,
                    issued: now,
                })
                .collect();
            w.state = WarpState::WaitingMem;
            w.pc += 1;
            sm.scoreboard.set(slot);
            port.issue_load(sm.id, slot, &accesses, now);
        }
        Fetched::Store => {
            let mut addrs = [NULL_ADDR; 64];
            gather_addresses(&sm.warps[slot], ctas, &mut addrs);
            let accesses = memsys::coalesce(&addrs[..width], memsys::LINE_BYTES);
            sm.counters.stores_issued += 1;
            sm.counters.lane_mem_accesses += active as u64;
            sm.counters.coalesced_accesses += accesses.len() as u64;
            let w = &mut sm.warps[slot];
            w.ready_at = now + occ;
            w.pc += 1;
            port.issue_store(sm.id, &accesses, now);
        }
        Fetched::Branch => {
            let (taken_raw, reconv) = gather_taken(&sm.warps[slot], ctas);
            let taken = taken_raw & mask;
            sm.counters.branches += 1;
            let w = &mut sm.warps[slot];
            if taken == mask {
                w.pc += 1;
                w.ready_at = now + occ;
            } else if taken == 0 {
                w.pc = reconv;
                w.ready_at = now + occ;
            } else {
                sm.counters.divergent_branches += 1;
                sm.counters.bubble_lane_cycles +=
                    timing.branch_bubble as u64 * width as u64;
                w.simt_stack.push(StackFrame { reconv, mask });
                w.active_mask = taken;
                w.pc += 1;
                w.ready_at = now + occ + timing.branch_bubble as u64;
            }
        }
        Fetched::Barrier => {
            let w = &mut sm.warps[slot];
            w.state = WarpState::WaitingBarrier;
            w.pc += 1;
            let cta = w.cta;
            let live = sm
                .warps
                .iter()
                .filter(|w| w.cta == cta && w.state != WarpState::Done)
                .count() as u32;
            let r = sm
                .resident
                .iter_mut()
                .find(|r| r.cta == cta)
                .expect("barrier on resident CTA");
            r.barrier_waiting += 1;
            if r.barrier_waiting == live {
                r.barrier_waiting = 0;
                for w in sm.warps.iter_mut() {
                    if w.cta == cta && w.state == WarpState::WaitingBarrier {
                        w.state = WarpState::Ready;
                        w.ready_at = now + 1;
                    }
                }
            }
        }
        Fetched::Exit => {
            let w = &mut sm.warps[slot];
            debug_assert!(w.simt_stack.is_empty(), "stack drains by exit");
            w.state = WarpState::Done;
            w.active_mask = 0;
            let cta = w.cta;
            let r = sm
                .resident
                .iter_mut()
                .find(|r| r.cta == cta)
                .expect("exit on resident CTA");
            r.live_warps -= 1;
            if r.live_warps == 0 {
                sm.resident.retain(|r| r.cta != cta);
                events.completed_ctas.push(cta);
            }
        }
    }
    sm.warps[slot].last_issue_cycle = now;
    sm.last_issued = Some(slot);
    events
}

/// Builds this unit's warps for one CTA. `fused` pairs consecutive warps
/// (2k, 2k+1) into 64-lane contexts; an odd trailing warp stays 32-wide.
pub fn cta_dispatch(
    sm: &mut SmState,
    ctas: &[CtaStream],
    cta: u32,
    fused: bool,
) -> bool {
    let stream = &ctas[cta as usize];
    let warp_count = stream.warps.len();
    let threads = (warp_count * WARP_LANES) as u32;
    if sm.resident.len() as u32 >= sm.max_ctas_eff
        || sm.resident_threads() + threads > sm.max_threads_eff
    {
        return false;
    }
    let mut contexts = 0u32;
    let mut w = 0usize;
    while w < warp_count {
        let wide = fused && w + 1 < warp_count;
        let mut refs = Vec::with_capacity(if wide { 64 } else { 32 });
        for src in 0..(if wide { 2 } else { 1 }) {
            for lane in 0..WARP_LANES {
                refs.push(LaneRef {
                    warp: (w + src) as u16,
                    lane: lane as u8,
                });
            }
        }
        let id = sm.next_warp_id;
        sm.next_warp_id += 1;
        sm.warps.push(WarpContext::new(id, cta, refs));
        contexts += 1;
        w += if wide { 2 } else { 1 };
    }
    sm.scoreboard.ensure(sm.warps.len());
    sm.resident.push(ResidentCta {
        cta,
        live_warps: contexts,
        barrier_waiting: 0,
    });
    true
}

/// Drops warp slots that finished, compacting the table between CTAs. Only
/// safe when no external slot references are held (the engine compacts at
/// CTA completion boundaries).
pub fn compact_done(sm: &mut SmState) {
    if sm.warps.iter().all(|w| w.state != WarpState::Done) {
        return;
    }
    sm.warps.retain(|w| w.state != WarpState::Done);
    rebuild_scoreboard(sm);
}

/// Re-derives scoreboard flags from warp state after slots moved around.
pub fn rebuild_scoreboard(sm: &mut SmState) {
    sm.scoreboard = Scoreboard::default();
    sm.scoreboard.ensure(sm.warps.len());
    for slot in 0..sm.warps.len() {
        if sm.warps[slot].state == WarpState::WaitingMem {
            sm.scoreboard.set(slot);
        }
    }
    sm.last_issued = None;
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::reference;
    use crate::workload::{self, KernelSpec};
    use std::collections::BTreeMap;

    fn compute_kernel(n: u32, warps: usize) -> Vec<CtaStream> {
        let body: Vec<AbstractInstr> = (0..n - 1)
            .map(|_| AbstractInstr::Compute { latency: 4 })
            .chain([AbstractInstr::Exit])
            .collect();
        vec![CtaStream {
            cta_id: 0,
            warps: vec![body; warps],
        }]
    }

    fn dispatch_all(sm: &mut SmState, ctas: &[CtaStream], fused: bool) {
        for c in 0..ctas.len() {
            assert!(cta_dispatch(sm, ctas, c as u32, fused));
        }
    }

    #[test]
    fn occupancy_is_ceiling_of_active_over_simd() {
        assert_eq!(occupancy(32, 8), 4);
        assert_eq!(occupancy(8, 8), 1);
        assert_eq!(occupancy(9, 8), 2);
        assert_eq!(occupancy(64, 8), 8);
        assert_eq!(occupancy(1, 8), 1);
    }

    #[test]
    fn gto_prefers_last_issued_then_oldest_then_lowest_id() {
        let ctas = compute_kernel(50, 3);
        let mut sm = SmState::new(0, 8, 1024);
        dispatch_all(&mut sm, &ctas, false);
        // Nothing issued yet: oldest = all zero, lowest id wins.
        assert_eq!(schedule(&sm, 0), Some(0));
        sm.warps[0].last_issue_cycle = 5;
        sm.last_issued = Some(0);
        // Greedy: last issued still ready.
        assert_eq!(schedule(&sm, 6), Some(0));
        // Last issued blocked → oldest of the rest.
        sm.warps[0].state = WarpState::WaitingMem;
        sm.warps[1].last_issue_cycle = 3;
        sm.warps[2].last_issue_cycle = 2;
        assert_eq!(schedule(&sm, 6), Some(2));
        // Tie on age → lower warp id.
        sm.warps[2].last_issue_cycle = 3;
        assert_eq!(schedule(&sm, 6), Some(1));
        // Scoreboard overrides readiness.
        sm.warps[0].state = WarpState::Ready;
        sm.scoreboard.set(0);
        assert_ne!(schedule(&sm, 6), Some(0));
        // Everyone waiting → None, idle counted by step.
        for w in sm.warps.iter_mut() {
            w.state = WarpState::WaitingMem;
        }
        assert_eq!(schedule(&sm, 6), None);
    }

    #[test]
    fn empty_sm_accumulates_idle_cycles_only() {
        let ctas = compute_kernel(5, 1);
        let mut sm = SmState::new(0, 8, 1024);
        let cfg = SmConfig::default();
        let timing = Timing::default();
        let mut mem = FlatMem::new(1);
        for now in 0..10 {
            let ev = step_sm(&mut sm, &ctas, &cfg, &timing, now, &mut mem);
            assert!(ev.issued.is_none());
        }
        assert_eq!(sm.counters.idle_cycles, 10);
        assert_eq!(sm.counters.issued_instrs, 0);
    }

    #[test]
    fn single_compute_warp_retires_in_closed_form_time() {
        // n instructions at occupancy 4 (32 lanes / simd 8), compute
        // latency 4: one issue every 4 cycles, last at 4(n−1).
        let n = 25u32;
        let ctas = compute_kernel(n, 1);
        let mut sm = SmState::new(0, 8, 1024);
        dispatch_all(&mut sm, &ctas, false);
        let cfg = SmConfig::default();
        let timing = Timing::default();
        let mut mem = FlatMem::new(1);
        let last = run_to_completion(&mut sm, &ctas, &cfg, &timing, &mut mem, 10_000);
        assert_eq!(last, 4 * (n as u64 - 1));
        assert_eq!(sm.counters.issued_instrs, n as u64);
        assert_eq!(sm.counters.thread_instructions, n as u64 * 32);
        assert_eq!(sm.counters.inactive_thread_cycles, 0);
    }

    #[test]
    fn divergent_branch_charges_inactive_lanes_by_body_length() {
        // 20/12 split over a 5-instruction taken body, then reconverge.
        let body_len = 5u32;
        let taken: u32 = (1 << 20) - 1;
        let mut stream: Vec<AbstractInstr> = vec![AbstractInstr::Branch {
            taken,
            reconv: 1 + body_len,
        }];
        for _ in 0..body_len {
            stream.push(AbstractInstr::Compute { latency: 4 });
        }
        stream.push(AbstractInstr::Compute { latency: 4 }); // post-reconv
        stream.push(AbstractInstr::Exit);
        let ctas = vec![CtaStream {
            cta_id: 0,
            warps: vec![stream],
        }];
        let mut sm = SmState::new(0, 8, 1024);
        dispatch_all(&mut sm, &ctas, false);
        let cfg = SmConfig::default();
        let timing = Timing::default();
        let mut mem = FlatMem::new(1);
        run_to_completion(&mut sm, &ctas, &cfg, &timing, &mut mem, 10_000);
        assert_eq!(sm.counters.divergent_branches, 1);
        assert_eq!(
            sm.counters.inactive_thread_cycles,
            12 * body_len as u64,
            "12 masked lanes for each body instruction"
        );
        assert_eq!(sm.counters.bubble_lane_cycles, 2 * 32);
        // Post-reconvergence instructions ran with the restored full mask.
        assert_eq!(
            sm.counters.thread_instructions,
            32 + 20 * body_len as u64 + 32 + 32
        );
    }

    #[test]
    fn mask_restores_through_nested_divergence_in_lifo_order() {
        let m = |bits: u32| bits as u64;
        let stream = vec![
            AbstractInstr::Branch { taken: 0x0000_FFFF, reconv: 5 }, // outer
            AbstractInstr::Branch { taken: 0x0000_00FF, reconv: 3 }, // inner
            AbstractInstr::Compute { latency: 4 },
            AbstractInstr::Compute { latency: 4 }, // inner reconv
            AbstractInstr::Compute { latency: 4 },
            AbstractInstr::Compute { latency: 4 }, // outer reconv
            AbstractInstr::Exit,
        ];
        let ctas = vec![CtaStream {
            cta_id: 0,
            warps: vec![stream],
        }];
        let mut sm = SmState::new(0, 8, 1024);
        dispatch_all(&mut sm, &ctas, false);
        let cfg = SmConfig::default();
        let timing = Timing::default();
        let mut mem = FlatMem::new(1);
        let mut masks_by_pc: BTreeMap<u32, u64> = BTreeMap::new();
        for now in 0..10_000 {
            mem.deliver(&mut sm, now);
            let ev = step_sm(&mut sm, &ctas, &cfg, &timing, now, &mut mem);
            if let Some(rec) = ev.issued {
                masks_by_pc.insert(rec.pc, rec.active_mask);
            }
            if sm.all_done() {
                break;
            }
        }
        assert_eq!(masks_by_pc[&2], m(0x0000_00FF), "inner body");
        assert_eq!(masks_by_pc[&3], m(0x0000_FFFF), "inner reconv restores");
        assert_eq!(masks_by_pc[&5], m(0xFFFF_FFFF), "outer reconv restores");
    }

    #[test]
    fn load_blocks_warp_until_all_lines_fill() {
        let addrs: Box<[u64; 32]> = {
            let mut a = [0u64; 32];
            for (l, slot) in a.iter_mut().enumerate() {
                *slot = (l as u64 / 16) * 128; // two distinct lines
            }
            Box::new(a)
        };
        let stream = vec![
            AbstractInstr::Load { addrs },
            AbstractInstr::Compute { latency: 4 },
            AbstractInstr::Exit,
        ];
        let ctas = vec![CtaStream {
            cta_id: 0,
            warps: vec![stream],
        }];
        let mut sm = SmState::new(0, 8, 1024);
        dispatch_all(&mut sm, &ctas, false);
        let cfg = SmConfig::default();
        let timing = Timing::default();
        let mut mem = FlatMem::new(30);
        let mut issue_cycles = Vec::new();
        for now in 0..10_000 {
            mem.deliver(&mut sm, now);
            let ev = step_sm(&mut sm, &ctas, &cfg, &timing, now, &mut mem);
            if let Some(rec) = ev.issued {
                issue_cycles.push((now, rec.pc));
            }
            if sm.all_done() {
                break;
            }
        }
        assert_eq!(mem.lines, 2);
        assert_eq!(issue_cycles[0], (0, 0));
        // Both lines fill at cycle 30; the dependent compute issues then.
        assert_eq!(issue_cycles[1], (30, 1));
    }

    #[test]
    fn dispatch_rejects_on_cta_and_thread_limits() {
        let ctas: Vec<CtaStream> = (0..12)
            .map(|i| CtaStream {
                cta_id: i,
                warps: vec![
                    vec![
                        AbstractInstr::Compute { latency: 4 },
                        AbstractInstr::Exit,
                    ];
                    4
                ],
            })
            .collect();
        // CTA-count limit: 8 CTAs of 4 warps (128 threads) fit 1024 threads
        // exactly; the 9th rejects on max_ctas.
        let mut sm = SmState::new(0, 8, 1024);
        for c in 0..8 {
            assert!(cta_dispatch(&mut sm, &ctas, c, false));
        }
        assert!(!cta_dispatch(&mut sm, &ctas, 8, false));
        // Thread limit: 1024 threads already resident → any CTA rejects.
        let mut sm2 = SmState::new(1, 64, 1024);
        for c in 0..8 {
            assert!(cta_dispatch(&mut sm2, &ctas, c, false));
        }
        assert_eq!(sm2.resident_threads(), 1024);
        assert!(!cta_dispatch(&mut sm2, &ctas, 8, false));
    }

    #[test]
    fn fused_dispatch_pairs_warps_into_64_lane_contexts() {
        let spec = KernelSpec {
            name: "pairing".into(),
            cta_count: 1,
            warps_per_cta: 5,
            instructions_per_warp: 40,
            load_rate: 0.1,
            store_rate: 0.05,
            branch_rate: 0.1,
            branch_divergence_prob: 0.5,
            divergent_path_extra_insns: 4,
            access_stride_bytes: 64,
            access_footprint_bytes: 1 << 16,
            locality: 0.3,
            seed: 11,
            divergence_phase_len: None,
        };
        let kernel = workload::generate_kernel(&spec).unwrap();
        let mut sm = SmState::new(0, 16, 2048);
        assert!(cta_dispatch(&mut sm, &kernel.ctas, 0, true));
        let widths: Vec<usize> = sm.warps.iter().map(|w| w.width()).collect();
        assert_eq!(widths, vec![64, 64, 32], "odd trailing warp stays narrow");
        let w0 = &sm.warps[0];
        assert_eq!(w0.lane_refs[0], LaneRef { warp: 0, lane: 0 });
        assert_eq!(w0.lane_refs[32], LaneRef { warp: 1, lane: 0 });
        assert_eq!(w0.lane_refs[63], LaneRef { warp: 1, lane: 31 });
    }

    #[test]
    fn per_thread_issue_counts_match_interpreter_oracle() {
        // Random kernels through the pipeline (baseline and fused) must
        // retire exactly the generated per-thread instruction counts.
        for seed in 0..6u64 {
            let spec = KernelSpec {
                name: format!("audit-{seed}"),
                cta_count: 2,
                warps_per_cta: 4,
                instructions_per_warp: 120,
                load_rate: 0.15,
                store_rate: 0.05,
                branch_rate: 0.12,
                branch_divergence_prob: 0.6,
                divergent_path_extra_insns: 6,
                access_stride_bytes: 32,
                access_footprint_bytes: 1 << 14,
                locality: 0.4,
                seed: 1000 + seed,
                divergence_phase_len: None,
            };
            let kernel = workload::generate_kernel(&spec).unwrap();
            for fused in [false, true] {
                let mut sm = SmState::new(0, 16, 2048);
                dispatch_all(&mut sm, &kernel.ctas, fused);
                let cfg = SmConfig::default();
                let timing = Timing::default();
                let mut mem = FlatMem::new(40);
                let mut counts: BTreeMap<(u32, u16, u8), u32> = BTreeMap::new();
                for now in 0..2_000_000u64 {
                    mem.deliver(&mut sm, now);
                    let snapshot: Option<(usize, u64)> =
                        schedule(&sm, now).map(|s| (s, sm.warps[s].active_mask));
                    let ev = step_sm(&mut sm, &kernel.ctas, &cfg, &timing, now, &mut mem);
                    if let Some(rec) = ev.issued {
                        let (slot, _) = snapshot.unwrap();
                        assert_eq!(slot, rec.slot);
                        let w = &sm.warps[rec.slot];
                        for (i, r) in w.lane_refs.iter().enumerate() {
                            if rec.active_mask & (1 << i) != 0 {
                                *counts.entry((w.cta, r.warp, r.lane)).or_default() += 1;
                            }
                        }
                    }
                    if sm.all_done() {
                        break;
                    }
                }
                assert!(sm.all_done(), "seed {seed} fused={fused} hung");
                for (c, cta) in kernel.ctas.iter().enumerate() {
                    let oracle = reference::cta_thread_counts(cta);
                    for (w, per_lane) in oracle.iter().enumerate() {
                        for (l, &expect) in per_lane.iter().enumerate() {
                            let got = counts
                                .get(&(c as u32, w as u16, l as u8))
                                .copied()
                                .unwrap_or(0);
                            assert_eq!(
                                got, expect,
                                "cta {c} warp {w} lane {l} fused={fused}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_divergence_kernel_has_no_inactive_lane_cycles() {
        let spec = KernelSpec {
            name: "uniform".into(),
            cta_count: 1,
            warps_per_cta: 4,
            instructions_per_warp: 300,
            load_rate: 0.2,
            store_rate: 0.1,
            branch_rate: 0.1,
            branch_divergence_prob: 0.0,
            divergent_path_extra_insns: 8,
            access_stride_bytes: 128,
            access_footprint_bytes: 1 << 16,
            locality: 0.2,
            seed: 77,
            divergence_phase_len: None,
        };
        let kernel = workload::generate_kernel(&spec).unwrap();
        let mut sm = SmState::new(0, 8, 1024);
        dispatch_all(&mut sm, &kernel.ctas, false);
        let cfg = SmConfig::default();
        let timing = Timing::default();
        let mut mem = FlatMem::new(25);
        run_to_completion(&mut sm, &kernel.ctas, &cfg, &timing, &mut mem, 2_000_000);
        assert_eq!(sm.counters.inactive_thread_cycles, 0);
        assert_eq!(sm.counters.divergent_branches, 0);
        assert_eq!(sm.counters.bubble_lane_cycles, 0);
    }

    #[test]
    fn lane_slowness_ranks_memory_over_stack_depth_over_active() {
        let refs: Vec<LaneRef> = (0..32)
            .map(|l| LaneRef { warp: 0, lane: l as u8 })
            .collect();
        let mut w = WarpContext::new(0, 0, refs);
        // Lane 0 active; lanes 8..16 parked one frame deep; lane 1 waiting
        // on a 90-cycle-old load line.
        w.active_mask = 0x1;
        w.simt_stack.push(StackFrame {
            reconv: 9,
            mask: 0xFF00,
        });
        w.pending_parts.push(PendingPart {
            line: 7,
            lanes: 0x2,
            issued: 10,
        });
        assert_eq!(w.lane_slowness(1, 100), 90);
        assert_eq!(w.lane_slowness(8, 100), 1);
        assert_eq!(w.lane_slowness(0, 100), 0);
        assert_eq!(w.oldest_load_age(100), Some(90));
    }
}
