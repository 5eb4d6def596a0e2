//! Fuse/split reconfiguration: the per-pair state machine, divergent-warp
//! classification, and the two policies for decomposing a 64-lane warp when
//! a fused SM splits.

use crate::smcore::{LaneRef, PendingPart, StackFrame, WarpContext, WarpState};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ReconfigParams {
    /// Divergent-warp ratio above which a fused pair splits (strict >).
    pub split_threshold: f64,
    pub check_period: u64,
    pub migration_period: u64,
    /// One-time cycle cost charged when a kernel starts fused.
    pub reconfig_cost: u64,
    /// Pipeline-drain cycles charged at each dynamic split.
    pub split_cost: u64,
    /// A warp is control-divergent below this active-lane fraction.
    pub control_frac: f64,
    /// A warp is memory-divergent beyond this outstanding-load age.
    pub mem_age: u64,
    /// Regrouping granularity in lanes.
    pub group_size: u32,
    /// SM_1 idle fraction above which a fast warp migrates over.
    pub migration_idle_frac: f64,
}

impl Default for ReconfigParams {
    fn default() -> Self {
        ReconfigParams {
            split_threshold: 0.25,
            check_period: 500,
            migration_period: 1_000,
            reconfig_cost: 500,
            split_cost: 50,
            control_frac: 0.5,
            mem_age: 200,
            group_size: 8,
            migration_idle_frac: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    Baseline,
    Fused,
    SplitRunning,
}

/// Which decomposition runs when a fused core splits off its divergent warps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPolicy {
    /// Cut each wide warp back into its two original halves.
    Direct,
    /// Re-sort lanes by slowness so one half keeps the fast groups.
    Regroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    Fuse,
    Split,
    Refuse,
}

impl Transition {
    pub fn label(self) -> &'static str {
        match self {
            Transition::Fuse => "FUSE",
            Transition::Split => "SPLIT",
            Transition::Refuse => "REFUSE",
        }
    }
}

/// Dynamic state of one SM pair: mode, the divergent-warp bin gathered at
/// the last check, and the timestamped transition log.
#[derive(Debug, Clone)]
pub struct PairState {
    pub mode: PairMode,
    pub bin: Vec<u32>,
    pub events: Vec<(u64, Transition)>,
    pub last_check: u64,
    pub last_migration: u64,
    /// SM_1 idle-counter snapshot at the last migration boundary.
    pub sm1_idle_snapshot: u64,
    pub frozen_until: u64,
}

impl PairState {
    pub fn new(mode: PairMode) -> Self {
        PairState {
            mode,
            bin: Vec::new(),
            events: Vec::new(),
            last_check: 0,
            last_migration: 0,
            sm1_idle_snapshot: 0,
            frozen_until: 0,
        }
    }

    /// Applies a legal mode transition and logs it. Transitions are only
    /// Fused→SplitRunning (Split) and SplitRunning→Fused (Refuse); fusing
    /// itself happens at kernel boundaries.
    pub fn transition(&mut self, now: u64, t: Transition) {
        let next = match (self.mode, t) {
            (PairMode::Baseline, Transition::Fuse) => PairMode::Fused,
            (PairMode::Fused, Transition::Split) => PairMode::SplitRunning,
            (PairMode::SplitRunning, Transition::Refuse) => PairMode::Fused,
            (mode, t) => panic!("illegal pair transition {mode:?} -> {t:?}"),
        };
        if let Some(&(prev, _)) = self.events.last() {
            assert!(prev <= now, "event log is monotonically timestamped");
        }
        self.mode = next;
        self.bin.clear();
        self.events.push((now, t));
    }
}

/// A warp counts as divergent when its active-lane fraction has dropped
/// below `control_frac`, or some lane has been waiting on memory longer
/// than `mem_age` cycles.
pub fn classify_divergent(warp: &WarpContext, now: u64, params: &ReconfigParams) -> bool {
    if !matches!(warp.state, WarpState::Ready | WarpState::WaitingMem) {
        return false;
    }
    let frac = warp.active_mask.count_ones() as f64 / warp.width() as f64;
    if frac < params.control_frac {
        return true;
    }
    matches!(warp.oldest_load_age(now), Some(age) if age > params.mem_age)
}

/// Split when the binned fraction strictly exceeds the threshold.
pub fn check_split(bin_len: usize, resident_warps: usize, threshold: f64) -> bool {
    if resident_warps == 0 {
        return false;
    }
    bin_len as f64 / resident_warps as f64 > threshold
}

/// SM_1 claims one fast warp when it idled more than `idle_frac` of the
/// last period and SM_0 can spare a ready warp (keeps at least one).
pub fn should_migrate(
    idle_cycles_in_period: u64,
    period: u64,
    sm0_ready_warps: usize,
    idle_frac: f64,
) -> bool {
    idle_cycles_in_period as f64 / period as f64 > idle_frac && sm0_ready_warps > 1
}

/// Extracts the lanes selected by `sel` (in order) into a fresh 32-lane
/// context. Stack frames and pending load parts restrict to the selected
/// lanes; if the slice has no currently active lane, it fast-forwards to
/// the first reconvergence point that reactivates one, exactly where those
/// lanes would have resumed inside the original warp.
fn slice_context(w: &WarpContext, sel: &[usize], new_id: u32) -> WarpContext {
    assert_eq!(sel.len(), 32, "slices are warp-sized");
    let remask = |mask: u64| -> u64 {
        let mut out = 0u64;
        for (i, &lane) in sel.iter().enumerate() {
            if mask & (1u64 << lane) != 0 {
                out |= 1 << i;
            }
        }
        out
    };
    let lane_refs: Vec<LaneRef> = sel.iter().map(|&l| w.lane_refs[l]).collect();
    let mut stack: Vec<StackFrame> = w
        .simt_stack
        .iter()
        .filter_map(|f| {
            let mask = remask(f.mask);
            (mask != 0).then_some(StackFrame {
                reconv: f.reconv,
                mask,
            })
        })
        .collect();
    let mut pc = w.pc;
    let mut active_mask = remask(w.active_mask);
    while active_mask == 0 {
        let frame = stack
            .pop()
            .expect("some frame reactivates every live lane");
        pc = frame.reconv;
        active_mask = frame.mask;
    }
    let pending_parts: Vec<PendingPart> = w
        .pending_parts
        .iter()
        .filter_map(|p| {
            let lanes = remask(p.lanes);
            (lanes != 0).then_some(PendingPart {
                line: p.line,
                lanes,
                issued: p.issued,
            })
        })
        .collect();
    let state = if pending_parts.is_empty() {
        WarpState::Ready
    } else {
        WarpState::WaitingMem
    };
    WarpContext {
        warp_id: new_id,
        cta: w.cta,
        pc,
        active_mask,
        simt_stack: stack,
        lane_refs,
        state,
        ready_at: w.ready_at,
        last_issue_cycle: w.last_issue_cycle,
        pending_parts,
        divergent_tag: w.divergent_tag,
    }
}

/// Halves a 64-lane warp down the middle: lanes 0–31 and 32–63 become two
/// 32-lane warps (both destined for SM_1).
pub fn direct_split(w: &WarpContext, id_lo: u32, id_hi: u32) -> (WarpContext, WarpContext) {
    assert_eq!(w.width(), 64, "direct split decomposes 64-lane warps");
    let lo: Vec<usize> = (0..32).collect();
    let hi: Vec<usize> = (32..64).collect();
    let mut a = slice_context(w, &lo, id_lo);
    let mut b = slice_context(w, &hi, id_hi);
    a.divergent_tag = true;
    b.divergent_tag = true;
    (a, b)
}

/// Score of one lane group: the slowest lane inside it.
fn group_score(w: &WarpContext, group: usize, group_size: usize, now: u64) -> u64 {
    (group * group_size..(group + 1) * group_size)
        .map(|lane| w.lane_slowness(lane, now))
        .max()
        .unwrap_or(0)
}

/// Partitions a 64-lane warp into a fast and a slow 32-lane warp by group
/// slowness. Groups sort ascending by (score, index): the low half forms
/// the fast warp (stays on SM_0), the high half the slow warp (to SM_1),
/// so score ties resolve toward fast for lower group indices.
pub fn regroup_warps(
    w: &WarpContext,
    group_size: u32,
    now: u64,
    id_fast: u32,
    id_slow: u32,
) -> (WarpContext, WarpContext) {
    assert_eq!(w.width(), 64, "regrouping decomposes 64-lane warps");
    let gs = group_size as usize;
    assert!(gs > 0 && 32 % gs == 0, "group size must divide 32");
    let groups = 64 / gs;
    let mut order: Vec<usize> = (0..groups).collect();
    order.sort_by_key(|&g| (group_score(w, g, gs, now), g));
    let lanes_of = |picked: &[usize]| -> Vec<usize> {
        let mut gs_sorted: Vec<usize> = picked.to_vec();
        gs_sorted.sort_unstable();
        gs_sorted
            .iter()
            .flat_map(|&g| g * gs..(g + 1) * gs)
            .collect()
    };
    let fast_lanes = lanes_of(&order[..groups / 2]);
    let slow_lanes = lanes_of(&order[groups / 2..]);
    let mut fast = slice_context(w, &fast_lanes, id_fast);
    let mut slow = slice_context(w, &slow_lanes, id_slow);
    fast.divergent_tag = false;
    slow.divergent_tag = true;
    (fast, slow)
}
