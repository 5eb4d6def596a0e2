//! Whole-GPU cycle engine. Each simulated cycle moves the mesh one hop,
//! fills caches from arrived replies, services the memory controllers,
//! runs the per-pair reconfiguration checks, issues from every scheduler
//! unit, drains the load/store units, and dispatches at most one CTA.
//! Everything iterates in fixed order, so runs are bit-deterministic.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use crate::config::GpuConfig;
use crate::memsys::{
    self, Access, CacheState, CacheStats, CoalesceWindow, CoalescedAccess, McState,
    McStats, MemRequest, LINE_BYTES,
};
use crate::noc::{self, NocState, NodeKind, Packet, SubnetKind, REPLY_FLITS, REQ_FLITS};
use crate::predictor::MetricVector;
use crate::reconfig::{
    check_split, classify_divergent, direct_split, regroup_warps, should_migrate,
    PairMode, PairState, SplitPolicy, Transition,
};
use crate::smcore::{
    cta_dispatch, compact_done, rebuild_scoreboard, step_sm, MemoryPort, ResidentCta,
    SmCounters, SmState, WarpContext, WarpState,
};
use crate::workload::Kernel;
use crate::Error;

/// Instructions per L1I line: 8-byte encoding on 128-byte lines.
const INSTRS_PER_ILINE: u64 = LINE_BYTES / 8;

/// What the cross-warp coalescing window remembers about a recent line.
#[derive(Debug, Clone, Copy)]
enum WindowFate {
    /// The line hit in L1; data lands for everyone at this cycle.
    HitAt(u64),
    /// The line missed and an MSHR entry is (or was) in flight.
    Outstanding,
}

#[derive(Debug, Clone, Copy)]
struct LsuOp {
    line: u64,
    write: bool,
}

/// One load/store pipe in front of an L1 instance: a FIFO of line-granular
/// accesses, the cross-warp merge window, and the packets waiting to enter
/// the mesh. Drains one operation per cycle.
pub struct Lsu {
    queue: VecDeque<LsuOp>,
    window: CoalesceWindow<WindowFate>,
    egress: VecDeque<Packet>,
    pub actual_accesses: u64,
    pub window_merges: u64,
    pub retry_stall_cycles: u64,
}

impl Lsu {
    fn new(window: u64) -> Self {
        Lsu {
            queue: VecDeque::new(),
            window: CoalesceWindow::new(window),
            egress: VecDeque::new(),
            actual_accesses: 0,
            window_merges: 0,
            retry_stall_cycles: 0,
        }
    }
}

struct QueuePort<'a> {
    lsu: &'a mut Lsu,
}

impl MemoryPort for QueuePort<'_> {
    fn issue_load(
        &mut self,
        _sm: usize,
        _warp_slot: usize,
        accesses: &[CoalescedAccess],
        _now: u64,
    ) {
        for a in accesses {
            self.lsu.queue.push_back(LsuOp {
                line: a.line,
                write: false,
            });
        }
    }

    fn issue_store(&mut self, _sm: usize, accesses: &[CoalescedAccess], _now: u64) {
        for a in accesses {
            self.lsu.queue.push_back(LsuOp {
                line: a.line,
                write: true,
            });
        }
    }
}

/// Two sibling SMs and the resources they may share. In baseline mode the
/// pair is just a container for two independent units with private L1s; a
/// fused pair runs one scheduler unit over one double-associativity L1.
/// While split, both units share that fused L1 and its LSU.
pub struct PairUnit {
    pub pair_id: usize,
    pub state: PairState,
    pub sms: Vec<SmState>,
    pub l1d: Vec<CacheState<()>>,
    pub l1i: Vec<CacheState<()>>,
    pub lsu: Vec<Lsu>,
    /// Mesh node per cache instance (fused pairs re-home to the even node).
    home: Vec<u16>,
    /// Counters of scheduler units that were merged away at re-fuse time.
    retired: SmCounters,
}

impl PairUnit {
    fn cache_for_unit(&self, unit: usize) -> usize {
        if self.l1d.len() == 1 {
            0
        } else {
            unit
        }
    }

    fn shared_l1(&self) -> bool {
        self.l1d.len() == 1
    }

    fn live_lane_slots(&self) -> usize {
        self.sms
            .iter()
            .flat_map(|s| s.warps.iter())
            .filter(|w| w.state != WarpState::Done)
            .map(|w| w.width())
            .sum()
    }

    fn distinct_resident_ctas(&self) -> usize {
        let mut ids: Vec<u32> = self
            .sms
            .iter()
            .flat_map(|s| s.resident.iter().map(|r| r.cta))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

struct ReqMeta {
    pair: usize,
    cache_idx: usize,
    line: u64,
    write: bool,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GpuStats {
    pub dispatched_ctas: u64,
    pub completed_ctas: u64,
    /// Cycles an MC could not inject a ready reply into the mesh.
    pub mc_reply_stall_cycles: u64,
    /// Σ over cycles of resident-CTA entries, for mean occupancy.
    pub cta_residency_sum: u64,
    /// Σ over cycles of scheduler units that stepped.
    pub unit_cycles: u64,
    /// Σ over cycles of units frozen by an in-progress reconfiguration.
    pub frozen_unit_cycles: u64,
    /// Σ over cycles of issue-lane capacity across stepped units.
    pub lane_cycles: u64,
}

/// Workload-facing aggregate of every counter in the machine.
#[derive(Debug, Default, Clone, Copy)]
pub struct Totals {
    pub cycles: u64,
    pub issued_instrs: u64,
    pub thread_instructions: u64,
    pub active_thread_cycles: u64,
    pub inactive_thread_cycles: u64,
    pub idle_cycles: u64,
    pub issue_busy_cycles: u64,
    pub bubble_lane_cycles: u64,
    pub deficit_lane_cycles: u64,
    pub branches: u64,
    pub divergent_branches: u64,
    pub loads_issued: u64,
    pub stores_issued: u64,
    pub lane_mem_accesses: u64,
    pub coalesced_accesses: u64,
    pub actual_accesses: u64,
    pub window_merges: u64,
    pub retry_stall_cycles: u64,
    pub l1d: CacheStats,
    pub l1i: CacheStats,
    pub l2: CacheStats,
    pub mc: McStats,
    pub noc_injected_flits: u64,
    pub noc_delivered_packets: u64,
    pub noc_total_latency: u64,
    pub mc_reply_stall_cycles: u64,
    pub completed_ctas: u64,
    pub unit_cycles: u64,
    pub frozen_unit_cycles: u64,
    pub lane_cycles: u64,
    pub cta_residency_sum: u64,
    pub live_routers: u64,
}

impl Totals {
    pub fn ipc(&self) -> f64 {
        if self.cycles == 0 {
            0.0
        } else {
            self.thread_instructions as f64 / self.cycles as f64
        }
    }

    pub fn avg_noc_latency(&self) -> f64 {
        if self.noc_delivered_packets == 0 {
            0.0
        } else {
            self.noc_total_latency as f64 / self.noc_delivered_packets as f64
        }
    }

    pub fn sm_idle_fraction(&self) -> f64 {
        if self.unit_cycles == 0 {
            0.0
        } else {
            self.idle_cycles as f64 / self.unit_cycles as f64
        }
    }

    /// Lane-cycles lost to divergence bubbles plus inactive-lane deficit,
    /// normalised by total lane capacity.
    pub fn control_stall_fraction(&self) -> f64 {
        let lane_capacity = self.lane_cycles.max(1);
        (self.bubble_lane_cycles + self.deficit_lane_cycles) as f64 / lane_capacity as f64
    }
}

fn add_cache_stats(a: &mut CacheStats, b: &CacheStats) {
    a.accesses += b.accesses;
    a.hits += b.hits;
    a.misses += b.misses;
    a.merged_misses += b.merged_misses;
    a.mshr_full_events += b.mshr_full_events;
    a.store_accesses += b.store_accesses;
    a.store_hits += b.store_hits;
}

fn add_mc_stats(a: &mut McStats, b: &McStats) {
    a.serviced_reads += b.serviced_reads;
    a.serviced_writes += b.serviced_writes;
    a.l2_hits += b.l2_hits;
    a.l2_misses += b.l2_misses;
    a.enqueue_rejects += b.enqueue_rejects;
}

fn add_counters(a: &mut SmCounters, b: &SmCounters) {
    a.issued_instrs += b.issued_instrs;
    a.thread_instructions += b.thread_instructions;
    a.active_thread_cycles += b.active_thread_cycles;
    a.inactive_thread_cycles += b.inactive_thread_cycles;
    a.idle_cycles += b.idle_cycles;
    a.issue_busy_cycles += b.issue_busy_cycles;
    a.bubble_lane_cycles += b.bubble_lane_cycles;
    a.deficit_lane_cycles += b.deficit_lane_cycles;
    a.branches += b.branches;
    a.divergent_branches += b.divergent_branches;
    a.loads_issued += b.loads_issued;
    a.stores_issued += b.stores_issued;
    a.lane_mem_accesses += b.lane_mem_accesses;
    a.coalesced_accesses += b.coalesced_accesses;
}

fn dec_resident(sm: &mut SmState, cta: u32) {
    let r = sm
        .resident
        .iter_mut()
        .find(|r| r.cta == cta)
        .expect("moved warp belongs to a resident CTA");
    r.live_warps -= 1;
    if r.live_warps == 0 {
        // Warps moved away, not retired: drop the entry without an event.
        sm.resident.retain(|r| r.cta != cta);
    }
}

fn inc_resident(sm: &mut SmState, cta: u32, k: u32) {
    match sm.resident.iter_mut().find(|r| r.cta == cta) {
        Some(r) => r.live_warps += k,
        None => sm.resident.push(ResidentCta {
            cta,
            live_warps: k,
            barrier_waiting: 0,
        }),
    }
}

fn resolve_pair_line(pair: &mut PairUnit, line: u64, now: u64) {
    for sm in pair.sms.iter_mut() {
        for slot in 0..sm.warps.len() {
            if sm.warps[slot].resolve_line(line, now) {
                sm.scoreboard.clear(slot);
            }
        }
    }
}

/// The machine. Borrows its configuration and pre-generated kernel; a run
/// owns all mutable state so restarts just build a fresh one.
pub struct Gpu<'a> {
    pub cfg: &'a GpuConfig,
    pub kernel: &'a Kernel,
    pub fused: bool,
    pub policy: Option<SplitPolicy>,
    pub cycle: u64,
    pub pairs: Vec<PairUnit>,
    pub noc: NocState,
    pub mcs: Vec<McState>,
    /// Requests delivered by the mesh but not yet accepted by the bounded
    /// MC queue (request-side backlog).
    mc_spill: Vec<VecDeque<MemRequest>>,
    pub pending_ctas: VecDeque<u32>,
    next_req_id: u64,
    reqs: HashMap<u64, ReqMeta>,
    /// (cycle, pair, line) L1-hit wake-ups.
    wakes: BinaryHeap<Reverse<(u64, usize, u64)>>,
    pub stats: GpuStats,
    pub first_cta_done_at: Option<u64>,
    dispatch_cursor: usize,
    /// When present, per-source-thread issued-instruction counts keyed by
    /// (cta, source warp, source lane) — the conservation audit.
    pub thread_counts: Option<HashMap<(u32, u16, u8), u64>>,
}

impl<'a> Gpu<'a> {
    pub fn new(
        cfg: &'a GpuConfig,
        kernel: &'a Kernel,
        fused: bool,
        policy: Option<SplitPolicy>,
    ) -> Result<Self, Error> {
        cfg.validate()?;
        if fused && !cfg.sm_count.is_multiple_of(2) {
            return Err(Error::Config(
                "fused machines need an even SM count".into(),
            ));
        }
        if policy.is_some() && !fused {
            return Err(Error::Config(
                "dynamic splitting only applies to fused machines".into(),
            ));
        }
        let fused_pairs: Vec<usize> = if fused {
            (0..cfg.sm_count / 2).collect()
        } else {
            Vec::new()
        };
        let topo = noc::build_topology(cfg.sm_count, cfg.mc_count, &fused_pairs)?;
        let noc = NocState::new(topo, cfg.perfect_noc);
        let s = &cfg.sm;
        let t = &cfg.timing;
        let new_l1d = || {
            CacheState::<()>::new(
                s.l1d_kb as u64 * 1024,
                s.l1d_ways as usize,
                LINE_BYTES,
                t.l1_hit_latency,
                s.mshr_entries as usize,
                s.mshr_merge_cap as usize,
            )
        };
        let new_l1i = || {
            CacheState::<()>::new(
                s.l1i_kb as u64 * 1024,
                s.l1i_ways as usize,
                LINE_BYTES,
                t.l1_hit_latency,
                0,
                0,
            )
        };
        let mut pairs = Vec::new();
        let mut sm = 0usize;
        let mut pair_id = 0usize;
        while sm < cfg.sm_count {
            let partner = (sm + 1 < cfg.sm_count).then_some(sm + 1);
            let pair = if fused {
                debug_assert!(partner.is_some(), "even SM count");
                PairUnit {
                    pair_id,
                    state: PairState::new(PairMode::Fused),
                    sms: vec![SmState::new(sm, 2 * s.max_ctas, 2 * s.max_threads)],
                    l1d: vec![memsys::fuse_l1(new_l1d(), new_l1d())],
                    l1i: vec![memsys::fuse_l1(new_l1i(), new_l1i())],
                    lsu: vec![Lsu::new(t.coalesce_window as u64)],
                    home: vec![noc.topo.sm_home(sm)],
                    retired: SmCounters::default(),
                }
            } else {
                let mut sms = vec![SmState::new(sm, s.max_ctas, s.max_threads)];
                let mut l1d = vec![new_l1d()];
                let mut l1i = vec![new_l1i()];
                let mut lsu = vec![Lsu::new(t.coalesce_window as u64)];
                let mut home = vec![noc.topo.sm_home(sm)];
                if let Some(p) = partner {
                    sms.push(SmState::new(p, s.max_ctas, s.max_threads));
                    l1d.push(new_l1d());
                    l1i.push(new_l1i());
                    lsu.push(Lsu::new(t.coalesce_window as u64));
                    home.push(noc.topo.sm_home(p));
                }
                PairUnit {
                    pair_id,
                    state: PairState::new(PairMode::Baseline),
                    sms,
                    l1d,
                    l1i,
                    lsu,
                    home,
                    retired: SmCounters::default(),
                }
            };
            pairs.push(pair);
            sm += 2;
            pair_id += 1;
        }
        let mcs = (0..cfg.mc_count)
            .map(|_| {
                McState::new(
                    s.l2_slice_kb as u64 * 1024,
                    s.l2_ways as usize,
                    LINE_BYTES,
                    cfg.mc_queue_cap,
                    t.l2_hit_latency,
                    t.dram_latency,
                )
            })
            .collect();
        let mc_spill = (0..cfg.mc_count).map(|_| VecDeque::new()).collect();
        Ok(Gpu {
            cfg,
            kernel,
            fused,
            policy,
            cycle: 0,
            pairs,
            noc,
            mcs,
            mc_spill,
            pending_ctas: (0..kernel.ctas.len() as u32).collect(),
            next_req_id: 0,
            reqs: HashMap::new(),
            wakes: BinaryHeap::new(),
            stats: GpuStats::default(),
            first_cta_done_at: None,
            dispatch_cursor: 0,
            thread_counts: None,
        })
    }

    pub fn done(&self) -> bool {
        self.pending_ctas.is_empty()
            && self
                .pairs
                .iter()
                .all(|p| p.sms.iter().all(|s| s.all_done()))
    }

    pub fn run_to_completion(&mut self, max_cycles: u64) -> Result<(), Error> {
        while !self.done() {
            if self.cycle >= max_cycles {
                return Err(Error::Kernel(format!(
                    "simulation exceeded {max_cycles} cycles without finishing"
                )));
            }
            self.step();
        }
        Ok(())
    }

    pub fn step(&mut self) {
        let now = self.cycle;
        // Mesh moves one hop; arrived packets land in caches / MC queues.
        for pkt in self.noc.step(now) {
            self.handle_delivery(pkt, now);
        }
        // L1 hits whose latency elapsed this cycle.
        while let Some(&Reverse((t, p, line))) = self.wakes.peek() {
            if t > now {
                break;
            }
            self.wakes.pop();
            resolve_pair_line(&mut self.pairs[p], line, now);
        }
        // Memory controllers: backlog → queue, service one, push one reply.
        for j in 0..self.mcs.len() {
            while !self.mc_spill[j].is_empty() && self.mcs[j].queue_has_space() {
                let req = self.mc_spill[j].pop_front().unwrap();
                let ok = self.mcs[j].try_enqueue(req);
                debug_assert!(ok);
            }
            self.mcs[j].service_one(now);
            if let Some(req) = self.mcs[j].ready_reply(now) {
                let pkt = Packet {
                    id: req.id,
                    src: self.noc.topo.mc_node(j),
                    dst: req.src_node,
                    flits: REPLY_FLITS,
                    subnet: SubnetKind::Reply,
                    inject_cycle: now,
                };
                if self.noc.inject(now, pkt) {
                    self.mcs[j].take_ready_reply(now);
                } else {
                    self.stats.mc_reply_stall_cycles += 1;
                }
            }
        }
        // Reconfiguration checks before issue, so a split takes effect on
        // the very cycle it is decided.
        if self.policy.is_some() {
            for p in 0..self.pairs.len() {
                self.pair_dynamics(p, now);
            }
        }
        for p in 0..self.pairs.len() {
            self.step_pair(p, now);
        }
        self.try_dispatch();
        self.stats.cta_residency_sum += self
            .pairs
            .iter()
            .flat_map(|p| p.sms.iter())
            .map(|s| s.resident.len() as u64)
            .sum::<u64>();
        self.cycle += 1;
    }

    fn handle_delivery(&mut self, pkt: Packet, now: u64) {
        match pkt.subnet {
            SubnetKind::Req => {
                let meta = self.reqs.get(&pkt.id).expect("request metadata");
                let (line, write) = (meta.line, meta.write);
                let j = match self.noc.topo.nodes[pkt.dst as usize] {
                    NodeKind::Mc(j) => j as usize,
                    other => panic!("request delivered to non-MC node {other:?}"),
                };
                self.mc_spill[j].push_back(MemRequest {
                    id: pkt.id,
                    line,
                    write,
                    src_node: pkt.src,
                    issue_cycle: now,
                });
                if write {
                    // Fire-and-forget: no reply will reference this id.
                    self.reqs.remove(&pkt.id);
                }
            }
            SubnetKind::Reply => {
                let meta = self.reqs.remove(&pkt.id).expect("reply metadata");
                let pair = &mut self.pairs[meta.pair];
                let _ = pair.l1d[meta.cache_idx].fill(meta.line);
                resolve_pair_line(pair, meta.line, now);
            }
        }
    }

    fn pair_dynamics(&mut self, p: usize, now: u64) {
        let params = &self.cfg.reconfig;
        if now < self.pairs[p].state.frozen_until {
            return;
        }
        match self.pairs[p].state.mode {
            PairMode::Fused => {
                if now - self.pairs[p].state.last_check < params.check_period {
                    return;
                }
                let pair = &mut self.pairs[p];
                pair.state.last_check = now;
                pair.state.bin = pair.sms[0]
                    .warps
                    .iter()
                    .filter(|w| classify_divergent(w, now, params))
                    .map(|w| w.warp_id)
                    .collect();
                let live = pair.sms[0].live_warp_count();
                if check_split(pair.state.bin.len(), live, params.split_threshold) {
                    self.execute_split(p, now);
                }
            }
            PairMode::SplitRunning => {
                let pair = &mut self.pairs[p];
                let sm1_live_divergent = pair.sms[1]
                    .warps
                    .iter()
                    .any(|w| w.divergent_tag && w.state != WarpState::Done);
                if !sm1_live_divergent {
                    self.execute_refuse(p, now);
                    return;
                }
                if now - pair.state.last_migration >= params.migration_period {
                    let idle_now = pair.sms[1].counters.idle_cycles;
                    let idle_delta = idle_now - pair.state.sm1_idle_snapshot;
                    pair.state.last_migration = now;
                    pair.state.sm1_idle_snapshot = idle_now;
                    let ready0 = pair.sms[0].ready_warp_count(now);
                    if should_migrate(
                        idle_delta,
                        params.migration_period,
                        ready0,
                        params.migration_idle_frac,
                    ) {
                        self.migrate_one_warp(p);
                    }
                }
            }
            PairMode::Baseline => {}
        }
    }

    /// Moves the lowest-id ready warp from SM_0 to SM_1 to balance a pair
    /// whose divergent side drained early.
    fn migrate_one_warp(&mut self, p: usize) {
        let pair = &mut self.pairs[p];
        let now = self.cycle;
        let pick = pair.sms[0]
            .warps
            .iter()
            .enumerate()
            .filter(|(s, w)| w.issueable(now) && !pair.sms[0].scoreboard.is_pending(*s))
            .min_by_key(|(_, w)| w.warp_id)
            .map(|(s, _)| s);
        let Some(slot) = pick else { return };
        let w = pair.sms[0].warps.remove(slot);
        dec_resident(&mut pair.sms[0], w.cta);
        inc_resident(&mut pair.sms[1], w.cta, 1);
        pair.sms[1].warps.push(w);
        rebuild_scoreboard(&mut pair.sms[0]);
        rebuild_scoreboard(&mut pair.sms[1]);
    }

    fn execute_split(&mut self, p: usize, now: u64) {
        let policy = self.policy.expect("split requires a dynamic policy");
        let params = &self.cfg.reconfig;
        let pair = &mut self.pairs[p];
        let bin = std::mem::take(&mut pair.state.bin);
        let lanes_before = pair.live_lane_slots();
        pair.state.transition(now, Transition::Split);
        pair.state.frozen_until = now + params.split_cost;
        pair.state.last_migration = now;
        pair.state.sm1_idle_snapshot = 0;

        let budget_ctas = pair.sms[0].max_ctas_eff;
        let budget_threads = pair.sms[0].max_threads_eff;
        let mut sm1 = SmState::new(pair.pair_id * 2 + 1, budget_ctas, budget_threads);

        let mut keep: Vec<WarpContext> = Vec::new();
        let mut moved: Vec<WarpContext> = Vec::new();
        for w in pair.sms[0].warps.drain(..) {
            if bin.contains(&w.warp_id) {
                moved.push(w);
            } else {
                keep.push(w);
            }
        }
        pair.sms[0].warps = keep;
        for mut w in moved {
            let cta = w.cta;
            dec_resident(&mut pair.sms[0], cta);
            if w.width() == 64 {
                match policy {
                    SplitPolicy::Direct => {
                        let id_lo = sm1.next_warp_id;
                        let id_hi = sm1.next_warp_id + 1;
                        sm1.next_warp_id += 2;
                        let (a, b) = direct_split(&w, id_lo, id_hi);
                        inc_resident(&mut sm1, cta, 2);
                        sm1.warps.push(a);
                        sm1.warps.push(b);
                    }
                    SplitPolicy::Regroup => {
                        let id_fast = pair.sms[0].next_warp_id;
                        pair.sms[0].next_warp_id += 1;
                        let id_slow = sm1.next_warp_id;
                        sm1.next_warp_id += 1;
                        let (fast, slow) =
                            regroup_warps(&w, params.group_size, now, id_fast, id_slow);
                        inc_resident(&mut pair.sms[0], cta, 1);
                        pair.sms[0].warps.push(fast);
                        inc_resident(&mut sm1, cta, 1);
                        sm1.warps.push(slow);
                    }
                }
            } else {
                w.divergent_tag = true;
                inc_resident(&mut sm1, cta, 1);
                sm1.warps.push(w);
            }
        }
        rebuild_scoreboard(&mut pair.sms[0]);
        rebuild_scoreboard(&mut sm1);
        pair.sms.push(sm1);
        assert_eq!(
            pair.live_lane_slots(),
            lanes_before,
            "splitting conserves lane slots"
        );
    }

    fn execute_refuse(&mut self, p: usize, now: u64) {
        let pair = &mut self.pairs[p];
        let lanes_before = pair.live_lane_slots();
        pair.state.transition(now, Transition::Refuse);
        let mut sm1 = pair.sms.pop().expect("split pair has a second unit");
        compact_done(&mut sm1);
        add_counters(&mut pair.retired, &sm1.counters);
        for mut w in sm1.warps.drain(..) {
            w.warp_id = pair.sms[0].next_warp_id;
            pair.sms[0].next_warp_id += 1;
            w.divergent_tag = false;
            inc_resident(&mut pair.sms[0], w.cta, 1);
            pair.sms[0].warps.push(w);
        }
        rebuild_scoreboard(&mut pair.sms[0]);
        // Divergence collection restarts from scratch after re-fusing.
        pair.state.last_check = now;
        assert_eq!(
            pair.live_lane_slots(),
            lanes_before,
            "re-fusing conserves lane slots"
        );
    }

    fn step_pair(&mut self, p: usize, now: u64) {
        let frozen = self.pairs[p].state.frozen_until > now;
        let unit_count = self.pairs[p].sms.len() as u64;
        if frozen {
            self.stats.frozen_unit_cycles += unit_count;
        } else {
            self.stats.unit_cycles += unit_count;
            self.stats.lane_cycles += if self.pairs[p].shared_l1() {
                64
            } else {
                32 * unit_count
            };
            let mut completions: Vec<(usize, u32)> = Vec::new();
            for unit in 0..self.pairs[p].sms.len() {
                let ci = self.pairs[p].cache_for_unit(unit);
                let pair = &mut self.pairs[p];
                let ev = {
                    // sms[unit] and lsu[ci] are disjoint fields of the pair.
                    let PairUnit { sms, lsu, .. } = pair;
                    let mut port = QueuePort { lsu: &mut lsu[ci] };
                    step_sm(
                        &mut sms[unit],
                        &self.kernel.ctas,
                        &self.cfg.sm,
                        &self.cfg.timing,
                        now,
                        &mut port,
                    )
                };
                if let Some(rec) = ev.issued {
                    let iline = rec.pc as u64 / INSTRS_PER_ILINE;
                    let l1i = &mut pair.l1i[ci];
                    if !l1i.lookup_touch_public(iline) {
                        l1i.insert(iline);
                    }
                    if let Some(counts) = self.thread_counts.as_mut() {
                        let w = &pair.sms[unit].warps[rec.slot];
                        for i in 0..w.width() {
                            if rec.active_mask & (1u64 << i) != 0 {
                                let r = w.lane_refs[i];
                                *counts.entry((w.cta, r.warp, r.lane)).or_insert(0) += 1;
                            }
                        }
                    }
                }
                for cta in ev.completed_ctas {
                    completions.push((unit, cta));
                }
            }
            for (unit, cta) in completions {
                self.on_cta_complete(p, unit, cta, now);
            }
        }
        // Memory keeps moving even while the pair reorganises.
        for ci in 0..self.pairs[p].lsu.len() {
            self.drain_lsu(p, ci, now);
            if let Some(pkt) = self.pairs[p].lsu[ci].egress.front_mut() {
                pkt.inject_cycle = now;
                let pkt = *pkt;
                if self.noc.inject(now, pkt) {
                    self.pairs[p].lsu[ci].egress.pop_front();
                }
            }
        }
    }

    fn on_cta_complete(&mut self, p: usize, unit: usize, cta: u32, now: u64) {
        let pair = &mut self.pairs[p];
        let elsewhere = pair
            .sms
            .iter()
            .enumerate()
            .any(|(u, s)| u != unit && s.resident.iter().any(|r| r.cta == cta));
        if !elsewhere {
            self.stats.completed_ctas += 1;
            if self.first_cta_done_at.is_none() {
                self.first_cta_done_at = Some(now);
            }
        }
        compact_done(&mut self.pairs[p].sms[unit]);
    }

    fn alloc_request(&mut self, p: usize, ci: usize, line: u64, write: bool) -> Packet {
        let id = self.next_req_id;
        self.next_req_id += 1;
        self.reqs.insert(
            id,
            ReqMeta {
                pair: p,
                cache_idx: ci,
                line,
                write,
            },
        );
        let mc = memsys::mc_for_line(line, self.mcs.len());
        Packet {
            id,
            src: self.pairs[p].home[ci],
            dst: self.noc.topo.mc_node(mc),
            flits: REQ_FLITS,
            subnet: SubnetKind::Req,
            inject_cycle: 0,
        }
    }

    fn drain_lsu(&mut self, p: usize, ci: usize, now: u64) {
        let pair = &mut self.pairs[p];
        let Some(&op) = pair.lsu[ci].queue.front() else {
            return;
        };
        if op.write {
            pair.lsu[ci].queue.pop_front();
            pair.lsu[ci].actual_accesses += 1;
            pair.l1d[ci].store_access(op.line);
            let pkt = self.alloc_request(p, ci, op.line, true);
            self.pairs[p].lsu[ci].egress.push_back(pkt);
            return;
        }
        let fate = pair.lsu[ci].window.lookup(op.line, now).copied();
        match fate {
            Some(WindowFate::HitAt(t)) => {
                pair.lsu[ci].queue.pop_front();
                pair.lsu[ci].window_merges += 1;
                self.wakes.push(Reverse((t.max(now + 1), p, op.line)));
            }
            Some(WindowFate::Outstanding) => {
                if pair.l1d[ci].attach_waiter(op.line, ()) {
                    pair.lsu[ci].queue.pop_front();
                    pair.lsu[ci].window_merges += 1;
                } else {
                    self.fresh_access(p, ci, op.line, now);
                }
            }
            None => self.fresh_access(p, ci, op.line, now),
        }
    }

    fn fresh_access(&mut self, p: usize, ci: usize, line: u64, now: u64) {
        let pair = &mut self.pairs[p];
        match pair.l1d[ci].load_access(line, ()) {
            Access::Hit => {
                pair.lsu[ci].queue.pop_front();
                pair.lsu[ci].actual_accesses += 1;
                let t = now + pair.l1d[ci].hit_latency as u64;
                pair.lsu[ci].window.record(line, now, WindowFate::HitAt(t));
                self.wakes.push(Reverse((t, p, line)));
            }
            Access::MissNew => {
                pair.lsu[ci].queue.pop_front();
                pair.lsu[ci].actual_accesses += 1;
                pair.lsu[ci]
                    .window
                    .record(line, now, WindowFate::Outstanding);
                let pkt = self.alloc_request(p, ci, line, false);
                self.pairs[p].lsu[ci].egress.push_back(pkt);
            }
            Access::MissMerged => {
                pair.lsu[ci].queue.pop_front();
                pair.lsu[ci].actual_accesses += 1;
            }
            Access::MshrFull => {
                // Head-of-line retry next cycle.
                pair.lsu[ci].retry_stall_cycles += 1;
            }
        }
    }

    fn try_dispatch(&mut self) {
        let Some(&cta) = self.pending_ctas.front() else {
            return;
        };
        let threads_needed =
            (self.kernel.ctas[cta as usize].warps.len() * 32) as u32;
        for k in 0..self.pairs.len() {
            let p = (self.dispatch_cursor + k) % self.pairs.len();
            let pair = &mut self.pairs[p];
            let placed = if pair.shared_l1() {
                // Shared-L1 family (fused or currently split): capacity is
                // pooled at pair level, new CTAs always enter SM_0 wide.
                let threads: u32 = pair.sms.iter().map(|s| s.resident_threads()).sum();
                let ctas = pair.distinct_resident_ctas() as u32;
                if ctas < pair.sms[0].max_ctas_eff
                    && threads + threads_needed <= pair.sms[0].max_threads_eff
                    && pair.state.frozen_until <= self.cycle
                {
                    cta_dispatch(&mut pair.sms[0], &self.kernel.ctas, cta, true)
                } else {
                    false
                }
            } else {
                pair.sms
                    .iter_mut()
                    .any(|sm| cta_dispatch(sm, &self.kernel.ctas, cta, false))
            };
            if placed {
                self.pending_ctas.pop_front();
                self.stats.dispatched_ctas += 1;
                self.dispatch_cursor = (p + 1) % self.pairs.len();
                return;
            }
        }
    }

    pub fn totals(&self) -> Totals {
        let mut t = Totals {
            cycles: self.cycle,
            live_routers: self.noc.topo.live_router_count() as u64,
            noc_injected_flits: self.noc.stats.injected_flits,
            noc_delivered_packets: self.noc.stats.delivered_packets,
            noc_total_latency: self.noc.stats.total_latency,
            mc_reply_stall_cycles: self.stats.mc_reply_stall_cycles,
            completed_ctas: self.stats.completed_ctas,
            unit_cycles: self.stats.unit_cycles,
            frozen_unit_cycles: self.stats.frozen_unit_cycles,
            lane_cycles: self.stats.lane_cycles,
            cta_residency_sum: self.stats.cta_residency_sum,
            ..Totals::default()
        };
        let mut c = SmCounters::default();
        for pair in &self.pairs {
            add_counters(&mut c, &pair.retired);
            for sm in &pair.sms {
                add_counters(&mut c, &sm.counters);
            }
            for l1 in &pair.l1d {
                add_cache_stats(&mut t.l1d, &l1.stats);
            }
            for l1 in &pair.l1i {
                add_cache_stats(&mut t.l1i, &l1.stats);
            }
            for lsu in &pair.lsu {
                t.actual_accesses += lsu.actual_accesses;
                t.window_merges += lsu.window_merges;
                t.retry_stall_cycles += lsu.retry_stall_cycles;
            }
        }
        for mc in &self.mcs {
            add_mc_stats(&mut t.mc, &mc.stats);
            add_cache_stats(&mut t.l2, &mc.l2.stats);
        }
        t.issued_instrs = c.issued_instrs;
        t.thread_instructions = c.thread_instructions;
        t.active_thread_cycles = c.active_thread_cycles;
        t.inactive_thread_cycles = c.inactive_thread_cycles;
        t.idle_cycles = c.idle_cycles;
        t.issue_busy_cycles = c.issue_busy_cycles;
        t.bubble_lane_cycles = c.bubble_lane_cycles;
        t.deficit_lane_cycles = c.deficit_lane_cycles;
        t.branches = c.branches;
        t.divergent_branches = c.divergent_branches;
        t.loads_issued = c.loads_issued;
        t.stores_issued = c.stores_issued;
        t.lane_mem_accesses = c.lane_mem_accesses;
        t.coalesced_accesses = c.coalesced_accesses;
        t
    }

    /// The sampled feature vector the scalability predictor consumes.
    pub fn metric_vector(&self) -> MetricVector {
        let t = self.totals();
        let ratio = |num: u64, den: u64| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        MetricVector {
            control_divergent: ratio(
                t.inactive_thread_cycles,
                t.active_thread_cycles + t.inactive_thread_cycles,
            ),
            coalescing: ratio(t.actual_accesses, t.lane_mem_accesses),
            l1d_miss: ratio(t.l1d.misses, t.l1d.accesses),
            l1i_miss: ratio(t.l1i.misses, t.l1i.accesses),
            // No constant cache in this machine; the feature stays zero.
            l1c_miss: 0.0,
            mshr: ratio(t.l1d.merged_misses, t.l1d.misses),
            load_inst_rate: ratio(t.loads_issued, t.issued_instrs),
            store_inst_rate: ratio(t.stores_issued, t.issued_instrs),
            noc: ratio(
                t.noc_injected_flits,
                self.cycle * t.live_routers,
            ),
            concurrent_cta: ratio(t.cta_residency_sum, t.unit_cycles),
        }
    }

    /// Ordered reconfiguration event log: (cycle, pair, label).
    pub fn event_log(&self) -> Vec<(u64, usize, &'static str)> {
        let mut out: Vec<(u64, usize, &'static str)> = self
            .pairs
            .iter()
            .flat_map(|p| {
                p.state
                    .events
                    .iter()
                    .map(move |&(c, t)| (c, p.pair_id, t.label()))
            })
            .collect();
        out.sort();
        out
    }
}
