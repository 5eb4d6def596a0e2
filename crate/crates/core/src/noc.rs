//! 2D-mesh interconnect with request/reply subnets, XY routing, a 2-stage
//! router pipeline, finite input queues, single-cycle bypass routers for
//! fused SM pairs, and a perfect-network toggle.

use crate::Error;
use std::collections::VecDeque;

pub const QUEUE_CAP_FLITS: u32 = 8;
pub const REQ_FLITS: u32 = 2;
pub const REPLY_FLITS: u32 = 10;

const DIRS: usize = 4; // N, E, S, W
const PORTS: usize = DIRS + 1; // + local
const LOCAL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Sm(u16),
    Mc(u16),
    /// Router of the odd half of a fused pair: single-cycle pass-through,
    /// no longer a traffic endpoint.
    Bypassed,
    /// Filler cell when the mesh is larger than sm+mc; routes traffic but
    /// hosts nothing.
    Unused,
}

#[derive(Debug, Clone)]
pub struct MeshTopology {
    pub width: usize,
    pub height: usize,
    pub nodes: Vec<NodeKind>,
    sm_home: Vec<u16>,
    mc_node: Vec<u16>,
}

/// Smallest w×h with w×h ≥ total and |w−h| ≤ 1 (w ≥ h).
pub fn mesh_dims(total: usize) -> (usize, usize) {
    let mut k = 1usize;
    loop {
        if k * k >= total {
            return (k, k);
        }
        if k * (k + 1) >= total {
            return (k + 1, k);
        }
        k += 1;
    }
}

impl MeshTopology {
    #[inline]
    pub fn node_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn coords(&self, node: u16) -> (usize, usize) {
        (node as usize % self.width, node as usize / self.width)
    }

    #[inline]
    pub fn node_id(&self, x: usize, y: usize) -> u16 {
        (y * self.width + x) as u16
    }

    /// Live node a given SM's traffic terminates at (its partner's router
    /// when the SM sits behind a bypassed one).
    #[inline]
    pub fn sm_home(&self, sm: usize) -> u16 {
        self.sm_home[sm]
    }

    #[inline]
    pub fn mc_node(&self, mc: usize) -> u16 {
        self.mc_node[mc]
    }

    pub fn mc_count(&self) -> usize {
        self.mc_node.len()
    }

    #[inline]
    pub fn is_bypassed(&self, node: u16) -> bool {
        self.nodes[node as usize] == NodeKind::Bypassed
    }

    /// Router pipeline charge in cycles.
    #[inline]
    pub fn charge(&self, node: u16) -> u64 {
        if self.is_bypassed(node) {
            1
        } else {
            2
        }
    }

    pub fn live_router_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n, NodeKind::Bypassed))
            .count()
    }
}

/// Lays out `sm_count` SMs and `mc_count` MCs on the smallest near-square
/// mesh. MCs sit on the two perimeter columns, rows spread evenly; SM cells
/// fill row-major so pair partners (2i, 2i+1) land adjacent. Each fused
/// pair's odd node becomes a bypass router and its traffic re-homes to the
/// even partner.
pub fn build_topology(
    sm_count: usize,
    mc_count: usize,
    fused_pairs: &[usize],
) -> Result<MeshTopology, Error> {
    if sm_count == 0 || mc_count == 0 {
        return Err(Error::Config(
            "topology needs at least one SM and one MC".into(),
        ));
    }
    let (width, height) = mesh_dims(sm_count + mc_count);
    let per_left = mc_count.div_ceil(2);
    let per_right = mc_count / 2;
    if per_left > height {
        return Err(Error::Config(format!(
            "cannot place {mc_count} MCs on {height}-row perimeter columns"
        )));
    }
    let mut nodes = vec![NodeKind::Unused; width * height];
    let mut mc_node = vec![0u16; mc_count];
    let side_row = |idx: usize, count: usize| -> usize {
        if count <= 1 {
            height / 2
        } else {
            idx * (height - 1) / (count - 1)
        }
    };
    for (j, home) in mc_node.iter_mut().enumerate() {
        let (x, row) = if j.is_multiple_of(2) {
            (0, side_row(j / 2, per_left))
        } else {
            (width - 1, side_row(j / 2, per_right))
        };
        let id = (row * width + x) as u16;
        if nodes[id as usize] != NodeKind::Unused {
            return Err(Error::Config(format!(
                "MC placement collision at node {id}"
            )));
        }
        nodes[id as usize] = NodeKind::Mc(j as u16);
        *home = id;
    }
    let mut sm_home = vec![0u16; sm_count];
    let mut next_sm = 0usize;
    for (id, slot) in nodes.iter_mut().enumerate() {
        if next_sm == sm_count {
            break;
        }
        if *slot == NodeKind::Unused {
            *slot = NodeKind::Sm(next_sm as u16);
            sm_home[next_sm] = id as u16;
            next_sm += 1;
        }
    }
    if next_sm < sm_count {
        return Err(Error::Config(format!(
            "mesh {width}x{height} cannot host {sm_count} SMs + {mc_count} MCs"
        )));
    }
    let mut topo = MeshTopology {
        width,
        height,
        nodes,
        sm_home,
        mc_node,
    };
    for &pair in fused_pairs {
        let even = 2 * pair;
        let odd = even + 1;
        if odd >= sm_count {
            return Err(Error::Config(format!("fused pair {pair} out of range")));
        }
        let (ex, ey) = topo.coords(topo.sm_home[even]);
        let (ox, oy) = topo.coords(topo.sm_home[odd]);
        if ex.abs_diff(ox) + ey.abs_diff(oy) != 1 {
            return Err(Error::Config(format!(
                "fused pair {pair} is not mesh-adjacent"
            )));
        }
        let odd_node = topo.sm_home[odd];
        topo.nodes[odd_node as usize] = NodeKind::Bypassed;
        topo.sm_home[odd] = topo.sm_home[even];
    }
    Ok(topo)
}

/// Deterministic X-then-Y path: the nodes entered after `src`, ending at
/// `dst`. Empty when src == dst.
pub fn route(topo: &MeshTopology, src: u16, dst: u16) -> Vec<u16> {
    let (mut x, mut y) = topo.coords(src);
    let (dx, dy) = topo.coords(dst);
    let mut hops = Vec::new();
    while x != dx {
        x = if dx > x { x + 1 } else { x - 1 };
        hops.push(topo.node_id(x, y));
    }
    while y != dy {
        y = if dy > y { y + 1 } else { y - 1 };
        hops.push(topo.node_id(x, y));
    }
    hops
}

/// Sum of router pipeline charges along the XY path.
pub fn path_charge(topo: &MeshTopology, src: u16, dst: u16) -> u64 {
    route(topo, src, dst).iter().map(|&n| topo.charge(n)).sum()
}

/// Head-latency closed form for an uncontended path.
pub fn uncontended_latency(topo: &MeshTopology, src: u16, dst: u16, flits: u32) -> u64 {
    if src == dst {
        return 0;
    }
    path_charge(topo, src, dst) + flits as u64 - 1
}

/// Mean SM↔MC path charge over every (live SM home, MC) pair; fused
/// topologies score lower because bypassed routers charge half.
pub fn mean_sm_mc_charge(topo: &MeshTopology, sm_count: usize) -> f64 {
    let mut homes: Vec<u16> = (0..sm_count).map(|s| topo.sm_home(s)).collect();
    homes.dedup();
    let mut total = 0u64;
    let mut n = 0u64;
    for &h in &homes {
        for &m in &topo.mc_node {
            total += path_charge(topo, h, m) + path_charge(topo, m, h);
            n += 2;
        }
    }
    total as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubnetKind {
    Req,
    Reply,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    pub id: u64,
    pub src: u16,
    pub dst: u16,
    pub flits: u32,
    pub subnet: SubnetKind,
    pub inject_cycle: u64,
}

#[derive(Debug, Clone)]
struct Flight {
    pkt: Packet,
    /// Cycle the router stage at the current node completes.
    stage_done: u64,
}

#[derive(Debug, Clone, Default)]
struct Port {
    q: VecDeque<Flight>,
    occ_flits: u32,
}

#[derive(Debug, Clone)]
struct SubnetState {
    ports: Vec<Port>,        // node × PORTS
    out_busy_until: Vec<u64>, // node × PORTS (4 links + ejection)
    /// Last input granted each output; arbitration resumes after it.
    rr_grant: Vec<u8>, // node × PORTS
}

#[derive(Debug, Clone, Default)]
pub struct NocStats {
    pub injected_packets: u64,
    pub injected_flits: u64,
    pub delivered_packets: u64,
    pub total_latency: u64,
    pub inject_attempts: Vec<u64>,
    pub inject_stalls: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct NocState {
    pub topo: MeshTopology,
    pub perfect: bool,
    sub: [SubnetState; 2],
    /// (deliver_cycle, packet), kept sorted by deliver cycle.
    pending: Vec<(u64, Packet)>,
    in_flight: u64,
    pub stats: NocStats,
}

impl NocState {
    pub fn new(topo: MeshTopology, perfect: bool) -> Self {
        let n = topo.node_count();
        let make = || SubnetState {
            ports: (0..n * PORTS).map(|_| Port::default()).collect(),
            out_busy_until: vec![0; n * PORTS],
            rr_grant: vec![0; n * PORTS],
        };
        NocState {
            topo,
            perfect,
            sub: [make(), make()],
            pending: Vec::new(),
            in_flight: 0,
            stats: NocStats {
                inject_attempts: vec![0; n],
                inject_stalls: vec![0; n],
                ..NocStats::default()
            },
        }
    }

    pub fn in_flight(&self) -> u64 {
        self.in_flight
    }

    pub fn idle(&self) -> bool {
        self.in_flight == 0
    }

    fn schedule_delivery(&mut self, at: u64, pkt: Packet) {
        let pos = self.pending.partition_point(|&(c, _)| c <= at);
        self.pending.insert(pos, (at, pkt));
    }

    /// Queues `pkt` at its source router's local port. Returns false
    /// (stalled) when the port has no flit space; MC-side stalls of the
    /// reply subnet are the interconnect stalls the harness reports.
    pub fn inject(&mut self, now: u64, pkt: Packet) -> bool {
        debug_assert!(!self.topo.is_bypassed(pkt.src));
        debug_assert!(!self.topo.is_bypassed(pkt.dst));
        self.stats.inject_attempts[pkt.src as usize] += 1;
        if self.perfect {
            self.accept(pkt);
            self.schedule_delivery(now + 1, pkt);
            return true;
        }
        if pkt.src == pkt.dst {
            self.accept(pkt);
            self.schedule_delivery(now, pkt);
            return true;
        }
        let s = pkt.subnet as usize;
        let port = &mut self.sub[s].ports[pkt.src as usize * PORTS + LOCAL];
        if port.occ_flits >= QUEUE_CAP_FLITS {
            self.stats.inject_stalls[pkt.src as usize] += 1;
            return false;
        }
        port.occ_flits += pkt.flits;
        port.q.push_back(Flight {
            pkt,
            stage_done: now,
        });
        self.accept(pkt);
        true
    }

    fn accept(&mut self, pkt: Packet) {
        self.stats.injected_packets += 1;
        self.stats.injected_flits += pkt.flits as u64;
        self.in_flight += 1;
    }

    /// Advances both subnets one cycle and returns the packets whose tails
    /// have fully arrived. Routers are walked in fixed node/port order, so
    /// arbitration is deterministic.
    pub fn step(&mut self, now: u64) -> Vec<Packet> {
        if !self.perfect {
            for s in 0..2 {
                self.step_subnet(s, now);
            }
        }
        let mut out = Vec::new();
        while let Some(&(at, pkt)) = self.pending.first() {
            if at > now {
                break;
            }
            self.pending.remove(0);
            self.stats.delivered_packets += 1;
            self.stats.total_latency += at - pkt.inject_cycle;
            self.in_flight -= 1;
            out.push(pkt);
        }
        out
    }

    fn step_subnet(&mut self, s: usize, now: u64) {
        let n = self.topo.node_count();
        let mut deliveries: Vec<(u64, Packet)> = Vec::new();
        for node in 0..n as u16 {
            let base = node as usize * PORTS;
            // Output each stage-complete head wants (deterministic XY route;
            // LOCAL means ejection here — src==dst never enters a queue).
            let mut want = [None; PORTS];
            for (port, slot) in want.iter_mut().enumerate() {
                let Some(head) = self.sub[s].ports[base + port].q.front() else {
                    continue;
                };
                if head.stage_done > now {
                    continue;
                }
                let pkt = head.pkt;
                *slot = Some(if pkt.dst == node {
                    LOCAL
                } else {
                    self.next_dir(node, pkt.dst)
                });
            }
            for out in 0..PORTS {
                if self.sub[s].out_busy_until[base + out] > now {
                    continue;
                }
                // Round-robin among the inputs contending for this output.
                let start = self.sub[s].rr_grant[base + out] as usize;
                let Some(input) = (1..=PORTS)
                    .map(|k| (start + k) % PORTS)
                    .find(|&p| want[p] == Some(out))
                else {
                    continue;
                };
                let pkt = self.sub[s].ports[base + input].q.front().unwrap().pkt;
                if out == LOCAL {
                    self.sub[s].out_busy_until[base + out] = now + pkt.flits as u64;
                    let p = &mut self.sub[s].ports[base + input];
                    p.occ_flits -= pkt.flits;
                    p.q.pop_front();
                    deliveries.push((now + pkt.flits as u64 - 1, pkt));
                } else {
                    let neighbor = self.neighbor(node, out);
                    let in_port = neighbor as usize * PORTS + opposite(out);
                    // All contenders share this link, so a full downstream
                    // queue idles the output for everyone this cycle.
                    if self.sub[s].ports[in_port].occ_flits >= QUEUE_CAP_FLITS {
                        continue;
                    }
                    self.sub[s].out_busy_until[base + out] = now + pkt.flits as u64;
                    let p = &mut self.sub[s].ports[base + input];
                    p.occ_flits -= pkt.flits;
                    p.q.pop_front();
                    let stage = now + self.topo.charge(neighbor);
                    let np = &mut self.sub[s].ports[in_port];
                    np.occ_flits += pkt.flits;
                    np.q.push_back(Flight {
                        pkt,
                        stage_done: stage,
                    });
                }
                self.sub[s].rr_grant[base + out] = input as u8;
            }
        }
        for (at, pkt) in deliveries {
            self.schedule_delivery(at, pkt);
        }
    }

    fn next_dir(&self, node: u16, dst: u16) -> usize {
        let (x, y) = self.topo.coords(node);
        let (dx, dy) = self.topo.coords(dst);
        if x != dx {
            if dx > x {
                1 // E
            } else {
                3 // W
            }
        } else if dy > y {
            2 // S
        } else {
            0 // N
        }
    }

    fn neighbor(&self, node: u16, dir: usize) -> u16 {
        let (x, y) = self.topo.coords(node);
        let (nx, ny) = match dir {
            0 => (x, y - 1),
            1 => (x + 1, y),
            2 => (x, y + 1),
            _ => (x - 1, y),
        };
        self.topo.node_id(nx, ny)
    }

    /// Injection stalls summed over MC nodes (reply-side backpressure).
    pub fn mc_inject_stalls(&self) -> u64 {
        self.topo
            .mc_node
            .iter()
            .map(|&n| self.stats.inject_stalls[n as usize])
            .sum()
    }
}

fn opposite(dir: usize) -> usize {
    (dir + 2) % DIRS
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn mesh_dims_prefers_near_square_exact_fits() {
        assert_eq!(mesh_dims(56), (8, 7));
        assert_eq!(mesh_dims(12), (4, 3));
        assert_eq!(mesh_dims(24), (5, 5));
        assert_eq!(mesh_dims(2), (2, 1));
        assert_eq!(mesh_dims(1), (1, 1));
    }

    #[test]
    fn default_layout_places_mcs_on_perimeter_and_pairs_adjacent() {
        let topo = build_topology(48, 8, &[]).unwrap();
        assert_eq!((topo.width, topo.height), (8, 7));
        assert_eq!(topo.node_count(), 56);
        let mut sm_seen = 0;
        for (id, kind) in topo.nodes.iter().enumerate() {
            match kind {
                NodeKind::Mc(_) => {
                    let (x, _) = topo.coords(id as u16);
                    assert!(x == 0 || x == topo.width - 1, "MC off perimeter column");
                }
                NodeKind::Sm(_) => sm_seen += 1,
                NodeKind::Bypassed => panic!("no fusion requested"),
                NodeKind::Unused => {}
            }
        }
        assert_eq!(sm_seen, 48);
        assert_eq!(topo.mc_count(), 8);
        for pair in 0..24 {
            let (ax, ay) = topo.coords(topo.sm_home(2 * pair));
            let (bx, by) = topo.coords(topo.sm_home(2 * pair + 1));
            assert_eq!(ax.abs_diff(bx) + ay.abs_diff(by), 1, "pair {pair}");
        }
    }

    #[test]
    fn small_layout_also_keeps_pairs_adjacent() {
        let topo = build_topology(8, 4, &[]).unwrap();
        assert_eq!((topo.width, topo.height), (4, 3));
        for pair in 0..4 {
            let (ax, ay) = topo.coords(topo.sm_home(2 * pair));
            let (bx, by) = topo.coords(topo.sm_home(2 * pair + 1));
            assert_eq!(ax.abs_diff(bx) + ay.abs_diff(by), 1);
        }
    }

    #[test]
    fn fusing_one_pair_bypasses_odd_node_and_rehomes() {
        let base = build_topology(48, 8, &[]).unwrap();
        let topo = build_topology(48, 8, &[0]).unwrap();
        let odd_node = base.sm_home(1);
        assert!(topo.is_bypassed(odd_node));
        assert_eq!(topo.sm_home(1), topo.sm_home(0));
        assert_eq!(topo.charge(odd_node), 1);
        assert_eq!(topo.live_router_count(), 55);
    }

    #[test]
    fn fusing_all_pairs_halves_sm_routers_and_lowers_mean_charge() {
        let base = build_topology(48, 8, &[]).unwrap();
        let pairs: Vec<usize> = (0..24).collect();
        let fused = build_topology(48, 8, &pairs).unwrap();
        let live_sm = fused
            .nodes
            .iter()
            .filter(|n| matches!(n, NodeKind::Sm(_)))
            .count();
        assert_eq!(live_sm, 24);
        assert_eq!(fused.live_router_count(), 56 - 24);
        assert!(mean_sm_mc_charge(&fused, 48) < mean_sm_mc_charge(&base, 48));
    }

    #[test]
    fn non_adjacent_fuse_pair_is_rejected() {
        // With 2 MCs on a 2-high mesh, force a topology where some pair
        // straddles rows: 3 SMs + 1 MC on 2×2 leaves pair 0 split only in
        // contrived layouts, so instead check the explicit guard with a
        // hand-built case: 48+8 keeps all pairs adjacent, so drive the
        // range check and a straddling layout via 10 SMs + 2 MCs (4×3).
        assert!(build_topology(4, 2, &[5]).is_err());
        let topo = build_topology(10, 2, &[]).unwrap();
        let mut straddler = None;
        for pair in 0..5 {
            let (ax, ay) = topo.coords(topo.sm_home(2 * pair));
            let (bx, by) = topo.coords(topo.sm_home(2 * pair + 1));
            if ax.abs_diff(bx) + ay.abs_diff(by) != 1 {
                straddler = Some(pair);
            }
        }
        if let Some(pair) = straddler {
            assert!(build_topology(10, 2, &[pair]).is_err());
        }
    }

    #[test]
    fn route_is_x_then_y() {
        let topo = build_topology(48, 8, &[]).unwrap();
        let src = topo.node_id(0, 0);
        let dst = topo.node_id(3, 2);
        let hops = route(&topo, src, dst);
        let coords: Vec<(usize, usize)> = hops.iter().map(|&n| topo.coords(n)).collect();
        assert_eq!(
            coords,
            vec![(1, 0), (2, 0), (3, 0), (3, 1), (3, 2)],
            "3 X-hops then 2 Y-hops"
        );
        assert!(route(&topo, src, src).is_empty());
        assert_eq!(uncontended_latency(&topo, src, src, REQ_FLITS), 0);
    }

    #[test]
    fn single_packet_latency_matches_closed_form() {
        let topo = build_topology(48, 8, &[]).unwrap();
        let src = topo.sm_home(0); // (1,0)
        let dst = topo.mc_node(4); // (0,4): 5 hops
        assert_eq!(route(&topo, src, dst).len(), 5);
        let expect = uncontended_latency(&topo, src, dst, REQ_FLITS);
        assert_eq!(expect, 2 * 5 + REQ_FLITS as u64 - 1);
        let mut noc = NocState::new(topo, false);
        let pkt = Packet {
            id: 1,
            src,
            dst,
            flits: REQ_FLITS,
            subnet: SubnetKind::Req,
            inject_cycle: 0,
        };
        assert!(noc.inject(0, pkt));
        let mut delivered_at = None;
        for cycle in 0..200 {
            if let Some(p) = noc.step(cycle).pop() {
                assert_eq!(p.id, 1);
                delivered_at = Some(cycle);
                break;
            }
        }
        assert_eq!(delivered_at, Some(expect));
        assert_eq!(noc.stats.total_latency, expect);
    }

    #[test]
    fn bypassed_router_on_path_charges_one_cycle() {
        // Pair 4 is SMs (8,9) at (2,1)/(3,1); fusing bypasses (3,1).
        let topo = build_topology(48, 8, &[4]).unwrap();
        let src = topo.sm_home(6); // (0,1)
        let dst = topo.mc_node(1); // (7,0)
        let hops = route(&topo, src, dst);
        assert_eq!(hops.len(), 8);
        let bypassed: Vec<_> = hops.iter().filter(|&&n| topo.is_bypassed(n)).collect();
        assert_eq!(bypassed.len(), 1);
        let expect = 2 * 7 + 1 + REQ_FLITS as u64 - 1;
        assert_eq!(uncontended_latency(&topo, src, dst, REQ_FLITS), expect);
        let mut noc = NocState::new(topo, false);
        assert!(noc.inject(
            0,
            Packet {
                id: 9,
                src,
                dst,
                flits: REQ_FLITS,
                subnet: SubnetKind::Req,
                inject_cycle: 0,
            }
        ));
        let mut delivered_at = None;
        for cycle in 0..200 {
            if !noc.step(cycle).is_empty() {
                delivered_at = Some(cycle);
                break;
            }
        }
        assert_eq!(delivered_at, Some(expect));
    }

    #[test]
    fn perfect_mode_delivers_next_cycle_without_stalls() {
        let topo = build_topology(48, 8, &[]).unwrap();
        let mut noc = NocState::new(topo, true);
        for i in 0..100u64 {
            let pkt = Packet {
                id: i,
                src: noc.topo.sm_home((i % 48) as usize),
                dst: noc.topo.mc_node((i % 8) as usize),
                flits: REPLY_FLITS,
                subnet: SubnetKind::Reply,
                inject_cycle: i,
            };
            assert!(noc.inject(i, pkt));
            let got = noc.step(i); // nothing due yet at inject cycle
            assert!(got.is_empty() || got.iter().all(|p| p.inject_cycle < i));
        }
        let mut last = Vec::new();
        for c in 100..102 {
            last.extend(noc.step(c));
        }
        assert_eq!(noc.stats.delivered_packets, 100);
        assert_eq!(
            noc.stats.total_latency, 100,
            "every packet exactly 1 cycle"
        );
        assert_eq!(noc.stats.inject_stalls.iter().sum::<u64>(), 0);
        assert!(!last.is_empty());
    }

    #[test]
    fn local_queue_fills_at_capacity_and_stalls() {
        let topo = build_topology(48, 8, &[]).unwrap();
        let src = topo.sm_home(20);
        let dst = topo.mc_node(0);
        let mut noc = NocState::new(topo, false);
        // Never stepping, so nothing drains: 4 REQ packets fill 8 flits.
        for i in 0..4 {
            assert!(noc.inject(0, Packet {
                id: i,
                src,
                dst,
                flits: REQ_FLITS,
                subnet: SubnetKind::Req,
                inject_cycle: 0,
            }));
        }
        assert!(!noc.inject(0, Packet {
            id: 4,
            src,
            dst,
            flits: REQ_FLITS,
            subnet: SubnetKind::Req,
            inject_cycle: 0,
        }));
        assert_eq!(noc.stats.inject_stalls[src as usize], 1);
        assert_eq!(noc.stats.inject_attempts[src as usize], 5);
    }

    #[test]
    fn random_traffic_conserves_and_drains() {
        let topo = build_topology(48, 8, &[2, 7, 11]).unwrap();
        let mut noc = NocState::new(topo, false);
        let mut to_send: Vec<(u64, Packet)> = (0..300u64)
            .map(|i| {
                let sm = rng::below(901, &[i, 0], 48) as usize;
                let mc = rng::below(901, &[i, 1], 8) as usize;
                let req = rng::unit_f64(901, &[i, 2]) < 0.5;
                let at = rng::below(901, &[i, 3], 2000);
                let (src, dst, flits, subnet) = if req {
                    (
                        noc.topo.sm_home(sm),
                        noc.topo.mc_node(mc),
                        REQ_FLITS,
                        SubnetKind::Req,
                    )
                } else {
                    (
                        noc.topo.mc_node(mc),
                        noc.topo.sm_home(sm),
                        REPLY_FLITS,
                        SubnetKind::Reply,
                    )
                };
                (
                    at,
                    Packet {
                        id: i,
                        src,
                        dst,
                        flits,
                        subnet,
                        inject_cycle: at,
                    },
                )
            })
            .collect();
        to_send.sort_by_key(|&(at, p)| (at, p.id));
        let mut queue: VecDeque<(u64, Packet)> = to_send.into();
        let mut delivered = 0u64;
        for cycle in 0..100_000u64 {
            while let Some(&(at, mut pkt)) = queue.front() {
                if at > cycle {
                    break;
                }
                pkt.inject_cycle = cycle;
                if noc.inject(cycle, pkt) {
                    queue.pop_front();
                } else {
                    break; // retry next cycle
                }
            }
            for p in noc.step(cycle) {
                delivered += 1;
                assert!(!noc.topo.is_bypassed(p.dst));
                let base = uncontended_latency(&noc.topo, p.src, p.dst, p.flits);
                assert!(cycle - p.inject_cycle >= base, "faster than closed form");
            }
            assert_eq!(
                noc.stats.injected_packets,
                noc.stats.delivered_packets + noc.in_flight(),
                "conservation at cycle {cycle}"
            );
            if queue.is_empty() && noc.idle() {
                break;
            }
        }
        assert_eq!(delivered, 300, "all packets eventually delivered");
        assert!(noc.idle());
    }

    #[test]
    fn saturating_injection_shares_mc_ejection_bandwidth() {
        let topo = build_topology(48, 8, &[]).unwrap();
        let mut noc = NocState::new(topo, false);
        let cycles = 30_000u64;
        let mut id = 0u64;
        for cycle in 0..cycles {
            for sm in 0..48usize {
                let mc = ((sm as u64 + cycle) % 8) as usize;
                let pkt = Packet {
                    id,
                    src: noc.topo.sm_home(sm),
                    dst: noc.topo.mc_node(mc),
                    flits: REQ_FLITS,
                    subnet: SubnetKind::Req,
                    inject_cycle: cycle,
                };
                id += 1;
                noc.inject(cycle, pkt);
            }
            noc.step(cycle);
        }
        // Ejection capacity: 8 MCs × 1 packet / 2 cycles = 4 packets/cycle.
        let rate = noc.stats.delivered_packets as f64 / cycles as f64;
        assert!(rate <= 4.001, "cannot beat ejection capacity, got {rate}");
        assert!(rate >= 2.0, "severely under-using the mesh, got {rate}");
        let share = 4.0 / 48.0;
        for sm in 0..48usize {
            let node = noc.topo.sm_home(sm) as usize;
            let accepted =
                noc.stats.inject_attempts[node] - noc.stats.inject_stalls[node];
            let per_cycle = accepted as f64 / cycles as f64;
            assert!(per_cycle > 0.0, "SM {sm} fully starved");
            assert!(
                per_cycle <= share * 4.0,
                "SM {sm} hogs bandwidth: {per_cycle:.4} vs share {share:.4}"
            );
        }
    }
}
