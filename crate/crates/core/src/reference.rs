//! Reference interpreter: a timing-free forward walk of one warp's stream
//! using only the instruction semantics (mask stack, reconvergence). It is
//! deliberately independent of the cycle engine and serves as the oracle for
//! instruction conservation and divergence accounting.

use crate::workload::{AbstractInstr, CtaStream, WARP_LANES};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WarpTrace {
    /// Instructions issued per lane (thread).
    pub per_lane: Vec<u32>,
    pub warp_issues: u64,
    pub active_lane_slots: u64,
    pub inactive_lane_slots: u64,
    pub max_stack_depth: usize,
    pub branches: u64,
    pub divergent_branches: u64,
}

/// Walks one 32-lane stream, invoking `visit(pc, active_mask, instr)` for
/// every issued instruction in order.
pub fn interpret_warp_visit(
    stream: &[AbstractInstr],
    mut visit: impl FnMut(usize, u32, &AbstractInstr),
) -> WarpTrace {
    let mut t = WarpTrace {
        per_lane: vec![0; WARP_LANES],
        ..WarpTrace::default()
    };
    let mut mask: u32 = u32::MAX;
    let mut stack: Vec<(u32, u32)> = Vec::new();
    let mut pc = 0usize;
    while pc < stream.len() {
        while stack.last().map(|&(r, _)| r) == Some(pc as u32) {
            mask = stack.pop().unwrap().1;
        }
        let instr = &stream[pc];
        visit(pc, mask, instr);
        t.warp_issues += 1;
        let pop = mask.count_ones();
        t.active_lane_slots += pop as u64;
        t.inactive_lane_slots += (WARP_LANES as u32 - pop) as u64;
        for lane in 0..WARP_LANES {
            if mask & (1 << lane) != 0 {
                t.per_lane[lane] += 1;
            }
        }
        match instr {
            AbstractInstr::Branch { taken, reconv } => {
                t.branches += 1;
                let taken = taken & mask;
                if taken == mask {
                    pc += 1;
                } else if taken == 0 {
                    pc = *reconv as usize;
                } else {
                    t.divergent_branches += 1;
                    stack.push((*reconv, mask));
                    mask = taken;
                    t.max_stack_depth = t.max_stack_depth.max(stack.len());
                    pc += 1;
                }
            }
            AbstractInstr::Exit => break,
            _ => pc += 1,
        }
    }
    assert!(stack.is_empty(), "stack must drain by EXIT");
    t
}

pub fn interpret_warp(stream: &[AbstractInstr]) -> WarpTrace {
    interpret_warp_visit(stream, |_, _, _| {})
}

/// Per-thread issue counts for every warp of a CTA.
pub fn cta_thread_counts(cta: &CtaStream) -> Vec<Vec<u32>> {
    cta.warps
        .iter()
        .map(|w| interpret_warp(w).per_lane)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{generate_kernel, KernelSpec};

    fn spec() -> KernelSpec {
        KernelSpec {
            name: "ref".into(),
            cta_count: 1,
            warps_per_cta: 2,
            instructions_per_warp: 300,
            load_rate: 0.2,
            store_rate: 0.05,
            branch_rate: 0.15,
            branch_divergence_prob: 0.6,
            divergent_path_extra_insns: 8,
            access_stride_bytes: 4,
            access_footprint_bytes: 1 << 14,
            locality: 0.2,
            seed: 7,
            divergence_phase_len: None,
        }
    }

    #[test]
    fn no_divergence_means_every_thread_runs_whole_stream() {
        let mut s = spec();
        s.branch_divergence_prob = 0.0;
        let k = generate_kernel(&s).unwrap();
        let t = interpret_warp(&k.ctas[0].warps[0]);
        let n = s.instructions_per_warp;
        assert!(t.per_lane.iter().all(|&c| c == n));
        assert_eq!(t.inactive_lane_slots, 0);
        assert_eq!(t.max_stack_depth, 0);
    }

    #[test]
    fn divergent_branch_charges_masked_lanes_for_the_body() {
        // Hand-built stream: branch keeps 20 of 32 lanes over a 5-insn body.
        let taken = (1u32 << 20) - 1;
        let mut stream = vec![AbstractInstr::Branch { taken, reconv: 6 }];
        for _ in 0..5 {
            stream.push(AbstractInstr::Compute { latency: 4 });
        }
        stream.push(AbstractInstr::Compute { latency: 4 }); // reconverged
        stream.push(AbstractInstr::Exit);
        let t = interpret_warp(&stream);
        // 12 masked-off lanes idle for each of the 5 body instructions.
        assert_eq!(t.inactive_lane_slots, 12 * 5);
        assert_eq!(t.max_stack_depth, 1);
        assert_eq!(t.divergent_branches, 1);
        for lane in 0..WARP_LANES {
            let expect = if lane < 20 { 8 } else { 3 };
            assert_eq!(t.per_lane[lane], expect, "lane {lane}");
        }
    }

    #[test]
    fn nested_divergence_restores_masks_lifo() {
        // outer keeps lanes 0..16 (body 1..8), inner keeps 0..4 (body 3..6).
        let outer = 0xFFFF;
        let inner = 0xF;
        let stream = vec![
            AbstractInstr::Branch {
                taken: outer,
                reconv: 8,
            },
            AbstractInstr::Compute { latency: 4 }, // pc1, mask outer
            AbstractInstr::Branch {
                taken: inner,
                reconv: 6,
            }, // pc2
            AbstractInstr::Compute { latency: 4 }, // pc3 inner
            AbstractInstr::Compute { latency: 4 }, // pc4 inner
            AbstractInstr::Compute { latency: 4 }, // pc5 inner
            AbstractInstr::Compute { latency: 4 }, // pc6 back to outer
            AbstractInstr::Compute { latency: 4 }, // pc7 outer
            AbstractInstr::Compute { latency: 4 }, // pc8 full again
            AbstractInstr::Exit,
        ];
        let mut masks = Vec::new();
        let t = interpret_warp_visit(&stream, |pc, m, _| masks.push((pc, m)));
        assert_eq!(t.max_stack_depth, 2);
        assert_eq!(masks[3].1, inner);
        assert_eq!(masks[6].1, outer, "inner pops back to outer first");
        assert_eq!(masks[8].1, u32::MAX, "outer pops back to full");
    }

    #[test]
    fn generated_streams_always_drain_the_stack() {
        for seed in 0..20 {
            let mut s = spec();
            s.seed = seed;
            s.branch_divergence_prob = 0.9;
            let k = generate_kernel(&s).unwrap();
            for cta in &k.ctas {
                for warp in &cta.warps {
                    let t = interpret_warp(warp);
                    assert!(t.warp_issues > 0);
                }
            }
        }
    }
}
