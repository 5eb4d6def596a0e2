//! Synthetic workload generation.
//!
//! A kernel is described by a small parameter record ([`KernelSpec`]) and
//! expanded into per-warp streams of abstract instructions. The expansion is
//! a pure function of the spec: instruction kinds and branch-body shape are
//! keyed by (seed, position) and shared by every CTA (one "program"), while
//! branch masks and lane addresses are keyed by (seed, cta, warp, position).
//! A CTA therefore produces the same stream no matter where or when it runs,
//! and all warps of a CTA have the same stream length (divergence is
//! expressed purely through masks).

use crate::rng;
use crate::Error;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const WARP_LANES: usize = 32;
/// Address value for lanes that are inactive at a memory instruction.
pub const NULL_ADDR: u64 = u64::MAX;

// Salt words keep independent decision streams from one seed.
const S_SHUFFLE: u64 = 0x01;
const S_DIVERGE: u64 = 0x02;
const S_SUBSET_K: u64 = 0x03;
const S_SUBSET_LANE: u64 = 0x04;
const S_REUSE: u64 = 0x05;
const S_REUSE_PICK: u64 = 0x06;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub name: String,
    pub cta_count: u32,
    pub warps_per_cta: u32,
    pub instructions_per_warp: u32,
    pub load_rate: f64,
    pub store_rate: f64,
    pub branch_rate: f64,
    /// Probability that a warp's mask actually splits at a branch position.
    pub branch_divergence_prob: f64,
    /// Length of the serialized taken path following a branch.
    pub divergent_path_extra_insns: u32,
    pub access_stride_bytes: u64,
    pub access_footprint_bytes: u64,
    /// Probability a memory access re-touches a recently used base address.
    pub locality: f64,
    pub seed: u64,
    /// When set, divergence only occurs in odd-numbered phases of this many
    /// instructions (phase 0 is divergence-free).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence_phase_len: Option<u32>,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), Error> {
        fn rate(name: &str, v: f64) -> Result<(), Error> {
            if !(0.0..=1.0).contains(&v) || v.is_nan() {
                return Err(Error::Kernel(format!(
                    "{name} must be within [0, 1], got {v}"
                )));
            }
            Ok(())
        }
        if self.cta_count == 0 {
            return Err(Error::Kernel("cta_count must be at least 1".into()));
        }
        if self.warps_per_cta == 0 {
            return Err(Error::Kernel("warps_per_cta must be at least 1".into()));
        }
        if self.instructions_per_warp == 0 {
            return Err(Error::Kernel(
                "instructions_per_warp must be at least 1".into(),
            ));
        }
        rate("load_rate", self.load_rate)?;
        rate("store_rate", self.store_rate)?;
        rate("branch_rate", self.branch_rate)?;
        rate("branch_divergence_prob", self.branch_divergence_prob)?;
        rate("locality", self.locality)?;
        let sum = self.load_rate + self.store_rate + self.branch_rate;
        if sum > 1.0 + 1e-12 {
            return Err(Error::Kernel(format!(
                "load_rate + store_rate + branch_rate must not exceed 1, got {sum}"
            )));
        }
        if self.access_footprint_bytes < 128 {
            return Err(Error::Kernel(
                "access_footprint_bytes must cover at least one 128-byte line".into(),
            ));
        }
        if self.divergence_phase_len == Some(0) {
            return Err(Error::Kernel(
                "divergence_phase_len must be at least 1 when present".into(),
            ));
        }
        Ok(())
    }

    pub fn total_warps(&self) -> u32 {
        self.cta_count * self.warps_per_cta
    }

    /// Divergence is allowed at this stream position (phase gating).
    pub fn divergence_eligible(&self, pos: u32) -> bool {
        match self.divergence_phase_len {
            None => true,
            Some(len) => (pos / len) % 2 == 1,
        }
    }
}

/// Returns a spec whose streams alternate divergence-free and divergent
/// phases of `phase_len` instructions (starting divergence-free).
pub fn divergence_phased_kernel(base: &KernelSpec, phase_len: u32) -> KernelSpec {
    let mut spec = base.clone();
    spec.divergence_phase_len = Some(phase_len.max(1));
    spec
}

#[derive(Debug, Clone, PartialEq)]
pub enum AbstractInstr {
    Compute { latency: u32 },
    /// Per-lane byte addresses; inactive lanes carry [`NULL_ADDR`].
    Load { addrs: Box<[u64; WARP_LANES]> },
    Store { addrs: Box<[u64; WARP_LANES]> },
    /// `taken` restricted to the warp's active mask at this point; lanes
    /// outside it skip ahead to `reconv`.
    Branch { taken: u32, reconv: u32 },
    Barrier,
    Exit,
}

impl AbstractInstr {
    pub fn is_mem(&self) -> bool {
        matches!(self, AbstractInstr::Load { .. } | AbstractInstr::Store { .. })
    }
}

#[derive(Debug, Clone)]
pub struct CtaStream {
    pub cta_id: u32,
    /// One stream per warp; all the same length.
    pub warps: Vec<Vec<AbstractInstr>>,
}

impl CtaStream {
    pub fn len(&self) -> usize {
        self.warps.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn instr(&self, warp: usize, pc: usize) -> &AbstractInstr {
        &self.warps[warp][pc]
    }
}

#[derive(Debug, Clone)]
pub struct Kernel {
    pub spec: KernelSpec,
    pub ctas: Vec<CtaStream>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum SKind {
    Compute,
    Load,
    Store,
    /// Taken path spans (pos, reconv); masks are per-warp.
    Branch { reconv: u32 },
    Exit,
}

/// Shared per-kernel shape: instruction kinds, branch bodies, memory slots.
struct KernelShape {
    kinds: Vec<SKind>,
    /// Memory-access ordinal per position (positions without memory access
    /// hold u32::MAX). Shared by all warps, so address walks line up.
    mem_slot: Vec<u32>,
}

/// Kind counts via largest-remainder quotas so measured frequencies match
/// the spec'd rates to within one slot, then a seeded shuffle places them.
fn kind_sequence(spec: &KernelSpec) -> Vec<SKind> {
    let n = spec.instructions_per_warp as usize;
    let body = n - 1; // last position is EXIT
    let quota = |r: f64| r * body as f64;
    let targets = [
        quota(spec.load_rate),
        quota(spec.store_rate),
        quota(spec.branch_rate),
    ];
    let mut counts: [usize; 3] = [
        targets[0] as usize,
        targets[1] as usize,
        targets[2] as usize,
    ];
    let leftover = body.saturating_sub(counts.iter().sum::<usize>());
    // Largest-remainder rounding: the slots left after flooring every quota
    // go to the highest fractional parts, compute competing with its own.
    let compute_target = (body as f64 - targets.iter().sum::<f64>()).max(0.0);
    let mut fracs: Vec<(f64, usize)> = targets
        .iter()
        .enumerate()
        .map(|(i, t)| (t - t.floor(), i))
        .collect();
    fracs.push((compute_target - compute_target.floor(), 3));
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let extras = leftover.saturating_sub(compute_target.floor() as usize);
    for &(_, idx) in fracs.iter().take(extras) {
        // Compute's extras are implicit: unassigned slots fall to it below.
        if idx < 3 {
            counts[idx] += 1;
        }
    }
    let mut kinds = Vec::with_capacity(n);
    kinds.extend(std::iter::repeat_n(SKind::Load, counts[0]));
    kinds.extend(std::iter::repeat_n(SKind::Store, counts[1]));
    kinds.extend(std::iter::repeat_n(SKind::Branch { reconv: 0 }, counts[2]));
    kinds.resize(body, SKind::Compute);
    // Fisher-Yates with counter-based draws.
    for i in (1..body).rev() {
        let j = rng::below(spec.seed, &[S_SHUFFLE, i as u64], (i + 1) as u64) as usize;
        kinds.swap(i, j);
    }
    kinds.push(SKind::Exit);
    kinds
}

fn kernel_shape(spec: &KernelSpec) -> KernelShape {
    let mut kinds = kind_sequence(spec);
    let n = kinds.len();
    let mut mem_slot = vec![u32::MAX; n];
    let mut open: Vec<u32> = Vec::new(); // enclosing reconvergence positions
    let mut mem_count = 0u32;
    for p in 0..n {
        while open.last() == Some(&(p as u32)) {
            open.pop();
        }
        match kinds[p] {
            SKind::Load | SKind::Store => {
                mem_slot[p] = mem_count;
                mem_count += 1;
            }
            SKind::Branch { .. } => {
                let limit = open.last().copied().unwrap_or(n as u32 - 1);
                let start = p as u32 + 1;
                let body = spec.divergent_path_extra_insns.min(limit - start);
                let reconv = start + body;
                kinds[p] = SKind::Branch { reconv };
                if body > 0 {
                    open.push(reconv);
                }
            }
            _ => {}
        }
    }
    KernelShape { kinds, mem_slot }
}

/// Recent base addresses for locality re-touches.
struct BaseRing {
    hist: [u64; 4],
    len: usize,
    next: usize,
}

impl BaseRing {
    fn new() -> Self {
        BaseRing {
            hist: [0; 4],
            len: 0,
            next: 0,
        }
    }

    fn push(&mut self, base: u64) {
        self.hist[self.next] = base;
        self.next = (self.next + 1) % self.hist.len();
        self.len = (self.len + 1).min(self.hist.len());
    }

    fn pick(&self, seed: u64, key: &[u64]) -> Option<u64> {
        if self.len == 0 {
            return None;
        }
        Some(self.hist[rng::below(seed, key, self.len as u64) as usize])
    }
}

/// Proper nonempty subset of `mask` (requires ≥ 2 active lanes): drawn size
/// k in 1..popcount, lanes ranked by per-lane hash.
fn proper_subset(seed: u64, cta: u32, warp: u32, pos: u32, mask: u32) -> u32 {
    let pop = mask.count_ones();
    debug_assert!(pop >= 2);
    let k = 1 + rng::below(
        seed,
        &[S_SUBSET_K, cta as u64, warp as u64, pos as u64],
        (pop - 1) as u64,
    ) as u32;
    let mut ranked: Vec<(u64, u32)> = (0..WARP_LANES as u32)
        .filter(|l| mask & (1 << l) != 0)
        .map(|l| {
            (
                rng::hash_key(
                    seed,
                    &[S_SUBSET_LANE, cta as u64, warp as u64, pos as u64, l as u64],
                ),
                l,
            )
        })
        .collect();
    ranked.sort_unstable();
    ranked[..k as usize].iter().fold(0u32, |m, &(_, l)| m | (1 << l))
}

fn lane_addresses(
    spec: &KernelSpec,
    cta: u32,
    warp: u32,
    slot: u32,
    mask: u32,
    ring: &mut BaseRing,
) -> Box<[u64; WARP_LANES]> {
    let gw = (cta * spec.warps_per_cta + warp) as u64;
    let total = spec.total_warps() as u64;
    let stride = spec.access_stride_bytes;
    let footprint = spec.access_footprint_bytes;
    let reuse = rng::unit_f64(spec.seed, &[S_REUSE, cta as u64, warp as u64, slot as u64]);
    let base = if reuse < spec.locality {
        ring.pick(
            spec.seed,
            &[S_REUSE_PICK, cta as u64, warp as u64, slot as u64],
        )
    } else {
        None
    }
    .unwrap_or_else(|| {
        // Grid-stride walk: round `slot`, warp `gw`, 32 lanes wide.
        (slot as u64 * total + gw)
            .wrapping_mul(WARP_LANES as u64)
            .wrapping_mul(stride.max(1))
            % footprint
    });
    ring.push(base);
    let mut addrs = Box::new([NULL_ADDR; WARP_LANES]);
    for lane in 0..WARP_LANES {
        if mask & (1 << lane) != 0 {
            addrs[lane] = (base + lane as u64 * stride) % footprint;
        }
    }
    addrs
}

fn warp_stream(spec: &KernelSpec, shape: &KernelShape, cta: u32, warp: u32) -> Vec<AbstractInstr> {
    let n = shape.kinds.len();
    let mut out = Vec::with_capacity(n);
    let mut mask: u32 = u32::MAX;
    let mut stack: Vec<(u32, u32)> = Vec::new(); // (reconv, restore mask)
    let mut ring = BaseRing::new();
    for p in 0..n {
        while stack.last().map(|&(r, _)| r) == Some(p as u32) {
            mask = stack.pop().unwrap().1;
        }
        let instr = match shape.kinds[p] {
            SKind::Compute => AbstractInstr::Compute { latency: 4 },
            SKind::Load => AbstractInstr::Load {
                addrs: lane_addresses(spec, cta, warp, shape.mem_slot[p], mask, &mut ring),
            },
            SKind::Store => AbstractInstr::Store {
                addrs: lane_addresses(spec, cta, warp, shape.mem_slot[p], mask, &mut ring),
            },
            SKind::Branch { reconv } => {
                let diverge = spec.divergence_eligible(p as u32)
                    && mask.count_ones() >= 2
                    && rng::unit_f64(
                        spec.seed,
                        &[S_DIVERGE, cta as u64, warp as u64, p as u64],
                    ) < spec.branch_divergence_prob;
                let taken = if diverge {
                    proper_subset(spec.seed, cta, warp, p as u32, mask)
                } else {
                    mask
                };
                if taken != mask {
                    stack.push((reconv, mask));
                    mask = taken;
                }
                AbstractInstr::Branch { taken, reconv }
            }
            SKind::Exit => AbstractInstr::Exit,
        };
        out.push(instr);
    }
    debug_assert!(stack.is_empty(), "all branch paths reconverge before EXIT");
    out
}

pub fn generate_cta(spec: &KernelSpec, cta_id: u32) -> CtaStream {
    let shape = kernel_shape(spec);
    generate_cta_with(spec, &shape, cta_id)
}

fn generate_cta_with(spec: &KernelSpec, shape: &KernelShape, cta_id: u32) -> CtaStream {
    CtaStream {
        cta_id,
        warps: (0..spec.warps_per_cta)
            .map(|w| warp_stream(spec, shape, cta_id, w))
            .collect(),
    }
}

/// Expands the spec into streams for every CTA.
pub fn generate_kernel(spec: &KernelSpec) -> Result<Kernel, Error> {
    spec.validate()?;
    let shape = kernel_shape(spec);
    let ctas = (0..spec.cta_count)
        .map(|c| generate_cta_with(spec, &shape, c))
        .collect();
    Ok(Kernel {
        spec: spec.clone(),
        ctas,
    })
}

pub fn load_kernel_file(path: &Path) -> Result<KernelSpec, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let spec: KernelSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

pub fn save_kernel_file(spec: &KernelSpec, path: &Path) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(spec).expect("kernel spec serializes");
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
