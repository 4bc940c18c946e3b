//! Tick-stepped reference for the memory timing model, with power-down
//! disabled. Every row access is an op that walks through stages one
//! 500 ps tick at a time; resources are handed out strictly in request
//! order.

use sparsim::mem::{AccessKind, MemRequest, MemoryConfig};

#[derive(Clone, Copy, PartialEq, Debug)]
enum Stage {
    Waiting,
    Array(u64),
    Ready,
    Bus(u64),
    Done(u64),
}

struct Op {
    req: usize,
    kind: AccessKind,
    channel: usize,
    bank: usize,
    issue: u64,
    array_ticks: u64,
    stage: Stage,
}

/// Completion time (ps) of every request.
pub fn completions(cfg: &MemoryConfig, reqs: &[MemRequest]) -> Vec<u64> {
    let tick = cfg.t_burst_ps;
    assert!(cfg.rram_read_ps % tick == 0 && cfg.rram_write_ps % tick == 0);
    let xfer_ticks = cfg.row_bytes / cfg.beat_bytes;
    let nbanks = (cfg.channels * cfg.ranks_per_channel * cfg.banks_per_rank) as usize;

    // Buffer contents evolve in request order.
    let mut read_row: Vec<Option<u64>> = vec![None; nbanks];
    let mut write_row: Vec<Option<u64>> = vec![None; nbanks];
    let mut ops = Vec::new();
    for (ri, r) in reqs.iter().enumerate() {
        assert!(r.issue_ps % tick == 0);
        for i in 0..r.bytes / cfg.row_bytes {
            let g = (r.address + i * cfg.row_bytes) / cfg.row_bytes;
            let ch = (g % cfg.channels as u64) as usize;
            let bank_in_rank = (g / cfg.channels as u64) % cfg.banks_per_rank as u64;
            let rank = (g / cfg.channels as u64 / cfg.banks_per_rank as u64) % cfg.ranks_per_channel as u64;
            let row = g / cfg.channels as u64 / cfg.banks_per_rank as u64 / cfg.ranks_per_channel as u64;
            let bank = (ch * cfg.ranks_per_channel as usize + rank as usize) * cfg.banks_per_rank as usize
                + bank_in_rank as usize;
            let array_ticks = match r.kind {
                AccessKind::Read => {
                    let miss = read_row[bank] != Some(row);
                    read_row[bank] = Some(row);
                    if miss { cfg.rram_read_ps / tick } else { 0 }
                }
                AccessKind::Write => {
                    let evict = write_row[bank].is_some() && write_row[bank] != Some(row);
                    write_row[bank] = Some(row);
                    if evict { cfg.rram_write_ps / tick } else { 0 }
                }
            };
            ops.push(Op {
                req: ri,
                kind: r.kind,
                channel: ch,
                bank,
                issue: r.issue_ps / tick,
                array_ticks,
                stage: Stage::Waiting,
            });
        }
    }

    let mut now = 0u64;
    while ops.iter().any(|o| !matches!(o.stage, Stage::Done(_))) {
        // Bank stage: an op may start once issued and once every earlier op
        // of the same kind on its bank has left the array stage.
        for i in 0..ops.len() {
            if ops[i].stage != Stage::Waiting || ops[i].issue > now {
                continue;
            }
            let blocked = ops[..i].iter().any(|o| {
                o.bank == ops[i].bank && o.kind == ops[i].kind && matches!(o.stage, Stage::Waiting | Stage::Array(_))
            });
            if !blocked {
                ops[i].stage = if ops[i].array_ticks == 0 { Stage::Ready } else { Stage::Array(ops[i].array_ticks) };
            }
        }
        // Bus stage: strict request order per channel and path.
        for i in 0..ops.len() {
            if ops[i].stage != Stage::Ready {
                continue;
            }
            let busy_or_earlier = ops[..i].iter().any(|o| {
                o.channel == ops[i].channel && o.kind == ops[i].kind && !matches!(o.stage, Stage::Done(_))
            });
            if !busy_or_earlier {
                ops[i].stage = Stage::Bus(xfer_ticks);
            }
        }
        // Advance one tick.
        now += 1;
        for o in ops.iter_mut() {
            o.stage = match o.stage {
                Stage::Array(1) => Stage::Ready,
                Stage::Array(k) => Stage::Array(k - 1),
                Stage::Bus(1) => Stage::Done(now),
                Stage::Bus(k) => Stage::Bus(k - 1),
                s => s,
            };
        }
        // A bank freed this tick lets the next op enter without losing a
        // tick, matching back-to-back reservation.
    }

    let mut out = vec![0u64; reqs.len()];
    for o in &ops {
        if let Stage::Done(t) = o.stage {
            out[o.req] = out[o.req].max(t * tick);
        }
    }
    out
}
