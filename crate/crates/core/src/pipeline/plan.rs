use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, PipelineParams};

/// One R2 worker's share of the R1 output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct R2Assignment {
    pub videos: Vec<String>,
    /// Maximum number of selections this worker may make.
    pub cap: usize,
}

pub fn r2_worker_count(kept: usize, per_worker: usize) -> usize {
    kept.div_ceil(per_worker)
}

pub fn r2_selection_cap(assignment_len: usize, params: &PipelineParams) -> usize {
    params.r2_select_cap.min(assignment_len.div_ceil(10))
}

/// Split `kept` into `ceil(n / r2_pool_per_worker)` near-equal parts after a
/// seeded shuffle. Part sizes differ by at most one, larger parts first.
pub fn plan_r2(kept: &[String], params: &PipelineParams, seed: u64) -> Result<Vec<R2Assignment>, PipelineError> {
    if kept.is_empty() {
        return Err(PipelineError::Validation("cannot plan R2 over an empty R1 output".into()));
    }
    let workers = r2_worker_count(kept.len(), params.r2_pool_per_worker);
    let mut order = kept.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let base = order.len() / workers;
    let extra = order.len() % workers;
    let mut parts = Vec::with_capacity(workers);
    let mut rest = order.as_slice();
    for w in 0..workers {
        let size = base + usize::from(w < extra);
        let (head, tail) = rest.split_at(size);
        rest = tail;
        parts.push(R2Assignment {
            cap: r2_selection_cap(head.len(), params),
            videos: head.to_vec(),
        });
    }
    Ok(parts)
}

/// Seed for the shuffle of R3 batch `batch`, derived from the job seed.
pub(crate) fn batch_seed(seed: u64, batch: usize) -> u64 {
    seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(batch as u64 + 1))
}

pub(crate) fn shuffled(videos: &[String], seed: u64) -> Vec<String> {
    let mut v = videos.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}
