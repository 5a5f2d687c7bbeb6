use super::{MultiTaskDataset, Prng, Regime};
use crate::error::{Error, Result};

/// One optimization step's worth of sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Batch {
    /// Multi-label regime: every task uses the same samples.
    Shared(Vec<usize>),
    /// Disjoint regime: `(task, indices)` in manifest task order. A task whose
    /// pool is exhausted for this epoch contributes an empty list.
    PerTask(Vec<(String, Vec<usize>)>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub epoch: usize,
    pub batches: Vec<Batch>,
}

/// Shuffles keyed by `(seed, epoch)`. In the disjoint regime each batch
/// takes `batch_size / T` samples from every task's own pool; the number of
/// batches is set by the largest pool so every index appears exactly once.
pub fn make_batches(ds: &MultiTaskDataset, batch_size: usize, epoch: usize, seed: u64) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let batches = match ds.regime() {
        Regime::MultiLabel => {
            if batch_size > ds.len() {
                return Err(Error::InvalidArgument(format!(
                    "batch size {batch_size} exceeds the {} available samples",
                    ds.len()
                )));
            }
            let perm = Prng::new(seed, &format!("batches/epoch{epoch}")).permutation(ds.len());
            perm.chunks(batch_size).map(|c| Batch::Shared(c.to_vec())).collect()
        }
        Regime::DisjointLabel => {
            let tasks = &ds.manifest().tasks;
            if batch_size % tasks.len() != 0 {
                return Err(Error::InvalidArgument(format!(
                    "batch size {batch_size} does not split evenly over {} tasks",
                    tasks.len()
                )));
            }
            let per = batch_size / tasks.len();
            let mut pools = Vec::with_capacity(tasks.len());
            for t in tasks {
                let mut pool = ds.indices_for(&t.id);
                if per > pool.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{per} samples per batch exceed the {} labeled for `{}`",
                        pool.len(),
                        t.id
                    )));
                }
                Prng::new(seed, &format!("batches/epoch{epoch}/{}", t.id)).shuffle(&mut pool);
                pools.push((t.id.clone(), pool));
            }
            let count = pools.iter().map(|(_, p)| p.len().div_ceil(per)).max().unwrap_or(0);
            (0..count)
                .map(|b| {
                    Batch::PerTask(
                        pools
                            .iter()
                            .map(|(id, pool)| {
                                let lo = (b * per).min(pool.len());
                                let hi = ((b + 1) * per).min(pool.len());
                                (id.clone(), pool[lo..hi].to_vec())
                            })
                            .collect(),
                    )
                })
                .collect()
        }
    };
    Ok(BatchPlan { epoch, batches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_disjoint_pair, gen_scale_clash, DisjointPairParams, ScaleClashParams};

    fn task_indices(plan: &BatchPlan, task: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for b in &plan.batches {
            match b {
                Batch::Shared(ix) => out.extend_from_slice(ix),
                Batch::PerTask(per) => {
                    for (t, ix) in per {
                        if t == task {
                            out.extend_from_slice(ix);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn disjoint_half_and_half() {
        let ds = gen_disjoint_pair(&DisjointPairParams::new(40, 40, 3, 4, 8, 0)).unwrap();
        let plan = make_batches(&ds, 8, 0, 1).unwrap();
        assert_eq!(plan.batches.len(), 10);
        for b in &plan.batches {
            let Batch::PerTask(per) = b else { panic!() };
            assert_eq!(per.iter().map(|(_, ix)| ix.len()).collect::<Vec<_>>(), vec![4, 4]);
            for (t, ix) in per {
                assert!(ix.iter().all(|&i| ds.samples()[i].labels.contains_key(t)));
            }
        }
        for t in ["digits", "chars"] {
            let mut got = task_indices(&plan, t);
            got.sort_unstable();
            assert_eq!(got, ds.indices_for(t));
        }
    }

    #[test]
    fn uneven_pools_cover_everything_once() {
        let ds = gen_disjoint_pair(&DisjointPairParams::new(10, 30, 3, 2, 3, 0)).unwrap();
        let plan = make_batches(&ds, 8, 3, 1).unwrap();
        for t in ["digits", "chars"] {
            let mut got = task_indices(&plan, t);
            got.sort_unstable();
            assert_eq!(got, ds.indices_for(t));
        }
    }

    #[test]
    fn epochs_reshuffle() {
        let ds = gen_scale_clash(&ScaleClashParams::new(100, 3, 0)).unwrap();
        let a = make_batches(&ds, 16, 0, 9).unwrap();
        let b = make_batches(&ds, 16, 1, 9).unwrap();
        let (ia, ib) = (task_indices(&a, ""), task_indices(&b, ""));
        assert_ne!(ia, ib);
        let (mut sa, mut sb) = (ia.clone(), ib.clone());
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, sb);
        assert_eq!(sa, (0..100).collect::<Vec<_>>());
        assert_eq!(a, make_batches(&ds, 16, 0, 9).unwrap());
    }

    #[test]
    fn oversized_batches_rejected() {
        let ds = gen_scale_clash(&ScaleClashParams::new(10, 3, 0)).unwrap();
        assert!(make_batches(&ds, 11, 0, 0).is_err());
        let dp = gen_disjoint_pair(&DisjointPairParams::new(4, 40, 3, 2, 3, 0)).unwrap();
        assert!(make_batches(&dp, 10, 0, 0).is_err());
        assert!(make_batches(&dp, 7, 0, 0).is_err());
    }
}
