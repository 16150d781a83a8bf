use std::ops::Range;

/// Temporal stacking concatenates stages while their per-core tile counts
/// sum to at most this.
pub const TEMPORAL_TILE_BUDGET: usize = 8;

/// One kernel placed on a core range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelSlot {
    pub kernel: usize,
    pub tiles: usize,
    pub cores: Range<usize>,
}

impl KernelSlot {
    pub fn block_dim(&self) -> usize {
        self.cores.len().min(self.tiles).max(1)
    }

    pub fn body_tiles(&self) -> usize {
        self.tiles.div_ceil(self.block_dim())
    }
}

/// Data-independent kernels running side by side on disjoint cores.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub kernels: Vec<KernelSlot>,
}

impl Stage {
    pub fn body_tiles(&self) -> usize {
        self.kernels
            .iter()
            .map(KernelSlot::body_tiles)
            .max()
            .unwrap_or(0)
    }
}

/// Stages executed back to back under a single launch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Launch {
    pub stages: Vec<Stage>,
}

impl Launch {
    pub fn kind(&self) -> &'static str {
        match (
            self.stages.len(),
            self.stages.first().map_or(0, |s| s.kernels.len()),
        ) {
            (1, 1) => "single",
            (1, _) => "stack-spatial",
            _ => "stack-temporal",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StackPlan {
    pub launches: Vec<Launch>,
}

impl StackPlan {
    pub fn kernel_count(&self) -> usize {
        self.launches
            .iter()
            .flat_map(|l| &l.stages)
            .map(|s| s.kernels.len())
            .sum()
    }

    pub fn describe(&self) -> Vec<String> {
        self.launches
            .iter()
            .map(|l| {
                let stages: Vec<String> = l
                    .stages
                    .iter()
                    .map(|s| {
                        let ks: Vec<String> = s
                            .kernels
                            .iter()
                            .map(|k| format!("k{}@{}..{}", k.kernel, k.cores.start, k.cores.end))
                            .collect();
                        ks.join("|")
                    })
                    .collect();
                format!("{}[{}]", l.kind(), stages.join(" ; "))
            })
            .collect()
    }
}

/// Cores per kernel proportional to tile counts: largest remainder, at least
/// one core each, never more cores than tiles.
pub fn split_cores(tiles: &[usize], n: usize) -> Vec<usize> {
    assert!(!tiles.is_empty() && tiles.len() <= n, "need 1..=n kernels");
    let total: usize = tiles.iter().sum::<usize>().max(1);
    let quota: Vec<f64> = tiles
        .iter()
        .map(|&t| n as f64 * t as f64 / total as f64)
        .collect();
    let mut cores: Vec<usize> = quota.iter().map(|q| (q.floor() as usize).max(1)).collect();
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quota[a] - quota[a].floor();
        let rb = quota[b] - quota[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut i = 0;
    while cores.iter().sum::<usize>() < n {
        cores[order[i % order.len()]] += 1;
        i += 1;
    }
    while cores.iter().sum::<usize>() > n {
        let big = (0..cores.len())
            .max_by_key(|&k| (cores[k], std::cmp::Reverse(k)))
            .unwrap();
        cores[big] -= 1;
    }
    cores
        .iter()
        .zip(tiles)
        .map(|(&c, &t)| c.min(t.max(1)))
        .collect()
}

fn stage_of(kernels: &[usize], tiles: &[usize], n: usize) -> Stage {
    let t: Vec<usize> = kernels.iter().map(|&k| tiles[k]).collect();
    let split = if kernels.len() == 1 {
        vec![n.min(t[0].max(1))]
    } else {
        split_cores(&t, n)
    };
    let mut start = 0;
    let slots = kernels
        .iter()
        .zip(split)
        .map(|(&k, c)| {
            let slot = KernelSlot {
                kernel: k,
                tiles: tiles[k],
                cores: start..start + c,
            };
            start += c;
            slot
        })
        .collect();
    Stage { kernels: slots }
}

/// Groups kernels (in issue order) into spatial stages of mutually
/// independent kernels, then chains stages temporally within the tile budget.
/// `deps[k]` lists the earlier kernels that `k` reads from.
pub fn plan_stacking(tiles: &[usize], deps: &[Vec<usize>], n: usize) -> StackPlan {
    assert_eq!(deps.len(), tiles.len(), "one dependency list per kernel");
    let mut stages: Vec<Vec<usize>> = Vec::new();
    for (k, dk) in deps.iter().enumerate() {
        let joins = stages
            .last()
            .is_some_and(|s| s.len() < n && !s.iter().any(|j| dk.contains(j)));
        if joins {
            stages.last_mut().unwrap().push(k);
        } else {
            stages.push(vec![k]);
        }
    }
    let mut plan = StackPlan::default();
    let mut budget = 0;
    for s in stages {
        let stage = stage_of(&s, tiles, n);
        let bt = stage.body_tiles();
        match plan.launches.last_mut() {
            Some(l) if budget + bt <= TEMPORAL_TILE_BUDGET => {
                l.stages.push(stage);
                budget += bt;
            }
            _ => {
                plan.launches.push(Launch {
                    stages: vec![stage],
                });
                budget = bt;
            }
        }
    }
    plan
}

/// One launch per kernel, each on all the cores it can use.
pub fn sequential_plan(tiles: &[usize], n: usize) -> StackPlan {
    StackPlan {
        launches: (0..tiles.len())
            .map(|k| Launch {
                stages: vec![stage_of(&[k], tiles, n)],
            })
            .collect(),
    }
}
