mod common;

use proptest::prelude::*;

use common::{random_cube_case, random_vector_graph, static_fusion, Case};
use tilecode::encoder::{check_syncs, insert_syncs};
use tilecode::isa::{
    encode_program, Extras, InstructionKind, KernelType, ProgramHeader, Queue, SyncFlag,
    VirtualInstruction,
};
use tilecode::runtime::{compile_kernel, with_block_dim, Allocator};
use tilecode::tiler::{DeviceConfig, TimingParams};
use tilecode::vm::simulate_timing;

/// Compiled programs of every static group of `case`.
fn programs(case: &Case, cfg: &DeviceConfig) -> Vec<tilecode::encoder::CompiledKernel> {
    let g = case.graph.concretize().unwrap();
    let mut alloc = Allocator::default();
    static_fusion(&case.graph, cfg)
        .iter()
        .map(|grp| compile_kernel(&g, grp, &mut alloc, cfg).unwrap().compiled)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compiled_bodies_are_synchronized(seed in any::<u64>(), cube in any::<bool>()) {
        let case = if cube { random_cube_case(seed) } else { random_vector_graph(seed) };
        for k in programs(&case, &DeviceConfig::default()) {
            prop_assert!(check_syncs(&k.body).is_ok(), "{}: {:?}", case.desc, check_syncs(&k.body));
        }
    }

    #[test]
    fn stripping_syncs_is_detected(seed in any::<u64>()) {
        let case = random_vector_graph(seed);
        for k in programs(&case, &DeviceConfig::default()) {
            let bare: Vec<VirtualInstruction> = k.body.iter().filter(|i| !i.kind.is_sync()).cloned().collect();
            let cross_queue = bare.windows(2).any(|w| w[0].queue() != w[1].queue());
            if cross_queue {
                prop_assert!(check_syncs(&bare).is_err());
            }
            let again = insert_syncs(&bare).unwrap();
            prop_assert!(check_syncs(&again).is_ok());
        }
    }

    #[test]
    fn decode_is_hidden_when_cheap(seed in any::<u64>(), cube in any::<bool>(), cores in 1usize..=40, scale in 0.0f64..=1.0) {
        let case = if cube { random_cube_case(seed) } else { random_vector_graph(seed) };
        let base = DeviceConfig::new(cores, 192 * 1024, 32).unwrap();
        for k in programs(&case, &base) {
            let p = with_block_dim(&k.program, cores);
            let min_unit = simulate_timing(&p, &DeviceConfig { timing: TimingParams { decode: 0.0, ..base.timing }, ..base.clone() })
                .unwrap()
                .cores
                .iter()
                .filter(|c| c.tiles > 0)
                .map(|c| c.busy.dma.max(c.busy.vector).max(c.busy.cube) / c.tiles as f64)
                .fold(f64::INFINITY, f64::min);
            let decode = scale * min_unit / k.body.len() as f64;
            let cfg = DeviceConfig { timing: TimingParams { decode, ..base.timing }, ..base.clone() };
            let stats = simulate_timing(&p, &cfg).unwrap();
            prop_assert!(stats.decode_hidden, "{} d={decode} makespan={} zero={}", case.desc, stats.makespan, stats.zero_decode_makespan);
            prop_assert!(stats.makespan >= stats.zero_decode_makespan);
        }
    }

    #[test]
    fn makespan_bounds_queue_work(seed in any::<u64>(), cores in 1usize..=40) {
        let case = random_vector_graph(seed);
        let cfg = DeviceConfig::new(cores, 192 * 1024, 32).unwrap();
        for k in programs(&case, &cfg) {
            let stats = simulate_timing(&with_block_dim(&k.program, cores), &cfg).unwrap();
            for c in &stats.cores {
                prop_assert!(stats.makespan + 1e-9 >= c.busy.max());
            }
            let tiles: u64 = stats.cores.iter().map(|c| c.tiles).sum();
            prop_assert_eq!(tiles, k.program.header.total_tiles as u64);
        }
    }

    #[test]
    fn pipeline_identity(d in 0.0f64..=4.0, extra in 0.0f64..=50.0, k in 1u32..=64) {
        // Three zero-cost syncs then one vector op per tile; a body decode of 4d <= e keeps decode ahead.
        let e = (4.0 * d + extra).ceil().max(1.0);
        let f0 = SyncFlag::new(0, Queue::Dma, Queue::Vector);
        let f1 = SyncFlag::new(1, Queue::Dma, Queue::Vector);
        let n = e as u32;
        let body = vec![
            VirtualInstruction::sync_set(f0),
            VirtualInstruction::sync_wait(f0),
            VirtualInstruction::sync_set(f1),
            VirtualInstruction::new(InstructionKind::Sqrt, 0, vec![0], n, n * k, Extras::None),
        ];
        let p = encode_program(ProgramHeader::new(KernelType::Vector, k, 1), &body).unwrap();
        let cfg = DeviceConfig {
            num_cores: 1,
            timing: TimingParams { decode: d, vector_per_elem: 1.0, sync: 0.0, ..TimingParams::default() },
            ..DeviceConfig::default()
        };
        let stats = simulate_timing(&p, &cfg).unwrap();
        prop_assert!((stats.makespan - (4.0 * d + k as f64 * e)).abs() <= 1e-9 * stats.makespan.max(1.0));
        prop_assert!(stats.decode_hidden);
    }
}
