mod common;

use proptest::prelude::*;

use common::{
    group_traffic, random_cube_case, random_vector_graph, run_case, same_outputs, static_fusion,
};
use tilecode::fuser::GroupKind;
use tilecode::runtime::{run_static, RunOptions};
use tilecode::tiler::DeviceConfig;

fn assert_checked(desc: &str, report: &tilecode::runtime::RunReport) {
    let check = report.check.as_ref().unwrap();
    assert!(check.pass, "{desc}: {:?}", check.tensors);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vector_graphs_match_oracle(seed in any::<u64>()) {
        let case = random_vector_graph(seed);
        let cfg = DeviceConfig::default();
        let fused = run_case(&case, &cfg, true);
        assert_checked(&case.desc, &fused);
        let single = run_case(&case, &cfg, false);
        assert_checked(&case.desc, &single);
        prop_assert!(same_outputs(&case.graph, &fused, &single), "{}", case.desc);
    }

    #[test]
    fn cube_cases_match_oracle(seed in any::<u64>()) {
        let case = random_cube_case(seed);
        let report = run_case(&case, &DeviceConfig::default(), true);
        assert_checked(&case.desc, &report);
    }

    #[test]
    fn small_devices_match_oracle(seed in any::<u64>(), cores in 1usize..=8, mem_kb in 8usize..=64) {
        let case = random_vector_graph(seed);
        let cfg = DeviceConfig::new(cores, mem_kb * 1024, 32).unwrap();
        let report = run_case(&case, &cfg, true);
        assert_checked(&case.desc, &report);
    }

    #[test]
    fn fused_vector_groups_move_fewer_bytes(seed in any::<u64>()) {
        let case = random_vector_graph(seed);
        let cfg = DeviceConfig::default();
        let g = case.graph.concretize().unwrap();
        for grp in static_fusion(&case.graph, &cfg) {
            if grp.kind == GroupKind::VvPattern && grp.ops.len() >= 2 {
                let (fused, single) = group_traffic(&g, &grp, &cfg);
                prop_assert!(fused < single, "{}: {} fused={fused} single={single}", case.desc, grp.label(&g));
            }
        }
    }

    #[test]
    fn sequential_and_parallel_cores_agree(seed in any::<u64>()) {
        let case = random_vector_graph(seed);
        let cfg = DeviceConfig::default();
        let run = |parallel| {
            let opts = RunOptions { parallel, ..RunOptions::default() };
            run_static(&case.graph, &case.inputs, &cfg, &opts).unwrap().render()
        };
        prop_assert_eq!(run(true), run(false));
    }
}
