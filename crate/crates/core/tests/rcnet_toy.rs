mod common;

use rcfuse::fusion::partition;
use rcfuse::prune::{prune_to_budget, rcnet_iterate, GammaSource, GammaTable, RcnetConfig};

use common::{group_bytes, model_path, shipped};

const B: u64 = 100 * 1024;

fn gammas() -> GammaTable {
    GammaTable::load(model_path("toy_rcnet_gammas.csv")).unwrap()
}

/// Weight bytes a pointwise channel of `layer` carries: its own row plus
/// the next layer's input column.
fn channel_cost(layer_in: u64, next_out: u64) -> u64 {
    layer_in + next_out
}

#[test]
fn initial_groups() {
    let g = shipped("toy_rcnet.json");
    let plan = partition(&g, B, 0.5);
    let ids: Vec<Vec<usize>> = plan.groups.iter().map(|x| x.layer_ids.clone()).collect();
    assert_eq!(ids, vec![vec![0, 1, 2], vec![3, 4, 5]]);
    assert_eq!(plan.groups[0].weight_bytes, 144 * 1024);
    assert_eq!(plan.groups[1].weight_bytes, 128 * 1024);
}

#[test]
fn first_prune_takes_the_weakest_layer_of_each_group() {
    let g = shipped("toy_rcnet.json");
    let plan = partition(&g, B, 0.5);
    let (pg, d) = prune_to_budget(&g, &plan, &gammas(), B).unwrap();
    assert!(d.removed.iter().filter(|r| plan.groups[0].contains(r.0)).all(|r| r.0 == 1));
    assert!(d.removed.iter().filter(|r| plan.groups[1].contains(r.0)).all(|r| r.0 == 4));
    let c1 = channel_cost(96, 256);
    let c4 = channel_cost(96, 160);
    let n1 = (144 * 1024 - B).div_ceil(c1);
    let n4 = (128 * 1024 - B).div_ceil(c4);
    assert_eq!(pg.layers[1].out_channels as u64, 384 - n1);
    assert_eq!(pg.layers[4].out_channels as u64, 416 - n4);
    for (gi, grp) in plan.groups.iter().enumerate() {
        let size = group_bytes(&pg, &grp.layer_ids);
        assert_eq!(size, d.group_sizes[gi]);
        assert!(size <= B && size + c1.max(c4) > B);
    }
}

#[test]
fn second_iteration_regroups_and_prunes_again() {
    let g = shipped("toy_rcnet.json");
    let cfg = RcnetConfig {
        rescale_first_k: 0,
        ..RcnetConfig::new(B)
    };
    let out = rcnet_iterate(&g, &cfg, &GammaSource::Fixed(gammas())).unwrap();
    assert_eq!(out.iterations.len(), 2);
    let it2 = &out.iterations[1];
    assert_eq!(it2.groups, vec![vec![0, 1, 2, 3], vec![4, 5]]);
    assert_eq!(it2.group_sizes_before, vec![124 * 1024, 76 * 1024]);
    // 70 more channels of layer 1 at 352 bytes each
    assert_eq!(it2.group_sizes_after[0], 124 * 1024 - 70 * 352);
    assert_eq!(out.graph.layers[1].out_channels, 384 - 128 - 70);
    assert!(it2.group_sizes_after.iter().all(|&s| s <= B));
}

#[test]
fn rescale_restores_the_parameter_count() {
    let g = shipped("toy_rcnet.json");
    let out = rcnet_iterate(&g, &RcnetConfig::new(B), &GammaSource::Fixed(gammas())).unwrap();
    let it1 = &out.iterations[0];
    assert!(it1.rescale_factor.is_some());
    assert!(it1.params_after <= g.param_count());
    assert!(it1.params_after > it1.params_after_prune);
    assert!(out.iterations[1].group_sizes_after.iter().all(|&s| s <= B));
}
