//! Memory planning on real derived graphs: lifetime cross-checks, reorder
//! peak reduction, allocator bounds, the analytic extra-memory model and its
//! graph-walk oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tinytrain_core::graph::{
    build_backbone, derive_backward, BackboneConfig, Graph, GraphMode, OpKind, StorageClass,
};
use tinytrain_core::memplan::{
    analytic_extra_memory, analyze_lifetimes, naive_schedule, reorder, simulate_peak,
};
use tinytrain_core::sparse::{
    apply_scheme, prune_backward, Ratio, SelectPolicy, UpdateScheme, WeightUpdate,
};
use tinytrain_core::train::slice_for_scheme;

fn compiled_graph(bundle: &tinytrain_core::graph::ModelBundle, scheme: &UpdateScheme) -> Graph {
    let (mut sliced, _) = slice_for_scheme(bundle, scheme, SelectPolicy::Magnitude, 3).unwrap();
    apply_scheme(&mut sliced.graph, scheme).unwrap();
    let derived = derive_backward(&sliced.graph).unwrap();
    prune_backward(&derived, scheme).unwrap()
}

fn random_scheme(rng: &mut ChaCha8Rng, graph: &Graph) -> UpdateScheme {
    let layers = graph.layers.len();
    let k = rng.gen_range(0..=layers);
    let mut weight_updates = Vec::new();
    for layer in layers - k..layers {
        if rng.gen_bool(0.5) {
            weight_updates.push(WeightUpdate {
                layer,
                ratio: Ratio::Full,
            });
        }
    }
    UpdateScheme {
        bias_depth_k: k,
        weight_updates,
        classifier_trainable: true,
    }
}

#[test]
fn saved_activation_lifetime_brute_force_cross_check() {
    let bundle = build_backbone(&BackboneConfig::toy(2, 8, 3, 8), GraphMode::Quantized, 1).unwrap();
    let layers = bundle.graph.layers.len();
    let scheme = UpdateScheme {
        bias_depth_k: layers,
        weight_updates: vec![WeightUpdate { layer: layers - 1, ratio: Ratio::Full }],
        classifier_trainable: true,
    };
    let graph = compiled_graph(&bundle, &scheme);
    let sched = naive_schedule(&graph);
    let lifetimes = analyze_lifetimes(&graph, &sched).unwrap();

    let saved = graph.saved_activations();
    assert_eq!(saved.len(), 1);
    let tensor = saved[0];
    let lt = lifetimes.iter().find(|l| l.tensor == tensor).unwrap();

    // brute-force dependency scan: producer position and all consumer
    // positions straight from the schedule
    let pos = |nid| sched.order.iter().position(|&n| n == nid).unwrap();
    let producer = graph
        .nodes
        .iter()
        .find(|n| n.outputs.contains(&tensor))
        .map(|n| pos(n.id))
        .unwrap();
    let last_consumer = graph
        .nodes
        .iter()
        .filter(|n| n.inputs.contains(&tensor))
        .map(|n| pos(n.id))
        .max()
        .unwrap();
    assert_eq!(lt.first_def, producer);
    assert_eq!(lt.last_use, last_consumer);
    // and the last consumer is the weight-gradient node
    let consumer_ops: Vec<OpKind> = graph
        .nodes
        .iter()
        .filter(|n| n.inputs.contains(&tensor))
        .map(|n| n.op)
        .collect();
    assert!(consumer_ops.iter().any(|op| op.is_weight_grad()));
}

#[test]
fn reorder_never_exceeds_naive_peak_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..12 {
        let blocks = 1 + trial % 3;
        let bundle = build_backbone(
            &BackboneConfig::toy(blocks, 8, 3, 8),
            GraphMode::Quantized,
            trial as u64,
        )
        .unwrap();
        let scheme = random_scheme(&mut rng, &bundle.graph);
        let graph = compiled_graph(&bundle, &scheme);
        let naive = simulate_peak(&graph, &naive_schedule(&graph)).unwrap();
        let reordered = simulate_peak(&graph, &reorder(&graph)).unwrap();
        assert!(
            reordered.peak_bytes <= naive.peak_bytes,
            "trial {trial}: reorder {} > naive {}",
            reordered.peak_bytes,
            naive.peak_bytes
        );
    }
}

#[test]
fn single_trainable_layer_peaks_are_equal() {
    let bundle = build_backbone(&BackboneConfig::toy(1, 8, 3, 8), GraphMode::Quantized, 2).unwrap();
    let layers = bundle.graph.layers.len();
    let scheme = UpdateScheme {
        bias_depth_k: 1,
        weight_updates: vec![WeightUpdate { layer: layers - 1, ratio: Ratio::Full }],
        classifier_trainable: false,
    };
    let graph = compiled_graph(&bundle, &scheme);
    let naive = simulate_peak(&graph, &naive_schedule(&graph)).unwrap();
    let reordered = simulate_peak(&graph, &reorder(&graph)).unwrap();
    assert_eq!(naive.peak_bytes, reordered.peak_bytes, "nothing to interlace");
}

#[test]
fn gradient_component_collapses_from_n_buffers_to_one() {
    // n trainable layers of gradient size G: the naive schedule holds all n
    // gradient buffers at once; reordering holds at most one weight-gradient
    // buffer plus transit gradients
    let bundle = build_backbone(&BackboneConfig::toy(2, 8, 4, 8), GraphMode::Quantized, 3).unwrap();
    let layers = bundle.graph.layers.len();
    let scheme = UpdateScheme::full_update(layers);
    let graph = compiled_graph(&bundle, &scheme);

    // total parameter-gradient bytes (the buffers GradDescent consumes)
    let grad_inputs: Vec<_> = graph
        .nodes
        .iter()
        .filter(|n| n.op == OpKind::GradDescent)
        .map(|n| n.inputs[1])
        .collect();
    let total_param_grad_bytes: usize = grad_inputs
        .iter()
        .map(|t| graph.tensor(*t).bytes())
        .sum();

    let naive = simulate_peak(&graph, &naive_schedule(&graph)).unwrap();
    let reordered = simulate_peak(&graph, &reorder(&graph)).unwrap();
    let naive_grad_peak = naive.curve.iter().map(|r| r.gradients).max().unwrap();
    let reordered_grad_peak = reordered.curve.iter().map(|r| r.gradients).max().unwrap();

    // all parameter gradients coexist right before the first naive update
    assert!(
        naive_grad_peak >= total_param_grad_bytes,
        "naive gradient peak {naive_grad_peak} < sum of buffers {total_param_grad_bytes}"
    );
    assert!(
        reordered_grad_peak * 2 <= naive_grad_peak,
        "reordered gradient peak {reordered_grad_peak} vs naive {naive_grad_peak}"
    );
}

#[test]
fn mbv2_shaped_sparse_scheme_reorder_halves_peak() {
    // MobileNetV2-w0.35-shaped graph; weights of the last six blocks
    // updated (a sparse scheme: 18 of 51 layers). Reordering must cut the
    // simulated peak by at least 2x.
    let bundle = build_backbone(&BackboneConfig::mbv2_w035(10), GraphMode::Quantized, 4).unwrap();
    let layers = bundle.graph.layers.len();
    let k = 18;
    let scheme = UpdateScheme {
        bias_depth_k: k,
        weight_updates: (layers - k..layers)
            .map(|layer| WeightUpdate { layer, ratio: Ratio::Full })
            .collect(),
        classifier_trainable: true,
    };
    let graph = compiled_graph(&bundle, &scheme);
    let naive = simulate_peak(&graph, &naive_schedule(&graph)).unwrap();
    let reordered = simulate_peak(&graph, &reorder(&graph)).unwrap();
    let factor = naive.peak_bytes as f64 / reordered.peak_bytes as f64;
    assert!(
        factor >= 2.0,
        "reordering reduced peak only {factor:.2}x (naive {} vs reordered {})",
        naive.peak_bytes,
        reordered.peak_bytes
    );
    // sanity: the factor lands in the plausible range for this scale
    assert!(factor < 20.0, "factor {factor:.2} suspiciously large");
}

#[test]
fn allocator_bounds_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..10 {
        let bundle = build_backbone(
            &BackboneConfig::toy(1 + trial % 2, 8, 3, 8),
            GraphMode::Quantized,
            trial as u64 + 40,
        )
        .unwrap();
        let scheme = random_scheme(&mut rng, &bundle.graph);
        let graph = compiled_graph(&bundle, &scheme);
        let sched = reorder(&graph);
        let profile = simulate_peak(&graph, &sched).unwrap();
        let lifetimes = analyze_lifetimes(&graph, &sched).unwrap();
        let max_live = profile.curve.iter().map(|r| r.bytes).max().unwrap();
        let total: usize = lifetimes.iter().map(|l| l.bytes).sum();
        assert!(profile.arena_bytes >= max_live, "arena below live-set lower bound");
        assert!(profile.arena_bytes <= total, "arena exceeds sum of all tensors");
        assert_eq!(profile.peak_bytes, max_live);
    }
}

#[test]
fn fusion_ghosts_reduce_simulated_peak_on_elementwise_chain() {
    use tinytrain_core::graph::{Attrs, DType};
    use tinytrain_core::qtensor::Shape;
    let mut g = Graph::new();
    let x = g.add_tensor(
        Shape::new(&[1, 4096]).unwrap(),
        DType::F32,
        StorageClass::SramActivation,
    );
    g.inputs.push(x);
    let mut cur = x;
    for _ in 0..4 {
        let (_, outs) = g
            .add_node(OpKind::ReLU6, vec![cur], Attrs::new(), StorageClass::SramActivation)
            .unwrap();
        cur = outs[0];
    }
    let sched = reorder(&g);
    assert!(
        !sched.fusion_groups.is_empty(),
        "elementwise chain must produce fusion groups"
    );
    let fused = simulate_peak(&g, &sched).unwrap();
    let mut unfused = sched.clone();
    unfused.fusion_groups.clear();
    let raw = simulate_peak(&g, &unfused).unwrap();
    assert!(fused.peak_bytes < raw.peak_bytes);
}

#[test]
fn analytic_memory_matches_pruned_graph_walk() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let bundle = build_backbone(&BackboneConfig::toy(2, 8, 4, 8), GraphMode::Quantized, 8).unwrap();
    for _ in 0..20 {
        let mut scheme = random_scheme(&mut rng, &bundle.graph);
        // sprinkle partial ratios onto sliceable layers
        for wu in &mut scheme.weight_updates {
            if bundle.graph.layers[wu.layer].kind != tinytrain_core::graph::LayerKind::Depthwise
                && rng.gen_bool(0.5)
            {
                wu.ratio = [Ratio::Half, Ratio::Quarter][rng.gen_range(0..2)];
            }
        }
        let (mut sliced, _) =
            slice_for_scheme(&bundle, &scheme, SelectPolicy::Magnitude, 5).unwrap();
        apply_scheme(&mut sliced.graph, &scheme).unwrap();
        let derived = derive_backward(&sliced.graph).unwrap();
        let pruned = prune_backward(&derived, &scheme).unwrap();

        let analytic = analytic_extra_memory(&sliced.graph, &scheme).unwrap();

        // oracle: walk the pruned backward graph and sum saved activations
        // plus trainable parameter copies
        let mut walk = 0u64;
        for t in pruned.saved_activations() {
            walk += pruned.tensor(t).bytes() as u64;
        }
        for p in &pruned.params {
            if p.trainable {
                walk += pruned.tensor(p.tensor).bytes() as u64;
            }
        }
        assert_eq!(analytic, walk, "scheme {scheme:?}");
    }
}

#[test]
fn analytic_memory_floors_and_hand_count() {
    let bundle = build_backbone(&BackboneConfig::toy(2, 8, 4, 8), GraphMode::Quantized, 9).unwrap();
    let g = &bundle.graph;
    let layers = g.layers.len();

    // classifier-only: exactly the classifier weight+bias copy
    let floor = analytic_extra_memory(g, &UpdateScheme::classifier_only()).unwrap();
    let classifier_bytes: u64 = g
        .params
        .iter()
        .filter(|p| p.layer.is_none())
        .map(|p| g.tensor(p.tensor).bytes() as u64)
        .sum();
    assert_eq!(floor, classifier_bytes);

    // bias-only: classifier + all bias copies, zero activation bytes
    let bias_only = analytic_extra_memory(g, &UpdateScheme::bias_only(layers)).unwrap();
    let bias_bytes: u64 = g
        .layers
        .iter()
        .flat_map(|l| l.parts.iter())
        .map(|p| g.tensor(p.bias).bytes() as u64)
        .sum();
    assert_eq!(bias_only, classifier_bytes + bias_bytes);

    // one weight-updated layer at r = 1/2: input activation + half the
    // weight copy + all bias copies
    let layer = layers - 1;
    let scheme = UpdateScheme {
        bias_depth_k: layers,
        weight_updates: vec![WeightUpdate { layer, ratio: Ratio::Half }],
        classifier_trainable: true,
    };
    let got = analytic_extra_memory(g, &scheme).unwrap();
    let input_bytes = g.tensor(g.layers[layer].input).bytes() as u64;
    let weight_bytes = g.tensor(g.layers[layer].parts[0].weight).bytes() as u64;
    assert_eq!(got, classifier_bytes + bias_bytes + input_bytes + weight_bytes / 2);
}

#[test]
fn analytic_memory_is_monotone() {
    let bundle = build_backbone(&BackboneConfig::toy(2, 8, 4, 8), GraphMode::Quantized, 10).unwrap();
    let g = &bundle.graph;
    let layers = g.layers.len();
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for _ in 0..30 {
        let scheme = random_scheme(&mut rng, g);
        let base = analytic_extra_memory(g, &scheme).unwrap();

        // k + 1
        if scheme.bias_depth_k < layers {
            let mut bigger = scheme.clone();
            bigger.bias_depth_k += 1;
            assert!(analytic_extra_memory(g, &bigger).unwrap() >= base);
        }
        // extra weight layer
        let candidates: Vec<usize> = (layers - scheme.bias_depth_k..layers)
            .filter(|l| scheme.ratio_for(*l).is_none())
            .collect();
        if let Some(&layer) = candidates.first() {
            let mut bigger = scheme.clone();
            bigger.weight_updates.push(WeightUpdate { layer, ratio: Ratio::Quarter });
            assert!(analytic_extra_memory(g, &bigger).unwrap() >= base);
        }
        // ratio step up
        if let Some(wu) = scheme.weight_updates.first() {
            let mut bigger = scheme.clone();
            bigger.weight_updates[0] = WeightUpdate {
                layer: wu.layer,
                ratio: Ratio::Full,
            };
            assert!(analytic_extra_memory(g, &bigger).unwrap() >= base);
        }
    }
}
