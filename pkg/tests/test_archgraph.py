import numpy as np
import pytest

from esnac import (ArchGraph, InvalidGraphError, InvalidPlanError, LayerNode,
                   MutationPlan, SamplePolicy, apply_mutation, chain_teacher,
                   load_graph, param_count, removable_nodes, residual_teacher,
                   sample_compressed, sample_plan, save_graph, shrink_groups,
                   validate_plan)


def conv(id, cin, cout, spatial, k=3, stride=1, padding=1, group=1):
    out_sp = (spatial + 2 * padding - k) // stride + 1
    return LayerNode(id, "conv", kernel_size=k, stride=stride, padding=padding,
                     group=group, in_channels=cin, out_channels=cout,
                     in_spatial=spatial, out_spatial=out_sp)


def relu(id, ch, spatial):
    return LayerNode(id, "relu", in_channels=ch, out_channels=ch,
                     in_spatial=spatial, out_spatial=spatial)


def bn(id, ch, spatial):
    return LayerNode(id, "batch_norm", in_channels=ch, out_channels=ch,
                     in_spatial=spatial, out_spatial=spatial)


def chain_edges(n):
    return frozenset((i, i + 1) for i in range(n - 1))


class TestLayerNode:
    def test_meaningless_attributes_must_be_zero(self):
        with pytest.raises(InvalidGraphError):
            ArchGraph((LayerNode(0, "relu", kernel_size=3, in_channels=4,
                                 out_channels=4, in_spatial=8, out_spatial=8),),
                      frozenset())

    def test_relu_must_preserve_channels(self):
        with pytest.raises(InvalidGraphError):
            ArchGraph((LayerNode(0, "relu", in_channels=4, out_channels=8,
                                 in_spatial=8, out_spatial=8),), frozenset())

    def test_fc_needs_unit_spatial(self):
        with pytest.raises(InvalidGraphError):
            ArchGraph((LayerNode(0, "fc", in_channels=4, out_channels=2,
                                 in_spatial=2, out_spatial=2),), frozenset())

    def test_group_must_divide_channels(self):
        with pytest.raises(InvalidGraphError):
            conv_bad = LayerNode(0, "conv", kernel_size=3, stride=1, padding=1,
                                 group=3, in_channels=4, out_channels=8,
                                 in_spatial=8, out_spatial=8)
            ArchGraph((conv_bad,), frozenset())

    def test_out_spatial_checked(self):
        with pytest.raises(InvalidGraphError):
            LayerNode(0, "conv", kernel_size=3, stride=2, padding=1, group=1,
                      in_channels=4, out_channels=4, in_spatial=8, out_spatial=8)
            ArchGraph((LayerNode(0, "conv", kernel_size=3, stride=2, padding=1,
                                 group=1, in_channels=4, out_channels=4,
                                 in_spatial=8, out_spatial=8),), frozenset())


class TestGraphValidation:
    def test_edges_point_forward(self):
        nodes = (conv(0, 3, 8, 8), relu(1, 8, 8), conv(2, 8, 8, 8))
        with pytest.raises(InvalidGraphError):
            ArchGraph(nodes, frozenset({(0, 1), (2, 1)}))

    def test_edge_dimensions_must_agree(self):
        nodes = (conv(0, 3, 8, 8), relu(1, 16, 8))
        with pytest.raises(InvalidGraphError):
            ArchGraph(nodes, frozenset({(0, 1)}))

    def test_single_source_and_sink(self):
        nodes = (conv(0, 3, 8, 8), relu(1, 8, 8), relu(2, 8, 8))
        with pytest.raises(InvalidGraphError):
            # node 1 and node 2 are both sinks
            ArchGraph(nodes, frozenset({(0, 1), (0, 2)}))

    def test_builders_validate(self, chain, resnet):
        assert len(chain) >= 2
        assert len(resnet) >= 2

    def test_document_round_trip(self, tmp_path, resnet):
        path = tmp_path / "g.json"
        save_graph(resnet, path)
        loaded = load_graph(path)
        assert loaded.nodes == resnet.nodes
        assert loaded.edges == resnet.edges
        assert loaded.teacher_ref == resnet.teacher_ref

    def test_from_document_rejects_wrong_format(self, resnet):
        doc = resnet.to_document()
        doc["format"] = "something/9"
        with pytest.raises(InvalidGraphError):
            ArchGraph.from_document(doc)


class TestParamCount:
    def test_conv_hand_value(self):
        # 3x3, 16 -> 32, group 1, with bias: 3*3*16*32 + 32
        g = ArchGraph((conv(0, 16, 32, 8),), frozenset())
        assert param_count(g) == 4640

    def test_grouped_conv(self):
        g = ArchGraph((conv(0, 16, 32, 8, group=4),), frozenset())
        assert param_count(g) == 3 * 3 * 4 * 32 + 32

    def test_depthwise(self):
        nd = LayerNode(0, "conv_dw", kernel_size=3, stride=1, padding=1,
                       group=16, in_channels=16, out_channels=16,
                       in_spatial=8, out_spatial=8)
        assert param_count(ArchGraph((nd,), frozenset())) == 3 * 3 * 1 * 16 + 16

    def test_fc_and_bn(self):
        fc = LayerNode(1, "fc", in_channels=32, out_channels=10,
                       in_spatial=1, out_spatial=1)
        gap = LayerNode(0, "global_avg_pool", in_channels=32, out_channels=32,
                        in_spatial=4, out_spatial=1)
        g = ArchGraph((gap, fc), frozenset({(0, 1)}))
        assert param_count(g) == 32 * 10 + 10
        assert param_count(ArchGraph((bn(0, 7, 4),), frozenset())) == 14

    def test_activation_only_graph(self):
        g = ArchGraph((relu(0, 4, 8), relu(1, 4, 8)), frozenset({(0, 1)}))
        assert param_count(g) == 0

    def test_skip_edge_is_free(self, resnet):
        plan = MutationPlan()
        assert param_count(apply_mutation(resnet, plan)) == param_count(resnet)


class TestRemovableNodes:
    def test_square_conv_in_middle_is_removable(self):
        nodes = (conv(0, 3, 16, 8), conv(1, 16, 16, 8), conv(2, 16, 16, 8))
        g = ArchGraph(nodes, chain_edges(3))
        assert removable_nodes(g) == {1}

    def test_widening_conv_is_not(self):
        nodes = (conv(0, 3, 16, 8), conv(1, 16, 32, 8), conv(2, 32, 32, 8))
        g = ArchGraph(nodes, chain_edges(3))
        assert removable_nodes(g) == frozenset()

    def test_spatial_change_blocks_removal(self):
        pool = LayerNode(1, "max_pool", kernel_size=2, stride=2, padding=0,
                         in_channels=16, out_channels=16, in_spatial=8,
                         out_spatial=4)
        nodes = (conv(0, 3, 16, 8), pool, conv(2, 16, 16, 4))
        g = ArchGraph(nodes, chain_edges(3))
        assert removable_nodes(g) == frozenset()

    def test_single_node_graph(self):
        g = ArchGraph((conv(0, 3, 8, 8),), frozenset())
        assert removable_nodes(g) == frozenset()


class TestShrinkGroups:
    def test_grouped_by_dimension_pair(self):
        nodes = (conv(0, 3, 64, 8), conv(1, 64, 64, 8), conv(2, 64, 64, 8),
                 conv(3, 64, 128, 8))
        g = ArchGraph(nodes, chain_edges(4))
        groups = shrink_groups(g)
        assert groups[(64, 64)] == (1, 2)
        assert groups[(64, 128)] == (3,)

    def test_unparameterized_graph_has_no_groups(self):
        g = ArchGraph((relu(0, 4, 8), relu(1, 4, 8)), frozenset({(0, 1)}))
        assert shrink_groups(g) == {}


class TestApplyMutation:
    def test_identity_plan(self, resnet):
        out = apply_mutation(resnet, MutationPlan())
        assert out.nodes == resnet.nodes
        assert out.edges == resnet.edges

    def test_removal_from_chain(self):
        nodes = tuple([conv(0, 3, 16, 8)] + [conv(i, 16, 16, 8) for i in range(1, 5)])
        g = ArchGraph(nodes, chain_edges(5))
        out = apply_mutation(g, MutationPlan(removals={2}))
        assert len(out) == 4
        assert out.edges == chain_edges(4)
        assert param_count(out) < param_count(g)

    def test_removal_splices_all_pairs(self):
        # diamond with a removable join node: both branches reconnect to the sink
        nodes = (conv(0, 3, 8, 8), conv(1, 8, 8, 8), conv(2, 8, 8, 8),
                 relu(3, 8, 8), conv(4, 8, 8, 8))
        edges = frozenset({(0, 1), (0, 2), (1, 3), (2, 3), (3, 4)})
        g = ArchGraph(nodes, edges)
        out = apply_mutation(g, MutationPlan(removals={3}))
        assert (1, 3) in out.edges and (2, 3) in out.edges  # re-indexed sink is 3
        assert len(out.edges) == 4

    def test_skip_only_plan_preserves_params(self):
        nodes = (conv(0, 3, 16, 8), conv(1, 16, 16, 8), conv(2, 16, 16, 8))
        g = ArchGraph(nodes, chain_edges(3))
        out = apply_mutation(g, MutationPlan(added_skips={(0, 2)}))
        assert param_count(out) == param_count(g)
        assert len(out.edges) == len(g.edges) + 1

    def test_shrink_rounds_half_up_with_floor_one(self):
        nodes = (conv(0, 3, 15, 8), conv(1, 15, 15, 8), conv(2, 15, 15, 8))
        g = ArchGraph(nodes, chain_edges(3))
        out = apply_mutation(g, MutationPlan(shrink_ratios={(15, 15): 0.5}))
        # 15 * 0.5 = 7.5 rounds up to 8; the source conv (3, 15) keeps its width
        assert out.nodes[1].out_channels == 8
        assert out.nodes[1].in_channels == 15
        assert out.nodes[2].in_channels == 8

        tiny = apply_mutation(
            ArchGraph((conv(0, 3, 2, 8), conv(1, 2, 2, 8), conv(2, 2, 2, 8)),
                      chain_edges(3)),
            MutationPlan(shrink_ratios={(2, 2): 0.25}))
        assert tiny.nodes[1].out_channels == 1  # floor at 1

    def test_shrink_updates_group_via_gcd(self):
        nodes = (conv(0, 3, 16, 8), conv(1, 16, 16, 8, group=4),
                 conv(2, 16, 16, 8))
        g = ArchGraph(nodes, chain_edges(3))
        out = apply_mutation(g, MutationPlan(shrink_ratios={(16, 16): 0.75}))
        # 16 * 0.75 = 12; gcd(gcd(16, 12), 4) = 4 still divides both
        assert out.nodes[1].out_channels == 12
        assert out.nodes[1].group == 4
        out2 = apply_mutation(g, MutationPlan(shrink_ratios={(16, 16): 0.4375}))
        # 16 * 0.4375 = 7; gcd(gcd(16, 7), 4) = 1
        assert out2.nodes[1].out_channels == 7
        assert out2.nodes[1].group == 1

    def test_inconsistent_ratio_at_join_rejected(self):
        # branches with different dimension pairs feed a sum join; shrinking
        # only one branch must fail
        nodes = (conv(0, 3, 8, 8), conv(1, 8, 16, 8),
                 conv(2, 8, 4, 8, k=1, padding=0),
                 conv(3, 4, 16, 8, k=1, padding=0),
                 relu(4, 16, 8), conv(5, 16, 16, 8))
        edges = frozenset({(0, 1), (0, 2), (2, 3), (1, 4), (3, 4), (4, 5)})
        g = ArchGraph(nodes, edges)
        with pytest.raises(InvalidPlanError):
            apply_mutation(g, MutationPlan(shrink_ratios={(8, 16): 0.5}))

    def test_unknown_removal_rejected(self, chain):
        with pytest.raises(InvalidPlanError):
            apply_mutation(chain, MutationPlan(removals={0}))

    def test_unknown_group_rejected(self, chain):
        with pytest.raises(InvalidPlanError):
            apply_mutation(chain, MutationPlan(shrink_ratios={(999, 999): 0.5}))

    def test_existing_edge_rejected_as_skip(self, chain):
        a, b = sorted(chain.edges)[0]
        with pytest.raises(InvalidPlanError):
            apply_mutation(chain, MutationPlan(added_skips={(a, b)}))

    def test_validate_plan_passes_for_sampled_plans(self, resnet):
        for seed in range(30):
            plan = sample_plan(resnet, seed)
            validate_plan(resnet, plan)


class TestSampling:
    def test_deterministic_per_seed(self, resnet):
        a = sample_compressed(resnet, 123)
        b = sample_compressed(resnet, 123)
        assert a.nodes == b.nodes and a.edges == b.edges
        c = sample_compressed(resnet, 124)
        assert (a.nodes, a.edges) != (c.nodes, c.edges)

    def test_never_grows_parameter_count(self, resnet):
        base = param_count(resnet)
        for seed in range(200):
            assert param_count(sample_compressed(resnet, seed)) <= base

    def test_plan_reproduces_sample(self, resnet):
        for seed in range(50):
            plan = sample_plan(resnet, seed)
            built = apply_mutation(resnet, plan)
            direct = sample_compressed(resnet, seed)
            assert built.nodes == direct.nodes and built.edges == direct.edges

    def test_no_removal_unit_ratio_policy_only_adds_skips(self, resnet):
        policy = SamplePolicy(removal_prob=0.0, shrink_ratio_choices=(1.0,))
        for seed in range(20):
            out = sample_compressed(resnet, seed, policy)
            assert len(out) == len(resnet)
            assert tuple(nd for nd in out.nodes) == resnet.nodes
            assert out.edges >= resnet.edges

    def test_removal_frequency_matches_policy(self):
        teacher = residual_teacher(width=16, blocks=2)
        policy = SamplePolicy()
        removable = sorted(removable_nodes(teacher))
        counts = {v: 0 for v in removable}
        n = 1000
        for seed in range(n):
            plan = sample_plan(teacher, seed, policy)
            for v in plan.removals:
                counts[v] += 1
        for v in removable:
            assert abs(counts[v] / n - policy.removal_prob) < 0.05

    def test_mutations_all_validate(self):
        teacher = residual_teacher(width=16, blocks=2)
        rng = np.random.default_rng(0)
        for seed in rng.integers(0, 2**31, size=300):
            out = sample_compressed(teacher, int(seed))
            assert isinstance(out, ArchGraph)  # construction re-validates

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            SamplePolicy(removal_prob=1.5)
        with pytest.raises(ValueError):
            SamplePolicy(shrink_ratio_choices=(0.0,))
        with pytest.raises(ValueError):
            SamplePolicy(skip_count_choices=())
