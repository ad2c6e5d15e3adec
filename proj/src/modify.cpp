#include "ldp/modify.hpp"

#include <algorithm>
#include <set>

#include "ldp/error.hpp"

namespace ldp {

std::string AdapterSpec::describe() const {
    std::string s;
    if (pool > 1) s += "avg_pool(" + std::to_string(pool) + ")";
    if (has_channel_map()) {
        if (!s.empty()) s += "+";
        s += "conv1x1(" + std::to_string(in_channels) + "->" + std::to_string(out_channels) +
             ")";
    }
    if (up > 1) {
        if (!s.empty()) s += "+";
        s += "upsample(" + std::to_string(up) + ")";
    }
    return s.empty() ? "identity" : s;
}

std::string ModificationPlan::describe() const {
    return action == ModAction::Remove ? "remove" : "replace[" + adapter.describe() + "]";
}

ModificationPlan plan_modification(const OperatorGraph& g, const std::string& op_id) {
    const OperatorNode& node = g.at(op_id); // throws on unknown id
    require(is_candidate(g, node), "operator '", op_id, "' is not a pruning candidate");
    ModificationPlan plan;
    plan.target = op_id;
    const Shape& in = node.in_shape;
    const Shape& out = node.out_shape;
    require(!in.empty() && !out.empty(), op_id,
            ": shapes not inferred; run infer_shapes first");
    if (in == out) {
        plan.action = ModAction::Remove;
        return plan;
    }
    plan.action = ModAction::Replace;
    AdapterSpec& a = plan.adapter;
    if (in.size() == 1 && out.size() == 1) {
        a.in_channels = in[0];
        a.out_channels = out[0];
        return plan;
    }
    require(in.size() == 3 && out.size() == 3, op_id, ": cannot adapt ", shape_str(in),
            " -> ", shape_str(out));
    a.in_channels = in[0];
    a.out_channels = out[0];
    const int ih = in[1], iw = in[2], oh = out[1], ow = out[2];
    if (ih != oh || iw != ow) {
        require((ih > oh) == (iw > ow), op_id, ": mixed spatial change ", shape_str(in),
                " -> ", shape_str(out));
        if (ih > oh) {
            require(ih % oh == 0 && iw % ow == 0 && ih / oh == iw / ow, op_id,
                    ": spatial ratio ", ih, "x", iw, " -> ", oh, "x", ow,
                    " is not an integer factor");
            a.pool = ih / oh;
        } else {
            require(oh % ih == 0 && ow % iw == 0 && oh / ih == ow / iw, op_id,
                    ": spatial ratio ", ih, "x", iw, " -> ", oh, "x", ow,
                    " is not an integer factor");
            a.up = oh / ih;
        }
    }
    return plan;
}

namespace {

AdapterPayload make_adapter_payload(const AdapterSpec& spec) {
    AdapterPayload p;
    p.pool = spec.pool;
    p.up = spec.up;
    if (spec.has_channel_map()) {
        p.w = Tensor::full({spec.out_channels, spec.in_channels},
                           1.f / static_cast<float>(spec.in_channels), true);
        p.b = Tensor::zeros({spec.out_channels}, true);
    }
    return p;
}

// Redirect every reference to `from` onto `to`, recording each change.
void rewire_refs(OperatorGraph& g, const std::string& from, const std::string& to,
                 ModificationPlan& plan) {
    using RK = ModificationPlan::RefKind;
    for (auto& n : g.nodes) {
        if (!n.enabled) continue;
        for (size_t s = 0; s < n.inputs.size(); ++s)
            if (n.inputs[s] == from) {
                plan.rewires.push_back({RK::InputSlot, n.id, static_cast<int>(s), from});
                n.inputs[s] = to;
            }
        if (n.composite) {
            if (n.entry_input == from) {
                plan.rewires.push_back({RK::CompositeEntry, n.id, 0, from});
                n.entry_input = to;
            }
            if (n.exit_node == from) {
                plan.rewires.push_back({RK::CompositeExit, n.id, 0, from});
                n.exit_node = to;
            }
        }
    }
    if (g.output_id == from) {
        plan.rewires.push_back({RK::GraphOutput, "", 0, from});
        g.output_id = to;
    }
}

} // namespace

void apply(OperatorGraph& g, ModificationPlan& plan) {
    require(!plan.applied, "plan for '", plan.target, "' is already applied");
    require(g.active_modification.empty(), "another modification ('",
            g.active_modification, "') is active; restore it first");
    OperatorNode& node = g.at(plan.target);
    require(node.enabled, "operator '", plan.target, "' is disabled");

    if (!node.composite) {
        plan.saved_payload = node.payload;
        plan.payload_swapped = true;
        if (plan.action == ModAction::Remove) {
            // Attention sits on a residual branch; removing it must leave the
            // hidden stream unchanged, so the branch contributes zero.
            if (node.kind == OpKind::Attention)
                node.payload = ZeroPayload{};
            else
                node.payload = IdentityPayload{};
        } else {
            node.payload = make_adapter_payload(plan.adapter);
        }
    } else {
        // disable the whole subtree
        plan.disabled_nodes = g.descendants(plan.target);
        plan.disabled_nodes.push_back(plan.target);
        for (const auto& id : plan.disabled_nodes) g.at(id).enabled = false;
        const std::string exit = node.exit_node;
        const std::string entry = node.entry_input;
        if (plan.action == ModAction::Remove) {
            rewire_refs(g, exit, entry, plan);
        } else {
            OperatorNode a;
            a.id = plan.target + ":adapter";
            require(g.index_of(a.id) < 0, "adapter id collision for '", a.id, "'");
            a.kind = OpKind::Adapter;
            a.structural = true;
            a.inputs = {entry};
            a.payload = make_adapter_payload(plan.adapter);
            plan.inserted_node = a.id;
            plan.inserted_index = g.index_of(plan.target);
            g.nodes.insert(g.nodes.begin() + plan.inserted_index, std::move(a));
            g.rebuild_index();
            rewire_refs(g, exit, plan.inserted_node, plan);
        }
    }
    g.active_modification = plan.target;
    plan.applied = true;
    infer_shapes(g);
}

void restore(OperatorGraph& g, ModificationPlan& plan) {
    require(plan.applied, "plan for '", plan.target, "' is not applied");
    require(g.active_modification == plan.target, "plan '", plan.target,
            "' is not the active modification ('", g.active_modification, "')");
    using RK = ModificationPlan::RefKind;
    for (auto it = plan.rewires.rbegin(); it != plan.rewires.rend(); ++it) {
        switch (it->kind) {
            case RK::InputSlot: g.at(it->node).inputs[it->slot] = it->old_src; break;
            case RK::CompositeEntry: g.at(it->node).entry_input = it->old_src; break;
            case RK::CompositeExit: g.at(it->node).exit_node = it->old_src; break;
            case RK::GraphOutput: g.output_id = it->old_src; break;
        }
    }
    plan.rewires.clear();
    if (!plan.inserted_node.empty()) {
        g.nodes.erase(g.nodes.begin() + plan.inserted_index);
        g.rebuild_index();
        plan.inserted_node.clear();
        plan.inserted_index = -1;
    }
    for (const auto& id : plan.disabled_nodes) g.at(id).enabled = true;
    plan.disabled_nodes.clear();
    if (plan.payload_swapped) {
        g.at(plan.target).payload = std::move(plan.saved_payload);
        plan.payload_swapped = false;
    }
    g.active_modification.clear();
    plan.applied = false;
    infer_shapes(g);
}

void commit(OperatorGraph& g, ModificationPlan& plan) {
    require(plan.applied && g.active_modification == plan.target,
            "commit requires the applied active plan for '", plan.target, "'");
    g.active_modification.clear();
    // the plan keeps its record but can no longer be restored against this graph
    plan.applied = false;
    plan.rewires.clear();
    plan.disabled_nodes.clear();
    plan.payload_swapped = false;
    plan.inserted_node.clear();
}

// ---------------------------------------------------------------------------
// compact

namespace {

void remap_all_refs(OperatorGraph& g, const std::string& from, const std::string& to) {
    for (auto& n : g.nodes) {
        for (auto& src : n.inputs)
            if (src == from) src = to;
        if (n.composite) {
            if (n.entry_input == from) n.entry_input = to;
            if (n.exit_node == from) n.exit_node = to;
        }
    }
    if (g.output_id == from) g.output_id = to;
    for (auto& [a, b] : g.skip_links) {
        if (a == from) a = to;
        if (b == from) b = to;
    }
}

bool referenced(const OperatorGraph& g, const std::string& id) {
    if (g.output_id == id) return true;
    for (const auto& n : g.nodes) {
        if (!n.enabled) continue;
        for (const auto& src : n.inputs)
            if (src == id) return true;
        if (n.composite && (n.entry_input == id || n.exit_node == id)) return true;
    }
    for (const auto& [a, b] : g.skip_links)
        if (a == id || b == id) return true;
    for (const auto& t : g.tap_ids)
        if (t == id) return true;
    return false;
}

} // namespace

void compact(OperatorGraph& g) {
    require(g.active_modification.empty(),
            "compact with an active temporary modification ('", g.active_modification, "')");

    // 1. drop disabled nodes entirely
    std::erase_if(g.nodes, [](const OperatorNode& n) { return !n.enabled; });
    g.rebuild_index();

    // 2. splice identity stand-ins out of the dataflow
    for (auto& n : g.nodes)
        if (!n.composite && std::get_if<IdentityPayload>(&n.payload))
            remap_all_refs(g, n.id, n.inputs[0]);
    std::erase_if(g.nodes, [&g](const OperatorNode& n) {
        return !n.composite && std::get_if<IdentityPayload>(&n.payload) &&
               !referenced(g, n.id);
    });
    g.rebuild_index();

    // 3. splice adds whose branch input is a zeroed operator (x + 0 == x)
    for (auto& n : g.nodes) {
        if (!std::get_if<AddPayload>(&n.payload) || n.inputs.size() != 2) continue;
        const auto zeroed = [&](const std::string& id) {
            const int i = g.index_of(id);
            return i >= 0 && std::get_if<ZeroPayload>(&g.nodes[i].payload) != nullptr;
        };
        if (zeroed(n.inputs[1]))
            remap_all_refs(g, n.id, n.inputs[0]);
        else if (zeroed(n.inputs[0]))
            remap_all_refs(g, n.id, n.inputs[1]);
    }

    // 4. dead-code elimination: drop unreferenced non-output producers,
    //    pruning whole dead subgraphs iteratively
    bool changed = true;
    while (changed) {
        changed = false;
        for (size_t i = 0; i < g.nodes.size(); ++i) {
            const OperatorNode& n = g.nodes[i];
            if (n.composite) continue;
            if (referenced(g, n.id)) continue;
            g.nodes.erase(g.nodes.begin() + static_cast<long>(i));
            changed = true;
            break;
        }
        if (changed) g.rebuild_index();
    }

    // 5. prune composite children lists down to surviving nodes; drop empty
    //    composites
    for (auto& n : g.nodes) {
        if (!n.composite) continue;
        std::erase_if(n.children,
                      [&g](const std::string& c) { return g.index_of(c) < 0; });
    }
    std::erase_if(g.nodes, [](const OperatorNode& n) {
        return n.composite && n.children.empty();
    });
    g.rebuild_index();
    infer_shapes(g);
}

} // namespace ldp
