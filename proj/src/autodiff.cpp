#include "dcac/autodiff.hpp"

#include <unordered_set>

namespace dcac {

namespace {
thread_local int g_no_grad_depth = 0;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

VarPtr make_leaf(Tensor value, bool requires_grad) {
    auto v = std::make_shared<Var>();
    v->value = std::move(value);
    v->requires_grad = requires_grad && grad_enabled();
    return v;
}

void backward(const VarPtr& root) {
    if (root->value.numel() != 1) throw ShapeError("backward: root must be scalar");
    // Post-order DFS (iterative; graphs can be deep for big batches).
    std::vector<Var*> order;
    std::unordered_set<Var*> seen;
    std::vector<std::pair<Var*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Var* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad.data[0] = 1.f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Var* v = *it;
        if (v->backward_fn && v->grad.shape == v->value.shape) v->backward_fn(*v);
    }
}

}  // namespace dcac
