#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dcac/tensor.hpp"

namespace dcac {

// Reverse-mode autodiff node. A forward pass builds a DAG of Vars; backward()
// runs the stored closures in reverse topological order. Parameters are
// long-lived leaf Vars whose grads persist until zeroed by the optimizer.
struct Var;
using VarPtr = std::shared_ptr<Var>;

struct Var {
    Tensor value;
    Tensor grad;  // allocated on first accumulation, same shape as value
    bool requires_grad = false;
    std::vector<VarPtr> parents;
    std::function<void(Var&)> backward_fn;  // reads this->grad, accumulates into parents

    void ensure_grad() {
        if (grad.shape != value.shape) grad = Tensor(value.shape);
    }
    void zero_grad() {
        if (grad.shape == value.shape) grad.fill(0.f);
    }
};

VarPtr make_leaf(Tensor value, bool requires_grad);
inline VarPtr make_const(Tensor value) { return make_leaf(std::move(value), false); }
inline VarPtr make_param(Tensor value) { return make_leaf(std::move(value), true); }

// Scalar seed backward from `root` (must have numel 1).
void backward(const VarPtr& root);

// While alive, ops record no graph (outputs have requires_grad=false and no
// backward closures). Used for inference paths.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

}  // namespace dcac
