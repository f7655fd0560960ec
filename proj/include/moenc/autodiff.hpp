#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "moenc/common.hpp"

namespace moenc::ad {

class Tape;

// Guard used inside p*log(p) style terms: log_eps(x) = log(max(x, eps)),
// so exact-zero probabilities contribute exactly zero entropy.
inline constexpr double kEntropyEps = 1e-12;

// One node of the computation record: either a leaf (parameter / input) or
// an executed operation with its inputs and backward rule.
struct Node {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;  // lazily allocated, same length as value
    bool requires_grad = false;
    const Tape* owner = nullptr;  // nullptr for leaves
    std::size_t index = 0;        // position on the owning tape
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;  // empty for leaves and no-grad ops

    std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }
    bool is_scalar() const { return value.size() == 1; }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
    void accumulate(std::span<const double> g);
};

using NodePtr = std::shared_ptr<Node>;

// Cheap handle to a node. Copies share the underlying storage.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : node_(std::move(n)) {}

    bool valid() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int rows() const;
    int cols() const;
    std::int64_t size() const { return node_->size(); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& value() const { return node_->value; }
    std::vector<double>& mutable_value() { return node_->value; }
    const std::vector<double>& grad() const;
    void zero_grad() { if (node_->requires_grad) node_->grad.assign(node_->value.size(), 0.0); }

    double scalar() const;
    double at(int i) const { return node_->value.at(static_cast<std::size_t>(i)); }
    double at(int r, int c) const { return node_->value.at(static_cast<std::size_t>(r) * cols() + c); }

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

std::int64_t shape_size(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Leaves live outside any tape; parameters persist across training steps.
Var leaf(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);
Var scalar_leaf(double v, bool requires_grad = false);
Var zeros(std::vector<int> shape, bool requires_grad = false);

void zero_grad(std::span<const Var> params);

// Result of max-with-index along an axis.
struct AxisMax {
    Var values;
    std::vector<int> indices;
};

// Eager, single-threaded record of operations in execution order. The record
// is topologically ordered by construction; backward() replays it in reverse.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // -- matrix / vector algebra ------------------------------------------
    Var matmul(const Var& a, const Var& b);          // [m,k] x [k,n] -> [m,n]
    Var vecmat(const Var& v, const Var& m);          // [k] x [k,n] -> [n]
    Var transpose(const Var& a);                     // [m,n] -> [n,m]

    // -- elementwise -------------------------------------------------------
    Var add(const Var& a, const Var& b);
    Var sub(const Var& a, const Var& b);
    Var mul(const Var& a, const Var& b);
    Var scale(const Var& a, double s);
    Var scale_var(const Var& a, const Var& s);       // s is a scalar node
    Var add_scalar(const Var& a, double c);
    Var add_rowvec(const Var& m, const Var& v);      // broadcast v over rows
    Var neg(const Var& a);
    Var log_eps(const Var& a, double eps = kEntropyEps);
    Var tanh(const Var& a);

    // -- reductions / structure ---------------------------------------------
    Var sum(const Var& a);
    Var mean(const Var& a);
    Var sum_axis(const Var& a, int axis);            // rank-2 -> rank-1
    Var mean_axis(const Var& a, int axis);
    AxisMax max_axis(const Var& a, int axis);        // ties -> lowest index
    Var concat(std::span<const Var> parts, int axis);
    Var concat(const Var& a, const Var& b, int axis);
    Var reshape(const Var& a, std::vector<int> shape);
    Var pick(const Var& a, int flat_index);          // -> scalar

    // -- nonlinear ----------------------------------------------------------
    // Normalizes along `axis` with max-subtraction; output sums to 1 there.
    Var softmax(const Var& a, int axis = 0);
    // Forward identity, backward annihilator.
    Var stop_gradient(const Var& a);

    // Extension point for ops defined by other modules. `backward` receives
    // the finished node and must push gradients into node.inputs.
    Var custom(std::vector<int> shape, std::vector<double> value,
               std::vector<Var> inputs, std::function<void(Node&)> backward);

    // Reverse sweep from a scalar root recorded on this tape (or a leaf).
    void backward(const Var& root);

    std::size_t num_ops() const { return ops_.size(); }

private:
    Var record(std::vector<int> shape, std::vector<double> value,
               std::vector<NodePtr> inputs, std::function<void(Node&)> backward);
    void check_owned(const Var& v, const char* op) const;

    std::vector<NodePtr> ops_;
};

// Central-difference gradient of f at x (the classic check utility).
std::vector<double> finite_diff_check(const std::function<double(const std::vector<double>&)>& f,
                                      const std::vector<double>& x, double h = 1e-5);

// Largest relative discrepancy, with an absolute floor so exact-zero
// gradients compare against finite-difference noise sanely.
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double abs_floor = 1e-6);

bool gradients_close(std::span<const double> analytic, std::span<const double> numeric,
                     double rtol = 1e-5, double atol = 1e-9);

}  // namespace moenc::ad
