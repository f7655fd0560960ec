#include "moenc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace moenc::ad {

namespace {

void check_rank2(const Var& v, const char* op) {
    if (v.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected rank-2 operand, got shape " + shape_str(v.shape()));
    }
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void check_axis(const Var& v, int axis, const char* op) {
    if (axis < 0 || axis >= v.rank()) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(v.shape()));
    }
}

}  // namespace

std::int64_t shape_size(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void Node::accumulate(std::span<const double> g) {
    if (!requires_grad) return;
    ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

int Var::rows() const {
    return node_->shape.empty() ? 1 : node_->shape[0];
}

int Var::cols() const {
    if (node_->shape.size() >= 2) return node_->shape[1];
    return node_->shape.empty() ? 1 : node_->shape[0];
}

const std::vector<double>& Var::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

double Var::scalar() const {
    if (!node_->is_scalar()) {
        throw ContractError("scalar(): tensor of shape " + shape_str(node_->shape) + " is not a scalar");
    }
    return node_->value[0];
}

Var leaf(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    if (shape_size(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("leaf: shape " + shape_str(shape) + " does not match data length " +
                         std::to_string(data.size()));
    }
    for (int d : shape) {
        if (d <= 0) throw ShapeError("leaf: nonpositive dimension in shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return Var(n);
}

Var scalar_leaf(double v, bool requires_grad) {
    return leaf({1}, {v}, requires_grad);
}

Var zeros(std::vector<int> shape, bool requires_grad) {
    std::vector<double> data(static_cast<std::size_t>(shape_size(shape)), 0.0);
    return leaf(std::move(shape), std::move(data), requires_grad);
}

void zero_grad(std::span<const Var> params) {
    for (const Var& p : params) p.node()->grad.assign(p.node()->value.size(), 0.0);
}

void Tape::check_owned(const Var& v, const char* op) const {
    const Node& n = *v.node();
    if (n.owner != nullptr && n.owner != this) {
        throw ContractError(std::string(op) + ": operand belongs to a different tape");
    }
}

Var Tape::record(std::vector<int> shape, std::vector<double> value, std::vector<NodePtr> inputs,
                 std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    for (const NodePtr& in : n->inputs) {
        if (in->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) n->backward = std::move(backward);
    n->owner = this;
    n->index = ops_.size();
    ops_.push_back(n);
    return Var(n);
}

Var Tape::matmul(const Var& a, const Var& b) {
    check_owned(a, "matmul");
    check_owned(b, "matmul");
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    const int m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    const auto& av = a.value();
    const auto& bv = b.value();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int t = 0; t < k; ++t) acc += av[i * k + t] * bv[t * n + j];
            out[static_cast<std::size_t>(i) * n + j] = acc;
        }
    return record({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node& node) {
        const auto& g = node.grad;
        Node& na = *node.inputs[0];
        Node& nb = *node.inputs[1];
        if (na.requires_grad) {
            na.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int t = 0; t < k; ++t) {
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j) acc += g[i * n + j] * nb.value[t * n + j];
                    na.grad[static_cast<std::size_t>(i) * k + t] += acc;
                }
        }
        if (nb.requires_grad) {
            nb.ensure_grad();
            for (int t = 0; t < k; ++t)
                for (int j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < m; ++i) acc += na.value[i * k + t] * g[i * n + j];
                    nb.grad[static_cast<std::size_t>(t) * n + j] += acc;
                }
        }
    });
}

Var Tape::vecmat(const Var& v, const Var& m) {
    check_owned(v, "vecmat");
    check_owned(m, "vecmat");
    if (v.rank() != 1) throw ShapeError("vecmat: expected rank-1 vector, got " + shape_str(v.shape()));
    check_rank2(m, "vecmat");
    const int k = v.shape()[0], k2 = m.shape()[0], n = m.shape()[1];
    if (k != k2) {
        throw ShapeError("vecmat: inner dimensions disagree, " + shape_str(v.shape()) + " x " +
                         shape_str(m.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int t = 0; t < k; ++t) acc += v.value()[t] * m.value()[t * n + j];
        out[j] = acc;
    }
    return record({n}, std::move(out), {v.node(), m.node()}, [k, n](Node& node) {
        const auto& g = node.grad;
        Node& nv = *node.inputs[0];
        Node& nm = *node.inputs[1];
        if (nv.requires_grad) {
            nv.ensure_grad();
            for (int t = 0; t < k; ++t) {
                double acc = 0.0;
                for (int j = 0; j < n; ++j) acc += nm.value[t * n + j] * g[j];
                nv.grad[t] += acc;
            }
        }
        if (nm.requires_grad) {
            nm.ensure_grad();
            for (int t = 0; t < k; ++t)
                for (int j = 0; j < n; ++j) nm.grad[static_cast<std::size_t>(t) * n + j] += nv.value[t] * g[j];
        }
    });
}

Var Tape::transpose(const Var& a) {
    check_owned(a, "transpose");
    check_rank2(a, "transpose");
    const int m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = a.value()[i * n + j];
    return record({n, m}, std::move(out), {a.node()}, [m, n](Node& node) {
        Node& na = *node.inputs[0];
        na.ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) na.grad[static_cast<std::size_t>(i) * n + j] += node.grad[j * m + i];
    });
}

Var Tape::add(const Var& a, const Var& b) {
    check_owned(a, "add");
    check_owned(b, "add");
    check_same_shape(a, b, "add");
    std::vector<double> out(a.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return record(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& node) {
        node.inputs[0]->accumulate(node.grad);
        node.inputs[1]->accumulate(node.grad);
    });
}

Var Tape::sub(const Var& a, const Var& b) {
    check_owned(a, "sub");
    check_owned(b, "sub");
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    return record(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& node) {
        node.inputs[0]->accumulate(node.grad);
        Node& nb = *node.inputs[1];
        if (nb.requires_grad) {
            nb.ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) nb.grad[i] -= node.grad[i];
        }
    });
}

Var Tape::mul(const Var& a, const Var& b) {
    check_owned(a, "mul");
    check_owned(b, "mul");
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return record(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& node) {
        Node& na = *node.inputs[0];
        Node& nb = *node.inputs[1];
        if (na.requires_grad) {
            na.ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) na.grad[i] += node.grad[i] * nb.value[i];
        }
        if (nb.requires_grad) {
            nb.ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) nb.grad[i] += node.grad[i] * na.value[i];
        }
    });
}

Var Tape::scale(const Var& a, double s) {
    check_owned(a, "scale");
    std::vector<double> out(a.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
    return record(a.shape(), std::move(out), {a.node()}, [s](Node& node) {
        Node& na = *node.inputs[0];
        na.ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i) na.grad[i] += node.grad[i] * s;
    });
}

Var Tape::scale_var(const Var& a, const Var& s) {
    check_owned(a, "scale_var");
    check_owned(s, "scale_var");
    if (!s.node()->is_scalar()) {
        throw ShapeError("scale_var: scaling factor must be scalar, got " + shape_str(s.shape()));
    }
    const double sv = s.value()[0];
    std::vector<double> out(a.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * sv;
    return record(a.shape(), std::move(out), {a.node(), s.node()}, [sv](Node& node) {
        Node& na = *node.inputs[0];
        Node& ns = *node.inputs[1];
        if (na.requires_grad) {
            na.ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) na.grad[i] += node.grad[i] * sv;
        }
        if (ns.requires_grad) {
            ns.ensure_grad();
            double acc = 0.0;
            for (std::size_t i = 0; i < node.grad.size(); ++i) acc += node.grad[i] * na.value[i];
            ns.grad[0] += acc;
        }
    });
}

Var Tape::add_scalar(const Var& a, double c) {
    check_owned(a, "add_scalar");
    std::vector<double> out(a.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c;
    return record(a.shape(), std::move(out), {a.node()},
                  [](Node& node) { node.inputs[0]->accumulate(node.grad); });
}

Var Tape::add_rowvec(const Var& m, const Var& v) {
    check_owned(m, "add_rowvec");
    check_owned(v, "add_rowvec");
    check_rank2(m, "add_rowvec");
    if (v.rank() != 1 || v.shape()[0] != m.shape()[1]) {
        throw ShapeError("add_rowvec: row vector " + shape_str(v.shape()) + " does not match matrix " +
                         shape_str(m.shape()));
    }
    const int rows = m.shape()[0], cols = m.shape()[1];
    std::vector<double> out(m.value().size());
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            out[static_cast<std::size_t>(i) * cols + j] = m.value()[i * cols + j] + v.value()[j];
    return record(m.shape(), std::move(out), {m.node(), v.node()}, [rows, cols](Node& node) {
        node.inputs[0]->accumulate(node.grad);
        Node& nv = *node.inputs[1];
        if (nv.requires_grad) {
            nv.ensure_grad();
            for (int j = 0; j < cols; ++j) {
                double acc = 0.0;
                for (int i = 0; i < rows; ++i) acc += node.grad[static_cast<std::size_t>(i) * cols + j];
                nv.grad[j] += acc;
            }
        }
    });
}

Var Tape::neg(const Var& a) {
    return scale(a, -1.0);
}

Var Tape::log_eps(const Var& a, double eps) {
    check_owned(a, "log_eps");
    std::vector<double> out(a.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(a.value()[i], eps));
    return record(a.shape(), std::move(out), {a.node()}, [eps](Node& node) {
        Node& na = *node.inputs[0];
        na.ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i) {
            if (na.value[i] > eps) na.grad[i] += node.grad[i] / na.value[i];
        }
    });
}

Var Tape::tanh(const Var& a) {
    check_owned(a, "tanh");
    std::vector<double> out(a.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.value()[i]);
    return record(a.shape(), std::move(out), {a.node()}, [](Node& node) {
        Node& na = *node.inputs[0];
        na.ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i) {
            const double y = node.value[i];
            na.grad[i] += node.grad[i] * (1.0 - y * y);
        }
    });
}

Var Tape::sum(const Var& a) {
    check_owned(a, "sum");
    double acc = 0.0;
    for (double x : a.value()) acc += x;
    return record({1}, {acc}, {a.node()}, [](Node& node) {
        Node& na = *node.inputs[0];
        na.ensure_grad();
        for (std::size_t i = 0; i < na.grad.size(); ++i) na.grad[i] += node.grad[0];
    });
}

Var Tape::mean(const Var& a) {
    check_owned(a, "mean");
    double acc = 0.0;
    for (double x : a.value()) acc += x;
    const double inv = 1.0 / static_cast<double>(a.size());
    return record({1}, {acc * inv}, {a.node()}, [inv](Node& node) {
        Node& na = *node.inputs[0];
        na.ensure_grad();
        for (std::size_t i = 0; i < na.grad.size(); ++i) na.grad[i] += node.grad[0] * inv;
    });
}

Var Tape::sum_axis(const Var& a, int axis) {
    check_owned(a, "sum_axis");
    check_rank2(a, "sum_axis");
    check_axis(a, axis, "sum_axis");
    const int rows = a.shape()[0], cols = a.shape()[1];
    if (axis == 0) {
        std::vector<double> out(static_cast<std::size_t>(cols), 0.0);
        for (int j = 0; j < cols; ++j) {
            double acc = 0.0;
            for (int i = 0; i < rows; ++i) acc += a.value()[i * cols + j];
            out[j] = acc;
        }
        return record({cols}, std::move(out), {a.node()}, [rows, cols](Node& node) {
            Node& na = *node.inputs[0];
            na.ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) na.grad[static_cast<std::size_t>(i) * cols + j] += node.grad[j];
        });
    }
    std::vector<double> out(static_cast<std::size_t>(rows), 0.0);
    for (int i = 0; i < rows; ++i) {
        double acc = 0.0;
        for (int j = 0; j < cols; ++j) acc += a.value()[i * cols + j];
        out[i] = acc;
    }
    return record({rows}, std::move(out), {a.node()}, [rows, cols](Node& node) {
        Node& na = *node.inputs[0];
        na.ensure_grad();
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) na.grad[static_cast<std::size_t>(i) * cols + j] += node.grad[i];
    });
}

Var Tape::mean_axis(const Var& a, int axis) {
    check_axis(a, axis, "mean_axis");
    const double inv = 1.0 / static_cast<double>(a.shape()[axis == 0 ? 0 : 1]);
    return scale(sum_axis(a, axis), inv);
}

AxisMax Tape::max_axis(const Var& a, int axis) {
    check_owned(a, "max_axis");
    if (a.rank() == 1) {
        if (a.size() == 0) throw ContractError("max_axis: empty vector");
        int best = 0;
        for (int i = 1; i < a.shape()[0]; ++i)
            if (a.value()[i] > a.value()[best]) best = i;
        Var v = record({1}, {a.value()[best]}, {a.node()}, [best](Node& node) {
            Node& na = *node.inputs[0];
            na.ensure_grad();
            na.grad[best] += node.grad[0];
        });
        return {v, {best}};
    }
    check_rank2(a, "max_axis");
    check_axis(a, axis, "max_axis");
    const int rows = a.shape()[0], cols = a.shape()[1];
    std::vector<int> idx;
    std::vector<double> out;
    if (axis == 1) {
        // max over columns for each row
        idx.resize(rows);
        out.resize(rows);
        for (int i = 0; i < rows; ++i) {
            int best = 0;
            for (int j = 1; j < cols; ++j)
                if (a.value()[i * cols + j] > a.value()[i * cols + best]) best = j;
            idx[i] = best;
            out[i] = a.value()[i * cols + best];
        }
        std::vector<int> idx_copy = idx;
        Var v = record({rows}, std::move(out), {a.node()}, [idx_copy, cols](Node& node) {
            Node& na = *node.inputs[0];
            na.ensure_grad();
            for (std::size_t i = 0; i < idx_copy.size(); ++i)
                na.grad[i * cols + idx_copy[i]] += node.grad[i];
        });
        return {v, idx};
    }
    // max over rows for each column
    idx.resize(cols);
    out.resize(cols);
    for (int j = 0; j < cols; ++j) {
        int best = 0;
        for (int i = 1; i < rows; ++i)
            if (a.value()[i * cols + j] > a.value()[best * cols + j]) best = i;
        idx[j] = best;
        out[j] = a.value()[best * cols + j];
    }
    std::vector<int> idx_copy = idx;
    Var v = record({cols}, std::move(out), {a.node()}, [idx_copy, cols](Node& node) {
        Node& na = *node.inputs[0];
        na.ensure_grad();
        for (std::size_t j = 0; j < idx_copy.size(); ++j)
            na.grad[static_cast<std::size_t>(idx_copy[j]) * cols + j] += node.grad[j];
    });
    return {v, idx};
}

Var Tape::concat(std::span<const Var> parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no operands");
    for (const Var& p : parts) check_owned(p, "concat");
    const int rank = parts[0].rank();
    if (rank == 1 || (rank == 2 && axis == 0)) {
        // stack along rows (rank-1 vectors concatenate end to end)
        int cols = rank == 2 ? parts[0].shape()[1] : 1;
        int total_rows = 0;
        for (const Var& p : parts) {
            if (p.rank() != rank || (rank == 2 && p.shape()[1] != cols)) {
                throw ShapeError("concat: incompatible shapes " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
            }
            total_rows += p.shape()[0];
        }
        std::vector<double> out;
        out.reserve(static_cast<std::size_t>(total_rows) * cols);
        std::vector<NodePtr> inputs;
        std::vector<std::size_t> sizes;
        for (const Var& p : parts) {
            out.insert(out.end(), p.value().begin(), p.value().end());
            inputs.push_back(p.node());
            sizes.push_back(p.value().size());
        }
        std::vector<int> shape = rank == 2 ? std::vector<int>{total_rows, cols} : std::vector<int>{total_rows};
        return record(std::move(shape), std::move(out), std::move(inputs), [sizes](Node& node) {
            std::size_t off = 0;
            for (std::size_t p = 0; p < node.inputs.size(); ++p) {
                Node& in = *node.inputs[p];
                if (in.requires_grad) {
                    in.ensure_grad();
                    for (std::size_t i = 0; i < sizes[p]; ++i) in.grad[i] += node.grad[off + i];
                }
                off += sizes[p];
            }
        });
    }
    if (rank != 2 || axis != 1) {
        throw ShapeError("concat: unsupported rank/axis combination");
    }
    const int rows = parts[0].shape()[0];
    int total_cols = 0;
    std::vector<NodePtr> inputs;
    std::vector<int> widths;
    for (const Var& p : parts) {
        if (p.rank() != 2 || p.shape()[0] != rows) {
            throw ShapeError("concat: incompatible shapes " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        total_cols += p.shape()[1];
        inputs.push_back(p.node());
        widths.push_back(p.shape()[1]);
    }
    std::vector<double> out(static_cast<std::size_t>(rows) * total_cols);
    int col_off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const int w = widths[p];
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < w; ++j)
                out[static_cast<std::size_t>(i) * total_cols + col_off + j] = parts[p].value()[i * w + j];
        col_off += w;
    }
    return record({rows, total_cols}, std::move(out), std::move(inputs),
                  [rows, total_cols, widths](Node& node) {
                      int off = 0;
                      for (std::size_t p = 0; p < node.inputs.size(); ++p) {
                          Node& in = *node.inputs[p];
                          const int w = widths[p];
                          if (in.requires_grad) {
                              in.ensure_grad();
                              for (int i = 0; i < rows; ++i)
                                  for (int j = 0; j < w; ++j)
                                      in.grad[static_cast<std::size_t>(i) * w + j] +=
                                          node.grad[static_cast<std::size_t>(i) * total_cols + off + j];
                          }
                          off += w;
                      }
                  });
}

Var Tape::concat(const Var& a, const Var& b, int axis) {
    const Var parts[2] = {a, b};
    return concat(std::span<const Var>(parts, 2), axis);
}

Var Tape::reshape(const Var& a, std::vector<int> shape) {
    check_owned(a, "reshape");
    if (shape_size(shape) != a.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    return record(std::move(shape), a.value(), {a.node()},
                  [](Node& node) { node.inputs[0]->accumulate(node.grad); });
}

Var Tape::pick(const Var& a, int flat_index) {
    check_owned(a, "pick");
    if (flat_index < 0 || flat_index >= a.size()) {
        throw ContractError("pick: index " + std::to_string(flat_index) + " out of range for shape " +
                            shape_str(a.shape()));
    }
    return record({1}, {a.value()[flat_index]}, {a.node()}, [flat_index](Node& node) {
        Node& na = *node.inputs[0];
        na.ensure_grad();
        na.grad[flat_index] += node.grad[0];
    });
}

Var Tape::softmax(const Var& a, int axis) {
    check_owned(a, "softmax");
    if (a.rank() == 1) {
        const int n = a.shape()[0];
        std::vector<double> out(static_cast<std::size_t>(n));
        double mx = a.value()[0];
        for (int i = 1; i < n; ++i) mx = std::max(mx, a.value()[i]);
        double denom = 0.0;
        for (int i = 0; i < n; ++i) {
            out[i] = std::exp(a.value()[i] - mx);
            denom += out[i];
        }
        for (int i = 0; i < n; ++i) out[i] /= denom;
        return record(a.shape(), std::move(out), {a.node()}, [n](Node& node) {
            Node& na = *node.inputs[0];
            na.ensure_grad();
            double dot = 0.0;
            for (int i = 0; i < n; ++i) dot += node.grad[i] * node.value[i];
            for (int i = 0; i < n; ++i) na.grad[i] += node.value[i] * (node.grad[i] - dot);
        });
    }
    check_rank2(a, "softmax");
    check_axis(a, axis, "softmax");
    const int rows = a.shape()[0], cols = a.shape()[1];
    std::vector<double> out(a.value().size());
    if (axis == 1) {
        for (int i = 0; i < rows; ++i) {
            double mx = a.value()[i * cols];
            for (int j = 1; j < cols; ++j) mx = std::max(mx, a.value()[i * cols + j]);
            double denom = 0.0;
            for (int j = 0; j < cols; ++j) {
                out[static_cast<std::size_t>(i) * cols + j] = std::exp(a.value()[i * cols + j] - mx);
                denom += out[static_cast<std::size_t>(i) * cols + j];
            }
            for (int j = 0; j < cols; ++j) out[static_cast<std::size_t>(i) * cols + j] /= denom;
        }
        return record(a.shape(), std::move(out), {a.node()}, [rows, cols](Node& node) {
            Node& na = *node.inputs[0];
            na.ensure_grad();
            for (int i = 0; i < rows; ++i) {
                double dot = 0.0;
                for (int j = 0; j < cols; ++j)
                    dot += node.grad[i * cols + j] * node.value[i * cols + j];
                for (int j = 0; j < cols; ++j) {
                    const std::size_t off = static_cast<std::size_t>(i) * cols + j;
                    na.grad[off] += node.value[off] * (node.grad[off] - dot);
                }
            }
        });
    }
    for (int j = 0; j < cols; ++j) {
        double mx = a.value()[j];
        for (int i = 1; i < rows; ++i) mx = std::max(mx, a.value()[i * cols + j]);
        double denom = 0.0;
        for (int i = 0; i < rows; ++i) {
            out[static_cast<std::size_t>(i) * cols + j] = std::exp(a.value()[i * cols + j] - mx);
            denom += out[static_cast<std::size_t>(i) * cols + j];
        }
        for (int i = 0; i < rows; ++i) out[static_cast<std::size_t>(i) * cols + j] /= denom;
    }
    return record(a.shape(), std::move(out), {a.node()}, [rows, cols](Node& node) {
        Node& na = *node.inputs[0];
        na.ensure_grad();
        for (int j = 0; j < cols; ++j) {
            double dot = 0.0;
            for (int i = 0; i < rows; ++i) dot += node.grad[i * cols + j] * node.value[i * cols + j];
            for (int i = 0; i < rows; ++i) {
                const std::size_t off = static_cast<std::size_t>(i) * cols + j;
                na.grad[off] += node.value[off] * (node.grad[off] - dot);
            }
        }
    });
}

Var Tape::stop_gradient(const Var& a) {
    check_owned(a, "stop_gradient");
    // Forward identity; requires_grad is deliberately not propagated, so the
    // reverse sweep never pushes anything into `a`.
    auto n = std::make_shared<Node>();
    n->shape = a.shape();
    n->value = a.value();
    n->inputs = {a.node()};
    n->requires_grad = false;
    n->owner = this;
    n->index = ops_.size();
    ops_.push_back(n);
    return Var(n);
}

Var Tape::custom(std::vector<int> shape, std::vector<double> value, std::vector<Var> inputs,
                 std::function<void(Node&)> backward) {
    if (shape_size(shape) != static_cast<std::int64_t>(value.size())) {
        throw ShapeError("custom: shape " + shape_str(shape) + " does not match value length " +
                         std::to_string(value.size()));
    }
    std::vector<NodePtr> nodes;
    nodes.reserve(inputs.size());
    for (const Var& v : inputs) {
        check_owned(v, "custom");
        nodes.push_back(v.node());
    }
    return record(std::move(shape), std::move(value), std::move(nodes), std::move(backward));
}

void Tape::backward(const Var& root) {
    const NodePtr& r = root.node();
    if (!r->is_scalar()) {
        throw ContractError("backward: root has shape " + shape_str(r->shape) + ", expected a scalar");
    }
    if (r->owner != nullptr && r->owner != this) {
        throw ContractError("backward: root belongs to a different tape");
    }
    if (!r->requires_grad) return;  // constant root: nothing depends on parameters
    r->ensure_grad();
    r->grad[0] += 1.0;
    if (r->owner == nullptr) return;  // leaf root: d root / d root only
    for (std::size_t i = r->index + 1; i-- > 0;) {
        Node& n = *ops_[i];
        if (!n.requires_grad || !n.backward) continue;
        if (n.grad.empty()) continue;  // nothing flowed into this node
        n.backward(n);
        // Op gradients are consumed by the sweep; only leaves accumulate
        // across backward calls.
        n.grad.clear();
    }
}

std::vector<double> finite_diff_check(const std::function<double(const std::vector<double>&)>& f,
                                      const std::vector<double>& x, double h) {
    std::vector<double> g(x.size());
    std::vector<double> probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + h;
        const double up = f(probe);
        probe[i] = x[i] - h;
        const double down = f(probe);
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double abs_floor) {
    if (analytic.size() != numeric.size()) {
        throw ContractError("max_relative_error: length mismatch");
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), abs_floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

bool gradients_close(std::span<const double> analytic, std::span<const double> numeric, double rtol,
                     double atol) {
    if (analytic.size() != numeric.size()) return false;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double diff = std::abs(analytic[i] - numeric[i]);
        if (diff > atol + rtol * std::max(std::abs(analytic[i]), std::abs(numeric[i]))) return false;
    }
    return true;
}

}  // namespace moenc::ad
