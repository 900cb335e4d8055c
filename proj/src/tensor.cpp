#include "anf/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace anf {

namespace {

thread_local std::vector<Tape*> g_tape_stack;
std::atomic<std::uint64_t> g_next_tape_id{1};
bool g_finite_checks = true;

void check_finite(const std::vector<double>& v, const char* op) {
    if (!g_finite_checks) return;
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NonFiniteError(std::string("non-finite value produced by ") + op);
        }
    }
}

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    throw std::invalid_argument(std::string(op) + ": " + detail);
}

}  // namespace

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "{";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "}";
    return os.str();
}

bool finite_checks_enabled() { return g_finite_checks; }
void set_finite_checks(bool on) { g_finite_checks = on; }

// ---- Tensor -------------------------------------------------------------

Tensor Tensor::scalar(double v) { return from({}, {v}); }

Tensor Tensor::zeros(Shape shape) {
    std::size_t n = numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double v) {
    std::size_t n = numel(shape);
    return from(std::move(shape), std::vector<double>(n, v));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    if (numel(shape) != values.size()) {
        shape_error("Tensor::from", "shape " + shape_str(shape) + " does not match " +
                                        std::to_string(values.size()) + " values");
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.values_ = std::make_shared<std::vector<double>>(std::move(values));
    return t;
}

std::size_t Tensor::size() const { return values_ ? values_->size() : 0; }

std::size_t Tensor::rows() const {
    if (rank() != 2) shape_error("Tensor::rows", "rank-2 required, got " + shape_str(shape_));
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) shape_error("Tensor::cols", "rank-2 required, got " + shape_str(shape_));
    return shape_[1];
}

const std::vector<double>& Tensor::values() const {
    if (!values_) throw std::logic_error("Tensor: undefined");
    return *values_;
}

std::vector<double>& Tensor::mutable_values() {
    if (!values_) throw std::logic_error("Tensor: undefined");
    return *values_;
}

double Tensor::item() const {
    if (size() != 1) shape_error("Tensor::item", "single element required, got " + shape_str(shape_));
    return (*values_)[0];
}

double Tensor::at(std::size_t i) const { return values().at(i); }

double Tensor::at(std::size_t r, std::size_t c) const {
    if (rank() != 2) shape_error("Tensor::at", "rank-2 required");
    return (*values_)[r * shape_[1] + c];
}

Tensor Tensor::detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.values_ = values_;
    return t;
}

// ---- Tape ---------------------------------------------------------------

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) { g_tape_stack.push_back(this); }

Tape::~Tape() {
    // Allow out-of-order destruction only for the innermost tape; typical use
    // is strictly scoped, so a plain pop is right.
    if (!g_tape_stack.empty() && g_tape_stack.back() == this) g_tape_stack.pop_back();
}

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

int Tape::ensure_leaf(const Tensor& t) {
    auto it = leaves_.find(t.storage_id());
    if (it != leaves_.end()) return it->second;
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{t.size(), nullptr});
    leaves_.emplace(t.storage_id(), id);
    return id;
}

int Tape::input_node(const Tensor& t) {
    if (t.tape_id_ == id_ && t.node_ >= 0) return t.node_;
    if (t.requires_grad_) return ensure_leaf(t);
    return -1;
}

double* Tape::adj(int node) {
    auto& a = adj_[static_cast<std::size_t>(node)];
    if (a.empty()) a.assign(nodes_[static_cast<std::size_t>(node)].size, 0.0);
    return a.data();
}

void Tape::backward(const Tensor& root) {
    if (root.tape_id_ != id_ || root.node_ < 0) {
        throw std::invalid_argument("Tape::backward: root is not on this tape");
    }
    if (root.size() != 1) {
        throw std::invalid_argument("Tape::backward: root must be scalar");
    }
    adj_.assign(nodes_.size(), {});
    ran_backward_ = true;
    adj(root.node_)[0] = 1.0;
    for (int i = root.node_; i >= 0; --i) {
        auto& a = adj_[static_cast<std::size_t>(i)];
        if (a.empty()) continue;  // never reached
        auto& node = nodes_[static_cast<std::size_t>(i)];
        if (node.pull) node.pull(*this, a.data());
    }
}

Tensor Tape::grad(const Tensor& leaf) const {
    if (!ran_backward_) throw std::logic_error("Tape::grad: backward has not run");
    auto it = leaves_.find(leaf.storage_id());
    if (it == leaves_.end()) return Tensor::zeros(leaf.shape());
    const auto& a = adj_[static_cast<std::size_t>(it->second)];
    if (a.empty()) return Tensor::zeros(leaf.shape());
    return Tensor::from(leaf.shape(), a);
}

NoGrad::NoGrad() { g_tape_stack.push_back(nullptr); }
NoGrad::~NoGrad() { g_tape_stack.pop_back(); }

// ---- op recording helper --------------------------------------------------

struct OpRecorder {
    // Builds the output tensor; when a tape is active and any input
    // participates, records a node whose pull closure routes the adjoint.
    static Tensor unary(const char* name, const Tensor& a, std::vector<double> out,
                        Shape out_shape,
                        std::function<void(const double* g, double* ga)> back) {
        check_finite(out, name);
        Tensor r = Tensor::from(std::move(out_shape), std::move(out));
        Tape* tape = Tape::active();
        if (!tape) return r;
        int pa = tape->input_node(a);
        if (pa < 0) return r;
        int id = static_cast<int>(tape->nodes_.size());
        std::size_t na = a.size();
        tape->nodes_.push_back(Tape::Node{
            r.size(), [pa, na, back](Tape& t, const double* g) {
                double* ga = t.adj(pa);
                back(g, ga);
                (void)na;
            }});
        r.tape_id_ = tape->id_;
        r.node_ = id;
        return r;
    }

    static Tensor binary(const char* name, const Tensor& a, const Tensor& b,
                         std::vector<double> out, Shape out_shape,
                         std::function<void(const double* g, double* ga)> back_a,
                         std::function<void(const double* g, double* gb)> back_b) {
        check_finite(out, name);
        Tensor r = Tensor::from(std::move(out_shape), std::move(out));
        Tape* tape = Tape::active();
        if (!tape) return r;
        int pa = tape->input_node(a);
        int pb = tape->input_node(b);
        if (pa < 0 && pb < 0) return r;
        int id = static_cast<int>(tape->nodes_.size());
        tape->nodes_.push_back(Tape::Node{
            r.size(), [pa, pb, back_a, back_b](Tape& t, const double* g) {
                if (pa >= 0) back_a(g, t.adj(pa));
                if (pb >= 0) back_b(g, t.adj(pb));
            }});
        r.tape_id_ = tape->id_;
        r.node_ = id;
        return r;
    }
};

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        shape_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

}  // namespace

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    const auto& va = a.values();
    const auto& vb = b.values();
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] + vb[i];
    std::size_t n = va.size();
    auto pass = [n](const double* g, double* ga) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    };
    return OpRecorder::binary("add", a, b, std::move(out), a.shape(), pass, pass);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    const auto& va = a.values();
    const auto& vb = b.values();
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] - vb[i];
    std::size_t n = va.size();
    return OpRecorder::binary(
        "sub", a, b, std::move(out), a.shape(),
        [n](const double* g, double* ga) {
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        },
        [n](const double* g, double* gb) {
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    const auto& va = a.values();
    const auto& vb = b.values();
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] * vb[i];
    std::size_t n = va.size();
    auto sa = a.detach();
    auto sb = b.detach();
    return OpRecorder::binary(
        "mul", a, b, std::move(out), a.shape(),
        [n, sb](const double* g, double* ga) {
            const auto& vb2 = sb.values();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * vb2[i];
        },
        [n, sa](const double* g, double* gb) {
            const auto& va2 = sa.values();
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * va2[i];
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape("div", a, b);
    const auto& va = a.values();
    const auto& vb = b.values();
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] / vb[i];
    std::size_t n = va.size();
    auto sa = a.detach();
    auto sb = b.detach();
    return OpRecorder::binary(
        "div", a, b, std::move(out), a.shape(),
        [n, sb](const double* g, double* ga) {
            const auto& vb2 = sb.values();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / vb2[i];
        },
        [n, sa, sb](const double* g, double* gb) {
            const auto& va2 = sa.values();
            const auto& vb2 = sb.values();
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i] * va2[i] / (vb2[i] * vb2[i]);
        });
}

Tensor neg(const Tensor& a) {
    const auto& va = a.values();
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = -va[i];
    std::size_t n = va.size();
    return OpRecorder::unary("neg", a, std::move(out), a.shape(),
                             [n](const double* g, double* ga) {
                                 for (std::size_t i = 0; i < n; ++i) ga[i] -= g[i];
                             });
}

Tensor add_scalar(const Tensor& a, double s) {
    const auto& va = a.values();
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] + s;
    std::size_t n = va.size();
    return OpRecorder::unary("add_scalar", a, std::move(out), a.shape(),
                             [n](const double* g, double* ga) {
                                 for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                             });
}

Tensor mul_scalar(const Tensor& a, double s) {
    const auto& va = a.values();
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] * s;
    std::size_t n = va.size();
    return OpRecorder::unary("mul_scalar", a, std::move(out), a.shape(),
                             [n, s](const double* g, double* ga) {
                                 for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * s;
                             });
}

namespace {

template <typename F, typename DF>
Tensor pointwise(const char* name, const Tensor& a, F f, DF dfdx_from_x) {
    const auto& va = a.values();
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = f(va[i]);
    std::size_t n = va.size();
    auto sa = a.detach();
    return OpRecorder::unary(name, a, std::move(out), a.shape(),
                             [n, sa, dfdx_from_x](const double* g, double* ga) {
                                 const auto& x = sa.values();
                                 for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * dfdx_from_x(x[i]);
                             });
}

double sigmoid_stable(double x) {
    if (x >= 0) {
        double t = std::exp(-x);
        return 1.0 / (1.0 + t);
    }
    double t = std::exp(x);
    return t / (1.0 + t);
}

double softplus_stable(double x) {
    // log(1 + e^x) without overflow
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

}  // namespace

Tensor exp(const Tensor& a) {
    return pointwise("exp", a, [](double x) { return std::exp(x); },
                     [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
    return pointwise("log", a, [](double x) { return std::log(x); },
                     [](double x) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    return pointwise("sqrt", a, [](double x) { return std::sqrt(x); },
                     [](double x) { return 0.5 / std::sqrt(x); });
}

Tensor tanh(const Tensor& a) {
    return pointwise("tanh", a, [](double x) { return std::tanh(x); },
                     [](double x) {
                         double t = std::tanh(x);
                         return 1.0 - t * t;
                     });
}

Tensor softplus(const Tensor& a) {
    return pointwise("softplus", a, softplus_stable, sigmoid_stable);
}

Tensor log_sigmoid(const Tensor& a) {
    return pointwise("log_sigmoid", a, [](double x) { return -softplus_stable(-x); },
                     [](double x) { return sigmoid_stable(-x); });
}

Tensor swish(const Tensor& a) {
    return pointwise("swish", a, [](double x) { return x * sigmoid_stable(x); },
                     [](double x) {
                         double s = sigmoid_stable(x);
                         return s + x * s * (1.0 - s);
                     });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
    const auto& va = a.values();
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = std::min(std::max(va[i], lo), hi);
    std::size_t n = va.size();
    auto sa = a.detach();
    return OpRecorder::unary("clamp", a, std::move(out), a.shape(),
                             [n, sa, lo, hi](const double* g, double* ga) {
                                 const auto& x = sa.values();
                                 for (std::size_t i = 0; i < n; ++i) {
                                     if (x[i] > lo && x[i] < hi) ga[i] += g[i];
                                 }
                             });
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a) {
    const auto& va = a.values();
    double s = 0.0;
    for (double v : va) s += v;
    std::size_t n = va.size();
    return OpRecorder::unary("sum", a, {s}, {},
                             [n](const double* g, double* ga) {
                                 for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
                             });
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
    const auto& va = a.values();
    double s = 0.0;
    for (double v : va) s += v;
    std::size_t n = va.size();
    double inv = 1.0 / static_cast<double>(n);
    return OpRecorder::unary("mean", a, {s * inv}, {},
                             [n, inv](const double* g, double* ga) {
                                 for (std::size_t i = 0; i < n; ++i) ga[i] += g[0] * inv;
                             });
}

Tensor sum_axis(const Tensor& a, int axis) {
    if (a.rank() != 2) shape_error("sum_axis", "rank-2 required, got " + shape_str(a.shape()));
    std::size_t n = a.shape()[0], d = a.shape()[1];
    const auto& va = a.values();
    if (axis == 0) {
        std::vector<double> out(d, 0.0);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) out[c] += va[r * d + c];
        return OpRecorder::unary("sum_axis", a, std::move(out), {d},
                                 [n, d](const double* g, double* ga) {
                                     for (std::size_t r = 0; r < n; ++r)
                                         for (std::size_t c = 0; c < d; ++c) ga[r * d + c] += g[c];
                                 });
    }
    if (axis == 1) {
        std::vector<double> out(n, 0.0);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) out[r] += va[r * d + c];
        return OpRecorder::unary("sum_axis", a, std::move(out), {n},
                                 [n, d](const double* g, double* ga) {
                                     for (std::size_t r = 0; r < n; ++r)
                                         for (std::size_t c = 0; c < d; ++c) ga[r * d + c] += g[r];
                                 });
    }
    throw std::invalid_argument("sum_axis: axis must be 0 or 1");
}

Tensor logsumexp_rows(const Tensor& a) {
    if (a.rank() != 2) shape_error("logsumexp_rows", "rank-2 required");
    std::size_t n = a.shape()[0], d = a.shape()[1];
    const auto& va = a.values();
    std::vector<double> out(n);
    for (std::size_t r = 0; r < n; ++r) {
        double m = va[r * d];
        for (std::size_t c = 1; c < d; ++c) m = std::max(m, va[r * d + c]);
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += std::exp(va[r * d + c] - m);
        out[r] = m + std::log(s);
    }
    auto sa = a.detach();
    std::vector<double> saved = out;
    return OpRecorder::unary("logsumexp_rows", a, std::move(out), {n},
                             [n, d, sa, saved](const double* g, double* ga) {
                                 const auto& x = sa.values();
                                 for (std::size_t r = 0; r < n; ++r)
                                     for (std::size_t c = 0; c < d; ++c)
                                         ga[r * d + c] += g[r] * std::exp(x[r * d + c] - saved[r]);
                             });
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2) shape_error("matmul", "lhs must be rank-2, got " + shape_str(a.shape()));
    bool vec_rhs = b.rank() == 1;
    if (!vec_rhs && b.rank() != 2) shape_error("matmul", "rhs must be rank-1 or rank-2");
    std::size_t m = a.shape()[0], k = a.shape()[1];
    std::size_t k2 = vec_rhs ? b.shape()[0] : b.shape()[0];
    std::size_t n = vec_rhs ? 1 : b.shape()[1];
    if (k != k2) {
        shape_error("matmul", "inner extents differ: " + shape_str(a.shape()) + " x " +
                                  shape_str(b.shape()));
    }
    const auto& va = a.values();
    const auto& vb = b.values();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            double av = va[i * k + p];
            const double* brow = vb.data() + p * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    Shape out_shape = vec_rhs ? Shape{m} : Shape{m, n};
    auto sa = a.detach();
    auto sb = b.detach();
    return OpRecorder::binary(
        "matmul", a, b, std::move(out), std::move(out_shape),
        [m, k, n, sb](const double* g, double* ga) {
            // dA = g . B^T
            const auto& vb2 = sb.values();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    double gv = g[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gv * vb2[p * n + j];
                }
        },
        [m, k, n, sa](const double* g, double* gb) {
            // dB = A^T . g
            const auto& va2 = sa.values();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double av = va2[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
                }
        });
}

// ---- concat / split / reshape ----------------------------------------------

Tensor concat(const Tensor& a, const Tensor& b, int axis) { return concat(std::vector<Tensor>{a, b}, axis); }

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    if (parts.size() == 1) {
        // still route gradient through an identity so the output is on-tape
        return reshape(parts[0], parts[0].shape());
    }
    std::size_t rank = parts[0].rank();
    for (const auto& p : parts)
        if (p.rank() != rank) shape_error("concat", "mixed ranks");
    if (rank == 1 && axis == 0) {
        std::size_t total = 0;
        for (const auto& p : parts) total += p.size();
        std::vector<double> out;
        out.reserve(total);
        for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
        Tensor r = Tensor::from({total}, std::move(out));
        Tape* tape = Tape::active();
        if (!tape) return r;
        // record: route adjoint slices back to parents
        std::vector<int> pids(parts.size());
        std::vector<std::size_t> sizes(parts.size());
        bool any = false;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            pids[i] = tape->input_node(parts[i]);
            sizes[i] = parts[i].size();
            any = any || pids[i] >= 0;
        }
        if (!any) return r;
        int id = static_cast<int>(tape->nodes_.size());
        tape->nodes_.push_back(Tape::Node{
            r.size(), [pids, sizes](Tape& t, const double* g) {
                std::size_t off = 0;
                for (std::size_t i = 0; i < pids.size(); ++i) {
                    if (pids[i] >= 0) {
                        double* ga = t.adj(pids[i]);
                        for (std::size_t j = 0; j < sizes[i]; ++j) ga[j] += g[off + j];
                    }
                    off += sizes[i];
                }
            }});
        r.tape_id_ = tape->id_;
        r.node_ = id;
        return r;
    }
    if (rank == 2 && axis == 1) {
        std::size_t n = parts[0].shape()[0];
        std::size_t total = 0;
        for (const auto& p : parts) {
            if (p.shape()[0] != n) shape_error("concat", "row mismatch");
            total += p.shape()[1];
        }
        std::vector<double> out(n * total);
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::size_t d = p.shape()[1];
            const auto& v = p.values();
            for (std::size_t r = 0; r < n; ++r)
                std::memcpy(out.data() + r * total + off, v.data() + r * d, d * sizeof(double));
            off += d;
        }
        Tensor r = Tensor::from({n, total}, std::move(out));
        Tape* tape = Tape::active();
        if (!tape) return r;
        std::vector<int> pids(parts.size());
        std::vector<std::size_t> widths(parts.size());
        bool any = false;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            pids[i] = tape->input_node(parts[i]);
            widths[i] = parts[i].shape()[1];
            any = any || pids[i] >= 0;
        }
        if (!any) return r;
        int id = static_cast<int>(tape->nodes_.size());
        tape->nodes_.push_back(Tape::Node{
            r.size(), [pids, widths, n, total](Tape& t, const double* g) {
                std::size_t off2 = 0;
                for (std::size_t i = 0; i < pids.size(); ++i) {
                    if (pids[i] >= 0) {
                        double* ga = t.adj(pids[i]);
                        for (std::size_t r2 = 0; r2 < n; ++r2)
                            for (std::size_t c = 0; c < widths[i]; ++c)
                                ga[r2 * widths[i] + c] += g[r2 * total + off2 + c];
                    }
                    off2 += widths[i];
                }
            }});
        r.tape_id_ = tape->id_;
        r.node_ = id;
        return r;
    }
    if (rank == 2 && axis == 0) {
        std::size_t d = parts[0].shape()[1];
        std::size_t total = 0;
        for (const auto& p : parts) {
            if (p.shape()[1] != d) shape_error("concat", "column mismatch");
            total += p.shape()[0];
        }
        std::vector<double> out;
        out.reserve(total * d);
        for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
        Tensor flat = Tensor::from({total * d}, std::move(out));
        // reuse rank-1 concat recording by building on the flat layout
        std::vector<Tensor> flat_parts;
        flat_parts.reserve(parts.size());
        for (const auto& p : parts) flat_parts.push_back(reshape(p, {p.size()}));
        return reshape(concat(flat_parts, 0), {total, d});
    }
    throw std::invalid_argument("concat: unsupported rank/axis");
}

std::vector<Tensor> split(const Tensor& t, int axis, const std::vector<std::size_t>& sizes) {
    std::size_t want = 0;
    for (std::size_t s : sizes) want += s;
    std::vector<Tensor> out;
    if (t.rank() == 1 && axis == 0) {
        if (want != t.size()) shape_error("split", "sizes do not cover input");
        const auto& v = t.values();
        std::size_t off = 0;
        for (std::size_t s : sizes) {
            std::vector<double> part(v.begin() + static_cast<std::ptrdiff_t>(off),
                                     v.begin() + static_cast<std::ptrdiff_t>(off + s));
            Tensor p = Tensor::from({s}, std::move(part));
            Tape* tape = Tape::active();
            if (tape) {
                int pid = tape->input_node(t);
                if (pid >= 0) {
                    int id = static_cast<int>(tape->nodes_.size());
                    std::size_t o = off, sz = s;
                    tape->nodes_.push_back(Tape::Node{
                        sz, [pid, o, sz](Tape& tp, const double* g) {
                            double* ga = tp.adj(pid);
                            for (std::size_t j = 0; j < sz; ++j) ga[o + j] += g[j];
                        }});
                    p.tape_id_ = tape->id_;
                    p.node_ = id;
                }
            }
            out.push_back(std::move(p));
            off += s;
        }
        return out;
    }
    if (t.rank() == 2 && axis == 1) {
        std::size_t n = t.shape()[0], d = t.shape()[1];
        if (want != d) shape_error("split", "sizes do not cover columns");
        const auto& v = t.values();
        std::size_t off = 0;
        for (std::size_t s : sizes) {
            std::vector<double> part(n * s);
            for (std::size_t r = 0; r < n; ++r)
                std::memcpy(part.data() + r * s, v.data() + r * d + off, s * sizeof(double));
            Tensor p = Tensor::from({n, s}, std::move(part));
            Tape* tape = Tape::active();
            if (tape) {
                int pid = tape->input_node(t);
                if (pid >= 0) {
                    int id = static_cast<int>(tape->nodes_.size());
                    std::size_t o = off, sz = s;
                    tape->nodes_.push_back(Tape::Node{
                        n * sz, [pid, o, sz, n, d](Tape& tp, const double* g) {
                            double* ga = tp.adj(pid);
                            for (std::size_t r2 = 0; r2 < n; ++r2)
                                for (std::size_t c = 0; c < sz; ++c)
                                    ga[r2 * d + o + c] += g[r2 * sz + c];
                        }});
                    p.tape_id_ = tape->id_;
                    p.node_ = id;
                }
            }
            out.push_back(std::move(p));
            off += s;
        }
        return out;
    }
    throw std::invalid_argument("split: unsupported rank/axis");
}

Tensor reshape(const Tensor& t, Shape shape) {
    if (numel(shape) != t.size()) {
        shape_error("reshape", shape_str(t.shape()) + " -> " + shape_str(shape));
    }
    std::vector<double> out = t.values();
    std::size_t n = t.size();
    return OpRecorder::unary("reshape", t, std::move(out), std::move(shape),
                             [n](const double* g, double* ga) {
                                 for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                             });
}

// ---- row-broadcast ----------------------------------------------------------

Tensor add_rowwise(const Tensor& m, const Tensor& v) {
    if (m.rank() != 2 || v.rank() != 1 || m.shape()[1] != v.shape()[0]) {
        shape_error("add_rowwise", shape_str(m.shape()) + " + " + shape_str(v.shape()));
    }
    std::size_t n = m.shape()[0], d = m.shape()[1];
    const auto& vm = m.values();
    const auto& vv = v.values();
    std::vector<double> out(n * d);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) out[r * d + c] = vm[r * d + c] + vv[c];
    return OpRecorder::binary(
        "add_rowwise", m, v, std::move(out), m.shape(),
        [n, d](const double* g, double* gm) {
            for (std::size_t i = 0; i < n * d; ++i) gm[i] += g[i];
        },
        [n, d](const double* g, double* gv) {
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < d; ++c) gv[c] += g[r * d + c];
        });
}

Tensor mul_rowwise(const Tensor& m, const Tensor& v) {
    if (m.rank() != 2 || v.rank() != 1 || m.shape()[1] != v.shape()[0]) {
        shape_error("mul_rowwise", shape_str(m.shape()) + " * " + shape_str(v.shape()));
    }
    std::size_t n = m.shape()[0], d = m.shape()[1];
    const auto& vm = m.values();
    const auto& vv = v.values();
    std::vector<double> out(n * d);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) out[r * d + c] = vm[r * d + c] * vv[c];
    auto sm = m.detach();
    auto sv = v.detach();
    return OpRecorder::binary(
        "mul_rowwise", m, v, std::move(out), m.shape(),
        [n, d, sv](const double* g, double* gm) {
            const auto& vv2 = sv.values();
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < d; ++c) gm[r * d + c] += g[r * d + c] * vv2[c];
        },
        [n, d, sm](const double* g, double* gv) {
            const auto& vm2 = sm.values();
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < d; ++c) gv[c] += g[r * d + c] * vm2[r * d + c];
        });
}

// ---- composite log-densities --------------------------------------------

namespace {
constexpr double kHalfLog2Pi = 0.91893853320467274178;  // log(2*pi)/2
}

Tensor gaussian_logpdf(const Tensor& x, const Tensor& mu, const Tensor& log_sigma) {
    if (x.rank() != 1) shape_error("gaussian_logpdf", "rank-1 inputs required");
    require_same_shape("gaussian_logpdf", x, mu);
    require_same_shape("gaussian_logpdf", x, log_sigma);
    Tensor d = sub(x, mu);
    Tensor inv_var = exp(mul_scalar(log_sigma, -2.0));
    Tensor quad = mul_scalar(mul(mul(d, d), inv_var), 0.5);
    Tensor terms = sub(neg(log_sigma), quad);
    double n = static_cast<double>(x.size());
    return add_scalar(sum(terms), -kHalfLog2Pi * n);
}

Tensor gaussian_logpdf_rows(const Tensor& x, const Tensor& mu, const Tensor& log_sigma) {
    if (x.rank() != 2) shape_error("gaussian_logpdf_rows", "rank-2 inputs required");
    require_same_shape("gaussian_logpdf_rows", x, mu);
    require_same_shape("gaussian_logpdf_rows", x, log_sigma);
    Tensor d = sub(x, mu);
    Tensor inv_var = exp(mul_scalar(log_sigma, -2.0));
    Tensor quad = mul_scalar(mul(mul(d, d), inv_var), 0.5);
    Tensor terms = sub(neg(log_sigma), quad);
    double cols = static_cast<double>(x.shape()[1]);
    return add_scalar(sum_axis(terms, 1), -kHalfLog2Pi * cols);
}

Tensor std_normal_logpdf_rows(const Tensor& x) {
    if (x.rank() != 2) shape_error("std_normal_logpdf_rows", "rank-2 input required");
    Tensor quad = mul_scalar(sum_axis(mul(x, x), 1), -0.5);
    double cols = static_cast<double>(x.shape()[1]);
    return add_scalar(quad, -kHalfLog2Pi * cols);
}

}  // namespace anf
