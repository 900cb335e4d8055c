#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace anf {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thrown when a public op produces NaN/Inf while finite checking is enabled.
struct NonFiniteError : std::runtime_error {
    explicit NonFiniteError(const std::string& what) : std::runtime_error(what) {}
};

// Finite checking is a global toggle; on by default.
bool finite_checks_enabled();
void set_finite_checks(bool on);

class Tape;

/// Dense row-major tensor of doubles, rank 0..2.
///
/// Copies are shallow handles sharing the same storage; values are treated
/// as immutable once an op has consumed them. In-place mutation (through
/// mutable_values) is reserved for construction, data loading and the
/// optimizer, outside any recording tape.
class Tensor {
public:
    Tensor() = default;

    static Tensor scalar(double v);
    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor from(Shape shape, std::vector<double> values);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const;
    std::size_t rows() const;
    std::size_t cols() const;
    bool defined() const { return static_cast<bool>(values_); }

    const std::vector<double>& values() const;
    std::vector<double>& mutable_values();

    double item() const;                       // rank-0 / single-element access
    double at(std::size_t i) const;            // flat index
    double at(std::size_t r, std::size_t c) const;

    Tensor& set_requires_grad(bool on) { requires_grad_ = on; return *this; }
    bool requires_grad() const { return requires_grad_; }

    /// Same values, no grad participation.
    Tensor detach() const;

    /// Identity of the underlying storage (used for parameter dedup/grads).
    const void* storage_id() const { return values_.get(); }

private:
    Shape shape_;
    std::shared_ptr<std::vector<double>> values_;
    bool requires_grad_ = false;
    std::uint64_t tape_id_ = 0;  // tape this tensor was recorded on, 0 = none
    int node_ = -1;

    friend class Tape;
    friend struct OpRecorder;
};

/// Reverse-mode tape. Constructing a Tape makes it the active recorder for
/// the current thread; destruction (or NoGrad) restores the previous one.
/// Define-by-run: a tape lives for one forward/backward pass.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Backpropagate from a scalar recorded on this tape.
    /// Errors: root not scalar, root not on this tape.
    void backward(const Tensor& root);

    /// Gradient of the last backward() w.r.t. a watched leaf. Leaves that do
    /// not reach the root get zeros.
    Tensor grad(const Tensor& leaf) const;

    std::size_t node_count() const { return nodes_.size(); }

    static Tape* active();

private:
    struct Node {
        std::size_t size = 0;
        // Pulls this node's adjoint into its parents' adjoints.
        std::function<void(Tape&, const double*)> pull;
    };

    int ensure_leaf(const Tensor& t);
    int input_node(const Tensor& t);
    double* adj(int node);

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> adj_;
    std::unordered_map<const void*, int> leaves_;
    std::uint64_t id_ = 0;
    bool ran_backward_ = false;

    friend struct OpRecorder;
};

/// Suspends recording within a scope (ops behave as plain arithmetic).
class NoGrad {
public:
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
};

// ---- differentiable primitives ----------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);
Tensor swish(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sum a {n,d} matrix along an axis: axis 0 -> {d}, axis 1 -> {n}.
Tensor sum_axis(const Tensor& a, int axis);
Tensor logsumexp_rows(const Tensor& a);

/// {m,k} x {k,n} -> {m,n}; a rank-1 rhs {k} is treated as {k,1} -> {m}.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
std::vector<Tensor> split(const Tensor& t, int axis, const std::vector<std::size_t>& sizes);

Tensor reshape(const Tensor& t, Shape shape);

/// Row-broadcast: m {n,d} combined with v {d} per row.
Tensor add_rowwise(const Tensor& m, const Tensor& v);
Tensor mul_rowwise(const Tensor& m, const Tensor& v);

// ---- composite log-densities -------------------------------------------

/// sum_i [ -log(2*pi)/2 - log_sigma_i - (x_i-mu_i)^2 / (2 sigma_i^2) ]
Tensor gaussian_logpdf(const Tensor& x, const Tensor& mu, const Tensor& log_sigma);
/// Per-row version for {n,d} inputs -> {n}.
Tensor gaussian_logpdf_rows(const Tensor& x, const Tensor& mu, const Tensor& log_sigma);
/// log N(x; 0, I) per row, {n,d} -> {n}.
Tensor std_normal_logpdf_rows(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(double s, const Tensor& a) { return add_scalar(neg(a), s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }

}  // namespace anf
