#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spade {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Allocator with a fixed 64-byte alignment. Vectorised kernels peel their
/// loops according to buffer alignment, so a fixed alignment keeps floating
/// point summation order, and therefore results, identical across runs.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

/// Storage for tensor values and gradients.
using Buffer = std::vector<double, AlignedAllocator<double>>;

namespace detail {

// One vertex of the define-by-run graph. Leaves have no parents and no
// backward function; interior nodes hold a closure that reads `grad` and
// accumulates into each parent's `grad`.
struct Node {
    Shape shape;
    Buffer values;
    Buffer grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    double* grad_buffer();  // allocates zeros on first use
};

}  // namespace detail

/// Handle to a dense row-major float64 array that may participate in
/// reverse-mode differentiation. Copies share the underlying node.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const { return values().size(); }

    std::span<const double> values() const;
    std::span<double> mutable_values();
    double item() const;
    double at(std::size_t flat_index) const { return values()[flat_index]; }

    bool requires_grad() const;
    bool has_grad() const;
    /// Gradient buffer; empty span when none has been accumulated.
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();
    void clear_grad();

    /// Value copy with no graph history.
    Tensor detach() const;
    Tensor clone(bool requires_grad) const;

    // Internal construction used by op implementations.
    static Tensor make_result(Shape shape, Buffer values,
                              std::vector<Tensor> parents,
                              std::function<void(detail::Node&)> backward_fn);
    detail::Node& node() const;
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

  private:
    static Tensor from_buffer(Shape shape, Buffer values, bool requires_grad);
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
};

/// Reverse sweep from a scalar root. Leaf gradients accumulate across calls;
/// interior gradients are recomputed on every call.
void backward(const Tensor& loss);

/// Thread-local switch that stops ops from recording graph history.
bool grad_enabled();

class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

}  // namespace spade
