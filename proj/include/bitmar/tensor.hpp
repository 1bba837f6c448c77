#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace bitmar {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

/// One recorded operation in the compute graph. `order` is the global
/// construction counter; backward visits nodes in decreasing order.
struct GradNode {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(const TensorImpl& out)> backward;
    std::uint64_t order = 0;
};

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;
    bool requires_grad = false;
    std::shared_ptr<GradNode> node;

    float* ensure_grad();
};

/// Dense row-major float tensor with reverse-mode autodiff. Copies are
/// shallow handles onto the same storage; use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim() const { return shape().size(); }
    std::size_t size(std::size_t axis) const;
    std::size_t numel() const;
    /// First dimension of a 2-D tensor.
    std::size_t rows() const;
    /// Last dimension of a 2-D tensor.
    std::size_t cols() const;

    std::span<float> data();
    std::span<const float> data() const;
    std::vector<float> to_vector() const;
    float item() const;
    float& at(std::size_t r, std::size_t c);
    float at(std::size_t r, std::size_t c) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool value);
    bool has_grad() const;
    std::span<float> grad();
    std::span<const float> grad() const;
    void zero_grad();

    /// Backpropagates from a single-element tensor.
    void backward();

    Tensor detach() const;
    Tensor clone() const;

    TensorImpl* get() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

namespace detail {

/// Builds the output of an op. Records a graph node when recording is on and
/// any input requires grad.
Tensor make_result(Shape shape, std::vector<float> data, std::initializer_list<Tensor> inputs,
                   std::function<void(const TensorImpl& out)> backward);
Tensor make_result(Shape shape, std::vector<float> data, const std::vector<Tensor>& inputs,
                   std::function<void(const TensorImpl& out)> backward);

}  // namespace detail

}  // namespace bitmar
