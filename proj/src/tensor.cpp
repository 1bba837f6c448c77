#include "bitmar/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <stdexcept>
#include <unordered_set>

namespace bitmar {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_node_counter{0};

TensorImpl& checked(const std::shared_ptr<TensorImpl>& impl) {
    if (!impl) throw std::logic_error("use of undefined tensor");
    return *impl;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

float* TensorImpl::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    return grad.data();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(shape_numel(shape), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<float> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw std::invalid_argument("tensor shape " + shape_str(shape) + " does not match " +
                                    std::to_string(data.size()) + " values");
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return checked(impl_).shape; }

std::size_t Tensor::size(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw std::out_of_range("axis out of range for shape " + shape_str(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return checked(impl_).data.size(); }

std::size_t Tensor::rows() const {
    const auto& s = shape();
    if (s.size() != 2) throw std::invalid_argument("expected 2-D tensor, got " + shape_str(s));
    return s[0];
}

std::size_t Tensor::cols() const {
    const auto& s = shape();
    if (s.size() != 2) throw std::invalid_argument("expected 2-D tensor, got " + shape_str(s));
    return s[1];
}

std::span<float> Tensor::data() { return checked(impl_).data; }
std::span<const float> Tensor::data() const { return checked(impl_).data; }
std::vector<float> Tensor::to_vector() const { return checked(impl_).data; }

float Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

float& Tensor::at(std::size_t r, std::size_t c) { return checked(impl_).data[r * cols() + c]; }
float Tensor::at(std::size_t r, std::size_t c) const { return checked(impl_).data[r * cols() + c]; }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
    checked(impl_).requires_grad = value;
    return *this;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }

std::span<float> Tensor::grad() {
    checked(impl_).ensure_grad();
    return impl_->grad;
}

std::span<const float> Tensor::grad() const {
    checked(impl_).ensure_grad();
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

void Tensor::backward() {
    auto& root = checked(impl_);
    if (root.data.size() != 1) {
        throw std::invalid_argument("backward() requires a single-element tensor, got " +
                                    shape_str(root.shape));
    }
    std::vector<TensorImpl*> nodes;
    std::unordered_set<TensorImpl*> seen;
    std::vector<TensorImpl*> stack{&root};
    while (!stack.empty()) {
        TensorImpl* t = stack.back();
        stack.pop_back();
        if (!t->node || !seen.insert(t).second) continue;
        nodes.push_back(t);
        for (const auto& in : t->node->inputs) {
            if (in->node) stack.push_back(in.get());
        }
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const TensorImpl* a, const TensorImpl* b) { return a->node->order > b->node->order; });

    root.ensure_grad()[0] += 1.0f;
    for (TensorImpl* t : nodes) {
        if (t->grad.size() == t->data.size()) t->node->backward(*t);
        // Interior gradients are consumed exactly once.
        std::vector<float>().swap(t->grad);
    }
}

Tensor Tensor::detach() const {
    const auto& src = checked(impl_);
    return from(src.shape, src.data, false);
}

Tensor Tensor::clone() const {
    const auto& src = checked(impl_);
    return from(src.shape, src.data, src.requires_grad);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

namespace detail {

Tensor make_result(Shape shape, std::vector<float> data, const std::vector<Tensor>& inputs,
                   std::function<void(const TensorImpl& out)> backward) {
    auto out = Tensor::from(std::move(shape), std::move(data));
    if (!g_grad_enabled) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    auto node = std::make_shared<GradNode>();
    for (const auto& in : inputs) {
        if (in.defined()) node->inputs.push_back(in.impl());
    }
    node->backward = std::move(backward);
    node->order = g_node_counter.fetch_add(1, std::memory_order_relaxed);
    out.get()->node = std::move(node);
    out.get()->requires_grad = true;
    return out;
}

Tensor make_result(Shape shape, std::vector<float> data, std::initializer_list<Tensor> inputs,
                   std::function<void(const TensorImpl& out)> backward) {
    return make_result(std::move(shape), std::move(data), std::vector<Tensor>(inputs), std::move(backward));
}

}  // namespace detail

}  // namespace bitmar
