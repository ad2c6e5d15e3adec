#include "ldp/tensor.hpp"

#include <cstring>

#include "ldp/error.hpp"

namespace ldp {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

void TensorNode::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.f);
}

void TensorNode::accumulate_grad(const float* g, int64_t n) {
    ensure_grad();
    require(static_cast<int64_t>(grad.size()) == n, "gradient size mismatch: have ",
            grad.size(), ", got ", n);
    for (int64_t i = 0; i < n; ++i) grad[i] += g[i];
}

static std::shared_ptr<TensorNode> make_node(Shape shape, bool requires_grad) {
    for (int d : shape)
        require(d > 0, "tensor shape must be positive, got ", shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data.assign(shape_numel(n->shape), 0.f);
    n->requires_grad = requires_grad;
    return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return Tensor(make_node(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    auto n = make_node(std::move(shape), requires_grad);
    std::fill(n->data.begin(), n->data.end(), value);
    return Tensor(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
    for (int d : shape)
        require(d > 0, "tensor shape must be positive, got ", shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    require(static_cast<int64_t>(data.size()) == shape_numel(shape),
            "data length ", data.size(), " != shape product for ", shape_str(shape));
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, bool requires_grad) {
    auto n = make_node(std::move(shape), requires_grad);
    for (auto& v : n->data) v = rng.normal() * stddev;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(float v) { return from_data({1}, {v}); }

const Shape& Tensor::shape() const {
    require(defined(), "shape() on undefined tensor");
    return node_->shape;
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int i) const {
    const auto& s = shape();
    require(i >= 0 && i < static_cast<int>(s.size()), "dim ", i, " out of range for ",
            shape_str(s));
    return s[i];
}

int64_t Tensor::numel() const { return shape_numel(shape()); }

const float* Tensor::data() const {
    require(defined(), "data() on undefined tensor");
    return node_->data.data();
}

float* Tensor::mutable_data() {
    require(defined(), "mutable_data() on undefined tensor");
    return node_->data.data();
}

const std::vector<float>& Tensor::values() const {
    require(defined(), "values() on undefined tensor");
    return node_->data;
}

float Tensor::item() const {
    require(defined() && numel() == 1, "item() requires a scalar tensor");
    return node_->data[0];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

void Tensor::set_requires_grad(bool b) {
    require(defined(), "set_requires_grad on undefined tensor");
    node_->requires_grad = b;
}

bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

const std::vector<float>& Tensor::grad() const {
    require(defined(), "grad() on undefined tensor");
    require(!node_->grad.empty(), "no gradient recorded for this tensor");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (defined()) node_->grad.clear();
}

Tensor Tensor::detach() const {
    require(defined(), "detach() on undefined tensor");
    return from_data(node_->shape, node_->data, false);
}

Tensor Tensor::clone() const {
    require(defined(), "clone() on undefined tensor");
    return from_data(node_->shape, node_->data, node_->requires_grad);
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local GradTape* g_active_tape = nullptr;
}

GradTape* GradTape::current() { return g_active_tape; }

void GradTape::record(std::shared_ptr<TensorNode> out, std::function<void()> backward_fn) {
    entries_.push_back({std::move(out), std::move(backward_fn)});
}

void GradTape::backward(const Tensor& loss) {
    require(loss.defined() && loss.numel() == 1, "backward() requires a scalar loss, got ",
            loss.defined() ? shape_str(loss.shape()) : "<undefined>");
    require(!entries_.empty(), "backward() on an empty tape");
    require(entries_.back().out == loss.handle(),
            "loss is not the last op recorded on this tape");
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.f;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->out->grad.empty()) continue; // no downstream path reached this op
        it->backward_fn();
    }
}

void GradTape::clear() { entries_.clear(); }

TapeScope::TapeScope(GradTape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

NoTapeScope::NoTapeScope() : prev_(g_active_tape) { g_active_tape = nullptr; }
NoTapeScope::~NoTapeScope() { g_active_tape = prev_; }

void check_finite(const Tensor& t, const char* what) {
    const float* p = t.data();
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) {
        uint32_t bits;
        std::memcpy(&bits, &p[i], sizeof(bits));
        if ((bits & 0x7f800000u) == 0x7f800000u)
            fail(what, ": non-finite value at flat index ", i, " in tensor ",
                 shape_str(t.shape()));
    }
}

} // namespace ldp
