#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ldp/rng.hpp"

namespace ldp {

// Per-tensor shape. 4-rank tensors are NCHW; 3-rank are token stacks [N,T,C];
// 2-rank are feature vectors [N,F]; scalars are {1}.
using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad; // lazily allocated by the backward pass
    bool requires_grad = false;

    void accumulate_grad(const float* g, int64_t n);
    void ensure_grad();
};

// Value-semantic handle to an immutable float32 buffer. Parameters are the
// one sanctioned exception: optimizers update them in place between steps,
// when no tape references them.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, float stddev = 1.f, bool requires_grad = false);
    static Tensor scalar(float v);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int rank() const;
    int dim(int i) const;
    int64_t numel() const;

    const float* data() const;
    float* mutable_data();
    const std::vector<float>& values() const;
    float item() const; // scalar tensors only

    bool requires_grad() const;
    void set_requires_grad(bool b);
    bool has_grad() const;
    const std::vector<float>& grad() const;
    void zero_grad();

    // Deep copy with requires_grad cleared; no tape linkage.
    Tensor detach() const;
    Tensor clone() const;

    TensorNode* node() const { return node_.get(); }
    std::shared_ptr<TensorNode> handle() const { return node_; }

    static Tensor wrap(std::shared_ptr<TensorNode> n) { return Tensor(std::move(n)); }

private:
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
    std::shared_ptr<TensorNode> node_;
};

// Reverse-mode tape. Ops append an entry per executed op while a tape is
// bound; backward() replays entries in exact reverse execution order,
// accumulating gradients additively at fan-out.
class GradTape {
public:
    void record(std::shared_ptr<TensorNode> out, std::function<void()> backward_fn);

    // loss must be a scalar recorded on this tape.
    void backward(const Tensor& loss);

    void clear();
    size_t size() const { return entries_.size(); }

    static GradTape* current();

private:
    struct Entry {
        std::shared_ptr<TensorNode> out;
        std::function<void()> backward_fn;
    };
    std::vector<Entry> entries_;
    friend class TapeScope;
    friend class NoTapeScope;
};

// Binds a tape for the current thread (RAII).
class TapeScope {
public:
    explicit TapeScope(GradTape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    GradTape* prev_;
};

// Suspends recording (e.g. frozen-teacher forward inside a training step).
class NoTapeScope {
public:
    NoTapeScope();
    ~NoTapeScope();
    NoTapeScope(const NoTapeScope&) = delete;
    NoTapeScope& operator=(const NoTapeScope&) = delete;

private:
    GradTape* prev_;
};

// Throws if any element is NaN/Inf; `what` names the producing op.
void check_finite(const Tensor& t, const char* what);

} // namespace ldp
