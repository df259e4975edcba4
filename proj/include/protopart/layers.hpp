#pragma once

#include "protopart/tensor.hpp"

#include <memory>
#include <random>
#include <string>
#include <vector>

namespace protopart {

/// Named parameter matrices. Gradient buffers share the exact layout of the
/// parameters they belong to (see zeros_like).
struct ParamSet {
    std::vector<std::string> names;
    std::vector<RowMatrix> values;

    int add(std::string name, int rows, int cols);
    std::size_t size() const noexcept { return values.size(); }
    int find(const std::string& name) const noexcept;

    ParamSet zeros_like() const;
    void set_zero();
    void add_scaled(const ParamSet& other, double scale, std::size_t begin = 0,
                    std::size_t end = static_cast<std::size_t>(-1));
    double abs_sum(std::size_t begin = 0, std::size_t end = static_cast<std::size_t>(-1)) const;
    std::size_t scalar_count() const noexcept;
    bool all_finite() const noexcept;

    friend bool operator==(const ParamSet& a, const ParamSet& b) {
        return a.names == b.names && a.values == b.values;
    }
};

struct Shape {
    int channels = 0;
    int rows = 0;
    int cols = 0;
    friend bool operator==(const Shape&, const Shape&) = default;
};

/// Activations a layer keeps for its backward pass.
struct LayerCache {
    std::vector<Tensor> tensors;
    std::vector<int> indices;
    std::vector<LayerCache> children;
};

class Layer {
public:
    virtual ~Layer() = default;
    /// cache may be null for inference-only passes.
    virtual Tensor forward(const ParamSet& params, const Tensor& x, LayerCache* cache) const = 0;
    /// Returns dL/dx and accumulates parameter gradients into grads.
    virtual Tensor backward(const ParamSet& params, const LayerCache& cache, const Tensor& dy,
                            ParamSet& grads) const = 0;
    /// Throws ConfigError if the input shape is incompatible.
    virtual Shape output_shape(const Shape& in) const = 0;
    virtual void initialize(ParamSet& params, std::mt19937_64& rng) const;
};

using LayerPtr = std::unique_ptr<Layer>;

class Conv2d final : public Layer {
public:
    Conv2d(ParamSet& params, const std::string& name, int in_channels, int out_channels, int kernel,
           int stride = 1, int padding = 0);

    Tensor forward(const ParamSet& params, const Tensor& x, LayerCache* cache) const override;
    Tensor backward(const ParamSet& params, const LayerCache& cache, const Tensor& dy,
                    ParamSet& grads) const override;
    Shape output_shape(const Shape& in) const override;
    /// Kaiming (He) normal weights with fan-in scaling, zero bias.
    void initialize(ParamSet& params, std::mt19937_64& rng) const override;

    int weight_index() const noexcept { return weight_; }
    int bias_index() const noexcept { return bias_; }

private:
    RowMatrix im2col(const Tensor& x, int out_rows, int out_cols) const;

    int in_, out_, kernel_, stride_, pad_;
    int weight_, bias_;
};

class Relu final : public Layer {
public:
    Tensor forward(const ParamSet&, const Tensor& x, LayerCache* cache) const override;
    Tensor backward(const ParamSet&, const LayerCache& cache, const Tensor& dy, ParamSet&) const override;
    Shape output_shape(const Shape& in) const override { return in; }
};

class Sigmoid final : public Layer {
public:
    Tensor forward(const ParamSet&, const Tensor& x, LayerCache* cache) const override;
    Tensor backward(const ParamSet&, const LayerCache& cache, const Tensor& dy, ParamSet&) const override;
    Shape output_shape(const Shape& in) const override { return in; }
};

/// Non-overlapping k x k max pooling; ties resolve to the first element in row-major order.
class MaxPool final : public Layer {
public:
    explicit MaxPool(int kernel) : kernel_(kernel) {}
    Tensor forward(const ParamSet&, const Tensor& x, LayerCache* cache) const override;
    Tensor backward(const ParamSet&, const LayerCache& cache, const Tensor& dy, ParamSet&) const override;
    Shape output_shape(const Shape& in) const override;

private:
    int kernel_;
};

class AvgPool final : public Layer {
public:
    explicit AvgPool(int kernel) : kernel_(kernel) {}
    Tensor forward(const ParamSet&, const Tensor& x, LayerCache* cache) const override;
    Tensor backward(const ParamSet&, const LayerCache& cache, const Tensor& dy, ParamSet&) const override;
    Shape output_shape(const Shape& in) const override;

private:
    int kernel_;
};

class Sequential final : public Layer {
public:
    Sequential() = default;
    Sequential& add(LayerPtr layer) {
        layers_.push_back(std::move(layer));
        return *this;
    }
    template <typename L, typename... Args>
    Sequential& emplace(Args&&... args) {
        return add(std::make_unique<L>(std::forward<Args>(args)...));
    }
    bool empty() const noexcept { return layers_.empty(); }
    std::size_t size() const noexcept { return layers_.size(); }

    Tensor forward(const ParamSet& params, const Tensor& x, LayerCache* cache) const override;
    Tensor backward(const ParamSet& params, const LayerCache& cache, const Tensor& dy,
                    ParamSet& grads) const override;
    Shape output_shape(const Shape& in) const override;
    void initialize(ParamSet& params, std::mt19937_64& rng) const override;

private:
    std::vector<LayerPtr> layers_;
};

/// relu(branch(x) + shortcut(x)); an empty shortcut is the identity.
class Residual final : public Layer {
public:
    Residual(std::unique_ptr<Sequential> branch, std::unique_ptr<Sequential> shortcut)
        : branch_(std::move(branch)), shortcut_(std::move(shortcut)) {}
    Tensor forward(const ParamSet& params, const Tensor& x, LayerCache* cache) const override;
    Tensor backward(const ParamSet& params, const LayerCache& cache, const Tensor& dy,
                    ParamSet& grads) const override;
    Shape output_shape(const Shape& in) const override;
    void initialize(ParamSet& params, std::mt19937_64& rng) const override;

private:
    std::unique_ptr<Sequential> branch_;
    std::unique_ptr<Sequential> shortcut_;
};

/// Densely connected block: every unit sees the channel concatenation of the
/// block input and all earlier unit outputs; the block output is the full concatenation.
class DenseBlock final : public Layer {
public:
    explicit DenseBlock(std::vector<std::unique_ptr<Sequential>> units) : units_(std::move(units)) {}
    Tensor forward(const ParamSet& params, const Tensor& x, LayerCache* cache) const override;
    Tensor backward(const ParamSet& params, const LayerCache& cache, const Tensor& dy,
                    ParamSet& grads) const override;
    Shape output_shape(const Shape& in) const override;
    void initialize(ParamSet& params, std::mt19937_64& rng) const override;

private:
    std::vector<std::unique_ptr<Sequential>> units_;
};

}  // namespace protopart
