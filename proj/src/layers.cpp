#include "protopart/layers.hpp"

#include <algorithm>

namespace protopart {

int ParamSet::add(std::string name, int rows, int cols) {
    names.push_back(std::move(name));
    values.emplace_back(RowMatrix::Zero(rows, cols));
    return static_cast<int>(values.size()) - 1;
}

int ParamSet::find(const std::string& name) const noexcept {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int>(i);
    return -1;
}

ParamSet ParamSet::zeros_like() const {
    ParamSet out;
    out.names = names;
    out.values.reserve(values.size());
    for (const auto& v : values) out.values.emplace_back(RowMatrix::Zero(v.rows(), v.cols()));
    return out;
}

void ParamSet::set_zero() {
    for (auto& v : values) v.setZero();
}

void ParamSet::add_scaled(const ParamSet& other, double scale, std::size_t begin, std::size_t end) {
    end = std::min(end, values.size());
    for (std::size_t i = begin; i < end; ++i) values[i] += scale * other.values[i];
}

double ParamSet::abs_sum(std::size_t begin, std::size_t end) const {
    end = std::min(end, values.size());
    double total = 0.0;
    for (std::size_t i = begin; i < end; ++i) total += values[i].cwiseAbs().sum();
    return total;
}

std::size_t ParamSet::scalar_count() const noexcept {
    std::size_t n = 0;
    for (const auto& v : values) n += static_cast<std::size_t>(v.size());
    return n;
}

bool ParamSet::all_finite() const noexcept {
    for (const auto& v : values)
        if (!v.allFinite()) return false;
    return true;
}

void Layer::initialize(ParamSet&, std::mt19937_64&) const {}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(ParamSet& params, const std::string& name, int in_channels, int out_channels, int kernel,
               int stride, int padding)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(padding) {
    if (in_ < 1 || out_ < 1 || kernel_ < 1 || stride_ < 1 || pad_ < 0)
        throw ConfigError("invalid convolution geometry for " + name);
    weight_ = params.add(name + ".weight", out_, in_ * kernel_ * kernel_);
    bias_ = params.add(name + ".bias", out_, 1);
}

Shape Conv2d::output_shape(const Shape& in) const {
    if (in.channels != in_)
        throw ConfigError("convolution expects " + std::to_string(in_) + " input channels, got " +
                          std::to_string(in.channels));
    const int rows = (in.rows + 2 * pad_ - kernel_) / stride_ + 1;
    const int cols = (in.cols + 2 * pad_ - kernel_) / stride_ + 1;
    if (rows < 1 || cols < 1) throw ConfigError("convolution input smaller than kernel");
    return {out_, rows, cols};
}

void Conv2d::initialize(ParamSet& params, std::mt19937_64& rng) const {
    const double stddev = std::sqrt(2.0 / (in_ * kernel_ * kernel_));
    std::normal_distribution<double> normal(0.0, stddev);
    auto& w = params.values[weight_];
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = normal(rng);
    params.values[bias_].setZero();
}

RowMatrix Conv2d::im2col(const Tensor& x, int out_rows, int out_cols) const {
    RowMatrix cols(in_ * kernel_ * kernel_, out_rows * out_cols);
    for (int c = 0; c < in_; ++c)
        for (int ky = 0; ky < kernel_; ++ky)
            for (int kx = 0; kx < kernel_; ++kx) {
                double* dst = cols.row((c * kernel_ + ky) * kernel_ + kx).data();
                for (int oy = 0; oy < out_rows; ++oy) {
                    const int iy = oy * stride_ - pad_ + ky;
                    for (int ox = 0; ox < out_cols; ++ox) {
                        const int ix = ox * stride_ - pad_ + kx;
                        const bool inside = iy >= 0 && iy < x.rows && ix >= 0 && ix < x.cols;
                        dst[oy * out_cols + ox] = inside ? x.at(c, iy, ix) : 0.0;
                    }
                }
            }
    return cols;
}

Tensor Conv2d::forward(const ParamSet& params, const Tensor& x, LayerCache* cache) const {
    const Shape out_shape = output_shape({x.channels, x.rows, x.cols});
    Tensor y(out_, out_shape.rows, out_shape.cols);
    const auto& w = params.values[weight_];
    const auto& b = params.values[bias_];
    auto ym = y.as_matrix();
    if (kernel_ == 1 && stride_ == 1 && pad_ == 0) {
        ym.noalias() = w * x.as_matrix();
    } else {
        ym.noalias() = w * im2col(x, out_shape.rows, out_shape.cols);
    }
    ym.colwise() += b.col(0);
    if (cache) cache->tensors = {x};
    return y;
}

Tensor Conv2d::backward(const ParamSet& params, const LayerCache& cache, const Tensor& dy,
                        ParamSet& grads) const {
    const Tensor& x = cache.tensors.at(0);
    const auto& w = params.values[weight_];
    const auto dym = dy.as_matrix();
    grads.values[bias_].col(0) += dym.rowwise().sum();
    Tensor dx(x.channels, x.rows, x.cols);
    if (kernel_ == 1 && stride_ == 1 && pad_ == 0) {
        grads.values[weight_].noalias() += dym * x.as_matrix().transpose();
        dx.as_matrix().noalias() = w.transpose() * dym;
        return dx;
    }
    const RowMatrix cols = im2col(x, dy.rows, dy.cols);
    grads.values[weight_].noalias() += dym * cols.transpose();
    const RowMatrix dcols = w.transpose() * dym;
    for (int c = 0; c < in_; ++c)
        for (int ky = 0; ky < kernel_; ++ky)
            for (int kx = 0; kx < kernel_; ++kx) {
                const double* src = dcols.row((c * kernel_ + ky) * kernel_ + kx).data();
                for (int oy = 0; oy < dy.rows; ++oy) {
                    const int iy = oy * stride_ - pad_ + ky;
                    if (iy < 0 || iy >= x.rows) continue;
                    for (int ox = 0; ox < dy.cols; ++ox) {
                        const int ix = ox * stride_ - pad_ + kx;
                        if (ix < 0 || ix >= x.cols) continue;
                        dx.at(c, iy, ix) += src[oy * dy.cols + ox];
                    }
                }
            }
    return dx;
}

// ---------------------------------------------------------------------------
// Pointwise activations

Tensor Relu::forward(const ParamSet&, const Tensor& x, LayerCache* cache) const {
    Tensor y = x;
    for (double& v : y.data) v = v > 0.0 ? v : 0.0;
    if (cache) cache->tensors = {y};
    return y;
}

Tensor Relu::backward(const ParamSet&, const LayerCache& cache, const Tensor& dy, ParamSet&) const {
    const Tensor& y = cache.tensors.at(0);
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i)
        if (y.data[i] <= 0.0) dx.data[i] = 0.0;
    return dx;
}

Tensor Sigmoid::forward(const ParamSet&, const Tensor& x, LayerCache* cache) const {
    Tensor y = x;
    for (double& v : y.data) v = 1.0 / (1.0 + std::exp(-v));
    if (cache) cache->tensors = {y};
    return y;
}

Tensor Sigmoid::backward(const ParamSet&, const LayerCache& cache, const Tensor& dy, ParamSet&) const {
    const Tensor& y = cache.tensors.at(0);
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] *= y.data[i] * (1.0 - y.data[i]);
    return dx;
}

// ---------------------------------------------------------------------------
// Pooling

Shape MaxPool::output_shape(const Shape& in) const {
    if (kernel_ < 1 || in.rows % kernel_ != 0 || in.cols % kernel_ != 0)
        throw ConfigError("max-pool kernel " + std::to_string(kernel_) + " does not divide " +
                          std::to_string(in.rows) + "x" + std::to_string(in.cols));
    return {in.channels, in.rows / kernel_, in.cols / kernel_};
}

Tensor MaxPool::forward(const ParamSet&, const Tensor& x, LayerCache* cache) const {
    const Shape s = output_shape({x.channels, x.rows, x.cols});
    if (kernel_ == 1) {
        if (cache) cache->indices.clear();
        return x;
    }
    Tensor y(s.channels, s.rows, s.cols);
    std::vector<int> arg(y.size());
    std::size_t o = 0;
    for (int c = 0; c < x.channels; ++c)
        for (int oy = 0; oy < s.rows; ++oy)
            for (int ox = 0; ox < s.cols; ++ox, ++o) {
                double best = -std::numeric_limits<double>::infinity();
                int best_idx = -1;
                for (int ky = 0; ky < kernel_; ++ky)
                    for (int kx = 0; kx < kernel_; ++kx) {
                        const int iy = oy * kernel_ + ky, ix = ox * kernel_ + kx;
                        const double v = x.at(c, iy, ix);
                        if (best_idx < 0 || v > best) {
                            best = v;
                            best_idx = (c * x.rows + iy) * x.cols + ix;
                        }
                    }
                y.data[o] = best;
                arg[o] = best_idx;
            }
    if (cache) {
        // Argmax offsets followed by the input shape.
        arg.insert(arg.end(), {x.channels, x.rows, x.cols});
        cache->indices = std::move(arg);
    }
    return y;
}

Tensor MaxPool::backward(const ParamSet&, const LayerCache& cache, const Tensor& dy, ParamSet&) const {
    if (kernel_ == 1) return dy;
    const auto& idx = cache.indices;
    const std::size_t n = idx.size();
    Tensor dx(idx[n - 3], idx[n - 2], idx[n - 1]);
    for (std::size_t o = 0; o < dy.size(); ++o) dx.data[cache.indices[o]] += dy.data[o];
    return dx;
}

Shape AvgPool::output_shape(const Shape& in) const {
    if (kernel_ < 1 || in.rows % kernel_ != 0 || in.cols % kernel_ != 0)
        throw ConfigError("avg-pool kernel does not divide input");
    return {in.channels, in.rows / kernel_, in.cols / kernel_};
}

Tensor AvgPool::forward(const ParamSet&, const Tensor& x, LayerCache* cache) const {
    const Shape s = output_shape({x.channels, x.rows, x.cols});
    Tensor y(s.channels, s.rows, s.cols);
    const double inv = 1.0 / (kernel_ * kernel_);
    for (int c = 0; c < x.channels; ++c)
        for (int oy = 0; oy < s.rows; ++oy)
            for (int ox = 0; ox < s.cols; ++ox) {
                double acc = 0.0;
                for (int ky = 0; ky < kernel_; ++ky)
                    for (int kx = 0; kx < kernel_; ++kx) acc += x.at(c, oy * kernel_ + ky, ox * kernel_ + kx);
                y.at(c, oy, ox) = acc * inv;
            }
    if (cache) cache->indices = {x.channels, x.rows, x.cols};
    return y;
}

Tensor AvgPool::backward(const ParamSet&, const LayerCache& cache, const Tensor& dy, ParamSet&) const {
    Tensor dx(cache.indices.at(0), cache.indices.at(1), cache.indices.at(2));
    const double inv = 1.0 / (kernel_ * kernel_);
    for (int c = 0; c < dx.channels; ++c)
        for (int y = 0; y < dx.rows; ++y)
            for (int x = 0; x < dx.cols; ++x) dx.at(c, y, x) = dy.at(c, y / kernel_, x / kernel_) * inv;
    return dx;
}

// ---------------------------------------------------------------------------
// Containers

Tensor Sequential::forward(const ParamSet& params, const Tensor& x, LayerCache* cache) const {
    if (cache) cache->children.assign(layers_.size(), {});
    Tensor cur = x;
    for (std::size_t i = 0; i < layers_.size(); ++i)
        cur = layers_[i]->forward(params, cur, cache ? &cache->children[i] : nullptr);
    return cur;
}

Tensor Sequential::backward(const ParamSet& params, const LayerCache& cache, const Tensor& dy,
                            ParamSet& grads) const {
    Tensor grad = dy;
    for (std::size_t i = layers_.size(); i-- > 0;) grad = layers_[i]->backward(params, cache.children[i], grad, grads);
    return grad;
}

Shape Sequential::output_shape(const Shape& in) const {
    Shape s = in;
    for (const auto& l : layers_) s = l->output_shape(s);
    return s;
}

void Sequential::initialize(ParamSet& params, std::mt19937_64& rng) const {
    for (const auto& l : layers_) l->initialize(params, rng);
}

Tensor Residual::forward(const ParamSet& params, const Tensor& x, LayerCache* cache) const {
    if (cache) cache->children.assign(2, {});
    Tensor y = branch_->forward(params, x, cache ? &cache->children[0] : nullptr);
    if (shortcut_ && !shortcut_->empty()) {
        const Tensor s = shortcut_->forward(params, x, cache ? &cache->children[1] : nullptr);
        for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += s.data[i];
    } else {
        for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += x.data[i];
    }
    for (double& v : y.data) v = v > 0.0 ? v : 0.0;
    if (cache) cache->tensors = {y};
    return y;
}

Tensor Residual::backward(const ParamSet& params, const LayerCache& cache, const Tensor& dy,
                          ParamSet& grads) const {
    Tensor g = dy;
    const Tensor& y = cache.tensors.at(0);
    for (std::size_t i = 0; i < g.size(); ++i)
        if (y.data[i] <= 0.0) g.data[i] = 0.0;
    Tensor dx = branch_->backward(params, cache.children[0], g, grads);
    const Tensor ds = shortcut_ && !shortcut_->empty() ? shortcut_->backward(params, cache.children[1], g, grads) : g;
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += ds.data[i];
    return dx;
}

Shape Residual::output_shape(const Shape& in) const {
    const Shape b = branch_->output_shape(in);
    const Shape s = shortcut_ && !shortcut_->empty() ? shortcut_->output_shape(in) : in;
    if (!(b == s)) throw ConfigError("residual branch and shortcut shapes differ");
    return b;
}

void Residual::initialize(ParamSet& params, std::mt19937_64& rng) const {
    branch_->initialize(params, rng);
    if (shortcut_) shortcut_->initialize(params, rng);
}

namespace {

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    Tensor out(a.channels + b.channels, a.rows, a.cols);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
    return out;
}

}  // namespace

Tensor DenseBlock::forward(const ParamSet& params, const Tensor& x, LayerCache* cache) const {
    if (cache) cache->children.assign(units_.size(), {});
    Tensor features = x;
    for (std::size_t i = 0; i < units_.size(); ++i) {
        const Tensor fresh = units_[i]->forward(params, features, cache ? &cache->children[i] : nullptr);
        if (cache) cache->indices.push_back(features.channels);
        features = concat_channels(features, fresh);
    }
    return features;
}

Tensor DenseBlock::backward(const ParamSet& params, const LayerCache& cache, const Tensor& dy,
                            ParamSet& grads) const {
    Tensor grad = dy;
    for (std::size_t i = units_.size(); i-- > 0;) {
        const int in_channels = cache.indices[i];
        const std::size_t split = static_cast<std::size_t>(in_channels) * grad.plane();
        Tensor d_fresh(grad.channels - in_channels, grad.rows, grad.cols);
        std::copy(grad.data.begin() + static_cast<std::ptrdiff_t>(split), grad.data.end(), d_fresh.data.begin());
        Tensor d_in = units_[i]->backward(params, cache.children[i], d_fresh, grads);
        grad.data.resize(split);
        grad.channels = in_channels;
        for (std::size_t j = 0; j < split; ++j) grad.data[j] += d_in.data[j];
    }
    return grad;
}

Shape DenseBlock::output_shape(const Shape& in) const {
    Shape s = in;
    for (const auto& u : units_) {
        const Shape f = u->output_shape(s);
        if (f.rows != s.rows || f.cols != s.cols) throw ConfigError("dense unit changes spatial size");
        s.channels += f.channels;
    }
    return s;
}

void DenseBlock::initialize(ParamSet& params, std::mt19937_64& rng) const {
    for (const auto& u : units_) u->initialize(params, rng);
}

}  // namespace protopart
