#pragma once

// Differentiable operations over BasicTensor. Batched image tensors are
// laid out batch/channel/height/width.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "hdl/tensor.hpp"

namespace hdl {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Gradient buffer of parent i, or nullptr when that parent is a constant.
template <typename T>
T* parent_grad(Node<T>& self, std::size_t i) {
    auto& p = *self.parents[i];
    if (!p.requires_grad) return nullptr;
    return p.ensure_grad().data();
}

template <typename T>
void require_rank(const BasicTensor<T>& x, std::size_t rank, const char* op) {
    if (x.rank() != rank) {
        throw ShapeError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                         to_string(x.shape()));
    }
}

struct ConvGeometry {
    std::size_t channels, height, width, kernel, stride, padding, out_h, out_w;
};

inline ConvGeometry conv_geometry(std::size_t c, std::size_t h, std::size_t w, std::size_t k,
                                  std::size_t stride, std::size_t pad) {
    if (h + 2 * pad < k || w + 2 * pad < k) {
        throw ShapeError("conv2d kernel " + std::to_string(k) + " larger than padded input " +
                         std::to_string(h) + "x" + std::to_string(w));
    }
    return {c, h, w, k, stride, pad, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1};
}

// Output columns [lo, hi) whose input column ox*stride + kx - pad is in range.
inline std::pair<std::size_t, std::size_t> valid_span(std::size_t out, std::size_t in, std::size_t k,
                                                      std::size_t stride, std::size_t pad) {
    std::size_t lo = 0;
    while (lo < out && lo * stride + k < pad) ++lo;
    std::size_t hi = lo;
    while (hi < out && hi * stride + k < pad + in) ++hi;
    return {lo, hi};
}

// cols is [C*k*k, out_h*out_w].
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
    const std::size_t plane = g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            const auto [ylo, yhi] = valid_span(g.out_h, g.height, ky, g.stride, g.padding);
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const auto [xlo, xhi] = valid_span(g.out_w, g.width, kx, g.stride, g.padding);
                T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * plane;
                std::fill(row, row + ylo * g.out_w, T{0});
                for (std::size_t oy = ylo; oy < yhi; ++oy) {
                    T* dst = row + oy * g.out_w;
                    const T* src = img + (c * g.height + oy * g.stride + ky - g.padding) * g.width;
                    std::fill(dst, dst + xlo, T{0});
                    if (g.stride == 1) {
                        std::copy(src + xlo + kx - g.padding, src + xhi + kx - g.padding, dst + xlo);
                    } else {
                        for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox] = src[ox * g.stride + kx - g.padding];
                    }
                    std::fill(dst + xhi, dst + g.out_w, T{0});
                }
                std::fill(row + yhi * g.out_w, row + plane, T{0});
            }
        }
    }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
    const std::size_t plane = g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            const auto [ylo, yhi] = valid_span(g.out_h, g.height, ky, g.stride, g.padding);
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const auto [xlo, xhi] = valid_span(g.out_w, g.width, kx, g.stride, g.padding);
                const T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * plane;
                for (std::size_t oy = ylo; oy < yhi; ++oy) {
                    const T* src = row + oy * g.out_w;
                    T* dst = img + (c * g.height + oy * g.stride + ky - g.padding) * g.width;
                    for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox * g.stride + kx - g.padding] += src[ox];
                }
            }
        }
    }
}

}  // namespace detail

// x [N,C,H,W], weight [O,C,k,k], bias [O].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      std::size_t stride, std::size_t padding) {
    detail::require_rank(x, 4, "conv2d");
    detail::require_rank(weight, 4, "conv2d weight");
    const std::size_t n = x.dim(0), c = x.dim(1), o = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != c || weight.dim(3) != k || bias.numel() != o) {
        throw ShapeError("conv2d weight " + to_string(weight.shape()) + " incompatible with input " +
                         to_string(x.shape()));
    }
    const auto g = detail::conv_geometry(c, x.dim(2), x.dim(3), k, stride, padding);
    const std::size_t ckk = c * k * k, plane = g.out_h * g.out_w;
    const std::size_t in_sz = c * g.height * g.width, out_sz = o * plane;

    std::vector<T> out(n * out_sz);
    std::vector<T> cols(ckk * plane);
    detail::ConstMatMap<T> w(weight.data().data(), o, ckk);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.data().data(), o);
    for (std::size_t i = 0; i < n; ++i) {
        detail::im2col(x.data().data() + i * in_sz, g, cols.data());
        detail::MatMap<T> y(out.data() + i * out_sz, o, plane);
        y.noalias() = w * detail::ConstMatMap<T>(cols.data(), ckk, plane);
        y.colwise() += b;
    }

    return BasicTensor<T>::from_op({n, o, g.out_h, g.out_w}, std::move(out), {x, weight, bias},
        [g, n, o, ckk, plane, in_sz, out_sz](detail::Node<T>& self) {
            const T* xd = self.parents[0]->data.data();
            const T* wd = self.parents[1]->data.data();
            T* gx = detail::parent_grad(self, 0);
            T* gw = detail::parent_grad(self, 1);
            T* gb = detail::parent_grad(self, 2);
            std::vector<T> cols(ckk * plane);
            detail::ConstMatMap<T> w(wd, o, ckk);
            for (std::size_t i = 0; i < n; ++i) {
                detail::ConstMatMap<T> dy(self.grad.data() + i * out_sz, o, plane);
                if (gw) {
                    detail::im2col(xd + i * in_sz, g, cols.data());
                    detail::MatMap<T>(gw, o, ckk).noalias() +=
                        dy * detail::ConstMatMap<T>(cols.data(), ckk, plane).transpose();
                }
                if (gb) {
                    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb, o) += dy.rowwise().sum();
                }
                if (gx) {
                    detail::MatMap<T>(cols.data(), ckk, plane).noalias() = w.transpose() * dy;
                    detail::col2im_add(cols.data(), g, gx + i * in_sz);
                }
            }
        });
}

// x [N,F], weight [O,F], bias [O].
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
    detail::require_rank(x, 2, "linear");
    const std::size_t n = x.dim(0), f = x.dim(1), o = weight.dim(0);
    if (weight.rank() != 2 || weight.dim(1) != f || bias.numel() != o) {
        throw ShapeError("linear weight " + to_string(weight.shape()) + " incompatible with input " +
                         to_string(x.shape()));
    }
    std::vector<T> out(n * o);
    detail::MatMap<T> y(out.data(), n, o);
    y.noalias() = detail::ConstMatMap<T>(x.data().data(), n, f) *
                  detail::ConstMatMap<T>(weight.data().data(), o, f).transpose();
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), o);

    return BasicTensor<T>::from_op({n, o}, std::move(out), {x, weight, bias},
        [n, f, o](detail::Node<T>& self) {
            detail::ConstMatMap<T> dy(self.grad.data(), n, o);
            if (T* gx = detail::parent_grad(self, 0)) {
                detail::MatMap<T>(gx, n, f).noalias() += dy * detail::ConstMatMap<T>(self.parents[1]->data.data(), o, f);
            }
            if (T* gw = detail::parent_grad(self, 1)) {
                detail::MatMap<T>(gw, o, f).noalias() +=
                    dy.transpose() * detail::ConstMatMap<T>(self.parents[0]->data.data(), n, f);
            }
            if (T* gb = detail::parent_grad(self, 2)) {
                Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb, o) += dy.colwise().sum();
            }
        });
}

// a [M,K] x b [K,N].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw ShapeError("matmul " + to_string(a.shape()) + " x " + to_string(b.shape()));
    std::vector<T> out(m * n);
    detail::MatMap<T>(out.data(), m, n).noalias() =
        detail::ConstMatMap<T>(a.data().data(), m, k) * detail::ConstMatMap<T>(b.data().data(), k, n);
    return BasicTensor<T>::from_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& self) {
        detail::ConstMatMap<T> dy(self.grad.data(), m, n);
        if (T* ga = detail::parent_grad(self, 0)) {
            detail::MatMap<T>(ga, m, k).noalias() += dy * detail::ConstMatMap<T>(self.parents[1]->data.data(), k, n).transpose();
        }
        if (T* gb = detail::parent_grad(self, 1)) {
            detail::MatMap<T>(gb, k, n).noalias() += detail::ConstMatMap<T>(self.parents[0]->data.data(), m, k).transpose() * dy;
        }
    });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
    std::vector<T> out(x.data().begin(), x.data().end());
    for (auto& v : out) v = v > T{0} ? v : T{0};
    return BasicTensor<T>::from_op(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        const auto& xd = self.parents[0]->data;
        for (std::size_t i = 0; i < xd.size(); ++i) {
            if (xd[i] > T{0}) gx[i] += self.grad[i];
        }
    });
}

// 2x2 window, stride 2; odd trailing rows/columns are dropped.
template <typename T>
BasicTensor<T> maxpool2x2(const BasicTensor<T>& x) {
    detail::require_rank(x, 4, "maxpool2x2");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h < 2 || w < 2) throw ShapeError("maxpool2x2 needs spatial size >= 2, got " + to_string(x.shape()));
    const std::size_t oh = h / 2, ow = w / 2;
    std::vector<T> out(n * c * oh * ow);
    std::vector<std::uint32_t> argmax(out.size());
    const T* xd = x.data().data();
    for (std::size_t p = 0; p < n * c; ++p) {
        const T* src = xd + p * h * w;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (2 * oy) * w + 2 * ox;
                for (std::size_t dy = 0; dy < 2; ++dy) {
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        std::size_t idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if (src[idx] > src[best]) best = idx;
                    }
                }
                std::size_t o = (p * oh + oy) * ow + ox;
                out[o] = src[best];
                argmax[o] = static_cast<std::uint32_t>(p * h * w + best);
            }
        }
    }
    return BasicTensor<T>::from_op({n, c, oh, ow}, std::move(out), {x},
        [argmax = std::move(argmax)](detail::Node<T>& self) {
            T* gx = detail::parent_grad(self, 0);
            for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += self.grad[i];
        });
}

template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& x) {
    if (x.rank() < 2) throw ShapeError("flatten expects a batch axis, got " + to_string(x.shape()));
    return x.reshape({x.dim(0), x.numel() / x.dim(0)});
}

// Per-channel batch normalization over [N,C,H,W]. In training mode the batch
// statistics are used and the running statistics are updated in place.
template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                           std::span<T> running_mean, std::span<T> running_var, bool training,
                           double momentum, double eps) {
    detail::require_rank(x, 4, "batchnorm2d");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.numel() != c || beta.numel() != c || running_mean.size() != c || running_var.size() != c) {
        throw ShapeError("batchnorm2d has " + std::to_string(gamma.numel()) + " channels, input " +
                         to_string(x.shape()));
    }
    const std::size_t count = n * hw;
    if (training && count < 2) throw ShapeError("batchnorm2d training needs more than one value per channel");

    const T* xd = x.data().data();
    using Row = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
    using MutRow = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
    std::vector<T> inv_std(c), xhat(x.numel()), out(x.numel());
    for (std::size_t ch = 0; ch < c; ++ch) {
        double mu, var;
        if (training) {
            double s = 0;
            for (std::size_t i = 0; i < n; ++i) s += Row(xd + (i * c + ch) * hw, hw).template cast<double>().sum();
            mu = s / static_cast<double>(count);
            double ss = 0;
            for (std::size_t i = 0; i < n; ++i)
                ss += (Row(xd + (i * c + ch) * hw, hw).template cast<double>() - mu).square().sum();
            var = ss / static_cast<double>(count);
            running_mean[ch] = static_cast<T>((1 - momentum) * running_mean[ch] + momentum * mu);
            running_var[ch] = static_cast<T>((1 - momentum) * running_var[ch] +
                                             momentum * ss / static_cast<double>(count - 1));
        } else {
            mu = running_mean[ch];
            var = running_var[ch];
        }
        const T m = static_cast<T>(mu);
        inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + eps));
        const T gm = gamma.data()[ch], bt = beta.data()[ch];
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * hw;
            MutRow xh(xhat.data() + off, hw);
            xh = (Row(xd + off, hw) - m) * inv_std[ch];
            MutRow(out.data() + off, hw) = gm * xh + bt;
        }
    }

    return BasicTensor<T>::from_op(x.shape(), std::move(out), {x, gamma, beta},
        [n, c, hw, count, training, inv_std = std::move(inv_std), xhat = std::move(xhat)](detail::Node<T>& self) {
            T* gx = detail::parent_grad(self, 0);
            T* gg = detail::parent_grad(self, 1);
            T* gb = detail::parent_grad(self, 2);
            const T* gamma = self.parents[1]->data.data();
            const T* dy = self.grad.data();
            using Row = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
            for (std::size_t ch = 0; ch < c; ++ch) {
                double sum_dy = 0, sum_dy_xhat = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t off = (i * c + ch) * hw;
                    Row d(dy + off, hw), xh(xhat.data() + off, hw);
                    sum_dy += d.template cast<double>().sum();
                    sum_dy_xhat += (d.template cast<double>() * xh.template cast<double>()).sum();
                }
                if (gg) gg[ch] += static_cast<T>(sum_dy_xhat);
                if (gb) gb[ch] += static_cast<T>(sum_dy);
                if (!gx) continue;
                const T scale = static_cast<T>(static_cast<double>(gamma[ch]) * inv_std[ch]);
                const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(count));
                const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(count));
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t off = (i * c + ch) * hw;
                    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> g(gx + off, hw);
                    Row d(dy + off, hw), xh(xhat.data() + off, hw);
                    if (training) {
                        g += scale * (d - mean_dy - xh * mean_dy_xhat);
                    } else {
                        g += scale * d;
                    }
                }
            }
        });
}

// Row-wise over the last axis of a [N,C] tensor.
template <typename T>
BasicTensor<T> log_softmax(const BasicTensor<T>& x) {
    detail::require_rank(x, 2, "log_softmax");
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = x.data().data() + i * c;
        T mx = *std::max_element(row, row + c);
        double s = 0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(static_cast<double>(row[j] - mx));
        T lse = mx + static_cast<T>(std::log(s));
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
    }
    return BasicTensor<T>::from_op(x.shape(), std::move(out), {x}, [n, c](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < c; ++j) s += self.grad[i * c + j];
            for (std::size_t j = 0; j < c; ++j) {
                gx[i * c + j] += self.grad[i * c + j] - static_cast<T>(std::exp(static_cast<double>(self.data[i * c + j])) * s);
            }
        }
    });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
    detail::require_rank(x, 2, "softmax");
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = x.data().data() + i * c;
        T mx = *std::max_element(row, row + c);
        double s = 0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(static_cast<double>(row[j] - mx));
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / s);
        }
    }
    return BasicTensor<T>::from_op(x.shape(), std::move(out), {x}, [n, c](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0;
            for (std::size_t j = 0; j < c; ++j) dot += static_cast<double>(self.grad[i * c + j]) * self.data[i * c + j];
            for (std::size_t j = 0; j < c; ++j) {
                gx[i * c + j] += static_cast<T>(self.data[i * c + j] * (self.grad[i * c + j] - dot));
            }
        }
    });
}

// Mean over the batch of -log_probs[row, target].
template <typename T>
BasicTensor<T> nll_loss(const BasicTensor<T>& log_probs, std::span<const std::size_t> targets) {
    detail::require_rank(log_probs, 2, "nll_loss");
    const std::size_t n = log_probs.dim(0), c = log_probs.dim(1);
    if (targets.size() != n) {
        throw ShapeError("nll_loss got " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
    }
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (tg[i] >= c) {
            throw std::out_of_range("nll_loss target " + std::to_string(tg[i]) + " out of range for " +
                                    std::to_string(c) + " classes");
        }
        s -= log_probs.data()[i * c + tg[i]];
    }
    return BasicTensor<T>::from_op({1}, {static_cast<T>(s / static_cast<double>(n))}, {log_probs},
        [n, c, tg = std::move(tg)](detail::Node<T>& self) {
            T* gx = detail::parent_grad(self, 0);
            const T g = self.grad[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) gx[i * c + tg[i]] -= g;
        });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    double s = 0;
    for (auto v : x.data()) s += v;
    return BasicTensor<T>::from_op({1}, {static_cast<T>(s)}, {x}, [](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        const std::size_t count = self.parents[0]->data.size();
        for (std::size_t i = 0; i < count; ++i) gx[i] += self.grad[0];
    });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("mul " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return BasicTensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
        const auto& ad = self.parents[0]->data;
        const auto& bd = self.parents[1]->data;
        if (T* ga = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < ad.size(); ++i) ga[i] += self.grad[i] * bd[i];
        if (T* gb = detail::parent_grad(self, 1))
            for (std::size_t i = 0; i < bd.size(); ++i) gb[i] += self.grad[i] * ad[i];
    });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
    std::vector<T> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= factor;
    return BasicTensor<T>::from_op(x.shape(), std::move(out), {x}, [factor](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += factor * self.grad[i];
    });
}

// Squared Euclidean distances between the rows of a [Q,D] and b [C,D].
template <typename T>
BasicTensor<T> squared_distances(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_rank(a, 2, "squared_distances");
    detail::require_rank(b, 2, "squared_distances");
    const std::size_t q = a.dim(0), d = a.dim(1), c = b.dim(0);
    if (b.dim(1) != d) {
        throw ShapeError("squared_distances dimension mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    std::vector<T> out(q * c);
    for (std::size_t i = 0; i < q; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < d; ++k) {
                double diff = static_cast<double>(a.data()[i * d + k]) - b.data()[j * d + k];
                s += diff * diff;
            }
            out[i * c + j] = static_cast<T>(s);
        }
    }
    return BasicTensor<T>::from_op({q, c}, std::move(out), {a, b}, [q, d, c](detail::Node<T>& self) {
        const T* ad = self.parents[0]->data.data();
        const T* bd = self.parents[1]->data.data();
        T* ga = detail::parent_grad(self, 0);
        T* gb = detail::parent_grad(self, 1);
        for (std::size_t i = 0; i < q; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                const T g = 2 * self.grad[i * c + j];
                for (std::size_t k = 0; k < d; ++k) {
                    const T diff = ad[i * d + k] - bd[j * d + k];
                    if (ga) ga[i * d + k] += g * diff;
                    if (gb) gb[j * d + k] -= g * diff;
                }
            }
        }
    });
}

// Columns [begin, begin+count) of a [N,K] tensor.
template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t begin, std::size_t count) {
    detail::require_rank(x, 2, "slice_cols");
    const std::size_t n = x.dim(0), k = x.dim(1);
    if (count == 0 || begin + count > k) {
        throw ShapeError("slice_cols [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of " + to_string(x.shape()));
    }
    std::vector<T> out(n * count);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x.data()[i * k + begin + j];
    return BasicTensor<T>::from_op({n, count}, std::move(out), {x}, [n, k, begin, count](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < count; ++j) gx[i * k + begin + j] += self.grad[i * count + j];
    });
}

// Mean squared error between x[row, cols[row]] and fixed targets.
template <typename T>
BasicTensor<T> gathered_mse(const BasicTensor<T>& x, std::span<const std::size_t> cols, std::span<const T> targets) {
    detail::require_rank(x, 2, "gathered_mse");
    const std::size_t n = x.dim(0), k = x.dim(1);
    if (cols.size() != n || targets.size() != n) throw ShapeError("gathered_mse needs one column and target per row");
    std::vector<std::size_t> idx(cols.begin(), cols.end());
    std::vector<T> tg(targets.begin(), targets.end());
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (idx[i] >= k) throw std::out_of_range("gathered_mse column out of range");
        double d = static_cast<double>(x.data()[i * k + idx[i]]) - tg[i];
        s += d * d;
    }
    return BasicTensor<T>::from_op({1}, {static_cast<T>(s / static_cast<double>(n))}, {x},
        [n, k, idx = std::move(idx), tg = std::move(tg)](detail::Node<T>& self) {
            T* gx = detail::parent_grad(self, 0);
            const auto& xd = self.parents[0]->data;
            for (std::size_t i = 0; i < n; ++i) {
                gx[i * k + idx[i]] += self.grad[0] * 2 * (xd[i * k + idx[i]] - tg[i]) / static_cast<T>(n);
            }
        });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("add " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return BasicTensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
        for (std::size_t p = 0; p < 2; ++p)
            if (T* g = detail::parent_grad(self, p))
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

// Rows [begin, begin+count) along the first axis.
template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& x, std::size_t begin, std::size_t count) {
    if (x.rank() < 1 || count == 0 || begin + count > x.dim(0)) {
        throw ShapeError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of " + to_string(x.shape()));
    }
    const std::size_t row = x.numel() / x.dim(0);
    Shape shape = x.shape();
    shape[0] = count;
    std::vector<T> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * row),
                       x.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * row));
    return BasicTensor<T>::from_op(std::move(shape), std::move(out), {x}, [begin, row](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0) + begin * row;
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    });
}

}  // namespace hdl
