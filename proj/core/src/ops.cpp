#include "spade/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace spade {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

ConstMatMap cmap(const Buffer& v, std::size_t rows, std::size_t cols) {
    return ConstMatMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MatMap mmap(double* p, std::size_t rows, std::size_t cols) {
    return MatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

// Shorthand for the parent node at index i inside a backward closure.
detail::Node& parent(detail::Node& self, std::size_t i) { return *self.parents[i]; }

std::size_t masked_count(std::span<const std::uint8_t> mask) {
    return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
}

}  // namespace

SeqLayout SeqLayout::from_lengths(std::span<const std::size_t> lengths) {
    SeqLayout out;
    std::size_t offset = 0;
    for (auto len : lengths) {
        if (len == 0) throw ShapeError("empty segment in sequence layout");
        out.offsets.push_back(offset);
        out.lengths.push_back(len);
        offset += len;
    }
    return out;
}

std::size_t SeqLayout::total_rows() const { return std::accumulate(lengths.begin(), lengths.end(), std::size_t{0}); }

std::size_t SeqLayout::square_offset(std::size_t segment) const {
    std::size_t off = 0;
    for (std::size_t s = 0; s < segment; ++s) off += lengths[s] * lengths[s];
    return off;
}

std::size_t SeqLayout::total_square() const { return square_offset(lengths.size()); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    Buffer out(m * n);
    mmap(out.data(), m, n).noalias() = cmap(a.node().values, m, k) * cmap(b.node().values, k, n);
    return Tensor::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        auto& pa = parent(self, 0);
        auto& pb = parent(self, 1);
        auto dc = cmap(self.grad, m, n);
        if (pa.requires_grad) mmap(pa.grad_buffer(), m, k).noalias() += dc * cmap(pb.values, k, n).transpose();
        if (pb.requires_grad) mmap(pb.grad_buffer(), k, n).noalias() += cmap(pa.values, m, k).transpose() * dc;
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    require_rank(x, 2, "linear");
    require_rank(w, 2, "linear");
    const std::size_t rows = x.dim(0), in = x.dim(1), outd = w.dim(1);
    if (w.dim(0) != in || bias.numel() != outd) {
        throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " x " + shape_str(w.shape()) +
                         " + " + shape_str(bias.shape()));
    }
    Buffer out(rows * outd);
    auto y = mmap(out.data(), rows, outd);
    y.noalias() = cmap(x.node().values, rows, in) * cmap(w.node().values, in, outd);
    y.rowwise() += cmap(bias.node().values, 1, outd).row(0);
    return Tensor::make_result({rows, outd}, std::move(out), {x, w, bias}, [rows, in, outd](detail::Node& self) {
        auto& px = parent(self, 0);
        auto& pw = parent(self, 1);
        auto& pb = parent(self, 2);
        auto dy = cmap(self.grad, rows, outd);
        if (px.requires_grad) mmap(px.grad_buffer(), rows, in).noalias() += dy * cmap(pw.values, in, outd).transpose();
        if (pw.requires_grad) mmap(pw.grad_buffer(), in, outd).noalias() += cmap(px.values, rows, in).transpose() * dy;
        if (pb.requires_grad) mmap(pb.grad_buffer(), 1, outd) += dy.colwise().sum();
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Buffer out(a.numel());
    const auto& av = a.node().values;
    const auto& bv = b.node().values;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            auto& pn = parent(self, p);
            if (!pn.requires_grad) continue;
            double* g = pn.grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Buffer out(a.numel());
    const auto& av = a.node().values;
    const auto& bv = b.node().values;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            auto& pn = parent(self, p);
            if (!pn.requires_grad) continue;
            const double sign = p == 0 ? 1.0 : -1.0;
            double* g = pn.grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += sign * self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Buffer out(a.numel());
    const auto& av = a.node().values;
    const auto& bv = b.node().values;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        auto& pa = parent(self, 0);
        auto& pb = parent(self, 1);
        if (pa.requires_grad) {
            double* g = pa.grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb.values[i];
        }
        if (pb.requires_grad) {
            double* g = pb.grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa.values[i];
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    Buffer out(a.values().begin(), a.values().end());
    for (auto& v : out) v *= factor;
    return Tensor::make_result(a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
        double* g = parent(self, 0).grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += factor * self.grad[i];
    });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    return Tensor::make_result({1}, {s}, {a}, [](detail::Node& self) {
        auto& pa = parent(self, 0);
        double* g = pa.grad_buffer();
        for (std::size_t i = 0; i < pa.values.size(); ++i) g[i] += self.grad[0];
    });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor weighted_sum(std::span<const Tensor> terms, std::span<const double> weights) {
    if (terms.size() != weights.size() || terms.empty()) throw ShapeError("weighted_sum: terms/weights mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i].numel() != 1) throw ShapeError("weighted_sum: non-scalar term " + shape_str(terms[i].shape()));
        s += weights[i] * terms[i].item();
    }
    Buffer w(weights.begin(), weights.end());
    return Tensor::make_result({1}, {s}, std::vector<Tensor>(terms.begin(), terms.end()),
                               [w = std::move(w)](detail::Node& self) {
                                   for (std::size_t i = 0; i < w.size(); ++i) {
                                       auto& p = parent(self, i);
                                       if (p.requires_grad) p.grad_buffer()[0] += w[i] * self.grad[0];
                                   }
                               });
}

Tensor gelu(const Tensor& x) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    const auto& xv = x.node().values;
    Buffer out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double v = xv[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
    }
    return Tensor::make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
        auto& px = parent(self, 0);
        double* g = px.grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double v = px.values[i];
            const double t = std::tanh(kC * (v + kA * v * v * v));
            const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
            g[i] += self.grad[i] * d;
        }
    });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    const auto& shape = x.shape();
    if (axis >= shape.size()) throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(shape));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t n = shape[axis];
    const auto& xv = x.node().values;
    for (double v : xv) {
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
    }
    Buffer out(xv.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double e = std::exp(xv[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
        }
    }
    return Tensor::make_result(shape, std::move(out), {x}, [outer, inner, n](detail::Node& self) {
        double* g = parent(self, 0).grad_buffer();
        const auto& y = self.values;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * n * inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += self.grad[base + j * inner] * y[base + j * inner];
                for (std::size_t j = 0; j < n; ++j) {
                    const std::size_t idx = base + j * inner;
                    g[idx] += y[idx] * (self.grad[idx] - dot);
                }
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t d = x.shape().back();
    if (gain.numel() != d || bias.numel() != d) {
        throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match last dimension of " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    const auto& xv = x.node().values;
    const auto& gv = gain.node().values;
    const auto& bv = bias.node().values;
    Buffer out(xv.size()), xhat(xv.size()), rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mu) * rstd[r];
            xhat[r * d + j] = h;
            out[r * d + j] = h * gv[j] + bv[j];
        }
    }
    return Tensor::make_result(
        x.shape(), std::move(out), {x, gain, bias},
        [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
            auto& px = parent(self, 0);
            auto& pg = parent(self, 1);
            auto& pb = parent(self, 2);
            const auto& dy = self.grad;
            if (pg.requires_grad || pb.requires_grad) {
                double* gg = pg.requires_grad ? pg.grad_buffer() : nullptr;
                double* gb = pb.requires_grad ? pb.grad_buffer() : nullptr;
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) {
                        if (gg) gg[j] += dy[r * d + j] * xhat[r * d + j];
                        if (gb) gb[j] += dy[r * d + j];
                    }
                }
            }
            if (px.requires_grad) {
                double* gx = px.grad_buffer();
                const auto& gv2 = pg.values;
                const double inv_d = 1.0 / static_cast<double>(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = dy[r * d + j] * gv2[j];
                        m1 += dh;
                        m2 += dh * xhat[r * d + j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = dy[r * d + j] * gv2[j];
                        gx[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                    }
                }
            }
        });
}

Tensor embed(const Tensor& table, std::span<const std::int32_t> ids) {
    require_rank(table, 2, "embed");
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    if (ids.empty()) throw ShapeError("embed: empty id list");
    Buffer out(ids.size() * d);
    const auto& tv = table.node().values;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw std::invalid_argument("embed: token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                                        std::to_string(vocab));
        }
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    return Tensor::make_result({ids.size(), d}, std::move(out), {table}, [d, saved = std::move(saved)](detail::Node& self) {
        double* g = parent(self, 0).grad_buffer();
        for (std::size_t i = 0; i < saved.size(); ++i) {
            double* row = g + static_cast<std::size_t>(saved[i]) * d;
            for (std::size_t j = 0; j < d; ++j) row[j] += self.grad[i * d + j];
        }
    });
}

Tensor embed_positions(const Tensor& table, const SeqLayout& layout) {
    require_rank(table, 2, "embed_positions");
    std::vector<std::int32_t> positions;
    positions.reserve(layout.total_rows());
    for (auto len : layout.lengths) {
        if (len > table.dim(0)) {
            throw std::invalid_argument("sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                                        std::to_string(table.dim(0)));
        }
        for (std::size_t t = 0; t < len; ++t) positions.push_back(static_cast<std::int32_t>(t));
    }
    return embed(table, positions);
}

Tensor causal_attention_probs(const Tensor& q, const Tensor& k, const SeqLayout& layout, std::size_t n_heads) {
    require_rank(q, 2, "attention");
    require_same_shape(q, k, "attention");
    const std::size_t n = q.dim(0), d = q.dim(1);
    if (n_heads == 0 || d % n_heads != 0) throw ShapeError("attention: d_model not divisible by head count");
    if (layout.total_rows() != n) throw ShapeError("attention: layout does not cover " + std::to_string(n) + " rows");
    const std::size_t dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Buffer probs(n_heads * layout.total_square(), 0.0);
    const auto& qv = q.node().values;
    const auto& kv = k.node().values;
    std::size_t block = 0;
    for (std::size_t s = 0; s < layout.num_segments(); ++s) {
        const auto t = static_cast<Eigen::Index>(layout.lengths[s]);
        const std::size_t row0 = layout.offsets[s];
        for (std::size_t h = 0; h < n_heads; ++h) {
            ConstStridedMap qh(qv.data() + row0 * d + h * dh, t, static_cast<Eigen::Index>(dh), Eigen::OuterStride<>(d));
            ConstStridedMap kh(kv.data() + row0 * d + h * dh, t, static_cast<Eigen::Index>(dh), Eigen::OuterStride<>(d));
            auto p = mmap(probs.data() + block, static_cast<std::size_t>(t), static_cast<std::size_t>(t));
            p.noalias() = (qh * kh.transpose()) * inv_sqrt;
            for (Eigen::Index i = 0; i < t; ++i) {
                double mx = p(i, 0);
                for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, p(i, j));
                double z = 0.0;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    p(i, j) = std::exp(p(i, j) - mx);
                    z += p(i, j);
                }
                for (Eigen::Index j = 0; j <= i; ++j) p(i, j) /= z;
                for (Eigen::Index j = i + 1; j < t; ++j) p(i, j) = 0.0;
            }
            block += static_cast<std::size_t>(t * t);
        }
    }
    const std::size_t total = probs.size();
    return Tensor::make_result(
        {total}, std::move(probs), {q, k}, [layout, n_heads, d, dh, inv_sqrt](detail::Node& self) {
            auto& pq = parent(self, 0);
            auto& pk = parent(self, 1);
            double* gq = pq.requires_grad ? pq.grad_buffer() : nullptr;
            double* gk = pk.requires_grad ? pk.grad_buffer() : nullptr;
            std::size_t blk = 0;
            RowMat ds;
            for (std::size_t s = 0; s < layout.num_segments(); ++s) {
                const auto t = static_cast<Eigen::Index>(layout.lengths[s]);
                const std::size_t row0 = layout.offsets[s];
                for (std::size_t h = 0; h < n_heads; ++h) {
                    ConstMatMap pm(self.values.data() + blk, t, t);
                    ConstMatMap dp(self.grad.data() + blk, t, t);
                    ds.resize(t, t);
                    for (Eigen::Index i = 0; i < t; ++i) {
                        double dot = 0.0;
                        for (Eigen::Index j = 0; j <= i; ++j) dot += dp(i, j) * pm(i, j);
                        for (Eigen::Index j = 0; j <= i; ++j) ds(i, j) = pm(i, j) * (dp(i, j) - dot) * inv_sqrt;
                        for (Eigen::Index j = i + 1; j < t; ++j) ds(i, j) = 0.0;
                    }
                    const auto ldh = static_cast<Eigen::Index>(dh);
                    ConstStridedMap qh(pq.values.data() + row0 * d + h * dh, t, ldh, Eigen::OuterStride<>(d));
                    ConstStridedMap kh(pk.values.data() + row0 * d + h * dh, t, ldh, Eigen::OuterStride<>(d));
                    if (gq) {
                        StridedMap g(gq + row0 * d + h * dh, t, ldh, Eigen::OuterStride<>(d));
                        g.noalias() += ds * kh;
                    }
                    if (gk) {
                        StridedMap g(gk + row0 * d + h * dh, t, ldh, Eigen::OuterStride<>(d));
                        g.noalias() += ds.transpose() * qh;
                    }
                    blk += static_cast<std::size_t>(t * t);
                }
            }
        });
}

Tensor attention_apply(const Tensor& probs, const Tensor& v, const SeqLayout& layout, std::size_t n_heads) {
    require_rank(v, 2, "attention_apply");
    const std::size_t n = v.dim(0), d = v.dim(1);
    if (n_heads == 0 || d % n_heads != 0) throw ShapeError("attention_apply: d_model not divisible by head count");
    if (layout.total_rows() != n || probs.numel() != n_heads * layout.total_square()) {
        throw ShapeError("attention_apply: probabilities do not match layout");
    }
    const std::size_t dh = d / n_heads;
    const auto ldh = static_cast<Eigen::Index>(dh);
    Buffer out(n * d, 0.0);
    const auto& pv = probs.node().values;
    const auto& vv = v.node().values;
    std::size_t blk = 0;
    for (std::size_t s = 0; s < layout.num_segments(); ++s) {
        const auto t = static_cast<Eigen::Index>(layout.lengths[s]);
        const std::size_t row0 = layout.offsets[s];
        for (std::size_t h = 0; h < n_heads; ++h) {
            ConstMatMap pm(pv.data() + blk, t, t);
            ConstStridedMap vh(vv.data() + row0 * d + h * dh, t, ldh, Eigen::OuterStride<>(d));
            StridedMap oh(out.data() + row0 * d + h * dh, t, ldh, Eigen::OuterStride<>(d));
            oh.noalias() = pm * vh;
            blk += static_cast<std::size_t>(t * t);
        }
    }
    return Tensor::make_result({n, d}, std::move(out), {probs, v}, [layout, n_heads, d, dh, ldh](detail::Node& self) {
        auto& pp = parent(self, 0);
        auto& pv2 = parent(self, 1);
        double* gp = pp.requires_grad ? pp.grad_buffer() : nullptr;
        double* gv = pv2.requires_grad ? pv2.grad_buffer() : nullptr;
        std::size_t blk2 = 0;
        for (std::size_t s = 0; s < layout.num_segments(); ++s) {
            const auto t = static_cast<Eigen::Index>(layout.lengths[s]);
            const std::size_t row0 = layout.offsets[s];
            for (std::size_t h = 0; h < n_heads; ++h) {
                ConstStridedMap dout(self.grad.data() + row0 * d + h * dh, t, ldh, Eigen::OuterStride<>(d));
                if (gp) {
                    ConstStridedMap vh(pv2.values.data() + row0 * d + h * dh, t, ldh, Eigen::OuterStride<>(d));
                    MatMap(gp + blk2, t, t).noalias() += dout * vh.transpose();
                }
                if (gv) {
                    ConstMatMap pm(pp.values.data() + blk2, t, t);
                    StridedMap g(gv + row0 * d + h * dh, t, ldh, Eigen::OuterStride<>(d));
                    g.noalias() += pm.transpose() * dout;
                }
                blk2 += static_cast<std::size_t>(t * t);
            }
        }
    });
}

Tensor head_average(const Tensor& probs, const SeqLayout& layout, std::size_t n_heads) {
    const std::size_t total = layout.total_square();
    if (probs.numel() != n_heads * total) throw ShapeError("head_average: probabilities do not match layout");
    Buffer out(total, 0.0);
    const auto& pv = probs.node().values;
    const double inv_h = 1.0 / static_cast<double>(n_heads);
    std::size_t src = 0, dst = 0;
    for (std::size_t s = 0; s < layout.num_segments(); ++s) {
        const std::size_t tt = layout.lengths[s] * layout.lengths[s];
        for (std::size_t h = 0; h < n_heads; ++h) {
            for (std::size_t i = 0; i < tt; ++i) out[dst + i] += pv[src + i] * inv_h;
            src += tt;
        }
        dst += tt;
    }
    return Tensor::make_result({total}, std::move(out), {probs}, [layout, n_heads, inv_h](detail::Node& self) {
        double* g = parent(self, 0).grad_buffer();
        std::size_t src2 = 0, dst2 = 0;
        for (std::size_t s = 0; s < layout.num_segments(); ++s) {
            const std::size_t tt = layout.lengths[s] * layout.lengths[s];
            for (std::size_t h = 0; h < n_heads; ++h) {
                for (std::size_t i = 0; i < tt; ++i) g[src2 + i] += self.grad[dst2 + i] * inv_h;
                src2 += tt;
            }
            dst2 += tt;
        }
    });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask) {
    require_rank(logits, 2, "cross_entropy");
    const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
    if (targets.size() != rows || mask.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries for " + std::to_string(rows) + " rows");
    }
    const std::size_t count = masked_count(mask);
    if (count == 0) throw std::invalid_argument("cross_entropy: mask selects no positions");
    const auto& lv = logits.node().values;
    Buffer probs(rows * vocab, 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
            throw std::invalid_argument("cross_entropy: target " + std::to_string(targets[r]) + " out of range");
        }
        const double* z = lv.data() + r * vocab;
        double mx = z[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, z[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
            probs[r * vocab + j] = std::exp(z[j] - mx);
            s += probs[r * vocab + j];
        }
        for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= s;
        total += (mx + std::log(s)) - z[targets[r]];
    }
    const double inv = 1.0 / static_cast<double>(count);
    std::vector<std::int32_t> tg(targets.begin(), targets.end());
    std::vector<std::uint8_t> mk(mask.begin(), mask.end());
    return Tensor::make_result(
        {1}, {total * inv}, {logits},
        [rows, vocab, inv, probs = std::move(probs), tg = std::move(tg), mk = std::move(mk)](detail::Node& self) {
            double* g = parent(self, 0).grad_buffer();
            const double go = self.grad[0] * inv;
            for (std::size_t r = 0; r < rows; ++r) {
                if (!mk[r]) continue;
                for (std::size_t j = 0; j < vocab; ++j) g[r * vocab + j] += go * probs[r * vocab + j];
                g[r * vocab + static_cast<std::size_t>(tg[r])] -= go;
            }
        });
}

Tensor mse_to_target(const Tensor& x, std::span<const double> target, std::span<const std::uint8_t> element_mask) {
    if (target.size() != x.numel()) {
        throw ShapeError("mse: target has " + std::to_string(target.size()) + " elements, input " + shape_str(x.shape()));
    }
    if (!element_mask.empty() && element_mask.size() != x.numel()) throw ShapeError("mse: mask size mismatch");
    const std::size_t count = element_mask.empty() ? x.numel() : masked_count(element_mask);
    if (count == 0) throw std::invalid_argument("mse: mask selects no elements");
    const auto& xv = x.node().values;
    Buffer diff(xv.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        if (!element_mask.empty() && !element_mask[i]) continue;
        diff[i] = xv[i] - target[i];
        total += diff[i] * diff[i];
    }
    const double inv = 1.0 / static_cast<double>(count);
    return Tensor::make_result({1}, {total * inv}, {x}, [inv, diff = std::move(diff)](detail::Node& self) {
        double* g = parent(self, 0).grad_buffer();
        const double go = 2.0 * inv * self.grad[0];
        for (std::size_t i = 0; i < diff.size(); ++i) g[i] += go * diff[i];
    });
}

Tensor skew_kl_logits(const Tensor& student_logits, std::span<const double> teacher_probs,
                      std::span<const std::uint8_t> mask, double lambda) {
    require_rank(student_logits, 2, "skew_kl");
    const std::size_t rows = student_logits.dim(0), vocab = student_logits.dim(1);
    if (teacher_probs.size() != rows * vocab || mask.size() != rows) throw ShapeError("skew_kl: shape mismatch");
    if (!(lambda > 0.0 && lambda <= 1.0)) throw std::invalid_argument("skew_kl: lambda must lie in (0, 1]");
    const std::size_t count = masked_count(mask);
    if (count == 0) throw std::invalid_argument("skew_kl: mask selects no positions");
    const auto& lv = student_logits.node().values;
    Buffer q(rows * vocab, 0.0), dq(rows * vocab, 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        const double* z = lv.data() + r * vocab;
        double mx = z[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, z[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
            q[r * vocab + j] = std::exp(z[j] - mx);
            s += q[r * vocab + j];
        }
        for (std::size_t j = 0; j < vocab; ++j) {
            const std::size_t idx = r * vocab + j;
            q[idx] /= s;
            const double p = teacher_probs[idx];
            if (p <= 0.0) continue;
            const double m = lambda * p + (1.0 - lambda) * q[idx];
            total += p * (std::log(p) - std::log(m));
            dq[idx] = -p * (1.0 - lambda) / m;
        }
    }
    if (!std::isfinite(total)) throw NumericError("skew_kl: non-finite divergence");
    const double inv = 1.0 / static_cast<double>(count);
    std::vector<std::uint8_t> mk(mask.begin(), mask.end());
    return Tensor::make_result(
        {1}, {total * inv}, {student_logits},
        [rows, vocab, inv, q = std::move(q), dq = std::move(dq), mk = std::move(mk)](detail::Node& self) {
            double* g = parent(self, 0).grad_buffer();
            const double go = self.grad[0] * inv;
            for (std::size_t r = 0; r < rows; ++r) {
                if (!mk[r]) continue;
                double dot = 0.0;
                for (std::size_t j = 0; j < vocab; ++j) dot += q[r * vocab + j] * dq[r * vocab + j];
                for (std::size_t j = 0; j < vocab; ++j) {
                    const std::size_t idx = r * vocab + j;
                    g[idx] += go * q[idx] * (dq[idx] - dot);
                }
            }
        });
}

}  // namespace spade
