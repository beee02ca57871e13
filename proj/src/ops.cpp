#include "rematch/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "rematch/kernels.hpp"

namespace rematch::ops {
namespace {

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

Shape prefix(const Shape& s, std::size_t drop) { return Shape(s.begin(), s.end() - static_cast<long>(drop)); }

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src, T factor = T(1)) {
    kernels::active<T>().axpy(dst.size(), factor, src.ptr(), dst.ptr());
}

}  // namespace

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    auto mismatch = [&] {
        return DimensionError("matmul: incompatible shapes " + shape_string(av.shape()) + " and " +
                              shape_string(bv.shape()));
    };
    if (av.rank() < 2 || bv.rank() < 2) throw mismatch();
    const std::size_t m = av.dim(-2), k = av.dim(-1), n = bv.dim(-1);
    if (bv.dim(-2) != k) throw mismatch();

    const Shape pa = prefix(av.shape(), 2), pb = prefix(bv.shape(), 2);
    const std::size_t batch_a = shape_numel(pa), batch_b = shape_numel(pb);
    Shape out_prefix;
    if (pa == pb) {
        out_prefix = pa;
    } else if (pb.empty()) {
        out_prefix = pa;
    } else if (pa.empty()) {
        out_prefix = pb;
    } else {
        throw mismatch();
    }
    const std::size_t batch = std::max(batch_a, batch_b);
    Shape out_shape = out_prefix;
    out_shape.push_back(m);
    out_shape.push_back(n);

    const auto& kern = kernels::active<T>();
    Tensor<T> out(out_shape);
    if (batch_b == 1 && batch_a == batch) {
        // One shared right matrix: fold the batch into the row dimension.
        kern.gemm_nn(batch * m, n, k, av.ptr(), bv.ptr(), out.ptr(), false);
    } else {
        for (std::size_t i = 0; i < batch; ++i) {
            const T* ap = av.ptr() + (batch_a == 1 ? 0 : i * m * k);
            const T* bp = bv.ptr() + (batch_b == 1 ? 0 : i * k * n);
            kern.gemm_nn(m, n, k, ap, bp, out.ptr() + i * m * n, false);
        }
    }

    return a.tape().record(std::move(out), {a, b}, [a, b, m, n, k, batch, batch_a, batch_b](Tape<T>& tape, const Tensor<T>& dy) {
        const auto& kern = kernels::active<T>();
        const Tensor<T>& av = a.value();
        const Tensor<T>& bv = b.value();
        if (tape.needs_grad(a)) {
            Tensor<T>& da = tape.grad_buffer(a);
            if (batch_b == 1 && batch_a == batch) {
                kern.gemm_nt(batch * m, k, n, dy.ptr(), bv.ptr(), da.ptr(), true);
            } else {
                for (std::size_t i = 0; i < batch; ++i) {
                    T* dap = da.ptr() + (batch_a == 1 ? 0 : i * m * k);
                    const T* bp = bv.ptr() + (batch_b == 1 ? 0 : i * k * n);
                    kern.gemm_nt(m, k, n, dy.ptr() + i * m * n, bp, dap, true);
                }
            }
        }
        if (tape.needs_grad(b)) {
            Tensor<T>& db = tape.grad_buffer(b);
            if (batch_b == 1 && batch_a == batch) {
                kern.gemm_tn(k, n, batch * m, av.ptr(), dy.ptr(), db.ptr(), true);
            } else {
                for (std::size_t i = 0; i < batch; ++i) {
                    const T* ap = av.ptr() + (batch_a == 1 ? 0 : i * m * k);
                    T* dbp = db.ptr() + (batch_b == 1 ? 0 : i * k * n);
                    kern.gemm_tn(k, n, m, ap, dy.ptr() + i * m * n, dbp, true);
                }
            }
        }
    }, "matmul");
}

template <class T>
Var<T> transpose(Var<T> x) {
    const Tensor<T>& xv = x.value();
    if (xv.rank() < 2) throw DimensionError("transpose: need rank >= 2, got " + shape_string(xv.shape()));
    const std::size_t r = xv.dim(-2), c = xv.dim(-1);
    const std::size_t batch = xv.size() / (r * c);
    Shape shape = xv.shape();
    std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
    Tensor<T> out(shape);
    for (std::size_t b = 0; b < batch; ++b) {
        const T* src = xv.ptr() + b * r * c;
        T* dst = out.ptr() + b * r * c;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
    }
    return x.tape().record(std::move(out), {x}, [x, r, c, batch](Tape<T>& tape, const Tensor<T>& dy) {
        Tensor<T>& dx = tape.grad_buffer(x);
        for (std::size_t b = 0; b < batch; ++b) {
            const T* src = dy.ptr() + b * r * c;
            T* dst = dx.ptr() + b * r * c;
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) dst[i * c + j] += src[j * r + i];
        }
    }, "transpose");
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same_shape("add", a.value(), b.value());
    Tensor<T> out = a.value();
    add_into(out, b.value());
    return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& dy) {
        if (tape.needs_grad(a)) add_into(tape.grad_buffer(a), dy);
        if (tape.needs_grad(b)) add_into(tape.grad_buffer(b), dy);
    }, "add");
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    require_same_shape("sub", a.value(), b.value());
    Tensor<T> out = a.value();
    add_into(out, b.value(), T(-1));
    return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& dy) {
        if (tape.needs_grad(a)) add_into(tape.grad_buffer(a), dy);
        if (tape.needs_grad(b)) add_into(tape.grad_buffer(b), dy, T(-1));
    }, "sub");
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same_shape("mul", a.value(), b.value());
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& dy) {
        const Tensor<T>& av = a.value();
        const Tensor<T>& bv = b.value();
        if (tape.needs_grad(a)) {
            Tensor<T>& da = tape.grad_buffer(a);
            for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
        }
        if (tape.needs_grad(b)) {
            Tensor<T>& db = tape.grad_buffer(b);
            for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
        }
    }, "mul");
}

template <class T>
Var<T> abs(Var<T> x) {
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(xv[i]);
    return x.tape().record(std::move(out), {x}, [x](Tape<T>& tape, const Tensor<T>& dy) {
        const Tensor<T>& xv = x.value();
        Tensor<T>& dx = tape.grad_buffer(x);
        for (std::size_t i = 0; i < dy.size(); ++i) {
            const T s = xv[i] > T(0) ? T(1) : (xv[i] < T(0) ? T(-1) : T(0));
            dx[i] += dy[i] * s;
        }
    }, "abs");
}

template <class T>
Var<T> scale(Var<T> x, T factor) {
    Tensor<T> out = x.value();
    for (auto& v : out.data()) v *= factor;
    return x.tape().record(std::move(out), {x}, [x, factor](Tape<T>& tape, const Tensor<T>& dy) {
        add_into(tape.grad_buffer(x), dy, factor);
    }, "scale");
}

template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& bv = bias.value();
    const std::size_t n = xv.dim(-1);
    if (bv.size() != n) {
        throw DimensionError("add_bias: bias " + shape_string(bv.shape()) + " does not match " + shape_string(xv.shape()));
    }
    Tensor<T> out = xv;
    const std::size_t rows = xv.size() / n;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bv[j];
    return x.tape().record(std::move(out), {x, bias}, [x, bias, rows, n](Tape<T>& tape, const Tensor<T>& dy) {
        if (tape.needs_grad(x)) add_into(tape.grad_buffer(x), dy);
        if (tape.needs_grad(bias)) {
            Tensor<T>& db = tape.grad_buffer(bias);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j) db[j] += dy[r * n + j];
        }
    }, "add_bias");
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape lead = prefix(parts.front().shape(), 1);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (prefix(p.shape(), 1) != lead) {
            throw DimensionError("concat: leading extents differ: " + shape_string(parts.front().shape()) + " vs " +
                                 shape_string(p.shape()));
        }
        widths.push_back(p.dim(-1));
        total += widths.back();
    }
    const std::size_t rows = shape_numel(lead);
    Shape shape = lead;
    shape.push_back(total);
    Tensor<T> out(shape);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor<T>& pv = parts[k].value();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(pv.ptr() + r * widths[k], widths[k], out.ptr() + r * total + offset);
        }
        offset += widths[k];
    }
    return parts.front().tape().record(std::move(out), parts, [parts, widths, rows, total](Tape<T>& tape, const Tensor<T>& dy) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            if (tape.needs_grad(parts[k])) {
                Tensor<T>& dp = tape.grad_buffer(parts[k]);
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* src = dy.ptr() + r * total + offset;
                    T* dst = dp.ptr() + r * widths[k];
                    for (std::size_t j = 0; j < widths[k]; ++j) dst[j] += src[j];
                }
            }
            offset += widths[k];
        }
    }, "concat");
}

template <class T>
Var<T> slice_last(Var<T> x, std::size_t start, std::size_t length) {
    const Tensor<T>& xv = x.value();
    const std::size_t width = xv.dim(-1);
    if (length == 0 || start + length > width) {
        throw DimensionError("slice_last: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") outside " + shape_string(xv.shape()));
    }
    const std::size_t rows = xv.size() / width;
    Shape shape = xv.shape();
    shape.back() = length;
    Tensor<T> out(shape);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.ptr() + r * width + start, length, out.ptr() + r * length);
    return x.tape().record(std::move(out), {x}, [x, start, length, rows, width](Tape<T>& tape, const Tensor<T>& dy) {
        Tensor<T>& dx = tape.grad_buffer(x);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < length; ++j) dx[r * width + start + j] += dy[r * length + j];
    }, "slice_last");
}

template <class T>
Var<T> zero_slice(Var<T> x, std::size_t start, std::size_t length) {
    const Tensor<T>& xv = x.value();
    const std::size_t width = xv.dim(-1);
    if (start + length > width) {
        throw DimensionError("zero_slice: range outside " + shape_string(xv.shape()));
    }
    const std::size_t rows = xv.size() / width;
    Tensor<T> out = xv;
    for (std::size_t r = 0; r < rows; ++r) std::fill_n(out.ptr() + r * width + start, length, T(0));
    return x.tape().record(std::move(out), {x}, [x, start, length, rows, width](Tape<T>& tape, const Tensor<T>& dy) {
        Tensor<T>& dx = tape.grad_buffer(x);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < width; ++j) {
                if (j < start || j >= start + length) dx[r * width + j] += dy[r * width + j];
            }
    }, "zero_slice");
}

template <class T>
Var<T> mask_positions(Var<T> x, const Mask& mask) {
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 3 || mask.rank() != 2 || mask.dim(0) != xv.dim(0) || mask.dim(1) != xv.dim(1)) {
        throw DimensionError("mask_positions: mask " + shape_string(mask.shape()) + " does not fit " + shape_string(xv.shape()));
    }
    const std::size_t d = xv.dim(2);
    Tensor<T> out = xv;
    for (std::size_t p = 0; p < mask.size(); ++p) {
        if (!mask[p]) std::fill_n(out.ptr() + p * d, d, T(0));
    }
    return x.tape().record(std::move(out), {x}, [x, mask, d](Tape<T>& tape, const Tensor<T>& dy) {
        Tensor<T>& dx = tape.grad_buffer(x);
        for (std::size_t p = 0; p < mask.size(); ++p) {
            if (!mask[p]) continue;
            for (std::size_t j = 0; j < d; ++j) dx[p * d + j] += dy[p * d + j];
        }
    }, "mask_positions");
}

template <class T>
Var<T> conv1d_same(Var<T> x, Var<T> w, Var<T> bias) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    if (xv.rank() != 3 || wv.rank() != 3 || wv.dim(1) != xv.dim(2) || bias.value().size() != wv.dim(2)) {
        throw DimensionError("conv1d_same: incompatible input " + shape_string(xv.shape()) + ", kernel " +
                             shape_string(wv.shape()) + ", bias " + shape_string(bias.value().shape()));
    }
    const std::size_t kw = wv.dim(0);
    if (kw % 2 == 0) throw std::invalid_argument("conv1d_same: kernel size must be odd, got " + std::to_string(kw));
    const std::size_t batch = xv.dim(0), len = xv.dim(1), din = xv.dim(2), dout = wv.dim(2);
    const std::size_t pad = (kw - 1) / 2;
    const std::size_t cols_width = kw * din;

    // im2col: row (b, l) holds x[b, l - pad .. l + pad, :] with zeros outside.
    auto cols = std::make_shared<std::vector<T>>(batch * len * cols_width, T(0));
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t l = 0; l < len; ++l) {
            T* row = cols->data() + (b * len + l) * cols_width;
            for (std::size_t t = 0; t < kw; ++t) {
                const long src = static_cast<long>(l + t) - static_cast<long>(pad);
                if (src < 0 || src >= static_cast<long>(len)) continue;
                std::copy_n(xv.ptr() + (b * len + static_cast<std::size_t>(src)) * din, din, row + t * din);
            }
        }
    }
    const auto& kern = kernels::active<T>();
    Tensor<T> out(Shape{batch, len, dout});
    kern.gemm_nn(batch * len, dout, cols_width, cols->data(), wv.ptr(), out.ptr(), false);
    const Tensor<T>& bv = bias.value();
    for (std::size_t r = 0; r < batch * len; ++r)
        for (std::size_t j = 0; j < dout; ++j) out[r * dout + j] += bv[j];

    return x.tape().record(std::move(out), {x, w, bias}, [=](Tape<T>& tape, const Tensor<T>& dy) {
        const auto& kern = kernels::active<T>();
        const std::size_t rows = batch * len;
        if (tape.needs_grad(w)) {
            kern.gemm_tn(cols_width, dout, rows, cols->data(), dy.ptr(), tape.grad_buffer(w).ptr(), true);
        }
        if (tape.needs_grad(bias)) {
            Tensor<T>& db = tape.grad_buffer(bias);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < dout; ++j) db[j] += dy[r * dout + j];
        }
        if (tape.needs_grad(x)) {
            std::vector<T> dcols(rows * cols_width);
            kern.gemm_nt(rows, cols_width, dout, dy.ptr(), w.value().ptr(), dcols.data(), false);
            Tensor<T>& dx = tape.grad_buffer(x);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t l = 0; l < len; ++l) {
                    const T* row = dcols.data() + (b * len + l) * cols_width;
                    for (std::size_t t = 0; t < kw; ++t) {
                        const long src = static_cast<long>(l + t) - static_cast<long>(pad);
                        if (src < 0 || src >= static_cast<long>(len)) continue;
                        T* dst = dx.ptr() + (b * len + static_cast<std::size_t>(src)) * din;
                        for (std::size_t d = 0; d < din; ++d) dst[d] += row[t * din + d];
                    }
                }
            }
        }
    }, "conv1d_same");
}

template <class T>
Var<T> gelu(Var<T> x) {
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape());
    kernels::active<T>().gelu(xv.size(), xv.ptr(), out.ptr());
    return x.tape().record(std::move(out), {x}, [x](Tape<T>& tape, const Tensor<T>& dy) {
        const Tensor<T>& xv = x.value();
        kernels::active<T>().gelu_backward(xv.size(), xv.ptr(), dy.ptr(), tape.grad_buffer(x).ptr());
    }, "gelu");
}

template <class T>
Var<T> dropout(Var<T> x, double keep_prob, bool training, Rng& rng) {
    if (!(keep_prob > 0.0 && keep_prob <= 1.0)) {
        throw std::invalid_argument("dropout: keep_prob must be in (0, 1], got " + std::to_string(keep_prob));
    }
    if (!training || keep_prob == 1.0) return x;
    const Tensor<T>& xv = x.value();
    const T inv_keep = T(1) / static_cast<T>(keep_prob);
    auto scale = std::make_shared<std::vector<T>>(xv.size());
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        (*scale)[i] = rng.uniform() < keep_prob ? inv_keep : T(0);
        out[i] = xv[i] * (*scale)[i];
    }
    return x.tape().record(std::move(out), {x}, [x, scale](Tape<T>& tape, const Tensor<T>& dy) {
        Tensor<T>& dx = tape.grad_buffer(x);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * (*scale)[i];
    }, "dropout");
}

template <class T>
Var<T> softmax_masked(Var<T> scores, const Mask& mask) {
    const Tensor<T>& sv = scores.value();
    if (mask.shape() != sv.shape()) {
        throw DimensionError("softmax_masked: mask " + shape_string(mask.shape()) + " does not match scores " +
                             shape_string(sv.shape()));
    }
    const std::size_t width = sv.dim(-1);
    const std::size_t rows = sv.size() / width;
    Tensor<T> out(sv.shape(), T(0));
    for (std::size_t r = 0; r < rows; ++r) {
        const T* s = sv.ptr() + r * width;
        const std::uint8_t* m = mask.ptr() + r * width;
        T* y = out.ptr() + r * width;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < width; ++j)
            if (m[j]) mx = std::max(mx, s[j]);
        if (mx == -std::numeric_limits<T>::infinity()) {
            throw std::invalid_argument("softmax_masked: row " + std::to_string(r) +
                                        " has no valid position (empty sequence reached alignment)");
        }
        T total = T(0);
        for (std::size_t j = 0; j < width; ++j) {
            if (!m[j]) continue;
            y[j] = std::exp(s[j] - mx);
            total += y[j];
        }
        const T inv = T(1) / total;
        for (std::size_t j = 0; j < width; ++j) y[j] *= inv;
    }
    auto saved = std::make_shared<Tensor<T>>(out);
    return scores.tape().record(std::move(out), {scores}, [scores, saved, rows, width](Tape<T>& tape, const Tensor<T>& dy) {
        // dx = y * (dy - <y, dy>) per row; masked entries have y == 0.
        Tensor<T>& dx = tape.grad_buffer(scores);
        const Tensor<T>& y = *saved;
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t o = r * width;
            T inner = T(0);
            for (std::size_t j = 0; j < width; ++j) inner += y[o + j] * dy[o + j];
            for (std::size_t j = 0; j < width; ++j) dx[o + j] += y[o + j] * (dy[o + j] - inner);
        }
    }, "softmax_masked");
}

template <class T>
Var<T> max_pool(Var<T> x, const Mask& mask) {
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 3 || mask.rank() != 2 || mask.dim(0) != xv.dim(0) || mask.dim(1) != xv.dim(1)) {
        throw DimensionError("max_pool: mask " + shape_string(mask.shape()) + " does not fit " + shape_string(xv.shape()));
    }
    const std::size_t batch = xv.dim(0), len = xv.dim(1), d = xv.dim(2);
    Tensor<T> out(Shape{batch, d});
    auto argmax = std::make_shared<std::vector<std::size_t>>(batch * d);
    for (std::size_t b = 0; b < batch; ++b) {
        bool any = false;
        for (std::size_t l = 0; l < len; ++l) {
            if (!mask[b * len + l]) continue;
            const T* row = xv.ptr() + (b * len + l) * d;
            for (std::size_t j = 0; j < d; ++j) {
                if (!any || row[j] > out[b * d + j]) {
                    out[b * d + j] = row[j];
                    (*argmax)[b * d + j] = l;
                }
            }
            any = true;
        }
        if (!any) throw std::invalid_argument("max_pool: sequence " + std::to_string(b) + " has no valid position");
    }
    return x.tape().record(std::move(out), {x}, [x, argmax, len, d](Tape<T>& tape, const Tensor<T>& dy) {
        Tensor<T>& dx = tape.grad_buffer(x);
        const std::size_t batch = dy.size() / d;
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t j = 0; j < d; ++j) dx[(b * len + (*argmax)[b * d + j]) * d + j] += dy[b * d + j];
    }, "max_pool");
}

template <class T>
Var<T> weight_norm(Var<T> v, Var<T> g) {
    const Tensor<T>& vv = v.value();
    const Tensor<T>& gv = g.value();
    const std::size_t units = vv.dim(-1);
    if (gv.size() != units) {
        throw DimensionError("weight_norm: scale " + shape_string(gv.shape()) + " does not match direction " +
                             shape_string(vv.shape()));
    }
    const std::size_t fan = vv.size() / units;
    auto norms = std::make_shared<std::vector<T>>(units, T(0));
    for (std::size_t f = 0; f < fan; ++f)
        for (std::size_t j = 0; j < units; ++j) (*norms)[j] += vv[f * units + j] * vv[f * units + j];
    for (auto& n : *norms) {
        n = std::sqrt(n);
        if (n == T(0)) throw NumericError("weight_norm: direction vector with zero norm");
    }
    Tensor<T> out(vv.shape());
    for (std::size_t f = 0; f < fan; ++f)
        for (std::size_t j = 0; j < units; ++j) out[f * units + j] = gv[j] * vv[f * units + j] / (*norms)[j];

    return v.tape().record(std::move(out), {v, g}, [v, g, norms, fan, units](Tape<T>& tape, const Tensor<T>& dw) {
        const Tensor<T>& vv = v.value();
        const Tensor<T>& gv = g.value();
        // dg_j = <vhat_j, dw_j>; dv = g/|v| (dw - vhat <vhat, dw>)
        std::vector<T> proj(units, T(0));
        for (std::size_t f = 0; f < fan; ++f)
            for (std::size_t j = 0; j < units; ++j) proj[j] += dw[f * units + j] * vv[f * units + j] / (*norms)[j];
        if (tape.needs_grad(g)) {
            Tensor<T>& dg = tape.grad_buffer(g);
            for (std::size_t j = 0; j < units; ++j) dg[j] += proj[j];
        }
        if (tape.needs_grad(v)) {
            Tensor<T>& dv = tape.grad_buffer(v);
            for (std::size_t f = 0; f < fan; ++f)
                for (std::size_t j = 0; j < units; ++j) {
                    const T n = (*norms)[j];
                    const std::size_t idx = f * units + j;
                    dv[idx] += gv[j] / n * (dw[idx] - vv[idx] / n * proj[j]);
                }
        }
    }, "weight_norm");
}

template <class T>
Var<T> sum(Var<T> x) {
    T total = T(0);
    for (const T& v : x.value().data()) total += v;
    return x.tape().record(Tensor<T>::scalar(total), {x}, [x](Tape<T>& tape, const Tensor<T>& dy) {
        Tensor<T>& dx = tape.grad_buffer(x);
        for (auto& v : dx.data()) v += dy[0];
    }, "sum");
}

template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& labels) {
    const Tensor<T>& lv = logits.value();
    if (lv.rank() != 2 || lv.dim(0) != labels.size()) {
        throw DimensionError("cross_entropy: logits " + shape_string(lv.shape()) + " vs " +
                             std::to_string(labels.size()) + " labels");
    }
    const std::size_t batch = lv.dim(0), classes = lv.dim(1);
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= classes) {
            throw std::invalid_argument("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                                        std::to_string(classes) + ")");
        }
    }
    auto probs = std::make_shared<Tensor<T>>(softmax_rows(lv));
    T loss = T(0);
    for (std::size_t b = 0; b < batch; ++b) {
        const T* row = lv.ptr() + b * classes;
        const T mx = *std::max_element(row, row + classes);
        T total = T(0);
        for (std::size_t c = 0; c < classes; ++c) total += std::exp(row[c] - mx);
        loss += mx + std::log(total) - row[labels[b]];
    }
    loss /= static_cast<T>(batch);
    return logits.tape().record(Tensor<T>::scalar(loss), {logits}, [logits, labels, probs, batch, classes](Tape<T>& tape, const Tensor<T>& dy) {
        Tensor<T>& dl = tape.grad_buffer(logits);
        const T s = dy[0] / static_cast<T>(batch);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < classes; ++c) {
                const T target = static_cast<int>(c) == labels[b] ? T(1) : T(0);
                dl[b * classes + c] += s * ((*probs)[b * classes + c] - target);
            }
    }, "cross_entropy");
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
    const std::size_t width = logits.dim(-1);
    const std::size_t rows = logits.size() / width;
    Tensor<T> out(logits.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* s = logits.ptr() + r * width;
        T* y = out.ptr() + r * width;
        const T mx = *std::max_element(s, s + width);
        T total = T(0);
        for (std::size_t j = 0; j < width; ++j) total += (y[j] = std::exp(s[j] - mx));
        for (std::size_t j = 0; j < width; ++j) y[j] /= total;
    }
    return out;
}

Mask broadcast_rows(const Mask& mask, std::size_t middle) {
    if (mask.rank() != 2) throw DimensionError("broadcast_rows: expected [B, L] mask, got " + shape_string(mask.shape()));
    const std::size_t batch = mask.dim(0), len = mask.dim(1);
    Mask out(Shape{batch, middle, len});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t m = 0; m < middle; ++m) std::copy_n(mask.ptr() + b * len, len, out.ptr() + (b * middle + m) * len);
    return out;
}

#define REMATCH_INSTANTIATE_OPS(T)                                                      \
    template Var<T> matmul(Var<T>, Var<T>);                                             \
    template Var<T> transpose(Var<T>);                                                  \
    template Var<T> add(Var<T>, Var<T>);                                                \
    template Var<T> sub(Var<T>, Var<T>);                                                \
    template Var<T> mul(Var<T>, Var<T>);                                                \
    template Var<T> abs(Var<T>);                                                        \
    template Var<T> scale(Var<T>, T);                                                   \
    template Var<T> add_bias(Var<T>, Var<T>);                                           \
    template Var<T> concat(const std::vector<Var<T>>&);                                 \
    template Var<T> slice_last(Var<T>, std::size_t, std::size_t);                       \
    template Var<T> zero_slice(Var<T>, std::size_t, std::size_t);                       \
    template Var<T> mask_positions(Var<T>, const Mask&);                                \
    template Var<T> conv1d_same(Var<T>, Var<T>, Var<T>);                                \
    template Var<T> gelu(Var<T>);                                                       \
    template Var<T> dropout(Var<T>, double, bool, Rng&);                                \
    template Var<T> softmax_masked(Var<T>, const Mask&);                                \
    template Var<T> max_pool(Var<T>, const Mask&);                                      \
    template Var<T> weight_norm(Var<T>, Var<T>);                                        \
    template Var<T> sum(Var<T>);                                                        \
    template Var<T> cross_entropy(Var<T>, const std::vector<int>&);                     \
    template Tensor<T> softmax_rows(const Tensor<T>&);

REMATCH_INSTANTIATE_OPS(float)
REMATCH_INSTANTIATE_OPS(double)

}  // namespace rematch::ops
