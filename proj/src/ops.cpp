#include "moss/ops.h"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <string>

namespace moss::ops {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MutMap = Eigen::Map<RowMat>;
using ConstMap = Eigen::Map<const RowMat>;

ConstMap mat(const Tensor& t) { return ConstMap(t.data(), t.rows(), t.cols()); }
MutMap mat_mut(Tensor& t) { return MutMap(t.data(), t.rows(), t.cols()); }
MutMap gmat(Tensor& t) { return MutMap(t.grad(), t.rows(), t.cols()); }

bool wants_grad(const Tape* tape, std::initializer_list<const Tensor*> ins) {
    if (!tape)
        return false;
    for (const Tensor* t : ins)
        if (t->requires_grad())
            return true;
    return false;
}

[[noreturn]] void fail(const std::string& op, const std::string& detail) {
    throw std::runtime_error(op + ": " + detail);
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        fail(op, "shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

constexpr double kLayerNormEps = 1e-5;

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
    if (b.rank() != 2)
        fail("matmul", "right operand must be rank-2, got " + b.shape_str());
    if (a.cols() != b.rows())
        fail("matmul",
             "inner dims differ: " + a.shape_str() + " vs " + b.shape_str());
    const int rows = a.rows(), n = b.cols();
    std::vector<int> out_shape =
        a.rank() == 1 ? std::vector<int>{n} : std::vector<int>{rows, n};
    Tensor out = Tensor::zeros(out_shape, wants_grad(tape, {&a, &b}));
    MutMap(out.data(), rows, n).noalias() = mat(a) * mat(b);
    if (out.requires_grad()) {
        tape->record([a = a, b = b, out]() mutable {
            ConstMap go(out.grad(), out.rows(), out.cols());
            if (a.requires_grad())
                gmat(a).noalias() += go * mat(b).transpose();
            if (b.requires_grad())
                gmat(b).noalias() += mat(a).transpose() * go;
        });
    }
    return out;
}

Tensor transpose(const Tensor& a, Tape* tape) {
    if (a.rank() != 2)
        fail("transpose", "expects rank-2, got " + a.shape_str());
    Tensor out = Tensor::zeros({a.cols(), a.rows()}, wants_grad(tape, {&a}));
    mat_mut(out) = mat(a).transpose();
    if (out.requires_grad()) {
        tape->record([a = a, out]() mutable {
            gmat(a) += ConstMap(out.grad(), out.rows(), out.cols()).transpose();
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
    check_same_shape("add", a, b);
    Tensor out = Tensor::zeros(a.shape(), wants_grad(tape, {&a, &b}));
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i)
        out.data()[i] = a.data()[i] + b.data()[i];
    if (out.requires_grad()) {
        tape->record([a = a, b = b, out]() mutable {
            const std::size_t n = out.size();
            if (a.requires_grad())
                for (std::size_t i = 0; i < n; ++i)
                    a.grad()[i] += out.grad()[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < n; ++i)
                    b.grad()[i] += out.grad()[i];
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b, Tape* tape) {
    check_same_shape("sub", a, b);
    Tensor out = Tensor::zeros(a.shape(), wants_grad(tape, {&a, &b}));
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i)
        out.data()[i] = a.data()[i] - b.data()[i];
    if (out.requires_grad()) {
        tape->record([a = a, b = b, out]() mutable {
            const std::size_t n = out.size();
            if (a.requires_grad())
                for (std::size_t i = 0; i < n; ++i)
                    a.grad()[i] += out.grad()[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < n; ++i)
                    b.grad()[i] -= out.grad()[i];
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
    check_same_shape("mul", a, b);
    Tensor out = Tensor::zeros(a.shape(), wants_grad(tape, {&a, &b}));
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i)
        out.data()[i] = a.data()[i] * b.data()[i];
    if (out.requires_grad()) {
        tape->record([a = a, b = b, out]() mutable {
            const std::size_t n = out.size();
            if (a.requires_grad())
                for (std::size_t i = 0; i < n; ++i)
                    a.grad()[i] += out.grad()[i] * b.data()[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < n; ++i)
                    b.grad()[i] += out.grad()[i] * a.data()[i];
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double c, Tape* tape) {
    Tensor out = Tensor::zeros(a.shape(), wants_grad(tape, {&a}));
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i)
        out.data()[i] = c * a.data()[i];
    if (out.requires_grad()) {
        tape->record([a = a, out, c]() mutable {
            const std::size_t n = out.size();
            for (std::size_t i = 0; i < n; ++i)
                a.grad()[i] += c * out.grad()[i];
        });
    }
    return out;
}

Tensor silu(const Tensor& x, Tape* tape) {
    Tensor out = Tensor::zeros(x.shape(), wants_grad(tape, {&x}));
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        out.data()[i] = v / (1.0 + std::exp(-v));
    }
    if (out.requires_grad()) {
        tape->record([x = x, out]() mutable {
            const std::size_t n = out.size();
            for (std::size_t i = 0; i < n; ++i) {
                const double v = x.data()[i];
                const double sig = 1.0 / (1.0 + std::exp(-v));
                x.grad()[i] += out.grad()[i] * sig * (1.0 + v * (1.0 - sig));
            }
        });
    }
    return out;
}

Tensor softmax_lastdim(const Tensor& a, Tape* tape) {
    const int rows = a.rows(), cols = a.cols();
    if (cols < 1)
        fail("softmax_lastdim", "last axis must be >= 1, got " + a.shape_str());
    Tensor out = Tensor::zeros(a.shape(), wants_grad(tape, {&a}));
    for (int r = 0; r < rows; ++r) {
        const double* in = a.data() + static_cast<std::size_t>(r) * cols;
        double* o = out.data() + static_cast<std::size_t>(r) * cols;
        double mx = in[0];
        for (int c = 1; c < cols; ++c)
            mx = std::max(mx, in[c]);
        double sum = 0.0;
        for (int c = 0; c < cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            sum += o[c];
        }
        for (int c = 0; c < cols; ++c)
            o[c] /= sum;
    }
    if (out.requires_grad()) {
        tape->record([a = a, out]() mutable {
            const int rows = out.rows(), cols = out.cols();
            for (int r = 0; r < rows; ++r) {
                const double* p = out.data() + static_cast<std::size_t>(r) * cols;
                const double* go = out.grad() + static_cast<std::size_t>(r) * cols;
                double* ga = a.grad() + static_cast<std::size_t>(r) * cols;
                double dot = 0.0;
                for (int c = 0; c < cols; ++c)
                    dot += go[c] * p[c];
                for (int c = 0; c < cols; ++c)
                    ga[c] += p[c] * (go[c] - dot);
            }
        });
    }
    return out;
}

// Normalization uses rstd = 1 / max(sqrt(var), eps): rows whose std exceeds
// the floor come out with exactly unit variance, degenerate rows stay finite.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift,
                  Tape* tape) {
    const int rows = x.rows(), cols = x.cols();
    if (cols < 1)
        fail("layer_norm", "last axis must be >= 1, got " + x.shape_str());
    if (gain.rank() != 1 || gain.cols() != cols)
        fail("layer_norm", "gain shape " + gain.shape_str() +
                               " does not match last axis of " + x.shape_str());
    if (shift.rank() != 1 || shift.cols() != cols)
        fail("layer_norm", "shift shape " + shift.shape_str() +
                               " does not match last axis of " + x.shape_str());
    Tensor out =
        Tensor::zeros(x.shape(), wants_grad(tape, {&x, &gain, &shift}));
    auto row_stats = std::make_shared<std::vector<double>>(
        static_cast<std::size_t>(rows) * 2); // per row: mean, rstd
    for (int r = 0; r < rows; ++r) {
        const double* in = x.data() + static_cast<std::size_t>(r) * cols;
        double* o = out.data() + static_cast<std::size_t>(r) * cols;
        double mean = 0.0;
        for (int c = 0; c < cols; ++c)
            mean += in[c];
        mean /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c)
            var += (in[c] - mean) * (in[c] - mean);
        var /= cols;
        const double rstd = 1.0 / std::max(std::sqrt(var), kLayerNormEps);
        (*row_stats)[2 * r] = mean;
        (*row_stats)[2 * r + 1] = rstd;
        for (int c = 0; c < cols; ++c)
            o[c] = (in[c] - mean) * rstd * gain.data()[c] + shift.data()[c];
    }
    if (out.requires_grad()) {
        tape->record([x = x, gain = gain, shift = shift, out, row_stats]() mutable {
            const int rows = out.rows(), cols = out.cols();
            std::vector<double> dxhat(cols);
            for (int r = 0; r < rows; ++r) {
                const double* in = x.data() + static_cast<std::size_t>(r) * cols;
                const double* go = out.grad() + static_cast<std::size_t>(r) * cols;
                const double mean = (*row_stats)[2 * r];
                const double rstd = (*row_stats)[2 * r + 1];
                const bool floored = rstd >= 1.0 / kLayerNormEps;
                double dxhat_mean = 0.0, dxhat_xhat_mean = 0.0;
                for (int c = 0; c < cols; ++c) {
                    const double xhat = (in[c] - mean) * rstd;
                    dxhat[c] = go[c] * gain.data()[c];
                    dxhat_mean += dxhat[c];
                    dxhat_xhat_mean += dxhat[c] * xhat;
                    if (gain.requires_grad())
                        gain.grad()[c] += go[c] * xhat;
                    if (shift.requires_grad())
                        shift.grad()[c] += go[c];
                }
                dxhat_mean /= cols;
                dxhat_xhat_mean /= cols;
                if (x.requires_grad()) {
                    double* gx = x.grad() + static_cast<std::size_t>(r) * cols;
                    for (int c = 0; c < cols; ++c) {
                        const double xhat = (in[c] - mean) * rstd;
                        const double centered =
                            floored ? dxhat[c] - dxhat_mean
                                    : dxhat[c] - dxhat_mean -
                                          xhat * dxhat_xhat_mean;
                        gx[c] += rstd * centered;
                    }
                }
            }
        });
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, Tape* tape) {
    if (w.rank() != 2)
        fail("linear", "weight must be rank-2, got " + w.shape_str());
    if (x.cols() != w.rows())
        fail("linear",
             "input/weight dims differ: " + x.shape_str() + " vs " + w.shape_str());
    if (b.rank() != 1 || b.cols() != w.cols())
        fail("linear", "bias shape " + b.shape_str() +
                           " does not match weight " + w.shape_str());
    const int rows = x.rows(), n = w.cols();
    std::vector<int> out_shape =
        x.rank() == 1 ? std::vector<int>{n} : std::vector<int>{rows, n};
    Tensor out = Tensor::zeros(out_shape, wants_grad(tape, {&x, &w, &b}));
    MutMap o(out.data(), rows, n);
    o.noalias() = mat(x) * mat(w);
    o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data(), n);
    if (out.requires_grad()) {
        tape->record([x = x, w = w, b = b, out]() mutable {
            ConstMap go(out.grad(), out.rows(), out.cols());
            if (x.requires_grad())
                gmat(x).noalias() += go * mat(w).transpose();
            if (w.requires_grad())
                gmat(w).noalias() += mat(x).transpose() * go;
            if (b.requires_grad())
                Eigen::Map<Eigen::RowVectorXd>(b.grad(), b.cols()) +=
                    go.colwise().sum();
        });
    }
    return out;
}

Tensor concat_lastaxis(const std::vector<Tensor>& xs, Tape* tape) {
    if (xs.empty())
        fail("concat_lastaxis", "needs at least one input");
    const int rows = xs[0].rows();
    const int rank = xs[0].rank();
    int total = 0;
    bool rg = false;
    for (const Tensor& t : xs) {
        if (t.rows() != rows || t.rank() != rank)
            fail("concat_lastaxis", "row/rank mismatch: " + xs[0].shape_str() +
                                        " vs " + t.shape_str());
        total += t.cols();
        rg = rg || (tape && t.requires_grad());
    }
    std::vector<int> out_shape =
        rank == 1 ? std::vector<int>{total} : std::vector<int>{rows, total};
    Tensor out = Tensor::zeros(out_shape, rg);
    int off = 0;
    for (const Tensor& t : xs) {
        const int c = t.cols();
        for (int r = 0; r < rows; ++r)
            std::memcpy(out.data() + static_cast<std::size_t>(r) * total + off,
                        t.data() + static_cast<std::size_t>(r) * c,
                        static_cast<std::size_t>(c) * sizeof(double));
        off += c;
    }
    if (rg) {
        tape->record([xs = xs, out, total, rows]() mutable {
            int off = 0;
            for (Tensor& t : xs) {
                const int c = t.cols();
                if (t.requires_grad())
                    for (int r = 0; r < rows; ++r) {
                        const double* go = out.grad() +
                                           static_cast<std::size_t>(r) * total + off;
                        double* gt = t.grad() + static_cast<std::size_t>(r) * c;
                        for (int j = 0; j < c; ++j)
                            gt[j] += go[j];
                    }
                off += c;
            }
        });
    }
    return out;
}

std::vector<Tensor> split_lastaxis(const Tensor& x, int pieces, Tape* tape) {
    if (pieces < 1)
        fail("split_lastaxis", "pieces must be positive");
    const int cols = x.cols();
    if (cols % pieces != 0)
        fail("split_lastaxis", "last axis of " + x.shape_str() +
                                   " not divisible into " +
                                   std::to_string(pieces) + " pieces");
    const int rows = x.rows(), w = cols / pieces;
    const bool rg = wants_grad(tape, {&x});
    std::vector<Tensor> outs;
    outs.reserve(pieces);
    for (int p = 0; p < pieces; ++p) {
        std::vector<int> shape =
            x.rank() == 1 ? std::vector<int>{w} : std::vector<int>{rows, w};
        Tensor piece = Tensor::zeros(shape, rg);
        for (int r = 0; r < rows; ++r)
            std::memcpy(piece.data() + static_cast<std::size_t>(r) * w,
                        x.data() + static_cast<std::size_t>(r) * cols + p * w,
                        static_cast<std::size_t>(w) * sizeof(double));
        outs.push_back(piece);
    }
    if (rg) {
        tape->record([x = x, outs, rows, cols, w]() mutable {
            for (std::size_t p = 0; p < outs.size(); ++p)
                for (int r = 0; r < rows; ++r) {
                    const double* go =
                        outs[p].grad() + static_cast<std::size_t>(r) * w;
                    double* gx = x.grad() + static_cast<std::size_t>(r) * cols +
                                 p * w;
                    for (int j = 0; j < w; ++j)
                        gx[j] += go[j];
                }
        });
    }
    return outs;
}

Tensor concat_rows(const std::vector<Tensor>& xs, Tape* tape) {
    if (xs.empty())
        fail("concat_rows", "needs at least one input");
    const int cols = xs[0].cols();
    int total = 0;
    bool rg = false;
    for (const Tensor& t : xs) {
        if (t.cols() != cols)
            fail("concat_rows", "column mismatch: " + xs[0].shape_str() +
                                    " vs " + t.shape_str());
        total += t.rows();
        rg = rg || (tape && t.requires_grad());
    }
    Tensor out = Tensor::zeros({total, cols}, rg);
    int row = 0;
    for (const Tensor& t : xs) {
        std::memcpy(out.data() + static_cast<std::size_t>(row) * cols, t.data(),
                    t.size() * sizeof(double));
        row += t.rows();
    }
    if (rg) {
        tape->record([xs = xs, out, cols]() mutable {
            int row = 0;
            for (Tensor& t : xs) {
                if (t.requires_grad()) {
                    const double* go =
                        out.grad() + static_cast<std::size_t>(row) * cols;
                    for (std::size_t i = 0; i < t.size(); ++i)
                        t.grad()[i] += go[i];
                }
                row += t.rows();
            }
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& x, int start, int len, Tape* tape) {
    if (x.rank() != 2)
        fail("slice_rows", "expects rank-2, got " + x.shape_str());
    if (start < 0 || len < 1 || start + len > x.rows())
        fail("slice_rows", "range [" + std::to_string(start) + ", " +
                               std::to_string(start + len) +
                               ") out of bounds for " + x.shape_str());
    const int cols = x.cols();
    Tensor out = Tensor::zeros({len, cols}, wants_grad(tape, {&x}));
    std::memcpy(out.data(), x.data() + static_cast<std::size_t>(start) * cols,
                static_cast<std::size_t>(len) * cols * sizeof(double));
    if (out.requires_grad()) {
        tape->record([x = x, out, start, cols]() mutable {
            double* gx = x.grad() + static_cast<std::size_t>(start) * cols;
            for (std::size_t i = 0; i < out.size(); ++i)
                gx[i] += out.grad()[i];
        });
    }
    return out;
}

Tensor rows_select(const Tensor& table, const std::vector<int>& idx,
                   Tape* tape) {
    if (table.rank() != 2)
        fail("rows_select", "table must be rank-2, got " + table.shape_str());
    const int cols = table.cols(), n = static_cast<int>(idx.size());
    for (int i : idx)
        if (i < 0 || i >= table.rows())
            fail("rows_select", "index " + std::to_string(i) +
                                    " out of range for " + table.shape_str());
    Tensor out = Tensor::zeros({n, cols}, wants_grad(tape, {&table}));
    for (int r = 0; r < n; ++r)
        std::memcpy(out.data() + static_cast<std::size_t>(r) * cols,
                    table.data() + static_cast<std::size_t>(idx[r]) * cols,
                    static_cast<std::size_t>(cols) * sizeof(double));
    if (out.requires_grad()) {
        tape->record([table = table, out, idx, cols]() mutable {
            for (std::size_t r = 0; r < idx.size(); ++r) {
                const double* go = out.grad() + r * cols;
                double* gt =
                    table.grad() + static_cast<std::size_t>(idx[r]) * cols;
                for (int c = 0; c < cols; ++c)
                    gt[c] += go[c];
            }
        });
    }
    return out;
}

Tensor mse(const Tensor& pred, const Tensor& target, Tape* tape) {
    check_same_shape("mse", pred, target);
    const std::size_t n = pred.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = pred.data()[i] - target.data()[i];
        acc += d * d;
    }
    Tensor out =
        Tensor::scalar(acc / static_cast<double>(n), wants_grad(tape, {&pred, &target}));
    if (out.requires_grad()) {
        tape->record([pred = pred, target = target, out]() mutable {
            const std::size_t n = pred.size();
            const double g = out.grad()[0] * 2.0 / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double d = pred.data()[i] - target.data()[i];
                if (pred.requires_grad())
                    pred.grad()[i] += g * d;
                if (target.requires_grad())
                    target.grad()[i] -= g * d;
            }
        });
    }
    return out;
}

Tensor concat_rows_per_sample(const std::vector<Tensor>& xs, int batch,
                              const std::vector<int>& counts, Tape* tape) {
    if (xs.empty() || xs.size() != counts.size())
        fail("concat_rows_per_sample", "inputs and counts must align");
    const int width = xs[0].cols();
    int tokens = 0;
    bool rg = false;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].cols() != width)
            fail("concat_rows_per_sample",
                 "column mismatch: " + xs[0].shape_str() + " vs " +
                     xs[i].shape_str());
        if (xs[i].rows() != batch * counts[i])
            fail("concat_rows_per_sample",
                 "input " + std::to_string(i) + " has " +
                     std::to_string(xs[i].rows()) + " rows, expected " +
                     std::to_string(batch * counts[i]));
        tokens += counts[i];
        rg = rg || (tape && xs[i].requires_grad());
    }
    Tensor out = Tensor::zeros({batch * tokens, width}, rg);
    for (int b = 0; b < batch; ++b) {
        int off = 0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            std::memcpy(
                out.data() + (static_cast<std::size_t>(b) * tokens + off) * width,
                xs[i].data() +
                    static_cast<std::size_t>(b) * counts[i] * width,
                static_cast<std::size_t>(counts[i]) * width * sizeof(double));
            off += counts[i];
        }
    }
    if (rg) {
        tape->record([xs = xs, out, batch, counts, tokens, width]() mutable {
            for (int b = 0; b < batch; ++b) {
                int off = 0;
                for (std::size_t i = 0; i < xs.size(); ++i) {
                    if (xs[i].requires_grad()) {
                        const double* go =
                            out.grad() +
                            (static_cast<std::size_t>(b) * tokens + off) * width;
                        double* gx =
                            xs[i].grad() +
                            static_cast<std::size_t>(b) * counts[i] * width;
                        for (int j = 0; j < counts[i] * width; ++j)
                            gx[j] += go[j];
                    }
                    off += counts[i];
                }
            }
        });
    }
    return out;
}

Tensor slice_rows_per_sample(const Tensor& x, int batch, int tokens, int offset,
                             int len, Tape* tape) {
    if (x.rows() != batch * tokens)
        fail("slice_rows_per_sample",
             "expected " + std::to_string(batch * tokens) + " rows, got " +
                 x.shape_str());
    if (offset < 0 || len < 1 || offset + len > tokens)
        fail("slice_rows_per_sample",
             "range [" + std::to_string(offset) + ", " +
                 std::to_string(offset + len) + ") out of bounds for " +
                 std::to_string(tokens) + " tokens");
    const int width = x.cols();
    Tensor out = Tensor::zeros({batch * len, width}, wants_grad(tape, {&x}));
    for (int b = 0; b < batch; ++b)
        std::memcpy(out.data() + static_cast<std::size_t>(b) * len * width,
                    x.data() +
                        (static_cast<std::size_t>(b) * tokens + offset) * width,
                    static_cast<std::size_t>(len) * width * sizeof(double));
    if (out.requires_grad()) {
        tape->record([x = x, out, batch, tokens, offset, len, width]() mutable {
            for (int b = 0; b < batch; ++b) {
                const double* go =
                    out.grad() + static_cast<std::size_t>(b) * len * width;
                double* gx =
                    x.grad() +
                    (static_cast<std::size_t>(b) * tokens + offset) * width;
                for (int j = 0; j < len * width; ++j)
                    gx[j] += go[j];
            }
        });
    }
    return out;
}

Tensor add_broadcast_rows(const Tensor& x, const Tensor& pattern, int batch,
                          Tape* tape) {
    const int tokens = pattern.rows(), width = pattern.cols();
    if (x.rows() != batch * tokens || x.cols() != width)
        fail("add_broadcast_rows", "input " + x.shape_str() +
                                       " does not tile pattern " +
                                       pattern.shape_str() + " over batch " +
                                       std::to_string(batch));
    Tensor out = Tensor::zeros(x.shape(), wants_grad(tape, {&x, &pattern}));
    for (int b = 0; b < batch; ++b) {
        const double* in = x.data() + static_cast<std::size_t>(b) * tokens * width;
        double* o = out.data() + static_cast<std::size_t>(b) * tokens * width;
        for (int j = 0; j < tokens * width; ++j)
            o[j] = in[j] + pattern.data()[j];
    }
    if (out.requires_grad()) {
        tape->record([x = x, pattern = pattern, out, batch, tokens, width]() mutable {
            for (int b = 0; b < batch; ++b) {
                const double* go =
                    out.grad() + static_cast<std::size_t>(b) * tokens * width;
                if (x.requires_grad()) {
                    double* gx =
                        x.grad() + static_cast<std::size_t>(b) * tokens * width;
                    for (int j = 0; j < tokens * width; ++j)
                        gx[j] += go[j];
                }
                if (pattern.requires_grad())
                    for (int j = 0; j < tokens * width; ++j)
                        pattern.grad()[j] += go[j];
            }
        });
    }
    return out;
}

Tensor modulate_per_sample(const Tensor& x, const Tensor& s, const Tensor& t,
                           int tokens, Tape* tape) {
    const int width = x.cols();
    const int batch = s.rows();
    if (x.rows() != batch * tokens)
        fail("modulate_per_sample", "input " + x.shape_str() +
                                        " does not match batch " +
                                        std::to_string(batch) + " x tokens " +
                                        std::to_string(tokens));
    if (s.cols() != width || t.rows() != batch || t.cols() != width)
        fail("modulate_per_sample", "conditioning shapes " + s.shape_str() +
                                        ", " + t.shape_str() +
                                        " do not match input " + x.shape_str());
    Tensor out = Tensor::zeros(x.shape(), wants_grad(tape, {&x, &s, &t}));
    for (int b = 0; b < batch; ++b) {
        const double* sb = s.data() + static_cast<std::size_t>(b) * width;
        const double* tb = t.data() + static_cast<std::size_t>(b) * width;
        for (int r = 0; r < tokens; ++r) {
            const std::size_t row = (static_cast<std::size_t>(b) * tokens + r) * width;
            for (int c = 0; c < width; ++c)
                out.data()[row + c] = x.data()[row + c] * (1.0 + sb[c]) + tb[c];
        }
    }
    if (out.requires_grad()) {
        tape->record([x = x, s = s, t = t, out, batch, tokens, width]() mutable {
            for (int b = 0; b < batch; ++b) {
                const double* sb = s.data() + static_cast<std::size_t>(b) * width;
                double* gs =
                    s.requires_grad() ? s.grad() + static_cast<std::size_t>(b) * width
                                      : nullptr;
                double* gt =
                    t.requires_grad() ? t.grad() + static_cast<std::size_t>(b) * width
                                      : nullptr;
                for (int r = 0; r < tokens; ++r) {
                    const std::size_t row =
                        (static_cast<std::size_t>(b) * tokens + r) * width;
                    for (int c = 0; c < width; ++c) {
                        const double go = out.grad()[row + c];
                        if (x.requires_grad())
                            x.grad()[row + c] += go * (1.0 + sb[c]);
                        if (gs)
                            gs[c] += go * x.data()[row + c];
                        if (gt)
                            gt[c] += go;
                    }
                }
            }
        });
    }
    return out;
}

std::vector<Tensor> joint_attention(const std::vector<Tensor>& q,
                                    const std::vector<Tensor>& k,
                                    const std::vector<Tensor>& v, int batch,
                                    int heads, Tape* tape,
                                    AttentionProbe* probe) {
    const int n = static_cast<int>(q.size());
    if (n < 1 || k.size() != q.size() || v.size() != q.size())
        fail("joint_attention", "q/k/v must hold one tensor per stream");
    const int width = q[0].cols();
    if (heads < 1 || width % heads != 0)
        fail("joint_attention", "width " + std::to_string(width) +
                                    " not divisible by heads " +
                                    std::to_string(heads));
    const int dh = width / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<int> counts(n), off(n);
    int joint = 0;
    bool rg = false;
    for (int i = 0; i < n; ++i) {
        if (q[i].cols() != width || k[i].shape() != q[i].shape() ||
            v[i].shape() != q[i].shape())
            fail("joint_attention", "stream " + std::to_string(i) +
                                        " q/k/v shapes disagree: " +
                                        q[i].shape_str() + ", " +
                                        k[i].shape_str() + ", " +
                                        v[i].shape_str());
        if (q[i].rows() % batch != 0)
            fail("joint_attention", "stream " + std::to_string(i) + " rows " +
                                        std::to_string(q[i].rows()) +
                                        " not divisible by batch " +
                                        std::to_string(batch));
        counts[i] = q[i].rows() / batch;
        off[i] = joint;
        joint += counts[i];
        rg = rg || (tape && (q[i].requires_grad() || k[i].requires_grad() ||
                             v[i].requires_grad()));
    }
    if (probe) {
        if (probe->query_stream < 0 || probe->query_stream >= n)
            fail("joint_attention", "probe stream out of range");
        if (probe->query_offset < 0 || probe->query_len < 1 ||
            probe->query_offset + probe->query_len > counts[probe->query_stream])
            fail("joint_attention", "probe row range out of range");
        probe->stream_mass.assign(n, 0.0);
    }

    std::vector<Tensor> outs;
    outs.reserve(n);
    for (int i = 0; i < n; ++i)
        outs.push_back(Tensor::zeros(q[i].shape(), rg));

    // Softmax rows for the whole call, laid out (b, h, joint query row, key).
    auto probs = std::make_shared<std::vector<double>>(
        static_cast<std::size_t>(batch) * heads * joint * joint);

    RowMat kj(joint, width), vj(joint, width);
    for (int b = 0; b < batch; ++b) {
        for (int i = 0; i < n; ++i) {
            kj.middleRows(off[i], counts[i]) = ConstMap(
                k[i].data() + static_cast<std::size_t>(b) * counts[i] * width,
                counts[i], width);
            vj.middleRows(off[i], counts[i]) = ConstMap(
                v[i].data() + static_cast<std::size_t>(b) * counts[i] * width,
                counts[i], width);
        }
        for (int h = 0; h < heads; ++h) {
            auto kh = kj.middleCols(h * dh, dh);
            auto vh = vj.middleCols(h * dh, dh);
            for (int i = 0; i < n; ++i) {
                ConstMap qi(q[i].data() +
                                static_cast<std::size_t>(b) * counts[i] * width,
                            counts[i], width);
                RowMat sc = qi.middleCols(h * dh, dh) * kh.transpose() * scale;
                for (int r = 0; r < counts[i]; ++r) {
                    double mx = sc(r, 0);
                    for (int u = 1; u < joint; ++u)
                        mx = std::max(mx, sc(r, u));
                    double sum = 0.0;
                    for (int u = 0; u < joint; ++u) {
                        sc(r, u) = std::exp(sc(r, u) - mx);
                        sum += sc(r, u);
                    }
                    for (int u = 0; u < joint; ++u)
                        sc(r, u) /= sum;
                }
                double* pslab =
                    probs->data() +
                    ((static_cast<std::size_t>(b) * heads + h) * joint +
                     off[i]) *
                        joint;
                std::memcpy(pslab, sc.data(),
                            static_cast<std::size_t>(counts[i]) * joint *
                                sizeof(double));
                MutMap oi(outs[i].data() +
                              static_cast<std::size_t>(b) * counts[i] * width,
                          counts[i], width);
                oi.middleCols(h * dh, dh).noalias() = sc * vh;
                if (probe && i == probe->query_stream)
                    for (int r = probe->query_offset;
                         r < probe->query_offset + probe->query_len; ++r)
                        for (int j = 0; j < n; ++j) {
                            double mass = 0.0;
                            for (int u = off[j]; u < off[j] + counts[j]; ++u)
                                mass += sc(r, u);
                            probe->stream_mass[j] += mass;
                        }
            }
        }
    }
    if (probe) {
        const double norm =
            static_cast<double>(batch) * heads * probe->query_len;
        for (double& m : probe->stream_mass)
            m /= norm;
    }

    if (rg) {
        tape->record([q = q, k = k, v = v, outs, probs, batch, heads, counts, off, joint,
                      width, dh, scale]() mutable {
            const int n = static_cast<int>(q.size());
            RowMat kjh(joint, dh), vjh(joint, dh), dkjh(joint, dh),
                dvjh(joint, dh);
            for (int b = 0; b < batch; ++b) {
                for (int h = 0; h < heads; ++h) {
                    for (int i = 0; i < n; ++i) {
                        ConstMap ki(k[i].data() + static_cast<std::size_t>(b) *
                                                      counts[i] * width,
                                    counts[i], width);
                        ConstMap vi(v[i].data() + static_cast<std::size_t>(b) *
                                                      counts[i] * width,
                                    counts[i], width);
                        kjh.middleRows(off[i], counts[i]) =
                            ki.middleCols(h * dh, dh);
                        vjh.middleRows(off[i], counts[i]) =
                            vi.middleCols(h * dh, dh);
                    }
                    dkjh.setZero();
                    dvjh.setZero();
                    for (int i = 0; i < n; ++i) {
                        ConstMap pi(probs->data() +
                                        ((static_cast<std::size_t>(b) * heads +
                                          h) *
                                             joint +
                                         off[i]) *
                                            joint,
                                    counts[i], joint);
                        ConstMap go(outs[i].grad() +
                                        static_cast<std::size_t>(b) *
                                            counts[i] * width,
                                    counts[i], width);
                        auto goh = go.middleCols(h * dh, dh);
                        dvjh.noalias() += pi.transpose() * goh;
                        RowMat dp = goh * vjh.transpose(); // [counts_i x joint]
                        for (int r = 0; r < counts[i]; ++r) {
                            double dot = 0.0;
                            for (int u = 0; u < joint; ++u)
                                dot += dp(r, u) * pi(r, u);
                            for (int u = 0; u < joint; ++u)
                                dp(r, u) = pi(r, u) * (dp(r, u) - dot);
                        }
                        ConstMap qi(q[i].data() + static_cast<std::size_t>(b) *
                                                      counts[i] * width,
                                    counts[i], width);
                        if (q[i].requires_grad()) {
                            MutMap gq(q[i].grad() +
                                          static_cast<std::size_t>(b) *
                                              counts[i] * width,
                                      counts[i], width);
                            gq.middleCols(h * dh, dh).noalias() +=
                                dp * kjh * scale;
                        }
                        dkjh.noalias() +=
                            dp.transpose() * qi.middleCols(h * dh, dh) * scale;
                    }
                    for (int j = 0; j < n; ++j) {
                        if (k[j].requires_grad()) {
                            MutMap gk(k[j].grad() +
                                          static_cast<std::size_t>(b) *
                                              counts[j] * width,
                                      counts[j], width);
                            gk.middleCols(h * dh, dh) +=
                                dkjh.middleRows(off[j], counts[j]);
                        }
                        if (v[j].requires_grad()) {
                            MutMap gv(v[j].grad() +
                                          static_cast<std::size_t>(b) *
                                              counts[j] * width,
                                      counts[j], width);
                            gv.middleCols(h * dh, dh) +=
                                dvjh.middleRows(off[j], counts[j]);
                        }
                    }
                }
            }
        });
    }
    return outs;
}

} // namespace moss::ops
