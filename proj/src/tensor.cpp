#include "mgcg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mgcg {

namespace {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw DimensionError("negative dimension in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

thread_local GradTape* g_active_tape = nullptr;

bool tracing(const Tensor& a) {
    return GradTape::active() != nullptr && a.requires_grad();
}

}  // namespace

// ---- Tensor -------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape) {
    Tensor t;
    std::size_t n = shape_numel(shape);
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<double>>(n, 0.0);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("from_data: shape does not match value count");
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<double>>(std::move(values));
    return t;
}

Tensor Tensor::scalar(double value) {
    return from_data({1}, {value});
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev) {
    Tensor t = zeros(std::move(shape));
    for (double& v : *t.data_) v = normal(rng, 0.0, stddev);
    return t;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item: tensor is not scalar, shape " + shape_string());
    }
    return (*data_)[0];
}

void Tensor::set_requires_grad(bool flag) {
    requires_grad_ = flag;
    if (flag) {
        ensure_grad();
    } else {
        grad_.reset();
    }
}

std::vector<double> Tensor::grad_vector() const {
    if (!grad_) throw StateError("grad_vector: no gradient buffer");
    return *grad_;
}

void Tensor::zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

void Tensor::ensure_grad() {
    if (!grad_) grad_ = std::make_shared<std::vector<double>>(numel(), 0.0);
}

Tensor Tensor::clone_detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
}

std::string Tensor::shape_string() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << ",";
        os << shape_[i];
    }
    os << "]";
    return os.str();
}

bool Tensor::finite() const {
    for (double v : *data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

// ---- GradTape -----------------------------------------------------------

GradTape::GradTape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

GradTape::~GradTape() {
    g_active_tape = prev_;
}

GradTape* GradTape::active() {
    return g_active_tape;
}

void GradTape::record(const Tensor& out, std::function<void(const Tensor&)> pull) {
    nodes_.push_back(Node{out, std::move(pull)});
}

void GradTape::backward(const Tensor& loss) {
    if (consumed_) throw StateError("backward: tape already consumed");
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, shape " + loss.shape_string());
    }
    if (!loss.requires_grad() || !loss.has_grad()) {
        throw ContractError("backward: loss was not recorded on this tape");
    }
    consumed_ = true;
    const_cast<Tensor&>(loss).grad()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        it->pull(it->out);
    }
}

// ---- op helpers -----------------------------------------------------------

namespace {

// Marks the output as grad-carrying and records the backward rule if any
// input is being traced on the active tape.
void record_op(Tensor& out, bool trace, std::function<void(const Tensor&)> pull) {
    if (!trace) return;
    out.set_requires_grad(true);
    GradTape::active()->record(out, std::move(pull));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() +
                             " vs " + b.shape_string());
    }
}

}  // namespace

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw DimensionError("matmul: incompatible shapes " + a.shape_string() + " x " +
                             b.shape_string());
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            const double* brow = pb + kk * n;
            double* orow = po + i * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    record_op(out, tracing(a) || tracing(b), [a, b, m, k, n](const Tensor& o) {
        Tensor& am = const_cast<Tensor&>(a);
        Tensor& bm = const_cast<Tensor&>(b);
        const double* go = o.grad();
        if (a.requires_grad()) {
            double* ga = am.grad();
            const double* pb2 = b.data();
            // dA = dC * B^T
            for (int i = 0; i < m; ++i) {
                for (int kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    const double* grow = go + i * n;
                    const double* brow = pb2 + kk * n;
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    ga[i * k + kk] += acc;
                }
            }
        }
        if (b.requires_grad()) {
            double* gb = bm.grad();
            const double* pa2 = a.data();
            // dB = A^T * dC
            for (int kk = 0; kk < k; ++kk) {
                for (int i = 0; i < m; ++i) {
                    const double av = pa2[i * k + kk];
                    const double* grow = go + i * n;
                    double* gbrow = gb + kk * n;
                    for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                }
            }
        }
    });
    return out;
}

Tensor matmul_transb(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
        throw DimensionError("matmul_transb: incompatible shapes " + a.shape_string() +
                             " x " + b.shape_string() + "^T");
    }
    const int m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out = Tensor::zeros({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        for (int j = 0; j < n; ++j) {
            const double* brow = pb + j * k;
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            po[i * n + j] = acc;
        }
    }
    record_op(out, tracing(a) || tracing(b), [a, b, m, k, n](const Tensor& o) {
        Tensor& am = const_cast<Tensor&>(a);
        Tensor& bm = const_cast<Tensor&>(b);
        const double* go = o.grad();
        if (a.requires_grad()) {
            double* ga = am.grad();
            const double* pb2 = b.data();
            // dA = dC * B
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) {
                    const double gv = go[i * n + j];
                    const double* brow = pb2 + j * k;
                    double* garow = ga + i * k;
                    for (int kk = 0; kk < k; ++kk) garow[kk] += gv * brow[kk];
                }
            }
        }
        if (b.requires_grad()) {
            double* gb = bm.grad();
            const double* pa2 = a.data();
            // dB = dC^T * A
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) {
                    const double gv = go[i * n + j];
                    const double* arow = pa2 + i * k;
                    double* gbrow = gb + j * k;
                    for (int kk = 0; kk < k; ++kk) gbrow[kk] += gv * arow[kk];
                }
            }
        }
    });
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
    record_op(out, tracing(a) || tracing(b), [a, b, n](const Tensor& o) {
        const double* go = o.grad();
        if (a.requires_grad()) {
            double* ga = const_cast<Tensor&>(a).grad();
            for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
        }
        if (b.requires_grad()) {
            double* gb = const_cast<Tensor&>(b).grad();
            for (std::size_t i = 0; i < n; ++i) gb[i] += go[i];
        }
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
    record_op(out, tracing(a) || tracing(b), [a, b, n](const Tensor& o) {
        const double* go = o.grad();
        if (a.requires_grad()) {
            double* ga = const_cast<Tensor&>(a).grad();
            for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
        }
        if (b.requires_grad()) {
            double* gb = const_cast<Tensor&>(b).grad();
            for (std::size_t i = 0; i < n; ++i) gb[i] -= go[i];
        }
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
    record_op(out, tracing(a) || tracing(b), [a, b, n](const Tensor& o) {
        const double* go = o.grad();
        if (a.requires_grad()) {
            double* ga = const_cast<Tensor&>(a).grad();
            const double* pb = b.data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * pb[i];
        }
        if (b.requires_grad()) {
            double* gb = const_cast<Tensor&>(b).grad();
            const double* pa = a.data();
            for (std::size_t i = 0; i < n; ++i) gb[i] += go[i] * pa[i];
        }
    });
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * s;
    record_op(out, tracing(a), [a, s, n](const Tensor& o) {
        const double* go = o.grad();
        double* ga = const_cast<Tensor&>(a).grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * s;
    });
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + s;
    record_op(out, tracing(a), [a, n](const Tensor& o) {
        const double* go = o.grad();
        double* ga = const_cast<Tensor&>(a).grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
    });
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) > 0.0 ? a.at(i) : 0.0;
    record_op(out, tracing(a), [a, n](const Tensor& o) {
        const double* go = o.grad();
        const double* pa = a.data();
        double* ga = const_cast<Tensor&>(a).grad();
        for (std::size_t i = 0; i < n; ++i) {
            if (pa[i] > 0.0) ga[i] += go[i];
        }
    });
    return out;
}

Tensor sigmoid(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = 1.0 / (1.0 + std::exp(-a.at(i)));
    record_op(out, tracing(a), [a, n](const Tensor& o) {
        const double* go = o.grad();
        const double* py = o.data();
        double* ga = const_cast<Tensor&>(a).grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * py[i] * (1.0 - py[i]);
    });
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    if (x.numel() == 0 || x.rank() == 0) throw DomainError("softmax_rows: empty tensor");
    const int r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (int i = 0; i < r; ++i) {
        const double* row = px + static_cast<std::size_t>(i) * c;
        double* orow = po + static_cast<std::size_t>(i) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (int j = 0; j < c; ++j) orow[j] /= sum;
    }
    record_op(out, tracing(x), [x, r, c](const Tensor& o) {
        const double* go = o.grad();
        const double* py = o.data();
        double* gx = const_cast<Tensor&>(x).grad();
        for (int i = 0; i < r; ++i) {
            const std::size_t off = static_cast<std::size_t>(i) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += go[off + j] * py[off + j];
            for (int j = 0; j < c; ++j) {
                gx[off + j] += py[off + j] * (go[off + j] - dot);
            }
        }
    });
    return out;
}

Tensor causal_mask(const Tensor& scores) {
    if (scores.rank() != 2 || scores.rows() != scores.cols()) {
        throw DimensionError("causal_mask: expected square rank-2 tensor, got " +
                             scores.shape_string());
    }
    // Future positions get a constant large-negative score; exp underflows to
    // exactly zero after max-subtraction, so masked weights are exact zeros.
    const double kNegInf = -1e30;
    const int t = scores.rows();
    Tensor out = Tensor::zeros(scores.shape());
    const double* px = scores.data();
    double* po = out.data();
    for (int i = 0; i < t; ++i) {
        for (int j = 0; j < t; ++j) {
            po[i * t + j] = j <= i ? px[i * t + j] : kNegInf;
        }
    }
    record_op(out, tracing(scores), [scores, t](const Tensor& o) {
        const double* go = o.grad();
        double* gx = const_cast<Tensor&>(scores).grad();
        for (int i = 0; i < t; ++i) {
            for (int j = 0; j <= i; ++j) gx[i * t + j] += go[i * t + j];
        }
    });
    return out;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const int r = x.rows(), c = x.cols();
    if (gain.numel() != static_cast<std::size_t>(c) || bias.numel() != static_cast<std::size_t>(c)) {
        throw DimensionError("layer_norm_rows: gain/bias length must match row width");
    }
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> means(r), istds(r);
    const double* px = x.data();
    const double* pg = gain.data();
    const double* pb = bias.data();
    double* po = out.data();
    for (int i = 0; i < r; ++i) {
        const double* row = px + static_cast<std::size_t>(i) * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += row[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= c;
        const double istd = 1.0 / std::sqrt(var + eps);
        means[i] = mean;
        istds[i] = istd;
        double* orow = po + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) orow[j] = (row[j] - mean) * istd * pg[j] + pb[j];
    }
    record_op(out, tracing(x) || tracing(gain) || tracing(bias),
              [x, gain, bias, r, c, means, istds](const Tensor& o) {
        const double* go = o.grad();
        const double* px2 = x.data();
        const double* pg2 = gain.data();
        for (int i = 0; i < r; ++i) {
            const std::size_t off = static_cast<std::size_t>(i) * c;
            const double mean = means[i], istd = istds[i];
            if (x.requires_grad()) {
                // dx through normalization: let xhat = (x-mean)*istd, dy = go*gain
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int j = 0; j < c; ++j) {
                    const double xhat = (px2[off + j] - mean) * istd;
                    const double dy = go[off + j] * pg2[j];
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
                double* gx = const_cast<Tensor&>(x).grad();
                for (int j = 0; j < c; ++j) {
                    const double xhat = (px2[off + j] - mean) * istd;
                    const double dy = go[off + j] * pg2[j];
                    gx[off + j] += istd * (dy - sum_dy / c - xhat * sum_dy_xhat / c);
                }
            }
            if (gain.requires_grad()) {
                double* gg = const_cast<Tensor&>(gain).grad();
                for (int j = 0; j < c; ++j) {
                    const double xhat = (px2[off + j] - mean) * istd;
                    gg[j] += go[off + j] * xhat;
                }
            }
            if (bias.requires_grad()) {
                double* gb = const_cast<Tensor&>(bias).grad();
                for (int j = 0; j < c; ++j) gb[j] += go[off + j];
            }
        }
    });
    return out;
}

Tensor lookup_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw DimensionError("lookup_rows: table must be rank 2");
    const int v = table.rows(), d = table.cols();
    for (int id : ids) {
        if (id < 0 || id >= v) {
            throw IndexError("lookup_rows: id " + std::to_string(id) + " out of range [0," +
                             std::to_string(v) + ")");
        }
    }
    const int t = static_cast<int>(ids.size());
    Tensor out = Tensor::zeros({t, d});
    const double* pt = table.data();
    double* po = out.data();
    for (int i = 0; i < t; ++i) {
        const double* row = pt + static_cast<std::size_t>(ids[i]) * d;
        std::copy(row, row + d, po + static_cast<std::size_t>(i) * d);
    }
    record_op(out, tracing(table), [table, ids, d](const Tensor& o) {
        const double* go = o.grad();
        double* gt = const_cast<Tensor&>(table).grad();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            double* grow = gt + static_cast<std::size_t>(ids[i]) * d;
            const double* orow = go + i * d;
            for (int j = 0; j < d; ++j) grow[j] += orow[j];
        }
    });
    return out;
}

Tensor slice_rows(const Tensor& x, int start, int count) {
    if (x.rank() != 2) throw DimensionError("slice_rows: expected rank 2");
    if (start < 0 || count < 0 || start + count > x.rows()) {
        throw DimensionError("slice_rows: range [" + std::to_string(start) + "," +
                             std::to_string(start + count) + ") exceeds " + x.shape_string());
    }
    const int c = x.cols();
    Tensor out = Tensor::zeros({count, c});
    std::copy(x.data() + static_cast<std::size_t>(start) * c,
              x.data() + static_cast<std::size_t>(start + count) * c, out.data());
    record_op(out, tracing(x), [x, start, count, c](const Tensor& o) {
        const double* go = o.grad();
        double* gx = const_cast<Tensor&>(x).grad();
        for (std::size_t i = 0; i < static_cast<std::size_t>(count) * c; ++i) {
            gx[static_cast<std::size_t>(start) * c + i] += go[i];
        }
    });
    return out;
}

Tensor slice_cols(const Tensor& x, int start, int count) {
    if (x.rank() != 2) throw DimensionError("slice_cols: expected rank 2");
    if (start < 0 || count < 0 || start + count > x.cols()) {
        throw DimensionError("slice_cols: range exceeds " + x.shape_string());
    }
    const int r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros({r, count});
    for (int i = 0; i < r; ++i) {
        std::copy(x.data() + static_cast<std::size_t>(i) * c + start,
                  x.data() + static_cast<std::size_t>(i) * c + start + count,
                  out.data() + static_cast<std::size_t>(i) * count);
    }
    record_op(out, tracing(x), [x, start, count, r, c](const Tensor& o) {
        const double* go = o.grad();
        double* gx = const_cast<Tensor&>(x).grad();
        for (int i = 0; i < r; ++i) {
            for (int j = 0; j < count; ++j) {
                gx[static_cast<std::size_t>(i) * c + start + j] +=
                    go[static_cast<std::size_t>(i) * count + j];
            }
        }
    });
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const int c = parts[0].cols();
    int total = 0;
    bool trace = false;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.cols() != c) {
            throw DimensionError("concat_rows: column mismatch at " + p.shape_string());
        }
        total += p.rows();
        trace = trace || tracing(p);
    }
    Tensor out = Tensor::zeros({total, c});
    int row = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data(), p.data() + p.numel(),
                  out.data() + static_cast<std::size_t>(row) * c);
        row += p.rows();
    }
    record_op(out, trace, [parts, c](const Tensor& o) {
        const double* go = o.grad();
        std::size_t off = 0;
        for (const Tensor& p : parts) {
            if (p.requires_grad()) {
                double* gp = const_cast<Tensor&>(p).grad();
                for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += go[off + i];
            }
            off += p.numel();
        }
        (void)c;
    });
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const int r = parts[0].rows();
    int total = 0;
    bool trace = false;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.rows() != r) {
            throw DimensionError("concat_cols: row mismatch at " + p.shape_string());
        }
        total += p.cols();
        trace = trace || tracing(p);
    }
    Tensor out = Tensor::zeros({r, total});
    int col = 0;
    for (const Tensor& p : parts) {
        const int pc = p.cols();
        for (int i = 0; i < r; ++i) {
            std::copy(p.data() + static_cast<std::size_t>(i) * pc,
                      p.data() + static_cast<std::size_t>(i) * pc + pc,
                      out.data() + static_cast<std::size_t>(i) * total + col);
        }
        col += pc;
    }
    record_op(out, trace, [parts, r, total](const Tensor& o) {
        const double* go = o.grad();
        int col = 0;
        for (const Tensor& p : parts) {
            const int pc = p.cols();
            if (p.requires_grad()) {
                double* gp = const_cast<Tensor&>(p).grad();
                for (int i = 0; i < r; ++i) {
                    for (int j = 0; j < pc; ++j) {
                        gp[static_cast<std::size_t>(i) * pc + j] +=
                            go[static_cast<std::size_t>(i) * total + col + j];
                    }
                }
            }
            col += pc;
        }
    });
    return out;
}

Tensor scale_rows(const Tensor& x, const Tensor& p) {
    if (x.rank() != 2 || p.rank() != 1 || p.numel() != static_cast<std::size_t>(x.rows())) {
        throw ContractError("scale_rows: scale vector length " + p.shape_string() +
                            " does not match rows of " + x.shape_string());
    }
    const int r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros(x.shape());
    for (int i = 0; i < r; ++i) {
        const double s = p.at(i);
        for (int j = 0; j < c; ++j) {
            out.at(static_cast<std::size_t>(i) * c + j) =
                x.at(static_cast<std::size_t>(i) * c + j) * s;
        }
    }
    record_op(out, tracing(x) || tracing(p), [x, p, r, c](const Tensor& o) {
        const double* go = o.grad();
        if (x.requires_grad()) {
            double* gx = const_cast<Tensor&>(x).grad();
            for (int i = 0; i < r; ++i) {
                const double s = p.at(i);
                for (int j = 0; j < c; ++j) {
                    gx[static_cast<std::size_t>(i) * c + j] +=
                        go[static_cast<std::size_t>(i) * c + j] * s;
                }
            }
        }
        if (p.requires_grad()) {
            double* gp = const_cast<Tensor&>(p).grad();
            const double* px = x.data();
            for (int i = 0; i < r; ++i) {
                double acc = 0.0;
                for (int j = 0; j < c; ++j) {
                    acc += go[static_cast<std::size_t>(i) * c + j] *
                           px[static_cast<std::size_t>(i) * c + j];
                }
                gp[i] += acc;
            }
        }
    });
    return out;
}

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) acc += x.at(i);
    Tensor out = Tensor::scalar(acc);
    record_op(out, tracing(x), [x](const Tensor& o) {
        const double g = o.grad()[0];
        double* gx = const_cast<Tensor&>(x).grad();
        for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
    return out;
}

Tensor mean_all(const Tensor& x) {
    if (x.numel() == 0) throw ContractError("mean_all: empty tensor");
    double acc = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) acc += x.at(i);
    const double inv = 1.0 / static_cast<double>(x.numel());
    Tensor out = Tensor::scalar(acc * inv);
    record_op(out, tracing(x), [x, inv](const Tensor& o) {
        const double g = o.grad()[0] * inv;
        double* gx = const_cast<Tensor&>(x).grad();
        for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
    return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2 || logits.rows() != static_cast<int>(targets.size())) {
        throw DimensionError("cross_entropy: logits " + logits.shape_string() + " need " +
                             std::to_string(targets.size()) + " rows");
    }
    const int t = logits.rows(), v = logits.cols();
    for (int id : targets) {
        if (id < 0 || id >= v) {
            throw IndexError("cross_entropy: target " + std::to_string(id) +
                             " outside vocabulary of size " + std::to_string(v));
        }
    }
    const double* pl = logits.data();
    double loss = 0.0;
    std::vector<double> lses(t);
    for (int i = 0; i < t; ++i) {
        const double* row = pl + static_cast<std::size_t>(i) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
        const double lse = mx + std::log(sum);
        lses[i] = lse;
        loss += lse - row[targets[i]];
    }
    loss /= t;
    Tensor out = Tensor::scalar(loss);
    record_op(out, tracing(logits), [logits, targets, t, v, lses](const Tensor& o) {
        const double g = o.grad()[0] / t;
        const double* pl2 = logits.data();
        double* gl = const_cast<Tensor&>(logits).grad();
        for (int i = 0; i < t; ++i) {
            const std::size_t off = static_cast<std::size_t>(i) * v;
            for (int j = 0; j < v; ++j) {
                const double sm = std::exp(pl2[off + j] - lses[i]);
                gl[off + j] += g * (sm - (j == targets[i] ? 1.0 : 0.0));
            }
        }
    });
    return out;
}

Tensor cross_entropy_smoothed(const Tensor& logits, const std::vector<int>& targets,
                              double eps) {
    if (eps < 0.0 || eps >= 1.0) throw DomainError("cross_entropy_smoothed: eps in [0,1)");
    if (logits.rank() != 2 || logits.rows() != static_cast<int>(targets.size())) {
        throw DimensionError("cross_entropy_smoothed: logits " + logits.shape_string() +
                             " need " + std::to_string(targets.size()) + " rows");
    }
    const int t = logits.rows(), v = logits.cols();
    for (int id : targets) {
        if (id < 0 || id >= v) {
            throw IndexError("cross_entropy_smoothed: target " + std::to_string(id) +
                             " outside vocabulary of size " + std::to_string(v));
        }
    }
    const double uniform = eps / v;
    const double* pl = logits.data();
    double loss = 0.0;
    std::vector<double> lses(t);
    for (int i = 0; i < t; ++i) {
        const double* row = pl + static_cast<std::size_t>(i) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
        const double lse = mx + std::log(sum);
        lses[i] = lse;
        // -sum_j q_j log p_j with q = (1-eps)*onehot + eps/V
        double acc = (1.0 - eps) * (lse - row[targets[i]]);
        for (int j = 0; j < v; ++j) acc += uniform * (lse - row[j]);
        loss += acc;
    }
    loss /= t;
    Tensor out = Tensor::scalar(loss);
    record_op(out, tracing(logits), [logits, targets, t, v, lses, eps, uniform](const Tensor& o) {
        const double g = o.grad()[0] / t;
        const double* pl2 = logits.data();
        double* gl = const_cast<Tensor&>(logits).grad();
        for (int i = 0; i < t; ++i) {
            const std::size_t off = static_cast<std::size_t>(i) * v;
            for (int j = 0; j < v; ++j) {
                const double sm = std::exp(pl2[off + j] - lses[i]);
                const double q = uniform + (j == targets[i] ? 1.0 - eps : 0.0);
                gl[off + j] += g * (sm - q);
            }
        }
    });
    return out;
}

}  // namespace mgcg
