#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mgcg/errors.hpp"
#include "mgcg/rng.hpp"

namespace mgcg {

// Dense row-major tensor of 64-bit floats. Copies are shallow (shared storage);
// tensors are treated as immutable once produced by an operation. Ops record a
// backward rule on the active GradTape whenever any input requires grad.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor from_data(std::vector<int> shape, std::vector<double> values);
    static Tensor scalar(double value);
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0);

    bool defined() const { return static_cast<bool>(data_); }
    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::size_t numel() const { return data_ ? data_->size() : 0; }

    // Rank-2 accessors; rank-1 tensors are treated as a single row.
    int rows() const { return rank() == 2 ? shape_[0] : 1; }
    int cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1); }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    double& at(std::size_t i) { return (*data_)[i]; }
    double at(std::size_t i) const { return (*data_)[i]; }
    double item() const;

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool flag);
    bool has_grad() const { return static_cast<bool>(grad_); }
    double* grad() { return grad_->data(); }
    const double* grad() const { return grad_->data(); }
    std::vector<double> grad_vector() const;
    void zero_grad();
    void ensure_grad();

    // Deep copy of the values; new storage, no grad, no graph.
    Tensor clone_detached() const;

    std::string shape_string() const;
    bool finite() const;

private:
    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> data_;
    std::shared_ptr<std::vector<double>> grad_;
    bool requires_grad_ = false;
};

// Reverse-mode tape. Construction pushes the tape as the thread's active tape;
// destruction pops it. Nodes are appended in execution order, so reverse
// iteration is a valid topological order for the backward sweep. backward()
// may run once; the tape is consumed afterwards.
class GradTape {
public:
    GradTape();
    ~GradTape();
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    void backward(const Tensor& loss);
    bool consumed() const { return consumed_; }
    std::size_t size() const { return nodes_.size(); }

    static GradTape* active();
    void record(const Tensor& out, std::function<void(const Tensor& out)> pull);

private:
    struct Node {
        Tensor out;
        std::function<void(const Tensor& out)> pull;
    };
    std::vector<Node> nodes_;
    bool consumed_ = false;
    GradTape* prev_ = nullptr;
};

// ---- operations -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);           // [m,k]x[k,n]
Tensor matmul_transb(const Tensor& a, const Tensor& b);    // [m,k]x[n,k]^T
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softmax_rows(const Tensor& x);
Tensor causal_mask(const Tensor& scores);                  // square rank-2
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);
Tensor lookup_rows(const Tensor& table, const std::vector<int>& ids);
Tensor slice_rows(const Tensor& x, int start, int count);
Tensor slice_cols(const Tensor& x, int start, int count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor scale_rows(const Tensor& x, const Tensor& p);       // row i scaled by p[i]
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// Mean over rows of -log softmax(logits)[target]. logits is [T,V]; one target
// token per row.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);

// Cross-entropy against smoothed targets q = (1-eps)*onehot + eps/V. Caps the
// optimal logit margin at ln((1-eps)(V-1)/eps); used by the trainer.
Tensor cross_entropy_smoothed(const Tensor& logits, const std::vector<int>& targets,
                              double eps);

}  // namespace mgcg
