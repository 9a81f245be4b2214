// Dense tensors and a reverse-mode autodiff tape.
//
// Values are double precision throughout; the tape records one node per
// operation in topological order, so a single reverse sweep fills the
// gradients of every parameter reachable from a scalar loss.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace kws {

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double v);
  static Tensor scalar(double v);

  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  // Rank-2 accessors; a rank-1 tensor counts as a single row.
  int rows() const;
  int cols() const;
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& at(std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  double at(std::int64_t i) const { return data_[static_cast<size_t>(i)]; }
  double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols() + c]; }

  const std::vector<int>& shape() const { return shape_; }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  std::string shape_str() const;

  // Optional gradient accumulator used for persistent parameters.
  bool has_grad() const { return !grad_.empty(); }
  std::vector<double>& grad();        // allocates zero-filled on first use
  const std::vector<double>& grad() const { return grad_; }
  void zero_grad();
  void drop_grad() { grad_.clear(); }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
};

std::string shape_str(std::span<const int> shape);

// Raw matrix kernels (row-major). `acc` accumulates into C instead of
// overwriting.
void mm_nn(const double* a, const double* b, double* c, int m, int k, int p, bool acc);
void mm_nt(const double* a, const double* b, double* c, int m, int k, int p, bool acc);
void mm_tn(const double* a, const double* b, double* c, int m, int k, int p, bool acc);

double log_sum_exp(double a, double b);

class Tape {
 public:
  using Id = int;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves. `param` keeps a pointer to the external tensor so its gradient
  // can be exported after backward; the tensor must outlive the tape.
  Id constant(Tensor v);
  Id param(const Tensor& p);

  const Tensor& val(Id id) const { return nodes_[static_cast<size_t>(id)].value; }
  const std::vector<double>& grad(Id id) const;

  // Elementwise / structural ops.
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id scale(Id a, double s);
  Id add_row_bias(Id x, Id bias);
  Id sigmoid(Id a);
  Id swish(Id a);
  Id glu_cols(Id a);
  Id reshape(Id a, std::vector<int> shape);
  Id slice_rows(Id a, int r0, int r1);
  Id slice_cols(Id a, int c0, int c1);
  Id concat_cols(std::span<const Id> parts);
  Id gather_rows(Id table, std::vector<int> ids);
  Id sum(Id a);
  Id mean(Id a);
  // total = sum_i coeff[i] * scalars[i]
  Id weighted_sum(std::span<const Id> scalars, std::span<const double> coeff);

  // Matrix ops.
  Id matmul(Id a, Id b);
  Id matmul_nt(Id a, Id b);  // A * B^T
  Id softmax_rows(Id a);
  Id layer_norm_rows(Id x, Id gamma, Id beta, double eps);
  Id depthwise_conv1d_same(Id x, Id w, Id b);

  // Losses.
  Id cross_entropy_logits(Id logits, int label);
  // Forward-backward CTC over the blank-interleaved target. Requires
  // 2*len(target)+1 <= frames; shorter audio is an infeasible alignment.
  Id ctc_loss(Id logits, const std::vector<int>& target, int blank);

  // Reverse sweep from a scalar loss node.
  void backward(Id loss);

  // Parameters in registration order with their accumulated gradients.
  struct ParamGrad {
    const Tensor* param;
    const std::vector<double>* grad;
  };
  std::vector<ParamGrad> param_grads() const;

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool needs_grad = false;
    std::function<void(Tape&)> back;
    const Tensor* param = nullptr;
  };

  Id push(Tensor value, bool needs_grad);
  bool needs(Id id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
  std::vector<double>& grad_mut(Id id) { return nodes_[static_cast<size_t>(id)].grad; }
  void set_back(Id id, std::function<void(Tape&)> fn);

  std::vector<Node> nodes_;
  std::vector<Id> param_ids_;
};

// Standalone CTC value (log-space DP); returns +inf when no alignment of
// `target` fits in the given frame count. Used by tests and diagnostics.
double ctc_forward_value(const Tensor& logits, const std::vector<int>& target, int blank);

// Exhaustive-path CTC oracle; rejects instances with more than `max_paths`
// frame-label paths. Never used in training.
double ctc_brute_force(const Tensor& logits, const std::vector<int>& target, int blank,
                       std::int64_t max_paths = 1000000);

}  // namespace kws
