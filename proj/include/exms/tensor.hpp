#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "exms/errors.hpp"
#include "exms/rng.hpp"

namespace exms {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;
struct TapeNode;

using BackwardFn = std::vector<Tensor> (*)(const TapeNode&, const Tensor& out_grad);

enum class OpKind : uint8_t {
  Add, Sub, Mul, AddScalar, MulScalar, Matmul, Transpose, Reshape,
  Exp, Log, Softplus, Silu, Sum, Mean, SoftmaxLastDim, RmsNorm,
  MaskedCrossEntropy, GatherLogProbs, Embedding, OverwriteRows,
  ConcatLastDim, SliceRows, SliceLastDim, Swap01, Rope1d, Rope2d, Attention,
};

// One reverse-mode tape entry. `inputs` are the parent tensors (the graph is
// a DAG of shared pointers), `saved`/`saved_scalars`/`saved_ints` cache what
// the backward rule needs. `backward` maps the output gradient to one
// gradient per input (undefined Tensor for non-differentiable inputs).
struct TapeNode {
  OpKind op;
  std::vector<Tensor> inputs;
  std::vector<Tensor> saved;
  std::vector<double> saved_scalars;
  std::vector<int64_t> saved_ints;
  BackwardFn backward = nullptr;
};

// Dense row-major float64 tensor. Rank 0 (shape {}) holds a single scalar.
// Every public operation that succeeds leaves only finite values behind.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor randn(Shape shape, CounterRng& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor uniform(Shape shape, CounterRng& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int64_t dim(int i) const;  // negative indices count from the back
  int64_t numel() const;
  const double* data() const;
  double* data();
  double item() const;
  double operator()(std::initializer_list<int64_t> idx) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);  // leaf tensors only
  Tensor detach() const;               // value copy, no graph
  const std::shared_ptr<TapeNode>& node() const;
  const void* id() const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;

  friend Tensor make_op_output(Shape, std::vector<double>, OpKind, std::vector<Tensor>,
                               std::vector<Tensor>, std::vector<double>, std::vector<int64_t>,
                               BackwardFn);
};

// Internal: construct an op result and register it on the tape when gradients
// are enabled and any input requires them. Used by every tape op (numcore and
// the layer ops alike).
Tensor make_op_output(Shape shape, std::vector<double> data, OpKind op,
                      std::vector<Tensor> inputs, std::vector<Tensor> saved = {},
                      std::vector<double> saved_scalars = {},
                      std::vector<int64_t> saved_ints = {}, BackwardFn backward = nullptr);

bool grad_enabled() noexcept;

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// --- elementwise / linear algebra ------------------------------------------
// Binary elementwise ops broadcast `b` over leading dimensions of `a` when
// b.shape is a trailing suffix of a.shape (the only supported broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);  // [m x k] * [k x n]
Tensor transpose(const Tensor& a);                // rank 2
Tensor reshape(const Tensor& a, Shape shape);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softplus(const Tensor& a);  // log(1 + e^x), stable
Tensor silu(const Tensor& a);      // x * sigmoid(x)
Tensor sum(const Tensor& a);       // -> rank 0
Tensor mean(const Tensor& a);      // -> rank 0

// Rows over the last dimension sum to 1; max-subtracted for stability.
Tensor softmax_lastdim(const Tensor& x);
// Per-row x / sqrt(mean(x^2) + eps), then elementwise gain over the last dim.
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

// Mean negative log-likelihood of targets[t] under logits rows where
// mask[t] != 0. Throws AllMasked when no row is selected.
Tensor masked_cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets,
                            const std::vector<uint8_t>& mask);
// log softmax(logits[t])[targets[t]] for t in [begin, end) -> [end-begin].
Tensor gather_logprobs(const Tensor& logits, const std::vector<int32_t>& targets,
                       int64_t begin, int64_t end);
Tensor embedding(const Tensor& table, const std::vector<int32_t>& ids);
// Copy of `base` with base[row_idx[m], :] = rows[m, :]; indices distinct.
Tensor overwrite_rows(const Tensor& base, const std::vector<int64_t>& row_idx,
                      const Tensor& rows);
Tensor concat_lastdim(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& a, int64_t begin, int64_t count);
Tensor slice_lastdim(const Tensor& a, int64_t begin, int64_t count);
Tensor swap01(const Tensor& a);  // rank 3: [a,b,c] -> [b,a,c]

// --- reverse-mode engine -----------------------------------------------------
class GradMap {
 public:
  // Gradient of the loss wrt `param`; zero tensor when the parameter did not
  // participate in the loss.
  Tensor at(const Tensor& param) const;
  bool contains(const Tensor& param) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend GradMap grad(const Tensor& loss);
  std::unordered_map<const void*, Tensor> grads_;
};

// Reverse accumulation from a scalar loss over the tape. Throws NonScalarLoss.
GradMap grad(const Tensor& loss);
std::vector<Tensor> grad(const Tensor& loss, const std::vector<Tensor>& params);

// Central finite differences (f(p+h*e) - f(p-h*e)) / 2h per coordinate; the
// gradient oracle used by the verification suites.
std::vector<Tensor> finite_diff_grad(const std::function<double(const std::vector<Tensor>&)>& f,
                                     const std::vector<Tensor>& params, double h);

}  // namespace exms
