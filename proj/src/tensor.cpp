#include "exms/tensor.hpp"

#include <cmath>
#include <unordered_set>
#include <utility>

#include "exms/kernels.hpp"
#include "op_common.hpp"

namespace exms {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

void check_finite_array(const double* p, int64_t n, const char* what) {
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i])) {
      raise(Errc::InvalidValue,
            std::string(what) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

}  // namespace detail

struct Tensor::Impl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::shared_ptr<TapeNode> node;
};

static void validate_shape(const Shape& shape) {
  for (int64_t d : shape) {
    require(d >= 1, Errc::ShapeMismatch,
            "tensor dimensions must be >= 1, got " + shape_str(shape));
  }
}

Tensor::Tensor(Shape shape, bool requires_grad) {
  validate_shape(shape);
  impl_ = std::make_shared<Impl>();
  impl_->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  validate_shape(shape);
  require(static_cast<int64_t>(data.size()) == shape_numel(shape), Errc::ShapeMismatch,
          "data size " + std::to_string(data.size()) + " does not match shape " +
              shape_str(shape));
  detail::check_finite_array(data.data(), static_cast<int64_t>(data.size()), "tensor init");
  impl_ = std::make_shared<Impl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor({}, std::vector<double>{v}, requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(std::move(shape), requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)), v);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::randn(Shape shape, CounterRng& rng, double stddev, bool requires_grad) {
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (double& v : data) v = stddev * rng.next_normal();
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::uniform(Shape shape, CounterRng& rng, double lo, double hi,
                       bool requires_grad) {
  require(lo <= hi, Errc::InvalidValue, "uniform: lo > hi");
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (double& v : data) v = lo + (hi - lo) * rng.next_uniform();
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

#define EXMS_CHECK_DEFINED() \
  require(impl_ != nullptr, Errc::InvalidValue, "operation on undefined tensor")

const Shape& Tensor::shape() const {
  EXMS_CHECK_DEFINED();
  return impl_->shape;
}

int Tensor::rank() const {
  EXMS_CHECK_DEFINED();
  return static_cast<int>(impl_->shape.size());
}

int64_t Tensor::dim(int i) const {
  EXMS_CHECK_DEFINED();
  int r = rank();
  if (i < 0) i += r;
  require(i >= 0 && i < r, Errc::ShapeMismatch,
          "dim index " + std::to_string(i) + " out of range for rank " + std::to_string(r));
  return impl_->shape[static_cast<std::size_t>(i)];
}

int64_t Tensor::numel() const {
  EXMS_CHECK_DEFINED();
  return static_cast<int64_t>(impl_->data.size());
}

const double* Tensor::data() const {
  EXMS_CHECK_DEFINED();
  return impl_->data.data();
}

double* Tensor::data() {
  EXMS_CHECK_DEFINED();
  return impl_->data.data();
}

double Tensor::item() const {
  EXMS_CHECK_DEFINED();
  require(numel() == 1, Errc::ShapeMismatch,
          "item() requires a single-element tensor, shape is " + shape_str(impl_->shape));
  return impl_->data[0];
}

double Tensor::operator()(std::initializer_list<int64_t> idx) const {
  EXMS_CHECK_DEFINED();
  require(static_cast<int>(idx.size()) == rank(), Errc::ShapeMismatch,
          "index rank mismatch for shape " + shape_str(impl_->shape));
  int64_t off = 0;
  int i = 0;
  for (int64_t v : idx) {
    int64_t d = impl_->shape[static_cast<std::size_t>(i)];
    require(v >= 0 && v < d, Errc::ShapeMismatch, "index out of bounds");
    off = off * d + v;
    ++i;
  }
  return impl_->data[static_cast<std::size_t>(off)];
}

bool Tensor::requires_grad() const {
  EXMS_CHECK_DEFINED();
  return impl_->requires_grad;
}

void Tensor::set_requires_grad(bool value) {
  EXMS_CHECK_DEFINED();
  require(impl_->node == nullptr, Errc::InvalidValue,
          "set_requires_grad is only valid on leaf tensors");
  impl_->requires_grad = value;
}

Tensor Tensor::detach() const {
  EXMS_CHECK_DEFINED();
  return Tensor(impl_->shape, impl_->data, false);
}

const std::shared_ptr<TapeNode>& Tensor::node() const {
  EXMS_CHECK_DEFINED();
  return impl_->node;
}

const void* Tensor::id() const {
  EXMS_CHECK_DEFINED();
  return static_cast<const void*>(impl_.get());
}

// --- grad mode ---------------------------------------------------------------

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor make_op_output(Shape shape, std::vector<double> data, OpKind op,
                      std::vector<Tensor> inputs, std::vector<Tensor> saved,
                      std::vector<double> saved_scalars, std::vector<int64_t> saved_ints,
                      BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data));
  bool track = grad_enabled();
  if (track) {
    bool any = false;
    for (const Tensor& t : inputs) {
      if (t.defined() && t.requires_grad()) {
        any = true;
        break;
      }
    }
    track = any;
  }
  if (track) {
    require(backward != nullptr, Errc::InvalidValue, "op without a backward rule");
    auto node = std::make_shared<TapeNode>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->saved = std::move(saved);
    node->saved_scalars = std::move(saved_scalars);
    node->saved_ints = std::move(saved_ints);
    node->backward = backward;
    out.impl_->node = std::move(node);
    out.impl_->requires_grad = true;
  }
  return out;
}

// --- reverse-mode engine -------------------------------------------------------

Tensor GradMap::at(const Tensor& param) const {
  auto it = grads_.find(param.id());
  if (it != grads_.end()) return it->second;
  return Tensor(param.shape());  // parameter did not influence the loss
}

bool GradMap::contains(const Tensor& param) const {
  return grads_.find(param.id()) != grads_.end();
}

GradMap grad(const Tensor& loss) {
  require(loss.defined(), Errc::InvalidValue, "grad of undefined tensor");
  require(loss.numel() == 1, Errc::NonScalarLoss,
          "grad requires a scalar loss, shape is " + shape_str(loss.shape()));
  NoGradGuard frozen;  // backward rules must not extend the tape
  GradMap result;
  if (!loss.requires_grad()) return result;

  // Post-order DFS so every tensor appears after all tensors it depends on.
  std::vector<Tensor> order;
  std::unordered_set<const void*> seen;
  struct Frame {
    Tensor t;
    std::size_t next = 0;
  };
  std::vector<Frame> stack;
  if (loss.node()) {
    stack.push_back({loss, 0});
    seen.insert(loss.id());
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    const std::shared_ptr<TapeNode>& node = f.t.node();
    if (f.next == node->inputs.size()) {
      order.push_back(f.t);
      stack.pop_back();
      continue;
    }
    Tensor in = node->inputs[f.next++];
    if (in.defined() && in.node() && !seen.count(in.id())) {
      seen.insert(in.id());
      stack.push_back({std::move(in), 0});
    }
  }

  std::unordered_map<const void*, Tensor> acc;
  std::vector<Tensor> leaves;
  acc.emplace(loss.id(), Tensor::full(loss.shape(), 1.0));

  auto accumulate = [&](const Tensor& target, const Tensor& g) {
    require(g.shape() == target.shape(), Errc::ShapeMismatch,
            "backward produced gradient of shape " + shape_str(g.shape()) +
                " for input of shape " + shape_str(target.shape()));
    auto it = acc.find(target.id());
    if (it == acc.end()) {
      acc.emplace(target.id(), g);
      return;
    }
    Tensor& slot = it->second;
    kernels::add(slot.data(), g.data(), slot.data(), static_cast<std::size_t>(slot.numel()));
  };

  if (!loss.node() && loss.requires_grad()) leaves.push_back(loss);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Tensor& t = *it;
    auto gi = acc.find(t.id());
    if (gi == acc.end()) continue;
    Tensor out_grad = gi->second;
    const TapeNode& node = *t.node();
    std::vector<Tensor> input_grads = node.backward(node, out_grad);
    require(input_grads.size() == node.inputs.size(), Errc::InvalidValue,
            "backward rule returned wrong gradient count");
    for (std::size_t i = 0; i < input_grads.size(); ++i) {
      const Tensor& in = node.inputs[i];
      if (!in.defined() || !in.requires_grad() || !input_grads[i].defined()) continue;
      if (!in.node() && !acc.count(in.id())) leaves.push_back(in);
      accumulate(in, input_grads[i]);
    }
  }

  for (const Tensor& leaf : leaves) {
    auto it = acc.find(leaf.id());
    if (it != acc.end()) result.grads_.emplace(leaf.id(), it->second);
  }
  return result;
}

std::vector<Tensor> grad(const Tensor& loss, const std::vector<Tensor>& params) {
  GradMap gm = grad(loss);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Tensor& p : params) out.push_back(gm.at(p));
  return out;
}

std::vector<Tensor> finite_diff_grad(const std::function<double(const std::vector<Tensor>&)>& f,
                                     const std::vector<Tensor>& params, double h) {
  require(h > 0.0, Errc::InvalidValue, "finite_diff_grad: step must be positive");
  NoGradGuard frozen;
  std::vector<Tensor> ps = params;  // shared storage; every entry is restored below
  std::vector<Tensor> out;
  out.reserve(ps.size());
  for (Tensor& p : ps) {
    require(p.defined(), Errc::InvalidValue, "finite_diff_grad: undefined parameter");
    Tensor g(p.shape());
    double* pd = p.data();
    double* gd = g.data();
    const int64_t n = p.numel();
    for (int64_t i = 0; i < n; ++i) {
      const double orig = pd[i];
      pd[i] = orig + h;
      const double fp = f(ps);
      pd[i] = orig - h;
      const double fm = f(ps);
      pd[i] = orig;
      require(std::isfinite(fp) && std::isfinite(fm), Errc::InvalidValue,
              "finite_diff_grad: objective returned a non-finite value");
      gd[i] = (fp - fm) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace exms
