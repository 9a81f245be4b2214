#include "kws/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace kws {

namespace {

double eval_scalar(const GraphFn& f) {
  Tape tape;
  Tape::Id loss = f(tape);
  const Tensor& v = tape.val(loss);
  if (v.numel() != 1) {
    throw std::invalid_argument("grad_check: graph output must be scalar, got " + v.shape_str());
  }
  return v.at(0);
}

}  // namespace

double grad_check(const GraphFn& f, std::span<Tensor* const> params, double eps) {
  std::vector<std::vector<double>> analytic(params.size());
  {
    Tape tape;
    Tape::Id loss = f(tape);
    const Tensor& v = tape.val(loss);
    if (v.numel() != 1) {
      throw std::invalid_argument("grad_check: graph output must be scalar, got " + v.shape_str());
    }
    tape.backward(loss);
    for (size_t pi = 0; pi < params.size(); ++pi) {
      analytic[pi].assign(static_cast<size_t>(params[pi]->numel()), 0.0);
    }
    for (const auto& pg : tape.param_grads()) {
      for (size_t pi = 0; pi < params.size(); ++pi) {
        if (pg.param == params[pi]) {
          for (size_t i = 0; i < pg.grad->size(); ++i) analytic[pi][i] += (*pg.grad)[i];
        }
      }
    }
  }

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      const double saved = p.at(i);
      p.at(i) = saved + eps;
      const double up = eval_scalar(f);
      p.at(i) = saved - eps;
      const double dn = eval_scalar(f);
      p.at(i) = saved;
      const double numeric = (up - dn) / (2.0 * eps);
      const double err = std::abs(analytic[pi][static_cast<size_t>(i)] - numeric) /
                         std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace kws
