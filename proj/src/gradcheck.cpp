#include "reclab/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "reclab/errors.hpp"

namespace reclab {

namespace {

Real eval_loss(const LossBuilder& f, const std::vector<Tensor>& params) {
  Graph g;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(g.constant(p));
  return g.value(f(g, leaves)).item();
}

}  // namespace

Real finite_diff_check(const LossBuilder& f, std::vector<Tensor> params, Real h) {
  if (!(h > 0)) throw InputError("finite_diff_check: step must be positive");
  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> leaves;
    for (const auto& p : params) leaves.push_back(g.leaf(p));
    const Gradients grads = g.backward(f(g, leaves));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor* gi = grads.find(leaves[i]);
      analytic.push_back(gi ? *gi : Tensor(params[i].shape()));
    }
  }
  Real worst = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      const Real saved = params[i][j];
      params[i][j] = saved + h;
      const Real up = eval_loss(f, params);
      params[i][j] = saved - h;
      const Real down = eval_loss(f, params);
      params[i][j] = saved;
      const Real numeric = (up - down) / (Real(2) * h);
      const Real a = analytic[i][j];
      worst = std::max(worst, std::fabs(a - numeric) / (std::fabs(a) + std::fabs(numeric) + Real(1e-12)));
    }
  }
  return worst;
}

}  // namespace reclab
