#include "lcbm/losses.hpp"

#include <algorithm>
#include <numeric>

#include "lcbm/errors.hpp"

namespace lcbm {

ag::Var classification_loss(const ag::Var& class_logits, std::size_t label) {
  return ag::cross_entropy(class_logits, label);
}

ag::Var auxiliary_loss(const ag::Var& aux_logits, std::size_t label) {
  return ag::cross_entropy(aux_logits, label);
}

MaskedTarget build_masked_target(const Tensor& M0, const Tensor& M, const ag::IndexMatrix& idx,
                                 std::size_t k2, double mask_fill) {
  if (M0.rank() != 2 || M.rank() != 2 || M.rows() != M0.rows() || idx.size() != M0.rows())
    throw PreconditionError("build_masked_target: M0, M and idx disagree on HW");
  const std::size_t HW = M0.rows(), K = M0.cols(), K1 = M.cols();
  if (k2 < 1 || k2 > K1)
    throw PreconditionError("K2 = " + std::to_string(k2) + " must be in [1, K1 = " +
                            std::to_string(K1) + "]");
  MaskedTarget t{Tensor({HW, K}, mask_fill), std::vector<bool>(HW * K, false)};
  std::vector<std::size_t> pos(K1);
  for (std::size_t hw = 0; hw < HW; ++hw) {
    if (idx[hw].size() != K1) throw PreconditionError("build_masked_target: idx row width != K1");
    std::iota(pos.begin(), pos.end(), 0);
    auto row = M.row(hw);
    std::stable_sort(pos.begin(), pos.end(),
                     [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    for (std::size_t j = 0; j < k2; ++j) {
      const std::size_t k = idx[hw][pos[j]];
      if (k >= K) throw PreconditionError("build_masked_target: concept id out of range");
      t.values(hw, k) = M0(hw, k);
      t.kept[hw * K + k] = true;
    }
  }
  return t;
}

Influence influence_values(const ag::Var& F, const ag::Var& concept_logits) {
  if (!F.defined() || !concept_logits.defined())
    throw PreconditionError("influence_values: missing gradient graph");
  const Tensor& f = F.value();
  if (f.rank() != 2) throw PreconditionError("influence_values: F must be HW x D");
  const std::size_t HW = f.rows(), D = f.cols(), K = concept_logits.value().size();
  Influence out{{}, Tensor({K, D})};
  Tensor seed(concept_logits.value().shape(), 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    seed[k] = 1.0;
    const Tensor g = ag::grad(concept_logits, {F}, &seed)[0];
    seed[k] = 0.0;
    for (std::size_t hw = 0; hw < HW; ++hw)
      for (std::size_t d = 0; d < D; ++d) out.mean_gradient(k, d) += g(hw, d);
    for (std::size_t d = 0; d < D; ++d) out.mean_gradient(k, d) /= static_cast<double>(HW);
  }
  out.values = ag::matmul(ag::Var::constant(out.mean_gradient), ag::transpose(F));
  return out;
}

ag::Var locality_loss(const ag::Var& V, const Tensor& target, double log_clamp) {
  return ag::softmax_kl(V, target, log_clamp);
}

ag::Var total_loss(const ag::Var& lc, const ag::Var& ll, const ag::Var& la, double alpha,
                   double beta) {
  for (const auto* v : {&lc, &ll, &la})
    if (!v->value().all_finite()) throw NumericError("total_loss: non-finite loss component");
  return ag::add(ag::add(lc, ag::scale(ll, alpha)), ag::scale(la, beta));
}

LossTerms compute_losses(const ForwardOutputs& out, std::size_t label, const ModelConfig& cfg) {
  LossTerms t;
  t.classification = classification_loss(out.class_logits, label);
  t.auxiliary = auxiliary_loss(out.aux_logits, label);
  const auto target = build_masked_target(out.similarity.value(), out.gathered.value(), out.gated,
                                          cfg.k2, cfg.mask_fill);
  const auto infl = influence_values(out.features, out.concept_logits);
  t.locality = locality_loss(infl.values, target.values, cfg.log_clamp);
  t.total = total_loss(t.classification, t.locality, t.auxiliary, cfg.alpha, cfg.beta);
  return t;
}

}  // namespace lcbm
