#pragma once

#include <vector>

#include "lcbm/autograd.hpp"
#include "lcbm/model.hpp"
#include "lcbm/tensor.hpp"

namespace lcbm {

ag::Var classification_loss(const ag::Var& class_logits, std::size_t label);
ag::Var auxiliary_loss(const ag::Var& aux_logits, std::size_t label);

struct MaskedTarget {
  Tensor values;            // HW x K
  std::vector<bool> kept;   // HW x K, row-major
  bool is_kept(std::size_t hw, std::size_t k) const { return kept[hw * values.cols() + k]; }
};

// Per patch, the K2 gated positions with the largest M (ties toward the
// smaller position) keep their M0 value at their concept id; every other
// concept gets mask_fill.
MaskedTarget build_masked_target(const Tensor& M0, const Tensor& M, const ag::IndexMatrix& idx,
                                 std::size_t k2, double mask_fill);

struct Influence {
  ag::Var values;       // V, K x HW; differentiable in F only
  Tensor mean_gradient; // the frozen factor, K x D
};

// V[k,hw] = sum_d F[hw,d] * gbar[k,d] where gbar is the HW-average of
// d l_c[k] / dF, evaluated once and held constant.
Influence influence_values(const ag::Var& F, const ag::Var& concept_logits);

// sum_k KL(softmax_HW V[k,:] || softmax_HW target[:,k]); target is constant.
ag::Var locality_loss(const ag::Var& V, const Tensor& target, double log_clamp = 1e-12);

ag::Var total_loss(const ag::Var& lc, const ag::Var& ll, const ag::Var& la, double alpha,
                   double beta);

struct LossTerms {
  ag::Var classification, locality, auxiliary, total;
};

// All three terms for one forward pass with label y.
LossTerms compute_losses(const ForwardOutputs& out, std::size_t label, const ModelConfig& cfg);

}  // namespace lcbm
