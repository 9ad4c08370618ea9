#pragma once

#include <cstdint>
#include <span>

#include "kvd/autodiff.hpp"
#include "kvd/tensor.hpp"

namespace kvd {

// Floor added inside every log so exact zeros stay finite.
inline constexpr double kLogFloor = 1e-9;

// KL(p‖q) in nats over one categorical pair. Throws on NaN.
double kl_categorical(std::span<const float> p, std::span<const float> q);

// Per-row weighting of λ·KL(p‖q) + (1−λ)·KL(q‖p), with p = softmax(teacher)
// and q = softmax(student), averaged over rows with mask != 0 (all rows when
// the mask is empty). The teacher side is a constant: no gradient reaches it.
// Throws when no row is selected.
ad::Var mixture_loss(const Tensor& teacher_logits, ad::Var student_logits, float lambda,
                     std::span<const std::uint8_t> mask = {});
double mixture_loss_value(const Tensor& teacher_logits, const Tensor& student_logits, float lambda,
                          std::span<const std::uint8_t> mask = {});

// Reconstruction cross-entropy plus next-token cross-entropy (targets < 0 skipped).
ad::Var ae_lm_loss(ad::Var recon_logits, std::span<const std::int32_t> recon_targets,
                   ad::Var lm_logits, std::span<const std::int32_t> lm_targets);

}  // namespace kvd
