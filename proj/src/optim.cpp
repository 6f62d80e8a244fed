// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/optim.hpp"

#include <cmath>
#include <numbers>

namespace cropr {

template <typename Scalar>
AdamW<Scalar>::AdamW(const ParameterStore<Scalar>& store, AdamWConfig config) : config_(config) {
  for (const auto& [name, t] : store.entries()) {
    params_.push_back(t);
    const bool no_decay = t.rank() < 2 || name.find("pos_embed") != std::string::npos ||
                          name.find("cls_token") != std::string::npos;
    decay_.push_back(!no_decay);
    m_.push_back(Vec<double>::Zero(t.numel()));
    v_.push_back(Vec<double>::Zero(t.numel()));
  }
}

template <typename Scalar>
void AdamW<Scalar>::step(double lr) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    const Vec<double> g = p.node()->grad.template cast<double>();
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
    Vec<double> w = p.value().template cast<double>();
    if (decay_[i]) w *= 1.0 - lr * config_.weight_decay;
    w.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.eps);
    p.mutable_value() = w.template cast<Scalar>();
  }
}

template <typename Scalar>
double clip_grad_norm(const ParameterStore<Scalar>& store, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, t] : store.entries()) {
    if (t.has_grad()) sq += t.node()->grad.template cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto factor = static_cast<Scalar>(max_norm / (norm + 1e-12));
    for (const auto& [_, t] : store.entries()) {
      if (t.has_grad()) t.node()->grad *= factor;
    }
  }
  return norm;
}

double cosine_lr(double base_lr, double min_lr, Index step, Index warmup_steps, Index total_steps) {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const Index span = std::max<Index>(total_steps - warmup_steps, 1);
  const double t = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

template class AdamW<float>;
template class AdamW<double>;
template double clip_grad_norm(const ParameterStore<float>&, double);
template double clip_grad_norm(const ParameterStore<double>&, double);

}  // namespace cropr
