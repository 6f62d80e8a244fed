// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/nn.hpp"

#include <cmath>

namespace cropr {

template <typename Scalar>
Tensor<Scalar> ParameterStore<Scalar>::add(const std::string& name, Tensor<Scalar> tensor) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  tensor.set_requires_grad(true);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, tensor);
  return tensor;
}

template <typename Scalar>
const Tensor<Scalar>& ParameterStore<Scalar>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("missing parameter '" + name + "'");
  return entries_[it->second].second;
}

template <typename Scalar>
Index ParameterStore<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

template <typename Scalar>
Index ParameterStore<Scalar>::parameter_count(const std::string& prefix) const {
  Index n = 0;
  for (const auto& [name, t] : entries_) {
    if (name.rfind(prefix, 0) == 0) n += t.numel();
  }
  return n;
}

template <typename Scalar>
void ParameterStore<Scalar>::zero_grad() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

template <typename Scalar>
Tensor<Scalar> trunc_normal(Shape shape, double std, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec<Scalar> v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) {
    double z = normal(rng);
    while (std::abs(z) > 2.0) z = normal(rng);
    v[i] = static_cast<Scalar>(z * std);
  }
  return Tensor<Scalar>::from(std::move(shape), std::move(v));
}

template <typename Scalar>
LayerNormParams<Scalar> make_layer_norm(ParameterStore<Scalar>& store, const std::string& prefix, Index width) {
  return {store.add(prefix + ".weight", Tensor<Scalar>::full({width}, Scalar(1))),
          store.add(prefix + ".bias", Tensor<Scalar>::zeros({width}))};
}

template <typename Scalar>
LinearParams<Scalar> make_linear(ParameterStore<Scalar>& store, const std::string& prefix, Index in, Index out,
                                 Rng& rng, bool zero_weight) {
  auto w = zero_weight ? Tensor<Scalar>::zeros({in, out}) : trunc_normal<Scalar>({in, out}, 0.02, rng);
  return {store.add(prefix + ".weight", w), store.add(prefix + ".bias", Tensor<Scalar>::zeros({out}))};
}

template <typename Scalar>
MlpParams<Scalar> make_mlp(ParameterStore<Scalar>& store, const std::string& prefix, Index width, Index hidden,
                           Rng& rng) {
  return {make_linear(store, prefix + ".fc1", width, hidden, rng),
          make_linear(store, prefix + ".fc2", hidden, width, rng)};
}

template <typename Scalar>
AttentionParams<Scalar> make_attention(ParameterStore<Scalar>& store, const std::string& prefix, Index width,
                                       Index heads, Rng& rng) {
  if (heads <= 0 || width % heads != 0) throw ConfigError("attention width must be divisible by heads");
  AttentionParams<Scalar> p;
  p.query = make_linear(store, prefix + ".query", width, width, rng);
  p.key = make_linear(store, prefix + ".key", width, width, rng);
  p.value = make_linear(store, prefix + ".value", width, width, rng);
  p.out = make_linear(store, prefix + ".out", width, width, rng);
  p.heads = heads;
  return p;
}

template <typename Scalar>
BlockParams<Scalar> make_block(ParameterStore<Scalar>& store, const std::string& prefix, Index width, Index heads,
                               Index mlp_hidden, Rng& rng) {
  BlockParams<Scalar> p;
  p.norm1 = make_layer_norm(store, prefix + ".norm1", width);
  p.attn = make_attention(store, prefix + ".attn", width, heads, rng);
  p.norm2 = make_layer_norm(store, prefix + ".norm2", width);
  p.mlp = make_mlp(store, prefix + ".mlp", width, mlp_hidden, rng);
  return p;
}

template <typename Scalar>
LayerNormParams<Scalar> bind_layer_norm(const ParameterStore<Scalar>& store, const std::string& prefix) {
  return {store.get(prefix + ".weight"), store.get(prefix + ".bias")};
}

template <typename Scalar>
LinearParams<Scalar> bind_linear(const ParameterStore<Scalar>& store, const std::string& prefix) {
  return {store.get(prefix + ".weight"), store.get(prefix + ".bias")};
}

template <typename Scalar>
MlpParams<Scalar> bind_mlp(const ParameterStore<Scalar>& store, const std::string& prefix) {
  return {bind_linear(store, prefix + ".fc1"), bind_linear(store, prefix + ".fc2")};
}

template <typename Scalar>
AttentionParams<Scalar> bind_attention(const ParameterStore<Scalar>& store, const std::string& prefix, Index heads) {
  AttentionParams<Scalar> p;
  p.query = bind_linear(store, prefix + ".query");
  p.key = bind_linear(store, prefix + ".key");
  p.value = bind_linear(store, prefix + ".value");
  p.out = bind_linear(store, prefix + ".out");
  p.heads = heads;
  return p;
}

template <typename Scalar>
BlockParams<Scalar> bind_block(const ParameterStore<Scalar>& store, const std::string& prefix, Index heads) {
  BlockParams<Scalar> p;
  p.norm1 = bind_layer_norm(store, prefix + ".norm1");
  p.attn = bind_attention(store, prefix + ".attn", heads);
  p.norm2 = bind_layer_norm(store, prefix + ".norm2");
  p.mlp = bind_mlp(store, prefix + ".mlp");
  return p;
}

template <typename Scalar>
Tensor<Scalar> attention(const Tensor<Scalar>& queries, const Tensor<Scalar>& context,
                         const AttentionParams<Scalar>& p, AttentionCapture<Scalar>* capture) {
  if (queries.rank() != 3 || context.rank() != 3 || queries.dim(0) != context.dim(0)) {
    throw ShapeError("attention: expected [B,Mq,D] queries and [B,Mk,D] context");
  }
  const Index B = queries.dim(0), Mq = queries.dim(1), Mk = context.dim(1);
  const Index H = p.heads;
  const Index dh = queries.dim(2) / H;
  auto q = split_heads(apply(queries, p.query), H);
  auto k = split_heads(apply(context, p.key), H);
  auto v = split_heads(apply(context, p.value), H);
  auto logits = scale(bmm(q, k, /*transpose_b=*/true), static_cast<Scalar>(1.0 / std::sqrt(double(dh))));
  auto probs = softmax(logits, -1);
  if (capture) {
    capture->probs.assign(static_cast<std::size_t>(B), RowMat<Scalar>::Zero(Mq, Mk));
    const Scalar* pv = probs.value().data();
    for (Index b = 0; b < B; ++b) {
      for (Index h = 0; h < H; ++h) {
        capture->probs[static_cast<std::size_t>(b)] +=
            Eigen::Map<const RowMat<Scalar>>(pv + (b * H + h) * Mq * Mk, Mq, Mk);
      }
      capture->probs[static_cast<std::size_t>(b)] /= static_cast<Scalar>(H);
    }
  }
  return apply(merge_heads(bmm(probs, v), H), p.out);
}

template <typename Scalar>
Tensor<Scalar> block_forward(const Tensor<Scalar>& x, const BlockParams<Scalar>& p, const BlockContext& ctx,
                             AttentionCapture<Scalar>* capture) {
  const bool drop = ctx.training && ctx.droppath_rate > 0.0;
  if (drop && ctx.rng == nullptr) throw ContractError("block_forward: droppath in training needs an rng");
  auto h = apply(x, p.norm1);
  auto branch = attention(h, h, p.attn, capture);
  auto y = add(x, drop ? droppath(branch, ctx.droppath_rate, true, *ctx.rng) : branch);
  auto branch2 = apply(apply(y, p.norm2), p.mlp);
  return add(y, drop ? droppath(branch2, ctx.droppath_rate, true, *ctx.rng) : branch2);
}

#define CROPR_INSTANTIATE_NN(S)                                                                                  \
  template class ParameterStore<S>;                                                                              \
  template Tensor<S> trunc_normal<S>(Shape, double, Rng&);                                                       \
  template LayerNormParams<S> make_layer_norm(ParameterStore<S>&, const std::string&, Index);                    \
  template LinearParams<S> make_linear(ParameterStore<S>&, const std::string&, Index, Index, Rng&, bool);        \
  template MlpParams<S> make_mlp(ParameterStore<S>&, const std::string&, Index, Index, Rng&);                    \
  template AttentionParams<S> make_attention(ParameterStore<S>&, const std::string&, Index, Index, Rng&);        \
  template BlockParams<S> make_block(ParameterStore<S>&, const std::string&, Index, Index, Index, Rng&);         \
  template LayerNormParams<S> bind_layer_norm(const ParameterStore<S>&, const std::string&);                     \
  template LinearParams<S> bind_linear(const ParameterStore<S>&, const std::string&);                            \
  template MlpParams<S> bind_mlp(const ParameterStore<S>&, const std::string&);                                  \
  template AttentionParams<S> bind_attention(const ParameterStore<S>&, const std::string&, Index);               \
  template BlockParams<S> bind_block(const ParameterStore<S>&, const std::string&, Index);                       \
  template Tensor<S> attention(const Tensor<S>&, const Tensor<S>&, const AttentionParams<S>&, AttentionCapture<S>*); \
  template Tensor<S> block_forward(const Tensor<S>&, const BlockParams<S>&, const BlockContext&, AttentionCapture<S>*);

CROPR_INSTANTIATE_NN(float)
CROPR_INSTANTIATE_NN(double)

#undef CROPR_INSTANTIATE_NN

}  // namespace cropr
