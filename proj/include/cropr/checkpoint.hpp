// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat checkpoint container: a text header listing every tensor (name,
// dtype, shape), then the raw little-endian data in header order. Layout in
// docs/formats.md.

#pragma once

#include <iosfwd>
#include <string>

#include <json.hpp>

#include "cropr/nn.hpp"

namespace cropr {

struct CheckpointHeaderEntry {
  std::string name;
  std::string dtype;  // f32 | f64
  Shape shape;
};

/// Writes every tensor of `store` as `Scalar`. `meta` is stored verbatim.
template <typename Scalar>
void save_checkpoint(std::ostream& os, const ParameterStore<Scalar>& store, const nlohmann::json& meta);
template <typename Scalar>
void save_checkpoint(const std::string& path, const ParameterStore<Scalar>& store, const nlohmann::json& meta);

/// Loads into a fresh store, converting each tensor to `Scalar`.
template <typename Scalar>
ParameterStore<Scalar> load_checkpoint(std::istream& is, nlohmann::json* meta = nullptr);
template <typename Scalar>
ParameterStore<Scalar> load_checkpoint(const std::string& path, nlohmann::json* meta = nullptr);

/// Copies values of same-named, same-shaped tensors from `src` into `dst`.
/// Returns the number copied.
template <typename Scalar>
Index copy_matching(const ParameterStore<Scalar>& src, ParameterStore<Scalar>& dst);

/// Header and meta only.
nlohmann::json read_checkpoint_meta(const std::string& path);

}  // namespace cropr
