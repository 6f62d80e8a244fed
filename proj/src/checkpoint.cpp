// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>
#include <vector>

namespace cropr {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

constexpr const char* kMagic = "CROPRCKPT 1";

template <typename Scalar>
constexpr const char* dtype_name() {
  return sizeof(Scalar) == 4 ? "f32" : "f64";
}

struct Header {
  nlohmann::json meta;
  std::vector<CheckpointHeaderEntry> entries;
};

Header read_header(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kMagic) throw FormatError("not a checkpoint file");
  Header h;
  std::size_t meta_bytes = 0;
  {
    if (!std::getline(is, line)) throw FormatError("checkpoint header truncated");
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> meta_bytes) || tag != "meta") throw FormatError("expected 'meta <bytes>'");
    std::string text(meta_bytes, '\0');
    is.read(text.data(), static_cast<std::streamsize>(meta_bytes));
    if (!is) throw FormatError("checkpoint meta truncated");
    std::getline(is, line);
    try {
      h.meta = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad checkpoint meta: ") + e.what());
    }
  }
  std::size_t count = 0;
  {
    if (!std::getline(is, line)) throw FormatError("checkpoint header truncated");
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> count) || tag != "entries") throw FormatError("expected 'entries <n>'");
  }
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(is, line)) throw FormatError("checkpoint header truncated");
    std::istringstream ls(line);
    CheckpointHeaderEntry e;
    std::size_t rank = 0;
    if (!(ls >> e.name >> e.dtype >> rank)) throw FormatError("bad entry line '" + line + "'");
    if (e.dtype != "f32" && e.dtype != "f64") throw FormatError("unknown dtype '" + e.dtype + "'");
    e.shape.resize(rank);
    for (auto& d : e.shape)
      if (!(ls >> d) || d < 0) throw FormatError("bad shape in entry '" + e.name + "'");
    h.entries.push_back(std::move(e));
  }
  if (!std::getline(is, line) || line != "data") throw FormatError("expected 'data' marker");
  return h;
}

}  // namespace

template <typename Scalar>
void save_checkpoint(std::ostream& os, const ParameterStore<Scalar>& store, const nlohmann::json& meta) {
  const std::string text = meta.dump();
  os << kMagic << '\n' << "meta " << text.size() << '\n' << text << '\n';
  os << "entries " << store.size() << '\n';
  for (const auto& [name, t] : store.entries()) {
    if (name.find_first_of(" \t\n") != std::string::npos) throw FormatError("parameter names cannot contain spaces");
    os << name << ' ' << dtype_name<Scalar>() << ' ' << t.rank();
    for (Index d : t.shape()) os << ' ' << d;
    os << '\n';
  }
  os << "data\n";
  for (const auto& [_, t] : store.entries()) {
    os.write(reinterpret_cast<const char*>(t.value().data()), static_cast<std::streamsize>(t.numel() * sizeof(Scalar)));
  }
  if (!os) throw FormatError("failed to write checkpoint");
}

template <typename Scalar>
void save_checkpoint(const std::string& path, const ParameterStore<Scalar>& store, const nlohmann::json& meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  save_checkpoint(os, store, meta);
}

template <typename Scalar>
ParameterStore<Scalar> load_checkpoint(std::istream& is, nlohmann::json* meta) {
  Header h = read_header(is);
  ParameterStore<Scalar> store;
  for (const auto& e : h.entries) {
    const Index n = shape_numel(e.shape);
    Vec<Scalar> v(n);
    if (e.dtype == "f64") {
      std::vector<double> raw(static_cast<std::size_t>(n));
      is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * 8));
      for (Index i = 0; i < n; ++i) v[i] = static_cast<Scalar>(raw[static_cast<std::size_t>(i)]);
    } else {
      std::vector<float> raw(static_cast<std::size_t>(n));
      is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * 4));
      for (Index i = 0; i < n; ++i) v[i] = static_cast<Scalar>(raw[static_cast<std::size_t>(i)]);
    }
    if (!is) throw FormatError("checkpoint data truncated at '" + e.name + "'");
    store.add(e.name, Tensor<Scalar>::from(e.shape, std::move(v)));
  }
  if (meta != nullptr) *meta = h.meta;
  return store;
}

template <typename Scalar>
ParameterStore<Scalar> load_checkpoint(const std::string& path, nlohmann::json* meta) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path + "'");
  return load_checkpoint<Scalar>(is, meta);
}

template <typename Scalar>
Index copy_matching(const ParameterStore<Scalar>& src, ParameterStore<Scalar>& dst) {
  Index copied = 0;
  for (auto& [name, t] : dst.entries()) {
    if (!src.contains(name)) continue;
    const auto& from = src.get(name);
    if (from.shape() != t.shape()) continue;
    auto target = t;
    target.mutable_value() = from.value();
    ++copied;
  }
  return copied;
}

nlohmann::json read_checkpoint_meta(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path + "'");
  return read_header(is).meta;
}

#define CROPR_INSTANTIATE_CKPT(S)                                                                      \
  template void save_checkpoint(std::ostream&, const ParameterStore<S>&, const nlohmann::json&);       \
  template void save_checkpoint(const std::string&, const ParameterStore<S>&, const nlohmann::json&);  \
  template ParameterStore<S> load_checkpoint<S>(std::istream&, nlohmann::json*);                       \
  template ParameterStore<S> load_checkpoint<S>(const std::string&, nlohmann::json*); \
  template Index copy_matching(const ParameterStore<S>&, ParameterStore<S>&);

CROPR_INSTANTIATE_CKPT(float)
CROPR_INSTANTIATE_CKPT(double)

#undef CROPR_INSTANTIATE_CKPT

}  // namespace cropr
