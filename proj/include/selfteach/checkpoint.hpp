// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "selfteach/data.hpp"
#include "selfteach/network.hpp"

namespace selfteach {

// STCK1 layout, all little-endian:
//
//   "STCK1" | block count u32 |
//   count x ( name length u32 | name bytes | rows u64 | cols u64 ) |
//   every block's rows*cols f64 values, row-major, in manifest order

inline constexpr char kCheckpointMagic[5] = {'S', 'T', 'C', 'K', '1'};

struct NamedBlock {
  std::string name;
  Tensor2<double> value;

  friend bool operator==(const NamedBlock &, const NamedBlock &) = default;
};

class Checkpoint {
public:
  void put(std::string name, Tensor2<double> value) {
    require(find(name) == nullptr, ErrorCode::invalid_input, "duplicate checkpoint block " + name);
    blocks_.push_back({std::move(name), std::move(value)});
  }
  template <typename Real> void put(std::string name, const Tensor2<Real> &value) {
    put(std::move(name), value.template cast<double>());
  }
  void put_scalars(std::string name, std::vector<double> values) {
    const auto n = values.size();
    put(std::move(name), Tensor2<double>(1, n, std::move(values)));
  }

  const Tensor2<double> *find(const std::string &name) const {
    auto it = std::find_if(blocks_.begin(), blocks_.end(),
                           [&](const NamedBlock &b) { return b.name == name; });
    return it == blocks_.end() ? nullptr : &it->value;
  }
  const Tensor2<double> &get(const std::string &name) const {
    const auto *t = find(name);
    require(t != nullptr, ErrorCode::invalid_state, "checkpoint has no block '" + name + "'");
    return *t;
  }

  const std::vector<NamedBlock> &blocks() const { return blocks_; }
  friend bool operator==(const Checkpoint &, const Checkpoint &) = default;

private:
  std::vector<NamedBlock> blocks_;
};

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint &ck) {
  std::vector<unsigned char> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_le(out, std::uint32_t(ck.blocks().size()));
  for (const auto &b : ck.blocks()) {
    detail::put_le(out, std::uint32_t(b.name.size()));
    out.insert(out.end(), b.name.begin(), b.name.end());
    detail::put_le(out, std::uint64_t(b.value.rows()));
    detail::put_le(out, std::uint64_t(b.value.cols()));
  }
  for (const auto &b : ck.blocks())
    for (double v : b.value.values()) detail::put_le(out, v);
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char> &bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw ParseError(ErrorCode::bad_magic, 0, "not an STCK1 checkpoint (bad magic)");
  detail::ByteReader in(bytes);
  in.get_bytes(sizeof(kCheckpointMagic), "magic");
  const std::size_t count = in.get_le<std::uint32_t>("block count");
  struct Entry {
    std::string name;
    std::uint64_t rows, cols;
  };
  std::vector<Entry> manifest;
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < count; ++i) {
    Entry e;
    const std::size_t len = in.get_le<std::uint32_t>("name length");
    e.name = in.get_bytes(len, "block name");
    e.rows = in.get_le<std::uint64_t>("rows");
    e.cols = in.get_le<std::uint64_t>("cols");
    if (e.cols != 0 && e.rows > (std::uint64_t(1) << 40) / e.cols)
      throw ParseError(ErrorCode::parse, in.offset(), "block '" + e.name + "' is implausibly large");
    total += e.rows * e.cols;
    manifest.push_back(std::move(e));
  }
  if ((bytes.size() - in.offset()) / 8 < total)
    throw ParseError(ErrorCode::parse, bytes.size(), "truncated checkpoint: values missing");
  Checkpoint ck;
  for (const auto &e : manifest) {
    Tensor2<double> t(e.rows, e.cols);
    for (auto &v : t.values()) v = in.get_le<double>("value");
    ck.put(e.name, std::move(t));
  }
  if (!in.at_end())
    throw ParseError(ErrorCode::parse, in.offset(), "trailing bytes after checkpoint");
  return ck;
}

inline void save_checkpoint(const Checkpoint &ck, const std::filesystem::path &path) {
  detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path &path) {
  return decode_checkpoint(detail::read_file(path));
}

// Model <-> blocks. The architecture travels in "meta/spec".

inline std::vector<double> encode_spec(const StackSpec &s) {
  return {double(s.layers), double(s.input_dim), double(s.cell),      double(s.proj),
          double(s.classes), double(s.aux_head),  double(s.aux_layer), double(s.share_head)};
}

inline StackSpec decode_spec(const Tensor2<double> &t) {
  require(t.size() == 8, ErrorCode::invalid_state, "meta/spec must hold 8 values");
  StackSpec s;
  s.layers = std::size_t(t[0]);
  s.input_dim = std::size_t(t[1]);
  s.cell = std::size_t(t[2]);
  s.proj = std::size_t(t[3]);
  s.classes = std::size_t(t[4]);
  s.aux_head = t[5] != 0.0;
  s.aux_layer = std::size_t(t[6]);
  s.share_head = t[7] != 0.0;
  s.validate();
  return s;
}

template <typename Real>
void put_params(Checkpoint &ck, const StackParams<Real> &params, const std::string &prefix = "") {
  if (prefix.empty()) ck.put_scalars("meta/spec", encode_spec(params.spec));
  params.for_each_block([&](const std::string &name, const Tensor2<Real> &t) {
    ck.put(prefix + name, t);
  });
}

/// Fills a parameter set of the given architecture from `prefix`-named blocks.
template <typename Real>
StackParams<Real> get_params(const Checkpoint &ck, const StackSpec &spec,
                             const std::string &prefix = "") {
  StackParams<Real> params(spec);
  params.for_each_block([&](const std::string &name, Tensor2<Real> &t) {
    const auto &src = ck.get(prefix + name);
    require(src.rows() == t.rows() && src.cols() == t.cols(), ErrorCode::invalid_state,
            "checkpoint block '" + prefix + name + "' has the wrong shape");
    t = src.template cast<Real>();
  });
  return params;
}

template <typename Real> StackParams<Real> get_params(const Checkpoint &ck) {
  return get_params<Real>(ck, decode_spec(ck.get("meta/spec")));
}

} // namespace selfteach
