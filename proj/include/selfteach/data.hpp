// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "selfteach/error.hpp"
#include "selfteach/tensor.hpp"

namespace selfteach {

struct SequenceExample {
  Tensor2<float> frames;             // T x D
  std::vector<std::uint16_t> labels; // T

  std::size_t length() const { return labels.size(); }
  friend bool operator==(const SequenceExample &, const SequenceExample &) = default;
};

struct Dataset {
  std::size_t classes = 0;
  std::size_t dim = 0;
  std::vector<SequenceExample> sequences;

  std::size_t frame_count() const {
    std::size_t n = 0;
    for (const auto &s : sequences) n += s.length();
    return n;
  }
  friend bool operator==(const Dataset &, const Dataset &) = default;
};

enum class ShiftKind { none, covariate, noise };

/// Test-time corruption of the feature distribution. `covariate` maps each
/// frame to scale * x + offset; `noise` multiplies the noise sigma.
struct DomainShift {
  ShiftKind kind = ShiftKind::none;
  std::vector<double> offset; // D entries, covariate only
  double scale = 1.0;
  double sigma_multiplier = 1.0;
};

struct DatasetSpec {
  std::size_t classes = 10;
  std::size_t dim = 8;
  std::size_t length = 64;
  std::size_t n_sequences = 2000;
  double markov_stay_prob = 0.9;
  Tensor2<double> class_means; // classes x dim
  double noise_sigma = 1.0;
  DomainShift shift;
  std::uint64_t seed = 1;

  void validate() const {
    require(classes >= 1 && classes <= 65536, ErrorCode::configuration,
            "classes must be in [1, 65536]");
    require(dim >= 1, ErrorCode::configuration, "feature dimension must be positive");
    require(length >= 1, ErrorCode::configuration, "sequence length must be positive");
    require(n_sequences >= 1, ErrorCode::configuration, "need at least one sequence");
    require(markov_stay_prob > 0.0 && markov_stay_prob < 1.0, ErrorCode::configuration,
            "markov_stay_prob must lie in (0, 1)");
    require(noise_sigma > 0.0, ErrorCode::configuration, "noise_sigma must be positive");
    require(class_means.rows() == classes && class_means.cols() == dim,
            ErrorCode::configuration, "class_means must be classes x dim");
    require(class_means.all_finite(), ErrorCode::configuration, "class_means must be finite");
    if (shift.kind == ShiftKind::covariate) {
      require(shift.offset.size() == dim, ErrorCode::configuration,
              "covariate shift offset must have dim entries");
      require(std::isfinite(shift.scale), ErrorCode::configuration, "shift scale must be finite");
    }
    if (shift.kind == ShiftKind::noise)
      require(shift.sigma_multiplier > 0.0, ErrorCode::configuration,
              "noise shift multiplier must be positive");
  }
};

/// Class centroids drawn i.i.d. N(0, scale^2).
inline Tensor2<double> make_class_means(std::size_t classes, std::size_t dim, double scale,
                                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  Tensor2<double> means(classes, dim);
  for (auto &v : means.values()) v = normal(rng);
  return means;
}

/// Labels follow a Markov chain that keeps its state with probability
/// markov_stay_prob and otherwise jumps uniformly to another class. Labels and
/// noise come from separate seed-derived streams, so datasets that differ
/// only in their shift share the exact same label sequences.
inline Dataset generate(const DatasetSpec &spec) {
  spec.validate();
  std::mt19937_64 label_rng(spec.seed);
  std::mt19937_64 noise_rng(spec.seed ^ 0x9E3779B97F4A7C15ull);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  const double sigma =
      spec.noise_sigma * (spec.shift.kind == ShiftKind::noise ? spec.shift.sigma_multiplier : 1.0);
  const auto z = spec.classes;

  Dataset ds;
  ds.classes = z;
  ds.dim = spec.dim;
  ds.sequences.resize(spec.n_sequences);
  for (auto &seq : ds.sequences) {
    seq.labels.resize(spec.length);
    seq.frames = Tensor2<float>(spec.length, spec.dim);
    std::size_t state = std::uniform_int_distribution<std::size_t>(0, z - 1)(label_rng);
    for (std::size_t t = 0; t < spec.length; ++t) {
      if (t > 0 && z > 1 && unit(label_rng) >= spec.markov_stay_prob) {
        const auto jump = std::uniform_int_distribution<std::size_t>(1, z - 1)(label_rng);
        state = (state + jump) % z;
      }
      seq.labels[t] = static_cast<std::uint16_t>(state);
      auto row = seq.frames.row(t);
      for (std::size_t d = 0; d < spec.dim; ++d) {
        double x = spec.class_means(state, d) + sigma * normal(noise_rng);
        if (spec.shift.kind == ShiftKind::covariate)
          x = spec.shift.scale * x + spec.shift.offset[d];
        row[d] = static_cast<float>(x);
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// STDS1 file format
//
//   "STDS1" | classes u32 | dim u32 | length u32 | n u32 |
//   n x ( length x label u16 | length*dim x frame f32 )
//
// All integers and floats little-endian. Every sequence has the header length.
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[5] = {'S', 'T', 'D', 'S', '1'};

namespace detail {

template <typename T> void put_le(std::vector<unsigned char> &out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
}

class ByteReader {
public:
  explicit ByteReader(const std::vector<unsigned char> &bytes) : bytes_(bytes) {}

  template <typename T> T get_le(const char *what) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
    need(sizeof(T), what);
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= U(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }

  std::string get_bytes(std::size_t n, const char *what) {
    need(n, what);
    std::string s(reinterpret_cast<const char *>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const char *what) const {
    if (bytes_.size() - pos_ < n)
      throw ParseError(ErrorCode::parse, pos_, std::string("truncated file while reading ") + what);
  }

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

private:
  const std::vector<unsigned char> &bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path &path, const std::vector<unsigned char> &bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char *>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) fail(ErrorCode::io, "write to '" + path.string() + "' failed");
}

} // namespace detail

inline std::vector<unsigned char> encode_dataset(const Dataset &ds) {
  require(!ds.sequences.empty(), ErrorCode::invalid_input, "cannot encode an empty dataset");
  const auto length = ds.sequences.front().length();
  std::vector<unsigned char> out(std::begin(kDatasetMagic), std::end(kDatasetMagic));
  detail::put_le(out, std::uint32_t(ds.classes));
  detail::put_le(out, std::uint32_t(ds.dim));
  detail::put_le(out, std::uint32_t(length));
  detail::put_le(out, std::uint32_t(ds.sequences.size()));
  for (const auto &s : ds.sequences) {
    require(s.length() == length && s.frames.rows() == length && s.frames.cols() == ds.dim,
            ErrorCode::invalid_input, "STDS1 requires equal-length sequences of width dim");
    for (auto l : s.labels) detail::put_le(out, l);
    for (float v : s.frames.values()) detail::put_le(out, v);
  }
  return out;
}

inline Dataset decode_dataset(const std::vector<unsigned char> &bytes) {
  detail::ByteReader in(bytes);
  if (bytes.size() < sizeof(kDatasetMagic) ||
      std::memcmp(bytes.data(), kDatasetMagic, sizeof(kDatasetMagic)) != 0)
    throw ParseError(ErrorCode::bad_magic, 0, "not an STDS1 dataset (bad magic)");
  in.get_bytes(sizeof(kDatasetMagic), "magic");
  Dataset ds;
  ds.classes = in.get_le<std::uint32_t>("classes");
  ds.dim = in.get_le<std::uint32_t>("dim");
  const std::size_t length = in.get_le<std::uint32_t>("length");
  const std::size_t n = in.get_le<std::uint32_t>("sequence count");
  if (ds.classes == 0 || ds.dim == 0 || length == 0)
    throw ParseError(ErrorCode::parse, in.offset(), "header has a zero dimension");
  // Reject impossible counts before allocating.
  const std::size_t per_seq = length * 2 + length * ds.dim * 4;
  if ((bytes.size() - in.offset()) / per_seq < n)
    throw ParseError(ErrorCode::parse, bytes.size(),
                     "truncated file: header promises " + std::to_string(n) + " sequences");
  ds.sequences.resize(n);
  for (auto &s : ds.sequences) {
    s.labels.resize(length);
    for (auto &l : s.labels) {
      const auto at = in.offset();
      l = in.get_le<std::uint16_t>("label");
      if (l >= ds.classes)
        throw ParseError(ErrorCode::parse, at, "label " + std::to_string(l) + " >= classes");
    }
    s.frames = Tensor2<float>(length, ds.dim);
    for (auto &v : s.frames.values()) v = in.get_le<float>("frame value");
  }
  if (!in.at_end()) throw ParseError(ErrorCode::parse, in.offset(), "trailing bytes after dataset");
  return ds;
}

inline void save(const Dataset &ds, const std::filesystem::path &path) {
  detail::write_file(path, encode_dataset(ds));
}

inline Dataset load(const std::filesystem::path &path) {
  return decode_dataset(detail::read_file(path));
}

} // namespace selfteach
