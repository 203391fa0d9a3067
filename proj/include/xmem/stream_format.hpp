// SPDX-License-Identifier: Apache-2.0
/**
 * @file   stream_format.hpp
 * @brief  Binary feature-stream files, the synthetic generator and snapshots.
 *
 * Stream file layout (all fields little-endian):
 *
 *   offset  size  field
 *   0       4     magic "XMFS"
 *   4       4     u32 format version (1)
 *   8       4     u32 c_k
 *   12      4     u32 c_v
 *   16      4     u32 sensory input channels
 *   20      4     u32 h
 *   24      4     u32 w
 *   28      4     u32 frame_count
 *   32      4     u32 object_count
 *   36      ...   frame-major, then object-major payload records
 *
 * Each record is float32 arrays in this order: query (c_k*hw), raw shrinkage
 * (hw), raw selection (c_k*hw), values (c_v*hw), sensory input (c_in*hw).
 * Matrices are element-major: the channels of position 0 come first.
 */
#pragma once

#include "xmem/core_types.hpp"
#include "xmem/long_term_memory.hpp"
#include "xmem/pipeline.hpp"
#include "xmem/sensory_memory.hpp"

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace xmem {

/// Malformed stream; `offset` is the first byte that failed to parse.
class StreamFormatError : public Error {
public:
  StreamFormatError(const std::string &what, std::uint64_t offset)
      : Error("stream parse error at byte offset " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

private:
  std::uint64_t offset_;
};

inline constexpr std::array<char, 4> kStreamMagic = {'X', 'M', 'F', 'S'};
inline constexpr std::uint32_t kStreamVersion = 1;
inline constexpr std::size_t kStreamHeaderBytes = 36;

struct StreamHeader {
  std::uint32_t version = kStreamVersion;
  std::uint32_t c_k = 0;
  std::uint32_t c_v = 0;
  std::uint32_t c_in = 0;
  std::uint32_t h = 0;
  std::uint32_t w = 0;
  std::uint32_t frame_count = 0;
  std::uint32_t object_count = 0;

  std::uint64_t hw() const { return std::uint64_t{h} * w; }
  std::uint64_t floats_per_record() const { return hw() * (2ull * c_k + 1ull + c_v + c_in); }
  std::uint64_t expected_bytes() const {
    return kStreamHeaderBytes +
           4ull * floats_per_record() * std::uint64_t{frame_count} * object_count;
  }

  friend bool operator==(const StreamHeader &, const StreamHeader &) = default;
};

namespace detail {

inline void put_u32(std::ostream &os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char *>(b), 4);
}

inline std::uint32_t get_u32(const unsigned char *b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace detail

/// Source of per-frame object features.
class FrameSource {
public:
  virtual ~FrameSource() = default;
  virtual const StreamHeader &header() const = 0;
  /// Fills `out` with the next frame; returns false at end of stream.
  virtual bool next(std::vector<ObjectFeatures> &out) = 0;
};

class StreamReader final : public FrameSource {
public:
  explicit StreamReader(const std::filesystem::path &path) : is_(path, std::ios::binary) {
    if (!is_)
      throw Error("cannot open stream " + path.string());
    is_.seekg(0, std::ios::end);
    const auto size = static_cast<std::uint64_t>(is_.tellg());
    is_.seekg(0);

    unsigned char raw[kStreamHeaderBytes] = {};
    is_.read(reinterpret_cast<char *>(raw), kStreamHeaderBytes);
    const auto got = static_cast<std::uint64_t>(is_.gcount());
    if (got < 4 || std::memcmp(raw, kStreamMagic.data(), std::min<std::uint64_t>(got, 4)) != 0) {
      std::uint64_t bad = 0;
      while (bad < got && bad < 4 && raw[bad] == static_cast<unsigned char>(kStreamMagic[bad]))
        ++bad;
      throw StreamFormatError("bad magic, expected \"XMFS\"", bad);
    }
    if (got < kStreamHeaderBytes)
      throw StreamFormatError("truncated header", got);

    header_.version = detail::get_u32(raw + 4);
    if (header_.version != kStreamVersion)
      throw StreamFormatError("unsupported version " + std::to_string(header_.version), 4);
    std::uint32_t *fields[] = {&header_.c_k, &header_.c_v, &header_.c_in, &header_.h,
                               &header_.w,   &header_.frame_count, &header_.object_count};
    for (std::size_t i = 0; i < 7; ++i) {
      *fields[i] = detail::get_u32(raw + 8 + 4 * i);
      if (*fields[i] == 0 && i < 5)
        throw StreamFormatError("dimension field must be >= 1", 8 + 4 * i);
    }
    if (header_.object_count == 0)
      throw StreamFormatError("object_count must be >= 1", 32);

    const std::uint64_t want = header_.expected_bytes();
    if (size < want)
      throw StreamFormatError("truncated payload: file has " + std::to_string(size) +
                                  " bytes, header declares " + std::to_string(want),
                              size);
    if (size > want)
      throw StreamFormatError("trailing bytes: file has " + std::to_string(size) +
                                  " bytes, header declares " + std::to_string(want),
                              want);
    buffer_.resize(4 * header_.floats_per_record());
  }

  const StreamHeader &header() const override { return header_; }

  bool next(std::vector<ObjectFeatures> &out) override {
    if (frame_ >= header_.frame_count)
      return false;
    out.resize(header_.object_count);
    const auto hw = static_cast<Index>(header_.hw());
    for (auto &obj : out) {
      const std::uint64_t base = static_cast<std::uint64_t>(is_.tellg());
      is_.read(reinterpret_cast<char *>(buffer_.data()), static_cast<std::streamsize>(buffer_.size()));
      if (static_cast<std::size_t>(is_.gcount()) != buffer_.size())
        throw StreamFormatError("short read", base + static_cast<std::uint64_t>(is_.gcount()));
      std::size_t cursor = 0;
      auto fill = [&](float *dst, std::size_t count) {
        for (std::size_t i = 0; i < count; ++i, ++cursor) {
          dst[i] = detail::f32_from_le(buffer_.data() + 4 * cursor);
          if (!std::isfinite(dst[i]))
            throw StreamFormatError("non-finite float", base + 4 * cursor);
        }
      };
      obj.query.resize(header_.c_k, hw);
      obj.raw_shrinkage.resize(hw);
      obj.raw_selection.resize(header_.c_k, hw);
      obj.values.resize(header_.c_v, hw);
      obj.sensory_input.resize(header_.c_in, hw);
      fill(obj.query.data(), static_cast<std::size_t>(obj.query.size()));
      fill(obj.raw_shrinkage.data(), static_cast<std::size_t>(obj.raw_shrinkage.size()));
      fill(obj.raw_selection.data(), static_cast<std::size_t>(obj.raw_selection.size()));
      fill(obj.values.data(), static_cast<std::size_t>(obj.values.size()));
      fill(obj.sensory_input.data(), static_cast<std::size_t>(obj.sensory_input.size()));
    }
    ++frame_;
    return true;
  }

private:
  std::ifstream is_;
  StreamHeader header_;
  std::vector<unsigned char> buffer_;
  std::uint32_t frame_ = 0;
};

class StreamWriter {
public:
  StreamWriter(const std::filesystem::path &path, const StreamHeader &header)
      : os_(path, std::ios::binary), header_(header) {
    if (!os_)
      throw Error("cannot create stream " + path.string());
    os_.write(kStreamMagic.data(), 4);
    detail::put_u32(os_, header_.version);
    for (std::uint32_t v : {header_.c_k, header_.c_v, header_.c_in, header_.h, header_.w,
                            header_.frame_count, header_.object_count})
      detail::put_u32(os_, v);
  }

  void write_frame(const std::vector<ObjectFeatures> &frame) {
    if (frame.size() != header_.object_count)
      throw ShapeError("StreamWriter: object count mismatch");
    if (written_ >= header_.frame_count)
      throw CapacityError("StreamWriter: more frames than declared");
    for (const auto &o : frame) {
      detail::write_f32le(os_, o.query.data(), static_cast<std::size_t>(o.query.size()));
      detail::write_f32le(os_, o.raw_shrinkage.data(), static_cast<std::size_t>(o.raw_shrinkage.size()));
      detail::write_f32le(os_, o.raw_selection.data(), static_cast<std::size_t>(o.raw_selection.size()));
      detail::write_f32le(os_, o.values.data(), static_cast<std::size_t>(o.values.size()));
      detail::write_f32le(os_, o.sensory_input.data(), static_cast<std::size_t>(o.sensory_input.size()));
    }
    ++written_;
  }

  void close() {
    if (written_ != header_.frame_count)
      throw ContractError("StreamWriter: wrote " + std::to_string(written_) + " of " +
                          std::to_string(header_.frame_count) + " frames");
    os_.close();
  }

private:
  std::ofstream os_;
  StreamHeader header_;
  std::uint32_t written_ = 0;
};

/**
 * Seeded random walk: frame 0 draws every entry from U(-1, 1); each later frame
 * adds drift * N(0, 1) per entry. drift = 0 repeats frame 0 exactly.
 */
class SyntheticSource final : public FrameSource {
public:
  SyntheticSource(std::uint64_t seed, const StreamHeader &header, float drift)
      : header_(header), drift_(drift), rng_(seed) {
    if (drift < 0.0f)
      throw ValidationError("SyntheticSource: drift must be >= 0");
    if (header_.c_k == 0 || header_.c_v == 0 || header_.c_in == 0 || header_.h == 0 ||
        header_.w == 0 || header_.object_count == 0)
      throw ConfigError("SyntheticSource: dimensions must be >= 1");
  }

  const StreamHeader &header() const override { return header_; }

  bool next(std::vector<ObjectFeatures> &out) override {
    if (frame_ >= header_.frame_count)
      return false;
    const auto hw = static_cast<Index>(header_.hw());
    if (frame_ == 0) {
      state_.resize(header_.object_count);
      std::uniform_real_distribution<float> u(-1.0f, 1.0f);
      for (auto &o : state_) {
        o.query = Matrix(header_.c_k, hw);
        o.raw_shrinkage = Vector(hw);
        o.raw_selection = Matrix(header_.c_k, hw);
        o.values = Matrix(header_.c_v, hw);
        o.sensory_input = Matrix(header_.c_in, hw);
        for_each_entry(o, [&](float &x) { x = u(rng_); });
      }
    } else if (drift_ > 0.0f) {
      std::normal_distribution<float> n(0.0f, 1.0f);
      for (auto &o : state_)
        for_each_entry(o, [&](float &x) { x += drift_ * n(rng_); });
    }
    out = state_;
    ++frame_;
    return true;
  }

private:
  template <typename F> static void for_each_entry(ObjectFeatures &o, F &&f) {
    for (auto *m : {&o.query, &o.raw_selection, &o.values, &o.sensory_input})
      for (Index i = 0; i < m->size(); ++i)
        f(m->data()[i]);
    for (Index i = 0; i < o.raw_shrinkage.size(); ++i)
      f(o.raw_shrinkage(i));
  }

  StreamHeader header_;
  float drift_;
  std::mt19937_64 rng_;
  std::vector<ObjectFeatures> state_;
  std::uint32_t frame_ = 0;
};

/// Writes a synthetic stream file; returns its header.
inline StreamHeader generate_synthetic(const std::filesystem::path &path, std::uint64_t seed,
                                       const StreamHeader &header, float drift) {
  SyntheticSource src(seed, header, drift);
  StreamWriter out(path, header);
  std::vector<ObjectFeatures> frame;
  while (src.next(frame))
    out.write_frame(frame);
  out.close();
  return header;
}

/**
 * Long-term snapshot: magic "XMLT", u32 version, u32 c_k, u32 c_v, u32
 * object_count, then per object u32 L followed by float32 keys (c_k*L),
 * shrinkage (L), values (c_v*L) and usage (L), element-major.
 */
inline void write_long_term_snapshot(const std::filesystem::path &path,
                                     const std::vector<ObjectTrack> &tracks, const FeatureDims &dims) {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw Error("cannot create snapshot " + path.string());
  os.write("XMLT", 4);
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<std::uint32_t>(dims.c_k));
  detail::put_u32(os, static_cast<std::uint32_t>(dims.c_v));
  detail::put_u32(os, static_cast<std::uint32_t>(tracks.size()));
  for (const auto &t : tracks) {
    const auto &lt = t.long_term;
    detail::put_u32(os, static_cast<std::uint32_t>(lt.size()));
    detail::write_f32le(os, lt.keys().data().data(), static_cast<std::size_t>(lt.keys().data().size()));
    detail::write_f32le(os, lt.shrinkage().data().data(), lt.size());
    detail::write_f32le(os, lt.values().data().data(), static_cast<std::size_t>(lt.values().data().size()));
    detail::write_f32le(os, lt.usage().data(), lt.size());
  }
}

struct LongTermSnapshot {
  struct Store {
    Matrix keys;
    Vector shrinkage;
    Matrix values;
    Vector usage;
  };
  std::uint32_t c_k = 0;
  std::uint32_t c_v = 0;
  std::vector<Store> objects;
};

inline LongTermSnapshot read_long_term_snapshot(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw Error("cannot open snapshot " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size())
      throw StreamFormatError("truncated snapshot", bytes.size());
  };
  auto u32 = [&] {
    need(4);
    const auto v = detail::get_u32(bytes.data() + pos);
    pos += 4;
    return v;
  };
  auto floats = [&](float *dst, std::size_t n) {
    need(4 * n);
    for (std::size_t i = 0; i < n; ++i)
      dst[i] = detail::f32_from_le(bytes.data() + pos + 4 * i);
    pos += 4 * n;
  };
  need(4);
  if (std::memcmp(bytes.data(), "XMLT", 4) != 0)
    throw StreamFormatError("bad snapshot magic", 0);
  pos = 4;
  if (u32() != 1)
    throw StreamFormatError("unsupported snapshot version", 4);
  LongTermSnapshot snap;
  snap.c_k = u32();
  snap.c_v = u32();
  const auto objects = u32();
  for (std::uint32_t o = 0; o < objects; ++o) {
    const auto L = static_cast<Index>(u32());
    LongTermSnapshot::Store s{Matrix(snap.c_k, L), Vector(L), Matrix(snap.c_v, L), Vector(L)};
    floats(s.keys.data(), static_cast<std::size_t>(s.keys.size()));
    floats(s.shrinkage.data(), static_cast<std::size_t>(L));
    floats(s.values.data(), static_cast<std::size_t>(s.values.size()));
    floats(s.usage.data(), static_cast<std::size_t>(L));
    snap.objects.push_back(std::move(s));
  }
  if (pos != bytes.size())
    throw StreamFormatError("trailing snapshot bytes", pos);
  return snap;
}

} // namespace xmem
