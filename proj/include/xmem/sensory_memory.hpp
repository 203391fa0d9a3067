// SPDX-License-Identifier: Apache-2.0
/**
 * @file   sensory_memory.hpp
 * @brief  Per-position convolutional GRU over the sensory hidden map.
 *
 *   z  = sigmoid(W_z * [x, h] + b_z)
 *   r  = sigmoid(W_r * [x, h] + b_r)
 *   h~ = tanh(W_h * [x, r.h] + b_h)
 *   h' = (1 - z).h + z.h~
 *
 * Each W is a kernel_size x kernel_size convolution (zero padded) over the
 * channel-concatenated input; kernel_size 1 is a per-position linear map.
 */
#pragma once

#include "xmem/core_types.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

namespace xmem {

/// Hidden map of c_h channels; column p is spatial position p (row-major y*w + x).
class SensoryState {
public:
  SensoryState() = default;
  SensoryState(std::size_t channels, std::size_t height, std::size_t width)
      : h_(Matrix::Zero(static_cast<Index>(channels), static_cast<Index>(height * width))),
        height_(height), width_(width) {}
  SensoryState(Matrix h, std::size_t height, std::size_t width)
      : h_(std::move(h)), height_(height), width_(width) {
    if (static_cast<std::size_t>(h_.cols()) != height * width)
      throw ShapeError("SensoryState: column count must equal height*width");
    if (!detail::all_finite(h_))
      throw ValidationError("SensoryState: non-finite entry");
  }

  const Matrix &hidden() const { return h_; }
  std::size_t channels() const { return static_cast<std::size_t>(h_.rows()); }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }

private:
  Matrix h_;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
};

struct GruWeights {
  std::size_t input_channels = 0;
  std::size_t hidden_channels = 0;
  std::size_t kernel_size = 1;
  // c_h x ((input + c_h) * k * k); columns ordered by kernel offset (dy, dx
  // row-major), then input channels, then hidden channels.
  Matrix w_z, w_r, w_h;
  Vector b_z, b_r, b_h;

  std::size_t patch_size() const {
    return (input_channels + hidden_channels) * kernel_size * kernel_size;
  }

  void validate() const {
    if (kernel_size % 2 == 0)
      throw ConfigError("GruWeights: kernel_size must be odd");
    const auto rows = static_cast<Index>(hidden_channels);
    const auto cols = static_cast<Index>(patch_size());
    detail::require_shape("GruWeights w_z", w_z.rows(), w_z.cols(), rows, cols);
    detail::require_shape("GruWeights w_r", w_r.rows(), w_r.cols(), rows, cols);
    detail::require_shape("GruWeights w_h", w_h.rows(), w_h.cols(), rows, cols);
    detail::require_shape("GruWeights b_z", b_z.rows(), b_z.cols(), rows, 1);
    detail::require_shape("GruWeights b_r", b_r.rows(), b_r.cols(), rows, 1);
    detail::require_shape("GruWeights b_h", b_h.rows(), b_h.cols(), rows, 1);
  }

  static GruWeights zeros(std::size_t input, std::size_t hidden, std::size_t kernel = 1) {
    GruWeights g{input, hidden, kernel, {}, {}, {}, {}, {}, {}};
    const auto rows = static_cast<Index>(hidden);
    const auto cols = static_cast<Index>(g.patch_size());
    g.w_z = g.w_r = g.w_h = Matrix::Zero(rows, cols);
    g.b_z = g.b_r = g.b_h = Vector::Zero(rows);
    return g;
  }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  static GruWeights random(std::size_t input, std::size_t hidden, std::size_t kernel,
                           std::uint64_t seed) {
    GruWeights g = zeros(input, hidden, kernel);
    std::mt19937_64 rng(seed);
    const float bound = 1.0f / std::sqrt(static_cast<float>(g.patch_size()));
    std::uniform_real_distribution<float> dist(-bound, bound);
    for (Matrix *m : {&g.w_z, &g.w_r, &g.w_h})
      for (Index i = 0; i < m->size(); ++i)
        m->data()[i] = dist(rng);
    for (Vector *b : {&g.b_z, &g.b_r, &g.b_h})
      for (Index i = 0; i < b->size(); ++i)
        (*b)(i) = dist(rng);
    return g;
  }
};

namespace detail {

/// im2col over a channel-stacked map of size height x width, zero padded.
inline Matrix gather_patches(const Matrix &x, const Matrix &h, std::size_t height,
                             std::size_t width, std::size_t kernel) {
  const Index cx = x.rows();
  const Index ch = h.rows();
  const Index cin = cx + ch;
  const auto k = static_cast<Index>(kernel);
  const Index r = k / 2;
  const auto H = static_cast<Index>(height);
  const auto W = static_cast<Index>(width);
  Matrix patches = Matrix::Zero(cin * k * k, H * W);
  for (Index y = 0; y < H; ++y)
    for (Index xx = 0; xx < W; ++xx) {
      const Index p = y * W + xx;
      for (Index dy = 0; dy < k; ++dy)
        for (Index dx = 0; dx < k; ++dx) {
          const Index sy = y + dy - r;
          const Index sx = xx + dx - r;
          if (sy < 0 || sy >= H || sx < 0 || sx >= W)
            continue;
          const Index q = sy * W + sx;
          const Index off = (dy * k + dx) * cin;
          patches.block(off, p, cx, 1) = x.col(q);
          patches.block(off + cx, p, ch, 1) = h.col(q);
        }
    }
  return patches;
}

inline void write_f32le(std::ostream &os, const float *data, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, data + i, 4);
    const unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                static_cast<unsigned char>(bits >> 16),
                                static_cast<unsigned char>(bits >> 24)};
    os.write(reinterpret_cast<const char *>(b), 4);
  }
}

inline float f32_from_le(const unsigned char *b) {
  const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                             (static_cast<std::uint32_t>(b[2]) << 16) |
                             (static_cast<std::uint32_t>(b[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

} // namespace detail

inline SensoryState gru_step(const SensoryState &state, const Matrix &x, const GruWeights &g) {
  g.validate();
  const Matrix &h = state.hidden();
  if (static_cast<std::size_t>(x.rows()) != g.input_channels)
    throw ShapeError("gru_step: input has " + std::to_string(x.rows()) + " channels, weights expect " +
                     std::to_string(g.input_channels));
  if (static_cast<std::size_t>(h.rows()) != g.hidden_channels)
    throw ShapeError("gru_step: state has " + std::to_string(h.rows()) +
                     " channels, weights expect " + std::to_string(g.hidden_channels));
  if (x.cols() != h.cols())
    throw ShapeError("gru_step: input covers " + std::to_string(x.cols()) + " positions, state " +
                     std::to_string(h.cols()));

  const std::size_t H = state.height();
  const std::size_t W = state.width();
  const Matrix patches = detail::gather_patches(x, h, H, W, g.kernel_size);

  auto sig = [](float v) { return sigmoid(v); };
  const Matrix z = ((g.w_z * patches).colwise() + g.b_z).unaryExpr(sig);
  const Matrix r = ((g.w_r * patches).colwise() + g.b_r).unaryExpr(sig);
  const Matrix reset_h = r.cwiseProduct(h);
  const Matrix cand_patches = detail::gather_patches(x, reset_h, H, W, g.kernel_size);
  const Matrix cand =
      ((g.w_h * cand_patches).colwise() + g.b_h).unaryExpr([](float v) { return std::tanh(v); });

  Matrix next = (1.0f - z.array()).matrix().cwiseProduct(h) + z.cwiseProduct(cand);
  // rounding can overshoot the [-1, 1] hull of (h, h~) by an ulp
  if (h.size() == 0 || (h.minCoeff() >= -1.0f && h.maxCoeff() <= 1.0f))
    next = next.cwiseMax(-1.0f).cwiseMin(1.0f);
  return SensoryState(std::move(next), H, W);
}

/// Refresh from value-side features with a separate set of weights.
inline SensoryState deep_update(const SensoryState &state, const Matrix &value_features,
                                const GruWeights &deep_weights) {
  return gru_step(state, value_features, deep_weights);
}

/**
 * Writes `path` as flat little-endian float32 tensors (w_z, b_z, w_r, b_r,
 * w_h, b_h; matrices column-major) and `path` + ".json" with shapes and
 * byte offsets.
 */
inline void save_gru_weights(const GruWeights &g, const std::filesystem::path &path) {
  g.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw Error("save_gru_weights: cannot open " + path.string());
  nlohmann::json meta;
  meta["format"] = "xmem-gru-f32le";
  meta["input_channels"] = g.input_channels;
  meta["hidden_channels"] = g.hidden_channels;
  meta["kernel_size"] = g.kernel_size;
  std::size_t offset = 0;
  auto emit = [&](const char *name, const float *data, Index rows, Index cols) {
    detail::write_f32le(os, data, static_cast<std::size_t>(rows * cols));
    meta["tensors"].push_back({{"name", name}, {"shape", {rows, cols}}, {"offset", offset}});
    offset += static_cast<std::size_t>(rows * cols) * 4;
  };
  emit("w_z", g.w_z.data(), g.w_z.rows(), g.w_z.cols());
  emit("b_z", g.b_z.data(), g.b_z.rows(), 1);
  emit("w_r", g.w_r.data(), g.w_r.rows(), g.w_r.cols());
  emit("b_r", g.b_r.data(), g.b_r.rows(), 1);
  emit("w_h", g.w_h.data(), g.w_h.rows(), g.w_h.cols());
  emit("b_h", g.b_h.data(), g.b_h.rows(), 1);
  std::ofstream js(path.string() + ".json");
  js << meta.dump(2) << '\n';
}

inline GruWeights load_gru_weights(const std::filesystem::path &path) {
  std::ifstream js(path.string() + ".json");
  if (!js)
    throw Error("load_gru_weights: missing sidecar " + path.string() + ".json");
  const nlohmann::json meta = nlohmann::json::parse(js);
  GruWeights g = GruWeights::zeros(meta.at("input_channels").get<std::size_t>(),
                                   meta.at("hidden_channels").get<std::size_t>(),
                                   meta.at("kernel_size").get<std::size_t>());

  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw Error("load_gru_weights: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  for (const auto &t : meta.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto rows = t.at("shape").at(0).get<Index>();
    const auto cols = t.at("shape").at(1).get<Index>();
    const auto offset = t.at("offset").get<std::size_t>();
    float *dst = nullptr;
    Index want_rows = 0, want_cols = 0;
    if (name == "w_z") { dst = g.w_z.data(); want_rows = g.w_z.rows(); want_cols = g.w_z.cols(); }
    else if (name == "w_r") { dst = g.w_r.data(); want_rows = g.w_r.rows(); want_cols = g.w_r.cols(); }
    else if (name == "w_h") { dst = g.w_h.data(); want_rows = g.w_h.rows(); want_cols = g.w_h.cols(); }
    else if (name == "b_z") { dst = g.b_z.data(); want_rows = g.b_z.rows(); want_cols = 1; }
    else if (name == "b_r") { dst = g.b_r.data(); want_rows = g.b_r.rows(); want_cols = 1; }
    else if (name == "b_h") { dst = g.b_h.data(); want_rows = g.b_h.rows(); want_cols = 1; }
    else throw ValidationError("load_gru_weights: unknown tensor " + name);
    detail::require_shape(("load_gru_weights " + name).c_str(), rows, cols, want_rows, want_cols);
    const auto count = static_cast<std::size_t>(rows * cols);
    if (offset + count * 4 > bytes.size())
      throw ValidationError("load_gru_weights: tensor " + name + " runs past end of file");
    for (std::size_t i = 0; i < count; ++i)
      dst[i] = detail::f32_from_le(bytes.data() + offset + 4 * i);
  }
  g.validate();
  return g;
}

} // namespace xmem
