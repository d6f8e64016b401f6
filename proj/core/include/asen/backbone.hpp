#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "asen/autodiff.hpp"
#include "asen/rng.hpp"

namespace asen {

enum class BackboneKind { tiny_conv, precomputed };

struct BackboneConfig {
  BackboneKind kind = BackboneKind::tiny_conv;
  std::size_t image_size = 32;
  std::size_t image_channels = 3;
  // Widths of the hidden stages; the last stage emits out_channels.
  std::vector<std::size_t> stage_widths = {16, 32};
  std::size_t out_channels = 32;
  // Only read for precomputed features; tiny_conv derives it from image_size.
  std::size_t precomputed_spatial = 4;

  std::size_t stages() const noexcept { return stage_widths.size() + 1; }
  std::size_t out_spatial() const noexcept;
  void validate() const;
};

inline constexpr std::size_t kStageKernel = 2;
inline constexpr std::size_t kStageStride = 2;

/// Unpadded convolution of a cin x H x W input with a cout x cin x k x k kernel.
Var strided_conv2d(Var input, Var kernel, Var bias, std::size_t stride);

/// Fan-in scaled uniform init: U(-b, b), b = sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

/// Stack of stride-2 convolution + ReLU stages mapping an image to a c x h x w map.
class TinyBackbone {
 public:
  TinyBackbone() = default;
  // Registers "backbone.stageN.{weight,bias}" in `params`.
  TinyBackbone(const BackboneConfig& config, ParameterSet& params, Rng& rng);

  Var forward(Tape& tape, const Tensor& image, const ParameterSet& params) const;

 private:
  BackboneConfig config_;
  std::vector<std::pair<std::size_t, std::size_t>> stages_;  // (weight index, bias index)
};

struct FeatureRecord {
  std::string image_id;
  Tensor features;
};

/// Reads a manifest (one image id per line) and a rank-4 tensor file of stacked
/// c x h x w maps, in manifest order. Extents are checked against `expected`.
std::vector<FeatureRecord> load_precomputed_features(const std::filesystem::path& manifest,
                                                     const std::filesystem::path& tensors,
                                                     const Shape& expected);

void save_precomputed_features(const std::filesystem::path& manifest,
                               const std::filesystem::path& tensors,
                               const std::vector<FeatureRecord>& records);

}  // namespace asen
